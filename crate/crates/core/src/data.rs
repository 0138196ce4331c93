//! Corpora on disk, labeled/unlabeled splits, augmentation and the synthetic
//! desk-scale crowd generator.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{ImageBuffer, Rgb};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_json, write_json};
use crate::density::{DensityMap, HeadPointSet, KernelSpec};
use crate::error::{Error, Result};

pub const CORPUS_FILE: &str = "corpus.json";
pub const DEFAULT_RESIZE_CAP: usize = 1920;
/// Channel mean/std commonly paired with ImageNet-pretrained backbones.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// RGB image stored planar (channel, row, column) with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width || height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "{} values do not form a 3x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; 3 * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * self.height + row) * self.width + col]
    }

    fn set(&mut self, channel: usize, row: usize, col: usize, value: f32) {
        self.data[(channel * self.height + row) * self.width + col] = value;
    }

    pub fn load(path: &Path) -> Result<Self> {
        let decoded = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Self::from_rgb32f(&decoded.to_rgb32f()))
    }

    fn from_rgb32f(buf: &ImageBuffer<Rgb<f32>, Vec<f32>>) -> Self {
        let (w, h) = (buf.width() as usize, buf.height() as usize);
        let mut data = vec![0f32; 3 * h * w];
        for (x, y, px) in buf.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px.0[c].clamp(0.0, 1.0);
            }
        }
        Self {
            height: h,
            width: w,
            data,
        }
    }

    fn to_rgb32f(&self) -> ImageBuffer<Rgb<f32>, Vec<f32>> {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)])
        })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([0, 1, 2].map(|c| (self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        Self { data, ..*self }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::InvalidRegion(format!(
                "crop {height}x{width}+{top}+{left} exceeds the {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for r in top..top + height {
                let start = (c * self.height + r) * self.width + left;
                data.extend_from_slice(&self.data[start..start + width]);
            }
        }
        Ok(Self { height, width, data })
    }

    /// Bilinear (triangle filter) resize.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        let resized = image::imageops::resize(
            &self.to_rgb32f(),
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        );
        Self::from_rgb32f(&resized)
    }

    /// `(x − mean_c) / std_c` per channel, planar.
    pub fn normalized(&self, mean: [f32; 3], std: [f32; 3]) -> Vec<f32> {
        let plane = self.height * self.width;
        self.data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / plane;
                (v - mean[c]) / std[c]
            })
            .collect()
    }
}

/// Per-image annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub points: Vec<[f64; 2]>,
}

impl Annotation {
    pub fn head_points(&self) -> Result<HeadPointSet> {
        HeadPointSet::new(self.points.clone(), self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub id: String,
    /// Paths relative to the corpus root.
    pub image: String,
    pub annotation: Option<String>,
}

/// A corpus directory: `corpus.json` listing image/annotation pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub root: PathBuf,
    pub entries: Vec<CorpusEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusFile {
    entries: Vec<CorpusEntry>,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Self> {
        let file: CorpusFile = read_json(&root.join(CORPUS_FILE))?;
        Ok(Self {
            root: root.to_path_buf(),
            entries: file.entries,
        })
    }

    pub fn write_index(&self) -> Result<()> {
        write_json(
            &self.root.join(CORPUS_FILE),
            &CorpusFile {
                entries: self.entries.clone(),
            },
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn annotation(&self, idx: usize) -> Result<Option<Annotation>> {
        match &self.entries[idx].annotation {
            Some(rel) => Ok(Some(read_json(&self.root.join(rel))?)),
            None => Ok(None),
        }
    }

    /// Loads entry `idx`, capping the shorter side at `cap` pixels. With
    /// `labeled`, the annotation is required and its density is rendered.
    pub fn load_sample(&self, idx: usize, labeled: bool, kernel: &KernelSpec, cap: usize) -> Result<Sample> {
        let entry = &self.entries[idx];
        let image = RgbImage::load(&self.root.join(&entry.image))?;
        let annotation = self.annotation(idx)?;
        let points = match annotation {
            Some(a) => {
                if (a.height, a.width) != (image.height(), image.width()) {
                    return Err(Error::InvalidAnnotation(format!(
                        "{}: annotation size {}x{} differs from image {}x{}",
                        entry.id,
                        a.height,
                        a.width,
                        image.height(),
                        image.width()
                    )));
                }
                Some(a.head_points()?)
            }
            None if labeled => {
                return Err(Error::InvalidInput(format!(
                    "entry {} is marked labeled but has no annotation",
                    entry.id
                )))
            }
            None => None,
        };
        let (image, points) = match points {
            Some(p) => {
                let (img, p) = resize_cap(&image, &p, cap)?;
                (img, Some(p))
            }
            None => {
                let dummy = HeadPointSet::empty(image.height(), image.width())?;
                (resize_cap(&image, &dummy, cap)?.0, None)
            }
        };
        if labeled {
            Sample::labeled(entry.id.clone(), image, points.unwrap(), kernel)
        } else {
            Ok(Sample::unlabeled(entry.id.clone(), image))
        }
    }
}

/// One training or evaluation image. `density` is present iff labeled.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub points: Option<HeadPointSet>,
    pub density: Option<DensityMap>,
}

impl Sample {
    pub fn labeled(id: String, image: RgbImage, points: HeadPointSet, kernel: &KernelSpec) -> Result<Self> {
        if (points.height(), points.width()) != (image.height(), image.width()) {
            return Err(Error::InvalidAnnotation(format!(
                "{id}: points are for {}x{}, image is {}x{}",
                points.height(),
                points.width(),
                image.height(),
                image.width()
            )));
        }
        let density = kernel.render(&points)?;
        Ok(Self {
            id,
            image,
            points: Some(points),
            density: Some(density),
        })
    }

    pub fn unlabeled(id: String, image: RgbImage) -> Self {
        Self {
            id,
            image,
            points: None,
            density: None,
        }
    }

    pub fn is_labeled(&self) -> bool {
        self.density.is_some()
    }

    pub fn true_count(&self) -> Option<usize> {
        self.points.as_ref().map(|p| p.len())
    }
}

/// Disjoint labeled/unlabeled partition of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub entries: Vec<CorpusEntry>,
    pub labeled_ids: Vec<usize>,
    pub unlabeled_ids: Vec<usize>,
    pub split_seed: u64,
}

impl CorpusIndex {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Picks `⌊ratio · |corpus|⌋` annotated entries as labeled; all other
/// entries become unlabeled.
pub fn split(corpus: &Corpus, labeled_ratio: f64, seed: u64) -> Result<CorpusIndex> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty corpus".into()));
    }
    if !(labeled_ratio > 0.0 && labeled_ratio <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "labeled ratio must lie in (0, 1], got {labeled_ratio}"
        )));
    }
    let n = corpus.len();
    let wanted = ((labeled_ratio * n as f64) + 1e-9).floor() as usize;
    let mut annotated: Vec<usize> = corpus
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.annotation.is_some())
        .map(|(i, _)| i)
        .collect();
    if wanted > annotated.len() {
        return Err(Error::InvalidInput(format!(
            "{wanted} labeled images requested but only {} are annotated",
            annotated.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    annotated.shuffle(&mut rng);
    let mut labeled: Vec<usize> = annotated[..wanted].to_vec();
    labeled.sort_unstable();
    let unlabeled: Vec<usize> = (0..n).filter(|i| labeled.binary_search(i).is_err()).collect();
    Ok(CorpusIndex {
        entries: corpus.entries.clone(),
        labeled_ids: labeled,
        unlabeled_ids: unlabeled,
        split_seed: seed,
    })
}

/// Scales the image so its shorter side is at most `cap`, keeping the aspect
/// ratio; points move with the image.
pub fn resize_cap(image: &RgbImage, points: &HeadPointSet, cap: usize) -> Result<(RgbImage, HeadPointSet)> {
    if cap == 0 {
        return Err(Error::InvalidParameter("resize cap must be positive".into()));
    }
    let (h, w) = (image.height(), image.width());
    let short = h.min(w);
    if short <= cap {
        return Ok((image.clone(), points.clone()));
    }
    let scale = cap as f64 / short as f64;
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let nw = ((w as f64 * scale).round() as usize).max(1);
    let resized = image.resize(nh, nw);
    let moved = scale_points(points, scale, nh, nw)?;
    Ok((resized, moved))
}

fn scale_points(points: &HeadPointSet, scale: f64, height: usize, width: usize) -> Result<HeadPointSet> {
    let clamp = |v: f64, len: usize| v.min((len as f64).next_down()).max(0.0);
    let scaled = points
        .points()
        .iter()
        .map(|&[x, y]| [clamp(x * scale, width), clamp(y * scale, height)])
        .collect();
    HeadPointSet::new(scaled, height, width)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_height: usize,
    pub crop_width: usize,
    pub flip: bool,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub kernel: KernelSpec,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_height: 224,
            crop_width: 224,
            flip: true,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            kernel: KernelSpec::default(),
        }
    }
}

/// Network-ready view of a sample after augmentation.
#[derive(Debug, Clone)]
pub struct AugmentedSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Normalized planar pixels.
    pub pixels: Vec<f32>,
    pub points: Option<HeadPointSet>,
    pub density: Option<DensityMap>,
}

pub fn flip_points(points: &HeadPointSet) -> Result<HeadPointSet> {
    let w = points.width() as f64;
    let flipped = points
        .points()
        .iter()
        .map(|&[x, y]| [(w - x).min(w.next_down()), y])
        .collect();
    HeadPointSet::new(flipped, points.height(), points.width())
}

/// Random crop of `points` to the box, in crop-local coordinates.
pub fn crop_points(points: &HeadPointSet, top: usize, left: usize, height: usize, width: usize) -> Result<HeadPointSet> {
    let (t, l) = (top as f64, left as f64);
    let kept = points
        .points()
        .iter()
        .filter(|&&[x, y]| x >= l && x < l + width as f64 && y >= t && y < t + height as f64)
        .map(|&[x, y]| [x - l, y - t])
        .collect();
    HeadPointSet::new(kept, height, width)
}

/// Horizontal flip with probability 1/2, a random crop, and normalization.
/// The density of a labeled sample is re-rendered from the surviving points,
/// so its mass equals their count.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, config: &AugmentConfig, rng: &mut R) -> Result<AugmentedSample> {
    let (h, w) = (sample.image.height(), sample.image.width());
    let (ch, cw) = (config.crop_height, config.crop_width);
    if ch == 0 || cw == 0 || ch > h || cw > w {
        return Err(Error::InvalidParameter(format!(
            "crop {ch}x{cw} does not fit the {h}x{w} image {}",
            sample.id
        )));
    }
    let flip = config.flip && rng.random_bool(0.5);
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);

    let mut image = if flip {
        sample.image.flip_horizontal()
    } else {
        sample.image.clone()
    };
    image = image.crop(top, left, ch, cw)?;

    let (points, density) = match (&sample.points, sample.is_labeled()) {
        (Some(p), true) => {
            let p = if flip { flip_points(p)? } else { p.clone() };
            let p = crop_points(&p, top, left, ch, cw)?;
            let d = config.kernel.render(&p)?;
            (Some(p), Some(d))
        }
        _ => (None, None),
    };
    Ok(AugmentedSample {
        id: sample.id.clone(),
        height: ch,
        width: cw,
        pixels: image.normalized(config.mean, config.std),
        points,
        density,
    })
}

/// Evaluation view: whole image, normalized, no augmentation.
pub fn plain_view(sample: &Sample, mean: [f32; 3], std: [f32; 3]) -> AugmentedSample {
    AugmentedSample {
        id: sample.id.clone(),
        height: sample.image.height(),
        width: sample.image.width(),
        pixels: sample.image.normalized(mean, std),
        points: sample.points.clone(),
        density: sample.density.clone(),
    }
}

/// Stacks normalized images into an `N x 3 x H x W` tensor.
pub fn image_batch(samples: &[AugmentedSample], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    if samples.iter().any(|s| (s.height, s.width) != (h, w)) {
        return Err(Error::InvalidInput("batch images differ in size".into()));
    }
    let data: Vec<f32> = samples.iter().flat_map(|s| s.pixels.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (samples.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// Stacks ground-truth densities into an `N x 1 x H x W` tensor.
pub fn density_batch(samples: &[AugmentedSample], dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape = None;
    for s in samples {
        let d = s
            .density
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("sample {} has no density", s.id)))?;
        let dims = (d.height(), d.width());
        if *shape.get_or_insert(dims) != dims {
            return Err(Error::InvalidInput("batch densities differ in size".into()));
        }
        data.extend_from_slice(d.data());
    }
    let (h, w) = shape.ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    Ok(Tensor::from_vec(data, (samples.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub images: usize,
    pub min_count: usize,
    pub max_count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            images: 200,
            min_count: 5,
            max_count: 80,
            height: 128,
            width: 128,
            seed: 0,
        }
    }
}

/// A rendered synthetic "person": a filled disc.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub color: [f32; 3],
}

/// Renders one synthetic crowd image: smooth background with pixel noise,
/// then `count` discs of radius 2–5 px with random colors. Returns the image
/// and the discs in drawing order (their centers are the head points).
pub fn render_synthetic<R: Rng + ?Sized>(height: usize, width: usize, count: usize, rng: &mut R) -> (RgbImage, Vec<Blob>) {
    let noise = Normal::new(0.0f32, 0.04).unwrap();
    let base: [f32; 3] = [0, 1, 2].map(|_| rng.random_range(0.15..0.4));
    let tilt: [f32; 3] = [0, 1, 2].map(|_| rng.random_range(-0.1..0.1));
    let mut img = RgbImage::filled(height, width, 0.0);
    for c in 0..3 {
        for r in 0..height {
            for col in 0..width {
                let ramp = tilt[c] * (r as f32 / height as f32 - 0.5);
                let v = base[c] + ramp + noise.sample(rng);
                img.set(c, r, col, v.clamp(0.0, 1.0));
            }
        }
    }
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        let radius = rng.random_range(2.0..=5.0);
        let x = rng.random_range(0.0..width as f64);
        let y = rng.random_range(0.0..height as f64);
        let brightness = rng.random_range(0.6f32..1.0);
        let tint: [f32; 3] = [0, 1, 2].map(|_| rng.random_range(0.8f32..1.0));
        let color = [0, 1, 2].map(|c| (brightness * tint[c]).min(1.0));
        let blob = Blob { x, y, radius, color };
        draw_disc(&mut img, &blob);
        blobs.push(blob);
    }
    (img, blobs)
}

fn draw_disc(img: &mut RgbImage, blob: &Blob) {
    let (h, w) = (img.height() as f64, img.width() as f64);
    let r0 = (blob.y - blob.radius).floor().max(0.0) as usize;
    let r1 = (blob.y + blob.radius).ceil().min(h - 1.0) as usize;
    let c0 = (blob.x - blob.radius).floor().max(0.0) as usize;
    let c1 = (blob.x + blob.radius).ceil().min(w - 1.0) as usize;
    for r in r0..=r1 {
        for c in c0..=c1 {
            let (dy, dx) = (r as f64 + 0.5 - blob.y, c as f64 + 0.5 - blob.x);
            if dx * dx + dy * dy <= blob.radius * blob.radius {
                for ch in 0..3 {
                    img.set(ch, r, c, blob.color[ch]);
                }
            }
        }
        // the pixel holding the center is always painted
    }
    let (cr, cc) = (blob.y.floor() as usize, blob.x.floor() as usize);
    for ch in 0..3 {
        img.set(ch, cr, cc, blob.color[ch]);
    }
}

/// Writes `images/NNNN.png`, `annotations/NNNN.json` and `corpus.json` under
/// `root`. Counts are uniform over `[min_count, max_count]`.
pub fn synth_corpus(root: &Path, config: &SynthConfig) -> Result<Corpus> {
    if config.images == 0 {
        return Err(Error::InvalidParameter("synthetic corpus needs at least one image".into()));
    }
    if config.min_count > config.max_count || config.height == 0 || config.width == 0 {
        return Err(Error::InvalidParameter(format!("invalid synthetic config {config:?}")));
    }
    for sub in ["images", "annotations"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut entries = Vec::with_capacity(config.images);
    for i in 0..config.images {
        let count = rng.random_range(config.min_count..=config.max_count);
        let (img, blobs) = render_synthetic(config.height, config.width, count, &mut rng);
        let id = format!("{i:04}");
        let image_rel = format!("images/{id}.png");
        let ann_rel = format!("annotations/{id}.json");
        img.save_png(&root.join(&image_rel))?;
        let annotation = Annotation {
            image: image_rel.clone(),
            width: config.width,
            height: config.height,
            points: blobs.iter().map(|b| [b.x, b.y]).collect(),
        };
        write_json(&root.join(&ann_rel), &annotation)?;
        entries.push(CorpusEntry {
            id,
            image: image_rel,
            annotation: Some(ann_rel),
        });
    }
    let corpus = Corpus {
        root: root.to_path_buf(),
        entries,
    };
    corpus.write_index()?;
    Ok(corpus)
}
