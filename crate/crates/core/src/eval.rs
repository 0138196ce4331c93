//! Count metrics, ranking-consistency audits and density exports.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, RgbImage, Sample};
use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::losses::margin_rank_pair;
use crate::model::Model;
use crate::patches::{self, CenterDraw, CropBox, LevelShape, RankPairSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub id: String,
    pub predicted: f64,
    pub truth: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub mae: f64,
    pub rmse: f64,
    pub per_image: Vec<ImageResult>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_json(path, self)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from("id,predicted,truth,abs_error\n");
        for r in &self.per_image {
            text.push_str(&format!("{},{},{},{}\n", r.id, r.predicted, r.truth, r.abs_error));
        }
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Mean absolute error and root mean squared error of per-image counts.
pub fn mae_rmse(predicted: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if predicted.is_empty() || predicted.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "need equally many predictions and truths, got {} and {}",
            predicted.len(),
            truth.len()
        )));
    }
    let n = predicted.len() as f64;
    let (abs, sq) = predicted.iter().zip(truth).fold((0.0, 0.0), |(a, s), (p, t)| {
        let d = p - t;
        (a + d.abs(), s + d * d)
    });
    Ok((abs / n, (sq / n).sqrt()))
}

/// Anything that maps an image to a density map.
pub trait DensityPredictor {
    fn predict(&self, sample: &Sample) -> Result<DensityMap>;
}

/// Network inference on the whole, un-augmented image.
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl DensityPredictor for ModelPredictor<'_> {
    fn predict(&self, sample: &Sample) -> Result<DensityMap> {
        let view = data::plain_view(sample, self.mean, self.std);
        let x = data::image_batch(&[view], self.model.dtype(), self.model.device())?;
        let d = self.model.predict_density(&x)?;
        let (_, _, h, w) = d.dims4()?;
        let values = d.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?;
        // ReLU output is non-negative; clamp away any negative zero noise.
        DensityMap::from_vec(h, w, values.into_iter().map(|v| v.max(0.0)).collect())
    }
}

/// Returns the ground-truth density; a perfect predictor.
pub struct GroundTruthOracle;

impl DensityPredictor for GroundTruthOracle {
    fn predict(&self, sample: &Sample) -> Result<DensityMap> {
        sample
            .density
            .clone()
            .ok_or_else(|| Error::InvalidInput(format!("sample {} has no annotation", sample.id)))
    }
}

/// Scores `predictor` against the annotated head counts of `samples`.
pub fn evaluate<P: DensityPredictor + ?Sized>(predictor: &P, samples: &[Sample]) -> Result<EvalReport> {
    let mut per_image = Vec::with_capacity(samples.len());
    for s in samples {
        let truth = s
            .true_count()
            .ok_or_else(|| Error::InvalidInput(format!("sample {} has no annotation", s.id)))? as f64;
        let predicted = predictor.predict(s)?.mass();
        per_image.push(ImageResult {
            id: s.id.clone(),
            predicted,
            truth,
            abs_error: (predicted - truth).abs(),
        });
    }
    let pred: Vec<f64> = per_image.iter().map(|r| r.predicted).collect();
    let truth: Vec<f64> = per_image.iter().map(|r| r.truth).collect();
    let (mae, rmse) = mae_rmse(&pred, &truth)?;
    Ok(EvalReport {
        images: per_image.len(),
        mae,
        rmse,
        per_image,
    })
}

pub fn evaluate_model(model: &Model, samples: &[Sample], mean: [f32; 3], std: [f32; 3]) -> Result<EvalReport> {
    evaluate(&ModelPredictor { model, mean, std }, samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub crops: usize,
    pub ratio: f64,
    pub min_side: usize,
    pub epsilon: f64,
    /// Level indices to audit.
    pub levels: Vec<usize>,
    /// Random centers per image.
    pub centers: usize,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            crops: 4,
            ratio: 0.75,
            min_side: patches::DEFAULT_MIN_SIDE,
            epsilon: 0.0,
            levels: vec![0, 1, 2],
            centers: 4,
            seed: 0,
        }
    }
}

/// Produces nested-patch counts for ranking audits.
pub trait PyramidCounter {
    /// Counts indexed `[draw][level][patch]`, patch 0 the smallest crop.
    fn nested_counts(&self, sample: &Sample, draws: &[CenterDraw], config: &AuditConfig) -> Result<Vec<Vec<Vec<f64>>>>;
}

/// Feature-level nested patches counted by the network.
pub struct ModelCounter<'a> {
    pub model: &'a Model,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl PyramidCounter for ModelCounter<'_> {
    fn nested_counts(&self, sample: &Sample, draws: &[CenterDraw], config: &AuditConfig) -> Result<Vec<Vec<Vec<f64>>>> {
        let view = data::plain_view(sample, self.mean, self.std);
        let x = data::image_batch(&[view], self.model.dtype(), self.model.device())?;
        let pyramid = self.model.extract(&x)?;
        let mut out = vec![Vec::with_capacity(config.levels.len()); draws.len()];
        for &level in &config.levels {
            let feats = pyramid
                .levels
                .get(level)
                .ok_or_else(|| Error::InvalidParameter(format!("model has no level {level}")))?
                .get(0)?;
            let (c, h, w) = feats.dims3()?;
            let shape = LevelShape {
                channels: c,
                height: h,
                width: w,
            };
            let mut batches = Vec::with_capacity(draws.len());
            for draw in draws {
                let set = patches::generate_nested_boxes(shape, draw.locate(h, w)?, config.crops, config.ratio, config.min_side)?;
                batches.push(patches::nested_patch_batch(&feats, &set)?);
            }
            let stacked = candle_core::Tensor::cat(&batches, 0)?;
            let counts = self
                .model
                .count_from_patch(level, &stacked)?
                .to_dtype(candle_core::DType::F64)?
                .to_vec1::<f64>()?;
            for (d, chunk) in counts.chunks(config.crops + 1).enumerate() {
                out[d].push(chunk.to_vec());
            }
        }
        Ok(out)
    }
}

/// Integrates the ground-truth density over the pixel footprint of nested
/// level boxes. Nested boxes give monotone counts.
pub struct GroundTruthCounter {
    /// Cumulative stride of each audited level index.
    pub strides: Vec<usize>,
}

impl PyramidCounter for GroundTruthCounter {
    fn nested_counts(&self, sample: &Sample, draws: &[CenterDraw], config: &AuditConfig) -> Result<Vec<Vec<Vec<f64>>>> {
        let density = sample
            .density
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("sample {} has no annotation", sample.id)))?;
        let (dh, dw) = (density.height(), density.width());
        let mut out = vec![Vec::with_capacity(config.levels.len()); draws.len()];
        for &level in &config.levels {
            let stride = *self
                .strides
                .get(level)
                .ok_or_else(|| Error::InvalidParameter(format!("no stride for level {level}")))?;
            let (h, w) = (dh / stride, dw / stride);
            let shape = LevelShape {
                channels: 1,
                height: h,
                width: w,
            };
            for (d, draw) in draws.iter().enumerate() {
                let set = patches::generate_nested_boxes(shape, draw.locate(h, w)?, config.crops, config.ratio, config.min_side)?;
                let counts = set
                    .boxes
                    .iter()
                    .map(|b| density.integrate(&level_box_to_pixels(b, stride, dh, dw)))
                    .collect::<Result<Vec<_>>>()?;
                out[d].push(counts);
            }
        }
        Ok(out)
    }
}

/// Pixel footprint of a level box (no receptive-field growth).
pub fn level_box_to_pixels(region: &CropBox, stride: usize, height: usize, width: usize) -> CropBox {
    let top = (region.top * stride).min(height);
    let left = (region.left * stride).min(width);
    CropBox {
        top,
        left,
        height: (region.bottom() * stride).min(height) - top,
        width: (region.right() * stride).min(width) - left,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub images: usize,
    pub pairs: usize,
    pub violations: usize,
    /// Fraction of ordered pairs whose smaller crop out-counts the larger.
    pub violation_rate: f64,
    pub mean_hinge: f64,
}

/// Samples `config.centers` centers per image and checks every nested pair.
pub fn rank_audit<C: PyramidCounter + ?Sized>(counter: &C, samples: &[Sample], config: &AuditConfig) -> Result<AuditReport> {
    if samples.is_empty() || config.centers == 0 || config.levels.is_empty() {
        return Err(Error::InvalidInput("audit needs images, centers and levels".into()));
    }
    let pairs = RankPairSet::for_crops(config.crops);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut total, mut violations, mut hinge) = (0usize, 0usize, 0.0f64);
    for s in samples {
        let draws: Vec<CenterDraw> = (0..config.centers).map(|_| CenterDraw::sample(&mut rng)).collect();
        for per_draw in counter.nested_counts(s, &draws, config)? {
            for counts in per_draw {
                for &(small, large) in &pairs.pairs {
                    total += 1;
                    if counts[small] > counts[large] {
                        violations += 1;
                    }
                    hinge += margin_rank_pair(counts[small], counts[large], config.epsilon);
                }
            }
        }
    }
    Ok(AuditReport {
        images: samples.len(),
        pairs: total,
        violations,
        violation_rate: violations as f64 / total as f64,
        mean_hinge: hinge / total as f64,
    })
}

/// Writes the density as a raw float raster.
pub fn export_density(map: &DensityMap, path: &Path) -> Result<()> {
    map.save(path)
}

pub const MASS_KEYWORD: &str = "mass";
const HEAT_OPACITY: f32 = 0.6;

fn colormap(t: f32) -> [f32; 3] {
    let ramp = |c: f32| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// RGBA heat layer at `height x width` (nearest sampling of the map), with
/// opacity proportional to density. An all-zero map is fully transparent.
pub fn heat_layer(map: &DensityMap, height: usize, width: usize) -> image::RgbaImage {
    let peak = map.data().iter().copied().fold(0.0f32, f32::max);
    let mut out = image::RgbaImage::new(width as u32, height as u32);
    if peak <= 0.0 || map.height() == 0 || map.width() == 0 {
        return out;
    }
    for (x, y, px) in out.enumerate_pixels_mut() {
        let r = (y as usize * map.height() / height).min(map.height() - 1);
        let c = (x as usize * map.width() / width).min(map.width() - 1);
        let t = map.get(r, c) / peak;
        let [red, green, blue] = colormap(t);
        *px = image::Rgba([
            (red * 255.0).round() as u8,
            (green * 255.0).round() as u8,
            (blue * 255.0).round() as u8,
            (t * HEAT_OPACITY * 255.0).round() as u8,
        ]);
    }
    out
}

/// Alpha-blends the heat layer over `image` and writes an RGB PNG whose
/// `mass` text chunk records the integral of `map`.
pub fn export_overlay(image: &RgbImage, map: &DensityMap, path: &Path) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let heat = heat_layer(map, h, w);
    let base = image.to_rgb8();
    let mut pixels = Vec::with_capacity(h * w * 3);
    for (b, t) in base.pixels().zip(heat.pixels()) {
        let a = t.0[3] as u32;
        for ch in 0..3 {
            let v = (b.0[ch] as u32 * (255 - a) + t.0[ch] as u32 * a + 127) / 255;
            pixels.push(v as u8);
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let png_err = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    encoder
        .add_text_chunk(MASS_KEYWORD.into(), format!("{}", map.mass()))
        .map_err(png_err)?;
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(&pixels).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Reads the `mass` annotation written by [`export_overlay`].
pub fn read_overlay_mass(path: &Path) -> Result<f64> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let image_err = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| image_err(e.to_string()))?;
    let chunk = reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .find(|c| c.keyword == MASS_KEYWORD)
        .ok_or_else(|| image_err("no mass annotation".into()))?;
    chunk
        .text
        .parse()
        .map_err(|e| image_err(format!("bad mass annotation '{}': {e}", chunk.text)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{HeadPointSet, KernelSpec};

    #[test]
    fn metric_examples() {
        let (mae, rmse) = mae_rmse(&[10.0, 20.0], &[12.0, 18.0]).unwrap();
        assert_eq!((mae, rmse), (2.0, 2.0));
        let (mae, rmse) = mae_rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert_eq!(mae, 3.5);
        assert!((rmse - 12.5f64.sqrt()).abs() < 1e-12);
        assert!(mae_rmse(&[], &[]).is_err());
    }

    fn labeled(points: Vec<[f64; 2]>) -> Sample {
        let image = RgbImage::filled(64, 64, 0.5);
        let pts = HeadPointSet::new(points, 64, 64).unwrap();
        Sample::labeled("s".into(), image, pts, &KernelSpec::Fixed { sigma: 2.0 }).unwrap()
    }

    #[test]
    fn oracle_scores_perfectly() {
        let samples = vec![labeled(vec![[10.0, 10.0], [30.5, 40.0]]), labeled(vec![])];
        let report = evaluate(&GroundTruthOracle, &samples).unwrap();
        assert!(report.mae < 1e-4 && report.rmse < 1e-4);
        assert_eq!(report.images, 2);
    }

    #[test]
    fn ground_truth_audit_has_no_violations() {
        let pts: Vec<[f64; 2]> = (0..30).map(|i| [(i * 7 % 64) as f64 + 0.5, (i * 13 % 64) as f64 + 0.5]).collect();
        let counter = GroundTruthCounter { strides: vec![2, 4, 8] };
        let report = rank_audit(&counter, &[labeled(pts)], &AuditConfig::default()).unwrap();
        assert_eq!(report.pairs, 4 * 3 * 10);
        assert_eq!(report.violations, 0);
        assert_eq!(report.mean_hinge, 0.0);
    }

    #[test]
    fn level_boxes_scale_by_stride() {
        let b = CropBox {
            top: 1,
            left: 2,
            height: 3,
            width: 4,
        };
        let p = level_box_to_pixels(&b, 8, 30, 100);
        assert_eq!((p.top, p.left, p.height, p.width), (8, 16, 22, 32));
    }

    #[test]
    fn zero_map_gives_transparent_heat() {
        let heat = heat_layer(&DensityMap::zeros(4, 4), 8, 8);
        assert!(heat.pixels().all(|p| p.0[3] == 0));
    }

    #[test]
    fn overlay_round_trips_mass() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.png");
        let map = DensityMap::from_vec(2, 2, vec![0.25, 0.5, 0.0, 1.75]).unwrap();
        export_overlay(&RgbImage::filled(4, 4, 0.2), &map, &path).unwrap();
        assert_eq!(read_overlay_mass(&path).unwrap(), 2.5);

        let blank = dir.path().join("z.png");
        let image = RgbImage::filled(4, 4, 0.2);
        export_overlay(&image, &DensityMap::zeros(4, 4), &blank).unwrap();
        let back = image::open(&blank).unwrap().to_rgb8();
        assert_eq!(back, image.to_rgb8());
    }
}
