//! Pyramid feature extractor and shared density estimator.
//!
//! The extractor is a plain convolution/pooling stack split into stages; the
//! outputs of the tapped stages form the pyramid (low to high). Each level
//! owns a 1x1 adapter that projects it to the decoder width, so one decoder
//! (six dilated 3x3 convolutions, a 1x1 head and an upsampler) serves every
//! level and the labeled forward pass.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::patches::LevelGeometry;
use crate::unfold::Unfold;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Toy,
    Vgg16Truncated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelTag {
    Low,
    Mid,
    High,
}

impl LevelTag {
    /// Tag of pyramid level `index` out of `count`.
    pub fn for_index(index: usize, count: usize) -> Self {
        if index + 1 == count {
            LevelTag::High
        } else if index == 0 {
            LevelTag::Low
        } else {
            LevelTag::Mid
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LevelTag::Low => "low",
            LevelTag::Mid => "mid",
            LevelTag::High => "high",
        }
    }
}

impl std::str::FromStr for LevelTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(LevelTag::Low),
            "mid" => Ok(LevelTag::Mid),
            "high" => Ok(LevelTag::High),
            other => Err(Error::InvalidParameter(format!("unknown level '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    /// Channel widths of the toy backbone's stages (ignored for VGG).
    #[serde(default = "default_toy_widths")]
    pub toy_widths: Vec<usize>,
    /// Indices of the backbone stages whose outputs form the pyramid.
    pub level_taps: Vec<usize>,
    pub decoder_width: usize,
    #[serde(default = "default_decoder_depth")]
    pub decoder_depth: usize,
    #[serde(default = "default_dilation")]
    pub decoder_dilation: usize,
}

fn default_toy_widths() -> Vec<usize> {
    vec![16, 32, 64]
}

fn default_decoder_depth() -> usize {
    6
}

fn default_dilation() -> usize {
    2
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            backbone: BackboneKind::Toy,
            toy_widths: default_toy_widths(),
            level_taps: vec![0, 1, 2],
            decoder_width: 16,
            decoder_depth: 6,
            decoder_dilation: 2,
        }
    }

    /// First ten convolutions of VGG-16, tapped after the 128-, 256- and
    /// 512-channel blocks (strides 2, 4, 8).
    pub fn vgg16_truncated() -> Self {
        Self {
            backbone: BackboneKind::Vgg16Truncated,
            toy_widths: default_toy_widths(),
            level_taps: vec![1, 2, 3],
            decoder_width: 64,
            decoder_depth: 6,
            decoder_dilation: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let stages = stage_plan(self).len();
        if self.level_taps.is_empty() {
            return Err(Error::InvalidParameter("at least one level tap is required".into()));
        }
        if !self.level_taps.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidParameter(format!(
                "level taps must be distinct and increasing, got {:?}",
                self.level_taps
            )));
        }
        if *self.level_taps.last().unwrap() >= stages {
            return Err(Error::InvalidParameter(format!(
                "level tap {} exceeds the {stages} backbone stages",
                self.level_taps.last().unwrap()
            )));
        }
        if self.decoder_width == 0 || self.decoder_dilation == 0 {
            return Err(Error::InvalidParameter(
                "decoder width and dilation must be positive".into(),
            ));
        }
        if self.backbone == BackboneKind::Toy && self.toy_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidParameter("toy widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum LayerPlan {
    Conv { out: usize, kernel: usize },
    Pool,
}

fn stage_plan(config: &ModelConfig) -> Vec<Vec<LayerPlan>> {
    use LayerPlan::*;
    let conv = |out| Conv { out, kernel: 3 };
    match config.backbone {
        BackboneKind::Toy => config
            .toy_widths
            .iter()
            .map(|&w| vec![conv(w), Pool])
            .collect(),
        BackboneKind::Vgg16Truncated => vec![
            vec![conv(64), conv(64), Pool],
            vec![conv(128), conv(128)],
            vec![Pool, conv(256), conv(256), conv(256)],
            vec![Pool, conv(512), conv(512), conv(512)],
        ],
    }
}

/// A convolution with "same" zero padding, stride 1 and optional dilation.
///
/// Implemented as an explicit im2col (unfold) followed by a matrix product,
/// which keeps both passes on the GEMM path.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Var,
    pub bias: Var,
    kernel: usize,
    dilation: usize,
}

impl Conv {
    fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let n = out_channels * in_channels * kernel * kernel;
        let normal = Normal::new(0.0, std).expect("finite std");
        let values: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        let weight = Tensor::from_vec(values, (out_channels, in_channels, kernel, kernel), device)?
            .to_dtype(dtype)?;
        let bias = Tensor::zeros(out_channels, dtype, device)?;
        Ok(Self {
            weight: Var::from_tensor(&weight)?,
            bias: Var::from_tensor(&bias)?,
            kernel,
            dilation,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.in_channels() {
            return Err(Error::InvalidInput(format!(
                "convolution expects {} channels, got {c}",
                self.in_channels()
            )));
        }
        let out = self.out_channels();
        let k = self.kernel;
        let cols = if k == 1 {
            x.reshape((b, c, h * w))?
        } else {
            x.contiguous()?.apply_op1(Unfold {
                kernel: k,
                dilation: self.dilation,
            })?
        };
        let wmat = self.weight.as_tensor().reshape((out, c * k * k))?;
        let y = wmat.broadcast_matmul(&cols)?;
        let y = y.broadcast_add(&self.bias.as_tensor().reshape((1, out, 1))?)?;
        Ok(y.reshape((b, out, h, w))?)
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Conv(Conv),
    Pool,
}

/// K feature maps (batch x channels x height x width), low to high.
#[derive(Debug, Clone)]
pub struct PyramidFeatures {
    pub levels: Vec<Tensor>,
    pub strides: Vec<usize>,
    pub tags: Vec<LevelTag>,
}

impl PyramidFeatures {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    dtype: DType,
    device: Device,
    stages: Vec<Vec<Layer>>,
    adapters: Vec<Conv>,
    decoder: Vec<Conv>,
    head: Conv,
    geometry: Vec<LevelGeometry>,
}

impl Model {
    /// Builds a model with seeded He-normal initialization.
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();

        let plan = stage_plan(&config);
        let last_stage = *config.level_taps.last().unwrap();
        let mut stages = Vec::new();
        let mut channels = 3usize;
        let mut stage_channels = Vec::new();
        let mut stage_geometry = Vec::new();
        let (mut stride, mut rf) = (1usize, 1usize);
        for stage in plan.iter().take(last_stage + 1) {
            let mut layers = Vec::new();
            for layer in stage {
                match *layer {
                    LayerPlan::Conv { out, kernel } => {
                        let fan_in = channels * kernel * kernel;
                        layers.push(Layer::Conv(Conv::new(
                            channels, out, kernel, 1, he(fan_in), &mut rng, dtype, &device,
                        )?));
                        rf += (kernel - 1) * stride;
                        channels = out;
                    }
                    LayerPlan::Pool => {
                        layers.push(Layer::Pool);
                        rf += stride;
                        stride *= 2;
                    }
                }
            }
            stages.push(layers);
            stage_channels.push(channels);
            stage_geometry.push(LevelGeometry {
                stride,
                receptive_field: rf,
            });
        }

        let width = config.decoder_width;
        let mut adapters = Vec::new();
        let mut geometry = Vec::new();
        for &tap in &config.level_taps {
            let c = stage_channels[tap];
            adapters.push(Conv::new(c, width, 1, 1, he(c), &mut rng, dtype, &device)?);
            geometry.push(stage_geometry[tap]);
        }
        if !geometry.windows(2).all(|g| g[0].stride < g[1].stride) {
            return Err(Error::InvalidParameter(
                "tapped levels must have strictly increasing strides".into(),
            ));
        }
        let decoder = (0..config.decoder_depth)
            .map(|_| {
                Conv::new(
                    width,
                    width,
                    3,
                    config.decoder_dilation,
                    he(width * 9),
                    &mut rng,
                    dtype,
                    &device,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Conv::new(width, 1, 1, 1, he(width), &mut rng, dtype, &device)?;

        Ok(Self {
            config,
            dtype,
            device,
            stages,
            adapters,
            decoder,
            head,
            geometry,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn num_levels(&self) -> usize {
        self.geometry.len()
    }

    pub fn level_geometry(&self) -> &[LevelGeometry] {
        &self.geometry
    }

    pub fn level_tags(&self) -> Vec<LevelTag> {
        let k = self.num_levels();
        (0..k).map(|i| LevelTag::for_index(i, k)).collect()
    }

    pub fn level_index(&self, tag: LevelTag) -> Option<usize> {
        self.level_tags().iter().position(|&t| t == tag)
    }

    /// Stride of the highest level; input sides must be multiples of it.
    pub fn output_stride(&self) -> usize {
        self.geometry.last().unwrap().stride
    }

    /// Smallest accepted input side (eight cells on the highest level).
    pub fn min_input_side(&self) -> usize {
        8 * self.output_stride()
    }

    pub fn adapter_channels(&self, level: usize) -> usize {
        self.adapters[level].in_channels()
    }

    /// Parameters in a fixed order, with stable names.
    pub fn named_params(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        let mut push = |prefix: String, conv: &Conv| {
            out.push((format!("{prefix}.weight"), conv.weight.clone()));
            out.push((format!("{prefix}.bias"), conv.bias.clone()));
        };
        let mut idx = 0;
        for stage in &self.stages {
            for layer in stage {
                if let Layer::Conv(conv) = layer {
                    push(format!("backbone.conv{idx}"), conv);
                    idx += 1;
                }
            }
        }
        for (i, a) in self.adapters.iter().enumerate() {
            push(format!("adapter.{i}"), a);
        }
        for (i, d) in self.decoder.iter().enumerate() {
            push(format!("decoder.{i}"), d);
        }
        push("head".into(), &self.head);
        out
    }

    pub fn params(&self) -> Vec<Var> {
        self.named_params().into_iter().map(|(_, v)| v).collect()
    }

    /// Parameters of the shared density estimator (decoder and head).
    pub fn decoder_params(&self) -> Vec<Var> {
        self.named_params()
            .into_iter()
            .filter(|(n, _)| n.starts_with("decoder.") || n.starts_with("head."))
            .map(|(_, v)| v)
            .collect()
    }

    pub fn head(&self) -> &Conv {
        &self.head
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images
            .dims4()
            .map_err(|_| Error::InvalidInput(format!("expected NCHW images, got {:?}", images.dims())))?;
        let min = self.min_input_side();
        if c != 3 {
            return Err(Error::InvalidInput(format!("expected 3 channels, got {c}")));
        }
        if h < min || w < min {
            return Err(Error::InvalidInput(format!(
                "input {h}x{w} is smaller than the {min}x{min} minimum"
            )));
        }
        Ok(())
    }

    /// Runs the extractor and returns the tapped levels.
    pub fn extract(&self, images: &Tensor) -> Result<PyramidFeatures> {
        self.check_input(images)?;
        let mut x = images.clone();
        let mut levels = Vec::with_capacity(self.num_levels());
        let mut taps = self.config.level_taps.iter().peekable();
        for (s, stage) in self.stages.iter().enumerate() {
            for layer in stage {
                x = match layer {
                    Layer::Conv(conv) => conv.forward(&x)?.relu()?,
                    Layer::Pool => x.max_pool2d(2)?,
                };
            }
            if taps.peek() == Some(&&s) {
                levels.push(x.clone());
                taps.next();
            }
        }
        Ok(PyramidFeatures {
            levels,
            strides: self.geometry.iter().map(|g| g.stride).collect(),
            tags: self.level_tags(),
        })
    }

    /// Decoder output at the patch's own resolution (batch x 1 x h x w).
    pub fn decode(&self, level: usize, patch: &Tensor) -> Result<Tensor> {
        let adapter = self
            .adapters
            .get(level)
            .ok_or_else(|| Error::InvalidInput(format!("no pyramid level {level}")))?;
        let mut x = adapter.forward(patch)?.relu()?;
        for conv in &self.decoder {
            x = conv.forward(&x)?.relu()?;
        }
        Ok(self.head.forward(&x)?.relu()?)
    }

    /// Density at input resolution: the decoder output upsampled by the
    /// level's stride with mass-preserving nearest-neighbour replication.
    pub fn estimate_density(&self, level: usize, patch: &Tensor) -> Result<Tensor> {
        let coarse = self.decode(level, patch)?;
        let s = self.geometry[level].stride;
        let (_, _, h, w) = coarse.dims4()?;
        let up = coarse.upsample_nearest2d(h * s, w * s)?;
        Ok((up / (s * s) as f64)?)
    }

    /// Predicted count of each patch in the batch: the integral of its
    /// density. Upsampling preserves mass, so this sums the decoder output
    /// directly.
    pub fn count_from_patch(&self, level: usize, patch: &Tensor) -> Result<Tensor> {
        Ok(self.decode(level, patch)?.sum((1, 2, 3))?)
    }

    /// Full-image density from the highest pyramid level.
    pub fn predict_density(&self, images: &Tensor) -> Result<Tensor> {
        let pyramid = self.extract(images)?;
        let top = self.num_levels() - 1;
        self.estimate_density(top, &pyramid.levels[top])
    }

    pub fn predict_counts(&self, images: &Tensor) -> Result<Vec<f64>> {
        let density = self.predict_density(images)?;
        Ok(density
            .sum((1, 2, 3))?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?)
    }

    /// Copies every parameter of `other` into this model.
    pub fn copy_from(&self, other: &Model) -> Result<()> {
        for ((name, mine), (_, theirs)) in self.named_params().iter().zip(other.named_params()) {
            if mine.dims() != theirs.dims() {
                return Err(Error::InvalidInput(format!("shape mismatch for {name}")));
            }
            mine.set(theirs.as_tensor())?;
        }
        Ok(())
    }

    /// Deep copy with independent parameter storage.
    pub fn duplicate(&self) -> Result<Model> {
        let mut copy = self.clone();
        let fresh = |c: &Conv| -> Result<Conv> {
            Ok(Conv {
                weight: Var::from_tensor(&c.weight.as_tensor().copy()?)?,
                bias: Var::from_tensor(&c.bias.as_tensor().copy()?)?,
                ..c.clone()
            })
        };
        for stage in copy.stages.iter_mut() {
            for layer in stage.iter_mut() {
                if let Layer::Conv(c) = layer {
                    *c = fresh(c)?;
                }
            }
        }
        for a in copy.adapters.iter_mut() {
            *a = fresh(a)?;
        }
        for d in copy.decoder.iter_mut() {
            *d = fresh(d)?;
        }
        copy.head = fresh(&copy.head)?;
        Ok(copy)
    }

    /// Parameter values as f32 arrays keyed by name.
    pub fn state(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        self.named_params()
            .into_iter()
            .map(|(name, var)| {
                let t = var.as_tensor();
                let values = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                Ok((name, (t.dims().to_vec(), values)))
            })
            .collect()
    }

    /// Loads named arrays into matching parameters. With `strict`, every
    /// parameter must be present; otherwise missing names are skipped
    /// (e.g. backbone-only pretrained weights). Returns the names loaded.
    pub fn load_named(&self, arrays: &BTreeMap<String, (Vec<usize>, Vec<f32>)>, strict: bool) -> Result<Vec<String>> {
        let mut loaded = Vec::new();
        for (name, var) in self.named_params() {
            match arrays.get(&name) {
                Some((shape, values)) => {
                    if shape.as_slice() != var.dims() {
                        return Err(Error::InvalidInput(format!(
                            "{name}: stored shape {shape:?} != model shape {:?}",
                            var.dims()
                        )));
                    }
                    let t = Tensor::from_vec(values.clone(), shape.as_slice(), &self.device)?
                        .to_dtype(self.dtype)?;
                    var.set(&t)?;
                    loaded.push(name);
                }
                None if strict => {
                    return Err(Error::InvalidInput(format!("checkpoint is missing {name}")));
                }
                None => {}
            }
        }
        Ok(loaded)
    }

    /// Loads externally supplied weights (e.g. pretrained backbone arrays)
    /// from a safetensors file; unknown names are ignored.
    pub fn load_pretrained(&self, path: &Path) -> Result<Vec<String>> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let arrays = crate::checkpoint::decode_arrays(&bytes, path)?;
        self.load_named(&arrays, false)
    }

    /// SHA-256 over parameter names, shapes and f32 values.
    pub fn digest(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, (shape, values)) in self.state()? {
            hasher.update(name.as_bytes());
            for d in shape {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// Sets every backbone convolution to all-ones weights and zero bias.
    pub fn set_backbone_constant(&self, value: f64) -> Result<()> {
        for (name, var) in self.named_params() {
            if name.starts_with("backbone.") {
                let fill = if name.ends_with(".weight") { value } else { 0.0 };
                var.set(&Tensor::full(fill, var.dims(), &self.device)?.to_dtype(self.dtype)?)?;
            }
        }
        Ok(())
    }
}

/// Sum of a batch of densities per item, as f64.
pub fn batch_mass(density: &Tensor) -> Result<Vec<f64>> {
    Ok(density
        .flatten_from(1)?
        .sum(D::Minus1)?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: usize, h: usize, w: usize, dtype: DType) -> Tensor {
        let count = n * 3 * h * w;
        let v: Vec<f64> = (0..count).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect();
        Tensor::from_vec(v, (n, 3, h, w), &Device::Cpu)
            .unwrap()
            .to_dtype(dtype)
            .unwrap()
    }

    #[test]
    fn toy_level_shapes() {
        let model = Model::new(ModelConfig::toy(), 0, DType::F32).unwrap();
        let p = model.extract(&images(1, 128, 128, DType::F32)).unwrap();
        let dims: Vec<_> = p.levels.iter().map(|l| l.dims4().unwrap()).collect();
        assert_eq!(dims, vec![(1, 16, 64, 64), (1, 32, 32, 32), (1, 64, 16, 16)]);
        assert_eq!(p.strides, vec![2, 4, 8]);
        assert_eq!(p.tags, vec![LevelTag::Low, LevelTag::Mid, LevelTag::High]);
    }

    #[test]
    fn vgg_stride_trace() {
        // Three 2x2 pools before the 512-channel block: 256 / 2^3 = 32.
        let mut cfg = ModelConfig::vgg16_truncated();
        cfg.decoder_width = 8;
        let model = Model::new(cfg, 0, DType::F32).unwrap();
        let convs = model
            .named_params()
            .iter()
            .filter(|(n, _)| n.starts_with("backbone.") && n.ends_with(".weight"))
            .count();
        assert_eq!(convs, 10);
        assert_eq!(
            model.level_geometry().iter().map(|g| g.stride).collect::<Vec<_>>(),
            vec![2, 4, 8]
        );
        let p = model.extract(&images(1, 256, 256, DType::F32)).unwrap();
        assert_eq!(p.levels[2].dims4().unwrap(), (1, 512, 32, 32));
        assert_eq!(p.levels[0].dims4().unwrap(), (1, 128, 128, 128));
    }

    #[test]
    fn extraction_is_deterministic() {
        let model = Model::new(ModelConfig::toy(), 5, DType::F32).unwrap();
        let x = images(2, 64, 64, DType::F32);
        let a = model.predict_counts(&x).unwrap();
        let b = model.predict_counts(&x).unwrap();
        assert_eq!(a, b);
        let twin = Model::new(ModelConfig::toy(), 5, DType::F32).unwrap();
        assert_eq!(twin.predict_counts(&x).unwrap(), a);
        assert_eq!(twin.digest().unwrap(), model.digest().unwrap());
    }

    #[test]
    fn undersized_input_rejected() {
        let model = Model::new(ModelConfig::toy(), 0, DType::F32).unwrap();
        assert!(matches!(
            model.extract(&images(1, 56, 64, DType::F32)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let model = Model::new(ModelConfig::toy(), 0, DType::F32).unwrap();
        let patch = Tensor::zeros((1, 32, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(model.decode(0, &patch), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_head_gives_zero_density() {
        let model = Model::new(ModelConfig::toy(), 1, DType::F32).unwrap();
        model.head.weight.set(&model.head.weight.zeros_like().unwrap()).unwrap();
        let p = model.extract(&images(1, 64, 64, DType::F32)).unwrap();
        let d = model.estimate_density(1, &p.levels[1]).unwrap();
        assert_eq!(d.dims4().unwrap(), (1, 1, 64, 64));
        assert_eq!(batch_mass(&d).unwrap(), vec![0.0]);
    }

    #[test]
    fn upsampling_shape_and_mass() {
        let model = Model::new(ModelConfig::toy(), 2, DType::F64).unwrap();
        let p = model.extract(&images(2, 64, 64, DType::F64)).unwrap();
        for level in 0..3 {
            let patch = &p.levels[level];
            let (_, _, h, w) = patch.dims4().unwrap();
            let s = model.level_geometry()[level].stride;
            let d = model.estimate_density(level, patch).unwrap();
            assert_eq!(d.dims4().unwrap(), (2, 1, h * s, w * s));
            let counts: Vec<f64> = model.count_from_patch(level, patch).unwrap().to_vec1().unwrap();
            for (c, m) in counts.iter().zip(batch_mass(&d).unwrap()) {
                assert!((c - m).abs() <= 1e-9 * c.abs().max(1.0));
                assert!(c.is_finite());
            }
        }
    }

    #[test]
    fn decoder_is_shared() {
        let model = Model::new(ModelConfig::toy(), 0, DType::F32).unwrap();
        let dec = model.decoder_params();
        assert_eq!(dec.len(), 2 * 6 + 2);
        // Every level routes through the same decoder variables: a gradient
        // from any level lands on the same tensors.
        let p = model.extract(&images(1, 64, 64, DType::F32)).unwrap();
        for level in 0..3 {
            let grads = model.count_from_patch(level, &p.levels[level]).unwrap().sum_all().unwrap().backward().unwrap();
            for v in &dec {
                assert!(grads.get(v.as_tensor()).is_some());
            }
        }
    }

    #[test]
    fn duplicate_is_independent() {
        let model = Model::new(ModelConfig::toy(), 0, DType::F32).unwrap();
        let copy = model.duplicate().unwrap();
        copy.head.bias.set(&Tensor::ones(1, DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert_ne!(copy.digest().unwrap(), model.digest().unwrap());
        copy.copy_from(&model).unwrap();
        assert_eq!(copy.digest().unwrap(), model.digest().unwrap());
    }
}
