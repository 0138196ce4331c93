//! Mixed semi-supervised optimization: pixel L2 on labeled crops plus the
//! pyramid margin ranking loss on unlabeled crops, through one shared
//! extractor and decoder.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, write_json};
use crate::data::{self, AugmentConfig, AugmentedSample, Corpus, Sample, IMAGENET_MEAN, IMAGENET_STD};
use crate::density::KernelSpec;
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{self, LossBreakdown, PairTerm};
use crate::model::{LevelTag, Model, ModelConfig};
use crate::optim::{Adam, AdamSettings};
use crate::patches::{self, CenterDraw, LevelShape, DEFAULT_MIN_SIDE};

/// Environment variable forcing single-worker deterministic data loading.
pub const DETERMINISTIC_ENV: &str = "RANKPYR_DETERMINISTIC";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankingTarget {
    UnlabeledOnly,
    LabeledOnly,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    None,
    /// Rank nested crops of the input image instead of feature patches.
    ImageLevelRanking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CenterMode {
    /// One draw per image, mapped onto every level.
    Shared,
    PerLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epsilon: f64,
    /// Number of crops per level (`M`).
    #[serde(rename = "m")]
    pub crops: usize,
    /// Number of pyramid levels the model exposes (`K`).
    #[serde(rename = "k")]
    pub levels: usize,
    /// Crop shrink ratio (`r`).
    #[serde(rename = "r")]
    pub ratio: f64,
    pub min_side: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub steps: usize,
    pub seed: u64,
    pub ranking_target: RankingTarget,
    pub level_mask: Vec<LevelTag>,
    pub baseline_mode: BaselineMode,
    pub center_mode: CenterMode,
    pub labeled_ratio: f64,
    /// Fraction of labeled images held out for checkpoint selection.
    pub val_fraction: f64,
    pub crop_height: usize,
    pub crop_width: usize,
    pub flip: bool,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub kernel: KernelSpec,
    pub resize_cap: usize,
    pub model: ModelConfig,
    /// Optional safetensors file of named arrays loaded before training.
    pub pretrained: Option<PathBuf>,
    /// Validation interval in steps (0 disables periodic validation).
    pub eval_every: usize,
    /// Checkpoint interval in steps (0 keeps only best and final).
    pub checkpoint_every: usize,
    pub workers: usize,
    pub log_pair_terms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            epsilon: 0.0,
            crops: 4,
            levels: 3,
            ratio: 0.75,
            min_side: DEFAULT_MIN_SIDE,
            lr: 1e-5,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_labeled: 1,
            batch_unlabeled: 1,
            steps: 1000,
            seed: 0,
            ranking_target: RankingTarget::UnlabeledOnly,
            level_mask: vec![LevelTag::Low, LevelTag::Mid, LevelTag::High],
            baseline_mode: BaselineMode::None,
            center_mode: CenterMode::Shared,
            labeled_ratio: 1.0,
            val_fraction: 0.1,
            crop_height: 224,
            crop_width: 224,
            flip: true,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            kernel: KernelSpec::default(),
            resize_cap: data::DEFAULT_RESIZE_CAP,
            model: ModelConfig::toy(),
            pretrained: None,
            eval_every: 0,
            checkpoint_every: 0,
            workers: 1,
            log_pair_terms: true,
        }
    }
}

impl TrainConfig {
    pub fn ranking_enabled(&self) -> bool {
        self.lambda > 0.0
    }

    pub fn adam(&self) -> AdamSettings {
        AdamSettings {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            crop_height: self.crop_height,
            crop_width: self.crop_width,
            flip: self.flip,
            mean: self.mean,
            std: self.std,
            kernel: self.kernel,
        }
    }

    /// Worker count after honouring [`DETERMINISTIC_ENV`].
    pub fn effective_workers(&self) -> usize {
        if std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1") {
            1
        } else {
            self.workers.max(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if self.crops == 0 {
            return bad("m must be >= 1".into());
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return bad(format!("r must lie in (0, 1), got {}", self.ratio));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return bad("lr must be > 0 and weight_decay >= 0".into());
        }
        if self.batch_labeled == 0 {
            return bad("batch_labeled must be >= 1".into());
        }
        if self.ranking_enabled() {
            if self.level_mask.is_empty() && self.baseline_mode == BaselineMode::None {
                return bad("level_mask must be non-empty when ranking is enabled".into());
            }
            if self.ranking_target != RankingTarget::LabeledOnly && self.batch_unlabeled == 0 {
                return bad("batch_unlabeled must be >= 1 when unlabeled images are ranked".into());
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        if self.model.level_taps.len() != self.levels {
            return bad(format!(
                "k = {} but the model taps {} levels",
                self.levels,
                self.model.level_taps.len()
            ));
        }
        let tags: Vec<LevelTag> = (0..self.levels).map(|i| LevelTag::for_index(i, self.levels)).collect();
        if let Some(t) = self.level_mask.iter().find(|t| !tags.contains(t)) {
            return bad(format!("level '{}' is not produced by a {}-level model", t.as_str(), self.levels));
        }
        self.model.validate()
    }

    /// Level indices selected by `level_mask`, low to high.
    pub fn active_levels(&self) -> Vec<usize> {
        (0..self.levels)
            .filter(|&i| self.level_mask.contains(&LevelTag::for_index(i, self.levels)))
            .collect()
    }
}

/// Ranked pairs generated per image per step.
pub fn pairs_per_image(config: &TrainConfig) -> usize {
    let per_level = config.crops * (config.crops + 1) / 2;
    match config.baseline_mode {
        BaselineMode::ImageLevelRanking => per_level,
        BaselineMode::None => per_level * config.active_levels().len(),
    }
}

/// Loss tensors of one step before the update.
pub struct LossGraph {
    pub supervised: Option<Tensor>,
    pub ranking: Option<Tensor>,
    pub pair_terms: Vec<PairTerm>,
    /// Per ranked image, per ranked level, the patch counts (small to full).
    pub counts: Vec<Vec<Vec<f64>>>,
}

fn scalar(t: &Option<Tensor>) -> Result<f64> {
    match t {
        Some(t) => Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?),
        None => Ok(0.0),
    }
}

/// Pyramid ranking loss of `images` (N x 3 x H x W).
pub fn feature_ranking_loss(
    model: &Model,
    images: &Tensor,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Option<Tensor>, Vec<PairTerm>, Vec<Vec<Vec<f64>>>)> {
    let n = images.dim(0)?;
    let pyramid = model.extract(images)?;
    let shared: Vec<CenterDraw> = (0..n).map(|_| CenterDraw::sample(rng)).collect();
    let mut level_counts = Vec::new();
    let mut used_levels = Vec::new();
    for level in config.active_levels() {
        let feats = &pyramid.levels[level];
        let (_, c, h, w) = feats.dims4()?;
        let shape = LevelShape {
            channels: c,
            height: h,
            width: w,
        };
        let mut batches = Vec::with_capacity(n);
        let mut skipped = false;
        for (i, shared_draw) in shared.iter().enumerate() {
            let draw = match config.center_mode {
                CenterMode::Shared => *shared_draw,
                CenterMode::PerLevel => CenterDraw::sample(rng),
            };
            let center = match draw.locate(h, w) {
                Ok(c) => c,
                Err(Error::LevelTooSmall { .. }) => {
                    skipped = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            let set = patches::generate_nested_boxes(shape, center, config.crops, config.ratio, config.min_side)?;
            batches.push(patches::nested_patch_batch(&feats.get(i)?, &set)?);
        }
        if skipped {
            log::debug!("level {level} is {h}x{w}; skipping ranking there");
            continue;
        }
        let stacked = Tensor::cat(&batches, 0)?;
        let counts = model.count_from_patch(level, &stacked)?.reshape((n, config.crops + 1))?;
        level_counts.push(counts);
        used_levels.push(level);
    }
    finish_ranking(&level_counts, &used_levels, config)
}

/// Image-level ranking (single scale): nested crops of the input image are
/// resized back to the input size and counted with full forward passes.
pub fn image_ranking_loss(
    model: &Model,
    images: &Tensor,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Option<Tensor>, Vec<PairTerm>, Vec<Vec<Vec<f64>>>)> {
    let (n, c, h, w) = images.dims4()?;
    let shape = LevelShape {
        channels: c,
        height: h,
        width: w,
    };
    let mut batches = Vec::with_capacity(n);
    for i in 0..n {
        let center = CenterDraw::sample(rng).locate(h, w)?;
        let set = patches::generate_nested_boxes(shape, center, config.crops, config.ratio, config.min_side)?;
        batches.push(patches::nested_patch_batch(&images.get(i)?, &set)?);
    }
    let stacked = Tensor::cat(&batches, 0)?;
    let density = model.predict_density(&stacked)?;
    let counts = density.sum((1, 2, 3))?.reshape((n, config.crops + 1))?;
    finish_ranking(&[counts], &[model.num_levels() - 1], config)
}

fn finish_ranking(
    level_counts: &[Tensor],
    used_levels: &[usize],
    config: &TrainConfig,
) -> Result<(Option<Tensor>, Vec<PairTerm>, Vec<Vec<Vec<f64>>>)> {
    if level_counts.is_empty() {
        return Ok((None, Vec::new(), Vec::new()));
    }
    let (loss, mut terms) = losses::pyramid_rank_loss_tensor(level_counts, config.crops, config.epsilon)?;
    for t in terms.iter_mut() {
        t.level = used_levels[t.level];
    }
    let per_level: Vec<Vec<Vec<f64>>> = level_counts
        .iter()
        .map(|c| Ok(c.to_dtype(DType::F64)?.to_vec2::<f64>()?))
        .collect::<Result<_>>()?;
    let n = per_level[0].len();
    let counts = (0..n)
        .map(|i| per_level.iter().map(|lvl| lvl[i].clone()).collect())
        .collect();
    Ok((Some(loss), terms, counts))
}

/// Builds the loss graph for one step. `labeled_images`/`labeled_density`
/// feed the supervised term; which images are ranked follows
/// `config.ranking_target`. The ranking term is skipped when `λ = 0`.
pub fn loss_graph(
    model: &Model,
    labeled_images: &Tensor,
    labeled_density: &Tensor,
    unlabeled_images: Option<&Tensor>,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossGraph> {
    let pred = model.predict_density(labeled_images)?;
    let supervised = losses::supervised_l2(&pred, labeled_density)?;
    if !config.ranking_enabled() {
        return Ok(LossGraph {
            supervised: Some(supervised),
            ranking: None,
            pair_terms: Vec::new(),
            counts: Vec::new(),
        });
    }
    let ranked = match (config.ranking_target, unlabeled_images) {
        (RankingTarget::LabeledOnly, _) => labeled_images.clone(),
        (RankingTarget::UnlabeledOnly, Some(u)) => u.clone(),
        (RankingTarget::Both, Some(u)) => Tensor::cat(&[labeled_images, u], 0)?,
        (_, None) => {
            return Err(Error::InvalidInput(
                "ranking unlabeled images requires an unlabeled batch".into(),
            ))
        }
    };
    let (ranking, pair_terms, counts) = match config.baseline_mode {
        BaselineMode::None => feature_ranking_loss(model, &ranked, config, rng)?,
        BaselineMode::ImageLevelRanking => image_ranking_loss(model, &ranked, config, rng)?,
    };
    Ok(LossGraph {
        supervised: Some(supervised),
        ranking,
        pair_terms,
        counts,
    })
}

/// Owns the model and optimizer state across steps.
pub struct Trainer {
    model: Model,
    optimizer: Adam,
    config: TrainConfig,
    step: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.num_levels() != config.levels {
            return Err(Error::InvalidParameter(format!(
                "model has {} levels, config expects {}",
                model.num_levels(),
                config.levels
            )));
        }
        let stride = model.output_stride();
        let min_side = model.min_input_side();
        let (ch, cw) = (config.crop_height, config.crop_width);
        if ch % stride != 0 || cw % stride != 0 || ch < min_side || cw < min_side {
            return Err(Error::InvalidParameter(format!(
                "crop {ch}x{cw} must be a multiple of {stride} and at least {min_side} per side"
            )));
        }
        let optimizer = Adam::new(model.params(), config.adam())?;
        Ok(Self {
            model,
            optimizer,
            config,
            step: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn step_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix(self.config.seed, STREAM_CENTERS, self.step as u64, 0))
    }

    /// Loss values at the current parameters, without updating them.
    pub fn evaluate_losses(
        &self,
        labeled: &[AugmentedSample],
        unlabeled: &[AugmentedSample],
    ) -> Result<LossBreakdown> {
        let (_, breakdown) = self.forward(labeled, unlabeled)?;
        Ok(breakdown)
    }

    fn forward(
        &self,
        labeled: &[AugmentedSample],
        unlabeled: &[AugmentedSample],
    ) -> Result<(Tensor, LossBreakdown)> {
        let dtype = self.model.dtype();
        let device = self.model.device().clone();
        let x_l = data::image_batch(labeled, dtype, &device)?;
        let y_l = data::density_batch(labeled, dtype, &device)?;
        let x_u = if unlabeled.is_empty() {
            None
        } else {
            Some(data::image_batch(unlabeled, dtype, &device)?)
        };
        let mut rng = self.step_rng();
        let graph = loss_graph(&self.model, &x_l, &y_l, x_u.as_ref(), &self.config, &mut rng)?;
        let supervised = graph.supervised.expect("supervised term is always built");
        let total = match &graph.ranking {
            Some(r) => (&supervised + (r * self.config.lambda)?)?,
            None => supervised.clone(),
        };
        let ls = scalar(&Some(supervised))?;
        let lu = scalar(&graph.ranking)?;
        let terms = if self.config.log_pair_terms {
            graph.pair_terms.clone()
        } else {
            Vec::new()
        };
        let breakdown = LossBreakdown::new(ls, lu, self.config.lambda, self.config.epsilon, terms);
        if !(breakdown.total.is_finite()) {
            let diagnostics = serde_json::json!({
                "labeled_ids": labeled.iter().map(|s| &s.id).collect::<Vec<_>>(),
                "unlabeled_ids": unlabeled.iter().map(|s| &s.id).collect::<Vec<_>>(),
                "supervised": ls,
                "ranking": lu,
                "counts": graph.counts,
                "pair_terms": graph.pair_terms,
            });
            return Err(Error::NonFiniteLoss {
                step: self.step,
                diagnostics: diagnostics.to_string(),
            });
        }
        Ok((total, breakdown))
    }

    /// One optimizer update on `L_s + λ L_u`.
    pub fn train_step(
        &mut self,
        labeled: &[AugmentedSample],
        unlabeled: &[AugmentedSample],
    ) -> Result<LossBreakdown> {
        let (total, breakdown) = self.forward(labeled, unlabeled)?;
        let grads = total.backward()?;
        self.optimizer.step(&grads)?;
        self.step += 1;
        Ok(breakdown)
    }

    /// [`Trainer::train_step`] for the image-level ranking comparison arm.
    pub fn image_level_ranking_step(
        &mut self,
        labeled: &[AugmentedSample],
        unlabeled: &[AugmentedSample],
    ) -> Result<LossBreakdown> {
        if self.config.baseline_mode != BaselineMode::ImageLevelRanking {
            return Err(Error::InvalidParameter(
                "image-level ranking requires baseline_mode = image-level-ranking".into(),
            ));
        }
        self.train_step(labeled, unlabeled)
    }
}

const STREAM_CENTERS: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_ORDER: u64 = 3;

/// SplitMix64-style combination of a seed with stream/step/slot ids.
fn mix(seed: u64, stream: u64, step: u64, slot: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ step.wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ slot.wrapping_mul(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Cycles through ids in a reshuffled order each epoch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    ids: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(ids: Vec<usize>, seed: u64) -> Self {
        let mut s = Self {
            ids,
            order: Vec::new(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = self.ids.clone();
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        if self.ids.is_empty() {
            return Vec::new();
        }
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.reshuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// In-memory training split.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub validation: Vec<Sample>,
}

impl TrainData {
    /// Splits the corpus by `labeled_ratio`, holds out `val_fraction` of the
    /// labeled images, and loads everything. Held-out labeled images never
    /// appear in the unlabeled stream; unlabeled entries carry no annotation.
    pub fn from_corpus(corpus: &Corpus, config: &TrainConfig) -> Result<Self> {
        let index = data::split(corpus, config.labeled_ratio, config.seed)?;
        if index.labeled_ids.is_empty() {
            return Err(Error::InvalidInput("the split produced no labeled images".into()));
        }
        let mut labeled_ids = index.labeled_ids.clone();
        labeled_ids.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(config.seed, STREAM_ORDER, 0, 1)));
        let held = ((labeled_ids.len() as f64 * config.val_fraction) + 1e-9).floor() as usize;
        let held = held.min(labeled_ids.len() - 1);
        let (val_ids, train_ids) = labeled_ids.split_at(held);
        let mut val_ids = val_ids.to_vec();
        let mut train_ids = train_ids.to_vec();
        val_ids.sort_unstable();
        train_ids.sort_unstable();
        let load = |i: usize, labeled: bool| corpus.load_sample(i, labeled, &config.kernel, config.resize_cap);
        Ok(Self {
            labeled: train_ids.iter().map(|&i| load(i, true)).collect::<Result<_>>()?,
            validation: val_ids.iter().map(|&i| load(i, true)).collect::<Result<_>>()?,
            unlabeled: index
                .unlabeled_ids
                .iter()
                .map(|&i| load(i, false))
                .collect::<Result<_>>()?,
        })
    }

    /// Appends an external pool of unlabeled images.
    pub fn attach_unlabeled(&mut self, corpus: &Corpus, config: &TrainConfig) -> Result<()> {
        for i in 0..corpus.len() {
            self.unlabeled
                .push(corpus.load_sample(i, false, &config.kernel, config.resize_cap)?);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_rmse: Option<f64>,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub model: Model,
    pub log: Vec<StepRecord>,
    pub best_val_mae: Option<f64>,
    pub best_step: usize,
    pub final_digest: String,
    /// Manifest path of the selected checkpoint, when an output directory was given.
    pub best_checkpoint: Option<PathBuf>,
}

fn augment_batch(
    samples: &[Sample],
    ids: &[usize],
    aug: &AugmentConfig,
    seed: u64,
    step: usize,
    role: u64,
    workers: usize,
) -> Result<Vec<AugmentedSample>> {
    let one = |slot: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, STREAM_AUGMENT + role * 16, step as u64, slot as u64));
        data::augment(&samples[ids[slot]], aug, &mut rng)
    };
    if workers <= 1 || ids.len() <= 1 {
        return (0..ids.len()).map(one).collect();
    }
    let chunk = ids.len().div_ceil(workers);
    let slots: Vec<usize> = (0..ids.len()).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = slots
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|&s| one(s)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(ids.len());
        for h in handles {
            out.extend(h.join().expect("augmentation worker panicked")?);
        }
        Ok(out)
    })
}

fn provenance(config: &TrainConfig, step: usize) -> serde_json::Value {
    serde_json::json!({
        "step": step,
        "optimizer": {
            "kind": "adam-l2",
            "lr": config.lr,
            "weight_decay": config.weight_decay,
            "beta1": config.adam_beta1,
            "beta2": config.adam_beta2,
            "eps": config.adam_eps,
        },
        "train_config": config,
    })
}

/// Runs `config.steps` updates, logging a [`StepRecord`] per step. With an
/// output directory, writes `log.jsonl`, periodic checkpoints, `best` (lowest
/// validation MAE) and `final`.
pub fn fit(model: Model, train: &TrainData, config: &TrainConfig, out_dir: Option<&Path>) -> Result<FitOutcome> {
    config.validate()?;
    if train.labeled.is_empty() {
        return Err(Error::InvalidInput("training needs labeled images".into()));
    }
    let needs_unlabeled = config.ranking_enabled() && config.ranking_target != RankingTarget::LabeledOnly;
    if needs_unlabeled && train.unlabeled.is_empty() {
        return Err(Error::InvalidInput(
            "ranking is enabled for unlabeled images but the unlabeled pool is empty".into(),
        ));
    }
    if let Some(path) = &config.pretrained {
        let loaded = model.load_pretrained(path)?;
        log::info!("loaded {} pretrained arrays from {}", loaded.len(), path.display());
    }

    let workers = config.effective_workers();
    let aug = config.augment();
    let mut labeled_sampler = BatchSampler::new((0..train.labeled.len()).collect(), mix(config.seed, STREAM_ORDER, 1, 0));
    let mut unlabeled_sampler =
        BatchSampler::new((0..train.unlabeled.len()).collect(), mix(config.seed, STREAM_ORDER, 2, 0));

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            write_json(&dir.join("train_config.json"), config)?;
            let path = dir.join("log.jsonl");
            Some(std::io::BufWriter::new(
                std::fs::File::create(&path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?,
            ))
        }
        None => None,
    };

    let mut trainer = Trainer::new(model, config.clone())?;
    let mut log = Vec::with_capacity(config.steps);
    let mut best: Option<(f64, usize)> = None;
    let mut best_checkpoint = None;
    let validate_now = |step: usize| config.eval_every > 0 && step % config.eval_every == 0;

    for step in 1..=config.steps {
        let l_ids = labeled_sampler.next_batch(config.batch_labeled);
        let labeled = augment_batch(&train.labeled, &l_ids, &aug, config.seed, step, 0, workers)?;
        let unlabeled = if needs_unlabeled {
            let u_ids = unlabeled_sampler.next_batch(config.batch_unlabeled);
            augment_batch(&train.unlabeled, &u_ids, &aug, config.seed, step, 1, workers)?
        } else {
            Vec::new()
        };
        let loss = trainer.train_step(&labeled, &unlabeled)?;
        let mut record = StepRecord {
            step,
            loss,
            val_mae: None,
            val_rmse: None,
        };
        if validate_now(step) && !train.validation.is_empty() {
            let report = eval::evaluate_model(trainer.model(), &train.validation, config.mean, config.std)?;
            record.val_mae = Some(report.mae);
            record.val_rmse = Some(report.rmse);
            if best.is_none_or(|(mae, _)| report.mae < mae) {
                best = Some((report.mae, step));
                if let Some(dir) = out_dir {
                    best_checkpoint = Some(save_checkpoint(trainer.model(), dir, "best", provenance(config, step))?);
                }
            }
        }
        if let (Some(dir), true) = (out_dir, config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
            save_checkpoint(trainer.model(), dir, &format!("step-{step:06}"), provenance(config, step))?;
        }
        if let Some(f) = log_file.as_mut() {
            use std::io::Write;
            let line = serde_json::to_string(&record).expect("step record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io("writing training log", e))?;
        }
        log.push(record);
    }
    if let Some(f) = log_file.as_mut() {
        use std::io::Write;
        f.flush().map_err(|e| Error::io("flushing training log", e))?;
    }

    let model = trainer.into_model();
    let final_digest = model.digest()?;
    if let Some(dir) = out_dir {
        let final_path = save_checkpoint(&model, dir, "final", provenance(config, config.steps))?;
        if best_checkpoint.is_none() {
            best_checkpoint = Some(final_path);
        }
    }
    Ok(FitOutcome {
        model,
        log,
        best_val_mae: best.map(|b| b.0),
        best_step: best.map_or(config.steps, |b| b.1),
        final_digest,
        best_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.lambda, c.epsilon, c.crops, c.levels, c.ratio), (1.0, 0.0, 4, 3, 0.75));
        assert_eq!((c.lr, c.weight_decay), (1e-5, 1e-4));
        c.validate().unwrap();
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        let ok: TrainConfig = serde_json::from_str(r#"{"lambda": 0.5, "m": 3, "level_mask": ["high"]}"#).unwrap();
        assert_eq!((ok.lambda, ok.crops, ok.level_mask.clone()), (0.5, 3, vec![LevelTag::High]));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lamda": 0.5}"#).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig {
            level_mask: vec![],
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.lambda = 0.0;
        c.validate().unwrap();
        c.ratio = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn pair_utilization_ratio() {
        let dream = TrainConfig::default();
        let baseline = TrainConfig {
            baseline_mode: BaselineMode::ImageLevelRanking,
            ..Default::default()
        };
        assert_eq!(pairs_per_image(&dream), 30);
        assert_eq!(pairs_per_image(&baseline), 10);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new((0..7).collect(), 3);
        let mut first: Vec<usize> = s.next_batch(7);
        first.sort_unstable();
        assert_eq!(first, (0..7).collect::<Vec<_>>());
        let mut twin = BatchSampler::new((0..7).collect(), 3);
        twin.next_batch(7);
        assert_eq!(s.next_batch(5), twin.next_batch(5));
    }

    #[test]
    fn mix_separates_streams() {
        assert_ne!(mix(1, 1, 0, 0), mix(1, 2, 0, 0));
        assert_ne!(mix(1, 1, 1, 0), mix(1, 1, 0, 1));
        assert_eq!(mix(5, 3, 2, 1), mix(5, 3, 2, 1));
    }
}
