//! `rankpyr` command line: corpus generation, training, evaluation, audits,
//! exports and ablation sweeps. Every command that produces artifacts writes
//! a `manifest.json` beside them from which it can be replayed.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use rankpyr::checkpoint::{load_checkpoint, read_json, write_json};
use rankpyr::data::{self, Corpus, Sample, SynthConfig};
use rankpyr::eval::{self, AuditConfig, DensityPredictor, GroundTruthCounter, GroundTruthOracle, ModelCounter, ModelPredictor};
use rankpyr::trainer::{self, BaselineMode, RankingTarget, TrainConfig, TrainData, DETERMINISTIC_ENV};
use rankpyr::{DType, LevelTag, Model};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "rankpyr", version, about = "Semi-supervised crowd counting with pyramid ranking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic labeled corpus.
    SynthGen(SynthArgs),
    /// Train a counter and write checkpoints and a JSON-lines log.
    Train(TrainArgs),
    /// Score a checkpoint (or the ground-truth oracle) on a labeled corpus.
    Eval(EvalArgs),
    /// Measure how often nested crops are counted out of order.
    RankAudit(AuditArgs),
    /// Write density rasters and heat-map overlays.
    ExportDensity(ExportArgs),
    /// Sweep one configuration axis and tabulate test MAE/RMSE.
    Ablate(AblateArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args, Serialize, Deserialize, Clone)]
pub struct SynthArgs {
    /// Corpus directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub images: usize,
    #[arg(long, default_value_t = 5)]
    pub min_count: usize,
    #[arg(long, default_value_t = 80)]
    pub max_count: usize,
    #[arg(long, default_value_t = 128)]
    pub height: usize,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Training-config overrides shared by `train` and `ablate`.
#[derive(Debug, Args, Serialize, Deserialize, Clone, Default)]
pub struct ConfigArgs {
    /// JSON file of training settings; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Comma-separated pyramid levels to rank (low, mid, high).
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<LevelTag>>,
    #[arg(long)]
    pub labeled_ratio: Option<f64>,
    /// Rank nested crops of the input image instead of feature patches.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long)]
    pub steps: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut config: TrainConfig = match &self.config {
            Some(path) => read_json(path)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.lambda {
            config.lambda = v;
        }
        if let Some(v) = &self.levels {
            config.level_mask = v.clone();
        }
        if let Some(v) = self.labeled_ratio {
            config.labeled_ratio = v;
        }
        if self.baseline {
            config.baseline_mode = BaselineMode::ImageLevelRanking;
        }
        if let Some(v) = self.steps {
            config.steps = v;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args, Serialize, Deserialize, Clone)]
pub struct TrainArgs {
    /// Corpus whose annotated entries are split into labeled/unlabeled.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Extra pool of unlabeled images.
    #[arg(long)]
    pub unlabeled: Option<PathBuf>,
    /// Labeled corpus scored with the selected checkpoint after training.
    #[arg(long)]
    pub test_corpus: Option<PathBuf>,
    /// Root under which the run directory is created.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub overrides: ConfigArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelSource {
    /// A checkpoint manifest given by `--checkpoint`.
    Checkpoint,
    /// Fresh weights from the config and seed.
    Untrained,
    /// The ground-truth density itself.
    Oracle,
}

#[derive(Debug, Args, Serialize, Deserialize, Clone)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value = "checkpoint")]
    pub source: ModelSource,
    /// Checkpoint manifest (`*.json` next to `*.safetensors`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub overrides: ConfigArgs,
}

#[derive(Debug, Args, Serialize, Deserialize, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Serialize, Deserialize, Clone)]
pub struct AuditArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Random crop centers per image.
    #[arg(long, default_value_t = 4)]
    pub centers: usize,
    /// Seed of the center draws.
    #[arg(long, default_value_t = 0)]
    pub audit_seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args, Serialize, Deserialize, Clone)]
pub struct ExportArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Export at most this many images.
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    Lambda,
    Levels,
    LabeledRatio,
    RankingTarget,
}

#[derive(Debug, Args, Serialize, Deserialize, Clone)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub axis: Axis,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub unlabeled: Option<PathBuf>,
    #[arg(long)]
    pub test_corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub overrides: ConfigArgs,
}

#[derive(Debug, Args, Clone)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Root for the replayed run (defaults to the original root).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// What a run directory's manifest records: enough to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub deterministic: bool,
    pub args: Value,
    #[serde(default)]
    pub config: Option<TrainConfig>,
}

pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

/// Creates `<root>/run-<unix seconds>-s<seed>`, suffixing on collision.
pub fn create_run_dir(root: &Path, seed: u64) -> anyhow::Result<PathBuf> {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let base = format!("run-{secs}-s{seed}");
    for attempt in 0.. {
        let name = if attempt == 0 {
            base.clone()
        } else {
            format!("{base}-{attempt}")
        };
        let dir = root.join(name);
        match std::fs::create_dir_all(root).and_then(|_| std::fs::create_dir(&dir)) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating run directory under {}", root.display())),
        }
    }
    unreachable!()
}

fn write_manifest(dir: &Path, command: &str, seed: u64, args: &impl Serialize, config: Option<&TrainConfig>) -> anyhow::Result<()> {
    let manifest = RunManifest {
        tool: "rankpyr".into(),
        version: VERSION.into(),
        command: command.into(),
        seed,
        deterministic: deterministic_mode(),
        args: serde_json::to_value(args)?,
        config: config.cloned(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(())
}

fn load_labeled(corpus: &Path, config: &TrainConfig) -> anyhow::Result<Vec<Sample>> {
    let corpus = Corpus::open(corpus)?;
    (0..corpus.len())
        .map(|i| Ok(corpus.load_sample(i, true, &config.kernel, config.resize_cap)?))
        .collect()
}

/// Trains one configuration into `dir`; scores the selected checkpoint on
/// the test corpus when given.
pub fn train_into(
    dir: &Path,
    corpus: &Path,
    unlabeled: Option<&Path>,
    test: Option<&[Sample]>,
    config: &TrainConfig,
) -> anyhow::Result<Value> {
    let corpus = Corpus::open(corpus)?;
    let mut train_data = TrainData::from_corpus(&corpus, config)?;
    if let Some(extra) = unlabeled {
        train_data.attach_unlabeled(&Corpus::open(extra)?, config)?;
    }
    let model = Model::new(config.model.clone(), config.seed, DType::F32)?;
    let outcome = trainer::fit(model, &train_data, config, Some(dir))?;
    let mut result = json!({
        "steps": config.steps,
        "labeled": train_data.labeled.len(),
        "unlabeled": train_data.unlabeled.len(),
        "validation": train_data.validation.len(),
        "final_digest": outcome.final_digest,
        "best_step": outcome.best_step,
        "best_val_mae": outcome.best_val_mae,
    });
    if let (Some(samples), Some(best)) = (test, outcome.best_checkpoint.as_ref()) {
        let (model, _) = load_checkpoint(best, DType::F32)?;
        let report = eval::evaluate_model(&model, samples, config.mean, config.std)?;
        report.write_json(&dir.join("test_eval.json"))?;
        report.write_csv(&dir.join("test_eval.csv"))?;
        result["test_mae"] = json!(report.mae);
        result["test_rmse"] = json!(report.rmse);
    }
    write_json(&dir.join("result.json"), &result)?;
    Ok(result)
}

fn cmd_synth(args: &SynthArgs) -> anyhow::Result<Value> {
    let config = SynthConfig {
        images: args.images,
        min_count: args.min_count,
        max_count: args.max_count,
        height: args.height,
        width: args.width,
        seed: args.seed,
    };
    let corpus = data::synth_corpus(&args.out, &config)?;
    write_manifest(&args.out, "synth-gen", args.seed, args, None)?;
    Ok(json!({ "corpus": args.out, "images": corpus.len() }))
}

fn cmd_train(args: &TrainArgs) -> anyhow::Result<Value> {
    let config = args.overrides.resolve()?;
    let dir = create_run_dir(&args.out, config.seed)?;
    write_manifest(&dir, "train", config.seed, args, Some(&config))?;
    let test = args.test_corpus.as_deref().map(|p| load_labeled(p, &config)).transpose()?;
    let mut result = train_into(&dir, &args.corpus, args.unlabeled.as_deref(), test.as_deref(), &config)?;
    result["run_dir"] = json!(dir);
    Ok(result)
}

enum Loaded {
    Model(Model, TrainConfig),
    Oracle(TrainConfig),
}

fn load_model(args: &ModelArgs) -> anyhow::Result<Loaded> {
    let config = args.overrides.resolve()?;
    Ok(match args.source {
        ModelSource::Oracle => Loaded::Oracle(config),
        ModelSource::Untrained => Loaded::Model(Model::new(config.model.clone(), config.seed, DType::F32)?, config),
        ModelSource::Checkpoint => {
            let path = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| anyhow!("--checkpoint is required with --source checkpoint"))?;
            let (model, manifest) = load_checkpoint(path, DType::F32)?;
            // Normalization and kernel follow the training run when recorded.
            let config = match manifest.provenance.get("train_config") {
                Some(v) => serde_json::from_value(v.clone()).context("checkpoint train_config")?,
                None => config,
            };
            Loaded::Model(model, config)
        }
    })
}

fn cmd_eval(args: &EvalArgs) -> anyhow::Result<Value> {
    let loaded = load_model(&args.model)?;
    let config = match &loaded {
        Loaded::Model(_, c) | Loaded::Oracle(c) => c.clone(),
    };
    let dir = create_run_dir(&args.out, config.seed)?;
    write_manifest(&dir, "eval", config.seed, args, Some(&config))?;
    let samples = load_labeled(&args.corpus, &config)?;
    let report = match &loaded {
        Loaded::Model(m, c) => eval::evaluate_model(m, &samples, c.mean, c.std)?,
        Loaded::Oracle(_) => eval::evaluate(&GroundTruthOracle, &samples)?,
    };
    report.write_json(&dir.join("eval.json"))?;
    report.write_csv(&dir.join("eval.csv"))?;
    Ok(json!({ "run_dir": dir, "images": report.images, "mae": report.mae, "rmse": report.rmse }))
}

fn cmd_audit(args: &AuditArgs) -> anyhow::Result<Value> {
    let loaded = load_model(&args.model)?;
    let config = match &loaded {
        Loaded::Model(_, c) | Loaded::Oracle(c) => c.clone(),
    };
    let dir = create_run_dir(&args.out, config.seed)?;
    write_manifest(&dir, "rank-audit", config.seed, args, Some(&config))?;
    let samples = load_labeled(&args.corpus, &config)?;
    let audit = AuditConfig {
        crops: config.crops,
        ratio: config.ratio,
        min_side: config.min_side,
        epsilon: config.epsilon,
        levels: config.active_levels(),
        centers: args.centers,
        seed: args.audit_seed,
    };
    let report = match &loaded {
        Loaded::Model(m, c) => eval::rank_audit(
            &ModelCounter {
                model: m,
                mean: c.mean,
                std: c.std,
            },
            &samples,
            &audit,
        )?,
        Loaded::Oracle(_) => {
            let strides = Model::new(config.model.clone(), 0, DType::F32)?
                .level_geometry()
                .iter()
                .map(|g| g.stride)
                .collect();
            eval::rank_audit(&GroundTruthCounter { strides }, &samples, &audit)?
        }
    };
    write_json(&dir.join("audit.json"), &report)?;
    let mut out = serde_json::to_value(&report)?;
    out["run_dir"] = json!(dir);
    Ok(out)
}

fn cmd_export(args: &ExportArgs) -> anyhow::Result<Value> {
    let loaded = load_model(&args.model)?;
    let config = match &loaded {
        Loaded::Model(_, c) | Loaded::Oracle(c) => c.clone(),
    };
    let dir = create_run_dir(&args.out, config.seed)?;
    write_manifest(&dir, "export-density", config.seed, args, Some(&config))?;
    let corpus = Corpus::open(&args.corpus)?;
    let n = args.limit.map_or(corpus.len(), |l| l.min(corpus.len()));
    for sub in ["density", "overlay"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let mut exported = Vec::with_capacity(n);
    for i in 0..n {
        let labeled = corpus.entries[i].annotation.is_some();
        let sample = corpus.load_sample(i, labeled, &config.kernel, config.resize_cap)?;
        let map = match &loaded {
            Loaded::Model(m, c) => ModelPredictor {
                model: m,
                mean: c.mean,
                std: c.std,
            }
            .predict(&sample)?,
            Loaded::Oracle(_) => GroundTruthOracle.predict(&sample)?,
        };
        eval::export_density(&map, &dir.join("density").join(format!("{}.dmap", sample.id)))?;
        eval::export_overlay(&sample.image, &map, &dir.join("overlay").join(format!("{}.png", sample.id)))?;
        exported.push(json!({ "id": sample.id, "mass": map.mass() }));
    }
    Ok(json!({ "run_dir": dir, "exported": exported }))
}

pub const LAMBDA_GRID: [f64; 5] = [0.1, 0.5, 1.0, 5.0, 10.0];
pub const LABELED_RATIO_GRID: [f64; 5] = [0.05, 0.25, 0.30, 0.50, 1.0];

/// Level subsets of the level ablation, in table order.
pub fn level_grid() -> Vec<Vec<LevelTag>> {
    use LevelTag::*;
    vec![vec![Low], vec![Mid], vec![High], vec![Mid, High], vec![Low, Mid, High]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub mae: f64,
    pub rmse: f64,
}

/// Grid points of an axis as (label, config) pairs.
pub fn ablation_grid(axis: Axis, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    match axis {
        Axis::Lambda => LAMBDA_GRID
            .iter()
            .map(|&l| (format!("lambda={l}"), TrainConfig { lambda: l, ..base.clone() }))
            .collect(),
        Axis::Levels => level_grid()
            .into_iter()
            .map(|mask| {
                let label = mask.iter().map(|t| t.as_str()).collect::<Vec<_>>().join("+");
                (
                    format!("levels={label}"),
                    TrainConfig {
                        level_mask: mask,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        Axis::LabeledRatio => LABELED_RATIO_GRID
            .iter()
            .map(|&r| {
                (
                    format!("labeled={}%", (r * 100.0).round()),
                    TrainConfig {
                        labeled_ratio: r,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        Axis::RankingTarget => [RankingTarget::UnlabeledOnly, RankingTarget::LabeledOnly, RankingTarget::Both]
            .into_iter()
            .map(|t| {
                let label = serde_json::to_value(t).unwrap();
                (
                    format!("target={}", label.as_str().unwrap()),
                    TrainConfig {
                        ranking_target: t,
                        ..base.clone()
                    },
                )
            })
            .collect(),
    }
}

fn cmd_ablate(args: &AblateArgs) -> anyhow::Result<Value> {
    let base = args.overrides.resolve()?;
    let dir = create_run_dir(&args.out, base.seed)?;
    write_manifest(&dir, "ablate", base.seed, args, Some(&base))?;
    let test = load_labeled(&args.test_corpus, &base)?;
    let mut rows = Vec::new();
    for (i, (label, config)) in ablation_grid(args.axis, &base).into_iter().enumerate() {
        config.validate()?;
        log::info!("ablation {label}");
        let sub = dir.join(format!("{i:02}"));
        std::fs::create_dir_all(&sub)?;
        let result = train_into(&sub, &args.corpus, args.unlabeled.as_deref(), Some(&test), &config)?;
        rows.push(AblationRow {
            setting: label,
            mae: result["test_mae"].as_f64().unwrap_or(f64::NAN),
            rmse: result["test_rmse"].as_f64().unwrap_or(f64::NAN),
        });
    }
    write_json(&dir.join("table.json"), &rows)?;
    let mut csv = String::from("setting,mae,rmse\n");
    let mut md = String::from("| setting | MAE | RMSE |\n|---|---|---|\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.setting, r.mae, r.rmse));
        md.push_str(&format!("| {} | {:.2} | {:.2} |\n", r.setting, r.mae, r.rmse));
    }
    std::fs::write(dir.join("table.csv"), csv)?;
    std::fs::write(dir.join("table.md"), md)?;
    Ok(json!({ "run_dir": dir, "rows": rows }))
}

fn cmd_replay(args: &ReplayArgs) -> anyhow::Result<Value> {
    let manifest: RunManifest = read_json(&args.manifest)?;
    if manifest.tool != "rankpyr" {
        bail!("{} is not a rankpyr manifest", args.manifest.display());
    }
    let mut raw = manifest.args.clone();
    if let (Some(out), Some(obj)) = (&args.out, raw.as_object_mut()) {
        obj.insert("out".into(), json!(out));
    }
    // The recorded config is authoritative: replays must not depend on the
    // original config file still existing.
    let pinned = |raw: &mut Value| -> anyhow::Result<()> {
        if let Some(config) = &manifest.config {
            let dir = tempdir_for_replay()?;
            let path = dir.join("config.json");
            write_json(&path, config)?;
            let obj = raw.as_object_mut().ok_or_else(|| anyhow!("manifest args are not an object"))?;
            obj.insert("config".into(), json!(path));
            for key in ["seed", "lambda", "levels", "labeled_ratio", "steps"] {
                obj.insert(key.into(), Value::Null);
            }
            obj.insert("baseline".into(), json!(false));
        }
        Ok(())
    };
    match manifest.command.as_str() {
        "synth-gen" => cmd_synth(&serde_json::from_value(raw)?),
        "train" => {
            pinned(&mut raw)?;
            cmd_train(&serde_json::from_value(raw)?)
        }
        "eval" => {
            pinned(&mut raw)?;
            cmd_eval(&serde_json::from_value(raw)?)
        }
        "rank-audit" => {
            pinned(&mut raw)?;
            cmd_audit(&serde_json::from_value(raw)?)
        }
        "export-density" => {
            pinned(&mut raw)?;
            cmd_export(&serde_json::from_value(raw)?)
        }
        "ablate" => {
            pinned(&mut raw)?;
            cmd_ablate(&serde_json::from_value(raw)?)
        }
        other => bail!("cannot replay command '{other}'"),
    }
}

fn tempdir_for_replay() -> anyhow::Result<PathBuf> {
    let dir = std::env::temp_dir().join(format!("rankpyr-replay-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Runs a parsed command and returns its JSON summary.
pub fn execute(cli: &Cli) -> anyhow::Result<Value> {
    match &cli.command {
        Command::SynthGen(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::RankAudit(a) => cmd_audit(a),
        Command::ExportDensity(a) => cmd_export(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Replay(a) => cmd_replay(a),
    }
}

/// Machine-readable failure record.
pub fn error_record(err: &anyhow::Error) -> Value {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<rankpyr::Error>())
        .map_or("error", |e| e.kind());
    json!({ "error": { "kind": kind, "message": format!("{err:#}") } })
}

/// Parses `argv`, runs the command, prints the JSON summary (stdout) or
/// error record (stderr), and returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let record = json!({ "error": { "kind": "usage", "message": e.to_string() } });
            eprintln!("{record}");
            return 2;
        }
    };
    match execute(&cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            0
        }
        Err(err) => {
            eprintln!("{}", error_record(&err));
            1
        }
    }
}
