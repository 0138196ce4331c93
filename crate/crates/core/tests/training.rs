use candle_core::{DType, Tensor};
use rankpyr::checkpoint::load_checkpoint;
use rankpyr::data::{synth_corpus, SynthConfig};
use rankpyr::trainer::{fit, BaselineMode, StepRecord, TrainConfig, TrainData};
use rankpyr::{Error, Model, ModelConfig};

fn tiny_config() -> TrainConfig {
    TrainConfig {
        crop_height: 64,
        crop_width: 64,
        steps: 3,
        lr: 1e-3,
        labeled_ratio: 0.5,
        val_fraction: 0.25,
        eval_every: 3,
        checkpoint_every: 2,
        seed: 7,
        ..Default::default()
    }
}

fn tiny_data(config: &TrainConfig) -> (tempfile::TempDir, TrainData) {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(
        dir.path(),
        &SynthConfig {
            images: 8,
            height: 72,
            width: 72,
            min_count: 3,
            max_count: 12,
            seed: 1,
        },
    )
    .unwrap();
    let data = TrainData::from_corpus(&corpus, config).unwrap();
    (dir, data)
}

#[test]
fn split_partitions_the_corpus() {
    let config = tiny_config();
    let (_dir, data) = tiny_data(&config);
    assert_eq!(data.labeled.len() + data.validation.len(), 4);
    assert_eq!(data.validation.len(), 1);
    assert_eq!(data.unlabeled.len(), 4);
    assert!(data.unlabeled.iter().all(|s| !s.is_labeled()));
    let labeled: Vec<&str> = data.labeled.iter().chain(&data.validation).map(|s| s.id.as_str()).collect();
    assert!(data.unlabeled.iter().all(|s| !labeled.contains(&s.id.as_str())));
}

#[test]
fn fit_is_deterministic_and_writes_artifacts() {
    let config = tiny_config();
    let (_dir, data) = tiny_data(&config);
    let out = tempfile::tempdir().unwrap();
    let a = fit(Model::new(config.model.clone(), config.seed, DType::F32).unwrap(), &data, &config, Some(out.path())).unwrap();
    let b = fit(Model::new(config.model.clone(), config.seed, DType::F32).unwrap(), &data, &config, None).unwrap();
    assert_eq!(a.final_digest, b.final_digest);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 3);
    assert!(a.log.iter().all(|r| r.loss.total.is_finite() && r.loss.pair_terms.len() == 30));
    assert!(a.log[2].val_mae.is_some());

    for name in ["log.jsonl", "train_config.json", "step-000002.json", "best.json", "final.json", "final.safetensors"] {
        assert!(out.path().join(name).exists(), "{name} missing");
    }
    let lines = std::fs::read_to_string(out.path().join("log.jsonl")).unwrap();
    let parsed: Vec<StepRecord> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, a.log);

    let (loaded, manifest) = load_checkpoint(&out.path().join("final.json"), DType::F32).unwrap();
    assert_eq!(loaded.digest().unwrap(), a.final_digest);
    assert_eq!(manifest.provenance["optimizer"]["lr"], 1e-3);
    assert_eq!(manifest.provenance["train_config"]["lambda"], 1.0);
}

#[test]
fn zero_lambda_skips_ranking() {
    let config = TrainConfig {
        lambda: 0.0,
        steps: 2,
        eval_every: 0,
        checkpoint_every: 0,
        ..tiny_config()
    };
    let (_dir, data) = tiny_data(&config);
    let outcome = fit(Model::new(ModelConfig::toy(), 0, DType::F32).unwrap(), &data, &config, None).unwrap();
    assert!(outcome.log.iter().all(|r| r.loss.ranking == 0.0 && r.loss.pair_terms.is_empty()));
    assert!(outcome.log.iter().all(|r| r.loss.total == r.loss.supervised));
}

#[test]
fn image_level_baseline_ranks_ten_pairs_per_image() {
    let config = TrainConfig {
        baseline_mode: BaselineMode::ImageLevelRanking,
        steps: 1,
        eval_every: 0,
        checkpoint_every: 0,
        ..tiny_config()
    };
    let (_dir, data) = tiny_data(&config);
    let outcome = fit(Model::new(ModelConfig::toy(), 0, DType::F32).unwrap(), &data, &config, None).unwrap();
    assert_eq!(outcome.log[0].loss.pair_terms.len(), 10);
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let config = TrainConfig {
        steps: 2,
        eval_every: 0,
        checkpoint_every: 0,
        ..tiny_config()
    };
    let (_dir, data) = tiny_data(&config);
    let model = Model::new(ModelConfig::toy(), 0, DType::F32).unwrap();
    let head = model.head().bias.clone();
    head.set(&Tensor::full(f32::INFINITY, head.dims(), model.device()).unwrap()).unwrap();
    match fit(model, &data, &config, None) {
        Err(Error::NonFiniteLoss { step, diagnostics }) => {
            assert_eq!(step, 0);
            assert!(diagnostics.contains("labeled_ids"));
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}
