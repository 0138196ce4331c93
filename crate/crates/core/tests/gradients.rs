use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankpyr::losses::{pyramid_rank_loss_tensor, pyramid_rank_loss_with_grad};
use rankpyr::patches::{generate_nested_boxes, nested_patch_batch, LevelShape};
use rankpyr::trainer::{loss_graph, RankingTarget, TrainConfig};
use rankpyr::{Model, ModelConfig};

fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn with_element(t: &Tensor, idx: usize, delta: f64) -> Tensor {
    let mut v = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    v[idx] += delta;
    Tensor::from_vec(v, t.dims(), &Device::Cpu).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Nested-patch count through crop/resize and the decoder, against central
/// differences in float64.
#[test]
fn count_gradient_matches_finite_differences() {
    let model = Model::new(ModelConfig::toy(), 11, DType::F64).unwrap();
    let feature = Var::from_tensor(&random_tensor(&[16, 16, 16], 5, 0.0, 1.0)).unwrap();
    let set = generate_nested_boxes(
        LevelShape {
            channels: 16,
            height: 16,
            width: 16,
        },
        (8, 7),
        4,
        0.75,
        2,
    )
    .unwrap();
    let objective = |f: &Tensor| -> Tensor {
        let batch = nested_patch_batch(f, &set).unwrap();
        let counts = model.count_from_patch(0, &batch).unwrap();
        // Weighted sum so every patch contributes differently.
        let w = Tensor::new(&[1.0f64, -0.5, 2.0, 0.25, -1.5], &Device::Cpu).unwrap();
        (counts * w).unwrap().sum_all().unwrap()
    };
    let loss = objective(feature.as_tensor());
    let grads = loss.backward().unwrap();

    let g_feat = grads.get(feature.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let h = 1e-6;
    let base = feature.as_tensor().clone();
    for idx in [0usize, 100, 777, 1500, 2300, 4000] {
        let up = objective(&with_element(&base, idx, h)).to_scalar::<f64>().unwrap();
        let down = objective(&with_element(&base, idx, -h)).to_scalar::<f64>().unwrap();
        let fd = (up - down) / (2.0 * h);
        assert!(rel_err(fd, g_feat[idx]) <= 1e-3, "feature {idx}: fd {fd} vs {}", g_feat[idx]);
    }

    let head = model.head().weight.clone();
    let g_head = grads.get(head.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let original = head.as_tensor().copy().unwrap();
    for idx in [0usize, 3, 9] {
        head.set(&with_element(&original, idx, h)).unwrap();
        let up = objective(feature.as_tensor()).to_scalar::<f64>().unwrap();
        head.set(&with_element(&original, idx, -h)).unwrap();
        let down = objective(feature.as_tensor()).to_scalar::<f64>().unwrap();
        head.set(&original).unwrap();
        let fd = (up - down) / (2.0 * h);
        assert!(rel_err(fd, g_head[idx]) <= 1e-3, "head {idx}: fd {fd} vs {}", g_head[idx]);
    }
}

/// Autograd of the tensor ranking loss against the closed-form subgradient.
#[test]
fn hinge_gradient_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let levels: Vec<Var> = (0..3)
        .map(|_| {
            let v: Vec<f64> = (0..2 * 5).map(|_| rng.random_range(0.0..10.0)).collect();
            Var::from_tensor(&Tensor::from_vec(v, (2, 5), &Device::Cpu).unwrap()).unwrap()
        })
        .collect();
    let tensors: Vec<Tensor> = levels.iter().map(|v| v.as_tensor().clone()).collect();
    let (loss, _) = pyramid_rank_loss_tensor(&tensors, 4, 0.3).unwrap();
    let grads = loss.backward().unwrap();

    let counts: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|i| tensors.iter().map(|t| t.to_vec2::<f64>().unwrap()[i].clone()).collect())
        .collect();
    let (value, expected) = pyramid_rank_loss_with_grad(&counts, 4, 0.3).unwrap();
    assert!(rel_err(value, loss.to_scalar::<f64>().unwrap()) <= 1e-12);
    for (l, var) in levels.iter().enumerate() {
        let g = grads.get(var.as_tensor()).unwrap().to_vec2::<f64>().unwrap();
        for i in 0..2 {
            for m in 0..5 {
                assert!((g[i][m] - expected[i][l][m]).abs() <= 1e-4, "image {i} level {l} patch {m}");
            }
        }
    }
}

/// In the unlabeled-only setting the ranking term must not reach labeled
/// pixels, and the supervised term must not reach unlabeled pixels.
#[test]
fn ranking_gradient_is_isolated_from_labeled_images() {
    let model = Model::new(ModelConfig::toy(), 2, DType::F32).unwrap();
    let labeled = Var::from_tensor(&random_tensor(&[1, 3, 64, 64], 1, -1.0, 1.0).to_dtype(DType::F32).unwrap()).unwrap();
    let unlabeled = Var::from_tensor(&random_tensor(&[1, 3, 64, 64], 2, -1.0, 1.0).to_dtype(DType::F32).unwrap()).unwrap();
    let gt = Tensor::zeros((1, 1, 64, 64), DType::F32, &Device::Cpu).unwrap();

    let config = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let graph = loss_graph(&model, labeled.as_tensor(), &gt, Some(unlabeled.as_tensor()), &config, &mut rng).unwrap();
    let rank_grads = graph.ranking.unwrap().backward().unwrap();
    assert!(rank_grads.get(labeled.as_tensor()).is_none());
    assert!(rank_grads.get(unlabeled.as_tensor()).is_some());
    let sup_grads = graph.supervised.unwrap().backward().unwrap();
    assert!(sup_grads.get(unlabeled.as_tensor()).is_none());

    let labeled_only = TrainConfig {
        ranking_target: RankingTarget::LabeledOnly,
        ..Default::default()
    };
    let graph = loss_graph(&model, labeled.as_tensor(), &gt, Some(unlabeled.as_tensor()), &labeled_only, &mut rng).unwrap();
    let rank_grads = graph.ranking.unwrap().backward().unwrap();
    assert!(rank_grads.get(labeled.as_tensor()).is_some());
    assert!(rank_grads.get(unlabeled.as_tensor()).is_none());
}

/// With non-negative weights and inputs the decoder output is non-negative,
/// so integrating one full-map density over nested boxes is monotone.
#[test]
fn positive_weights_give_monotone_integrated_counts() {
    let model = Model::new(ModelConfig::toy(), 0, DType::F64).unwrap();
    for (name, var) in model.named_params() {
        let fill = if name.ends_with(".weight") { 0.01 } else { 0.0 };
        var.set(&Tensor::full(fill, var.dims(), &Device::Cpu).unwrap()).unwrap();
    }
    let image = random_tensor(&[1, 3, 64, 64], 9, 0.0, 1.0);
    let pyramid = model.extract(&image).unwrap();
    for (level, feats) in pyramid.levels.iter().enumerate() {
        let coarse = model.decode(level, feats).unwrap().get(0).unwrap().get(0).unwrap();
        let (h, w) = coarse.dims2().unwrap();
        let grid = coarse.to_vec2::<f64>().unwrap();
        let set = generate_nested_boxes(
            LevelShape {
                channels: 1,
                height: h,
                width: w,
            },
            (h / 2, w / 2),
            4,
            0.75,
            2,
        )
        .unwrap();
        let counts: Vec<f64> = set
            .boxes
            .iter()
            .map(|b| (b.top..b.bottom()).flat_map(|r| (b.left..b.right()).map(move |c| (r, c))).map(|(r, c)| grid[r][c]).sum())
            .collect();
        assert!(counts.windows(2).all(|p| p[0] <= p[1]), "level {level}: {counts:?}");
        assert!(counts[0] > 0.0);
    }
}
