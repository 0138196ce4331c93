use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rankpyr::data::{self, flip_points, RgbImage, Sample};
use rankpyr::density::{fixed_kernel_density, geometry_adaptive_density, HeadPointSet, KernelSpec};
use rankpyr::losses::{margin_rank_pair, pyramid_rank_loss, supervised_l2};
use rankpyr::patches::{
    build_pair_set, crop_and_resize, generate_nested_boxes, CenterDraw, LevelGeometry, LevelShape,
};

fn points_strategy(h: usize, w: usize, max: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec((0.0..w as f64, 0.0..h as f64).prop_map(|(x, y)| [x, y]), 0..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nested_boxes_hold_invariants(
        h in 8usize..160, w in 8usize..160,
        crops in 1usize..7, ratio in 0.3f64..0.95,
        row in 0.0f64..1.0, col in 0.0f64..1.0,
    ) {
        let shape = LevelShape { channels: 1, height: h, width: w };
        let center = CenterDraw { row, col }.locate(h, w).unwrap();
        let set = generate_nested_boxes(shape, center, crops, ratio, 2).unwrap();
        set.check_invariants(ratio, 2).unwrap();
        prop_assert_eq!(build_pair_set(&set).unwrap().len(), crops * (crops + 1) / 2);
        for pair in set.boxes.windows(2) {
            prop_assert!(pair[1].contains(&pair[0]));
            prop_assert!(pair[0].area() <= pair[1].area());
        }
    }

    #[test]
    fn centers_stay_in_window(h in 8usize..400, w in 8usize..400, row in 0.0f64..1.0, col in 0.0f64..1.0) {
        let (r, c) = CenterDraw { row, col }.locate(h, w).unwrap();
        let (hr, hc) = (h.div_ceil(8) / 2, w.div_ceil(8) / 2);
        prop_assert!(r + hr >= h / 2 && r <= h / 2 + hr);
        prop_assert!(c + hc >= w / 2 && c <= w / 2 + hc);
    }

    #[test]
    fn receptive_fields_of_nested_boxes_nest(
        h in 8usize..64, w in 8usize..64, crops in 1usize..5,
        stride in prop::sample::select(vec![1usize, 2, 4, 8]), rf in 1usize..60,
    ) {
        let shape = LevelShape { channels: 1, height: h, width: w };
        let set = generate_nested_boxes(shape, (h / 2, w / 2), crops, 0.75, 2).unwrap();
        let geo = LevelGeometry { stride, receptive_field: rf };
        let regions: Vec<_> = set.boxes.iter().map(|b| geo.to_input_space(b, h * stride, w * stride)).collect();
        for pair in regions.windows(2) {
            prop_assert!(pair[1].contains(&pair[0]));
        }
    }

    #[test]
    fn density_mass_matches_count(points in points_strategy(48, 64, 25), sigma in 0.5f64..6.0) {
        let set = HeadPointSet::new(points.clone(), 48, 64).unwrap();
        for map in [fixed_kernel_density(&set, sigma).unwrap(), geometry_adaptive_density(&set, 0.3, 3).unwrap()] {
            prop_assert!((map.mass() - points.len() as f64).abs() < 1e-3);
            prop_assert!(map.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn density_ignores_point_order(points in points_strategy(32, 32, 12), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut shuffled = points.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let kernel = KernelSpec::default();
        let a = kernel.render(&HeadPointSet::new(points, 32, 32).unwrap()).unwrap();
        let b = kernel.render(&HeadPointSet::new(shuffled, 32, 32).unwrap()).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn flip_is_an_involution(points in points_strategy(20, 30, 10)) {
        let set = HeadPointSet::new(points, 20, 30).unwrap();
        let twice = flip_points(&flip_points(&set).unwrap()).unwrap();
        prop_assert_eq!(twice.len(), set.len());
        for (a, b) in set.points().iter().zip(twice.points()) {
            prop_assert!((a[0] - b[0]).abs() < 1e-9 && a[1] == b[1]);
        }
    }

    #[test]
    fn augmentation_keeps_mass_equal_to_kept_points(points in points_strategy(80, 80, 20), seed in any::<u64>()) {
        let pts = HeadPointSet::new(points, 80, 80).unwrap();
        let kernel = KernelSpec::Fixed { sigma: 2.0 };
        let sample = Sample::labeled("p".into(), RgbImage::filled(80, 80, 0.3), pts, &kernel).unwrap();
        let cfg = data::AugmentConfig { crop_height: 64, crop_width: 64, kernel, ..Default::default() };
        let aug = data::augment(&sample, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let kept = aug.points.as_ref().unwrap().len() as f64;
        prop_assert!((aug.density.as_ref().unwrap().mass() - kept).abs() < 1e-3);
    }

    #[test]
    fn ranking_loss_is_nonnegative_and_zero_on_monotone(
        raw in prop::collection::vec(0.0f64..50.0, 5 * 3 * 2), eps in 0.0f64..2.0,
    ) {
        let counts: Vec<Vec<Vec<f64>>> = raw.chunks(15).map(|img| img.chunks(5).map(|c| c.to_vec()).collect()).collect();
        prop_assert!(pyramid_rank_loss(&counts, 4, eps).unwrap() >= 0.0);
        let sorted: Vec<Vec<Vec<f64>>> = counts.iter().map(|img| img.iter().map(|lvl| {
            let mut v = lvl.clone();
            v.sort_by(f64::total_cmp);
            v.iter().enumerate().map(|(i, x)| x + i as f64 * eps).collect()
        }).collect()).collect();
        prop_assert!(pyramid_rank_loss(&sorted, 4, eps).unwrap() < 1e-12);
    }

    #[test]
    fn hinge_is_nonnegative(a in -100.0f64..100.0, b in -100.0f64..100.0, eps in 0.0f64..5.0) {
        let h = margin_rank_pair(a, b, eps);
        prop_assert!(h >= 0.0);
        prop_assert!(h == 0.0 || (h - (a - b + eps)).abs() < 1e-12);
    }

    #[test]
    fn supervised_loss_vanishes_only_at_equality(vals in prop::collection::vec(0.0f64..3.0, 12)) {
        let p = Tensor::from_vec(vals.clone(), (1, 1, 3, 4), &Device::Cpu).unwrap();
        prop_assert_eq!(supervised_l2(&p, &p).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let q = (&p + 0.5).unwrap();
        prop_assert!(supervised_l2(&p, &q).unwrap().to_scalar::<f64>().unwrap() > 0.0);
    }

    #[test]
    fn constant_maps_stay_constant_under_resize(h in 4usize..20, w in 4usize..20, v in 0.0f64..5.0) {
        let x = Tensor::full(v, (2, h, w), &Device::Cpu).unwrap();
        let set = generate_nested_boxes(LevelShape { channels: 2, height: h, width: w }, (h / 2, w / 2), 3, 0.6, 2).unwrap();
        for b in &set.boxes {
            let out = crop_and_resize(&x, b).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            prop_assert!(out.iter().all(|o| (o - v).abs() < 1e-9));
        }
    }
}

#[test]
fn full_box_resize_is_identity() {
    let x = Tensor::arange(0f64, 60.0, &Device::Cpu).unwrap().reshape((3, 4, 5)).unwrap();
    let shape = LevelShape { channels: 3, height: 4, width: 5 };
    let set = generate_nested_boxes(shape, (2, 2), 2, 0.75, 2).unwrap();
    let out = crop_and_resize(&x, set.boxes.last().unwrap()).unwrap();
    assert_eq!(out.to_vec3::<f64>().unwrap(), x.to_vec3::<f64>().unwrap());
    assert_eq!(out.dtype(), DType::F64);
}
