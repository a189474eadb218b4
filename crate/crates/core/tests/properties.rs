use fastref::eval::{auroc, synth_generate, LabeledScores, SynthSpec};
use fastref::ot::{exact_ot_small, sinkhorn, CostMatrix, CostMode, SinkhornConfig};
use fastref::scoring::{gaussian_smooth, image_score, upsample_bilinear, ScoreMap};
use fastref::tensor_io::{
    decode_tensor, encode_tensor, flatten_map, header_len, read_tensor, unflatten, write_tensor,
    FeatureMap, FlatFeatures, Tensor,
};
use ndarray::Array2;
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f32> {
    -1e6f32..1e6f32
}

fn feature_map() -> impl Strategy<Value = FeatureMap> {
    (1usize..5, 1usize..5, 1usize..4).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(finite(), h * w * c)
            .prop_map(move |data| FeatureMap::new(h, w, c, data).unwrap())
    })
}

fn flat_features() -> impl Strategy<Value = FlatFeatures> {
    (1usize..8, 1usize..6).prop_flat_map(|(r, c)| {
        prop::collection::vec(finite(), r * c)
            .prop_map(move |v| FlatFeatures::from_rows(r, c, v).unwrap())
    })
}

fn cost_matrix(max: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max, 1..=max).prop_flat_map(|(m, n)| {
        prop::collection::vec(0.0f64..1.0, m * n)
            .prop_map(move |v| Array2::from_shape_vec((m, n), v).unwrap())
    })
}

fn labeled(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2..=max).prop_flat_map(|len| {
        (
            prop::collection::vec(-5.0f64..5.0, len),
            prop::collection::vec(0u8..=1, len),
        )
            .prop_filter("both classes present", |(_, l)| {
                l.contains(&0) && l.contains(&1)
            })
    })
}

proptest! {
    #[test]
    fn ftz_round_trip_is_exact(map in feature_map(), flat in flat_features()) {
        let dir = tempfile::tempdir().unwrap();
        for (name, tensor) in [("map.ftz", Tensor::from(map)), ("flat.ftz", Tensor::from(flat))] {
            let path = dir.path().join(name);
            write_tensor(&tensor, &path).unwrap();
            let size = std::fs::metadata(&path).unwrap().len() as usize;
            let dims = tensor.dims();
            prop_assert_eq!(size, header_len(dims.len()) + 4 * dims.iter().product::<usize>());
            prop_assert_eq!(read_tensor(&path).unwrap(), tensor.clone());
            prop_assert_eq!(decode_tensor(&encode_tensor(&tensor)).unwrap(), tensor);
        }
    }

    #[test]
    fn flatten_is_a_bijection(map in feature_map()) {
        let flat = flatten_map(&map);
        prop_assert_eq!(flat.rows(), map.height() * map.width());
        prop_assert_eq!(unflatten(&flat, map.height(), map.width()).unwrap(), map);
    }

    #[test]
    fn auroc_ignores_increasing_transforms((scores, labels) in labeled(32)) {
        let base = auroc(&LabeledScores::new(scores.clone(), labels.clone()).unwrap()).unwrap();
        let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        let affine: Vec<f64> = scores.iter().map(|s| 3.5 * s - 2.0).collect();
        for t in [exp, affine] {
            let v = auroc(&LabeledScores::new(t, labels.clone()).unwrap()).unwrap();
            prop_assert_eq!(v, base);
        }
    }

    #[test]
    fn auroc_of_negated_scores_is_complement((scores, labels) in labeled(32)) {
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
        let up = auroc(&LabeledScores::new(scores.clone(), labels.clone()).unwrap()).unwrap();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let down = auroc(&LabeledScores::new(neg, labels).unwrap()).unwrap();
        prop_assert!((up + down - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sinkhorn_plan_is_positive_and_residual_monotone(c in cost_matrix(6), eps in 0.05f64..2.0) {
        let cost = CostMatrix::new(c, CostMode::SqEuclidean).unwrap();
        let out = sinkhorn(&cost, &SinkhornConfig::new(eps).with_iters(50)).unwrap();
        prop_assert!(out.plan.view().iter().all(|&t| t > 0.0));
        for w in out.residual_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn sinkhorn_approaches_exact_ot(c in cost_matrix(4)) {
        let cost = CostMatrix::new(c.clone(), CostMode::SqEuclidean).unwrap();
        let exact = exact_ot_small(&cost).unwrap().value;
        let (m, n) = c.dim();
        for eps in [0.1, 0.05, 0.02] {
            let out = sinkhorn(&cost, &SinkhornConfig::new(eps).with_iters(20_000).with_tol(1e-10))
                .unwrap();
            let linear = (&out.plan.view() * &c).sum();
            prop_assert!(linear >= exact - 1e-9);
            prop_assert!(linear - exact <= eps * ((m * n) as f64).ln() + 1e-6);
        }
    }

    #[test]
    fn post_processing_never_raises_the_image_score(
        (h, w, values) in (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), prop::collection::vec(0.0f64..10.0, h * w))
        }),
        scale in 1usize..4,
        sigma in 0.5f64..4.0,
    ) {
        let raw = ScoreMap::new(Array2::from_shape_vec((h, w), values).unwrap()).unwrap();
        let up = upsample_bilinear(&raw, h * scale, w * scale).unwrap();
        let smooth = gaussian_smooth(&up, sigma).unwrap();
        prop_assert!(image_score(&smooth).0 <= image_score(&raw).0 + 1e-6);
        prop_assert!(image_score(&up).0 <= image_score(&raw).0 + 1e-6);
    }
}

#[test]
fn synthetic_instances_survive_ftz() {
    let dir = tempfile::tempdir().unwrap();
    let inst = synth_generate(&SynthSpec::outlier_suite(3)).unwrap();
    for (name, data) in [("bank.ftz", &inst.bank), ("query.ftz", &inst.query)] {
        let path = dir.path().join(name);
        let tensor = Tensor::from(FlatFeatures::new(data.clone()).unwrap());
        write_tensor(&tensor, &path).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), tensor);
    }
}
