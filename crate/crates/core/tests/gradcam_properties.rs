//! Property tests for Grad-CAM maps.

use densecxr::densenet::{Model, ModelConfig};
use densecxr::gradcam::{gradcam, heatmap_from_gradients, upsample_heatmap};
use densecxr::Tensor;
use proptest::prelude::*;

fn chw() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>)> {
    (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(c, h, w)| {
        let n = c * h * w;
        (
            prop::collection::vec(0.0f64..3.0, n).prop_map(move |v| Tensor::new(vec![c, h, w], v).unwrap()),
            prop::collection::vec(-1.0f64..1.0, n).prop_map(move |v| Tensor::new(vec![c, h, w], v).unwrap()),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(300) })]

    #[test]
    fn maps_stay_in_unit_range_with_peak_one((a, g) in chw()) {
        let map = heatmap_from_gradients(&a, &g, 0, "x").unwrap();
        prop_assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let peak = map.values.iter().copied().fold(0.0, f64::max);
        if map.is_empty() {
            prop_assert!(map.values.iter().all(|&v| v == 0.0));
        } else {
            prop_assert_eq!(peak, 1.0);
        }
        let up = upsample_heatmap(&map, map.height * 3, map.width * 2).unwrap();
        prop_assert!(up.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    /// Scaling the gradients by a power of two is exact in binary floating
    /// point, so the normalized map is bit-identical.
    #[test]
    fn power_of_two_gradient_scale_is_bit_identical((a, g) in chw(), e in -20i32..20) {
        let base = heatmap_from_gradients(&a, &g, 0, "x").unwrap();
        let scaled = heatmap_from_gradients(&a, &g.map(|v| v * 2f64.powi(e)), 0, "x").unwrap();
        prop_assert_eq!(base.values, scaled.values);
    }

    /// Any positive scale cancels in the normalization up to rounding.
    #[test]
    fn positive_gradient_scale_cancels((a, g) in chw(), s in 1e-3f64..1e3) {
        let base = heatmap_from_gradients(&a, &g, 0, "x").unwrap();
        let scaled = heatmap_from_gradients(&a, &g.map(|v| v * s), 0, "x").unwrap();
        prop_assert_eq!(base.is_empty(), scaled.is_empty());
        for (p, q) in base.values.iter().zip(&scaled.values) {
            prop_assert!((p - q).abs() <= 1e-12, "{p} vs {q}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(16) })]

    #[test]
    fn explaining_leaves_the_model_untouched(seed in any::<u64>(), class in 0usize..3) {
        let config = ModelConfig {
            input_channels: 1,
            input_size: (16, 16),
            initial_channels: 4,
            growth_rate: 4,
            block_layout: vec![2, 2],
            num_classes: 3,
            dropout_rate: 0.5,
            use_batch_norm: true,
        };
        let model = Model::<f64>::build(config, seed).unwrap();
        let before = model.clone();
        let image = Tensor::from_fn(&[1, 16, 16], |i| ((i as f64) * 0.13 + (seed % 7) as f64).cos());
        let first = gradcam(&model, &image, class).unwrap();
        prop_assert_eq!(&model, &before);
        prop_assert_eq!(first, gradcam(&model, &image, class).unwrap());
    }
}
