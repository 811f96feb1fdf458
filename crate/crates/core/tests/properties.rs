use pmdef_core::nn::{build_model, predict_proba, ModelSpec};
use pmdef_core::tape::{kl_divergence, softmax_rows, Padding};
use pmdef_core::train::temperature_scale;
use pmdef_core::{math, Tape, Tensor};
use proptest::prelude::*;

fn logits(rows: usize, k: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-20.0f64..20.0, rows * k).prop_map(move |v| Tensor::new(vec![rows, k], v).unwrap())
}

fn distribution(k: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.0f64..1.0, k).prop_filter_map("positive mass", move |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-3).then(|| Tensor::new(vec![1, k], v.iter().map(|x| x / s).collect()).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(z in logits(3, 5), c in -50.0f64..50.0) {
        let p = softmax_rows(&z);
        for row in p.data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|v| *v > 0.0 && *v <= 1.0));
        }
        let shifted = softmax_rows(&z.map(|v| v + c));
        for (a, b) in p.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_equal(p in distribution(4), q in distribution(4)) {
        let d = kl_divergence(&p, &q).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn temperature_preserves_argmax(p in distribution(6), t in 0.01f64..20.0) {
        let s = temperature_scale(&p, t).unwrap();
        prop_assert_eq!(math::argmax(s.data()), math::argmax(p.data()));
        prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn low_temperature_concentrates(p in distribution(5)) {
        let uniform = p.data().iter().all(|v| (v - 0.2).abs() < 1e-9);
        prop_assume!(!uniform);
        let sharp = temperature_scale(&p, 0.01).unwrap();
        let max = |t: &Tensor| t.data().iter().cloned().fold(0.0, f64::max);
        prop_assert!(max(&sharp) >= max(&p));
    }

    #[test]
    fn predict_proba_rows_and_temperature_argmax(seed in 0u64..10_000, t in 0.1f64..5.0) {
        let m = build_model(ModelSpec::mlp_classifier("m", &[3, 3, 1], &[7], 4), seed).unwrap();
        let x = Tensor::new(vec![5, 3, 3, 1], (0..45).map(|i| ((i as u64 * 31 + seed) % 17) as f64 / 16.0).collect()).unwrap();
        let p = predict_proba(&m, &x).unwrap();
        for row in p.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let scaled = temperature_scale(&p, t).unwrap();
        prop_assert_eq!(scaled.argmax_rows(), p.argmax_rows());
    }

    #[test]
    fn build_is_a_function_of_spec_and_seed(seed in any::<u64>()) {
        let spec = ModelSpec::mlp_classifier("m", &[4], &[6, 5], 3);
        let a = build_model(spec.clone(), seed).unwrap();
        let b = build_model(spec, seed).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn one_hot_one_by_one_kernel_selects_channel(
        data in prop::collection::vec(-1.0f64..1.0, 2 * 3 * 3 * 4),
        ch in 0usize..4,
    ) {
        let x = Tensor::new(vec![2, 3, 3, 4], data).unwrap();
        let mut w = vec![0.0; 4];
        w[ch] = 1.0;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(Tensor::new(vec![1, 1, 4, 1], w).unwrap());
        let y = tape.conv2d(xv, wv, 1, Padding::Valid).unwrap();
        let got = tape.value(y).data().to_vec();
        let want: Vec<f64> = x.data().chunks(4).map(|px| px[ch]).collect();
        prop_assert_eq!(got, want);
    }
}
