mod common;

use common::{random_sample, rng};
use precofact::model::{ModelConfig, ModelParams, Variant};
use precofact::{Activation, Mode, Tensor, CLASS_COUNT};
use rand::Rng;

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng(1);
    for _ in 0..200 {
        let rows = r.gen_range(1..6);
        let cols = r.gen_range(1..40);
        let scale = [1.0, 10.0, 100.0][r.gen_range(0..3)];
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| r.gen_range(-scale..scale))
            .collect();
        let mut mask: Vec<bool> = (0..cols).map(|_| r.gen_bool(0.7)).collect();
        mask[0] = true;
        let x = Tensor::new(vec![rows, cols], data).unwrap();
        for m in [None, Some(mask.as_slice())] {
            let p = x.softmax_rows(m).unwrap();
            for row in 0..rows {
                let s: f64 = p.row(row).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
            let pf = x.cast::<f32>().softmax_rows(m).unwrap();
            for row in 0..rows {
                let s: f32 = pf.row(row).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn forward_outputs_are_distributions() {
    let mut r = rng(2);
    for variant in [Variant::Full, Variant::SameModalityOnly, Variant::NoCoatt] {
        for activation in [Activation::Relu, Activation::Mish] {
            let config = ModelConfig {
                variant,
                activation,
                ..ModelConfig::toy(6, 8, 2, 6)
            };
            let params = ModelParams::<f64>::init(config, r.gen()).unwrap();
            for _ in 0..20 {
                let counts = [
                    r.gen_range(1..5),
                    r.gen_range(1..5),
                    r.gen_range(1..5),
                    r.gen_range(1..5),
                ];
                let sample = random_sample(&config, counts, &mut r);
                let p = params.forward(&sample, Mode::Eval).unwrap();
                assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn padding_is_invisible_to_the_model() {
    let config = ModelConfig::toy(6, 8, 2, 6);
    let params = ModelParams::<f64>::init(config, 3).unwrap();
    let mut r = rng(3);
    for _ in 0..20 {
        let sample = random_sample(&config, [2, 3, 1, 4], &mut r);
        let mut padded = sample.clone();
        padded.claim_image = padded.claim_image.padded(2);
        padded.doc_text = padded.doc_text.padded(3);
        let a = params.forward(&sample, Mode::Eval).unwrap();
        let b = params.forward(&padded, Mode::Eval).unwrap();
        for c in 0..CLASS_COUNT {
            assert!((a[c] - b[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn no_coatt_ignores_coattention_hyperparameters() {
    let base = ModelConfig {
        variant: Variant::NoCoatt,
        ..ModelConfig::toy(6, 8, 2, 6)
    };
    let other = ModelConfig {
        heads: 4,
        d_ff: 40,
        ..base
    };
    let a = ModelParams::<f64>::init(base, 11).unwrap();
    let b = ModelParams::<f64>::init(other, 11).unwrap();
    let sample = random_sample(&base, [2, 2, 2, 2], &mut rng(4));
    assert_eq!(
        a.forward(&sample, Mode::Eval).unwrap(),
        b.forward(&sample, Mode::Eval).unwrap()
    );
}

#[test]
fn f32_and_f64_agree() {
    let config = ModelConfig::toy(6, 8, 2, 6);
    let params = ModelParams::<f64>::init(config, 5).unwrap();
    let sample = random_sample(&config, [3, 3, 3, 3], &mut rng(5));
    let p64 = params.forward(&sample, Mode::Eval).unwrap();
    let p32 = params
        .cast::<f32>()
        .forward(&sample.cast(), Mode::Eval)
        .unwrap();
    for c in 0..CLASS_COUNT {
        assert!((p64[c] - f64::from(p32[c])).abs() < 1e-5);
    }
}

#[test]
fn batch_prediction_matches_single_forward() {
    let config = ModelConfig::toy(6, 8, 2, 6);
    let params = ModelParams::<f64>::init(config, 6).unwrap();
    let mut r = rng(6);
    let samples: Vec<_> = (0..16)
        .map(|i| random_sample(&config, [1 + i % 3, 2, 3, 1 + i % 4], &mut r))
        .collect();
    let batch = params.predict(&samples).unwrap();
    for (s, p) in samples.iter().zip(&batch) {
        assert_eq!(&params.forward(s, Mode::Eval).unwrap(), p);
    }
}

#[test]
fn paper_scale_configuration_shapes() {
    let config = ModelConfig::default();
    assert_eq!(
        (config.d, config.heads, config.d_ff, config.d_m1),
        (512, 4, 1024, 256)
    );
    assert_eq!(config.dropout, 0.1);
    assert!(config.validate().is_ok());
}
