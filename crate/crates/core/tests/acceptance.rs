//! One PASS/FAIL line per acceptance criterion. Exits nonzero on any FAIL.

mod common;

use std::time::{Duration, Instant};

use common::{
    fuzz, metric_oracle_mismatches, model_gradient_error, padding_deviation, random_instance,
    random_prediction_set, random_sample, random_tensor, rng, swap_symmetry_deviation, FuzzStats,
};
use precofact::coattention::{BlockConfig, CoAttentionParams, TokenSequence, LAYER_NORM_EPS};
use precofact::dataio::{generate_synthetic, Checkpoint, Dataset, SyntheticSpec, SyntheticTask};
use precofact::ensemble::{combine, EnsembleConfig, PredictionSet};
use precofact::model::{Mode, ModelConfig, ModelParams, Variant};
use precofact::training::{model_checkpoint, score, TrainConfig, Trainer};
use precofact::{argmax_predict, evaluate, Activation, Tensor};
use rand::Rng;

const GRADIENT_TOL: f64 = 1e-4;
const GRADIENT_LIMIT: Duration = Duration::from_secs(60);
const SOFTMAX_TOL: f64 = 1e-6;
const NORMALIZATION_SAMPLES: usize = 500;
const NORMALIZATION_LIMIT: Duration = Duration::from_secs(10);
const TRACE_TOL: f64 = 1e-9;
const PROPERTY_TOL: f64 = 1e-12;
const PROPERTY_INSTANCES: u64 = 100;
const OVERFIT_TARGET: f64 = 0.95;
const OVERFIT_EPOCHS: usize = 200;
const OVERFIT_LIMIT: Duration = Duration::from_secs(300);
const ABLATION_SEEDS: [u64; 3] = [41, 42, 43];
const METRIC_CASES: usize = 1000;
const SPOT_TOL: f64 = 1e-9;
const FUZZ_ITERATIONS: usize = 1000;

type Check = (bool, String);

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Check) -> Check {
    let start = Instant::now();
    let (ok, detail) = f();
    let elapsed = start.elapsed();
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let budget = limit.map_or(String::new(), |l| {
        format!(" / limit {:.0}s", l.as_secs_f64())
    });
    (
        ok && in_time,
        format!("{detail}; {:.1}s{budget}", elapsed.as_secs_f64()),
    )
}

fn gradient_fidelity() -> Check {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut r = rng(11);
    let cases = [
        (1, Variant::Full, None),
        (2, Variant::SameModalityOnly, None),
        (3, Variant::NoCoatt, None),
        (4, Variant::Full, Some(99)),
    ];
    for (seed, variant, dropout) in cases {
        // finite differences need a smooth network; ReLU kinks are checked per op
        let config = ModelConfig {
            variant,
            activation: Activation::Mish,
            ..ModelConfig::toy(6, 8, 2, 6)
        };
        let params = ModelParams::<f64>::init(config, seed).unwrap();
        let counts = [
            r.gen_range(2..=3),
            r.gen_range(2..=3),
            r.gen_range(2..=3),
            r.gen_range(2..=3),
        ];
        let sample = random_sample(&config, counts, &mut r);
        let (err, n) = model_gradient_error(&params, &sample, dropout);
        if n != config.param_count() {
            return (
                false,
                format!("checked {n} of {} parameters", config.param_count()),
            );
        }
        worst = worst.max(err);
        checked += n;
    }
    (
        worst < GRADIENT_TOL,
        format!("max relative error {worst:.2e} over {checked} parameter entries"),
    )
}

fn normalization() -> Check {
    let mut r = rng(12);
    let mut worst_softmax: f64 = 0.0;
    for _ in 0..NORMALIZATION_SAMPLES {
        let rows = r.gen_range(1..6);
        let cols = r.gen_range(1..40);
        let x = random_tensor(&[rows, cols], &mut r).map(|v| v * 20.0);
        let p64 = x.softmax_rows(None).unwrap();
        let p32 = x.cast::<f32>().softmax_rows(None).unwrap();
        for row in 0..rows {
            worst_softmax = worst_softmax.max((p64.row(row).iter().sum::<f64>() - 1.0).abs());
            worst_softmax =
                worst_softmax.max(f64::from((p32.row(row).iter().sum::<f32>() - 1.0).abs()));
        }
    }
    let mut worst_output: f64 = 0.0;
    let mut invalid = 0;
    let variants = [Variant::Full, Variant::SameModalityOnly, Variant::NoCoatt];
    let models: Vec<ModelParams<f32>> = variants
        .iter()
        .enumerate()
        .map(|(i, &variant)| {
            ModelParams::init(
                ModelConfig {
                    variant,
                    ..ModelConfig::toy(6, 8, 2, 6)
                },
                i as u64,
            )
            .unwrap()
        })
        .collect();
    for i in 0..NORMALIZATION_SAMPLES {
        let model = &models[i % models.len()];
        let counts = [
            r.gen_range(1..6),
            r.gen_range(1..6),
            r.gen_range(1..6),
            r.gen_range(1..6),
        ];
        let sample = random_sample(model.config(), counts, &mut r).cast::<f32>();
        let p = model.forward(&sample, Mode::Eval).unwrap();
        if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            invalid += 1;
        }
        worst_output = worst_output.max(f64::from((p.iter().sum::<f32>() - 1.0).abs()));
    }
    (
        worst_softmax < SOFTMAX_TOL && worst_output < SOFTMAX_TOL && invalid == 0,
        format!(
            "softmax row error {worst_softmax:.1e}, {NORMALIZATION_SAMPLES} forward outputs: sum error {worst_output:.1e}, {invalid} out of [0,1]"
        ),
    )
}

fn coattention_trace() -> Check {
    let params = CoAttentionParams::<f64>::identity(2, 3);
    let e = TokenSequence::dense(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap()).unwrap();
    let exact = BlockConfig {
        eps: 1e-12,
        ..BlockConfig::new(1, 0.0, Activation::Relu)
    };
    let (h_a, h_b) = params.forward(&e, &e, &exact, None).unwrap();
    let trace = [&h_a, &h_b]
        .iter()
        .map(|h| {
            (h.tokens().get(0, 0) - 1.0)
                .abs()
                .max((h.tokens().get(0, 1) + 1.0).abs())
        })
        .fold(0.0, f64::max);

    // at the default epsilon both norms shrink the values slightly
    let (d_a, _) = params
        .forward(&e, &e, &BlockConfig::new(1, 0.0, Activation::Relu), None)
        .unwrap();
    let c = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
    let analytic = c / (c * c + LAYER_NORM_EPS).sqrt();
    let default_eps = (d_a.tokens().get(0, 0) - analytic).abs();

    let swap = (0..PROPERTY_INSTANCES)
        .map(|s| swap_symmetry_deviation(&random_instance(s)))
        .fold(0.0, f64::max);
    let padding = (0..PROPERTY_INSTANCES)
        .map(|s| {
            let mut r = rng(s);
            padding_deviation(
                &random_instance(1000 + s),
                r.gen_range(0..4),
                r.gen_range(1..4),
            )
        })
        .fold(0.0, f64::max);
    (
        trace < TRACE_TOL && default_eps < PROPERTY_TOL && swap < PROPERTY_TOL && padding < PROPERTY_TOL,
        format!(
            "trace error {trace:.1e}, default-eps error {default_eps:.1e}, swap {swap:.1e}, padding {padding:.1e} over {PROPERTY_INSTANCES} instances"
        ),
    )
}

fn overfit() -> Check {
    let mut ds = generate_synthetic(&SyntheticSpec {
        samples_per_class: 13,
        ..SyntheticSpec::toy(8, 8)
    })
    .unwrap();
    ds.samples.truncate(64);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    pool.install(|| {
        let tc = TrainConfig {
            batch_size: 8,
            epochs: OVERFIT_EPOCHS,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::<f32>::new(ModelConfig::toy(8, 8, 2, 6), tc).unwrap();
        let labels: Vec<usize> = ds
            .samples
            .iter()
            .map(|s| s.label.unwrap().index())
            .collect();
        let mut accuracy = 0.0;
        for epoch in 1..=OVERFIT_EPOCHS {
            trainer.run_epoch(&ds.samples, None).unwrap();
            let probs: Vec<Vec<f64>> = trainer
                .params()
                .predict(&ds.samples)
                .unwrap()
                .iter()
                .map(|p| p.iter().map(|&v| f64::from(v)).collect())
                .collect();
            accuracy = evaluate(&argmax_predict(&probs), &labels).unwrap().accuracy;
            if accuracy >= OVERFIT_TARGET {
                return (
                    true,
                    format!("train accuracy {accuracy:.3} after {epoch} epochs on 64 samples"),
                );
            }
        }
        (
            false,
            format!("train accuracy {accuracy:.3} after {OVERFIT_EPOCHS} epochs"),
        )
    })
}

fn ablation_ordering() -> Check {
    let per_class_train = 300;
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in ABLATION_SEEDS {
        let mut train = generate_synthetic(&SyntheticSpec {
            task: SyntheticTask::CrossModal,
            separation: 5.0,
            samples_per_class: per_class_train + 40,
            seed,
            ..SyntheticSpec::toy(8, 4)
        })
        .unwrap();
        let held_out = train.samples.split_off(per_class_train * 5);
        let scores: Vec<f64> = [Variant::Full, Variant::SameModalityOnly, Variant::NoCoatt]
            .into_iter()
            .map(|variant| {
                let config = ModelConfig {
                    variant,
                    activation: Activation::Mish,
                    input_width_image: 4,
                    ..ModelConfig::toy(8, 16, 2, 16)
                };
                let tc = TrainConfig {
                    batch_size: 16,
                    epochs: 30,
                    learning_rate: 3e-3,
                    seed,
                    ..TrainConfig::default()
                };
                let mut trainer = Trainer::<f32>::new(config, tc).unwrap();
                trainer.fit(&train.samples, None, |_, _| Ok(())).unwrap();
                score(trainer.params(), &held_out).unwrap()
            })
            .collect();
        ok &= scores[0] >= scores[1] && scores[1] >= scores[2];
        lines.push(format!(
            "seed {seed}: {:.3} >= {:.3} >= {:.3}",
            scores[0], scores[1], scores[2]
        ));
    }
    (
        ok,
        format!(
            "held-out weighted F1 full/same_modality_only/no_coatt, {}",
            lines.join(", ")
        ),
    )
}

fn metric_oracle() -> Check {
    let mismatches = metric_oracle_mismatches(METRIC_CASES, 13);
    let hand = evaluate(&[0, 1, 1, 1, 0], &[0, 0, 1, 1, 1])
        .unwrap()
        .weighted_f1;
    (
        mismatches == 0 && hand == 0.6,
        format!(
            "{mismatches} of {METRIC_CASES} random cases differ from counting; hand case {hand}"
        ),
    )
}

fn ensemble_contract() -> Check {
    let mut r = rng(14);
    let member = random_prediction_set("a", 100, &mut r);
    let identity = combine(
        std::slice::from_ref(&member),
        &EnsembleConfig::new(vec![1.0], 1.0).unwrap(),
    )
    .unwrap();
    let identity_exact = identity.probs == member.probs;

    let a = PredictionSet::new("a", vec!["x".into()], vec![[0.25, 0.75, 0.0, 0.0, 0.0]]).unwrap();
    let b = PredictionSet::new("b", vec!["x".into()], vec![[0.81, 0.19, 0.0, 0.0, 0.0]]).unwrap();
    let spot = combine(&[a, b], &EnsembleConfig::new(vec![0.5, 0.5], 0.5).unwrap())
        .unwrap()
        .probs[0][0];
    let spot_err = (spot - 0.7).abs();

    let reference = EnsembleConfig::reference();
    let members: Vec<PredictionSet> = (0..5)
        .map(|i| random_prediction_set(&format!("m{i}"), 200, &mut r))
        .collect();
    let base = combine(&members, &reference).map(|s| s.predictions());
    let accepted = reference.validate().is_ok() && base.is_ok();
    let invariant = base.as_ref().is_ok_and(|base| {
        [0.1, 2.0, 7.5].iter().all(|&k| {
            let scaled = EnsembleConfig::new(
                reference.weights.iter().map(|w| w * k).collect(),
                reference.power,
            )
            .unwrap();
            combine(&members, &scaled).unwrap().predictions() == *base
        })
    });
    (
        identity_exact && spot_err < SPOT_TOL && accepted && invariant,
        format!(
            "identity bit-exact {identity_exact}, spot error {spot_err:.1e}, reference accepted {accepted}, rescaling invariant {invariant}"
        ),
    )
}

fn describe(stats: &FuzzStats) -> String {
    format!(
        "{}/{} truncations rejected, {} corruptions rejected, {} decoded to identical bytes, {} violations",
        stats.truncation_errors,
        stats.truncations,
        stats.corruption_errors,
        stats.faithful_reads,
        stats.violations.len()
    )
}

fn format_robustness() -> Check {
    let ds = generate_synthetic(&SyntheticSpec::toy(6, 8)).unwrap();
    let ds_bytes = ds.to_bytes().unwrap();
    let ds_round = Dataset::read_from(ds_bytes.as_slice())
        .unwrap()
        .to_bytes()
        .unwrap()
        == ds_bytes;

    let params = ModelParams::<f32>::init(ModelConfig::toy(6, 8, 2, 6), 5).unwrap();
    let ck_bytes = model_checkpoint(&params).to_bytes().unwrap();
    let ck_round = Checkpoint::read_from(ck_bytes.as_slice())
        .unwrap()
        .to_bytes()
        .unwrap()
        == ck_bytes;

    let ds_fuzz = fuzz(&ds_bytes, FUZZ_ITERATIONS, 15, |b| {
        Dataset::read_from(b)?.to_bytes()
    });
    let ck_fuzz = fuzz(&ck_bytes, FUZZ_ITERATIONS, 16, |b| {
        Checkpoint::read_from(b)?.to_bytes()
    });
    (
        ds_round && ck_round && ds_fuzz.clean() && ck_fuzz.clean(),
        format!(
            "round trips identical PCF1 {ds_round} / PCFM {ck_round}; PCF1 fuzz: {}; PCFM fuzz: {}",
            describe(&ds_fuzz),
            describe(&ck_fuzz)
        ),
    )
}

type Criterion = (&'static str, Option<Duration>, fn() -> Check);

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient-fidelity", Some(GRADIENT_LIMIT), gradient_fidelity),
        ("normalization", Some(NORMALIZATION_LIMIT), normalization),
        ("coattention-trace", None, coattention_trace),
        ("overfit-capacity", Some(OVERFIT_LIMIT), overfit),
        ("ablation-ordering", None, ablation_ordering),
        ("metric-oracle", None, metric_oracle),
        ("ensemble-contract", None, ensemble_contract),
        ("format-robustness", None, format_robustness),
    ];
    let mut failures = 0;
    for (name, limit, check) in criteria {
        let (ok, detail) = timed(limit, check);
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        failures += usize::from(!ok);
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
