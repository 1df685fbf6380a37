#![allow(dead_code)]

use precofact::autodiff::{Graph, NodeId};
use precofact::coattention::{BlockConfig, CoAttentionParams};
use precofact::ensemble::PredictionSet;
use precofact::model::{
    forward_graph, Category, ModelConfig, ModelParams, SampleEmbeddings, Source,
};
use precofact::{Activation, Parameters, Result, Tensor, TokenSequence};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn random_seq(n: usize, d: usize, rng: &mut impl Rng) -> TokenSequence<f64> {
    TokenSequence::dense(random_tensor(&[n, d], rng)).unwrap()
}

pub fn random_sample(
    config: &ModelConfig,
    counts: [usize; 4],
    rng: &mut impl Rng,
) -> SampleEmbeddings<f64> {
    let mut make = |s: Source| random_seq(counts[s.slot()], config.input_width(s), rng);
    SampleEmbeddings {
        id: "sample".into(),
        claim_image: make(Source::ClaimImage),
        claim_text: make(Source::ClaimText),
        doc_image: make(Source::DocImage),
        doc_text: make(Source::DocText),
        label: Some(Category::SupportText),
    }
}

/// Step of the five-point stencil.
pub const FD_STEP: f64 = 1e-3;

/// Fourth-order central difference of `f` at 0.
pub fn five_point(mut f: impl FnMut(f64) -> f64) -> f64 {
    let h = FD_STEP;
    (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h)
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between backpropagated and central-difference
/// gradients of `build`, for every element of every input. `build` gets one
/// leaf per input and must return a scalar node.
pub fn max_gradient_error<'p, F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Graph<'p, f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = values.iter().map(|v| g.leaf(v.clone())).collect();
        let out = build(&mut g, &leaves).unwrap();
        g.value(out).data()[0]
    };

    let mut g = Graph::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
    let out = build(&mut g, &leaves).unwrap();
    g.backward(out).unwrap();
    let analytic: Vec<Tensor<f64>> = leaves.iter().map(|&l| g.grad(l)).collect();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let numeric = five_point(|delta| {
                let mut shifted = inputs.to_vec();
                shifted[i].data_mut()[j] += delta;
                eval(&shifted)
            });
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
        }
    }
    worst
}

/// Reduces a tensor node to a scalar through fixed pseudo-random weights,
/// so every output element gets a distinct upstream gradient.
pub fn weighted_sum(g: &mut Graph<'_, f64>, x: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let w = random_tensor(&shape, &mut rng(seed));
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    g.sum(p)
}

/// Cross-entropy of one labeled sample as a function of every model
/// parameter; `dropout_seed` reseeds the same masks for every evaluation.
fn model_loss(
    params: &ModelParams<f64>,
    sample: &SampleEmbeddings<f64>,
    dropout_seed: Option<u64>,
    backward: bool,
) -> (f64, Vec<Tensor<f64>>) {
    let mut g = Graph::new();
    let nodes = params.bind(&mut g);
    let mut r = dropout_seed.map(rng);
    let r = r.as_mut().map(|r| r as &mut dyn RngCore);
    let probs = forward_graph(&mut g, &nodes, params.config(), sample, r).unwrap();
    let loss = g
        .cross_entropy(probs, &[sample.label.unwrap().index()])
        .unwrap();
    let value = g.value(loss).data()[0];
    if !backward {
        return (value, Vec::new());
    }
    g.backward(loss).unwrap();
    (value, g.take_param_grads())
}

/// Max relative error over every parameter of the model and the number of
/// scalars checked.
pub fn model_gradient_error(
    params: &ModelParams<f64>,
    sample: &SampleEmbeddings<f64>,
    dropout_seed: Option<u64>,
) -> (f64, usize) {
    let (_, analytic) = model_loss(params, sample, dropout_seed, true);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let numeric = five_point(|delta| {
                let mut work = params.clone();
                let mut k = 0;
                work.visit_mut("", &mut |_, t| {
                    if k == i {
                        t.data_mut()[j] += delta;
                    }
                    k += 1;
                });
                model_loss(&work, sample, dropout_seed, false).0
            });
            worst = worst.max(relative_error(grad.data()[j], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// A random co-attention instance: block, two sequences and a config.
pub struct Instance {
    pub params: CoAttentionParams<f64>,
    pub a: TokenSequence<f64>,
    pub b: TokenSequence<f64>,
    pub config: BlockConfig,
}

pub fn random_instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let heads = [1, 2, 4][r.gen_range(0..3)];
    let d = heads * r.gen_range(1..4);
    let d_ff = r.gen_range(1..3) * d;
    let activation = if r.gen_bool(0.5) {
        Activation::Relu
    } else {
        Activation::Mish
    };
    let params = CoAttentionParams::init(d, d_ff, &mut r);
    let (na, nb) = (r.gen_range(1..6), r.gen_range(1..6));
    Instance {
        a: random_seq(na, d, &mut r).scaled(2.0),
        b: random_seq(nb, d, &mut r).scaled(2.0),
        params,
        config: BlockConfig::new(heads, 0.1, activation),
    }
}

trait Scaled {
    fn scaled(self, k: f64) -> Self;
}

impl Scaled for TokenSequence<f64> {
    fn scaled(self, k: f64) -> Self {
        TokenSequence::new(self.tokens().scale(k), self.mask().to_vec()).unwrap()
    }
}

/// Deviation between `(H_A, H_B)` and the swapped-parameter block run on
/// `(B, A)`.
pub fn swap_symmetry_deviation(inst: &Instance) -> f64 {
    let (ha, hb) = inst
        .params
        .forward(&inst.a, &inst.b, &inst.config, None)
        .unwrap();
    let (hb2, ha2) = inst
        .params
        .swap_sides()
        .forward(&inst.b, &inst.a, &inst.config, None)
        .unwrap();
    max_abs_diff(ha.tokens(), ha2.tokens()).max(max_abs_diff(hb.tokens(), hb2.tokens()))
}

/// Deviation introduced by padding both inputs with masked rows; padded
/// output rows must be exactly zero.
pub fn padding_deviation(inst: &Instance, extra_a: usize, extra_b: usize) -> f64 {
    let (ha, hb) = inst
        .params
        .forward(&inst.a, &inst.b, &inst.config, None)
        .unwrap();
    let (pa, pb) = inst
        .params
        .forward(
            &inst.a.padded(extra_a),
            &inst.b.padded(extra_b),
            &inst.config,
            None,
        )
        .unwrap();
    let mut worst: f64 = 0.0;
    for (plain, padded) in [(&ha, &pa), (&hb, &pb)] {
        let n = plain.len();
        for r in 0..padded.len() {
            for (c, &v) in padded.tokens().row(r).iter().enumerate() {
                let expected = if r < n { plain.tokens().get(r, c) } else { 0.0 };
                if r >= n && v != 0.0 {
                    return f64::INFINITY;
                }
                worst = worst.max((v - expected).abs());
            }
        }
    }
    worst
}

/// Deviation from permutation equivariance: permuting A's tokens permutes
/// the rows of `H_A`, permuting B's tokens permutes the rows of `H_B`.
pub fn permutation_deviation(inst: &Instance, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut pa: Vec<usize> = (0..inst.a.len()).collect();
    let mut pb: Vec<usize> = (0..inst.b.len()).collect();
    pa.shuffle(&mut r);
    pb.shuffle(&mut r);
    let (ha, hb) = inst
        .params
        .forward(&inst.a, &inst.b, &inst.config, None)
        .unwrap();
    let (ha2, hb2) = inst
        .params
        .forward(
            &inst.a.permuted(&pa).unwrap(),
            &inst.b.permuted(&pb).unwrap(),
            &inst.config,
            None,
        )
        .unwrap();
    let expected_a = ha.permuted(&pa).unwrap();
    let expected_b = hb.permuted(&pb).unwrap();
    max_abs_diff(expected_a.tokens(), ha2.tokens())
        .max(max_abs_diff(expected_b.tokens(), hb2.tokens()))
}

pub const FORMAT_CATEGORIES: &[&str] = &[
    "bad-magic",
    "unsupported-version",
    "truncated",
    "bad-header",
    "token-count",
    "bad-label",
    "bad-text",
    "width-mismatch",
    "non-finite",
    "trailing-data",
    "bad-record",
];

#[derive(Debug, Default, Clone, PartialEq)]
pub struct FuzzStats {
    pub truncations: usize,
    pub truncation_errors: usize,
    pub corruptions: usize,
    pub corruption_errors: usize,
    /// Corrupted inputs that still form a valid file and re-encode to the
    /// exact same bytes.
    pub faithful_reads: usize,
    /// Panics, uncategorized errors, or accepted inputs that do not
    /// re-encode identically.
    pub violations: Vec<String>,
}

impl FuzzStats {
    pub fn clean(&self) -> bool {
        self.violations.is_empty() && self.truncations == self.truncation_errors
    }
}

/// Alternates random truncations and random byte corruptions of `bytes`.
/// `decode` returns the re-encoded bytes of whatever it accepted.
pub fn fuzz(
    bytes: &[u8],
    iterations: usize,
    seed: u64,
    decode: impl Fn(&[u8]) -> Result<Vec<u8>>,
) -> FuzzStats {
    let mut r = rng(seed);
    let mut stats = FuzzStats::default();
    for it in 0..iterations {
        let truncate = it % 2 == 0;
        let input: Vec<u8> = if truncate {
            bytes[..r.gen_range(0..bytes.len())].to_vec()
        } else {
            let mut v = bytes.to_vec();
            for _ in 0..r.gen_range(1..=4) {
                let at = r.gen_range(0..v.len());
                v[at] = r.gen();
            }
            v
        };
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| decode(&input)));
        if truncate {
            stats.truncations += 1;
        } else {
            stats.corruptions += 1;
        }
        match outcome {
            Err(_) => stats.violations.push(format!("iteration {it}: panic")),
            Ok(Err(e)) if FORMAT_CATEGORIES.contains(&e.category()) => {
                if truncate {
                    stats.truncation_errors += 1;
                } else {
                    stats.corruption_errors += 1;
                }
            }
            Ok(Err(e)) => stats.violations.push(format!(
                "iteration {it}: uncategorized `{}`: {e}",
                e.category()
            )),
            Ok(Ok(reencoded)) => {
                if truncate {
                    stats
                        .violations
                        .push(format!("iteration {it}: truncated input accepted"));
                } else if reencoded == input {
                    stats.faithful_reads += 1;
                } else {
                    stats.violations.push(format!(
                        "iteration {it}: accepted input re-encodes differently"
                    ));
                }
            }
        }
    }
    stats
}

/// Per-class F1 and weighted F1 by explicit TP/FP/FN counting.
pub fn brute_force_f1(predictions: &[usize], labels: &[usize]) -> ([f64; 5], f64) {
    let mut f1 = [0.0; 5];
    let mut weighted = 0.0;
    for (c, slot) in f1.iter_mut().enumerate() {
        let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
        for (&p, &t) in predictions.iter().zip(labels) {
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                _ => {}
            }
        }
        let den = 2 * tp + fp + fne;
        *slot = if den == 0 {
            0.0
        } else {
            (2 * tp) as f64 / den as f64
        };
        weighted += *slot * (tp + fne) as f64;
    }
    (f1, weighted / labels.len() as f64)
}

/// Random prediction/label pairs of length 1..=50; returns how many of
/// `cases` disagree with `evaluate` in any bit.
pub fn metric_oracle_mismatches(cases: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let n = r.gen_range(1..=50);
        // skewed class draws so some classes are often absent
        let classes = r.gen_range(1..=5);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
        let preds: Vec<usize> = (0..n).map(|_| r.gen_range(0..5)).collect();
        let report = precofact::evaluate(&preds, &labels).unwrap();
        let (f1, weighted) = brute_force_f1(&preds, &labels);
        if report.per_class_f1 != f1 || report.weighted_f1.to_bits() != weighted.to_bits() {
            bad += 1;
        }
    }
    bad
}

pub fn random_distribution(r: &mut ChaCha8Rng) -> [f64; 5] {
    let raw: [f64; 5] = std::array::from_fn(|_| r.gen_range(0.0..1.0f64).powi(3));
    let total: f64 = raw.iter().sum::<f64>().max(1e-12);
    raw.map(|v| v / total)
}

pub fn random_prediction_set(tag: &str, n: usize, r: &mut ChaCha8Rng) -> PredictionSet {
    let ids = (0..n).map(|i| format!("s{i}")).collect();
    let probs = (0..n).map(|_| random_distribution(r)).collect();
    PredictionSet::new(tag, ids, probs).unwrap()
}
