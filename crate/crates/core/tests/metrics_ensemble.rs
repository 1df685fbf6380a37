mod common;

use common::{
    brute_force_f1, metric_oracle_mismatches, random_distribution, random_prediction_set, rng,
};
use precofact::ensemble::{combine, grid_search, EnsembleConfig, PredictionSet};
use precofact::{argmax_predict, evaluate};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn evaluate_matches_counting_oracle() {
    assert_eq!(metric_oracle_mismatches(1000, 1), 0);
}

#[test]
fn hand_case_scores_exactly_point_six() {
    let report = evaluate(&[0, 1, 1, 1, 0], &[0, 0, 1, 1, 1]).unwrap();
    assert_eq!(report.weighted_f1, 0.6);
    assert_eq!(report.per_class_f1[0], 0.5);
    assert_eq!(report.per_class_f1[1], 2.0 / 3.0);
    assert_eq!(report.support, [2, 3, 0, 0, 0]);
    assert_eq!(brute_force_f1(&[0, 1, 1, 1, 0], &[0, 0, 1, 1, 1]).1, 0.6);
}

#[test]
fn precision_recall_form_agrees() {
    let mut r = rng(2);
    for _ in 0..200 {
        let n = r.gen_range(1..=50);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..5)).collect();
        let preds: Vec<usize> = (0..n).map(|_| r.gen_range(0..5)).collect();
        let rep = evaluate(&preds, &labels).unwrap();
        for c in 0..5 {
            let (p, rc) = (rep.precision[c], rep.recall[c]);
            let f = if p + rc == 0.0 {
                0.0
            } else {
                2.0 * p * rc / (p + rc)
            };
            assert!((f - rep.per_class_f1[c]).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn perfect_predictions_score_one(labels in prop::collection::vec(0usize..5, 1..50)) {
        let rep = evaluate(&labels, &labels).unwrap();
        prop_assert_eq!(rep.weighted_f1, 1.0);
        prop_assert_eq!(rep.accuracy, 1.0);
    }

    #[test]
    fn weighted_f1_is_bounded(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..50)) {
        let (preds, labels): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let rep = evaluate(&preds, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&rep.weighted_f1));
        let total: usize = rep.confusion.iter().flatten().sum();
        prop_assert_eq!(total, labels.len());
    }
}

#[test]
fn single_member_identity_is_bit_exact() {
    let member = random_prediction_set("a", 30, &mut rng(3));
    let out = combine(
        std::slice::from_ref(&member),
        &EnsembleConfig::new(vec![1.0], 1.0).unwrap(),
    )
    .unwrap();
    assert_eq!(out.probs, member.probs);
    assert_eq!(out.ids, member.ids);
}

#[test]
fn spot_value() {
    let a = PredictionSet::new("a", vec!["x".into()], vec![[0.25, 0.75, 0.0, 0.0, 0.0]]).unwrap();
    let b = PredictionSet::new("b", vec!["x".into()], vec![[0.81, 0.19, 0.0, 0.0, 0.0]]).unwrap();
    let out = combine(&[a, b], &EnsembleConfig::new(vec![0.5, 0.5], 0.5).unwrap()).unwrap();
    assert!((out.probs[0][0] - 0.7).abs() < 1e-9, "{}", out.probs[0][0]);
}

#[test]
fn reference_configuration_and_rescaling() {
    let mut r = rng(4);
    let members: Vec<PredictionSet> = (0..5)
        .map(|i| random_prediction_set(&format!("m{i}"), 200, &mut r))
        .collect();
    let reference = EnsembleConfig::reference();
    reference.validate().unwrap();
    let base = combine(&members, &reference).unwrap().predictions();
    for scale in [0.01, 0.5, 3.0, 1000.0] {
        let scaled =
            EnsembleConfig::new(reference.weights.iter().map(|w| w * scale).collect(), 0.5)
                .unwrap();
        assert_eq!(
            combine(&members, &scaled).unwrap().predictions(),
            base,
            "scale {scale}"
        );
    }
}

#[test]
fn member_order_does_not_matter() {
    let mut r = rng(5);
    let mut members: Vec<PredictionSet> = (0..4)
        .map(|i| random_prediction_set(&format!("m{i}"), 50, &mut r))
        .collect();
    // shuffle rows of later members; joins go by id
    for m in members.iter_mut().skip(1) {
        let mut order: Vec<usize> = (0..m.len()).collect();
        order.shuffle(&mut r);
        *m = PredictionSet::new(
            m.tag.clone(),
            order.iter().map(|&i| m.ids[i].clone()).collect(),
            order.iter().map(|&i| m.probs[i]).collect(),
        )
        .unwrap();
    }
    let weights = vec![0.4, 0.1, 0.3, 0.2];
    let base = combine(
        &members,
        &EnsembleConfig::new(weights.clone(), 0.5).unwrap(),
    )
    .unwrap();
    let perm = [2, 0, 3, 1];
    let permuted: Vec<PredictionSet> = perm.iter().map(|&i| members[i].clone()).collect();
    let pw: Vec<f64> = perm.iter().map(|&i| weights[i]).collect();
    let out = combine(&permuted, &EnsembleConfig::new(pw, 0.5).unwrap()).unwrap();
    let by_id: std::collections::HashMap<&String, &[f64; 5]> =
        out.ids.iter().zip(&out.probs).collect();
    for (id, p) in base.ids.iter().zip(&base.probs) {
        for c in 0..5 {
            assert!((p[c] - by_id[id][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn convex_weights_at_power_one_stay_distributions() {
    let mut r = rng(6);
    let members: Vec<PredictionSet> = (0..3)
        .map(|i| random_prediction_set(&format!("m{i}"), 40, &mut r))
        .collect();
    let out = combine(
        &members,
        &EnsembleConfig::new(vec![0.5, 0.3, 0.2], 1.0).unwrap(),
    )
    .unwrap();
    for row in &out.probs {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn mismatched_ids_are_a_join_error() {
    let a = PredictionSet::new("a", vec!["x".into(), "y".into()], vec![[0.2; 5]; 2]).unwrap();
    let b = PredictionSet::new("b", vec!["x".into(), "z".into()], vec![[0.2; 5]; 2]).unwrap();
    let err = combine(&[a, b], &EnsembleConfig::new(vec![1.0, 1.0], 0.5).unwrap()).unwrap_err();
    assert_eq!(err.category(), "join");
    assert!(
        err.to_string().contains('y') && err.to_string().contains('z'),
        "{err}"
    );
}

#[test]
fn invalid_configurations_are_rejected() {
    assert!(EnsembleConfig::new(vec![], 0.5).is_err());
    assert!(EnsembleConfig::new(vec![-0.1, 1.0], 0.5).is_err());
    assert!(EnsembleConfig::new(vec![0.0, 0.0], 0.5).is_err());
    assert!(EnsembleConfig::new(vec![1.0], 0.0).is_err());
    assert!(EnsembleConfig::new(vec![1.0], f64::NAN).is_err());
}

/// Noisy copies of the labels, with member-specific accuracy.
fn noisy_member(
    tag: &str,
    labels: &[usize],
    hit: f64,
    r: &mut rand_chacha::ChaCha8Rng,
) -> PredictionSet {
    let probs = labels
        .iter()
        .map(|&l| {
            let mut p = random_distribution(r);
            if r.gen_bool(hit) {
                p[l] += 1.0;
            }
            let s: f64 = p.iter().sum();
            p.map(|v| v / s)
        })
        .collect();
    PredictionSet::new(
        tag,
        (0..labels.len()).map(|i| format!("s{i}")).collect(),
        probs,
    )
    .unwrap()
}

#[test]
fn grid_search_is_at_least_the_best_member() {
    let mut r = rng(7);
    let labels: Vec<usize> = (0..300).map(|_| r.gen_range(0..5)).collect();
    let members: Vec<PredictionSet> = [0.5, 0.6, 0.4]
        .iter()
        .enumerate()
        .map(|(i, &hit)| noisy_member(&format!("m{i}"), &labels, hit, &mut r))
        .collect();
    let steps = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut grid = Vec::new();
    for &a in &steps {
        for &b in &steps {
            for &c in &steps {
                if a + b + c > 0.0 {
                    grid.push(vec![a, b, c]);
                }
            }
        }
    }
    let search = grid_search(&members, &grid, &[0.5, 1.0], &labels).unwrap();
    assert_eq!(search.table.len(), grid.len() * 2);
    let best_single = members
        .iter()
        .map(|m| {
            evaluate(&argmax_predict(&m.probs), &labels)
                .unwrap()
                .weighted_f1
        })
        .fold(0.0, f64::max);
    assert!(search.best_weighted_f1 >= best_single);
    let top = search
        .table
        .iter()
        .map(|row| row.weighted_f1)
        .fold(0.0, f64::max);
    assert_eq!(search.best_weighted_f1, top);
}
