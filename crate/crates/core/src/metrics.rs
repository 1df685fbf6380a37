//! Weighted F1 and confusion matrices over the five categories.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Category, CLASS_COUNT};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub precision: [f64; CLASS_COUNT],
    pub recall: [f64; CLASS_COUNT],
    pub per_class_f1: [f64; CLASS_COUNT],
    pub weighted_f1: f64,
    pub accuracy: f64,
    /// Rows are true classes, columns predicted classes.
    pub confusion: [[usize; CLASS_COUNT]; CLASS_COUNT],
    pub support: [usize; CLASS_COUNT],
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores class-id predictions against labels. Precision, recall and F1 use
/// the `0/0 := 0` convention; the weighted F1 weights each class by its
/// support.
pub fn evaluate(predictions: &[usize], labels: &[usize]) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate zero samples".into()));
    }
    if let Some(bad) = predictions
        .iter()
        .chain(labels)
        .find(|&&c| c >= CLASS_COUNT)
    {
        return Err(Error::InvalidInput(format!("class id {bad} out of range")));
    }

    let mut confusion = [[0usize; CLASS_COUNT]; CLASS_COUNT];
    for (&p, &t) in predictions.iter().zip(labels) {
        confusion[t][p] += 1;
    }
    let support: [usize; CLASS_COUNT] = std::array::from_fn(|c| confusion[c].iter().sum());
    let predicted: [usize; CLASS_COUNT] =
        std::array::from_fn(|c| confusion.iter().map(|row| row[c]).sum());

    let precision: [f64; CLASS_COUNT] =
        std::array::from_fn(|c| ratio(confusion[c][c], predicted[c]));
    let recall: [f64; CLASS_COUNT] = std::array::from_fn(|c| ratio(confusion[c][c], support[c]));
    let per_class_f1: [f64; CLASS_COUNT] = std::array::from_fn(|c| {
        // 2TP / (2TP + FP + FN), which equals 2PR/(P+R) and is exact in integers
        let tp = confusion[c][c];
        ratio(2 * tp, predicted[c] + support[c])
    });

    let total = labels.len();
    let weighted_f1 = per_class_f1
        .iter()
        .zip(&support)
        .map(|(f, &s)| f * s as f64)
        .sum::<f64>()
        / total as f64;
    let correct: usize = (0..CLASS_COUNT).map(|c| confusion[c][c]).sum();

    Ok(EvalReport {
        precision,
        recall,
        per_class_f1,
        weighted_f1,
        accuracy: ratio(correct, total),
        confusion,
        support,
    })
}

/// Index of each row's maximum; ties go to the lowest index. Rows need not
/// be normalized, so ensemble scores are accepted too.
pub fn argmax_predict<R: AsRef<[f64]>>(rows: &[R]) -> Vec<usize> {
    rows.iter()
        .map(|row| {
            row.as_ref()
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// Aligned human-readable summary with the confusion grid.
    pub fn table(&self) -> String {
        let names = Category::ALL.map(Category::name);
        let width = names.iter().map(|n| n.len()).max().unwrap_or(0);
        let mut out = String::new();
        out.push_str(&format!(
            "weighted_f1 {:.4}\naccuracy    {:.4}\n\n",
            self.weighted_f1, self.accuracy
        ));
        out.push_str(&format!(
            "{:<width$}  {:>9}  {:>6}  {:>6}  {:>7}\n",
            "class", "precision", "recall", "f1", "support"
        ));
        for (c, name) in names.iter().enumerate() {
            out.push_str(&format!(
                "{:<width$}  {:>9.4}  {:>6.4}  {:>6.4}  {:>7}\n",
                name, self.precision[c], self.recall[c], self.per_class_f1[c], self.support[c]
            ));
        }
        out.push_str(&format!(
            "\nconfusion (rows = true, cols = predicted)\n{:<width$}",
            ""
        ));
        for c in 0..CLASS_COUNT {
            out.push_str(&format!("  {c:>6}"));
        }
        out.push('\n');
        for (c, row) in self.confusion.iter().enumerate() {
            out.push_str(&format!("{:<width$}", names[c]));
            for v in row {
                out.push_str(&format!("  {v:>6}"));
            }
            out.push('\n');
        }
        out
    }
}
