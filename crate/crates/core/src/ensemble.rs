//! Power-weighted ensembling of per-model class probabilities:
//! `p = Σ_i w_i · p_i^N`, applied per class and left unnormalized.
//!
//! Prediction files (`PCFP`) are the unit exchanged between `predict`,
//! `eval --dump-preds` and `ensemble`:
//!
//! ```text
//! "PCFP" | version u32 | tag (len u32, utf8) | class_count u32 | sample_count u64
//! record: id (len u32, utf8) | class_count × f32
//! ```

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::wire::{put_f32s, put_str, put_u32, put_u64, WireReader};
use crate::dataio::FormatError;
use crate::error::{Error, Result};
use crate::metrics::{argmax_predict, evaluate, EvalReport};
use crate::model::CLASS_COUNT;

pub const PREDICTIONS_MAGIC: [u8; 4] = *b"PCFP";
pub const PREDICTIONS_VERSION: u32 = 1;
pub const ENSEMBLE_TAG: &str = "ensemble";

/// Per-sample class scores from one model (or an ensemble), in sample order.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub tag: String,
    pub ids: Vec<String>,
    pub probs: Vec<[f64; CLASS_COUNT]>,
}

impl PredictionSet {
    pub fn new(
        tag: impl Into<String>,
        ids: Vec<String>,
        probs: Vec<[f64; CLASS_COUNT]>,
    ) -> Result<Self> {
        if ids.len() != probs.len() {
            return Err(Error::InvalidInput(format!(
                "{} ids for {} rows",
                ids.len(),
                probs.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvalidInput(format!("duplicate sample id `{dup}`")));
        }
        if let Some(i) = probs
            .iter()
            .position(|row| row.iter().any(|p| !p.is_finite() || *p < 0.0))
        {
            return Err(Error::InvalidInput(format!(
                "row {i} has a negative or non-finite score"
            )));
        }
        Ok(Self {
            tag: tag.into(),
            ids,
            probs,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn predictions(&self) -> Vec<usize> {
        argmax_predict(&self.probs)
    }

    pub fn evaluate(&self, labels: &[usize]) -> Result<EvalReport> {
        evaluate(&self.predictions(), labels)
    }

    /// Scores are stored as `f32`.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let io = |e| Error::Format(FormatError::Io(e));
        w.write_all(&PREDICTIONS_MAGIC).map_err(io)?;
        put_u32(&mut w, PREDICTIONS_VERSION).map_err(io)?;
        put_str(&mut w, &self.tag).map_err(io)?;
        put_u32(&mut w, CLASS_COUNT as u32).map_err(io)?;
        put_u64(&mut w, self.len() as u64).map_err(io)?;
        for (id, row) in self.ids.iter().zip(&self.probs) {
            put_str(&mut w, id).map_err(io)?;
            put_f32s(&mut w, row.iter().map(|&p| p as f32)).map_err(io)?;
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = WireReader::new(r);
        let what = || "prediction header".to_string();
        let magic: [u8; 4] = r.array(&what)?;
        if magic != PREDICTIONS_MAGIC {
            return Err(FormatError::BadMagic {
                expected: PREDICTIONS_MAGIC,
                found: magic,
            }
            .into());
        }
        let version = r.u32(&what)?;
        if version != PREDICTIONS_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let tag = r.string(&|| "model tag".to_string())?;
        let classes = r.u32(&what)?;
        if classes as usize != CLASS_COUNT {
            return Err(FormatError::Header(format!(
                "expected {CLASS_COUNT} classes, got {classes}"
            ))
            .into());
        }
        let count = r.u64(&what)?;
        let mut ids = Vec::new();
        let mut probs = Vec::new();
        for i in 0..count {
            ids.push(r.string(&|| format!("prediction {i} id"))?);
            let values = r.f32s(CLASS_COUNT as u64, &|| format!("prediction {i} scores"))?;
            let mut row = [0.0; CLASS_COUNT];
            for (slot, v) in row.iter_mut().zip(values) {
                *slot = f64::from(v);
            }
            probs.push(row);
        }
        r.expect_eof(&|| format!("after {count} predictions"))?;
        Self::new(tag, ids, probs).map_err(|e| FormatError::Record(e.to_string()).into())
    }
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<PredictionSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    PredictionSet::read_from(BufReader::new(file))
}

pub fn write_predictions(set: &PredictionSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    set.write_to(BufWriter::new(file))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    /// One weight per member, in member order. Weights need not sum to 1;
    /// zero is allowed so grids can switch members off.
    pub weights: Vec<f64>,
    pub power: f64,
}

impl EnsembleConfig {
    pub fn new(weights: Vec<f64>, power: f64) -> Result<Self> {
        let config = Self { weights, power };
        config.validate()?;
        Ok(config)
    }

    /// Five members, `N = 0.5`, weights `0.6, 0.2, 0.1, 0.2, 0.3`.
    pub fn reference() -> Self {
        Self {
            weights: vec![0.6, 0.2, 0.1, 0.2, 0.3],
            power: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::Config(
                "an ensemble needs at least one weight".into(),
            ));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "weights must be finite and non-negative: {:?}",
                self.weights
            )));
        }
        if self.weights.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one weight must be positive".into()));
        }
        if !(self.power.is_finite() && self.power > 0.0) {
            return Err(Error::Config(format!(
                "power must be positive, got {}",
                self.power
            )));
        }
        Ok(())
    }
}

/// `Σ_i w_i · p_i^N` per sample and class. Rows follow the first member's
/// order; the others are joined by sample id. `0^N` is 0.
pub fn combine(members: &[PredictionSet], config: &EnsembleConfig) -> Result<PredictionSet> {
    config.validate()?;
    if members.len() != config.weights.len() {
        return Err(Error::Config(format!(
            "{} members but {} weights",
            members.len(),
            config.weights.len()
        )));
    }
    let aligned = align(members)?;
    let first = &members[0];
    let probs = (0..first.len())
        .map(|row| {
            let mut out = [0.0f64; CLASS_COUNT];
            for ((member, rows), &w) in members.iter().zip(&aligned).zip(&config.weights) {
                let p = &member.probs[rows[row]];
                for c in 0..CLASS_COUNT {
                    out[c] += w * p[c].powf(config.power);
                }
            }
            out
        })
        .collect();
    PredictionSet::new(ENSEMBLE_TAG, first.ids.clone(), probs)
}

/// For each member, the row index of every sample in the first member's order.
fn align(members: &[PredictionSet]) -> Result<Vec<Vec<usize>>> {
    let first = members
        .first()
        .ok_or_else(|| Error::Config("an ensemble needs at least one member".into()))?;
    let reference: HashSet<&str> = first.ids.iter().map(String::as_str).collect();
    let mut differing = HashSet::new();
    let mut aligned = Vec::with_capacity(members.len());
    for member in members {
        let index: HashMap<&str, usize> = member
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        differing.extend(
            reference
                .iter()
                .filter(|id| !index.contains_key(*id))
                .copied(),
        );
        differing.extend(index.keys().filter(|id| !reference.contains(*id)).copied());
        aligned.push(
            first
                .ids
                .iter()
                .map(|id| index.get(id.as_str()).copied().unwrap_or(0))
                .collect(),
        );
    }
    if !differing.is_empty() {
        let mut ids: Vec<String> = differing.into_iter().map(str::to_string).collect();
        ids.sort();
        return Err(Error::Join(ids));
    }
    Ok(aligned)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub weights: Vec<f64>,
    pub power: f64,
    pub weighted_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSearch {
    pub best: EnsembleConfig,
    pub best_weighted_f1: f64,
    /// Every grid point, weights-major then power.
    pub table: Vec<GridRow>,
}

/// Weighted F1 of `combine` + argmax over the Cartesian product of the
/// grids. `labels` follow the first member's sample order. The first point
/// reaching the top score wins.
pub fn grid_search(
    members: &[PredictionSet],
    weight_grid: &[Vec<f64>],
    power_grid: &[f64],
    labels: &[usize],
) -> Result<GridSearch> {
    if weight_grid.is_empty() || power_grid.is_empty() {
        return Err(Error::Config(
            "grid search needs at least one weight vector and one power".into(),
        ));
    }
    let points: Vec<EnsembleConfig> = weight_grid
        .iter()
        .flat_map(|w| {
            power_grid.iter().map(move |&power| EnsembleConfig {
                weights: w.clone(),
                power,
            })
        })
        .collect();
    let scores = points
        .par_iter()
        .map(|config| {
            combine(members, config)?
                .evaluate(labels)
                .map(|r| r.weighted_f1)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let table = points
        .iter()
        .zip(&scores)
        .map(|(c, &weighted_f1)| GridRow {
            weights: c.weights.clone(),
            power: c.power,
            weighted_f1,
        })
        .collect();
    Ok(GridSearch {
        best: points[best].clone(),
        best_weighted_f1: scores[best],
        table,
    })
}
