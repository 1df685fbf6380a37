//! Mini-batch training with Adam, per-epoch logging, best-model selection
//! and resumable state.
//!
//! Within a batch every sample gets its own graph, so samples are processed
//! in parallel; gradients are then summed in sample order, which keeps runs
//! bitwise reproducible regardless of the thread count. Shuffling and
//! dropout draw from separate generators derived from the seed, the epoch
//! and the sample's position.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dataio::{read_checkpoint, write_checkpoint, Checkpoint, Dataset, FormatError};
use crate::error::{Error, Result};
use crate::metrics::{argmax_predict, evaluate};
use crate::model::{forward_graph, Category, ModelConfig, ModelParams, SampleEmbeddings};
use crate::params::Parameters;
use crate::tensor::{Scalar, Tensor};

fn default_batch_size() -> usize {
    32
}
fn default_epochs() -> usize {
    30
}
fn default_lr() -> f64 {
    3e-5
}
fn default_seed() -> u64 {
    41
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr", alias = "lr")]
    pub learning_rate: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Write a resumable state every this many epochs; 0 disables it.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            learning_rate: default_lr(),
            seed: default_seed(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        Ok(())
    }
}

/// SplitMix64 over the parts, for deriving independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3u64;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// Adam with bias correction. Moments are created on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(config: &TrainConfig) -> Self {
        Self::new(config.beta1, config.beta2, config.adam_eps)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Applies one update; `grads` follow the parameters' visiting order.
    /// A non-finite gradient aborts before anything is modified.
    pub fn step<P: Parameters<T>>(
        &mut self,
        params: &mut P,
        grads: &[Tensor<T>],
        lr: f64,
    ) -> Result<()> {
        let named = params.named_tensors();
        if named.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                named.len()
            )));
        }
        for ((name, p), g) in named.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::dim("adam", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                let bad = g.data().iter().filter(|v| !v.is_finite()).count();
                return Err(Error::Training(format!(
                    "non-finite gradient for `{name}` ({bad} of {} entries) at step {}",
                    g.len(),
                    self.step + 1
                )));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let one = T::one();
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let lr = T::lit(lr);
        let eps = T::lit(self.eps);
        let mut i = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |_, p| {
            let (mi, vi, g) = (m[i].data_mut(), v[i].data_mut(), grads[i].data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                mi[j] = b1 * mi[j] + (one - b1) * g[j];
                vi[j] = b2 * vi[j] + (one - b2) * g[j] * g[j];
                let m_hat = mi[j] / bc1;
                let v_hat = vi[j] / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
            i += 1;
        });
        Ok(())
    }
}

/// Mean loss and mean parameter gradients over `batch`. With `dropout_seeds`
/// the model runs in training mode, sample `i` drawing its dropout masks
/// from `dropout_seeds[i]`.
pub fn batch_gradients<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[&SampleEmbeddings<T>],
    dropout_seeds: Option<&[u64]>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let per_sample = batch
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let label = sample
                .label
                .ok_or_else(|| Error::Contract(format!("sample `{}` has no label", sample.id)))?;
            let mut g = Graph::new();
            let nodes = params.bind(&mut g);
            let mut rng = dropout_seeds.map(|s| ChaCha8Rng::seed_from_u64(s[i]));
            let rng = rng.as_mut().map(|r| r as &mut dyn RngCore);
            let probs = forward_graph(&mut g, &nodes, params.config(), sample, rng)?;
            let loss = g.cross_entropy(probs, &[label.index()])?;
            g.backward(loss)?;
            let value = g.value(loss).data()[0].to_f64().expect("finite loss");
            Ok((value, g.take_param_grads()))
        })
        .collect::<Result<Vec<_>>>()?;

    let scale = T::lit(1.0 / batch.len() as f64);
    let mut iter = per_sample.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, gs) in iter {
        loss += l;
        for (acc, g) in grads.iter_mut().zip(&gs) {
            acc.add_assign(g);
        }
    }
    for g in &mut grads {
        *g = g.scale(scale);
    }
    Ok((loss / batch.len() as f64, grads))
}

/// One line of the epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_weighted_f1: Option<f64>,
    pub wall_seconds: f64,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Best<T> {
    epoch: usize,
    score: f64,
    params: ModelParams<T>,
}

/// Training state. Cloning it is an exact in-memory snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer<T> {
    params: ModelParams<T>,
    config: TrainConfig,
    adam: Adam<T>,
    epochs_done: usize,
    best: Option<Best<T>>,
    log: Vec<EpochRecord>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh parameters initialized from `train_config.seed`.
    pub fn new(model_config: ModelConfig, train_config: TrainConfig) -> Result<Self> {
        train_config.validate()?;
        let params = ModelParams::init(model_config, train_config.seed)?;
        Ok(Self::from_params(params, train_config))
    }

    pub fn from_params(params: ModelParams<T>, config: TrainConfig) -> Self {
        Self {
            params,
            adam: Adam::from_config(&config),
            config,
            epochs_done: 0,
            best: None,
            log: Vec::new(),
        }
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Changes the epoch budget, e.g. to continue a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn adam(&self) -> &Adam<T> {
        &self.adam
    }

    pub fn log(&self) -> &[EpochRecord] {
        &self.log
    }

    /// Epoch (1-based) and score of the best validation result so far.
    pub fn best_epoch(&self) -> Option<(usize, f64)> {
        self.best.as_ref().map(|b| (b.epoch, b.score))
    }

    /// The best-validation parameters, or the current ones when no
    /// validation result exists.
    pub fn selected_params(&self) -> &ModelParams<T> {
        self.best.as_ref().map_or(&self.params, |b| &b.params)
    }

    /// One optimizer step on `batch`; returns the batch loss before the update.
    pub fn step(
        &mut self,
        batch: &[&SampleEmbeddings<T>],
        dropout_seeds: Option<&[u64]>,
    ) -> Result<f64> {
        let (loss, grads) = batch_gradients(&self.params, batch, dropout_seeds)?;
        self.adam
            .step(&mut self.params, &grads, self.config.learning_rate)?;
        Ok(loss)
    }

    /// Sample order used in epoch `epoch` (0-based).
    pub fn epoch_order(&self, epoch: usize, len: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, SHUFFLE_STREAM, epoch as u64]));
        order.shuffle(&mut rng);
        order
    }

    pub fn run_epoch(
        &mut self,
        train: &[SampleEmbeddings<T>],
        val: Option<&[SampleEmbeddings<T>]>,
    ) -> Result<EpochRecord> {
        check_labeled(train)?;
        let start = Instant::now();
        let epoch = self.epochs_done;
        let order = self.epoch_order(epoch, train.len());
        let mut total = 0.0;
        for (step, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&SampleEmbeddings<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let seeds: Vec<u64> = (0..chunk.len())
                .map(|pos| {
                    mix_seed(&[
                        self.config.seed,
                        DROPOUT_STREAM,
                        epoch as u64,
                        step as u64,
                        pos as u64,
                    ])
                })
                .collect();
            let loss = self.step(&batch, Some(&seeds))?;
            total += loss * chunk.len() as f64;
        }
        self.epochs_done += 1;

        let val_weighted_f1 = match val {
            Some(val) => Some(score(&self.params, val)?),
            None => None,
        };
        if let Some(score) = val_weighted_f1 {
            if self.best.as_ref().is_none_or(|b| score > b.score) {
                self.best = Some(Best {
                    epoch: self.epochs_done,
                    score,
                    params: self.params.clone(),
                });
            }
        }
        let record = EpochRecord {
            epoch: self.epochs_done,
            train_loss: total / train.len() as f64,
            val_weighted_f1,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        self.log.push(record.clone());
        Ok(record)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each one.
    pub fn fit(
        &mut self,
        train: &[SampleEmbeddings<T>],
        val: Option<&[SampleEmbeddings<T>]>,
        mut on_epoch: impl FnMut(&Self, &EpochRecord) -> Result<()>,
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        check_labeled(train)?;
        if let Some(val) = val {
            check_labeled(val)?;
        }
        while self.epochs_done < self.config.epochs {
            let record = self.run_epoch(train, val)?;
            on_epoch(self, &record)?;
        }
        Ok(())
    }
}

fn check_labeled<T>(samples: &[SampleEmbeddings<T>]) -> Result<()> {
    match samples.iter().find(|s| s.label.is_none()) {
        Some(s) => Err(Error::Contract(format!("sample `{}` is unlabeled", s.id))),
        None => Ok(()),
    }
}

/// Weighted F1 of the model's argmax predictions.
pub fn score<T: Scalar>(params: &ModelParams<T>, samples: &[SampleEmbeddings<T>]) -> Result<f64> {
    check_labeled(samples)?;
    let probs: Vec<Vec<f64>> = params
        .predict(samples)?
        .iter()
        .map(|row| row.iter().map(|p| p.to_f64().expect("finite")).collect())
        .collect();
    let labels: Vec<usize> = samples
        .iter()
        .map(|s| s.label.expect("checked").index())
        .collect();
    Ok(evaluate(&argmax_predict(&probs), &labels)?.weighted_f1)
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation parameters, or the final ones without validation.
    pub model: ModelParams<f32>,
    pub log: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

fn check_dataset(ds: &Dataset, model: &ModelConfig, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Contract(format!("{what} set is empty")));
    }
    if !ds.header.labeled {
        return Err(Error::Contract(format!("{what} set is unlabeled")));
    }
    ds.header
        .check_widths(model.input_width_text, model.input_width_image)
}

/// Trains a fresh model in 32-bit precision.
pub fn train(
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainOutcome> {
    check_dataset(train_set, model_config, "training")?;
    if let Some(v) = val_set {
        check_dataset(v, model_config, "validation")?;
    }
    let mut trainer = Trainer::<f32>::new(*model_config, *train_config)?;
    trainer.fit(
        &train_set.samples,
        val_set.map(|v| v.samples.as_slice()),
        |_, _| Ok(()),
    )?;
    Ok(TrainOutcome {
        model: trainer.selected_params().clone(),
        log: trainer.log().to_vec(),
        best_epoch: trainer.best_epoch().map(|(e, _)| e),
    })
}

const MODEL_FORMAT: &str = "precofact-model";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
const BEST: &str = "best.";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format: String,
    classes: Vec<String>,
    model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    state: Option<StateMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    epochs_done: usize,
    adam_step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    best_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    best_score: Option<f64>,
    /// The epoch log as JSON lines.
    log: String,
}

fn meta_text(meta: &Meta) -> String {
    toml::to_string(meta).expect("metadata serializes")
}

fn parse_meta(text: &str) -> Result<Meta> {
    let meta: Meta =
        toml::from_str(text).map_err(|e| FormatError::Record(format!("config block: {e}")))?;
    if meta.format != MODEL_FORMAT {
        return Err(
            FormatError::Record(format!("config block: unknown format `{}`", meta.format)).into(),
        );
    }
    if meta.classes != Category::names() {
        return Err(FormatError::Record(format!(
            "config block: unexpected classes {:?}",
            meta.classes
        ))
        .into());
    }
    meta.model
        .validate()
        .map_err(|e| FormatError::Record(format!("config block: {e}")))?;
    Ok(meta)
}

fn named_records(params: &ModelParams<f32>, prefix: &str) -> Vec<(String, Tensor<f32>)> {
    params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
        .collect()
}

fn take_prefixed(records: &[(String, Tensor<f32>)], prefix: &str) -> Vec<(String, Tensor<f32>)> {
    records
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
        .collect()
}

fn is_model_record(name: &str) -> bool {
    ![ADAM_M, ADAM_V, BEST].iter().any(|p| name.starts_with(p))
}

fn load_params(
    config: ModelConfig,
    records: Vec<(String, Tensor<f32>)>,
) -> Result<ModelParams<f32>> {
    ModelParams::from_named(config, records).map_err(|e| FormatError::Record(e.to_string()).into())
}

/// Model checkpoint: the configuration (with the class table) and every
/// parameter.
pub fn model_checkpoint(params: &ModelParams<f32>) -> Checkpoint {
    let meta = Meta {
        format: MODEL_FORMAT.into(),
        classes: Category::names(),
        model: *params.config(),
        train: None,
        state: None,
    };
    Checkpoint::new(meta_text(&meta), named_records(params, ""))
}

pub fn model_from_checkpoint(checkpoint: &Checkpoint) -> Result<ModelParams<f32>> {
    let meta = parse_meta(&checkpoint.config)?;
    let records = checkpoint
        .records
        .iter()
        .filter(|(n, _)| is_model_record(n))
        .cloned()
        .collect();
    load_params(meta.model, records)
}

pub fn save_model(params: &ModelParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(&model_checkpoint(params), path)
}

/// Loads a model checkpoint; resumable state files are accepted too.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    model_from_checkpoint(&read_checkpoint(path)?)
}

impl Trainer<f32> {
    /// Everything needed to continue training bit-for-bit.
    pub fn state_checkpoint(&self) -> Checkpoint {
        let log = self.log.iter().map(|r| r.to_json_line() + "\n").collect();
        let meta = Meta {
            format: MODEL_FORMAT.into(),
            classes: Category::names(),
            model: *self.params.config(),
            train: Some(self.config),
            state: Some(StateMeta {
                epochs_done: self.epochs_done,
                adam_step: self.adam.step,
                best_epoch: self.best.as_ref().map(|b| b.epoch),
                best_score: self.best.as_ref().map(|b| b.score),
                log,
            }),
        };
        let mut records = named_records(&self.params, "");
        let names: Vec<String> = records.iter().map(|(n, _)| n.clone()).collect();
        for (name, (m, v)) in names.iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            records.push((format!("{ADAM_M}{name}"), m.clone()));
            records.push((format!("{ADAM_V}{name}"), v.clone()));
        }
        if let Some(best) = &self.best {
            records.extend(named_records(&best.params, BEST));
        }
        Checkpoint::new(meta_text(&meta), records)
    }

    pub fn from_state_checkpoint(checkpoint: &Checkpoint) -> Result<Self> {
        let meta = parse_meta(&checkpoint.config)?;
        let missing =
            |what: &str| Error::from(FormatError::Record(format!("config block: missing {what}")));
        let config = meta.train.ok_or_else(|| missing("[train]"))?;
        let state = meta.state.ok_or_else(|| missing("[state]"))?;
        config
            .validate()
            .map_err(|e| FormatError::Record(format!("config block: {e}")))?;
        let params = model_from_checkpoint(checkpoint)?;

        let mut adam = Adam::from_config(&config);
        adam.step = state.adam_step;
        if state.adam_step > 0 {
            let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
            let lookup = |prefix: &str| -> Result<Vec<Tensor<f32>>> {
                names
                    .iter()
                    .zip(params.named_tensors())
                    .map(|(n, (_, p))| {
                        let t = checkpoint.get(&format!("{prefix}{n}")).ok_or_else(|| {
                            FormatError::Record(format!("missing optimizer record `{prefix}{n}`"))
                        })?;
                        if t.shape() != p.shape() {
                            return Err(FormatError::Record(format!(
                                "optimizer record `{prefix}{n}` has wrong shape"
                            ))
                            .into());
                        }
                        Ok(t.clone())
                    })
                    .collect()
            };
            adam.m = lookup(ADAM_M)?;
            adam.v = lookup(ADAM_V)?;
        }

        let best = match (state.best_epoch, state.best_score) {
            (Some(epoch), Some(score)) => Some(Best {
                epoch,
                score,
                params: load_params(meta.model, take_prefixed(&checkpoint.records, BEST))?,
            }),
            (None, None) => None,
            _ => {
                return Err(
                    FormatError::Record("config block: incomplete best-model state".into()).into(),
                )
            }
        };
        let log = state
            .log
            .lines()
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<EpochRecord>, _>>()
            .map_err(|e| FormatError::Record(format!("epoch log: {e}")))?;
        Ok(Self {
            params,
            config,
            adam,
            epochs_done: state.epochs_done,
            best,
            log,
        })
    }

    pub fn save_state(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(&self.state_checkpoint(), path)
    }

    pub fn load_state(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_state_checkpoint(&read_checkpoint(path)?)
    }
}
