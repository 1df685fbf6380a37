//! Seeded synthetic datasets for tests, benchmarks and smoke runs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::coattention::TokenSequence;
use crate::error::{Error, Result};
use crate::model::{Category, SampleEmbeddings, Source, CLASS_COUNT, MAX_TEXT_TOKENS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub claim_image: usize,
    pub claim_text: usize,
    pub doc_image: usize,
    pub doc_text: usize,
}

impl TokenCounts {
    pub fn get(&self, source: Source) -> usize {
        match source {
            Source::ClaimImage => self.claim_image,
            Source::ClaimText => self.claim_text,
            Source::DocImage => self.doc_image,
            Source::DocText => self.doc_text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    /// Every token of class `c` in source `s` is `separation · μ[c][s] + ε`,
    /// with `μ` random unit directions and `ε ~ N(0, I)`.
    #[default]
    Clouds,
    /// The label is only recoverable by matching the claim image against the
    /// document text. The document text is a five-entry table of
    /// `[key | value]` tokens: the five keys are fixed per dataset and the
    /// values are a per-sample permutation of the class prototypes. The
    /// claim image repeats the key of the entry whose value is the label. The claim text repeats that key half of the time
    /// and a random entry's key otherwise. The document image is noise.
    ///
    /// Keys fill the first `text_width / 2` columns and need
    /// `image_width >= text_width / 2`. `tokens.doc_text` is ignored: the
    /// table always has five rows.
    CrossModal,
}

impl std::str::FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clouds" => Ok(SyntheticTask::Clouds),
            "cross_modal" | "cross-modal" => Ok(SyntheticTask::CrossModal),
            other => Err(Error::Config(format!("unknown synthetic task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub samples_per_class: usize,
    pub tokens: TokenCounts,
    pub text_width: usize,
    pub image_width: usize,
    /// Signal norm relative to unit-variance noise.
    pub separation: f64,
    pub seed: u64,
    pub labeled: bool,
    pub task: SyntheticTask,
}

impl SyntheticSpec {
    /// Four samples per class with 2–3 tokens per source.
    pub fn toy(text_width: usize, image_width: usize) -> Self {
        Self {
            samples_per_class: 4,
            tokens: TokenCounts {
                claim_image: 2,
                claim_text: 3,
                doc_image: 2,
                doc_text: 3,
            },
            text_width,
            image_width,
            separation: 5.0,
            seed: 7,
            labeled: true,
            task: SyntheticTask::Clouds,
        }
    }

    fn width(&self, source: Source) -> usize {
        if source.is_text() {
            self.text_width
        } else {
            self.image_width
        }
    }

    fn validate(&self) -> Result<()> {
        if self.text_width == 0 || self.image_width == 0 {
            return Err(Error::InvalidInput(
                "synthetic widths must be positive".into(),
            ));
        }
        for source in Source::ALL {
            let n = self.tokens.get(source);
            if n == 0 {
                return Err(Error::InvalidInput(format!(
                    "{} token count must be positive",
                    source.name()
                )));
            }
            if source.is_text() && n > MAX_TEXT_TOKENS {
                return Err(Error::InvalidInput(format!(
                    "{} token count {n} exceeds {MAX_TEXT_TOKENS}",
                    source.name()
                )));
            }
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::InvalidInput(
                "separation must be finite and non-negative".into(),
            ));
        }
        if self.task == SyntheticTask::CrossModal
            && (self.text_width < 2 || self.image_width < self.text_width / 2)
        {
            return Err(Error::InvalidInput(
                "cross-modal task needs text_width >= 2 and image_width >= text_width / 2".into(),
            ));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, n);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// `rows` tokens, each `signal` (zero-extended) plus unit Gaussian noise.
fn tokens(rng: &mut ChaCha8Rng, rows: &[Vec<f64>], width: usize) -> TokenSequence<f32> {
    let mut data = Vec::with_capacity(rows.len() * width);
    for signal in rows {
        for c in 0..width {
            let noise: f64 = rng.sample(StandardNormal);
            data.push((signal.get(c).copied().unwrap_or(0.0) + noise) as f32);
        }
    }
    TokenSequence::dense(Tensor::new(vec![rows.len(), width], data).expect("shape matches"))
        .expect("no padding")
}

/// Balanced labeled (or unlabeled) dataset; byte-identical for equal specs.
/// Sample `i` has class `i mod 5` and id `syn-{i:06}`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.samples_per_class * CLASS_COUNT;
    let mut samples = Vec::with_capacity(total);

    match spec.task {
        SyntheticTask::Clouds => {
            let means: Vec<[Vec<f64>; 4]> = (0..CLASS_COUNT)
                .map(|_| Source::ALL.map(|s| unit(&mut rng, spec.width(s))))
                .collect();
            for i in 0..total {
                let class = i % CLASS_COUNT;
                let seqs = Source::ALL.map(|s| {
                    let mean: Vec<f64> = means[class][s.slot()]
                        .iter()
                        .map(|m| spec.separation * m)
                        .collect();
                    let rows = vec![mean; spec.tokens.get(s)];
                    tokens(&mut rng, &rows, spec.width(s))
                });
                samples.push(assemble(i, class, seqs, spec.labeled));
            }
        }
        SyntheticTask::CrossModal => {
            let key_width = spec.text_width / 2;
            let value_width = spec.text_width - key_width;
            let prototypes: Vec<Vec<f64>> = (0..CLASS_COUNT)
                .map(|_| unit(&mut rng, value_width))
                .collect();
            let keys: Vec<Vec<f64>> = (0..CLASS_COUNT)
                .map(|_| {
                    unit(&mut rng, key_width)
                        .into_iter()
                        .map(|k| spec.separation * k)
                        .collect()
                })
                .collect();
            for i in 0..total {
                let class = i % CLASS_COUNT;
                let mut values: Vec<usize> = (0..CLASS_COUNT).collect();
                values.shuffle(&mut rng);
                let answer = values
                    .iter()
                    .position(|&v| v == class)
                    .expect("permutation");
                let text_entry = if rng.gen_bool(0.5) {
                    answer
                } else {
                    rng.gen_range(0..CLASS_COUNT)
                };

                let table: Vec<Vec<f64>> = keys
                    .iter()
                    .zip(&values)
                    .map(|(k, &v)| {
                        let mut row = k.clone();
                        row.extend(prototypes[v].iter().map(|p| spec.separation * p));
                        row
                    })
                    .collect();
                let claim_image = tokens(
                    &mut rng,
                    &vec![keys[answer].clone(); spec.tokens.claim_image],
                    spec.image_width,
                );
                let claim_text = tokens(
                    &mut rng,
                    &vec![keys[text_entry].clone(); spec.tokens.claim_text],
                    spec.text_width,
                );
                let doc_image = tokens(
                    &mut rng,
                    &vec![Vec::new(); spec.tokens.doc_image],
                    spec.image_width,
                );
                let doc_text = tokens(&mut rng, &table, spec.text_width);
                samples.push(assemble(
                    i,
                    class,
                    [claim_image, claim_text, doc_image, doc_text],
                    spec.labeled,
                ));
            }
        }
    }
    Dataset::new(spec.text_width, spec.image_width, samples)
}

fn assemble(
    i: usize,
    class: usize,
    seqs: [TokenSequence<f32>; 4],
    labeled: bool,
) -> SampleEmbeddings<f32> {
    let [claim_image, claim_text, doc_image, doc_text] = seqs;
    SampleEmbeddings {
        id: format!("syn-{i:06}"),
        claim_image,
        claim_text,
        doc_image,
        doc_text,
        label: labeled.then(|| Category::from_index(class).expect("class < 5")),
    }
}
