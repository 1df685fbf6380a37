//! The full fusion model: per-source embedding projections, co-attention over
//! source pairings, mean aggregation and the three-layer category classifier.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{reborrow, Graph, NodeId};
use crate::coattention::{
    co_attend, BlockConfig, CoAttentionNodes, CoAttentionParams, SeqNode, TokenSequence,
    LAYER_NORM_EPS,
};
use crate::error::{Error, Result};
use crate::params::{join, Affine, AffineNodes, Parameters};
use crate::tensor::{Activation, Scalar, Tensor};

pub const CLASS_COUNT: usize = 5;

/// Longest accepted text sequence, in tokens.
pub const MAX_TEXT_TOKENS: usize = 512;

/// Entailment categories, in their persisted id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    SupportMultimodal = 0,
    SupportText = 1,
    InsufficientMultimodal = 2,
    InsufficientText = 3,
    Refute = 4,
}

impl Category {
    pub const ALL: [Category; CLASS_COUNT] = [
        Category::SupportMultimodal,
        Category::SupportText,
        Category::InsufficientMultimodal,
        Category::InsufficientText,
        Category::Refute,
    ];

    pub fn from_index(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::SupportMultimodal => "Support_Multimodal",
            Category::SupportText => "Support_Text",
            Category::InsufficientMultimodal => "Insufficient_Multimodal",
            Category::InsufficientText => "Insufficient_Text",
            Category::Refute => "Refute",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn names() -> Vec<String> {
        Self::ALL.iter().map(|c| c.name().to_string()).collect()
    }
}

/// Which fusion pairings feed the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// All four pairings.
    #[default]
    Full,
    /// Image↔image and text↔text only.
    SameModalityOnly,
    /// No fusion; the classifier sees the four embeddings alone.
    NoCoatt,
}

impl Variant {
    pub fn pairings(self) -> &'static [Pairing] {
        match self {
            Variant::Full => &Pairing::ALL,
            Variant::SameModalityOnly => &Pairing::ALL[..2],
            Variant::NoCoatt => &[],
        }
    }

    /// Number of `d`-wide blocks in the classifier input.
    pub fn classifier_blocks(self) -> usize {
        2 * self.pairings().len() + Source::ALL.len()
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SameModalityOnly => "same_modality_only",
            Variant::NoCoatt => "no_coatt",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "same_modality_only" => Ok(Variant::SameModalityOnly),
            "no_coatt" => Ok(Variant::NoCoatt),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    ClaimImage,
    ClaimText,
    DocImage,
    DocText,
}

impl Source {
    /// Storage order, also the order of the trailing embedding blocks in the
    /// classifier input.
    pub const ALL: [Source; 4] = [
        Source::ClaimImage,
        Source::ClaimText,
        Source::DocImage,
        Source::DocText,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Source::ClaimImage => "claim_image",
            Source::ClaimText => "claim_text",
            Source::DocImage => "doc_image",
            Source::DocText => "doc_text",
        }
    }

    pub fn is_text(self) -> bool {
        matches!(self, Source::ClaimText | Source::DocText)
    }

    pub fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    ClaimImageDocImage,
    ClaimTextDocText,
    ClaimImageDocText,
    ClaimTextDocImage,
}

impl Pairing {
    pub const ALL: [Pairing; 4] = [
        Pairing::ClaimImageDocImage,
        Pairing::ClaimTextDocText,
        Pairing::ClaimImageDocText,
        Pairing::ClaimTextDocImage,
    ];

    pub fn sources(self) -> (Source, Source) {
        match self {
            Pairing::ClaimImageDocImage => (Source::ClaimImage, Source::DocImage),
            Pairing::ClaimTextDocText => (Source::ClaimText, Source::DocText),
            Pairing::ClaimImageDocText => (Source::ClaimImage, Source::DocText),
            Pairing::ClaimTextDocImage => (Source::ClaimText, Source::DocImage),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pairing::ClaimImageDocImage => "ci_di",
            Pairing::ClaimTextDocText => "ct_dt",
            Pairing::ClaimImageDocText => "ci_dt",
            Pairing::ClaimTextDocImage => "ct_di",
        }
    }
}

fn default_text_width() -> usize {
    768
}
fn default_image_width() -> usize {
    768
}
fn default_d() -> usize {
    512
}
fn default_heads() -> usize {
    4
}
fn default_d_ff() -> usize {
    1024
}
fn default_d_m1() -> usize {
    256
}
fn default_classes() -> usize {
    CLASS_COUNT
}
fn default_dropout() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}
fn default_eps() -> f64 {
    LAYER_NORM_EPS
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_text_width")]
    pub input_width_text: usize,
    #[serde(default = "default_image_width")]
    pub input_width_image: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_d_ff")]
    pub d_ff: usize,
    /// Hidden width of the classifier's second layer.
    #[serde(default = "default_d_m1")]
    pub d_m1: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub variant: Variant,
    /// Biases on the embedding and classifier affine maps.
    #[serde(default = "default_true")]
    pub affine_bias: bool,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_width_text: default_text_width(),
            input_width_image: default_image_width(),
            d: default_d(),
            heads: default_heads(),
            d_ff: default_d_ff(),
            d_m1: default_d_m1(),
            classes: CLASS_COUNT,
            dropout: default_dropout(),
            activation: Activation::Relu,
            variant: Variant::Full,
            affine_bias: true,
            layer_norm_eps: LAYER_NORM_EPS,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and smoke runs.
    pub fn toy(input_width: usize, d: usize, heads: usize, d_m1: usize) -> Self {
        Self {
            input_width_text: input_width,
            input_width_image: input_width,
            d,
            heads,
            d_ff: 2 * d,
            d_m1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("input_width_text", self.input_width_text),
            ("input_width_image", self.input_width_image),
            ("d", self.d),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("d_m1", self.d_m1),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d = {} is not divisible by heads = {}",
                self.d, self.heads
            )));
        }
        if self.classes != CLASS_COUNT {
            return Err(Error::Config(format!(
                "classes must be {CLASS_COUNT}, got {}",
                self.classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn input_width(&self, source: Source) -> usize {
        if source.is_text() {
            self.input_width_text
        } else {
            self.input_width_image
        }
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            heads: self.heads,
            dropout: self.dropout,
            activation: self.activation,
            eps: self.layer_norm_eps,
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let b = usize::from(self.affine_bias);
        let d = self.d;
        let emb: usize = Source::ALL
            .iter()
            .map(|&s| self.input_width(s) * d + b * d)
            .sum();
        let side = 4 * d * d + (d * self.d_ff + self.d_ff) + (self.d_ff * d + d) + 4 * d;
        let fusion = 2 * side * self.variant.pairings().len();
        let classifier = (self.variant.classifier_blocks() * d * d + b * d)
            + (d * self.d_m1 + b * self.d_m1)
            + (self.d_m1 * self.classes + b * self.classes);
        emb + fusion + classifier
    }
}

/// One sample: the four token sequences and an optional label.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEmbeddings<T> {
    pub id: String,
    pub claim_image: TokenSequence<T>,
    pub claim_text: TokenSequence<T>,
    pub doc_image: TokenSequence<T>,
    pub doc_text: TokenSequence<T>,
    pub label: Option<Category>,
}

impl<T: Scalar> SampleEmbeddings<T> {
    pub fn source(&self, source: Source) -> &TokenSequence<T> {
        match source {
            Source::ClaimImage => &self.claim_image,
            Source::ClaimText => &self.claim_text,
            Source::DocImage => &self.doc_image,
            Source::DocText => &self.doc_text,
        }
    }

    pub fn source_mut(&mut self, source: Source) -> &mut TokenSequence<T> {
        match source {
            Source::ClaimImage => &mut self.claim_image,
            Source::ClaimText => &mut self.claim_text,
            Source::DocImage => &mut self.doc_image,
            Source::DocText => &mut self.doc_text,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for source in Source::ALL {
            let seq = self.source(source);
            let width = config.input_width(source);
            if seq.width() != width {
                return Err(Error::dim(
                    "sample",
                    seq.tokens().shape(),
                    &[seq.len(), width],
                ));
            }
            if source.is_text() && seq.len() > MAX_TEXT_TOKENS {
                return Err(Error::InvalidInput(format!(
                    "sample {}: {} has {} tokens, limit is {MAX_TEXT_TOKENS}",
                    self.id,
                    source.name(),
                    seq.len()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> SampleEmbeddings<U> {
        SampleEmbeddings {
            id: self.id.clone(),
            claim_image: self.claim_image.cast(),
            claim_text: self.claim_text.cast(),
            doc_image: self.doc_image.cast(),
            doc_text: self.doc_text.cast(),
            label: self.label,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<T> {
    /// `W^Z`: concatenated aggregates → `d`
    pub fuse: Affine<T>,
    /// `W^{M1}`: `d` → `d_m1`
    pub hidden: Affine<T>,
    /// `W^{M2}`: `d_m1` → classes
    pub output: Affine<T>,
}

impl<T: Scalar> Parameters<T> for ClassifierParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.fuse.visit(&join(prefix, "fuse"), f);
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierNodes {
    pub fuse: AffineNodes,
    pub hidden: AffineNodes,
    pub output: AffineNodes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    /// Indexed by [`Source::ALL`] order.
    pub embeddings: [Affine<T>; 4],
    /// One block per pairing of the configured variant.
    pub pairings: Vec<CoAttentionParams<T>>,
    pub classifier: ClassifierParams<T>,
}

#[derive(Debug, Clone)]
pub struct ModelNodes {
    pub embeddings: [AffineNodes; 4],
    pub pairings: Vec<CoAttentionNodes>,
    pub classifier: ClassifierNodes,
}

/// Training mode carries the dropout generator.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

impl<'r> Mode<'r> {
    fn rng(&mut self) -> Option<&mut dyn RngCore> {
        match self {
            Mode::Eval => None,
            Mode::Train(rng) => Some(&mut **rng),
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Glorot-uniform affine maps, unit/zero norms, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bias = config.affine_bias;
        let d = config.d;
        let embeddings =
            Source::ALL.map(|s| Affine::init(config.input_width(s), d, bias, &mut rng));
        let pairings = config
            .variant
            .pairings()
            .iter()
            .map(|_| CoAttentionParams::init(d, config.d_ff, &mut rng))
            .collect();
        let classifier = ClassifierParams {
            fuse: Affine::init(config.variant.classifier_blocks() * d, d, bias, &mut rng),
            hidden: Affine::init(d, config.d_m1, bias, &mut rng),
            output: Affine::init(config.d_m1, config.classes, bias, &mut rng),
        };
        Ok(Self {
            config,
            embeddings,
            pairings,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Builds parameters from named tensors, checking that every expected
    /// name is present exactly once with the expected shape.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut params = Self::init(config, 0)?;
        let mut by_name: std::collections::HashMap<String, Tensor<T>> =
            std::collections::HashMap::new();
        for (name, t) in tensors {
            if by_name.insert(name.clone(), t).is_some() {
                return Err(Error::InvalidInput(format!("duplicate parameter `{name}`")));
            }
        }
        let mut failure = None;
        params.visit_mut("", &mut |name, slot| {
            if failure.is_some() {
                return;
            }
            match by_name.remove(&name) {
                Some(t) if t.shape() == slot.shape() => *slot = t,
                Some(t) => failure = Some(Error::dim("load_params", slot.shape(), t.shape())),
                None => failure = Some(Error::InvalidInput(format!("missing parameter `{name}`"))),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(extra) = by_name.keys().min() {
            return Err(Error::InvalidInput(format!(
                "unexpected parameter `{extra}`"
            )));
        }
        Ok(params)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let named = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.cast::<U>()))
            .collect();
        ModelParams::from_named(self.config, named).expect("same layout")
    }

    /// Binds every parameter into `g` in [`Parameters::visit`] order.
    pub fn bind<'p>(&'p self, g: &mut Graph<'p, T>) -> ModelNodes {
        let embeddings = [
            self.embeddings[0].bind(g),
            self.embeddings[1].bind(g),
            self.embeddings[2].bind(g),
            self.embeddings[3].bind(g),
        ];
        let pairings = self.pairings.iter().map(|p| p.bind(g)).collect();
        let classifier = ClassifierNodes {
            fuse: self.classifier.fuse.bind(g),
            hidden: self.classifier.hidden.bind(g),
            output: self.classifier.output.bind(g),
        };
        ModelNodes {
            embeddings,
            pairings,
            classifier,
        }
    }

    /// Class probabilities for one sample.
    pub fn forward(
        &self,
        sample: &SampleEmbeddings<T>,
        mut mode: Mode<'_>,
    ) -> Result<[T; CLASS_COUNT]> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g);
        let probs = forward_graph(&mut g, &nodes, &self.config, sample, mode.rng())?;
        let mut out = [T::zero(); CLASS_COUNT];
        out.copy_from_slice(g.value(probs).data());
        Ok(out)
    }

    /// Evaluation-mode probabilities for many samples, in input order.
    pub fn predict(&self, samples: &[SampleEmbeddings<T>]) -> Result<Vec<[T; CLASS_COUNT]>> {
        samples
            .par_iter()
            .map(|s| self.forward(s, Mode::Eval))
            .collect()
    }
}

impl<T: Scalar> Parameters<T> for ModelParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (source, emb) in Source::ALL.iter().zip(&self.embeddings) {
            emb.visit(&join(prefix, &format!("emb.{}", source.name())), f);
        }
        for (pairing, block) in self.config.variant.pairings().iter().zip(&self.pairings) {
            block.visit(&join(prefix, &format!("coatt.{}", pairing.name())), f);
        }
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (source, emb) in Source::ALL.iter().zip(&mut self.embeddings) {
            emb.visit_mut(&join(prefix, &format!("emb.{}", source.name())), f);
        }
        for (pairing, block) in self
            .config
            .variant
            .pairings()
            .iter()
            .zip(&mut self.pairings)
        {
            block.visit_mut(&join(prefix, &format!("coatt.{}", pairing.name())), f);
        }
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

/// `E_X = σ(X W_X + b_X)` for each source, in [`Source::ALL`] order.
pub fn embed_sources<T: Scalar>(
    g: &mut Graph<'_, T>,
    nodes: &ModelNodes,
    config: &ModelConfig,
    sample: &SampleEmbeddings<T>,
) -> Result<[SeqNode; 4]> {
    sample.validate(config)?;
    let embed = |g: &mut Graph<'_, T>, source: Source| -> Result<SeqNode> {
        let seq = sample.source(source);
        let input = SeqNode::constant(g, seq);
        let projected = nodes.embeddings[source.slot()].apply(g, input.node)?;
        let mut out = g.activation(projected, config.activation)?;
        if input.has_padding() {
            out = g.mask_rows(out, &input.mask)?;
        }
        Ok(SeqNode {
            node: out,
            mask: input.mask,
        })
    };
    Ok([
        embed(g, Source::ClaimImage)?,
        embed(g, Source::ClaimText)?,
        embed(g, Source::DocImage)?,
        embed(g, Source::DocText)?,
    ])
}

/// Runs the variant's pairings; returns `[H_XY, H_YX]` per pairing in order.
pub fn fuse<T: Scalar>(
    g: &mut Graph<'_, T>,
    embedded: &[SeqNode; 4],
    nodes: &ModelNodes,
    config: &ModelConfig,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Vec<SeqNode>> {
    let block = config.block_config();
    let mut out = Vec::with_capacity(2 * nodes.pairings.len());
    for (pairing, params) in config.variant.pairings().iter().zip(&nodes.pairings) {
        let (left, right) = pairing.sources();
        let (h_l, h_r) = co_attend(
            g,
            &embedded[left.slot()],
            &embedded[right.slot()],
            params,
            &block,
            reborrow(&mut rng),
        )?;
        out.push(h_l);
        out.push(h_r);
    }
    Ok(out)
}

/// Mean over valid tokens, `[1×d]`.
pub fn aggregate<T: Scalar>(g: &mut Graph<'_, T>, seq: &SeqNode) -> Result<NodeId> {
    let mask = seq.has_padding().then_some(seq.mask.as_slice());
    g.mean_rows(seq.node, mask)
}

/// `softmax(σ(σ(Z W^Z) W^{M1}) W^{M2})` over the concatenated aggregates.
pub fn classify<T: Scalar>(
    g: &mut Graph<'_, T>,
    aggregates: &[NodeId],
    nodes: &ClassifierNodes,
    activation: Activation,
) -> Result<NodeId> {
    let z = g.concat_cols(aggregates)?;
    let expected = g.value(nodes.fuse.weight).rows();
    if g.value(z).cols() != expected {
        return Err(Error::dim("classify", g.value(z).shape(), &[1, expected]));
    }
    let z1 = nodes.fuse.apply(g, z)?;
    let z1 = g.activation(z1, activation)?;
    let z2 = nodes.hidden.apply(g, z1)?;
    let z2 = g.activation(z2, activation)?;
    let logits = nodes.output.apply(g, z2)?;
    g.softmax_rows(logits, None)
}

/// Records the whole forward pass into `g` and returns the `[1×5]`
/// probability node.
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    nodes: &ModelNodes,
    config: &ModelConfig,
    sample: &SampleEmbeddings<T>,
    rng: Option<&mut dyn RngCore>,
) -> Result<NodeId> {
    let embedded = embed_sources(g, nodes, config, sample)?;
    let fused = fuse(g, &embedded, nodes, config, rng)?;
    let mut aggregates = Vec::with_capacity(fused.len() + embedded.len());
    for seq in fused.iter().chain(embedded.iter()) {
        aggregates.push(aggregate(g, seq)?);
    }
    classify(g, &aggregates, &nodes.classifier, config.activation)
}
