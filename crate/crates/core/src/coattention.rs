//! Bidirectional multi-head co-attention.
//!
//! For inputs `E_A`, `E_B` the block produces
//!
//! ```text
//! H̃_A = Norm(E_A + MultiHead(E_A W^Q_A, E_B W^K_B, E_B W^V_B))
//! H_A = Norm(H̃_A + FFN(H̃_A))
//! ```
//!
//! and the mirror image for `H_B`. Each side owns its Q/K/V projections; the
//! output projection, FFN and both norms belong to the side whose output they
//! produce. Padded key positions are masked out of the softmax and padded
//! query rows are zeroed in the output.

use rand::{Rng, RngCore};

use crate::autodiff::{reborrow, Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{
    join, xavier_uniform, Affine, AffineNodes, LayerNormNodes, LayerNormParams, Parameters,
};
use crate::tensor::{Activation, Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `n × d` token matrix with a validity mask (`false` marks padding).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    tokens: Tensor<T>,
    mask: Vec<bool>,
}

impl<T: Scalar> TokenSequence<T> {
    /// Padded rows are zeroed on construction.
    pub fn new(tokens: Tensor<T>, mask: Vec<bool>) -> Result<Self> {
        if tokens.rank() != 2 {
            return Err(Error::dim("token_sequence", tokens.shape(), &[]));
        }
        if mask.len() != tokens.rows() {
            return Err(Error::dim("token_sequence", tokens.shape(), &[mask.len()]));
        }
        if !mask.iter().any(|&v| v) {
            return Err(Error::InvalidInput(
                "token sequence has no valid tokens".into(),
            ));
        }
        let tokens = tokens.mask_rows(&mask)?;
        Ok(Self { tokens, mask })
    }

    /// Every row valid.
    pub fn dense(tokens: Tensor<T>) -> Result<Self> {
        let n = tokens.rows();
        Self::new(tokens, vec![true; n])
    }

    pub fn tokens(&self) -> &Tensor<T> {
        &self.tokens
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&v| v).count()
    }

    pub fn has_padding(&self) -> bool {
        self.mask.iter().any(|&v| !v)
    }

    /// Appends `extra` masked zero rows.
    pub fn padded(&self, extra: usize) -> Self {
        let width = self.width();
        let mut data = self.tokens.data().to_vec();
        data.resize(data.len() + extra * width, T::zero());
        let mut mask = self.mask.clone();
        mask.resize(mask.len() + extra, false);
        Self {
            tokens: Tensor::new(vec![mask.len(), width], data).expect("consistent shape"),
            mask,
        }
    }

    /// Row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(Error::dim("permute", &[self.len()], &[perm.len()]));
        }
        let mut data = Vec::with_capacity(self.tokens.len());
        for &p in perm {
            data.extend_from_slice(self.tokens.row(p));
        }
        Ok(Self {
            tokens: Tensor::new(self.tokens.shape().to_vec(), data)?,
            mask: perm.iter().map(|&p| self.mask[p]).collect(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> TokenSequence<U> {
        TokenSequence {
            tokens: self.tokens.cast(),
            mask: self.mask.clone(),
        }
    }
}

/// A token sequence living inside a [`Graph`].
#[derive(Debug, Clone)]
pub struct SeqNode {
    pub node: NodeId,
    pub mask: Vec<bool>,
}

impl SeqNode {
    pub fn has_padding(&self) -> bool {
        self.mask.iter().any(|&v| !v)
    }

    pub fn constant<'p, T: Scalar>(g: &mut Graph<'p, T>, seq: &TokenSequence<T>) -> Self {
        Self {
            node: g.constant(seq.tokens().clone()),
            mask: seq.mask().to_vec(),
        }
    }

    pub fn leaf<'p, T: Scalar>(g: &mut Graph<'p, T>, seq: &TokenSequence<T>) -> Self {
        Self {
            node: g.leaf(seq.tokens().clone()),
            mask: seq.mask().to_vec(),
        }
    }
}

/// Hyperparameters of one co-attention block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub heads: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub eps: f64,
}

impl BlockConfig {
    pub fn new(heads: usize, dropout: f64, activation: Activation) -> Self {
        Self {
            heads,
            dropout,
            activation,
            eps: LAYER_NORM_EPS,
        }
    }
}

/// Parameters owned by one side of the block.
#[derive(Debug, Clone, PartialEq)]
pub struct SideParams<T> {
    pub query: Tensor<T>,
    pub key: Tensor<T>,
    pub value: Tensor<T>,
    pub output: Tensor<T>,
    pub ffn_in: Affine<T>,
    pub ffn_out: Affine<T>,
    pub attn_norm: LayerNormParams<T>,
    pub ffn_norm: LayerNormParams<T>,
}

impl<T: Scalar> SideParams<T> {
    pub fn init(d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: xavier_uniform(d, d, rng),
            key: xavier_uniform(d, d, rng),
            value: xavier_uniform(d, d, rng),
            output: xavier_uniform(d, d, rng),
            ffn_in: Affine::init(d, d_ff, true, rng),
            ffn_out: Affine::init(d_ff, d, true, rng),
            attn_norm: LayerNormParams::new(d),
            ffn_norm: LayerNormParams::new(d),
        }
    }

    /// Identity projections, zero FFN, unit norms.
    pub fn identity(d: usize, d_ff: usize) -> Self {
        Self {
            query: Tensor::eye(d),
            key: Tensor::eye(d),
            value: Tensor::eye(d),
            output: Tensor::eye(d),
            ffn_in: Affine::zeros(d, d_ff, true),
            ffn_out: Affine::zeros(d_ff, d, true),
            attn_norm: LayerNormParams::new(d),
            ffn_norm: LayerNormParams::new(d),
        }
    }

    pub fn width(&self) -> usize {
        self.query.cols()
    }

    fn bind<'p>(&'p self, g: &mut Graph<'p, T>) -> SideNodes {
        SideNodes {
            query: g.param(&self.query),
            key: g.param(&self.key),
            value: g.param(&self.value),
            output: g.param(&self.output),
            ffn_in: self.ffn_in.bind(g),
            ffn_out: self.ffn_out.bind(g),
            attn_norm: self.attn_norm.bind(g),
            ffn_norm: self.ffn_norm.bind(g),
        }
    }
}

impl<T: Scalar> Parameters<T> for SideParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "query"), &self.query);
        f(join(prefix, "key"), &self.key);
        f(join(prefix, "value"), &self.value);
        f(join(prefix, "output"), &self.output);
        self.ffn_in.visit(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit(&join(prefix, "ffn_out"), f);
        self.attn_norm.visit(&join(prefix, "attn_norm"), f);
        self.ffn_norm.visit(&join(prefix, "ffn_norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "query"), &mut self.query);
        f(join(prefix, "key"), &mut self.key);
        f(join(prefix, "value"), &mut self.value);
        f(join(prefix, "output"), &mut self.output);
        self.ffn_in.visit_mut(&join(prefix, "ffn_in"), f);
        self.ffn_out.visit_mut(&join(prefix, "ffn_out"), f);
        self.attn_norm.visit_mut(&join(prefix, "attn_norm"), f);
        self.ffn_norm.visit_mut(&join(prefix, "ffn_norm"), f);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SideNodes {
    pub query: NodeId,
    pub key: NodeId,
    pub value: NodeId,
    pub output: NodeId,
    pub ffn_in: AffineNodes,
    pub ffn_out: AffineNodes,
    pub attn_norm: LayerNormNodes,
    pub ffn_norm: LayerNormNodes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoAttentionParams<T> {
    pub a: SideParams<T>,
    pub b: SideParams<T>,
}

impl<T: Scalar> CoAttentionParams<T> {
    pub fn init(d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        let a = SideParams::init(d, d_ff, rng);
        let b = SideParams::init(d, d_ff, rng);
        Self { a, b }
    }

    pub fn identity(d: usize, d_ff: usize) -> Self {
        Self {
            a: SideParams::identity(d, d_ff),
            b: SideParams::identity(d, d_ff),
        }
    }

    pub fn swap_sides(&self) -> Self {
        Self {
            a: self.b.clone(),
            b: self.a.clone(),
        }
    }

    pub fn width(&self) -> usize {
        self.a.width()
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p, T>) -> CoAttentionNodes {
        CoAttentionNodes {
            a: self.a.bind(g),
            b: self.b.bind(g),
        }
    }

    /// Runs the block on plain tensors. `rng` enables dropout (training mode).
    pub fn forward(
        &self,
        e_a: &TokenSequence<T>,
        e_b: &TokenSequence<T>,
        config: &BlockConfig,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(TokenSequence<T>, TokenSequence<T>)> {
        let mut g = Graph::new();
        let nodes = self.bind(&mut g);
        let a = SeqNode::constant(&mut g, e_a);
        let b = SeqNode::constant(&mut g, e_b);
        let (h_a, h_b) = co_attend(&mut g, &a, &b, &nodes, config, rng)?;
        Ok((
            TokenSequence::new(g.value(h_a.node).clone(), h_a.mask)?,
            TokenSequence::new(g.value(h_b.node).clone(), h_b.mask)?,
        ))
    }
}

impl<T: Scalar> Parameters<T> for CoAttentionParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.a.visit(&join(prefix, "a"), f);
        self.b.visit(&join(prefix, "b"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.a.visit_mut(&join(prefix, "a"), f);
        self.b.visit_mut(&join(prefix, "b"), f);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CoAttentionNodes {
    pub a: SideNodes,
    pub b: SideNodes,
}

/// Cross attention of `query_seq` over `kv_seq`: project, split into `heads`
/// slices of width `d / heads`, attend with scale `1/sqrt(d / heads)`,
/// concatenate and apply the output projection.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_cross_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    query_seq: NodeId,
    kv_seq: NodeId,
    w_query: NodeId,
    w_key: NodeId,
    w_value: NodeId,
    w_output: NodeId,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<NodeId> {
    let d = g.value(w_query).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "width {d} is not divisible by {heads} heads"
        )));
    }
    let head_width = d / heads;
    let scale = T::one() / T::lit(head_width as f64).sqrt();

    let q = g.matmul(query_seq, w_query)?;
    let k = g.matmul(kv_seq, w_key)?;
    let v = g.matmul(kv_seq, w_value)?;

    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            let start = h * head_width;
            (
                g.slice_cols(q, start, head_width)?,
                g.slice_cols(k, start, head_width)?,
                g.slice_cols(v, start, head_width)?,
            )
        };
        let logits = g.matmul_t(qh, kh)?;
        let logits = g.scale(logits, scale)?;
        let weights = g.softmax_rows(logits, key_mask)?;
        outputs.push(g.matmul(weights, vh)?);
    }
    let joined = if heads == 1 {
        outputs[0]
    } else {
        g.concat_cols(&outputs)?
    };
    g.matmul(joined, w_output)
}

fn check_width<T: Scalar>(g: &Graph<'_, T>, seq: &SeqNode, d: usize) -> Result<()> {
    let value = g.value(seq.node);
    if value.rank() != 2 || value.cols() != d || value.rows() != seq.mask.len() {
        return Err(Error::dim("co_attend", value.shape(), &[seq.mask.len(), d]));
    }
    if !seq.mask.iter().any(|&v| v) {
        return Err(Error::InvalidInput(
            "co-attention input has no valid tokens".into(),
        ));
    }
    Ok(())
}

/// One direction of the block: `query` attends over `kv`.
fn attend_side<T: Scalar>(
    g: &mut Graph<'_, T>,
    query: &SeqNode,
    kv: &SeqNode,
    own: &SideNodes,
    other: &SideNodes,
    config: &BlockConfig,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<SeqNode> {
    let key_mask = kv.has_padding().then_some(kv.mask.as_slice());
    let attended = multi_head_cross_attention(
        g,
        query.node,
        kv.node,
        own.query,
        other.key,
        other.value,
        own.output,
        config.heads,
        key_mask,
    )?;
    let attended = g.dropout(attended, config.dropout, reborrow(&mut rng))?;
    let residual = g.add(query.node, attended)?;
    let eps = T::lit(config.eps);
    let mid = g.layer_norm(residual, own.attn_norm.gain, own.attn_norm.bias, eps)?;

    let hidden = own.ffn_in.apply(g, mid)?;
    let hidden = g.activation(hidden, config.activation)?;
    let ffn = own.ffn_out.apply(g, hidden)?;
    let ffn = g.dropout(ffn, config.dropout, reborrow(&mut rng))?;
    let residual = g.add(mid, ffn)?;
    let mut out = g.layer_norm(residual, own.ffn_norm.gain, own.ffn_norm.bias, eps)?;
    if query.has_padding() {
        out = g.mask_rows(out, &query.mask)?;
    }
    Ok(SeqNode {
        node: out,
        mask: query.mask.clone(),
    })
}

/// Full co-attention block: returns `(H_A, H_B)` with the input masks.
pub fn co_attend<T: Scalar>(
    g: &mut Graph<'_, T>,
    e_a: &SeqNode,
    e_b: &SeqNode,
    params: &CoAttentionNodes,
    config: &BlockConfig,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<(SeqNode, SeqNode)> {
    let d = g.value(params.a.query).cols();
    check_width(g, e_a, d)?;
    check_width(g, e_b, d)?;
    let h_a = attend_side(
        g,
        e_a,
        e_b,
        &params.a,
        &params.b,
        config,
        reborrow(&mut rng),
    )?;
    let h_b = attend_side(
        g,
        e_b,
        e_a,
        &params.b,
        &params.a,
        config,
        reborrow(&mut rng),
    )?;
    Ok((h_a, h_b))
}
