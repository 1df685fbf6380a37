//! Learnable parameter containers shared by the co-attention block and the
//! model, plus the traversal used by the optimizer and the checkpoint format.

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Walks every learnable tensor with a stable dotted name. The visiting order
/// is the order tensors are bound into a [`Graph`], so gradients taken from
/// [`Graph::take_param_grads`] line up with it.
pub trait Parameters<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t)));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform Glorot initialization for a `[fan_in × fan_out]` matrix.
pub fn xavier_uniform<T: Scalar>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::lit(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data")
}

/// `x · W + b`, with an optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Affine<T> {
    pub fn init(fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Self {
            weight: xavier_uniform(fan_in, fan_out, rng),
            bias: bias.then(|| Tensor::zeros(&[fan_out])),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: bias.then(|| Tensor::zeros(&[fan_out])),
        }
    }

    pub fn in_width(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_width(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p, T>) -> AffineNodes {
        AffineNodes {
            weight: g.param(&self.weight),
            bias: self.bias.as_ref().map(|b| g.param(b)),
        }
    }
}

impl<T: Scalar> Parameters<T> for Affine<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AffineNodes {
    pub weight: NodeId,
    pub bias: Option<NodeId>,
}

impl AffineNodes {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let y = g.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => g.add_row(y, b),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn new(width: usize) -> Self {
        Self {
            gain: Tensor::ones(&[width]),
            bias: Tensor::zeros(&[width]),
        }
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p, T>) -> LayerNormNodes {
        LayerNormNodes {
            gain: g.param(&self.gain),
            bias: g.param(&self.bias),
        }
    }
}

impl<T: Scalar> Parameters<T> for LayerNormParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "gain"), &mut self.gain);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormNodes {
    pub gain: NodeId,
    pub bias: NodeId,
}
