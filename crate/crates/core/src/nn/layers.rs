//! Linear layers, layer norm, and small MLP stacks.

use crate::error::Result;
use crate::nn::autodiff::{Tape, Var};
use crate::nn::tensor::{self, Tensor};
use crate::rng::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Hidden-layer activation. The default everywhere is ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: Tensor, // in_dim x out_dim
    pub bias: Tensor,   // 1 x out_dim
}

impl LinearLayer {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        LinearLayer {
            weight: Tensor::uniform_init(in_dim, out_dim, in_dim, rng),
            bias: Tensor::zeros(1, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn bind(&self, tape: &Tape) -> BoundLinear {
        BoundLinear { w: tape.leaf(self.weight.clone()), b: tape.leaf(self.bias.clone()) }
    }

    pub fn forward_value(&self, x: &Tensor) -> Result<Tensor> {
        tensor::add_bias(&tensor::matmul(x, &self.weight)?, &self.bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

impl BoundLinear {
    pub fn apply(&self, tape: &Tape, x: Var) -> Result<Var> {
        tape.add_bias(tape.matmul(x, self.w)?, self.b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor, // 1 x d
    pub beta: Tensor,  // 1 x d
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm { gamma: Tensor::from_vec(1, dim, vec![1.0; dim]), beta: Tensor::zeros(1, dim) }
    }

    pub fn bind(&self, tape: &Tape) -> BoundLayerNorm {
        BoundLayerNorm { gamma: tape.leaf(self.gamma.clone()), beta: tape.leaf(self.beta.clone()) }
    }

    pub fn forward_value(&self, x: &Tensor) -> Result<Tensor> {
        tensor::layer_norm(x, &self.gamma, &self.beta, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl BoundLayerNorm {
    pub fn apply(&self, tape: &Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gamma, self.beta, LAYER_NORM_EPS)
    }
}

/// MLP stack: hidden layers are Linear -> LayerNorm -> activation ->
/// dropout; the final layer is a plain linear map.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
    pub norms: Vec<LayerNorm>, // one per hidden layer
    pub dropout: f64,
    pub activation: Activation,
}

impl Mlp {
    /// `dims` is [input, hidden..., output]; at least one layer.
    pub fn new(dims: &[usize], dropout: f64, rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "mlp needs input and output dims");
        let layers: Vec<LinearLayer> =
            dims.windows(2).map(|w| LinearLayer::new(w[0], w[1], rng)).collect();
        let norms = dims[1..dims.len() - 1].iter().map(|&d| LayerNorm::new(d)).collect();
        Mlp { layers, norms, dropout, activation: Activation::Relu }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn bind(&self, tape: &Tape) -> BoundMlp {
        BoundMlp {
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
            norms: self.norms.iter().map(|n| n.bind(tape)).collect(),
            dropout: self.dropout,
            activation: self.activation,
        }
    }

    pub fn forward_value(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward_value(&h)?;
            if k < last {
                h = self.norms[k].forward_value(&h)?;
                h = match self.activation {
                    Activation::Relu => tensor::relu(&h),
                    Activation::Sigmoid => tensor::sigmoid(&h),
                    Activation::None => h,
                };
            }
        }
        Ok(h)
    }

    /// Parameter tensors in a stable order (layer weights/biases, then
    /// norm gammas/betas).
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        for n in &self.norms {
            out.push(&n.gamma);
            out.push(&n.beta);
        }
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for n in &mut self.norms {
            out.push(&mut n.gamma);
            out.push(&mut n.beta);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<BoundLinear>,
    pub norms: Vec<BoundLayerNorm>,
    pub dropout: f64,
    pub activation: Activation,
}

impl BoundMlp {
    pub fn apply(&self, tape: &Tape, x: Var, training: bool, rng: &mut Rng) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.apply(tape, h)?;
            if k < last {
                h = self.norms[k].apply(tape, h)?;
                h = match self.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Sigmoid => tape.sigmoid(h),
                    Activation::None => h,
                };
                h = tape.dropout(h, self.dropout, training, rng)?;
            }
        }
        Ok(h)
    }

    /// Vars in the same order as [`Mlp::param_tensors`].
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.w);
            out.push(l.b);
        }
        for n in &self.norms {
            out.push(n.gamma);
            out.push(n.beta);
        }
        out
    }
}

/// Copies tape gradients into the parameter tensors' grad slots.
/// `vars` must parallel `tensors`.
pub fn pull_grads(tape: &Tape, vars: &[Var], tensors: &mut [&mut Tensor]) {
    assert_eq!(vars.len(), tensors.len());
    for (v, t) in vars.iter().zip(tensors.iter_mut()) {
        t.set_grad(tape.grad(*v).data().to_vec());
    }
}
