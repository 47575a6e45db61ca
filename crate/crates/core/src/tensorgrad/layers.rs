//! Dense layers, layer normalization and plain MLPs on top of [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Binding, Graph, ParamSet, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Mish,
    Gelu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Mish => g.mish(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Self::Relu),
            "mish" => Ok(Self::Mish),
            "gelu" => Ok(Self::Gelu),
            other => Err(format!("unknown activation `{other}` (expected relu, mish or gelu)")),
        }
    }
}

/// Fully connected layer `x·W + b` with `W: [in×out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: format!("{prefix}/w"),
            bias: format!("{prefix}/b"),
            in_dim,
            out_dim,
        }
    }

    /// Fan-in scaled uniform init `U(-1/√in, 1/√in)` for both weight and bias,
    /// or all zeros.
    pub fn init<R: Rng + ?Sized>(
        &self,
        params: &mut ParamSet,
        rng: &mut R,
        zero: bool,
    ) -> Result<(), TensorError> {
        let bound = 1.0 / (self.in_dim as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            if zero {
                vec![0.0; n]
            } else {
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
        };
        let w = draw(self.in_dim * self.out_dim);
        let b = draw(self.out_dim);
        params.insert(&self.weight, Tensor::matrix(self.in_dim, self.out_dim, w)?)?;
        params.insert(&self.bias, Tensor::new(vec![self.out_dim], b)?)?;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        x: Var,
        binding: Binding,
    ) -> Result<Var, TensorError> {
        let w = g.param(params, &self.weight, binding)?;
        let b = g.param(params, &self.bias, binding)?;
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }
}

/// Layer normalization with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: String,
    pub shift: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            gain: format!("{prefix}/gain"),
            shift: format!("{prefix}/shift"),
            dim,
        }
    }

    pub fn init(&self, params: &mut ParamSet) -> Result<(), TensorError> {
        params.insert(&self.gain, Tensor::full(&[self.dim], 1.0))?;
        params.insert(&self.shift, Tensor::zeros(&[self.dim]))?;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        x: Var,
        binding: Binding,
    ) -> Result<Var, TensorError> {
        let gain = g.param(params, &self.gain, binding)?;
        let shift = g.param(params, &self.shift, binding)?;
        let n = g.layer_norm(x);
        let scaled = g.mul_row(n, gain)?;
        g.add_row(scaled, shift)
    }
}

/// Plain multilayer perceptron: dense layers with an activation between them
/// and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`
    pub fn new(prefix: &str, dims: &[usize], activation: Activation) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(&format!("{prefix}/dense{i}"), w[0], w[1]))
            .collect();
        Self { layers, activation }
    }

    pub fn init<R: Rng + ?Sized>(
        &self,
        params: &mut ParamSet,
        rng: &mut R,
    ) -> Result<(), TensorError> {
        for layer in &self.layers {
            layer.init(params, rng, false)?;
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        x: Var,
        binding: Binding,
    ) -> Result<Var, TensorError> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, params, h, binding)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply(g, h);
            }
        }
        Ok(h)
    }
}
