//! Parameter storage and the small MLP building blocks shared by the flows
//! and the VAE.

use std::ops::Index;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Gradients, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Flat, ordered collection of trainable tensors.
///
/// Layers keep [`ParamId`]s into the set; a forward pass binds the whole
/// set onto a graph once and looks parameters up through [`Bound`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

/// Graph handles for every parameter of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.params.iter().map(|p| g.variable(p.value.clone())).collect())
    }

    /// Records every parameter as a constant (evaluation without gradients).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound(self.params.iter().map(|p| g.constant(p.value.clone())).collect())
    }

    /// Adds the gradients found in `grads` onto the stored `grad` buffers.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &Bound) {
        for (p, v) in self.params.iter_mut().zip(&bound.0) {
            if let Some(g) = grads.get(*v) {
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in &mut self.params {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var, AutodiffError> {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
        }
    }
}

/// Affine map `x W + b` with an optional fixed connectivity mask on `W`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub mask: Option<Tensor>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, or all zeros.
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, zero: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            if zero {
                vec![0.0; n]
            } else {
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        let w = Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out)).expect("shape");
        let b = Tensor::matrix(1, fan_out, draw(fan_out)).expect("shape");
        Self {
            weight: params.add(format!("{name}.weight"), w),
            bias: params.add(format!("{name}.bias"), b),
            mask: None,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, AutodiffError> {
        let w = match &self.mask {
            Some(mask) => {
                let m = g.constant(mask.clone());
                g.mul(p[self.weight], m)?
            }
            None => p[self.weight],
        };
        let xw = g.matmul(x, w)?;
        g.add_bias(xw, p[self.bias])
    }
}

/// Multi-layer perceptron with a shared hidden activation and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes` lists every width including input and output. With
    /// `zero_output` the last layer starts at zero, so the network
    /// initially outputs exactly zero.
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        sizes: &[usize],
        activation: Activation,
        zero_output: bool,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let zero = zero_output && i == n - 1;
                Linear::new(params, &format!("{name}.l{i}"), sizes[i], sizes[i + 1], zero, rng)
            })
            .collect();
        Self { layers, activation }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, AutodiffError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h)?;
            if i < last {
                h = self.activation.apply(g, h)?;
            }
        }
        Ok(h)
    }
}

/// Repeats a `[1, cols]` row `rows` times as `ones(rows, 1) @ row`.
pub fn repeat_row(g: &mut Graph, row: Var, rows: usize) -> Result<Var, AutodiffError> {
    let ones = g.constant(Tensor::full(&[rows, 1], 1.0));
    g.matmul(ones, row)
}

/// Column means of a `[rows, cols]` matrix as a `[1, cols]` row.
pub fn column_mean(g: &mut Graph, x: Var) -> Result<Var, AutodiffError> {
    let rows = g.value(x).rows();
    let w = g.constant(Tensor::full(&[1, rows], 1.0 / rows.max(1) as f64));
    g.matmul(w, x)
}
