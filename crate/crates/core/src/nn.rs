//! Layers shared by the source and target networks.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::{self, Tensor};

/// Learning-rate group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ParamGroup {
    /// Feature trunk; trained at the base rate.
    Backbone,
    /// Layers added on top of the trunk; trained at a multiple of the base rate.
    NewLayer,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Param {
    pub value: Tensor,
    pub group: ParamGroup,
}

impl Param {
    pub fn new(value: Tensor, group: ParamGroup) -> Self {
        Param { value, group }
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("nonzero shape")
}

/// Affine layer `y = x W + b` with `W` stored `[in x out]`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// He-uniform weights (suited to a following ReLU), zero bias.
    pub fn he(rng: &mut impl Rng, fan_in: usize, fan_out: usize, group: ParamGroup) -> Self {
        let bound = math::sqrt(6.0 / fan_in as f64);
        Linear {
            weight: Param::new(uniform(rng, &[fan_in, fan_out], bound), group),
            bias: Param::new(Tensor::zeros(&[fan_out]), group),
        }
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights, zero bias.
    pub fn lecun(rng: &mut impl Rng, fan_in: usize, fan_out: usize, group: ParamGroup) -> Self {
        let bound = 1.0 / math::sqrt(fan_in as f64);
        Linear {
            weight: Param::new(uniform(rng, &[fan_in, fan_out], bound), group),
            bias: Param::new(Tensor::zeros(&[fan_out]), group),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub(crate) fn forward_tape(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let h = tape.matmul(x, p[0])?;
        tape.add_bias(h, p[1])
    }

    pub(crate) fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = tensor::matmul(x, &self.weight.value)?;
        add_bias_inplace(&mut h, self.bias.value.data());
        Ok(h)
    }
}

fn add_bias_inplace(h: &mut Tensor, bias: &[f64]) {
    let m = bias.len();
    for (i, v) in h.data_mut().iter_mut().enumerate() {
        *v += bias[i % m];
    }
}

/// Batch normalisation with running statistics for inference.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(width: usize, group: ParamGroup) -> Self {
        BatchNorm {
            gamma: Param::new(Tensor::full(&[width], 1.0), group),
            beta: Param::new(Tensor::zeros(&[width]), group),
            running_mean: alloc::vec![0.0; width],
            running_var: alloc::vec![1.0; width],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn width(&self) -> usize {
        self.running_mean.len()
    }

    /// Folds one batch's statistics into the running estimates
    /// (unbiased variance, like the usual framework convention).
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let n = stats.count as f64;
        let correction = n / (n - 1.0);
        for j in 0..self.width() {
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * stats.mean[j];
            self.running_var[j] = (1.0 - m) * self.running_var[j] + m * stats.var[j] * correction;
        }
    }

    pub(crate) fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let m = self.width();
        if x.cols() != m {
            return Err(Error::dim("batch_norm", x.shape(), &[m]));
        }
        let g = self.gamma.value.data();
        let b = self.beta.value.data();
        let scale: Vec<f64> = (0..m)
            .map(|j| g[j] / math::sqrt(self.running_var[j] + self.eps))
            .collect();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % m;
            *v = (*v - self.running_mean[j]) * scale[j] + b[j];
        }
        Ok(out)
    }
}

/// Affine layer whose weight rows are reparameterised as `g * v / |v|`.
///
/// `direction` is stored `[out x in]` and kept at unit row norm by
/// [`WeightNormLinear::renormalize`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WeightNormLinear {
    pub direction: Param,
    pub magnitude: Param,
    pub bias: Param,
}

impl WeightNormLinear {
    pub fn new(rng: &mut impl Rng, fan_in: usize, fan_out: usize, group: ParamGroup) -> Self {
        let bound = 1.0 / math::sqrt(fan_in as f64);
        let w = uniform(rng, &[fan_out, fan_in], bound);
        let norms: Vec<f64> = (0..fan_out)
            .map(|k| math::sqrt(w.row(k).iter().map(|x| x * x).sum()))
            .collect();
        let mut layer = WeightNormLinear {
            direction: Param::new(w, group),
            magnitude: Param::new(Tensor::vector(norms), group),
            bias: Param::new(Tensor::zeros(&[fan_out]), group),
        };
        layer.renormalize();
        layer
    }

    pub fn out_dim(&self) -> usize {
        self.direction.value.rows()
    }

    /// Rescales every direction row to unit length. Forward outputs are unchanged.
    pub fn renormalize(&mut self) {
        let v = &mut self.direction.value;
        for k in 0..v.rows() {
            let norm = math::sqrt(v.row(k).iter().map(|x| x * x).sum());
            if norm > 0.0 {
                v.row_mut(k).iter_mut().for_each(|x| *x /= norm);
            }
        }
    }

    /// The effective `[out x in]` weight matrix.
    pub fn effective_weight(&self) -> Result<Tensor> {
        let v = &self.direction.value;
        let g = self.magnitude.value.data();
        let mut w = v.clone();
        for k in 0..v.rows() {
            let norm = math::sqrt(v.row(k).iter().map(|x| x * x).sum());
            if norm == 0.0 {
                return Err(Error::contract("weight-norm direction has zero length"));
            }
            let s = g[k] / norm;
            w.row_mut(k).iter_mut().for_each(|x| *x *= s);
        }
        Ok(w)
    }

    pub(crate) fn forward_tape(&self, tape: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let w = tape.weight_norm(p[0], p[1])?;
        let h = tape.matmul_nt(x, w)?;
        tape.add_bias(h, p[2])
    }

    pub(crate) fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.effective_weight()?;
        if x.cols() != w.cols() {
            return Err(Error::dim("weight_norm_linear", x.shape(), w.shape()));
        }
        let mut h = tensor::matmul_nt(x, &w);
        add_bias_inplace(&mut h, self.bias.value.data());
        Ok(h)
    }
}

/// Stack of affine + ReLU layers.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Trunk {
    pub input_dim: usize,
    pub layers: Vec<Linear>,
}

impl Trunk {
    pub fn new(rng: &mut impl Rng, input_dim: usize, hidden: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut fan_in = input_dim;
        for &h in hidden {
            layers.push(Linear::he(rng, fan_in, h, ParamGroup::Backbone));
            fan_in = h;
        }
        Trunk { input_dim, layers }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim()).unwrap_or(self.input_dim)
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.out_dim()).collect()
    }

    pub(crate) fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub(crate) fn forward_tape(&self, tape: &mut Tape, p: &[Var], mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            let h = layer.forward_tape(tape, &p[2 * i..2 * i + 2], x)?;
            x = tape.relu(h);
        }
        Ok(x)
    }

    pub(crate) fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.input_dim {
            return Err(Error::dim("trunk", x.shape(), &[self.input_dim]));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward_eval(&h)?.map(|v| if v > 0.0 { v } else { 0.0 });
        }
        Ok(h)
    }
}
