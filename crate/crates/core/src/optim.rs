//! Mini-batch SGD with momentum, weight decay and the annealed learning rate
//! `lr0 * (1 + 10 p)^-0.75`, where `p` is training progress in `[0, 1]`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::nn::{Param, ParamGroup};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SgdConfig {
    /// Rate for [`ParamGroup::Backbone`] parameters at progress 0.
    pub base_lr: f64,
    /// Multiplier applied to [`ParamGroup::NewLayer`] parameters.
    pub new_layer_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            base_lr: 1e-3,
            new_layer_factor: 10.0,
            momentum: 0.9,
            weight_decay: 1e-3,
        }
    }
}

/// Annealed learning rate at `progress`.
pub fn scheduled_lr(lr0: f64, progress: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    lr0 * math::powf(1.0 + 10.0 * p, -0.75)
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn group_lr(&self, group: ParamGroup, progress: f64) -> f64 {
        let lr = scheduled_lr(self.config.base_lr, progress);
        match group {
            ParamGroup::Backbone => lr,
            ParamGroup::NewLayer => lr * self.config.new_layer_factor,
        }
    }

    /// `v <- m v + g + wd theta; theta <- theta - lr(progress) v`.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &[Tensor], progress: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("sgd_step", &[params.len()], &[grads.len()]));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::dim("sgd_step", p.value.shape(), g.shape()));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        } else if self.velocity.len() != params.len() {
            return Err(Error::contract("parameter list changed between optimiser steps"));
        }
        let SgdConfig {
            momentum,
            weight_decay,
            ..
        } = self.config;
        let lrs: Vec<f64> = params.iter().map(|p| self.group_lr(p.group, progress)).collect();
        for (((p, g), v), lr) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()).zip(lrs) {
            for ((theta, &grad), vel) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(v.data_mut())
            {
                *vel = momentum * *vel + grad + weight_decay * *theta;
                *theta -= lr * *vel;
            }
        }
        Ok(())
    }
}
