//! Source and target network definitions.
//!
//! A [`SourceNet`] is a ReLU trunk followed by exactly one linear head. A
//! [`TargetNet`] is a ReLU trunk, a bottleneck (batch norm then affine) and a
//! weight-normalised linear classifier.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Linear, Param, ParamGroup, Trunk, WeightNormLinear};
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::{self, Tensor};

/// Forward-pass mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for normalisation; records on a tape.
    Train,
    /// Running statistics; records nothing.
    Eval,
}

/// Output of a training-mode forward pass.
#[derive(Debug)]
pub struct TrainForward {
    pub logits: Var,
    /// Statistics of every batch-norm layer, in layer order.
    pub stats: Vec<BatchStats>,
}

/// Common interface of trainable networks.
pub trait Network {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;

    /// Parameters in a fixed order shared by [`Network::params_mut`] and
    /// [`Network::forward_train`].
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    /// Training-mode forward pass; `params` must be the leaves returned by
    /// [`Network::register`] (or any leaves with matching shapes).
    fn forward_train(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<TrainForward>;

    /// Inference forward pass returning logits.
    fn forward_eval(&self, x: &Tensor) -> Result<Tensor>;

    /// Folds training-mode batch statistics into running estimates.
    fn apply_batch_stats(&mut self, _stats: &[BatchStats]) {}

    /// Hook run after every optimiser step.
    fn after_update(&mut self) {}

    /// Places every parameter on the tape as a leaf.
    fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect()
    }

    /// Softmax of [`Network::forward_eval`].
    fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::softmax_rows(&self.forward_eval(x)?))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::dim("forward", x.shape(), &[self.input_dim()]));
        }
        Ok(())
    }
}

/// Architecture descriptor for building a network.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    /// Bottleneck width; ignored by source networks.
    pub bottleneck: usize,
}

impl Architecture {
    pub fn desk(input_dim: usize, num_classes: usize) -> Self {
        Architecture {
            input_dim,
            hidden: alloc::vec![64, 64],
            num_classes,
            bottleneck: 32,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 || self.hidden.contains(&0) || self.bottleneck == 0 {
            return Err(Error::Config(alloc::format!("invalid architecture {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SourceNet {
    pub trunk: Trunk,
    pub head: Linear,
}

impl SourceNet {
    pub fn new(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = Trunk::new(&mut rng, arch.input_dim, &arch.hidden);
        let head = Linear::lecun(&mut rng, trunk.output_dim(), arch.num_classes, ParamGroup::NewLayer);
        Ok(SourceNet { trunk, head })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.trunk.input_dim(),
            hidden: self.trunk.hidden(),
            num_classes: self.head.out_dim(),
            bottleneck: 0,
        }
    }
}

impl Network for SourceNet {
    fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.head.out_dim()
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.trunk.params();
        p.extend([&self.head.weight, &self.head.bias]);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.trunk.params_mut();
        p.extend([&mut self.head.weight, &mut self.head.bias]);
        p
    }

    fn forward_train(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<TrainForward> {
        self.check_input(tape.value(x))?;
        let nt = 2 * self.trunk.layers.len();
        let h = self.trunk.forward_tape(tape, &params[..nt], x)?;
        let logits = self.head.forward_tape(tape, &params[nt..nt + 2], h)?;
        Ok(TrainForward {
            logits,
            stats: Vec::new(),
        })
    }

    fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let h = self.trunk.forward_eval(x)?;
        self.head.forward_eval(&h)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TargetNet {
    pub trunk: Trunk,
    pub bn: BatchNorm,
    pub bottleneck: Linear,
    pub classifier: WeightNormLinear,
}

impl TargetNet {
    pub fn new(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = Trunk::new(&mut rng, arch.input_dim, &arch.hidden);
        let width = trunk.output_dim();
        let bn = BatchNorm::new(width, ParamGroup::NewLayer);
        let bottleneck = Linear::lecun(&mut rng, width, arch.bottleneck, ParamGroup::NewLayer);
        let classifier =
            WeightNormLinear::new(&mut rng, arch.bottleneck, arch.num_classes, ParamGroup::NewLayer);
        Ok(TargetNet {
            trunk,
            bn,
            bottleneck,
            classifier,
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.trunk.input_dim(),
            hidden: self.trunk.hidden(),
            num_classes: self.classifier.out_dim(),
            bottleneck: self.bottleneck.out_dim(),
        }
    }
}

impl Network for TargetNet {
    fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.classifier.out_dim()
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.trunk.params();
        p.extend([
            &self.bn.gamma,
            &self.bn.beta,
            &self.bottleneck.weight,
            &self.bottleneck.bias,
            &self.classifier.direction,
            &self.classifier.magnitude,
            &self.classifier.bias,
        ]);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.trunk.params_mut();
        p.extend([
            &mut self.bn.gamma,
            &mut self.bn.beta,
            &mut self.bottleneck.weight,
            &mut self.bottleneck.bias,
            &mut self.classifier.direction,
            &mut self.classifier.magnitude,
            &mut self.classifier.bias,
        ]);
        p
    }

    fn forward_train(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<TrainForward> {
        self.check_input(tape.value(x))?;
        let nt = 2 * self.trunk.layers.len();
        let h = self.trunk.forward_tape(tape, &params[..nt], x)?;
        let (h, stats) = tape.batch_norm(h, params[nt], params[nt + 1], self.bn.eps)?;
        let h = self.bottleneck.forward_tape(tape, &params[nt + 2..nt + 4], h)?;
        let logits = self.classifier.forward_tape(tape, &params[nt + 4..nt + 7], h)?;
        Ok(TrainForward {
            logits,
            stats: alloc::vec![stats],
        })
    }

    fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let h = self.trunk.forward_eval(x)?;
        let h = self.bn.forward_eval(&h)?;
        let h = self.bottleneck.forward_eval(&h)?;
        self.classifier.forward_eval(&h)
    }

    fn apply_batch_stats(&mut self, stats: &[BatchStats]) {
        if let Some(s) = stats.first() {
            self.bn.update_running(s);
        }
    }

    fn after_update(&mut self) {
        self.classifier.renormalize();
    }
}

/// Runs `net` in the requested mode. Train mode needs a tape and returns the
/// logits node's value; eval mode ignores the tape.
pub fn forward<N: Network>(net: &N, x: &Tensor, mode: Mode, tape: Option<&mut Tape>) -> Result<Tensor> {
    match (mode, tape) {
        (Mode::Eval, _) => net.forward_eval(x),
        (Mode::Train, Some(tape)) => {
            let params = net.register(tape);
            let xv = tape.leaf(x.clone());
            let out = net.forward_train(tape, &params, xv)?;
            Ok(tape.value(out.logits).clone())
        }
        (Mode::Train, None) => Err(Error::contract("train mode requires a tape")),
    }
}
