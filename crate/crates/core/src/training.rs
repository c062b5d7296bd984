//! Shared training-loop plumbing and supervised source training.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses;
use crate::models::{Architecture, Network, SourceNet};
use crate::optim::{Sgd, SgdConfig};
use crate::scenario::DomainData;
use crate::tape::Tape;

/// Which loop produced an [`EpochRecord`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Phase {
    Source,
    Distill,
    Finetune,
}

/// Batch-averaged loss terms for one epoch. Terms that are switched off are zero.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub phase: Phase,
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub kd: f64,
    pub mix: f64,
    pub mi: f64,
    /// Mean per-sample prediction entropy over the training batches.
    pub entropy: f64,
}

impl EpochRecord {
    pub(crate) fn empty(phase: Phase, epoch: usize) -> Self {
        EpochRecord {
            phase,
            epoch,
            loss: 0.0,
            kd: 0.0,
            mix: 0.0,
            mi: 0.0,
            entropy: 0.0,
        }
    }

    pub(crate) fn scale(&mut self, s: f64) {
        self.loss *= s;
        self.kd *= s;
        self.mix *= s;
        self.mi *= s;
        self.entropy *= s;
    }
}

/// Shuffled mini-batches of `0..n`. Batches smaller than two samples are
/// dropped, since batch normalisation needs at least two rows.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(2))
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

pub(crate) fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    let b = batch_size.max(2);
    n / b + usize::from(n % b >= 2)
}

/// Supervised training of a source model with label smoothing.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SourceTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Label-smoothing coefficient.
    pub smoothing: f64,
    pub hidden: Vec<usize>,
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        SourceTrainConfig {
            epochs: 30,
            batch_size: 64,
            smoothing: 0.1,
            hidden: alloc::vec![64, 64],
            // Trained from scratch, so the trunk gets the new-layer scale too.
            sgd: SgdConfig {
                base_lr: 1e-2,
                ..SgdConfig::default()
            },
            seed: 2020,
        }
    }
}

/// Trains a [`SourceNet`] on labelled data by minimising the label-smoothing loss.
pub fn train_source<F>(cfg: &SourceTrainConfig, data: &DomainData, mut on_epoch: F) -> Result<SourceNet>
where
    F: FnMut(&EpochRecord, &SourceNet),
{
    if !(0.0..=1.0).contains(&cfg.smoothing) {
        return Err(Error::Config("label smoothing must lie in [0, 1]".into()));
    }
    let arch = Architecture {
        input_dim: data.features.cols(),
        hidden: cfg.hidden.clone(),
        num_classes: data.num_classes,
        bottleneck: 1,
    };
    let mut net = SourceNet::new(&arch, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut opt = Sgd::new(cfg.sgd.clone());
    let n = data.features.rows();
    let total_steps = (cfg.epochs * batches_per_epoch(n, cfg.batch_size)).max(1);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut record = EpochRecord::empty(Phase::Source, epoch);
        let batches = epoch_batches(n, cfg.batch_size, &mut rng);
        for idx in &batches {
            let xb = data.features.select_rows(idx);
            let yb: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::new();
            let params = net.register(&mut tape);
            let xv = tape.leaf(xb);
            let out = net.forward_train(&mut tape, &params, xv)?;
            let loss = losses::label_smoothing_loss(&mut tape, out.logits, &yb, cfg.smoothing)?;
            let grads = tape.backward(loss)?;
            let g: Vec<_> = params
                .iter()
                .zip(net.params())
                .map(|(&v, p)| grads.get_or_zeros(v, &p.value))
                .collect();
            let progress = step as f64 / total_steps as f64;
            opt.step(&mut net.params_mut(), &g, progress)?;
            net.after_update();
            step += 1;
            record.loss += tape.scalar(loss);
        }
        record.scale(1.0 / batches.len().max(1) as f64);
        on_epoch(&record, &net);
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_every_sample_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = epoch_batches(130, 64, &mut rng);
        assert_eq!(b.len(), 3);
        assert_eq!(batches_per_epoch(130, 64), 3);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..130).collect::<Vec<_>>());
        // A trailing singleton is dropped.
        assert_eq!(epoch_batches(129, 64, &mut rng).len(), 2);
        assert_eq!(batches_per_epoch(129, 64), 2);
    }
}
