//! Fine-tuning by mutual-information maximisation alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::distill::{gradients, mean_row_entropy};
use crate::error::{Error, Result};
use crate::losses;
use crate::models::Network;
use crate::optim::{Sgd, SgdConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::training::{batches_per_epoch, epoch_batches, EpochRecord, Phase};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FinetuneConfig {
    /// Zero skips the phase.
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Keep folding batch statistics into the running estimates.
    pub update_bn_stats: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 30,
            batch_size: 64,
            sgd: SgdConfig::default(),
            update_bn_stats: true,
            seed: 2020,
        }
    }
}

/// Ascends the mutual-information objective on unlabelled features. The
/// learning-rate schedule starts again from progress 0.
pub fn run_finetune<N, F>(cfg: &FinetuneConfig, net: &mut N, features: &Tensor, mut observer: F) -> Result<()>
where
    N: Network,
    F: FnMut(&EpochRecord, &N) -> Result<()>,
{
    if cfg.batch_size < 2 {
        return Err(Error::Config("batch size must be at least 2".into()));
    }
    let n = features.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0003);
    let mut opt = Sgd::new(cfg.sgd.clone());
    let total_steps = (cfg.epochs * batches_per_epoch(n, cfg.batch_size)).max(1);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut record = EpochRecord::empty(Phase::Finetune, epoch);
        let batches = epoch_batches(n, cfg.batch_size, &mut rng);
        for idx in &batches {
            let mut tape = Tape::new();
            let params = net.register(&mut tape);
            let xv = tape.leaf(features.select_rows(idx));
            let out = net.forward_train(&mut tape, &params, xv)?;
            let probs = tape.softmax(out.logits);
            let mi = losses::mi_loss(&mut tape, probs)?;
            let loss = tape.scale(mi, -1.0);
            let g = gradients(net, &tape, &params, loss)?;
            opt.step(&mut net.params_mut(), &g, step as f64 / total_steps as f64)?;
            if cfg.update_bn_stats {
                net.apply_batch_stats(&out.stats);
            }
            net.after_update();
            step += 1;

            record.loss += tape.scalar(loss);
            record.mi += tape.scalar(mi);
            record.entropy += mean_row_entropy(tape.value(probs));
        }
        record.scale(1.0 / batches.len().max(1) as f64);
        observer(&record, net)?;
    }
    Ok(())
}
