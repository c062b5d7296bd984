//! Adaptive self-knowledge distillation into a target network.
//!
//! Each batch minimises `KL(teacher || student) + beta * mixup - MI`; after
//! every epoch the memory-bank teacher moves towards the student's eval-mode
//! predictions.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::bank::MemoryBank;
use crate::error::{Error, Result};
use crate::losses::{self, MixPlan};
use crate::models::Network;
use crate::optim::{Sgd, SgdConfig};
use crate::predictor::TeacherEncoding;
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::{entropy_unchecked, Tensor};
use crate::training::{batches_per_epoch, epoch_batches, EpochRecord, Phase};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdaptConfig {
    /// Weight of the mixup consistency term; zero drops it.
    pub beta: f64,
    /// EMA momentum of the teacher.
    pub gamma: f64,
    pub mixup_alpha: f64,
    /// How source outputs become the initial teacher.
    pub teacher: TeacherEncoding,
    /// Include the mutual-information term.
    pub use_mi: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            beta: 1.0,
            gamma: 0.6,
            mixup_alpha: 0.3,
            teacher: TeacherEncoding::AdaLs(1),
            use_mi: true,
            epochs: 30,
            batch_size: 64,
            sgd: SgdConfig::default(),
            seed: 2020,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config("gamma must lie in [0, 1]".into()));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config("beta must be nonnegative".into()));
        }
        if !(self.mixup_alpha > 0.0) || !self.mixup_alpha.is_finite() {
            return Err(Error::Config("mixup alpha must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if let TeacherEncoding::AdaLs(0) = self.teacher {
            return Err(Error::Config("truncation level r must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draws `lambda ~ Beta(alpha, alpha)` once and a uniform pairing permutation.
pub fn sample_mix_plan(rng: &mut ChaCha8Rng, n: usize, alpha: f64) -> Result<MixPlan> {
    if n < 2 {
        return Err(Error::contract("mixup needs at least two samples"));
    }
    let beta = Beta::new(alpha, alpha).map_err(|_| Error::Config("invalid mixup alpha".into()))?;
    let lambda = beta.sample(rng);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    Ok(MixPlan { lambda, perm })
}

/// Interpolation consistency: soft cross-entropy between the mixed constant
/// `targets` and the network's prediction at the mixed input.
///
/// `targets` holds the stop-gradient predictions at `x`, row for row.
pub fn mixup_loss<N: Network>(
    net: &N,
    tape: &mut Tape,
    params: &[Var],
    x: &Tensor,
    targets: &Tensor,
    plan: &MixPlan,
) -> Result<(Var, Vec<BatchStats>)> {
    if x.rows() < 2 {
        return Err(Error::contract("mixup needs at least two samples"));
    }
    if targets.rows() != x.rows() {
        return Err(Error::dim("mixup_loss", x.shape(), targets.shape()));
    }
    let mixed_x = tape.leaf(plan.mix(x)?);
    let mixed_t = plan.mix(targets)?;
    let out = net.forward_train(tape, params, mixed_x)?;
    let probs = tape.softmax(out.logits);
    Ok((losses::soft_cross_entropy(tape, &mixed_t, probs)?, out.stats))
}

/// Nodes of one batch objective.
#[derive(Debug)]
pub struct LossTerms {
    pub total: Var,
    pub kd: Var,
    pub mix: Option<Var>,
    pub mi: Option<Var>,
    /// Student probabilities on the clean batch.
    pub probs: Var,
    /// Batch statistics of every training forward pass, in order.
    pub stats: Vec<Vec<BatchStats>>,
}

/// Builds `kd + beta * mix - mi` on `tape`. The mixup term is skipped when
/// `plan` is `None` or `beta` is zero.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<N: Network>(
    net: &N,
    tape: &mut Tape,
    params: &[Var],
    x: &Tensor,
    teacher: &Tensor,
    beta: f64,
    use_mi: bool,
    plan: Option<&MixPlan>,
) -> Result<LossTerms> {
    total_loss_with_targets(net, tape, params, x, teacher, beta, use_mi, plan, None)
}

/// [`total_loss`] with the mixup targets optionally pinned to `frozen`
/// instead of the detached clean-batch probabilities. Pinned targets make the
/// objective an ordinary function of the parameters, which is what a
/// finite-difference check needs.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_with_targets<N: Network>(
    net: &N,
    tape: &mut Tape,
    params: &[Var],
    x: &Tensor,
    teacher: &Tensor,
    beta: f64,
    use_mi: bool,
    plan: Option<&MixPlan>,
    frozen: Option<&Tensor>,
) -> Result<LossTerms> {
    let xv = tape.leaf(x.clone());
    let out = net.forward_train(tape, params, xv)?;
    let probs = tape.softmax(out.logits);
    let mut stats = alloc::vec![out.stats];
    let kd = losses::distill_loss(tape, teacher, probs)?;
    let mut total = kd;
    let mut mix = None;
    if let (Some(plan), true) = (plan, beta > 0.0) {
        let targets = match frozen {
            Some(t) => t.clone(),
            None => tape.value(probs).clone(),
        };
        let (m, s) = mixup_loss(net, tape, params, x, &targets, plan)?;
        stats.push(s);
        let weighted = tape.scale(m, beta);
        total = tape.add(total, weighted)?;
        mix = Some(m);
    }
    let mut mi = None;
    if use_mi {
        let m = losses::mi_loss(tape, probs)?;
        total = tape.sub(total, m)?;
        mi = Some(m);
    }
    Ok(LossTerms {
        total,
        kd,
        mix,
        mi,
        probs,
        stats,
    })
}

pub(crate) fn mean_row_entropy(p: &Tensor) -> f64 {
    (0..p.rows()).map(|i| entropy_unchecked(p.row(i))).sum::<f64>() / p.rows() as f64
}

pub(crate) fn gradients<N: Network>(net: &N, tape: &Tape, params: &[Var], loss: Var) -> Result<Vec<Tensor>> {
    let grads = tape.backward(loss)?;
    Ok(params
        .iter()
        .zip(net.params())
        .map(|(&v, p)| grads.get_or_zeros(v, &p.value))
        .collect())
}

/// Trains `net` against the memory-bank teacher on unlabelled target features.
///
/// `observer` runs after each epoch's bank update.
pub fn run_distillation<N, F>(
    cfg: &AdaptConfig,
    bank: &mut MemoryBank,
    net: &mut N,
    features: &Tensor,
    mut observer: F,
) -> Result<()>
where
    N: Network,
    F: FnMut(&EpochRecord, &N, &MemoryBank) -> Result<()>,
{
    cfg.validate()?;
    let n = features.rows();
    if bank.len() != n || bank.num_classes() != net.num_classes() {
        return Err(Error::dim("run_distillation", bank.rows().shape(), &[n, net.num_classes()]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let mut opt = Sgd::new(cfg.sgd.clone());
    let total_steps = (cfg.epochs * batches_per_epoch(n, cfg.batch_size)).max(1);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut record = EpochRecord::empty(Phase::Distill, epoch);
        let batches = epoch_batches(n, cfg.batch_size, &mut rng);
        for idx in &batches {
            let x = features.select_rows(idx);
            let teacher = bank.lookup(idx)?;
            let plan = if cfg.beta > 0.0 {
                Some(sample_mix_plan(&mut rng, idx.len(), cfg.mixup_alpha)?)
            } else {
                None
            };
            let mut tape = Tape::new();
            let params = net.register(&mut tape);
            let terms = total_loss(net, &mut tape, &params, &x, &teacher, cfg.beta, cfg.use_mi, plan.as_ref())?;
            let g = gradients(net, &tape, &params, terms.total)?;
            opt.step(&mut net.params_mut(), &g, step as f64 / total_steps as f64)?;
            for s in &terms.stats {
                net.apply_batch_stats(s);
            }
            net.after_update();
            step += 1;

            record.loss += tape.scalar(terms.total);
            record.kd += tape.scalar(terms.kd);
            record.mix += terms.mix.map_or(0.0, |v| tape.scalar(v));
            record.mi += terms.mi.map_or(0.0, |v| tape.scalar(v));
            record.entropy += mean_row_entropy(tape.value(terms.probs));
        }
        record.scale(1.0 / batches.len().max(1) as f64);
        let fresh = net.predict_proba(features)?;
        bank.ema_update(&fresh, cfg.gamma)?;
        observer(&record, net, bank)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Architecture, SourceNet, TargetNet};
    use crate::tape::{grad_check_many, GRAD_CHECK_STEP};
    use crate::tensor::softmax_rows;
    use rand::Rng;

    fn batch(seed: u64, n: usize, d: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(alloc::vec![n, d], (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn small_arch() -> Architecture {
        Architecture {
            input_dim: 2,
            hidden: alloc::vec![5],
            num_classes: 3,
            bottleneck: 4,
        }
    }

    fn values(net: &TargetNet) -> Vec<Tensor> {
        net.params().iter().map(|p| p.value.clone()).collect()
    }

    #[test]
    fn total_loss_gradients() {
        for seed in 0..5 {
            let net = TargetNet::new(&small_arch(), seed).unwrap();
            let x = batch(seed + 100, 6, 2);
            let teacher = softmax_rows(&batch(seed + 200, 6, 3));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plan = sample_mix_plan(&mut rng, 6, 0.3).unwrap();
            // Stop-gradient targets are constants of the objective, so the
            // finite-difference oracle pins them at the base point.
            let mut tape = Tape::new();
            let params = net.register(&mut tape);
            let terms = total_loss(&net, &mut tape, &params, &x, &teacher, 1.0, true, Some(&plan)).unwrap();
            let frozen = tape.value(terms.probs).clone();
            let live = gradients(&net, &tape, &params, terms.total).unwrap();
            let mut tape = Tape::new();
            let params = net.register(&mut tape);
            let pinned = total_loss_with_targets(&net, &mut tape, &params, &x, &teacher, 1.0, true, Some(&plan), Some(&frozen)).unwrap();
            assert_eq!(live, gradients(&net, &tape, &params, pinned.total).unwrap());
            let err = grad_check_many(
                |t, p| total_loss_with_targets(&net, t, p, &x, &teacher, 1.0, true, Some(&plan), Some(&frozen)).map(|l| l.total),
                &values(&net),
                GRAD_CHECK_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "total {err}");
        }
    }

    #[test]
    fn mixup_loss_gradients() {
        for seed in 0..5 {
            let net = TargetNet::new(&small_arch(), seed + 7).unwrap();
            let x = batch(seed + 300, 6, 2);
            let targets = softmax_rows(&batch(seed + 400, 6, 3));
            let plan = MixPlan {
                lambda: 0.37,
                perm: alloc::vec![3, 0, 5, 1, 2, 4],
            };
            let err = grad_check_many(
                |t, p| mixup_loss(&net, t, p, &x, &targets, &plan).map(|m| m.0),
                &values(&net),
                GRAD_CHECK_STEP,
            )
            .unwrap();
            assert!(err < 1e-4, "mix {err}");
        }
    }

    #[test]
    fn mixup_with_unit_lambda_is_mean_entropy() {
        // A net without batch norm is deterministic, so train and eval agree.
        let arch = small_arch();
        let net = SourceNet::new(&arch, 3).unwrap();
        let x = batch(11, 8, 2);
        let p = net.predict_proba(&x).unwrap();
        let mut tape = Tape::new();
        let params = net.register(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut plan = sample_mix_plan(&mut rng, 8, 0.3).unwrap();
        plan.lambda = 1.0;
        let (loss, _) = mixup_loss(&net, &mut tape, &params, &x, &p, &plan).unwrap();
        assert!((tape.scalar(loss) - mean_row_entropy(&p)).abs() < 1e-9);
    }

    #[test]
    fn mixup_rejects_single_sample() {
        let net = SourceNet::new(&small_arch(), 3).unwrap();
        let x = batch(1, 1, 2);
        let mut tape = Tape::new();
        let params = net.register(&mut tape);
        let plan = MixPlan::identity(1, 0.5);
        assert!(mixup_loss(&net, &mut tape, &params, &x, &Tensor::full(&[1, 3], 1.0 / 3.0), &plan).is_err());
        assert!(sample_mix_plan(&mut ChaCha8Rng::seed_from_u64(0), 1, 0.3).is_err());
    }

    #[test]
    fn beta_only_scales_the_mixup_term() {
        let net = TargetNet::new(&small_arch(), 5).unwrap();
        let x = batch(21, 8, 2);
        let teacher = softmax_rows(&batch(22, 8, 3));
        let plan = sample_mix_plan(&mut ChaCha8Rng::seed_from_u64(9), 8, 0.3).unwrap();
        let eval = |beta: f64| {
            let mut tape = Tape::new();
            let params = net.register(&mut tape);
            let t = total_loss(&net, &mut tape, &params, &x, &teacher, beta, true, Some(&plan)).unwrap();
            (tape.scalar(t.total), t.mix.map(|m| tape.scalar(m)))
        };
        let (base, none) = eval(0.0);
        assert!(none.is_none());
        let (full, mix) = eval(0.7);
        assert!((base + 0.7 * mix.unwrap() - full).abs() < 1e-9);
    }

    #[test]
    fn student_equal_to_teacher_leaves_negative_mi() {
        let net = TargetNet::new(&small_arch(), 6).unwrap();
        let x = batch(31, 8, 2);
        let mut tape = Tape::new();
        let params = net.register(&mut tape);
        let xv = tape.leaf(x.clone());
        let probs = {
            let out = net.forward_train(&mut tape, &params, xv).unwrap();
            let p = tape.softmax(out.logits);
            tape.value(p).clone()
        };
        let mut tape = Tape::new();
        let params = net.register(&mut tape);
        let t = total_loss(&net, &mut tape, &params, &x, &probs, 0.0, true, None).unwrap();
        let mi = tape.scalar(t.mi.unwrap());
        assert!(tape.scalar(t.kd).abs() < 1e-12);
        assert!((tape.scalar(t.total) + mi).abs() < 1e-12);
    }

    #[test]
    fn hard_teacher_gives_pseudo_label_total_loss_with_targets() {
        let net = TargetNet::new(&small_arch(), 8).unwrap();
        let x = batch(41, 6, 2);
        let labels = [0usize, 2, 1, 1, 0, 2];
        let mut teacher = Tensor::zeros(&[6, 3]);
        for (i, &y) in labels.iter().enumerate() {
            teacher.row_mut(i)[y] = 1.0;
        }
        let mut tape = Tape::new();
        let params = net.register(&mut tape);
        let t = total_loss(&net, &mut tape, &params, &x, &teacher, 0.0, true, None).unwrap();
        let p = tape.value(t.probs).clone();
        let ce: f64 = labels.iter().enumerate().map(|(i, &y)| -libm::log(p.get(i, y))).sum::<f64>() / 6.0;
        let mi = tape.scalar(t.mi.unwrap());
        // One-hot teachers have zero entropy, so the constant is zero.
        assert!((tape.scalar(t.total) - (ce - mi)).abs() < 1e-9);
    }

    fn tiny_setup(seed: u64) -> (TargetNet, MemoryBank, Tensor) {
        let x = batch(seed, 40, 2);
        let net = TargetNet::new(&small_arch(), seed).unwrap();
        let bank = MemoryBank::new(softmax_rows(&batch(seed + 1, 40, 3))).unwrap();
        (net, bank, x)
    }

    fn tiny_cfg() -> AdaptConfig {
        AdaptConfig {
            epochs: 3,
            batch_size: 16,
            ..AdaptConfig::default()
        }
    }

    #[test]
    fn zero_epochs_change_nothing() {
        let (mut net, mut bank, x) = tiny_setup(1);
        let (net0, bank0) = (net.clone(), bank.clone());
        let cfg = AdaptConfig { epochs: 0, ..tiny_cfg() };
        run_distillation(&cfg, &mut bank, &mut net, &x, |_, _, _| Ok(())).unwrap();
        assert_eq!(net, net0);
        assert_eq!(bank, bank0);
    }

    #[test]
    fn distillation_is_deterministic() {
        let run = || {
            let (mut net, mut bank, x) = tiny_setup(2);
            let mut records = Vec::new();
            run_distillation(&tiny_cfg(), &mut bank, &mut net, &x, |r, _, _| {
                records.push(r.clone());
                Ok(())
            })
            .unwrap();
            (net, bank, records)
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.2.len(), 3);
        assert_eq!(a.1.epoch(), 3);
    }

    #[test]
    fn ema_boundaries_during_training() {
        let (mut net, mut bank, x) = tiny_setup(3);
        let bank0 = bank.clone();
        let cfg = AdaptConfig { gamma: 1.0, ..tiny_cfg() };
        run_distillation(&cfg, &mut bank, &mut net, &x, |_, _, _| Ok(())).unwrap();
        assert_eq!(bank.rows(), bank0.rows());

        let (mut net, mut bank, x) = tiny_setup(3);
        let cfg = AdaptConfig { gamma: 0.0, ..tiny_cfg() };
        run_distillation(&cfg, &mut bank, &mut net, &x, |_, n, b| {
            let fresh = n.predict_proba(&x)?;
            let diff = fresh.data().iter().zip(b.rows().data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-9);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn invalid_config_is_rejected() {
        let (mut net, mut bank, x) = tiny_setup(4);
        for cfg in [
            AdaptConfig { gamma: 1.5, ..tiny_cfg() },
            AdaptConfig { beta: -1.0, ..tiny_cfg() },
            AdaptConfig { mixup_alpha: 0.0, ..tiny_cfg() },
        ] {
            assert!(matches!(
                run_distillation(&cfg, &mut bank, &mut net, &x, |_, _, _| Ok(())),
                Err(Error::Config(_))
            ));
        }
    }
}
