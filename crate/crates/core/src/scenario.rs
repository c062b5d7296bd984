//! Synthetic covariate-shift benchmarks and target-side evaluation.
//!
//! Every domain is the same base distribution pushed through its own
//! [`DomainShift`]: a rotation about the origin, a translation and extra
//! isotropic Gaussian noise. Generation is a pure function of the
//! [`ScenarioSpec`].

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math;
use crate::models::Network;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Family {
    /// Two interleaving half circles, centred on the origin. Two classes only.
    /// Points thin out towards the tips of each arc.
    Moons,
    /// `K` elongated Gaussian clusters evenly spaced on a circle.
    Gaussians,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DomainShift {
    pub rotation_deg: f64,
    pub translation: [f64; 2],
    /// Standard deviation of extra isotropic noise.
    pub noise: f64,
}

impl DomainShift {
    pub fn identity() -> Self {
        DomainShift::rotation(0.0)
    }

    pub fn rotation(deg: f64) -> Self {
        DomainShift {
            rotation_deg: deg,
            translation: [0.0, 0.0],
            noise: 0.0,
        }
    }

    /// Applies the deterministic part (rotation then translation).
    pub fn transform(&self, p: [f64; 2]) -> [f64; 2] {
        let t = self.rotation_deg.to_radians();
        let (s, c) = (math::sin(t), math::cos(t));
        [
            c * p[0] - s * p[1] + self.translation[0],
            s * p[0] + c * p[1] + self.translation[1],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case", tag = "kind"))]
pub enum Regime {
    /// Source and target share the label set.
    Closed,
    /// The target only contains classes `0..k_target`.
    Partial { k_target: usize },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScenarioSpec {
    pub family: Family,
    /// Samples per source domain.
    pub n_source: usize,
    pub n_target: usize,
    pub num_classes: usize,
    /// Standard deviation of the base distribution's own noise.
    pub base_noise: f64,
    /// One entry per source domain.
    pub sources: Vec<DomainShift>,
    pub target: DomainShift,
    pub regime: Regime,
    pub seed: u64,
}

impl ScenarioSpec {
    /// Single-source two-moons with a 30 degree target rotation.
    pub fn reference() -> Self {
        ScenarioSpec {
            family: Family::Moons,
            n_source: 1000,
            n_target: 1000,
            num_classes: 2,
            base_noise: 0.1,
            sources: vec![DomainShift::identity()],
            target: DomainShift::rotation(30.0),
            regime: Regime::Closed,
            seed: 2020,
        }
    }

    /// Four Gaussian clusters seen from three rotated sources, target at +35 degrees.
    pub fn multi_source() -> Self {
        ScenarioSpec {
            family: Family::Gaussians,
            n_source: 1000,
            n_target: 1000,
            num_classes: 4,
            base_noise: 0.0,
            sources: vec![
                DomainShift::rotation(-20.0),
                DomainShift::rotation(0.0),
                DomainShift::rotation(20.0),
            ],
            target: DomainShift::rotation(35.0),
            regime: Regime::Closed,
            seed: 2020,
        }
    }

    /// Eight Gaussian clusters; the target holds only the first four classes.
    pub fn partial() -> Self {
        ScenarioSpec {
            family: Family::Gaussians,
            n_source: 1000,
            n_target: 1000,
            num_classes: 8,
            base_noise: 0.0,
            sources: vec![DomainShift::identity()],
            target: DomainShift::rotation(15.0),
            regime: Regime::Partial { k_target: 4 },
            seed: 2020,
        }
    }

    pub fn target_classes(&self) -> usize {
        match self.regime {
            Regime::Closed => self.num_classes,
            Regime::Partial { k_target } => k_target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.num_classes < 2 {
            return bad("at least two classes are required");
        }
        if self.family == Family::Moons && self.num_classes != 2 {
            return bad("the moons family has exactly two classes");
        }
        if self.sources.is_empty() {
            return bad("at least one source domain is required");
        }
        if self.n_source < self.num_classes || self.n_target < self.target_classes() {
            return bad("every class needs at least one sample");
        }
        if let Regime::Partial { k_target } = self.regime {
            if k_target == 0 || k_target >= self.num_classes {
                return bad("partial regime needs 1 <= k_target < K");
            }
        }
        let shifts = self.sources.iter().chain(core::iter::once(&self.target));
        for s in shifts {
            if !(s.noise >= 0.0) || !s.rotation_deg.is_finite() {
                return bad("invalid domain shift");
            }
        }
        if !(self.base_noise >= 0.0) {
            return bad("base noise must be nonnegative");
        }
        Ok(())
    }
}

/// A labelled domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl DomainData {
    /// Deterministic split into `(first, second)` where `first` holds
    /// `round(fraction * n)` shuffled samples.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(DomainData, DomainData)> {
        let n = self.labels.len();
        let cut = (fraction * n as f64).round() as usize;
        if cut == 0 || cut >= n {
            return Err(Error::Config("split leaves an empty side".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let part = |idx: &[usize]| DomainData {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        };
        Ok((part(&order[..cut]), part(&order[cut..])))
    }
}

/// Ground-truth target labels. Training entry points take only
/// [`TargetDomain::features`]; these labels are read by [`evaluate`] and by
/// dataset export.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLabels(Vec<usize>);

impl HiddenLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        HiddenLabels(labels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// For evaluation and export only.
    pub fn reveal(&self) -> &[usize] {
        &self.0
    }
}

/// The unlabelled target domain plus its held-out labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDomain {
    pub features: Tensor,
    pub labels: HiddenLabels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub sources: Vec<DomainData>,
    pub target: TargetDomain,
    /// Classes of the source label space.
    pub num_classes: usize,
}

/// Arc positions follow `pi * Beta(a, a)`.
const MOON_ARC_CONCENTRATION: f64 = 4.0;
const MOONS_SHIFT: [f64; 2] = [0.5, 0.25];
/// Cluster-circle radius per class, so neighbouring clusters keep their spacing as K grows.
const GAUSS_RADIUS_PER_CLASS: f64 = 0.75;
const GAUSS_RADIAL_SD: f64 = 0.25;
const GAUSS_TANGENTIAL_SD: f64 = 0.6;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn base_point(family: Family, class: usize, k: usize, noise: f64, arc: &Beta<f64>, rng: &mut ChaCha8Rng) -> [f64; 2] {
    let mut p = match family {
        Family::Moons => {
            let t = core::f64::consts::PI * arc.sample(rng);
            let (s, c) = (math::sin(t), math::cos(t));
            let raw = if class == 0 { [c, s] } else { [1.0 - c, 0.5 - s] };
            [raw[0] - MOONS_SHIFT[0], raw[1] - MOONS_SHIFT[1]]
        }
        Family::Gaussians => {
            let angle = 2.0 * core::f64::consts::PI * class as f64 / k as f64;
            let (s, c) = (math::sin(angle), math::cos(angle));
            let radial = GAUSS_RADIUS_PER_CLASS * k as f64 + GAUSS_RADIAL_SD * normal(rng);
            let tangential = GAUSS_TANGENTIAL_SD * normal(rng);
            [radial * c - tangential * s, radial * s + tangential * c]
        }
    };
    if noise > 0.0 {
        p[0] += noise * normal(rng);
        p[1] += noise * normal(rng);
    }
    p
}

fn sample_domain(
    spec: &ScenarioSpec,
    shift: &DomainShift,
    n: usize,
    classes: usize,
    stream: u64,
) -> Result<(Tensor, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    // Balanced: class counts differ by at most one.
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let arc = Beta::new(MOON_ARC_CONCENTRATION, MOON_ARC_CONCENTRATION)
        .map_err(|_| Error::contract("invalid arc distribution"))?;
    let mut data = Vec::with_capacity(2 * n);
    for &y in &labels {
        let p = base_point(spec.family, y, spec.num_classes, spec.base_noise, &arc, &mut rng);
        let mut q = shift.transform(p);
        if shift.noise > 0.0 {
            q[0] += shift.noise * normal(&mut rng);
            q[1] += shift.noise * normal(&mut rng);
        }
        data.extend_from_slice(&q);
    }
    Ok((Tensor::new(vec![n, 2], data)?, labels))
}

/// Builds every source domain and the target domain of `spec`.
pub fn generate(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let mut sources = Vec::with_capacity(spec.sources.len());
    for (m, shift) in spec.sources.iter().enumerate() {
        let (features, labels) = sample_domain(spec, shift, spec.n_source, spec.num_classes, m as u64 + 1)?;
        sources.push(DomainData {
            features,
            labels,
            num_classes: spec.num_classes,
        });
    }
    let (features, labels) = sample_domain(spec, &spec.target, spec.n_target, spec.target_classes(), 0)?;
    Ok(Scenario {
        sources,
        target: TargetDomain {
            features,
            labels: HiddenLabels::new(labels),
        },
        num_classes: spec.num_classes,
    })
}

/// Accuracy summary in percent.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Evaluation {
    pub accuracy: f64,
    /// Mean of per-class accuracies over the classes present in the labels.
    pub per_class_mean: f64,
    /// Per-class accuracy, `None` for classes absent from the labels.
    pub per_class: Vec<Option<f64>>,
}

/// Scores class decisions against labels. Decisions may range over more
/// classes than the labels use (partial-set evaluation).
pub fn evaluate_predictions(predictions: &[usize], labels: &HiddenLabels, num_classes: usize) -> Result<Evaluation> {
    let labels = labels.reveal();
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::dim("evaluate", &[labels.len()], &[predictions.len()]));
    }
    let mut hits = vec![0usize; num_classes];
    let mut counts = vec![0usize; num_classes];
    let mut correct = 0usize;
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::contract("label outside the class range"));
        }
        counts[y] += 1;
        if p == y {
            hits[y] += 1;
            correct += 1;
        }
    }
    let per_class: Vec<Option<f64>> = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| (c > 0).then(|| 100.0 * h as f64 / c as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(Evaluation {
        accuracy: 100.0 * correct as f64 / labels.len() as f64,
        per_class_mean: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}

/// Evaluates `net` on the target domain; argmax is taken over all of the
/// network's classes.
pub fn evaluate<N: Network>(net: &N, target: &TargetDomain) -> Result<Evaluation> {
    let predictions = net.forward_eval(&target.features)?.argmax_rows();
    evaluate_predictions(&predictions, &target.labels, net.num_classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn generation_is_pure() {
        let spec = ScenarioSpec::reference();
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let mut other = spec.clone();
        other.seed = 2021;
        assert_ne!(generate(&spec).unwrap().target, generate(&other).unwrap().target);
    }

    #[test]
    fn classes_are_balanced() {
        let s = generate(&ScenarioSpec::multi_source()).unwrap();
        assert_eq!(s.sources.len(), 3);
        for src in &s.sources {
            let mut counts = [0usize; 4];
            src.labels.iter().for_each(|&y| counts[y] += 1);
            assert_eq!(counts, [250; 4]);
        }
    }

    #[test]
    fn partial_target_holds_first_classes_only() {
        let mut spec = ScenarioSpec::partial();
        spec.num_classes = 8;
        spec.regime = Regime::Partial { k_target: 4 };
        let s = generate(&spec).unwrap();
        assert!(s.target.labels.reveal().iter().all(|&y| y < 4));
        assert!(s.sources[0].labels.iter().any(|&y| y >= 4));
    }

    #[test]
    fn rotation_preserves_distances() {
        let shift = DomainShift {
            rotation_deg: 37.0,
            translation: [1.5, -2.0],
            noise: 0.0,
        };
        let pts = [[0.3, -1.2], [2.0, 0.7], [-1.1, -0.4]];
        for a in &pts {
            for b in &pts {
                let (ta, tb) = (shift.transform(*a), shift.transform(*b));
                let d0 = math::sqrt((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2));
                let d1 = math::sqrt((ta[0] - tb[0]).powi(2) + (ta[1] - tb[1]).powi(2));
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = ScenarioSpec::reference();
        spec.num_classes = 3;
        assert!(generate(&spec).is_err());
        let mut spec = ScenarioSpec::partial();
        spec.regime = Regime::Partial { k_target: 8 };
        assert!(generate(&spec).is_err());
        let mut spec = ScenarioSpec::reference();
        spec.sources.clear();
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn evaluation_examples() {
        let labels = HiddenLabels::new(vec![0, 1, 2, 0, 1, 2]);
        let e = evaluate_predictions(&[0, 1, 2, 0, 1, 2], &labels, 3).unwrap();
        assert_eq!(e.accuracy, 100.0);
        let e = evaluate_predictions(&[0, 0, 0, 0, 1, 2], &labels, 3).unwrap();
        assert!((e.accuracy - 200.0 / 3.0).abs() < 1e-12);
        // Balanced classes: per-class mean equals overall accuracy.
        assert!((e.per_class_mean - e.accuracy).abs() < 1e-12);
        // Partial: absent classes are skipped.
        let e = evaluate_predictions(&[0, 3], &HiddenLabels::new(vec![0, 1]), 4).unwrap();
        assert_eq!(e.per_class, vec![Some(100.0), Some(0.0), None, None]);
    }

    #[test]
    fn chance_level_for_uniform_guessing() {
        let k = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40_000;
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let e = evaluate_predictions(&preds, &HiddenLabels::new(labels), k).unwrap();
        assert!((e.accuracy - 25.0).abs() < 1.0, "{}", e.accuracy);
    }
}
