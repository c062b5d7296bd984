//! The black-box predictor boundary.
//!
//! A [`Predictor`] answers queries with a [`Disclosed`] output and nothing
//! else: no parameters, gradients or architecture cross this interface. The
//! transforms that only need predictor outputs (adaptive label smoothing,
//! hard-label encodings, multi-source averaging) live here too.

use alloc::vec;
use alloc::vec::Vec;

use crate::bank::MemoryBank;
use crate::error::{Error, Result};
use crate::models::{Network, SourceNet};
use crate::tensor::{self, Tensor};

/// Smoothing used when a hard label is turned into a soft one.
pub const HARD_LS_ALPHA: f64 = 0.1;

/// How much a predictor reveals per query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DisclosureMode {
    /// The full probability vector.
    Full,
    /// The `r` most probable `(class, probability)` pairs.
    TopR(usize),
    /// The predicted class only.
    Hard,
}

/// A predictor's answer to one query.
#[derive(Debug, Clone, PartialEq)]
pub enum Disclosed {
    Full(Vec<f64>),
    /// Pairs sorted by descending probability, ties by ascending class.
    TopR {
        num_classes: usize,
        pairs: Vec<(usize, f64)>,
    },
    Hard {
        num_classes: usize,
        class: usize,
    },
}

impl Disclosed {
    pub fn num_classes(&self) -> usize {
        match self {
            Disclosed::Full(p) => p.len(),
            Disclosed::TopR { num_classes, .. } | Disclosed::Hard { num_classes, .. } => *num_classes,
        }
    }

    /// The predicted class.
    pub fn top_class(&self) -> Result<usize> {
        match self {
            Disclosed::Full(p) => Ok(tensor::argmax(p)),
            Disclosed::TopR { pairs, .. } => pairs
                .first()
                .map(|&(c, _)| c)
                .ok_or_else(|| Error::contract("empty top-r disclosure")),
            Disclosed::Hard { class, .. } => Ok(*class),
        }
    }
}

/// Class indices of the `r` largest entries, descending, lowest index first on ties.
pub fn top_r_indices(p: &[f64], r: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    // Stable sort keeps ascending index order among equal values.
    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap_or(core::cmp::Ordering::Equal));
    idx.truncate(r);
    idx
}

/// Reveals `p` according to `mode`.
pub fn disclose(p: &[f64], mode: DisclosureMode) -> Result<Disclosed> {
    let k = p.len();
    match mode {
        DisclosureMode::Full => Ok(Disclosed::Full(p.to_vec())),
        DisclosureMode::TopR(r) => {
            if r == 0 || r > k {
                return Err(Error::contract("top-r disclosure needs 1 <= r <= K"));
            }
            let pairs = top_r_indices(p, r).into_iter().map(|c| (c, p[c])).collect();
            Ok(Disclosed::TopR { num_classes: k, pairs })
        }
        DisclosureMode::Hard => Ok(Disclosed::Hard {
            num_classes: k,
            class: tensor::argmax(p),
        }),
    }
}

/// A probability vector after adaptive label smoothing.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedPrediction {
    pub probs: Vec<f64>,
    pub r: usize,
}

/// Adaptive label smoothing: keep the `r` largest probabilities and spread the
/// remaining mass evenly over the other `K - r` classes.
pub fn ada_ls(input: &Disclosed, r: usize) -> Result<SmoothedPrediction> {
    let k = input.num_classes();
    if r == 0 || r > k {
        return Err(Error::contract("adaptive smoothing needs 1 <= r <= K"));
    }
    let kept: Vec<(usize, f64)> = match input {
        Disclosed::Full(p) => {
            if r == k {
                return Ok(SmoothedPrediction { probs: p.clone(), r });
            }
            top_r_indices(p, r).into_iter().map(|c| (c, p[c])).collect()
        }
        Disclosed::TopR { pairs, .. } => {
            if pairs.len() < r {
                return Err(Error::contract(alloc::format!(
                    "top-{} disclosure cannot be smoothed at r = {r}",
                    pairs.len()
                )));
            }
            let mut sorted = pairs.clone();
            sorted.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(core::cmp::Ordering::Equal)
                    .then(a.0.cmp(&b.0))
            });
            sorted.truncate(r);
            sorted
        }
        Disclosed::Hard { .. } => {
            return Err(Error::contract("a hard label carries no probabilities to smooth"));
        }
    };
    let mut probs = vec![f64::NAN; k];
    let mut mass = 0.0;
    for &(c, v) in &kept {
        if c >= k || !probs[c].is_nan() {
            return Err(Error::contract("invalid class index in disclosure"));
        }
        probs[c] = v;
        mass += v;
    }
    if r == k {
        return Ok(SmoothedPrediction { probs, r });
    }
    let rest = ((1.0 - mass) / (k - r) as f64).max(0.0);
    for v in probs.iter_mut().filter(|v| v.is_nan()) {
        *v = rest;
    }
    Ok(SmoothedPrediction { probs, r })
}

/// Encoding of a hard label as a probability vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum HardEncoding {
    OneHot,
    /// `(1 - 0.1) 1_class + 0.1 / K`.
    Smoothed,
}

pub fn hard_to_prob(class: usize, num_classes: usize, mode: HardEncoding) -> Result<Vec<f64>> {
    if class >= num_classes {
        return Err(Error::contract("class index out of range"));
    }
    let mut p = match mode {
        HardEncoding::OneHot => vec![0.0; num_classes],
        HardEncoding::Smoothed => vec![HARD_LS_ALPHA / num_classes as f64; num_classes],
    };
    p[class] += match mode {
        HardEncoding::OneHot => 1.0,
        HardEncoding::Smoothed => 1.0 - HARD_LS_ALPHA,
    };
    Ok(p)
}

/// How predictor outputs become teacher rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TeacherEncoding {
    /// One-hot of the predicted class.
    Hard,
    /// Label-smoothed predicted class.
    Ls,
    /// Adaptive label smoothing with the given `r`. Hard disclosures fall back
    /// to [`HardEncoding::Smoothed`].
    AdaLs(usize),
}

/// Turns one disclosed output into a teacher probability vector.
pub fn encode(disclosed: &Disclosed, encoding: TeacherEncoding) -> Result<Vec<f64>> {
    let k = disclosed.num_classes();
    match encoding {
        TeacherEncoding::Hard => hard_to_prob(disclosed.top_class()?, k, HardEncoding::OneHot),
        TeacherEncoding::Ls => hard_to_prob(disclosed.top_class()?, k, HardEncoding::Smoothed),
        TeacherEncoding::AdaLs(r) => match disclosed {
            Disclosed::Hard { class, .. } => hard_to_prob(*class, k, HardEncoding::Smoothed),
            _ => Ok(ada_ls(disclosed, r)?.probs),
        },
    }
}

/// One query against a predictor. Cache-backed predictors answer by `id`;
/// model-backed ones by `features`.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub id: usize,
    pub features: &'a [f64],
}

/// An opaque source model.
pub trait Predictor: Send + Sync {
    fn num_classes(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn predict(&self, query: Query<'_>) -> Result<Disclosed>;
}

/// In-process predictor backed by a snapshot of a source network.
#[derive(Debug, Clone)]
pub struct LocalPredictor {
    net: SourceNet,
    mode: DisclosureMode,
}

impl LocalPredictor {
    pub fn new(net: SourceNet, mode: DisclosureMode) -> Result<Self> {
        if let DisclosureMode::TopR(r) = mode {
            if r == 0 || r > net.num_classes() {
                return Err(Error::contract("top-r disclosure needs 1 <= r <= K"));
            }
        }
        Ok(LocalPredictor { net, mode })
    }

    pub fn mode(&self) -> DisclosureMode {
        self.mode
    }

    /// Full probability vector; only reachable by the owner of the snapshot.
    pub fn probabilities(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.net.input_dim() {
            return Err(Error::dim("predict", &[self.net.input_dim()], &[features.len()]));
        }
        let x = Tensor::new(vec![1, features.len()], features.to_vec())?;
        Ok(self.net.predict_proba(&x)?.into_data())
    }
}

impl Predictor for LocalPredictor {
    fn num_classes(&self) -> usize {
        self.net.num_classes()
    }

    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn predict(&self, query: Query<'_>) -> Result<Disclosed> {
        let p = self.probabilities(query.features)?;
        disclose(&p, self.mode)
    }
}

fn shared_classes(predictors: &[&dyn Predictor], x: &Tensor) -> Result<usize> {
    let first = predictors
        .first()
        .ok_or_else(|| Error::contract("at least one predictor is required"))?;
    let k = first.num_classes();
    for p in predictors {
        if p.num_classes() != k {
            return Err(Error::contract("predictors disagree on the number of classes"));
        }
        if p.input_dim() != x.cols() {
            return Err(Error::dim("predict", &[p.input_dim()], x.shape()));
        }
    }
    Ok(k)
}

/// Averages the encoded predictions of every predictor for every row of `x`.
/// Any predictor failure aborts the whole computation.
pub fn averaged_predictions(
    predictors: &[&dyn Predictor],
    x: &Tensor,
    encoding: TeacherEncoding,
) -> Result<Tensor> {
    let k = shared_classes(predictors, x)?;
    let m = predictors.len() as f64;
    let n = x.rows();
    let mut out = Tensor::zeros(&[n, k]);
    for i in 0..n {
        let query = Query {
            id: i,
            features: x.row(i),
        };
        let row = out.row_mut(i);
        for p in predictors {
            let disclosed = p.predict(query)?;
            if disclosed.num_classes() != k {
                return Err(Error::Predictor("disclosure has the wrong class count".into()));
            }
            let encoded = encode(&disclosed, encoding)?;
            for (o, v) in row.iter_mut().zip(encoded) {
                *o += v;
            }
        }
        row.iter_mut().for_each(|v| *v /= m);
    }
    Ok(out)
}

/// Builds the initial teacher: the mean over predictors of the encoded outputs.
pub fn init_teacher(
    predictors: &[&dyn Predictor],
    x: &Tensor,
    encoding: TeacherEncoding,
) -> Result<MemoryBank> {
    MemoryBank::new(averaged_predictions(predictors, x, encoding)?)
}

/// Class decisions of the averaged source predictions, with no training.
pub fn no_adapt_predictions(
    predictors: &[&dyn Predictor],
    x: &Tensor,
    encoding: TeacherEncoding,
) -> Result<Vec<usize>> {
    Ok(averaged_predictions(predictors, x, encoding)?.argmax_rows())
}
