//! On-disk prediction caches: one JSON record per line, one line per target
//! sample. Adaptation can run from a cache alone.
//!
//! Hard disclosures store the class in `classes` and leave `probs` empty;
//! full disclosures store every class in index order. A record that covers
//! all K classes reads back as a full disclosure, whatever its order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use dine_core::predictor::{Disclosed, Predictor, Query};
use dine_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{io_at, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub sample_id: usize,
    pub classes: Vec<usize>,
    pub probs: Vec<f64>,
    /// Number of disclosed pairs; zero for hard labels.
    pub r: usize,
    pub predictor_id: String,
    pub num_classes: usize,
}

impl CacheRecord {
    pub fn from_disclosed(sample_id: usize, predictor_id: &str, d: &Disclosed) -> Self {
        let (classes, probs) = match d {
            Disclosed::Full(p) => ((0..p.len()).collect(), p.clone()),
            Disclosed::TopR { pairs, .. } => pairs.iter().copied().unzip(),
            Disclosed::Hard { class, .. } => (vec![*class], Vec::new()),
        };
        CacheRecord {
            sample_id,
            r: probs.len(),
            classes,
            probs,
            predictor_id: predictor_id.to_string(),
            num_classes: d.num_classes(),
        }
    }

    pub fn to_disclosed(&self) -> Result<Disclosed> {
        let k = self.num_classes;
        let bad = |m: &str| Error::Protocol(format!("sample {}: {m}", self.sample_id));
        if self.classes.iter().any(|&c| c >= k) {
            return Err(bad("class index out of range"));
        }
        if self.probs.is_empty() {
            return match self.classes.as_slice() {
                [class] => Ok(Disclosed::Hard { num_classes: k, class: *class }),
                _ => Err(bad("a hard record carries exactly one class")),
            };
        }
        if self.probs.len() != self.classes.len() || self.r != self.probs.len() {
            return Err(bad("classes, probabilities and r disagree"));
        }
        if self.r == k {
            let mut full = vec![f64::NAN; k];
            for (&c, &p) in self.classes.iter().zip(&self.probs) {
                full[c] = p;
            }
            if full.iter().any(|p| p.is_nan()) {
                return Err(bad("repeated class index"));
            }
            return Ok(Disclosed::Full(full));
        }
        Ok(Disclosed::TopR {
            num_classes: k,
            pairs: self.classes.iter().copied().zip(self.probs.iter().copied()).collect(),
        })
    }
}

/// Queries `predictor` once per row of `features` and writes the answers.
pub fn write_cache(path: &Path, predictor_id: &str, predictor: &dyn Predictor, features: &Tensor) -> Result<usize> {
    let file = File::create(path).map_err(io_at(path))?;
    let mut out = BufWriter::new(file);
    for i in 0..features.rows() {
        let d = predictor.predict(Query { id: i, features: features.row(i) })?;
        let line = serde_json::to_string(&CacheRecord::from_disclosed(i, predictor_id, &d))?;
        writeln!(out, "{line}").map_err(io_at(path))?;
    }
    out.flush().map_err(io_at(path))?;
    Ok(features.rows())
}

pub fn read_cache(path: &Path) -> Result<Vec<CacheRecord>> {
    let file = File::open(path).map_err(io_at(path))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_at(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// A predictor that answers from a cache by sample id.
#[derive(Debug, Clone)]
pub struct CachedPredictor {
    id: String,
    num_classes: usize,
    input_dim: usize,
    answers: HashMap<usize, Disclosed>,
}

impl CachedPredictor {
    /// `input_dim` is the feature width of the target set the cache covers.
    pub fn from_records(records: &[CacheRecord], input_dim: usize) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::Protocol("empty prediction cache".into()))?;
        let mut answers = HashMap::with_capacity(records.len());
        for rec in records {
            if rec.num_classes != first.num_classes || rec.predictor_id != first.predictor_id {
                return Err(Error::Protocol("cache mixes predictors or class counts".into()));
            }
            if answers.insert(rec.sample_id, rec.to_disclosed()?).is_some() {
                return Err(Error::Protocol(format!("duplicate sample id {}", rec.sample_id)));
            }
        }
        Ok(CachedPredictor {
            id: first.predictor_id.clone(),
            num_classes: first.num_classes,
            input_dim,
            answers,
        })
    }

    pub fn open(path: &Path, input_dim: usize) -> Result<Self> {
        Self::from_records(&read_cache(path)?, input_dim)
    }

    pub fn predictor_id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}

impl Predictor for CachedPredictor {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn predict(&self, query: Query<'_>) -> dine_core::Result<Disclosed> {
        self.answers
            .get(&query.id)
            .cloned()
            .ok_or(dine_core::Error::Lookup(query.id))
    }
}
