//! Per-sample teacher store updated by an exponential moving average.

use crate::error::{Error, Result};
use crate::tensor::{check_probability, Tensor};

/// Teacher probability rows, one per target sample, indexed by sample id.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MemoryBank {
    rows: Tensor,
    epoch: usize,
}

impl MemoryBank {
    /// Every row must be a probability vector.
    pub fn new(rows: Tensor) -> Result<Self> {
        if rows.shape().len() != 2 {
            return Err(Error::contract("memory bank rows must form an n x K matrix"));
        }
        for i in 0..rows.rows() {
            check_probability(rows.row(i))?;
        }
        Ok(MemoryBank { rows, epoch: 0 })
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.rows.cols()
    }

    /// Number of EMA updates applied so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Teacher rows for the given sample ids.
    pub fn lookup(&self, ids: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Lookup(bad));
        }
        Ok(self.rows.select_rows(ids))
    }

    /// `row <- gamma * row + (1 - gamma) * fresh` for every sample.
    pub fn ema_update(&mut self, fresh: &Tensor, gamma: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config("EMA momentum must lie in [0, 1]".into()));
        }
        if fresh.shape() != self.rows.shape() {
            return Err(Error::contract(alloc::format!(
                "fresh predictions {:?} do not cover the bank {:?}",
                fresh.shape(),
                self.rows.shape()
            )));
        }
        if gamma < 1.0 {
            for (r, &f) in self.rows.data_mut().iter_mut().zip(fresh.data()) {
                *r = gamma * *r + (1.0 - gamma) * f;
            }
        }
        self.epoch += 1;
        Ok(())
    }
}
