//! Numerical core for black-box domain adaptation: distill opaque source
//! predictions into a self-defined target network, then fine-tune it by
//! mutual-information maximisation.
//!
//! The crate is `no_std` (it needs `alloc`). Everything that touches files,
//! sockets or the command line lives in the companion `dine` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod bank;
pub mod distill;
pub mod error;
pub mod finetune;
pub mod losses;
pub mod math;
pub mod models;
pub mod nn;
pub mod optim;
pub mod predictor;
pub mod scenario;
pub mod tape;
pub mod tensor;
pub mod training;

pub use crate::error::{Error, Result};
pub use crate::tape::{grad_check, grad_check_many, Grads, Tape, Var};
pub use crate::tensor::Tensor;
