//! Few-shot modulation recognition with dynamic-consistency contrastive pre-training.

pub mod augment;
pub mod backbone;
pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod fewshot;
pub mod fft;
pub mod fixtures;
pub mod fusion;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod priors;
mod io;
pub mod rng;
pub mod signal;
pub mod theory;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
