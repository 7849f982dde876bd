//! Toolkit for injecting backdoors into self-supervised image encoders,
//! mitigating them with teacher/student distillation, and scoring the
//! result with ACC, ASR, and the balanced score BS.

pub mod artifact;
pub mod attack;
pub mod bench;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod evaluate;
pub mod nn;
pub mod pretrain;
pub mod seed;
pub mod teacher;
pub mod types;

pub use error::{Error, Result};
