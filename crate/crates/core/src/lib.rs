//! Deterministic neural-network training laboratory for adversarial dropout
//! regularization: dense-tensor reverse-mode autodiff with a finite-difference
//! oracle, an MLP kit, synthetic 2-D benchmarks, the three-step adversarial
//! adaptation procedure with its entropy baseline, and twin-dropout
//! semi-supervised GAN training.

pub mod adr;
pub mod checkpoint;
pub mod datasets;
mod error;
pub mod ganssl;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{GradMap, NodeId, Tape};
pub use tensor::Tensor;
