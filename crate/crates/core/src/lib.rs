//! Random layer sampling ensembles: a small reverse-mode autodiff engine,
//! sub-model banks with per-layer sampling, diversity-regularized training
//! and gradient-based attacks.

// `!(a < b)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod autodiff;
pub mod bank;
pub mod checkpoint;
pub mod data;
pub mod diversity;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod linalg;
pub mod tensor;
pub mod train;

pub use attack::{AttackConfig, AttackKind, ThreatModel};
pub use autodiff::{Gradients, Tape, Var};
pub use bank::{DefendedPrediction, SamplingMask, SubModelBank};
pub use data::Dataset;
pub use error::{Error, Result};
pub use layers::{Architecture, LayerSpec, ParamSet};
pub use tensor::Tensor;
pub use train::{TrainConfig, TrainRngs};
