//! Dual uncertainty optimization for test-time adaptation of a monocular 3D
//! detector: the conjugate focal loss, the normal-field consistency loss,
//! multi-head depth fusion, the online adaptation loop, and a small synthetic
//! driving world to exercise them.

pub mod autodiff;
pub mod duot;
pub mod error;
pub mod linalg;
pub mod rng;
pub mod tensor;

pub mod adaptation;
pub mod fusion;
pub mod geometric;
pub mod harness;
pub mod semantic;
pub mod toy;

pub use error::{DuoError, Result};
pub use tensor::Tensor;
