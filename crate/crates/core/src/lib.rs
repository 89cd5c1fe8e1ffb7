//! Joint completion and Tucker decomposition of partially observed dense
//! tensors under learned Mahalanobis-metric constraints.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense storage, unfolding, mode products, HOSVD, text formats.
//! - [`metric`]: tensor Mahalanobis distances and similarity side information.
//! - [`kempf_ness`]: determinant-one coordinate normalization and metric learning.
//! - [`solver`]: the linearized ADMM for the metric-constrained problem.
//! - [`coupled`]: tensor-matrix coupling with a shared factor, plus the simulator.
//! - [`harness`]: fit/RSE metrics, masking and configuration parsing.

pub mod coupled;
pub mod error;
pub mod harness;
pub mod kempf_ness;
pub mod linalg;
pub mod metric;
pub mod solver;
pub mod tensor;

pub use error::{Error, Result};
