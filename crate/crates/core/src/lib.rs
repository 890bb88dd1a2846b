//! Grant-free NORA link-level simulation: LDS pilot construction, message
//! passing estimation of user activity and channels, a deep-unfolded weighted
//! variant with hand-rolled gradients, and reference baselines.

pub mod baselines;
mod bytes;
pub mod config;
pub mod error;
pub mod metrics;
pub mod mpbsbl;
pub mod pilots;
pub mod scenario;
pub mod training;
pub mod unfolded;

pub use config::{DerivedDims, SystemConfig};
pub use error::{Error, Result};

/// Complex sample type used throughout.
pub type C64 = num_complex::Complex64;
