//! Cross-validated Mahalanobis distances between activity patterns and the
//! analytical covariance of their sampling distribution.

pub mod crossnobis;
pub mod error;
pub mod folds;
pub mod glm;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod model;
pub mod model_eval;
pub mod pipeline;
pub mod prewhiten;
pub mod simulator;

pub use error::{LdcError, Result};
