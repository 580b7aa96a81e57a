//! Bias of proximal and outcome-regression estimators of the average causal effect
//! when the proxy conditions fail, in a linear structural model with logistic treatment.
pub mod bias;
pub mod bridge;
pub mod completeness;
pub mod draws;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod lsem;
pub mod moments;
pub mod presets;
pub mod quadrature;
pub mod scalar;
pub mod sweep;

pub use error::{Error, Result};
pub use lsem::{Dataset, Dimensions, LsemSpec};
pub use moments::TreatmentMoments;

pub type MomentsF32 = moments::TreatmentMoments<f32>;
pub type MomentsF64 = moments::TreatmentMoments<f64>;
pub type SFactorsF32 = moments::SFactors<f32>;
pub type SFactorsF64 = moments::SFactors<f64>;
