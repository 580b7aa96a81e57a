//! Scalar abstraction for the closed-form layer.
use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};

pub trait Real: Float + FromPrimitive + Debug + Send + Sync + 'static {
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl<T> Real for T where T: Float + FromPrimitive + Debug + Send + Sync + 'static {}
