use thiserror::Error;

use crate::lsem::Violation;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {}", join(.0))]
    InvalidSpec(Vec<Violation>),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("{what} is singular (condition number {condition:.3e})")]
    Singular { what: &'static str, condition: f64 },

    #[error("bias pole: denominator {denominator:.3e} is within tolerance of zero")]
    Pole { denominator: f64 },

    #[error("corrupted moments: {0}")]
    CorruptedMoments(String),

    #[error("{active} active logistic directions exceed the quadrature limit of 3; use the Monte Carlo path")]
    TooManyDirections { active: usize },

    #[error("quadrature order {order} too low: {detail}")]
    QuadratureOrder { order: usize, detail: String },

    #[error("identification failure: instrument-feature cross-moments have condition number {condition:.3e}")]
    Identification { condition: f64 },

    #[error("treatment arm {arm} has no observations")]
    EmptyArm { arm: u8 },

    #[error("no {0} bridge: coefficient is zero")]
    NoBridge(&'static str),

    #[error("degenerate comparison: {0}")]
    Degenerate(String),

    #[error("bad parameter path `{0}`")]
    ParamPath(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn join(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

pub type Result<T> = std::result::Result<T, Error>;
