use thiserror::Error;

/// Errors raised by model construction, simulation and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("scenario failed validation with {} violation(s): {}", .0.len(), summarize(.0))]
    Validation(Vec<crate::scenario::Violation>),

    #[error("numerical blow-up at t = {t} s in DGU {dgu}: {detail}")]
    NumericalAbort { t: f64, dgu: u32, detail: String },

    #[error("simulation fault: {0}")]
    Simulation(String),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn summarize(v: &[crate::scenario::Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
