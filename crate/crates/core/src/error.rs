use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Fuel-cell voltage outside `[0, E_oc]` (or an interval outside it).
    #[error("fuel-cell voltage {v_fc} V outside the polarization domain [0, {e_oc}] V")]
    Domain { v_fc: f64, e_oc: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("equilibrium polynomial has no positive root (min p = {min_value:.6e})")]
    NoRoot { min_value: f64 },

    #[error("equilibrium input u* = {u_star} is not realizable (x2* = {x2_star} A)")]
    InfeasibleInput { u_star: f64, x2_star: f64 },

    #[error("non-finite state at t = {t} s")]
    NumericalBlowup { t: f64 },

    #[error("no epsilon on the search grid satisfies both certificate conditions")]
    NoCertificate,

    #[error("insufficient excitation: {0}")]
    InsufficientExcitation(String),

    #[error("trace format: {0}")]
    TraceFormat(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::TraceFormat(e.to_string())
    }
}
