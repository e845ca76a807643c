//! Process exit codes.

use fcpbc::Error;

pub const OK: i32 = 0;
pub const CONFIG: i32 = 2;
pub const BLOWUP: i32 = 3;
pub const NO_ROOT: i32 = 4;
pub const INFEASIBLE: i32 = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(CONFIG, message)
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        Self::new(CONFIG, format!("{}: {e}", path.display()))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NumericalBlowup { .. } => BLOWUP,
            Error::NoRoot { .. } => NO_ROOT,
            Error::InfeasibleInput { .. } => INFEASIBLE,
            _ => CONFIG,
        };
        CliError::new(code, e.to_string())
    }
}
