use std::fmt;

use acvar_core::{DpError, McError, ModelError, PolicyError, RiccatiError};

/// A failure together with its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable or invalid configuration, bad flags, unwritable output.
    Config(String),
    /// A recursion broke down (LEQR past `γ_c`, LQ game singular, overflow).
    Infeasible(String),
    /// The upper bound did not verify.
    Verification(String),
    /// The request needs a scalar problem.
    Unsupported(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Infeasible(_) => 2,
            CliError::Verification(_) => 3,
            CliError::Unsupported(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, msg) = match self {
            CliError::Config(m) => ("configuration error", m),
            CliError::Infeasible(m) => ("infeasible recursion", m),
            CliError::Verification(m) => ("bound verification failed", m),
            CliError::Unsupported(m) => ("unsupported", m),
        };
        write!(f, "{kind}: {msg}")
    }
}

impl From<RiccatiError> for CliError {
    fn from(e: RiccatiError) -> Self {
        match e {
            RiccatiError::BadParameter { .. } | RiccatiError::DimensionMismatch(_) | RiccatiError::RNotIdentity => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Infeasible(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::CertificateFailed { .. } => CliError::Verification(e.to_string()),
            PolicyError::Conditioning(_) | PolicyError::InnerMatrixNotPD => CliError::Infeasible(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<DpError> for CliError {
    fn from(e: DpError) -> Self {
        match e {
            DpError::Unsupported(_) => CliError::Unsupported(e.to_string()),
            DpError::Riccati(inner) => inner.into(),
            DpError::Policy(inner) => inner.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<McError> for CliError {
    fn from(e: McError) -> Self {
        match e {
            McError::Riccati(inner) => inner.into(),
            McError::Dp(inner) => inner.into(),
            McError::Policy(inner) => inner.into(),
            McError::Model(inner) => inner.into(),
            McError::InfeasibleGamma(_) | McError::NonFiniteCost { .. } => CliError::Infeasible(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}
