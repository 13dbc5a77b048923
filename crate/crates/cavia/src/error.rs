//! Crate-wide error type.

use std::fmt;

/// Errors produced by graph construction, model evaluation, training loops
/// and file formats.
#[derive(Debug)]
pub enum CaviaError {
    /// Incompatible tensor shapes for an operation; carries both shapes.
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Axis argument out of range for the operand's rank.
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    /// An operation produced a NaN or infinity from finite inputs.
    NonFinite { op: &'static str },
    /// Input outside the operation's documented domain (labels, pixel budgets, ...).
    Domain(String),
    /// API contract violated (non-scalar loss, mixed graphs, empty trajectory, ...).
    Contract(String),
    /// Training diverged; carries the iteration at which it was detected.
    Divergence { iteration: usize, detail: String },
    /// Invalid run or suite configuration.
    Config(String),
    /// Checkpoint or task file failed to load.
    Load(String),
    Io(std::io::Error),
}

impl fmt::Display for CaviaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dimension { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Self::InvalidAxis { op, axis, shape } => {
                write!(f, "{op}: axis {axis} out of range for shape {shape:?}")
            }
            Self::NonFinite { op } => write!(f, "{op}: non-finite result"),
            Self::Domain(msg) => write!(f, "domain error: {msg}"),
            Self::Contract(msg) => write!(f, "contract violation: {msg}"),
            Self::Divergence { iteration, detail } => {
                write!(f, "divergence at iteration {iteration}: {detail}")
            }
            Self::Config(msg) => write!(f, "configuration error: {msg}"),
            Self::Load(msg) => write!(f, "load error: {msg}"),
            Self::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for CaviaError {}

impl From<std::io::Error> for CaviaError {
    fn from(err: std::io::Error) -> Self {
        Self::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, CaviaError>;
