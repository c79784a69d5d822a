use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Failures raised by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not chain for `op`.
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A matrix was requested with a zero dimension.
    EmptyMatrix { rows: usize, cols: usize },
    /// Backing buffer length disagrees with the declared shape.
    DataLength { expected: usize, actual: usize },
    /// A row with zero norm reached an operation that divides by the norm.
    DegenerateRow { op: &'static str, row: usize },
    /// A class does not have enough training examples for the requested shot count.
    InsufficientSamples {
        class: usize,
        available: usize,
        requested: usize,
    },
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    /// A class never appears in the training labels.
    MissingClass { class: usize },
    InvalidConfig(String),
    /// Training produced a non-finite loss or an exploding parameter.
    Divergence {
        epoch: usize,
        step: usize,
        reason: &'static str,
    },
    NonFinite { op: &'static str },
    EmptyInput { what: &'static str },
    ClassCountMismatch { expected: usize, found: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => write!(
                f,
                "shape mismatch in {op}: {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::EmptyMatrix { rows, cols } => {
                write!(f, "matrix dimensions must be non-zero, got {rows}x{cols}")
            }
            Error::DataLength { expected, actual } => {
                write!(f, "matrix data length {actual} does not match shape ({expected})")
            }
            Error::DegenerateRow { op, row } => {
                write!(f, "degenerate input in {op}: row {row} has zero norm")
            }
            Error::InsufficientSamples {
                class,
                available,
                requested,
            } => write!(
                f,
                "class {class} has {available} training examples, {requested} requested"
            ),
            Error::LabelOutOfRange {
                index,
                label,
                num_classes,
            } => write!(
                f,
                "label {label} at position {index} is out of range for {num_classes} classes"
            ),
            Error::MissingClass { class } => {
                write!(f, "class {class} has no training examples")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Divergence {
                epoch,
                step,
                reason,
            } => write!(f, "training diverged at epoch {epoch}, step {step}: {reason}"),
            Error::NonFinite { op } => write!(f, "non-finite value in {op}"),
            Error::EmptyInput { what } => write!(f, "empty input: {what}"),
            Error::ClassCountMismatch { expected, found } => {
                write!(f, "class count mismatch: expected {expected}, found {found}")
            }
        }
    }
}

impl core::error::Error for Error {}
