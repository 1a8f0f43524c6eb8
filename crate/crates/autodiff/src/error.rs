use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows of unequal length")]
    Ragged,
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("leaf `{0}` is not bound")]
    Unbound(String),
    #[error("bound tensor for `{name}` has shape {got:?}, graph declares {expected:?}")]
    BindingShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("leaf `{name}` redeclared with shape {got:?} (was {expected:?})")]
    Redeclared {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward requires a scalar output, node {node} has shape {shape:?}")]
    NonScalarOutput { node: usize, shape: Vec<usize> },
    #[error("primitive {0} has no registered derivative")]
    NoDerivative(&'static str),
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("finite-difference epsilon {0} outside (0, 1e-2]")]
    Epsilon(f64),
}

pub type Result<T> = std::result::Result<T, GraphError>;
