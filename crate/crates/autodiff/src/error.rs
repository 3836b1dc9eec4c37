use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TapeError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value at node {node} ({op}{})", name.as_deref().map(|n| format!(" `{n}`")).unwrap_or_default())]
    NonFinite {
        node: usize,
        op: &'static str,
        name: Option<String>,
    },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward called before forward designated a loss")]
    NotEvaluated,
}
