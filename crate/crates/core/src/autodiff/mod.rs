//! Reverse-mode differentiation over small dense matrices.
//!
//! Gradients are built as new graph nodes, so a gradient graph can be
//! differentiated again (needed for second-order meta-gradients).

mod graph;
mod params;
mod tensor;

pub use graph::{Bindings, Graph, Var};
pub use params::ParamVector;
pub use tensor::Tensor;

pub(crate) use graph::softplus;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutodiffError {
    #[error("input `{0}` is not bound")]
    Unbound(String),
    #[error("node {0} is not an input and cannot be bound")]
    NotAnInput(usize),
    #[error("input `{name}` bound with shape {got:?}, expected {expected:?}")]
    BindingShape {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("gradient root must be 1x1, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
}

/// Evaluates `d root / d wrt` at the given bindings.
pub fn gradient(
    graph: &mut Graph,
    root: Var,
    wrt: &[Var],
    bindings: &Bindings<'_>,
) -> Result<ParamVector, AutodiffError> {
    let grads = graph.grad(root, wrt)?;
    let values = graph.evaluate(bindings, &grads)?;
    Ok(ParamVector::from_tensors(&values))
}
