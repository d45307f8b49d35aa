//! Differentiation engine: MLPs with exact JVP/VJP, a reverse-mode tape that
//! can differentiate through recorded tangent passes, and Adam.

mod adam;
pub mod graph;
mod mlp;

pub use adam::AdamState;
pub use graph::{ChartRows, Gradients, Graph, Var};
pub use mlp::{Activation, Mlp, MlpGrads, MlpTrace, MlpVars, MAX_JACOBIAN_ENTRIES};
