//! Dense `f32` tensors and a reverse-mode differentiation tape.
//!
//! Everything the encoder and the loss heads need is an operation on
//! [`Graph`]; there is no broadcasting beyond [`Graph::add_row`].

mod archive;
mod gemm;
mod gradcheck;
mod graph;
mod params;
pub mod reference;
mod tensor;

pub use archive::{blob_path, manifest_path, read_tensors, write_tensors};
pub use gradcheck::{
    grad_check, probe_weights, reference_weighted_sum, relative_error, weighted_sum,
    GradCheckReport, FD_STEP, REL_FLOOR,
};
pub use graph::{Gradients, Graph, Span, Var};
pub use params::{ParamGrads, ParamStore};
pub use tensor::Tensor;
pub(crate) use tensor::standard_normal;

/// Layer-norm epsilon used throughout the encoder.
pub const LAYER_NORM_EPS: f32 = 1e-12;
