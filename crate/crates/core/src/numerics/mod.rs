//! Dense tensors, reverse-mode differentiation, initialization, Adam and
//! the finite-difference gradient verifier.

mod adam;
mod gradcheck;
mod graph;
mod params;
mod rng;
mod tensor;

pub use adam::{clip_global_norm, AdamState};
pub use gradcheck::{check_params, finite_difference_check, GradCheckReport};
pub use graph::{dropout, Gradients, Graph, Var};
pub(crate) use graph::{log_softmax, softmax_in_place};
pub use params::{init_uniform, Bound, Param, ParamId, ParamSet};
pub use rng::{Rng, RngState};
pub use tensor::Tensor;
