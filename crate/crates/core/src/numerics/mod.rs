//! Dense tensors, a reverse-mode tape, parameter storage and gradient checks.

mod dd;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{
    autodiff_grad, evaluate, finite_diff_grad, finite_diff_grad_in, grad_check, relative_error, CoordSelection,
    GradCheckOptions, GradCheckReport, ParamCheck,
};
pub use graph::{CustomBackward, Graph, NodeId};
pub use params::{ParamTree, Parameter};
pub use tensor::{Precision, Tensor};
