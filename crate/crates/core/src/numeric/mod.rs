//! Dense linear algebra with explicit forward/backward passes, optimizers,
//! the finite-difference oracle and the checkpoint container.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_diff_check, relative_error, GradCheckOptions, GradCheckReport};
pub use optim::{sgd_step, OptimizerKind, OptimizerState};
pub use params::{Gradients, Param, ParamId, ParamSet};
pub use tensor::{
    activation, affine_backward, affine_forward, Activated, Activation, AffineGrads, Scalar, Tensor,
};
