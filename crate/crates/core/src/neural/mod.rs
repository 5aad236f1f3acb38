//! Dense numeric core: tensors, named parameter sets with a binary checkpoint
//! format, the deep averaging network (DAN) with analytic gradients, SGD and
//! finite-difference gradient verification.

mod checkpoint;
mod dan;
mod gradcheck;
mod params;
mod tensor;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dan::{
    bce_loss, dan_backward, dan_forward, init_params, sigmoid, Activation, DanGrads, DanOutput,
    DanParams,
};
pub use gradcheck::{
    grad_check, random_grad_checks, GradCheckReport, GradCheckShape, GRAD_CHECK_ABS_FLOOR,
};
pub use params::{sgd_step, ParamSet};
pub use tensor::Tensor;
