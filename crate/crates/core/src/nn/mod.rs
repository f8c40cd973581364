//! From-scratch dense networks: forward and backward passes, softmax losses,
//! SGD and damped Newton updates.

mod loss;
mod matrix;
mod model;
mod optim;

pub use loss::{cross_entropy_loss, kl_divergence, log_softmax_rows, softmax_rows, LossOutput};
pub use matrix::DenseMatrix;
pub use model::{Activation, DenseLayer, ForwardCache, GradientSet, LayerGradient, MlpModel};
pub use optim::{
    finite_diff_grad, finite_diff_hessian, newton_step, sgd_step, NewtonStep, DEFAULT_DAMPING,
    HESSIAN_FD_STEP, MAX_NEWTON_PARAMS,
};
