//! Dense-tensor network kernel: candidate operations with analytic
//! backward rules, softmax cross-entropy, optimizers and the learning-rate
//! schedule.

mod kernels;
pub mod loss;
pub mod ops;
pub mod optim;
pub mod params;
pub mod schedule;

pub use loss::{argmax, cross_entropy, softmax};
pub use ops::{op_backward, op_backward_input, op_forward, Cache, OpKind};
pub use optim::{adam_step, clip_grad_norm, sgd_momentum_step, AdamState, SgdState};
pub use params::{ParamSet, ParamSlot};
pub use schedule::cosine_lr;
