//! Dense `f64` tensors, forward kernels with analytic backward passes, and a
//! finite-difference gradient checker.

pub mod activation;
pub mod attention;
pub mod backend;
pub mod conv;
pub mod eval;
pub mod gradcheck;
pub mod linalg;
pub mod mask;
pub mod norm;
pub mod opcheck;
pub mod param;
pub mod tape;
pub mod tensor;

pub use activation::Activation;
pub use attention::{softmax_masked, AttentionSpec};
pub use backend::{Backend, FeedForwardParams};
pub use eval::Eval;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use mask::ValidMask;
pub use norm::{RunningStats, StatsMode, NORM_EPS};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
