//! Minimal CPU neural-network stack: dense tensors, conv/pool/relu/fc layers,
//! softmax cross-entropy, SGD with momentum, checkpoints and gradient checking.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod solver;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, tiny_problem, GradCheckReport};
pub use loss::{softmax, softmax_cross_entropy};
pub use model::{build_alexnet_like, InputSpec, LayerSpec, Model, ModelConfig};
pub use solver::{sgd_step, LrPolicy, SgdState, SolverConfig, SolverType};
pub use tensor::{Scalar, Tensor};
