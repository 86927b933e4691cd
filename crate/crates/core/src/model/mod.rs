//! Small decoder-only transformer: autodiff, training, inference, checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod infer;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use checkpoint::{file_sha256, sha256_hex, write_atomic, Checkpoint};
pub use infer::{
    forward, generate, ActivationTrace, Generation, IdentityHook, InferenceSession, TapHook, TapSite,
    TraceRequest,
};
pub use train::{
    answer_budget, classify_all, complete, evaluate_behavior, train_until_dual_behavior, BehaviorCounts,
    DualBehaviorRun, LossReduction, TrainConfig, Trainer,
};
pub use transformer::{Model, ModelConfig, Param, TokenBatch};
