//! Q-network agent.

pub mod dqn;
pub mod mlp;
pub mod optim;
pub mod replay;

pub use dqn::{
    epsilon, evaluate, evaluate_policy, select_action, td_target, td_targets, Checkpoint, DqnConfig, Evaluation,
    Greedy, Trainer, TrainingCurve, UpdateMode,
};
pub use mlp::{argmax, Loss, Mlp, Sample};
pub use optim::{Optimizer, OptimizerKind};
pub use replay::{ReplayBuffer, ReplayEntry, StoredBranch};
