//! Soft actor-critic with twin critics and the CompFlow training loop:
//! gap-filtered offline minibatches, gap-shaped rewards and a normalized
//! behavior-cloning term on the actor.

mod buffer;
mod sac;
mod trainer;

pub use buffer::ReplayBuffer;
pub use sac::{
    bc_weight, bellman_target, optimistic_argmax, ActionMode, Actor, ActorLoss, ActorStats, Agent, AgentConfig,
    CriticBatch,
};
pub use trainer::{
    evaluate, run_compflow, FilterLog, Method, MetricsRecord, OfflineBatchRecord, Trainer, TrainerConfig, KEPT_TAIL,
};
