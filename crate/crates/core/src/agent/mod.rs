//! TD3 agent, replay with experience review, and the training loop.

mod epsilon;
mod replay;
mod td3;
mod train;

pub use epsilon::{compute_epsilon, EpsilonTracker};
pub use replay::{review_sample, Batch, ReplayBuffer, ReviewDraw, Transition};
pub use td3::{td3_critic_target, HeadBank, HeadSlot, Losses, Td3Agent, Td3Params};
pub use train::{
    sparse_density, train, train_at_precision, Checkpoint, RunResult, RunSummary, StepInfo, TaskBlock, TrainError, Trainer, CHECKPOINT_FILE, CHECKPOINT_VERSION,
    EVENTS_FILE,
};
