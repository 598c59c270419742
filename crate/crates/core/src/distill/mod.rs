//! Distillation of a quadratic-attention teacher into SEA attention.

pub mod losses;
pub mod toy;
pub mod train;

pub use losses::{LossBreakdown, LossWeights};
pub use toy::{load_pair, save_pair, ToyConfig, ToyStudent, ToyTeacher};
pub use train::{end_to_end_gradient_error, pretrain_teacher, train_toy, Optimizer, PretrainConfig, TrainConfig, TrainLog};
