//! Cross-entropy training with the learning-rate and scheduled-sampling
//! schedules, and self-critical fine-tuning on CIDEr-D.

mod ablation;
mod log;
mod schedule;
mod train;

pub use ablation::{run_ablation, run_cell, test_cider, thread_budget, AblationRun, AblationSpec, AblationTable};
pub use log::{EpochRecord, TrainingLog, LOG_HEADER};
pub use schedule::{lr_at, ss_probability, TrainConfig};
pub use train::{
    finetune_rl, split_cider, teacher_forced_xe, train_xe, training_cider, BatchStats, EpochStats, RlStats,
    TrainData, TrainOutcome, Trainer,
};
