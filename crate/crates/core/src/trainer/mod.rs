//! Tube-residual loss, curriculum sampling and the training loop.

mod config;
mod loss;
mod train;

pub use config::{Preset, TrainConfig, CONFIG_KEYS};
pub use loss::{
    compute_loss, sample_batch, vi_residual, vi_residuals, CurriculumState, LossBreakdown, LossEvaluation,
    SampleBatch,
};
pub use train::{
    completed_run, files, train, train_with, write_loss_header, write_loss_record, TrainResult, Trainer,
    LOSS_CSV_HEADER,
};

#[cfg(test)]
mod tests;
