//! Optimization: Adam, the stepped learning-rate schedule, early stopping,
//! the epoch loop, and the cross-validation driver.

mod cv;
mod dataset;
mod early;
mod fit;
mod optim;

pub use cv::{cross_validate, CvReport, FoldReport, CV_CSV_HEADER};
pub use dataset::{Dataset, Sample};
pub use early::{early_stop_check, EarlyStop};
pub use fit::{
    evaluate, train, train_with_progress, write_loss_csv, EpochRecord, EvalResult, StopReason, TrainConfig,
    TrainedModel, LOSS_CSV_HEADER,
};
pub use optim::{adam_step, adam_update, lr_at, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
