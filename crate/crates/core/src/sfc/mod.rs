//! Shared feature calibration: distribution coefficients, image-bank
//! re-sampling, the two distribution-weighted consistency losses and the
//! training loop that combines them with the classification loss.

pub mod bank;
pub mod config;
pub mod dc;
pub mod losses;
pub mod train;

pub use bank::{bank_sample, bank_update, ImageBank};
pub use config::{ExperimentConfig, TrainConfig};
pub use dc::{dc_coefficients, estimate_n, DCVector};
pub use losses::{
    dw_p_loss, dw_p_stack_loss, dw_p_terms, dw_w_loss, dw_w_terms, msdw_terms, msdw_total,
    LossBreakdown, PreparedScene, SmallView, StackLoss,
};
pub use train::{dataset_dc, train, train_from, EpochRecord, TrainingLog};
