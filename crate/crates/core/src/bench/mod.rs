//! Evaluation: mIoU, the weight and activation analyses, the ablation
//! harness and per-class-set gains.

pub mod ablation;
pub mod analysis;
pub mod gains;
pub mod metrics;
pub mod stats;

pub use ablation::{
    ablation_csv, evaluate, median, median_miou, pseudo_masks, run_ablation, world_for_seed,
    AblationRow, Inference, Setting, Toggles,
};
pub use analysis::{
    activation_report, decompose_weights, ActivationReport, AreaFractions, ClassDecomposition,
    WeightDecomposition,
};
pub use gains::{class_set_gains, ClassSetGains};
pub use metrics::{miou, IoUReport};
pub use stats::chi_square_uniform;
