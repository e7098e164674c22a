//! Linear appearance classifiers on externally computed features, calibrated
//! into probabilities by a per-class sigmoid slope.

mod calibration;
pub mod features;
pub mod patches;
pub mod svm;

pub use calibration::{
    appearance_posterior, calibrate_lambda, default_c_grid, default_lambda_grid, log_appearance_posterior,
    log_sigmoid, select_lambda, sigmoid, AppearanceMetadata, AppearanceModel, LambdaChoice,
};
pub use features::FeatureMatrix;
pub use patches::{
    enlarge_box, label_patches, Patch, PatchCounts, PatchImage, PatchLabelSet, PatchSource, DEFAULT_ENLARGEMENT,
};
pub use svm::{train_svm, LinearSvm, SvmConfig, SvmFit, TrainingSet};
