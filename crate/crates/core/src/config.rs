//! Every tunable constant of the pipeline, with defaults.

use serde::{Deserialize, Serialize};

use crate::appearance::{default_c_grid, default_lambda_grid, SvmConfig, DEFAULT_ENLARGEMENT};
use crate::detection::{Ablation, DetectConfig};
use crate::error::{Error, Result};
use crate::priors::{EmConfig, MissingJointPolicy, PriorConfig};
use crate::seed;

// stream tags for seed derivation
const PRIOR_STREAM: u64 = 1;
const SVM_STREAM: u64 = 2;
const SPLIT_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub m_max: usize,
    pub restarts: usize,
    /// Floor on the fitted variance of log aspect ratio and log perimeter.
    pub variance_floor: f64,
    /// Classes with fewer training boxes get no prior.
    pub min_class_samples: usize,
    pub em: EmConfig,
    pub svm_epochs: usize,
    pub c_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    /// Crop enlargement for training patches.
    pub enlargement: f64,
    pub nms_iou: f64,
    pub score_floor: Option<f64>,
    pub ablation: Ablation,
    pub missing_joint: MissingJointPolicy,
    /// Share of the training split held out for validation when the dataset
    /// has no explicit validation split.
    pub validation_fraction: f64,
    /// 0 uses every available core.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let prior = PriorConfig::default();
        let detect = DetectConfig::default();
        Self {
            seed: 0,
            m_max: prior.m_max,
            restarts: prior.restarts,
            variance_floor: prior.variance_floor,
            min_class_samples: prior.min_class_samples,
            em: prior.em,
            svm_epochs: SvmConfig::default().epochs,
            c_grid: default_c_grid(),
            lambda_grid: default_lambda_grid(),
            enlargement: DEFAULT_ENLARGEMENT,
            nms_iou: detect.nms_iou,
            score_floor: detect.score_floor,
            ablation: detect.ablation,
            missing_joint: detect.missing_joint,
            validation_fraction: 0.2,
            workers: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::validation(format!("config: {msg}")));
        if self.m_max == 0 || self.restarts == 0 || self.em.max_iters == 0 || self.svm_epochs == 0 {
            return fail("m_max, restarts, em.max_iters and svm_epochs must be at least 1".into());
        }
        for (name, v) in [
            ("variance_floor", self.variance_floor),
            ("em.em_tol", self.em.em_tol),
            ("em.covariance_floor", self.em.covariance_floor),
            ("em.mass_floor_fraction", self.em.mass_floor_fraction),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, grid) in [("c_grid", &self.c_grid), ("lambda_grid", &self.lambda_grid)] {
            if grid.is_empty() || grid.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return fail(format!("{name} must be a non-empty list of positive numbers"));
            }
        }
        if !(self.enlargement.is_finite() && self.enlargement >= 1.0) {
            return fail(format!("enlargement must be >= 1, got {}", self.enlargement));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return fail(format!("nms_iou must lie in [0, 1], got {}", self.nms_iou));
        }
        if self.score_floor.is_some_and(f64::is_nan) {
            return fail("score_floor is NaN".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return fail(format!("validation_fraction must lie in [0, 1), got {}", self.validation_fraction));
        }
        Ok(())
    }

    pub fn prior_config(&self) -> PriorConfig {
        PriorConfig {
            seed: seed::derive(self.seed, &[PRIOR_STREAM]),
            m_max: self.m_max,
            restarts: self.restarts,
            variance_floor: self.variance_floor,
            min_class_samples: self.min_class_samples,
            em: self.em,
        }
    }

    /// SVM settings for one class and one value of `c`.
    pub fn svm_config(&self, class_id: u32, c_index: usize) -> SvmConfig {
        SvmConfig { epochs: self.svm_epochs, seed: seed::derive(self.seed, &[SVM_STREAM, class_id as u64, c_index as u64]) }
    }

    pub fn split_seed(&self) -> u64 {
        seed::derive(self.seed, &[SPLIT_STREAM])
    }

    pub fn detect_config(&self) -> DetectConfig {
        DetectConfig {
            nms_iou: self.nms_iou,
            score_floor: self.score_floor,
            ablation: self.ablation,
            missing_joint: self.missing_joint,
        }
    }
}
