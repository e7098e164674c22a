use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gaussian::Gaussian1D;
use super::gmm::{select_components, BicRow, EmConfig, Gmm2D};
use crate::error::{Error, Result};
use crate::geometry::{geometric_features, offset, BoundingBox, ClassLabel, GeometricFeatures, Joint, Pose};
use crate::seed;

/// Number of joints kept per class.
pub const SELECTED_JOINTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub seed: u64,
    pub m_max: usize,
    pub restarts: usize,
    pub variance_floor: f64,
    pub min_class_samples: usize,
    pub em: EmConfig,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            m_max: 5,
            restarts: 5,
            variance_floor: 1e-4,
            min_class_samples: 4,
            em: EmConfig::default(),
        }
    }
}

/// The BIC-selected offset mixture for one joint of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPriorCandidate {
    pub joint: Joint,
    pub gmm: Gmm2D,
    /// Total log-likelihood of the training offsets under `gmm`.
    pub train_log_likelihood: f64,
    pub bic: f64,
    pub samples: usize,
    pub bic_table: Vec<BicRow>,
    pub removed_components: usize,
}

impl JointPriorCandidate {
    pub fn mean_train_log_density(&self) -> f64 {
        self.train_log_likelihood / self.samples as f64
    }
}

/// Picks the joints whose mixtures explain their offsets best: highest total
/// training log-likelihood first, lower joint index on ties. Returns fewer than
/// two joints only when fewer candidates exist.
pub fn select_joints(candidates: &[JointPriorCandidate]) -> Result<Vec<Joint>> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let mut order: Vec<&JointPriorCandidate> = candidates.iter().collect();
    order.sort_by(|a, b| {
        b.train_log_likelihood
            .total_cmp(&a.train_log_likelihood)
            .then(a.joint.cmp(&b.joint))
    });
    Ok(order.iter().take(SELECTED_JOINTS).map(|c| c.joint).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPrior {
    pub joint: Joint,
    pub gmm: Gmm2D,
    /// Average training log-density; substituted when the joint is missing.
    pub neutral_log_density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorFitMetadata {
    pub samples: usize,
    pub seed: u64,
    /// Set when fewer than two joints had enough data to be ranked.
    pub degenerate_joint_set: bool,
    pub candidates: Vec<CandidateSummary>,
}

/// Per-joint fit record kept for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub joint: Joint,
    pub samples: usize,
    pub components: usize,
    pub train_log_likelihood: f64,
    pub bic: f64,
    pub bic_table: Vec<BicRow>,
}

/// Learned geometric priors for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPriorModel {
    pub class: ClassLabel,
    pub aspect: Gaussian1D,
    pub perimeter: Gaussian1D,
    pub joints: Vec<JointPrior>,
    pub metadata: PriorFitMetadata,
}

impl ClassPriorModel {
    pub fn selected_joints(&self) -> Vec<Joint> {
        self.joints.iter().map(|j| j.joint).collect()
    }
}

/// What to do when a selected joint is not available in the pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingJointPolicy {
    Fail,
    /// Substitute the mixture's average training log-density.
    #[default]
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTerm {
    pub joint: Joint,
    pub log_density: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

/// The individual log factors of the geometric prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorTerms {
    pub log_aspect: f64,
    pub log_perimeter: f64,
    pub joints: Vec<JointTerm>,
}

impl PriorTerms {
    pub fn total(&self) -> f64 {
        self.log_aspect + self.log_perimeter + self.joints.iter().map(|j| j.log_density).sum::<f64>()
    }
}

/// `log p(a|z) + log p(r|z) + sum over selected joints of log GMM_k(center - t_k)`.
pub fn log_prior(
    model: &ClassPriorModel,
    g: &GeometricFeatures,
    pose: Option<&Pose>,
    policy: MissingJointPolicy,
) -> Result<PriorTerms> {
    let joints = model
        .joints
        .iter()
        .map(|jp| match pose.and_then(|p| p.joint(jp.joint)) {
            Some(t) => Ok(JointTerm {
                joint: jp.joint,
                log_density: jp.gmm.log_pdf(offset(g.center(), t)),
                fallback: false,
            }),
            None => match policy {
                MissingJointPolicy::Fail => Err(Error::MissingJoint(jp.joint)),
                MissingJointPolicy::Neutral => Ok(JointTerm {
                    joint: jp.joint,
                    log_density: jp.neutral_log_density,
                    fallback: true,
                }),
            },
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PriorTerms {
        log_aspect: model.aspect.log_pdf(g.a),
        log_perimeter: model.perimeter.log_pdf(g.r),
        joints,
    })
}

/// One annotated training object.
#[derive(Debug, Clone)]
pub struct PriorSample<'a> {
    pub bbox: BoundingBox,
    pub pose: &'a Pose,
    pub class: &'a ClassLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedClass {
    pub class: ClassLabel,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorFitReport {
    pub models: BTreeMap<String, ClassPriorModel>,
    pub skipped: Vec<SkippedClass>,
}

/// Fits aspect and perimeter Gaussians, one BIC-selected offset mixture per
/// joint, and the joint subset, for every class in `classes`. Classes without
/// enough samples are skipped and reported instead of failing the whole fit.
pub fn fit_class_priors(
    classes: &[ClassLabel],
    samples: &[PriorSample<'_>],
    cfg: &PriorConfig,
) -> Result<PriorFitReport> {
    let results: Vec<(ClassLabel, Result<ClassPriorModel>)> = classes
        .par_iter()
        .map(|class| {
            let mine: Vec<&PriorSample> = samples.iter().filter(|s| s.class == class).collect();
            (class.clone(), fit_one_class(class, &mine, cfg))
        })
        .collect();

    let mut models = BTreeMap::new();
    let mut skipped = Vec::new();
    for (class, result) in results {
        match result {
            Ok(model) => {
                models.insert(class.name.clone(), model);
            }
            Err(e @ (Error::TooFewSamples { .. } | Error::NoCandidates)) => {
                log::warn!("skipping priors for class `{}`: {e}", class.name);
                skipped.push(SkippedClass { class, reason: e.to_string() });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(PriorFitReport { models, skipped })
}

fn fit_one_class(class: &ClassLabel, samples: &[&PriorSample], cfg: &PriorConfig) -> Result<ClassPriorModel> {
    let needed = cfg.min_class_samples.max(2);
    if samples.len() < needed {
        return Err(Error::TooFewSamples { needed, got: samples.len() });
    }
    let features: Vec<GeometricFeatures> = samples.iter().map(|s| geometric_features(&s.bbox)).collect();
    let aspect = Gaussian1D::fit(&features.iter().map(|g| g.a).collect::<Vec<_>>(), cfg.variance_floor)?;
    let perimeter = Gaussian1D::fit(&features.iter().map(|g| g.r).collect::<Vec<_>>(), cfg.variance_floor)?;

    let class_seed = seed::derive(cfg.seed, &[class.id as u64]);
    let candidates: Vec<JointPriorCandidate> = Joint::ALL
        .par_iter()
        .map(|&joint| -> Result<Option<JointPriorCandidate>> {
            let offsets: Vec<[f64; 2]> = samples
                .iter()
                .zip(&features)
                .filter_map(|(s, g)| s.pose.joint(joint).map(|t| offset(g.center(), t)))
                .collect();
            if offsets.len() < 4 {
                return Ok(None);
            }
            let joint_seed = seed::derive(class_seed, &[joint.index() as u64]);
            let sel = select_components(&offsets, cfg.m_max, cfg.restarts, joint_seed, &cfg.em)?;
            Ok(Some(JointPriorCandidate {
                joint,
                train_log_likelihood: sel.fit.log_likelihood,
                bic: sel.bic,
                samples: offsets.len(),
                removed_components: sel.fit.removed_components,
                gmm: sel.fit.gmm,
                bic_table: sel.table,
            }))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let chosen = select_joints(&candidates)?;
    if chosen.len() < SELECTED_JOINTS {
        log::warn!("class `{}`: only {} joint(s) usable for the center prior", class.name, chosen.len());
    }
    let joints = chosen
        .iter()
        .map(|j| {
            let c = candidates.iter().find(|c| c.joint == *j).expect("selected from candidates");
            JointPrior { joint: c.joint, gmm: c.gmm.clone(), neutral_log_density: c.mean_train_log_density() }
        })
        .collect();

    Ok(ClassPriorModel {
        class: class.clone(),
        aspect,
        perimeter,
        joints,
        metadata: PriorFitMetadata {
            samples: samples.len(),
            seed: class_seed,
            degenerate_joint_set: chosen.len() < SELECTED_JOINTS,
            candidates: candidates
                .into_iter()
                .map(|c| CandidateSummary {
                    joint: c.joint,
                    samples: c.samples,
                    components: c.gmm.component_count(),
                    train_log_likelihood: c.train_log_likelihood,
                    bic: c.bic,
                    bic_table: c.bic_table,
                })
                .collect(),
        },
    })
}
