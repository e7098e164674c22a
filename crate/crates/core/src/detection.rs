//! Per-proposal scoring in log space and greedy per-class non-maximum
//! suppression.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::appearance::{log_appearance_posterior, AppearanceModel, FeatureMatrix};
use crate::error::{Error, Result};
use crate::geometry::{geometric_features, iou, BoundingBox, ClassLabel, Pose, Proposal};
use crate::priors::{log_prior, ClassPriorModel, JointTerm, MissingJointPolicy};

/// Which factors enter the score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    /// Appearance only.
    NoGeometric,
    /// Geometric prior only.
    NoAppearance,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::NoGeometric, Ablation::NoAppearance];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoGeometric => "no-geometric",
            Ablation::NoAppearance => "no-appearance",
        }
    }

    pub fn uses_appearance(self) -> bool {
        self != Ablation::NoAppearance
    }

    pub fn uses_geometry(self) -> bool {
        self != Ablation::NoGeometric
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s || a.name().replace('-', "_") == s)
            .ok_or_else(|| Error::validation(format!("unknown ablation {s:?}; expected full, no-geometric or no-appearance")))
    }
}

/// The log factors that make up a score. Disabled factors are absent.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreComponents {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_appearance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_aspect: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_perimeter: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub joints: Vec<JointTerm>,
}

impl ScoreComponents {
    pub fn total(&self) -> f64 {
        self.log_appearance.unwrap_or(0.0)
            + self.log_aspect.unwrap_or(0.0)
            + self.log_perimeter.unwrap_or(0.0)
            + self.joints.iter().map(|j| j.log_density).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalScore {
    pub proposal_id: u64,
    pub class: ClassLabel,
    /// Unnormalized log posterior; comparable only within a class.
    pub log_score: f64,
    pub components: ScoreComponents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub class: ClassLabel,
    pub bbox: BoundingBox,
    pub proposal_id: u64,
    pub log_score: f64,
    pub components: ScoreComponents,
}

/// Scores one proposal for one class.
///
/// Models are only required for the factors the ablation enables, and the
/// features are ignored when appearance is disabled.
#[allow(clippy::too_many_arguments)]
pub fn score_proposal(
    proposal: &Proposal,
    features: &[f32],
    pose: Option<&Pose>,
    class: &ClassLabel,
    prior: Option<&ClassPriorModel>,
    appearance: Option<&AppearanceModel>,
    ablation: Ablation,
    policy: MissingJointPolicy,
) -> Result<ProposalScore> {
    let mut components = ScoreComponents::default();
    if ablation.uses_appearance() {
        let app = appearance.ok_or_else(|| missing("appearance", class))?;
        components.log_appearance = Some(log_appearance_posterior(app, features)?);
    }
    if ablation.uses_geometry() {
        let prior = prior.ok_or_else(|| missing("prior", class))?;
        let terms = log_prior(prior, &geometric_features(&proposal.bbox), pose, policy)?;
        components.log_aspect = Some(terms.log_aspect);
        components.log_perimeter = Some(terms.log_perimeter);
        components.joints = terms.joints;
    }
    let log_score = components.total();
    if log_score.is_nan() {
        return Err(Error::Numerical(format!("NaN score for proposal {} class {class}", proposal.id)));
    }
    Ok(ProposalScore { proposal_id: proposal.id, class: class.clone(), log_score, components })
}

fn missing(kind: &'static str, class: &ClassLabel) -> Error {
    Error::MissingModel { kind, class: class.name.clone() }
}

/// Score descending, then proposal id ascending.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.log_score.total_cmp(&a.log_score).then(a.proposal_id.cmp(&b.proposal_id))
}

/// Greedy non-maximum suppression within one class of one image.
///
/// Repeatedly keeps the best remaining detection and drops every remaining
/// one overlapping it by IoU strictly above `iou_threshold`. Output is in
/// rank order.
pub fn nms(mut detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    detections.sort_by(rank_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(detections.len());
    for d in detections {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub nms_iou: f64,
    /// Scores below this are dropped before suppression. `None` keeps all.
    pub score_floor: Option<f64>,
    pub ablation: Ablation,
    pub missing_joint: MissingJointPolicy,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { nms_iou: 0.5, score_floor: None, ablation: Ablation::Full, missing_joint: MissingJointPolicy::Neutral }
    }
}

/// Models for the configured classes, keyed by class name.
#[derive(Debug, Clone, Copy)]
pub struct ModelSet<'a> {
    pub classes: &'a [ClassLabel],
    pub priors: &'a BTreeMap<String, ClassPriorModel>,
    pub appearance: &'a BTreeMap<String, AppearanceModel>,
}

/// One image's detector inputs. Row `i` of `features` belongs to `proposals[i]`;
/// features may be absent when appearance is not scored.
#[derive(Debug, Clone, Copy)]
pub struct ImageInput<'a> {
    pub image_id: &'a str,
    pub proposals: &'a [Proposal],
    pub features: Option<&'a FeatureMatrix>,
    pub pose: Option<&'a Pose>,
}

/// Scores every proposal for every class independently, then suppresses per
/// class. Keys are class names.
pub fn detect_image(
    input: &ImageInput<'_>,
    models: &ModelSet<'_>,
    cfg: &DetectConfig,
) -> Result<BTreeMap<String, Vec<Detection>>> {
    match input.features {
        Some(f) if f.rows() != input.proposals.len() => {
            return Err(Error::Alignment {
                image: input.image_id.to_string(),
                proposals: input.proposals.len(),
                features: f.rows(),
            });
        }
        None if cfg.ablation.uses_appearance() && !input.proposals.is_empty() => {
            return Err(Error::validation(format!("image `{}` has no features to score appearance", input.image_id)));
        }
        _ => {}
    }
    let mut out = BTreeMap::new();
    for class in models.classes {
        let prior = models.priors.get(&class.name);
        let app = models.appearance.get(&class.name);
        if cfg.ablation.uses_geometry() && prior.is_none() {
            return Err(missing("prior", class));
        }
        if cfg.ablation.uses_appearance() && app.is_none() {
            return Err(missing("appearance", class));
        }
        let mut dets = Vec::new();
        for (i, p) in input.proposals.iter().enumerate() {
            let f = input.features.map_or(&[][..], |m| m.row(i));
            let s = score_proposal(p, f, input.pose, class, prior, app, cfg.ablation, cfg.missing_joint)?;
            if cfg.score_floor.is_some_and(|floor| s.log_score < floor) {
                continue;
            }
            dets.push(Detection {
                image_id: input.image_id.to_string(),
                class: class.clone(),
                bbox: p.bbox,
                proposal_id: p.id,
                log_score: s.log_score,
                components: s.components,
            });
        }
        out.insert(class.name.clone(), nms(dets, cfg.nms_iou));
    }
    Ok(out)
}
