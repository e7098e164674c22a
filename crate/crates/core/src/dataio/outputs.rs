use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_jsonl, read_versioned, schema, write_atomic, write_jsonl, write_versioned, Split};
use crate::appearance::{AppearanceModel, PatchCounts, PatchLabelSet};
use crate::detection::{Ablation, Detection, ScoreComponents};
use crate::error::{Error, Result};
use crate::evaluation::{PrCurve, ProposalStats};
use crate::geometry::{BoundingBox, ClassLabel};
use crate::priors::{ClassPriorModel, PriorConfig, SkippedClass};

/// JSON schema of the metrics report.
pub const METRICS_SCHEMA_JSON: &str = include_str!("../../schemas/metrics.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorModelFile {
    pub config: PriorConfig,
    pub models: BTreeMap<String, ClassPriorModel>,
    #[serde(default)]
    pub skipped: Vec<SkippedClass>,
}

pub fn write_priors(path: &Path, file: &PriorModelFile) -> Result<()> {
    write_versioned(path, schema::PRIORS, file)
}

pub fn read_priors(path: &Path) -> Result<PriorModelFile> {
    read_versioned(path, schema::PRIORS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearanceModelFile {
    pub dim: usize,
    pub models: BTreeMap<String, AppearanceModel>,
    #[serde(default)]
    pub skipped: Vec<SkippedClass>,
}

pub fn write_appearance_models(path: &Path, file: &AppearanceModelFile) -> Result<()> {
    write_versioned(path, schema::APPEARANCE, file)
}

pub fn read_appearance_models(path: &Path) -> Result<AppearanceModelFile> {
    let file: AppearanceModelFile = read_versioned(path, schema::APPEARANCE)?;
    if let Some(m) = file.models.values().find(|m| m.dim() != file.dim) {
        return Err(Error::format(path, format!("model `{}` has dimension {} not {}", m.class, m.dim(), file.dim)));
    }
    Ok(file)
}

/// Labeled training patches with per-class counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchManifest {
    pub counts: PatchCounts,
    #[serde(flatten)]
    pub patches: PatchLabelSet,
}

pub fn write_patches(path: &Path, set: &PatchLabelSet) -> Result<()> {
    write_versioned(path, schema::PATCHES, &PatchManifest { counts: set.counts(), patches: set.clone() })
}

pub fn read_patches(path: &Path) -> Result<PatchLabelSet> {
    let m: PatchManifest = read_versioned(path, schema::PATCHES)?;
    if m.counts != m.patches.counts() {
        return Err(Error::format(path, "patch counts disagree with the patch lists"));
    }
    Ok(m.patches)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionsHeader {
    pub ablation: Ablation,
    pub split: Split,
    pub count: usize,
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    image_id: String,
    class: String,
    class_id: u32,
    proposal_id: u64,
    #[serde(flatten)]
    bbox: BoundingBox,
    log_score: f64,
    components: ScoreComponents,
}

pub fn write_detections(path: &Path, header: &DetectionsHeader, detections: &[Detection]) -> Result<()> {
    if header.count != detections.len() {
        return Err(Error::validation("detection header count does not match the records"));
    }
    if let Some(d) = detections.iter().find(|d| !d.log_score.is_finite()) {
        return Err(Error::Numerical(format!("non-finite score for proposal {} in `{}`", d.proposal_id, d.image_id)));
    }
    let records: Vec<DetectionRecord> = detections
        .iter()
        .map(|d| DetectionRecord {
            image_id: d.image_id.clone(),
            class: d.class.name.clone(),
            class_id: d.class.id,
            proposal_id: d.proposal_id,
            bbox: d.bbox,
            log_score: d.log_score,
            components: d.components.clone(),
        })
        .collect();
    write_jsonl(path, schema::DETECTIONS, header, &records)
}

pub fn read_detections(path: &Path) -> Result<(DetectionsHeader, Vec<Detection>)> {
    let (header, records): (DetectionsHeader, Vec<DetectionRecord>) = read_jsonl(path, schema::DETECTIONS)?;
    if header.count != records.len() {
        return Err(Error::format(path, format!("header says {} detections, found {}", header.count, records.len())));
    }
    let dets = records
        .into_iter()
        .map(|r| Detection {
            image_id: r.image_id,
            class: ClassLabel::new(r.class_id, r.class),
            bbox: r.bbox,
            proposal_id: r.proposal_id,
            log_score: r.log_score,
            components: r.components,
        })
        .collect();
    Ok((header, dets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// `None` when the class has no ground truth in the split.
    pub ap: Option<f64>,
    pub ground_truth: usize,
    pub detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ablation: Ablation,
    pub split: Split,
    pub map: f64,
    pub classes: BTreeMap<String, ClassMetrics>,
    /// Classes excluded from the mean for lack of ground truth.
    pub undefined: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal_stats: Option<ProposalStats>,
}

pub fn write_metrics(path: &Path, report: &MetricsReport) -> Result<()> {
    write_versioned(path, schema::METRICS, report)
}

pub fn read_metrics(path: &Path) -> Result<MetricsReport> {
    read_versioned(path, schema::METRICS)
}

/// Writes `pr_<class>.csv` per curve into `dir`; returns the paths.
pub fn write_curves_csv(dir: &Path, curves: &[PrCurve]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(curves.len());
    for c in curves {
        let safe: String = c.class.chars().map(|ch| if ch.is_ascii_alphanumeric() || ch == '-' || ch == '_' { ch } else { '_' }).collect();
        let path = dir.join(format!("pr_{safe}.csv"));
        let mut text = String::from("recall,precision,threshold\n");
        for p in &c.points {
            writeln!(text, "{},{},{}", p.recall, p.precision, p.threshold).expect("write to string");
        }
        write_atomic(&path, text.as_bytes())?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalStatsReport {
    pub split: Split,
    #[serde(flatten)]
    pub stats: ProposalStats,
}

pub fn write_proposal_stats(path: &Path, report: &ProposalStatsReport) -> Result<()> {
    write_versioned(path, schema::PROPOSAL_STATS, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appearance::{label_patches, AppearanceMetadata, PatchImage};
    use crate::geometry::{Joint, LabeledBox, Proposal};
    use crate::priors::JointTerm;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn detections_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let dets = vec![Detection {
            image_id: "im".into(),
            class: ClassLabel::new(3, "hat"),
            bbox: bb(0.1, 0.2, 10.3, 7.7),
            proposal_id: 12,
            log_score: -std::f64::consts::PI,
            components: ScoreComponents {
                log_appearance: Some(-0.1),
                log_aspect: Some(-1.0 / 3.0),
                log_perimeter: Some(-2.0),
                joints: vec![JointTerm { joint: Joint::LeftHip, log_density: -7.25, fallback: true }],
            },
        }];
        let header = DetectionsHeader { ablation: Ablation::Full, split: Split::Test, count: 1 };
        write_detections(&path, &header, &dets).unwrap();
        assert_eq!(read_detections(&path).unwrap(), (header, dets.clone()));

        let empty = DetectionsHeader { ablation: Ablation::NoGeometric, split: Split::Test, count: 0 };
        write_detections(&path, &empty, &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.contains("posedet.detections"));
        assert_eq!(read_detections(&path).unwrap().1, vec![]);

        let mut bad = dets;
        bad[0].log_score = f64::NEG_INFINITY;
        assert!(write_detections(&path, &header, &bad).is_err());
    }

    #[test]
    fn patches_and_appearance_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let gt = [LabeledBox { class: ClassLabel::new(0, "bag"), bbox: bb(0.0, 0.0, 10.0, 10.0) }];
        let props = [Proposal { id: 0, bbox: bb(0.0, 0.0, 10.0, 6.0) }, Proposal { id: 1, bbox: bb(40.0, 40.0, 50.0, 50.0) }];
        let set = label_patches(
            &[PatchImage { image_id: "a", width: 60.0, height: 60.0, proposals: &props, ground_truth: &gt, excluded: &[] }],
            1.8,
        )
        .unwrap();
        let path = dir.path().join("patches.json");
        write_patches(&path, &set).unwrap();
        assert_eq!(read_patches(&path).unwrap(), set);

        let model = AppearanceModel {
            class: ClassLabel::new(0, "bag"),
            w: vec![0.5, -0.25],
            bias: 0.125,
            lambda: 4.0,
            metadata: AppearanceMetadata {
                c: 0.1,
                epochs: 50,
                seed: 9,
                positives: 2,
                negatives: 1,
                objective: 0.3,
                validation_ap: Some(1.0),
                search: vec![(0.1, 4.0, Some(1.0)), (1.0, 4.0, None)],
            },
        };
        let file = AppearanceModelFile { dim: 2, models: BTreeMap::from([("bag".to_string(), model)]), skipped: vec![] };
        let path = dir.path().join("app.json");
        write_appearance_models(&path, &file).unwrap();
        assert_eq!(read_appearance_models(&path).unwrap(), file);
        let wrong = AppearanceModelFile { dim: 3, ..file };
        write_appearance_models(&path, &wrong).unwrap();
        assert!(read_appearance_models(&path).is_err());
    }

    #[test]
    fn curves_csv() {
        let dir = tempfile::tempdir().unwrap();
        let curve = PrCurve {
            class: "left shoe".into(),
            ground_truth: 2,
            points: vec![crate::evaluation::PrPoint { recall: 0.5, precision: 1.0, threshold: -1.5, true_positive: true }],
            ap: Some(0.5),
        };
        let paths = write_curves_csv(dir.path(), &[curve]).unwrap();
        assert!(paths[0].ends_with("pr_left_shoe.csv"));
        assert_eq!(std::fs::read_to_string(&paths[0]).unwrap(), "recall,precision,threshold\n0.5,1,-1.5\n");
    }
}
