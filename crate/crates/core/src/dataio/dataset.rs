use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_features, read_jsonl, read_versioned, schema, write_jsonl, write_versioned};
use crate::appearance::FeatureMatrix;
use crate::error::{Error, Result};
use crate::evaluation::{gt_from_labelmap, split_by_classes, LabelMap};
use crate::geometry::{BoundingBox, ClassLabel, Joint, LabeledBox, Point, Pose, Proposal, NUM_JOINTS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::validation(format!("unknown split {s:?}; expected train, val or test"))),
        }
    }
}

/// One image of the dataset. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub id: String,
    pub width: f64,
    pub height: f64,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_map: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposals: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// The detected classes.
    pub classes: Vec<ClassLabel>,
    /// Original class name to merged class name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub class_merge: BTreeMap<String, String>,
    pub images: Vec<ImageEntry>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for c in &self.classes {
            if c.name.is_empty() || !names.insert(&c.name) || !ids.insert(c.id) {
                return Err(Error::validation(format!("duplicate or empty class `{}` (id {})", c.name, c.id)));
            }
        }
        let mut seen = BTreeSet::new();
        for img in &self.images {
            if !seen.insert(&img.id) {
                return Err(Error::validation(format!("duplicate image id `{}`", img.id)));
            }
            if !(img.width > 0.0 && img.height > 0.0) || !img.width.is_finite() || !img.height.is_finite() {
                return Err(Error::validation(format!("image `{}`: width and height must be positive", img.id)));
            }
        }
        Ok(())
    }
}

/// Ground truth of one image after class merging.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageGroundTruth {
    pub boxes: Vec<LabeledBox>,
    /// Boxes of classes outside the configured set.
    pub excluded: Vec<BoundingBox>,
}

/// A loaded manifest plus the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub path: PathBuf,
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    /// Reads and validates the manifest and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest: Manifest = read_versioned(path, schema::MANIFEST)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let ds = Self::new(path.to_path_buf(), root, manifest)?;
        for img in &ds.manifest.images {
            let files = [
                ("pose", &img.pose),
                ("label map", &img.label_map),
                ("annotations", &img.annotations),
                ("proposals", &img.proposals),
                ("features", &img.features),
            ];
            for (what, rel) in files {
                if let Some(rel) = rel {
                    let p = ds.resolve(rel);
                    if !p.is_file() {
                        return Err(Error::validation(format!(
                            "image `{}`: {what} file {} does not exist",
                            img.id,
                            p.display()
                        )));
                    }
                }
            }
        }
        Ok(ds)
    }

    pub fn new(path: PathBuf, root: PathBuf, manifest: Manifest) -> Result<Self> {
        manifest.validate()?;
        Ok(Self { path, root, manifest })
    }

    pub fn classes(&self) -> &[ClassLabel] {
        &self.manifest.classes
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn images(&self, split: Split) -> impl Iterator<Item = &ImageEntry> {
        self.manifest.images.iter().filter(move |i| i.split == split)
    }

    pub fn image(&self, id: &str) -> Option<&ImageEntry> {
        self.manifest.images.iter().find(|i| i.id == id)
    }

    pub fn pose(&self, img: &ImageEntry) -> Result<Option<Pose>> {
        img.pose.as_ref().map(|p| load_pose(&self.resolve(p))).transpose()
    }

    /// Like [`Dataset::pose`] but an absent pose is an error naming the image.
    pub fn require_pose(&self, img: &ImageEntry) -> Result<Pose> {
        self.pose(img)?.ok_or_else(|| Error::validation(format!("image `{}` has no pose file", img.id)))
    }

    /// Ground truth from the annotation file if present, else from the label
    /// map; `None` when the image has neither.
    pub fn ground_truth(&self, img: &ImageEntry) -> Result<Option<ImageGroundTruth>> {
        let named: Vec<(String, BoundingBox)> = if let Some(p) = &img.annotations {
            load_annotations(&self.resolve(p))?
                .into_iter()
                .map(|a| (self.manifest.class_merge.get(&a.class).cloned().unwrap_or(a.class), a.bbox))
                .collect()
        } else if let Some(p) = &img.label_map {
            gt_from_labelmap(&load_label_map(&self.resolve(p))?, &self.manifest.class_merge)?
        } else {
            return Ok(None);
        };
        let (boxes, excluded) = split_by_classes(named, &self.manifest.classes);
        Ok(Some(ImageGroundTruth { boxes, excluded }))
    }

    pub fn require_ground_truth(&self, img: &ImageEntry) -> Result<ImageGroundTruth> {
        self.ground_truth(img)?
            .ok_or_else(|| Error::validation(format!("image `{}` has neither annotations nor a label map", img.id)))
    }

    pub fn proposals(&self, img: &ImageEntry) -> Result<Vec<Proposal>> {
        match &img.proposals {
            Some(p) => load_proposals(&self.resolve(p), &img.id),
            None => Err(Error::validation(format!("image `{}` has no proposals file", img.id))),
        }
    }

    /// Proposal features; row `i` must be indexed as proposal `proposals[i]`.
    pub fn features(&self, img: &ImageEntry, proposals: &[Proposal]) -> Result<FeatureMatrix> {
        let rel = img
            .features
            .as_ref()
            .ok_or_else(|| Error::validation(format!("image `{}` has no features file", img.id)))?;
        let path = self.resolve(rel);
        let (matrix, index) = read_features(&path)?;
        if matrix.rows() != proposals.len() {
            return Err(Error::Alignment { image: img.id.clone(), proposals: proposals.len(), features: matrix.rows() });
        }
        for (row, p) in index.rows.iter().zip(proposals) {
            let expected = format!("proposal:{}", p.id);
            if row.image_id != img.id || row.box_id != expected {
                return Err(Error::format(
                    &path,
                    format!("row for ({}, {}) where ({}, {expected}) was expected", row.image_id, row.box_id, img.id),
                ));
            }
        }
        Ok(matrix)
    }
}

/// Pose file body: a coordinate pair for each of the 14 joints, and
/// optionally which of them are visible (all by default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseFile {
    pub joints: BTreeMap<String, [f64; 2]>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub visible: BTreeMap<String, bool>,
}

impl PoseFile {
    pub fn from_pose(pose: &Pose) -> Self {
        let joints = Joint::ALL.iter().map(|j| (j.name().to_string(), [pose.location(*j).x, pose.location(*j).y])).collect();
        let visible = Joint::ALL.iter().filter(|j| !pose.is_visible(**j)).map(|j| (j.name().to_string(), false)).collect();
        Self { joints, visible }
    }

    pub fn to_pose(&self) -> Result<Pose> {
        let mut pts: [Option<Point>; NUM_JOINTS] = [None; NUM_JOINTS];
        for (name, [x, y]) in &self.joints {
            let j: Joint = name.parse()?;
            pts[j.index()] = Some(Point::new(*x, *y));
        }
        let mut visible = [true; NUM_JOINTS];
        for (name, v) in &self.visible {
            let j: Joint = name.parse()?;
            visible[j.index()] = *v;
        }
        let mut joints = [Point::default(); NUM_JOINTS];
        for (i, p) in pts.iter().enumerate() {
            joints[i] = p.ok_or_else(|| Error::validation(format!("pose lacks joint `{}`", Joint::ALL[i])))?;
        }
        Pose::with_visibility(joints, visible)
    }
}

pub fn load_pose(path: &Path) -> Result<Pose> {
    let file: PoseFile = read_versioned(path, schema::POSE)?;
    file.to_pose().map_err(|e| match e {
        Error::Io { .. } | Error::Format { .. } | Error::Version { .. } => e,
        other => Error::format(path, other.to_string()),
    })
}

pub fn write_pose(path: &Path, pose: &Pose) -> Result<()> {
    write_versioned(path, schema::POSE, &PoseFile::from_pose(pose))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationBox {
    pub class: String,
    #[serde(flatten)]
    pub bbox: BoundingBox,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    boxes: Vec<AnnotationBox>,
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationBox>> {
    Ok(read_versioned::<AnnotationFile>(path, schema::ANNOTATIONS)?.boxes)
}

pub fn write_annotations(path: &Path, boxes: &[AnnotationBox]) -> Result<()> {
    write_versioned(path, schema::ANNOTATIONS, &AnnotationFile { boxes: boxes.to_vec() })
}

/// Label map document: either a flat row-major `labels` array or `rle` runs
/// of `[label, count]` covering the grid in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelMapFile {
    pub width: usize,
    pub height: usize,
    pub legend: BTreeMap<u32, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rle: Option<Vec<[u32; 2]>>,
}

impl LabelMapFile {
    pub fn from_map(map: &LabelMap, rle: bool) -> Self {
        let runs = rle.then(|| {
            let mut runs: Vec<[u32; 2]> = Vec::new();
            for &l in map.labels() {
                match runs.last_mut() {
                    Some(r) if r[0] == l => r[1] += 1,
                    _ => runs.push([l, 1]),
                }
            }
            runs
        });
        Self {
            width: map.width(),
            height: map.height(),
            legend: map.legend().clone(),
            labels: (!rle).then(|| map.labels().to_vec()),
            rle: runs,
        }
    }

    pub fn to_map(&self) -> Result<LabelMap> {
        let labels = match (&self.labels, &self.rle) {
            (Some(l), None) => l.clone(),
            (None, Some(runs)) => {
                let total: u64 = runs.iter().map(|r| r[1] as u64).sum();
                if total != (self.width * self.height) as u64 {
                    return Err(Error::DimensionMismatch { expected: self.width * self.height, got: total as usize });
                }
                runs.iter().flat_map(|&[l, n]| std::iter::repeat_n(l, n as usize)).collect()
            }
            _ => return Err(Error::validation("label map needs exactly one of `labels` and `rle`")),
        };
        LabelMap::new(self.width, self.height, labels, self.legend.clone())
    }
}

pub fn load_label_map(path: &Path) -> Result<LabelMap> {
    let file: LabelMapFile = read_versioned(path, schema::LABEL_MAP)?;
    file.to_map().map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_label_map(path: &Path, map: &LabelMap, rle: bool) -> Result<()> {
    write_versioned(path, schema::LABEL_MAP, &LabelMapFile::from_map(map, rle))
}

#[derive(Debug, Serialize, Deserialize)]
struct ProposalsHeader {
    image_id: String,
    count: usize,
}

pub fn load_proposals(path: &Path, image_id: &str) -> Result<Vec<Proposal>> {
    let (header, proposals): (ProposalsHeader, Vec<Proposal>) = read_jsonl(path, schema::PROPOSALS)?;
    if header.image_id != image_id {
        return Err(Error::format(path, format!("proposals are for image `{}`, not `{image_id}`", header.image_id)));
    }
    if header.count != proposals.len() {
        return Err(Error::format(path, format!("header says {} proposals, found {}", header.count, proposals.len())));
    }
    let mut ids = BTreeSet::new();
    if let Some(p) = proposals.iter().find(|p| !ids.insert(p.id)) {
        return Err(Error::format(path, format!("duplicate proposal id {}", p.id)));
    }
    Ok(proposals)
}

pub fn write_proposals(path: &Path, image_id: &str, proposals: &[Proposal]) -> Result<()> {
    let header = ProposalsHeader { image_id: image_id.to_string(), count: proposals.len() };
    write_jsonl(path, schema::PROPOSALS, &header, proposals)
}
