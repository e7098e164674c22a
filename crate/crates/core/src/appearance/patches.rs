//! Training-patch labeling from proposals and ground truth, and the enlarged
//! crop rectangles handed to the external feature extractor.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox, LabeledBox, Proposal};

/// A proposal overlapping a ground-truth box of some class by more than this
/// becomes a positive for that class.
pub const POSITIVE_IOU: f64 = 0.5;
/// A proposal overlapping every ground-truth box by less than this is background.
pub const BACKGROUND_IOU: f64 = 0.1;
pub const DEFAULT_ENLARGEMENT: f64 = 1.8;

/// Scales `b` about its center by `factor` in both directions, then clips to
/// `[0, width] x [0, height]`.
pub fn enlarge_box(b: &BoundingBox, factor: f64, width: f64, height: f64) -> Result<BoundingBox> {
    if !(factor.is_finite() && factor >= 1.0) {
        return Err(Error::validation(format!("enlargement factor must be >= 1, got {factor}")));
    }
    let c = b.center();
    let hw = b.width() * factor / 2.0;
    let hh = b.height() * factor / 2.0;
    BoundingBox::new(
        (c.x - hw).max(0.0),
        (c.y - hh).max(0.0),
        (c.x + hw).min(width),
        (c.y + hh).min(height),
    )
    .map_err(|_| Error::validation(format!("box {b:?} lies outside the {width}x{height} image")))
}

/// Where a patch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum PatchSource {
    /// Index into the image's ground-truth list.
    GroundTruth(usize),
    /// Proposal id.
    Proposal(u64),
    /// Index into the image's excluded-class ground truth.
    Excluded(usize),
}

impl fmt::Display for PatchSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatchSource::GroundTruth(i) => write!(f, "gt:{i}"),
            PatchSource::Proposal(i) => write!(f, "proposal:{i}"),
            PatchSource::Excluded(i) => write!(f, "excluded:{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub image_id: String,
    pub source: PatchSource,
    pub bbox: BoundingBox,
    /// Enlarged, clipped crop rectangle for feature extraction.
    pub crop: BoundingBox,
}

impl Patch {
    /// Stable id used to key feature rows.
    pub fn box_id(&self) -> String {
        self.source.to_string()
    }
}

/// Inputs for one image.
#[derive(Debug, Clone, Copy)]
pub struct PatchImage<'a> {
    pub image_id: &'a str,
    pub width: f64,
    pub height: f64,
    pub proposals: &'a [Proposal],
    pub ground_truth: &'a [LabeledBox],
    /// Ground truth of classes outside the configured set.
    pub excluded: &'a [BoundingBox],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchLabelSet {
    pub enlargement: f64,
    pub positives: BTreeMap<String, Vec<Patch>>,
    pub background: Vec<Patch>,
    /// Proposals in the gray zone between the two thresholds.
    pub discarded: Vec<Patch>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchCounts {
    pub positives: BTreeMap<String, usize>,
    pub background: usize,
    pub discarded: usize,
}

impl PatchCounts {
    pub fn total(&self) -> usize {
        self.positives.values().sum::<usize>() + self.background + self.discarded
    }
}

impl PatchLabelSet {
    pub fn counts(&self) -> PatchCounts {
        PatchCounts {
            positives: self.positives.iter().map(|(k, v)| (k.clone(), v.len())).collect(),
            background: self.background.len(),
            discarded: self.discarded.len(),
        }
    }
}

/// Labels every ground-truth box and proposal of every image.
///
/// Ground-truth boxes are positives of their class; a proposal with IoU above
/// 0.5 against a ground-truth box is a positive for the class of its
/// best-overlapping such box; a proposal with IoU below 0.1 against all ground
/// truth is background; the rest are discarded. Excluded-class ground truth
/// joins the background.
pub fn label_patches(images: &[PatchImage<'_>], enlargement: f64) -> Result<PatchLabelSet> {
    let mut set = PatchLabelSet {
        enlargement,
        positives: BTreeMap::new(),
        background: Vec::new(),
        discarded: Vec::new(),
    };
    for img in images {
        let patch = |source, bbox: &BoundingBox| -> Result<Patch> {
            Ok(Patch {
                image_id: img.image_id.to_string(),
                source,
                bbox: *bbox,
                crop: enlarge_box(bbox, enlargement, img.width, img.height)?,
            })
        };
        for (i, gt) in img.ground_truth.iter().enumerate() {
            let p = patch(PatchSource::GroundTruth(i), &gt.bbox)?;
            set.positives.entry(gt.class.name.clone()).or_default().push(p);
        }
        for (i, b) in img.excluded.iter().enumerate() {
            set.background.push(patch(PatchSource::Excluded(i), b)?);
        }
        for prop in img.proposals {
            let p = patch(PatchSource::Proposal(prop.id), &prop.bbox)?;
            let mut best: Option<(f64, &LabeledBox)> = None;
            let mut max_overlap = 0.0f64;
            for gt in img.ground_truth {
                let v = iou(&prop.bbox, &gt.bbox);
                max_overlap = max_overlap.max(v);
                if v > POSITIVE_IOU && best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, gt));
                }
            }
            match best {
                Some((_, gt)) => set.positives.entry(gt.class.name.clone()).or_default().push(p),
                None if max_overlap < BACKGROUND_IOU => set.background.push(p),
                None => set.discarded.push(p),
            }
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ClassLabel;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn enlarge_examples() {
        let b = bb(10.0, 10.0, 20.0, 20.0);
        assert_eq!(enlarge_box(&b, 1.0, 1000.0, 1000.0).unwrap(), b);
        // center (15, 15), half-extents 5 -> 9
        assert_eq!(enlarge_box(&b, 1.8, 1000.0, 1000.0).unwrap(), bb(6.0, 6.0, 24.0, 24.0));
        let edge = enlarge_box(&bb(0.0, 90.0, 10.0, 100.0), 3.0, 100.0, 100.0).unwrap();
        assert_eq!(edge, bb(0.0, 80.0, 20.0, 100.0));
        assert!(enlarge_box(&b, 0.5, 100.0, 100.0).is_err());
        assert!(enlarge_box(&bb(200.0, 200.0, 210.0, 210.0), 1.2, 100.0, 100.0).is_err());
    }

    #[test]
    fn toy_fixture_counts() {
        let bag = ClassLabel::new(0, "bag");
        let gt = [LabeledBox { class: bag.clone(), bbox: bb(0.0, 0.0, 10.0, 10.0) }];
        // IoU 0.6, 0.3 and 0.05 against the ground truth
        let proposals = [
            Proposal { id: 0, bbox: bb(0.0, 0.0, 10.0, 6.0) },
            Proposal { id: 1, bbox: bb(0.0, 0.0, 10.0, 3.0) },
            Proposal { id: 2, bbox: bb(0.0, 0.0, 10.0, 0.5) },
        ];
        for (p, v) in proposals.iter().zip([0.6, 0.3, 0.05]) {
            assert!((iou(&p.bbox, &gt[0].bbox) - v).abs() < 1e-12);
        }
        let img = PatchImage {
            image_id: "a",
            width: 100.0,
            height: 100.0,
            proposals: &proposals,
            ground_truth: &gt,
            excluded: &[],
        };
        let set = label_patches(&[img], 1.8).unwrap();
        let counts = set.counts();
        assert_eq!(counts.positives["bag"], 2);
        assert_eq!(counts.background, 1);
        assert_eq!(counts.discarded, 1);
        assert_eq!(counts.total(), proposals.len() + gt.len());
        assert_eq!(set.background[0].source, PatchSource::Proposal(2));
        assert_eq!(set.discarded[0].source, PatchSource::Proposal(1));
    }

    #[test]
    fn conflicts_go_to_highest_iou_class() {
        let a = LabeledBox { class: ClassLabel::new(0, "a"), bbox: bb(0.0, 0.0, 10.0, 10.0) };
        let b = LabeledBox { class: ClassLabel::new(1, "b"), bbox: bb(1.0, 0.0, 11.0, 10.0) };
        let prop = [Proposal { id: 9, bbox: bb(0.9, 0.0, 10.9, 10.0) }];
        let gts = [a, b];
        let set = label_patches(
            &[PatchImage { image_id: "x", width: 50.0, height: 50.0, proposals: &prop, ground_truth: &gts, excluded: &[] }],
            1.0,
        )
        .unwrap();
        let b_patches = &set.positives["b"];
        assert!(b_patches.iter().any(|p| p.source == PatchSource::Proposal(9)));
        assert!(!set.positives["a"].iter().any(|p| p.source == PatchSource::Proposal(9)));
    }

    #[test]
    fn excluded_ground_truth_is_background() {
        let ex = [bb(5.0, 5.0, 9.0, 9.0)];
        let set = label_patches(
            &[PatchImage { image_id: "x", width: 50.0, height: 50.0, proposals: &[], ground_truth: &[], excluded: &ex }],
            1.8,
        )
        .unwrap();
        assert_eq!(set.background.len(), 1);
        assert_eq!(set.background[0].source, PatchSource::Excluded(0));
        assert!(label_patches(&[], 1.8).unwrap().positives.is_empty());
    }
}
