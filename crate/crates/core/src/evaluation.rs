//! Ground truth from pixel label maps, detection matching, precision/recall
//! curves, average precision and proposal statistics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox, ClassLabel, LabeledBox, Proposal};

/// Minimum IoU for a detection or proposal to count as matching ground truth.
pub const MATCH_IOU: f64 = 0.5;

/// Row-major grid of label ids; 0 is unlabeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    legend: BTreeMap<u32, String>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u32>, legend: BTreeMap<u32, String>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::DimensionMismatch { expected: width * height, got: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != 0 && !legend.contains_key(&l)) {
            return Err(Error::UnknownLabel(bad));
        }
        Ok(Self { width, height, labels, legend })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn legend(&self) -> &BTreeMap<u32, String> {
        &self.legend
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }
}

/// One tight box per merged class present in the map, sorted by class name.
///
/// Pixel `(r, c)` covers `[c, c+1] x [r, r+1]`. Legend names missing from
/// `merge` keep their own name.
pub fn gt_from_labelmap(map: &LabelMap, merge: &BTreeMap<String, String>) -> Result<Vec<(String, BoundingBox)>> {
    // (min_col, min_row, max_col, max_row) per merged class
    let mut extents: BTreeMap<&str, (usize, usize, usize, usize)> = BTreeMap::new();
    for row in 0..map.height {
        for col in 0..map.width {
            let id = map.get(row, col);
            if id == 0 {
                continue;
            }
            let name = map.legend.get(&id).ok_or(Error::UnknownLabel(id))?;
            let merged = merge.get(name).unwrap_or(name).as_str();
            extents
                .entry(merged)
                .and_modify(|e| {
                    e.0 = e.0.min(col);
                    e.1 = e.1.min(row);
                    e.2 = e.2.max(col);
                    e.3 = e.3.max(row);
                })
                .or_insert((col, row, col, row));
        }
    }
    extents
        .into_iter()
        .map(|(name, (c0, r0, c1, r1))| {
            Ok((name.to_string(), BoundingBox::new(c0 as f64, r0 as f64, (c1 + 1) as f64, (r1 + 1) as f64)?))
        })
        .collect()
}

/// Splits named boxes into configured-class ground truth and the boxes of
/// every other class.
pub fn split_by_classes(boxes: Vec<(String, BoundingBox)>, classes: &[ClassLabel]) -> (Vec<LabeledBox>, Vec<BoundingBox>) {
    let mut known = Vec::new();
    let mut other = Vec::new();
    for (name, bbox) in boxes {
        match classes.iter().find(|c| c.name == name) {
            Some(class) => known.push(LabeledBox { class: class.clone(), bbox }),
            None => other.push(bbox),
        }
    }
    (known, other)
}

#[derive(Debug, Clone, Copy)]
pub struct StatsImage<'a> {
    pub proposals: &'a [Proposal],
    pub ground_truth: &'a [LabeledBox],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalStats {
    /// Fraction of proposals overlapping some ground truth by IoU >= 0.5.
    pub precision: f64,
    /// Set when there were no proposals and `precision` is reported as 0.
    pub precision_undefined: bool,
    /// Fraction of each class's ground truth hit by some proposal.
    pub recall: BTreeMap<String, f64>,
    pub ground_truth: BTreeMap<String, usize>,
    pub proposals: usize,
    pub images: usize,
    pub proposals_per_image: f64,
}

pub fn proposal_stats(images: &[StatsImage<'_>]) -> ProposalStats {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut hits: BTreeMap<String, usize> = BTreeMap::new();
    let mut gts: BTreeMap<String, usize> = BTreeMap::new();
    for img in images {
        total += img.proposals.len();
        correct += img
            .proposals
            .iter()
            .filter(|p| img.ground_truth.iter().any(|g| iou(&p.bbox, &g.bbox) >= MATCH_IOU))
            .count();
        for g in img.ground_truth {
            *gts.entry(g.class.name.clone()).or_default() += 1;
            let hit = img.proposals.iter().any(|p| iou(&p.bbox, &g.bbox) >= MATCH_IOU);
            *hits.entry(g.class.name.clone()).or_default() += usize::from(hit);
        }
    }
    let recall = gts.iter().map(|(k, &n)| (k.clone(), hits[k] as f64 / n as f64)).collect();
    ProposalStats {
        precision: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        precision_undefined: total == 0,
        recall,
        ground_truth: gts,
        proposals: total,
        images: images.len(),
        proposals_per_image: if images.is_empty() { 0.0 } else { total as f64 / images.len() as f64 },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    /// Score of the detection that produced this point.
    pub threshold: f64,
    pub true_positive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class: String,
    pub ground_truth: usize,
    pub points: Vec<PrPoint>,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
}

/// Ground-truth boxes of one class, keyed by image id.
pub type ClassGroundTruth = BTreeMap<String, Vec<BoundingBox>>;

/// Groups labeled ground truth per class, then per image.
pub fn ground_truth_by_class<'a>(
    images: impl IntoIterator<Item = (&'a str, &'a [LabeledBox])>,
) -> BTreeMap<String, ClassGroundTruth> {
    let mut out: BTreeMap<String, ClassGroundTruth> = BTreeMap::new();
    for (image, boxes) in images {
        for g in boxes {
            out.entry(g.class.name.clone()).or_default().entry(image.to_string()).or_default().push(g.bbox);
        }
    }
    out
}

/// Ranks detections by score (ties by image id, then proposal id) and
/// greedily matches each to the unmatched ground-truth box of its image with
/// the highest IoU, if that IoU is at least 0.5. AP sums
/// `(r_i - r_{i-1}) * p_i` over the ranked list.
pub fn pr_curve(class: &str, detections: &[&Detection], ground_truth: &ClassGroundTruth) -> PrCurve {
    let total_gt: usize = ground_truth.values().map(Vec::len).sum();
    let mut ranked: Vec<&Detection> = detections.to_vec();
    ranked.sort_by(|a, b| {
        b.log_score
            .total_cmp(&a.log_score)
            .then_with(|| a.image_id.cmp(&b.image_id))
            .then(a.proposal_id.cmp(&b.proposal_id))
    });
    if total_gt == 0 {
        return PrCurve { class: class.to_string(), ground_truth: 0, points: Vec::new(), ap: None };
    }
    let mut matched: BTreeMap<&str, Vec<bool>> =
        ground_truth.iter().map(|(k, v)| (k.as_str(), vec![false; v.len()])).collect();
    let mut tp = 0usize;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut points = Vec::with_capacity(ranked.len());
    for (k, d) in ranked.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        if let (Some(boxes), Some(used)) = (ground_truth.get(&d.image_id), matched.get(d.image_id.as_str())) {
            for (i, g) in boxes.iter().enumerate() {
                if used[i] {
                    continue;
                }
                let v = iou(&d.bbox, g);
                if v >= MATCH_IOU && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((i, v));
                }
            }
        }
        if let Some((i, _)) = best {
            matched.get_mut(d.image_id.as_str()).expect("image has ground truth")[i] = true;
            tp += 1;
        }
        let recall = tp as f64 / total_gt as f64;
        let precision = tp as f64 / (k + 1) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push(PrPoint { recall, precision, threshold: d.log_score, true_positive: best.is_some() });
    }
    PrCurve { class: class.to_string(), ground_truth: total_gt, points, ap: Some(ap) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanAp {
    pub map: f64,
    pub per_class: BTreeMap<String, Option<f64>>,
    /// Classes left out of the mean because their AP is undefined.
    pub undefined: Vec<String>,
}

/// Unweighted mean over the classes with defined AP.
pub fn mean_ap(curves: &[PrCurve]) -> Result<MeanAp> {
    let per_class: BTreeMap<String, Option<f64>> = curves.iter().map(|c| (c.class.clone(), c.ap)).collect();
    let defined: Vec<f64> = per_class.values().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::AllUndefined);
    }
    let undefined = per_class.iter().filter(|(_, v)| v.is_none()).map(|(k, _)| k.clone()).collect();
    Ok(MeanAp { map: defined.iter().sum::<f64>() / defined.len() as f64, per_class, undefined })
}

/// Curves for every class in `classes`, from a flat detection list.
pub fn evaluate_detections(
    classes: &[ClassLabel],
    detections: &[Detection],
    ground_truth: &BTreeMap<String, ClassGroundTruth>,
) -> Vec<PrCurve> {
    let empty = ClassGroundTruth::new();
    let names: BTreeSet<&str> = classes.iter().map(|c| c.name.as_str()).collect();
    names
        .into_iter()
        .map(|name| {
            let dets: Vec<&Detection> = detections.iter().filter(|d| d.class.name == name).collect();
            pr_curve(name, &dets, ground_truth.get(name).unwrap_or(&empty))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::ScoreComponents;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(image: &str, id: u64, b: BoundingBox, s: f64) -> Detection {
        Detection {
            image_id: image.into(),
            class: ClassLabel::new(0, "bag"),
            bbox: b,
            proposal_id: id,
            log_score: s,
            components: ScoreComponents::default(),
        }
    }

    fn legend(pairs: &[(u32, &str)]) -> BTreeMap<u32, String> {
        pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
    }

    #[test]
    fn labelmap_square() {
        let mut labels = vec![0u32; 8 * 6];
        for r in 2..=3 {
            for c in 5..=6 {
                labels[r * 8 + c] = 3;
            }
        }
        let map = LabelMap::new(8, 6, labels, legend(&[(3, "hat")])).unwrap();
        let boxes = gt_from_labelmap(&map, &BTreeMap::new()).unwrap();
        assert_eq!(boxes, vec![("hat".to_string(), bb(5.0, 2.0, 7.0, 4.0))]);
        let empty = LabelMap::new(4, 4, vec![0; 16], BTreeMap::new()).unwrap();
        assert!(gt_from_labelmap(&empty, &BTreeMap::new()).unwrap().is_empty());
        assert!(matches!(LabelMap::new(2, 1, vec![0, 9], BTreeMap::new()), Err(Error::UnknownLabel(9))));
        assert!(LabelMap::new(2, 2, vec![0; 3], BTreeMap::new()).is_err());
    }

    #[test]
    fn labelmap_blobs_and_merging() {
        // two blobs of purse and one wallet pixel, all merged into bag
        let mut labels = vec![0u32; 10 * 10];
        labels[10 + 1] = 1;
        labels[8 * 10 + 7] = 1;
        labels[5 * 10 + 9] = 2;
        labels[0] = 4;
        let map = LabelMap::new(10, 10, labels, legend(&[(1, "purse"), (2, "wallet"), (4, "hat")])).unwrap();
        let merge: BTreeMap<String, String> =
            [("purse", "bag"), ("wallet", "bag")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        let boxes = gt_from_labelmap(&map, &merge).unwrap();
        assert_eq!(boxes, vec![("bag".into(), bb(1.0, 1.0, 10.0, 9.0)), ("hat".into(), bb(0.0, 0.0, 1.0, 1.0))]);
        let (known, other) = split_by_classes(boxes, &[ClassLabel::new(0, "bag")]);
        assert_eq!(known.len(), 1);
        assert_eq!(other, vec![bb(0.0, 0.0, 1.0, 1.0)]);
    }

    proptest! {
        #[test]
        fn labelmap_boxes_contain_their_pixels(cells in proptest::collection::vec(0u32..4, 48)) {
            let map = LabelMap::new(8, 6, cells, legend(&[(1, "a"), (2, "b"), (3, "c")])).unwrap();
            let boxes = gt_from_labelmap(&map, &BTreeMap::new()).unwrap();
            for r in 0..6 {
                for c in 0..8 {
                    let id = map.get(r, c);
                    if id == 0 { continue; }
                    let name = &map.legend()[&id];
                    let b = boxes.iter().find(|(n, _)| n == name).unwrap().1;
                    prop_assert!(b.contains_box(&bb(c as f64, r as f64, c as f64 + 1.0, r as f64 + 1.0)));
                }
            }
        }
    }

    fn lb(name: &str, b: BoundingBox) -> LabeledBox {
        LabeledBox { class: ClassLabel::new(0, name), bbox: b }
    }

    #[test]
    fn proposal_stats_examples() {
        let gt = [lb("bag", bb(0.0, 0.0, 10.0, 10.0))];
        let exact = [Proposal { id: 0, bbox: gt[0].bbox }];
        let s = proposal_stats(&[StatsImage { proposals: &exact, ground_truth: &gt }]);
        assert_eq!((s.precision, s.recall["bag"]), (1.0, 1.0));

        let none = proposal_stats(&[StatsImage { proposals: &[], ground_truth: &gt }]);
        assert!(none.precision_undefined);
        assert_eq!((none.precision, none.recall["bag"]), (0.0, 0.0));

        let three = [
            Proposal { id: 0, bbox: bb(0.0, 0.0, 10.0, 6.0) },
            Proposal { id: 1, bbox: bb(30.0, 30.0, 40.0, 40.0) },
            Proposal { id: 2, bbox: bb(50.0, 0.0, 60.0, 10.0) },
        ];
        let s = proposal_stats(&[StatsImage { proposals: &three, ground_truth: &gt }, StatsImage { proposals: &[], ground_truth: &[] }]);
        assert!((s.precision - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.recall["bag"], 1.0);
        assert_eq!(s.proposals_per_image, 1.5);
    }

    fn gt_map(entries: &[(&str, BoundingBox)]) -> ClassGroundTruth {
        let mut m = ClassGroundTruth::new();
        for (img, b) in entries {
            m.entry(img.to_string()).or_default().push(*b);
        }
        m
    }

    #[test]
    fn hand_computed_curve() {
        let g1 = bb(0.0, 0.0, 10.0, 10.0);
        let g2 = bb(20.0, 20.0, 30.0, 30.0);
        let gt = gt_map(&[("a", g1), ("a", g2)]);
        let dets = [det("a", 0, g1, 3.0), det("a", 1, bb(50.0, 50.0, 60.0, 60.0), 2.0), det("a", 2, g2, 1.0)];
        let refs: Vec<&Detection> = dets.iter().collect();
        let curve = pr_curve("bag", &refs, &gt);
        let rp: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.recall, p.precision)).collect();
        assert_eq!(rp[..2], [(0.5, 1.0), (0.5, 0.5)]);
        assert_eq!(rp[2].0, 1.0);
        assert!((rp[2].1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((curve.ap.unwrap() - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-12);
        assert!((curve.ap.unwrap() - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn perfect_duplicates_and_missing_ground_truth() {
        let g1 = bb(0.0, 0.0, 10.0, 10.0);
        let gt = gt_map(&[("a", g1), ("b", g1)]);
        let dets = [det("a", 0, g1, 2.0), det("b", 0, g1, 1.0)];
        let refs: Vec<&Detection> = dets.iter().collect();
        assert_eq!(pr_curve("bag", &refs, &gt).ap, Some(1.0));

        let dup = [det("a", 0, g1, 2.0), det("a", 1, g1, 1.0)];
        let refs: Vec<&Detection> = dup.iter().collect();
        let curve = pr_curve("bag", &refs, &gt_map(&[("a", g1)]));
        assert!(curve.points[0].true_positive && !curve.points[1].true_positive);

        let curve = pr_curve("bag", &refs, &ClassGroundTruth::new());
        assert_eq!(curve.ap, None);
        let zero = pr_curve("bag", &[], &gt);
        assert_eq!(zero.ap, Some(0.0));
    }

    #[test]
    fn mean_ap_rules() {
        let c = |name: &str, ap| PrCurve { class: name.into(), ground_truth: 1, points: vec![], ap };
        let m = mean_ap(&[c("a", Some(0.2)), c("b", Some(0.4)), c("c", None)]).unwrap();
        assert!((m.map - 0.3).abs() < 1e-15);
        assert_eq!(m.undefined, vec!["c".to_string()]);
        assert_eq!(mean_ap(&[c("a", Some(0.7))]).unwrap().map, 0.7);
        assert!(matches!(mean_ap(&[c("a", None)]), Err(Error::AllUndefined)));
        assert!(matches!(mean_ap(&[]), Err(Error::AllUndefined)));
    }

    /// Independent reference: scans every (detection, box) pair in rank order
    /// and uses AP = mean over ground truth of precision at each hit.
    pub(crate) fn ap_oracle(dets: &[Detection], gt: &[(String, BoundingBox)]) -> Option<f64> {
        if gt.is_empty() {
            return None;
        }
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| {
            let (x, y) = (&dets[a], &dets[b]);
            y.log_score
                .partial_cmp(&x.log_score)
                .unwrap()
                .then(x.image_id.cmp(&y.image_id))
                .then(x.proposal_id.cmp(&y.proposal_id))
        });
        let mut taken = vec![false; gt.len()];
        let mut hits = 0.0;
        let mut sum = 0.0;
        for (rank, &i) in order.iter().enumerate() {
            let candidates: Vec<(usize, f64)> = (0..gt.len())
                .filter(|&j| !taken[j] && gt[j].0 == dets[i].image_id)
                .map(|j| (j, iou(&dets[i].bbox, &gt[j].1)))
                .filter(|(_, v)| *v >= 0.5)
                .collect();
            let best = candidates.iter().fold(None::<(usize, f64)>, |acc, &(j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
            if let Some((j, _)) = best {
                taken[j] = true;
                hits += 1.0;
                sum += hits / (rank + 1) as f64;
            }
        }
        Some(sum / gt.len() as f64)
    }

    pub(crate) fn random_instance(rng: &mut impl Rng) -> (Vec<Detection>, Vec<(String, BoundingBox)>) {
        let images = ["p", "q", "r"];
        let n_gt = rng.random_range(0..8);
        let gt: Vec<(String, BoundingBox)> = (0..n_gt)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..40.0), rng.random_range(0.0..40.0));
                let b = bb(x, y, x + rng.random_range(4.0..15.0), y + rng.random_range(4.0..15.0));
                (images[rng.random_range(0..3)].to_string(), b)
            })
            .collect();
        let n_det = rng.random_range(0..=20 - n_gt);
        let dets = (0..n_det)
            .map(|i| {
                let image = images[rng.random_range(0..3)];
                let b = if !gt.is_empty() && rng.random_bool(0.6) {
                    let (_, g) = &gt[rng.random_range(0..gt.len())];
                    let dx = rng.random_range(-3.0..3.0);
                    let dy = rng.random_range(-3.0..3.0);
                    g.translate(dx, dy).unwrap()
                } else {
                    let (x, y) = (rng.random_range(0.0..40.0), rng.random_range(0.0..40.0));
                    bb(x, y, x + rng.random_range(4.0..15.0), y + rng.random_range(4.0..15.0))
                };
                det(image, i as u64, b, rng.random_range(0..6) as f64)
            })
            .collect();
        (dets, gt)
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        let mut rng = seed::rng(8);
        for _ in 0..500 {
            let (dets, gt) = random_instance(&mut rng);
            let mut gmap = ClassGroundTruth::new();
            for (img, b) in &gt {
                gmap.entry(img.clone()).or_default().push(*b);
            }
            let refs: Vec<&Detection> = dets.iter().collect();
            let got = pr_curve("bag", &refs, &gmap).ap;
            match (got, ap_oracle(&dets, &gt)) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    proptest! {
        #[test]
        fn ap_is_bounded_and_rank_invariant(seed_ in 0u64..5000) {
            let (dets, gt) = random_instance(&mut seed::rng(seed_));
            let mut gmap = ClassGroundTruth::new();
            for (img, b) in &gt {
                gmap.entry(img.clone()).or_default().push(*b);
            }
            let refs: Vec<&Detection> = dets.iter().collect();
            let curve = pr_curve("bag", &refs, &gmap);
            let transformed: Vec<Detection> =
                dets.iter().map(|d| Detection { log_score: (d.log_score * 0.7).exp() - 3.0, ..d.clone() }).collect();
            let trefs: Vec<&Detection> = transformed.iter().collect();
            prop_assert_eq!(curve.ap, pr_curve("bag", &trefs, &gmap).ap);
            if let Some(ap) = curve.ap {
                prop_assert!((0.0..=1.0).contains(&ap));
                let first_fp = curve.points.iter().position(|p| !p.true_positive).unwrap_or(curve.points.len());
                let tp_before = curve.points[..first_fp].len();
                prop_assert_eq!(ap == 1.0, tp_before == curve.ground_truth);
            }
            for w in curve.points.windows(2) {
                prop_assert!(w[1].recall >= w[0].recall);
            }
        }
    }
}
