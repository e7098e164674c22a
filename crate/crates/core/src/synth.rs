//! Seeded synthetic scenes: stick-figure poses, items anchored to joints by
//! offset mixtures with Gaussian log aspect and log perimeter, proposals, and
//! clustered appearance features. Also a stand-in patch feature extractor and
//! a planted-joint sample generator.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::appearance::{FeatureMatrix, PatchLabelSet, PatchSource};
use crate::dataio::{
    read_features, read_versioned, schema, write_annotations, write_features, write_pose, write_proposals,
    write_versioned, AnnotationBox, Dataset, FeatureIndex, FeatureRow, ImageEntry, Manifest, Split,
};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox, ClassLabel, Joint, Point, Pose, Proposal, NUM_JOINTS};
use crate::priors::{Gmm2D, GmmComponent};
use crate::seed;

/// Standing figure, hips at the origin, at scale 1.
const TEMPLATE: [(f64, f64); NUM_JOINTS] = [
    (0.0, -80.0),
    (0.0, -65.0),
    (-15.0, -60.0),
    (15.0, -60.0),
    (-20.0, -35.0),
    (20.0, -35.0),
    (-22.0, -10.0),
    (22.0, -10.0),
    (-10.0, 0.0),
    (10.0, 0.0),
    (-11.0, 40.0),
    (11.0, 40.0),
    (-12.0, 80.0),
    (12.0, 80.0),
];

/// How one item class is placed and what it looks like.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClassSpec {
    pub name: String,
    pub anchor: Joint,
    /// Mixture over `center - anchor`.
    pub offsets: Vec<GmmComponent>,
    /// Mean and standard deviation of `ln(h / w)`.
    pub aspect: [f64; 2],
    /// Mean and standard deviation of `ln(h + w)`.
    pub perimeter: [f64; 2],
    /// Probability that a scene contains the item.
    pub presence: f64,
    /// Classes with the same group share an appearance cluster, up to
    /// `group_offset`.
    pub appearance_group: usize,
    pub group_offset: f64,
    /// Listed in the manifest; unlisted classes become excluded ground truth.
    #[serde(default = "yes")]
    pub detected: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub width: f64,
    pub height: f64,
    pub classes: Vec<SynthClassSpec>,
    pub feature_dim: usize,
    /// Norm of each appearance cluster mean.
    pub feature_separation: f64,
    /// Per-coordinate standard deviation of feature noise.
    pub feature_noise: f64,
    pub jittered_per_item: usize,
    pub random_proposals: usize,
    /// Boxes anywhere that carry some class's appearance.
    pub appearance_decoys: usize,
    /// Per absent item: boxes drawn from its geometric model with background appearance.
    pub geometric_decoys: usize,
    /// Standard deviation of per-joint jitter, px.
    pub joint_jitter: f64,
}

fn shape_gmm(mean: [f64; 2], var: f64) -> Vec<GmmComponent> {
    vec![GmmComponent { weight: 1.0, mean, covariance: [[var, 0.0], [0.0, var]] }]
}

impl Default for SynthConfig {
    fn default() -> Self {
        let spec = |name: &str, anchor, offsets, aspect: f64, perimeter: f64, group, group_offset| SynthClassSpec {
            name: name.into(),
            anchor,
            offsets,
            aspect: [aspect, 0.12],
            perimeter: [perimeter, 0.1],
            presence: 0.7,
            appearance_group: group,
            group_offset,
            detected: true,
        };
        let bag = vec![
            GmmComponent { weight: 0.6, mean: [22.0, 12.0], covariance: [[16.0, 0.0], [0.0, 25.0]] },
            GmmComponent { weight: 0.4, mean: [-42.0, 12.0], covariance: [[16.0, 0.0], [0.0, 25.0]] },
        ];
        let mut watch = spec("watch", Joint::LeftWrist, shape_gmm([0.0, 0.0], 4.0), 0.0, 16f64.ln(), 4, 0.0);
        watch.detected = false;
        Self {
            train: 200,
            val: 50,
            test: 100,
            width: 240.0,
            height: 300.0,
            classes: vec![
                spec("hat", Joint::Head, shape_gmm([0.0, -12.0], 9.0), 0.6f64.ln(), 40f64.ln(), 0, 0.0),
                spec("bag", Joint::RightHip, bag, 0.0, 50f64.ln(), 1, 0.0),
                spec("scarf", Joint::Neck, shape_gmm([0.0, 4.0], 9.0), 0.5f64.ln(), 45f64.ln(), 2, 0.0),
                spec("left_shoe", Joint::LeftFoot, shape_gmm([0.0, 2.0], 4.0), 0.55f64.ln(), 24f64.ln(), 3, 0.25),
                spec("right_shoe", Joint::RightFoot, shape_gmm([0.0, 2.0], 4.0), 0.55f64.ln(), 24f64.ln(), 3, -0.25),
                watch,
            ],
            feature_dim: 16,
            feature_separation: 2.5,
            feature_noise: 1.0,
            jittered_per_item: 4,
            random_proposals: 30,
            appearance_decoys: 3,
            geometric_decoys: 2,
            joint_jitter: 3.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.iter().all(|c| !c.detected) {
            return Err(Error::validation("synth: no detected classes"));
        }
        if self.feature_dim == 0 || !(self.width > 100.0 && self.height > 200.0) {
            return Err(Error::validation("synth: feature_dim must be positive and the image at least 100x200"));
        }
        if !(self.feature_noise >= 0.0 && self.joint_jitter >= 0.0) {
            return Err(Error::validation("synth: noise scales must be non-negative"));
        }
        for c in &self.classes {
            Gmm2D::new(c.offsets.clone())?;
            if !((0.0..=1.0).contains(&c.presence) && c.aspect[1] >= 0.0 && c.perimeter[1] >= 0.0) {
                return Err(Error::validation(format!("synth class `{}`: bad presence or spread", c.name)));
            }
        }
        Ok(())
    }

    pub fn detected_classes(&self) -> Vec<ClassLabel> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.detected)
            .map(|(i, c)| ClassLabel::new(i as u32, c.name.clone()))
            .collect()
    }
}

/// Generating parameters written next to the generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub seed: u64,
    pub config: SynthConfig,
    /// Appearance mean per class name.
    pub class_means: BTreeMap<String, Vec<f64>>,
}

impl SynthRecord {
    pub fn new(config: SynthConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(seed, &[0xA5]));
        let groups = config.classes.iter().map(|c| c.appearance_group).max().unwrap_or(0) + 1;
        let dim = config.feature_dim;
        let unit = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        };
        let group_dirs: Vec<Vec<f64>> = (0..groups).map(|_| unit(&mut rng)).collect();
        let mut class_means = BTreeMap::new();
        for c in &config.classes {
            let side = unit(&mut rng);
            let mean: Vec<f64> = group_dirs[c.appearance_group]
                .iter()
                .zip(&side)
                .map(|(g, s)| config.feature_separation * (g + c.group_offset * s))
                .collect();
            class_means.insert(c.name.clone(), mean);
        }
        Ok(Self { seed, config, class_means })
    }

    fn mean(&self, class: &str) -> &[f64] {
        &self.class_means[class]
    }

    /// `scale * mean(class) + noise`, or pure noise without a class.
    fn feature(&self, rng: &mut impl Rng, class: Option<&str>, scale: f64) -> Vec<f32> {
        let noise = Normal::new(0.0, self.config.feature_noise.max(0.0)).expect("valid noise");
        (0..self.config.feature_dim)
            .map(|k| {
                let m = class.map_or(0.0, |c| self.mean(c)[k] * scale);
                (m + noise.sample(rng)) as f32
            })
            .collect()
    }
}

/// One generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub split: Split,
    pub pose: Pose,
    /// Items of every class, detected or not.
    pub items: Vec<AnnotationBox>,
    pub proposals: Vec<Proposal>,
    pub features: FeatureMatrix,
}

fn sample_pose(rng: &mut impl Rng, cfg: &SynthConfig) -> Result<Pose> {
    let k: f64 = rng.random_range(0.9..1.1);
    let bx = rng.random_range(70.0..cfg.width - 70.0);
    let by = rng.random_range(105.0..cfg.height - 105.0);
    let jitter = Normal::new(0.0, cfg.joint_jitter.max(0.0)).expect("valid jitter");
    let swing = [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)];
    let mut pts = [Point::default(); NUM_JOINTS];
    for (i, (x, y)) in TEMPLATE.iter().enumerate() {
        let j = Joint::ALL[i];
        let (mut x, mut y) = (*x, *y);
        // swing arms about the shoulders
        let side = match j {
            Joint::LeftElbow | Joint::LeftWrist => Some((0, TEMPLATE[Joint::LeftShoulder.index()])),
            Joint::RightElbow | Joint::RightWrist => Some((1, TEMPLATE[Joint::RightShoulder.index()])),
            _ => None,
        };
        if let Some((s, (sx, sy))) = side {
            let (dx, dy) = (x - sx, y - sy);
            let (sin, cos) = f64::sin_cos(swing[s]);
            x = sx + cos * dx - sin * dy;
            y = sy + sin * dx + cos * dy;
        }
        pts[i] = Point::new(bx + k * x + jitter.sample(rng), by + k * y + jitter.sample(rng));
    }
    Pose::new(pts)
}

fn sample_shape(rng: &mut impl Rng, spec: &SynthClassSpec) -> (f64, f64) {
    let za: f64 = StandardNormal.sample(rng);
    let zr: f64 = StandardNormal.sample(rng);
    let a = spec.aspect[0] + spec.aspect[1] * za;
    let r = spec.perimeter[0] + spec.perimeter[1] * zr;
    // h / w = e^a, h + w = e^r
    let w = r.exp() / (1.0 + a.exp());
    (w, r.exp() - w)
}

/// Box from the class's geometric model, clipped to the image; `None` when
/// it falls outside.
fn sample_item_box(rng: &mut impl Rng, spec: &SynthClassSpec, pose: &Pose, cfg: &SynthConfig) -> Option<BoundingBox> {
    let gmm = Gmm2D::new(spec.offsets.clone()).expect("validated offsets");
    let t = pose.location(spec.anchor);
    let o = gmm.sample(rng);
    let (w, h) = sample_shape(rng, spec);
    clip(BoundingBox::from_center(t.x + o[0], t.y + o[1], w, h).ok()?, cfg)
}

fn clip(b: BoundingBox, cfg: &SynthConfig) -> Option<BoundingBox> {
    let clipped = BoundingBox::new(b.x1().max(0.0), b.y1().max(0.0), b.x2().min(cfg.width), b.y2().min(cfg.height)).ok()?;
    // reject boxes mostly outside the image
    (clipped.area() >= 0.5 * b.area()).then_some(clipped)
}

fn random_box(rng: &mut impl Rng, cfg: &SynthConfig, min: f64, max: f64) -> BoundingBox {
    let w = rng.random_range(min..max);
    let h = rng.random_range(min..max);
    let x = rng.random_range(0.0..cfg.width - w);
    let y = rng.random_range(0.0..cfg.height - h);
    BoundingBox::new(x, y, x + w, y + h).expect("positive size")
}

fn jitter_box(rng: &mut impl Rng, b: &BoundingBox, amount: f64, cfg: &SynthConfig) -> Option<BoundingBox> {
    let c = b.center();
    let dx = rng.random_range(-amount..amount) * b.width();
    let dy = rng.random_range(-amount..amount) * b.height();
    let sw = (1.0 + rng.random_range(-amount..amount)).max(0.2);
    let sh = (1.0 + rng.random_range(-amount..amount)).max(0.2);
    clip(BoundingBox::from_center(c.x + dx, c.y + dy, b.width() * sw, b.height() * sh).ok()?, cfg)
}

/// Appearance of a box given the detected items of its scene: a blend toward
/// the best-overlapping item's cluster, scaled by the overlap.
fn box_feature(rng: &mut impl Rng, record: &SynthRecord, b: &BoundingBox, items: &[(&str, BoundingBox)]) -> Vec<f32> {
    let best = items
        .iter()
        .map(|(c, g)| (*c, iou(b, g)))
        .fold(None::<(&str, f64)>, |acc, (c, v)| match acc {
            Some((_, bv)) if bv >= v => acc,
            _ => Some((c, v)),
        });
    match best {
        Some((c, v)) if v >= 0.1 => record.feature(rng, Some(c), v.min(1.0).powf(0.5)),
        _ => record.feature(rng, None, 0.0),
    }
}

fn generate_scene(record: &SynthRecord, index: usize, split: Split) -> Result<Scene> {
    let cfg = &record.config;
    let mut rng = seed::rng(seed::derive(record.seed, &[1, index as u64]));
    let pose = sample_pose(&mut rng, cfg)?;
    let mut items = Vec::new();
    let mut absent = Vec::new();
    for spec in &cfg.classes {
        if rng.random_bool(spec.presence) {
            if let Some(b) = sample_item_box(&mut rng, spec, &pose, cfg) {
                items.push(AnnotationBox { class: spec.name.clone(), bbox: b });
                continue;
            }
        }
        absent.push(spec);
    }
    let detected: Vec<(&str, BoundingBox)> = items
        .iter()
        .filter(|a| cfg.classes.iter().any(|c| c.detected && c.name == a.class))
        .map(|a| (a.class.as_str(), a.bbox))
        .collect();

    let mut boxes: Vec<(BoundingBox, Option<(String, f64)>)> = Vec::new();
    for (_, g) in &detected {
        boxes.push((jitter_box(&mut rng, g, 0.04, cfg).unwrap_or(*g), None));
        for k in 1..cfg.jittered_per_item {
            let amount = 0.1 + 0.15 * k as f64;
            if let Some(b) = jitter_box(&mut rng, g, amount, cfg) {
                boxes.push((b, None));
            }
        }
    }
    for spec in absent.iter().filter(|s| s.detected) {
        for _ in 0..cfg.geometric_decoys {
            if let Some(b) = sample_item_box(&mut rng, spec, &pose, cfg) {
                boxes.push((b, None));
            }
        }
    }
    let detected_specs: Vec<&SynthClassSpec> = cfg.classes.iter().filter(|c| c.detected).collect();
    for _ in 0..cfg.appearance_decoys {
        let spec = detected_specs[rng.random_range(0..detected_specs.len())];
        let (w, h) = sample_shape(&mut rng, spec);
        let b = random_box(&mut rng, cfg, 4.0, 8.0);
        if let Some(b) = clip(BoundingBox::from_center(b.center().x, b.center().y, w, h)?, cfg) {
            let strength = rng.random_range(0.6..1.0);
            boxes.push((b, Some((spec.name.clone(), strength))));
        }
    }
    for _ in 0..cfg.random_proposals {
        boxes.push((random_box(&mut rng, cfg, 8.0, 70.0), None));
    }

    // shuffle so proposal ids carry no information
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut proposals = Vec::with_capacity(boxes.len());
    let mut features = FeatureMatrix::empty(cfg.feature_dim);
    for (id, &i) in order.iter().enumerate() {
        let (b, decoy) = &boxes[i];
        let f = match decoy {
            Some((class, s)) if detected.iter().all(|(_, g)| iou(b, g) < 0.1) => record.feature(&mut rng, Some(class), *s),
            _ => box_feature(&mut rng, record, b, &detected),
        };
        proposals.push(Proposal { id: id as u64, bbox: *b });
        features.push_row(&f)?;
    }
    let prefix = match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    };
    Ok(Scene { id: format!("{prefix}-{index:05}"), split, pose, items, proposals, features })
}

/// Every scene of the configured splits, in manifest order.
pub fn generate_scenes(record: &SynthRecord) -> Result<Vec<Scene>> {
    let cfg = &record.config;
    let splits = [(Split::Train, cfg.train), (Split::Val, cfg.val), (Split::Test, cfg.test)];
    let mut scenes = Vec::new();
    let mut index = 0;
    for (split, n) in splits {
        for _ in 0..n {
            scenes.push(generate_scene(record, index, split)?);
            index += 1;
        }
    }
    Ok(scenes)
}

pub const RECORD_FILE: &str = "synth.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes a complete dataset under `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, record: &SynthRecord) -> Result<PathBuf> {
    let scenes = generate_scenes(record)?;
    let mut images = Vec::with_capacity(scenes.len());
    for s in &scenes {
        let rel = |sub: &str, ext: &str| PathBuf::from(sub).join(format!("{}.{ext}", s.id));
        let entry = ImageEntry {
            id: s.id.clone(),
            width: record.config.width,
            height: record.config.height,
            split: s.split,
            pose: Some(rel("poses", "json")),
            label_map: None,
            annotations: Some(rel("annotations", "json")),
            proposals: Some(rel("proposals", "jsonl")),
            features: Some(rel("features", "feat")),
        };
        write_pose(&dir.join(entry.pose.as_ref().expect("set")), &s.pose)?;
        write_annotations(&dir.join(entry.annotations.as_ref().expect("set")), &s.items)?;
        write_proposals(&dir.join(entry.proposals.as_ref().expect("set")), &s.id, &s.proposals)?;
        let index = FeatureIndex {
            rows: s
                .proposals
                .iter()
                .map(|p| FeatureRow { image_id: s.id.clone(), box_id: format!("proposal:{}", p.id) })
                .collect(),
        };
        write_features(&dir.join(entry.features.as_ref().expect("set")), &s.features, &index)?;
        images.push(entry);
    }
    let manifest = Manifest { classes: record.config.detected_classes(), class_merge: BTreeMap::new(), images };
    let path = dir.join(MANIFEST_FILE);
    write_versioned(&path, schema::MANIFEST, &manifest)?;
    write_versioned(&dir.join(RECORD_FILE), schema::SYNTH, record)?;
    Ok(path)
}

pub fn read_record(path: &Path) -> Result<SynthRecord> {
    read_versioned(path, schema::SYNTH)
}

/// Stand-in for an external feature extractor on synthetic data. Proposal
/// patches reuse the image's proposal features; ground-truth patches get an
/// undiluted sample of their class's cluster; excluded boxes get background
/// noise. Row order: positives by class, then background, then discarded.
pub fn patch_features(ds: &Dataset, patches: &PatchLabelSet, record: &SynthRecord) -> Result<(FeatureMatrix, FeatureIndex)> {
    let mut cache: BTreeMap<String, (BTreeMap<u64, usize>, FeatureMatrix)> = BTreeMap::new();
    let mut matrix = FeatureMatrix::empty(record.config.feature_dim);
    let mut rows = Vec::new();
    let all = patches
        .positives
        .iter()
        .flat_map(|(class, v)| v.iter().map(move |p| (Some(class.as_str()), p)))
        .chain(patches.background.iter().map(|p| (None, p)))
        .chain(patches.discarded.iter().map(|p| (None, p)));
    for (class, p) in all {
        let img = ds
            .image(&p.image_id)
            .ok_or_else(|| Error::validation(format!("patch refers to unknown image `{}`", p.image_id)))?;
        let image_index = ds.manifest.images.iter().position(|i| i.id == img.id).expect("image exists") as u64;
        let f: Vec<f32> = match p.source {
            PatchSource::Proposal(id) => {
                if !cache.contains_key(&img.id) {
                    let rel = img.features.as_ref().ok_or_else(|| Error::validation(format!("image `{}` has no features", img.id)))?;
                    let (m, index) = read_features(&ds.resolve(rel))?;
                    let ids = index
                        .rows
                        .iter()
                        .enumerate()
                        .filter_map(|(i, r)| r.box_id.strip_prefix("proposal:").and_then(|s| s.parse().ok()).map(|id| (id, i)))
                        .collect();
                    cache.insert(img.id.clone(), (ids, m));
                }
                let (ids, m) = &cache[&img.id];
                let row = ids.get(&id).ok_or_else(|| Error::validation(format!("no features for proposal {id} of `{}`", img.id)))?;
                m.row(*row).to_vec()
            }
            PatchSource::GroundTruth(i) => {
                let mut rng = seed::rng(seed::derive(record.seed, &[2, image_index, i as u64]));
                record.feature(&mut rng, class, 1.0)
            }
            PatchSource::Excluded(i) => {
                let mut rng = seed::rng(seed::derive(record.seed, &[3, image_index, i as u64]));
                record.feature(&mut rng, None, 0.0)
            }
        };
        matrix.push_row(&f)?;
        rows.push(FeatureRow { image_id: p.image_id.clone(), box_id: p.box_id() });
    }
    Ok((matrix, FeatureIndex { rows }))
}

/// Training boxes for one class whose center sits at a fixed offset from two
/// planted joints (isotropic noise `sigma`) while all other joints are uniform
/// over the image.
#[derive(Debug, Clone)]
pub struct PlantedClass {
    pub class: ClassLabel,
    pub planted: [Joint; 2],
    pub samples: Vec<(BoundingBox, Pose)>,
}

pub fn planted_joint_classes(seed_: u64, classes: usize, per_class: usize, sigma: f64) -> Result<Vec<PlantedClass>> {
    let (width, height) = (400.0, 400.0);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::validation(e.to_string()))?;
    (0..classes)
        .map(|c| {
            let mut rng = seed::rng(seed::derive(seed_, &[c as u64]));
            let first = rng.random_range(0..NUM_JOINTS);
            let second = (first + rng.random_range(1..NUM_JOINTS)) % NUM_JOINTS;
            let planted = [Joint::ALL[first], Joint::ALL[second]];
            let rel: [[f64; 2]; 2] = std::array::from_fn(|_| [rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0)]);
            let center_rel = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
            let (w0, h0) = (rng.random_range(10.0..40.0), rng.random_range(10.0..40.0));
            let samples = (0..per_class)
                .map(|_| {
                    let base = [rng.random_range(100.0..300.0), rng.random_range(100.0..300.0)];
                    let mut pts = [Point::default(); NUM_JOINTS];
                    for (i, p) in pts.iter_mut().enumerate() {
                        *p = Point::new(rng.random_range(0.0..width), rng.random_range(0.0..height));
                        if let Some(k) = planted.iter().position(|j| j.index() == i) {
                            *p = Point::new(base[0] + rel[k][0], base[1] + rel[k][1]);
                        }
                    }
                    let cx = base[0] + center_rel[0] + noise.sample(&mut rng);
                    let cy = base[1] + center_rel[1] + noise.sample(&mut rng);
                    let w = w0 * rng.random_range(0.9..1.1);
                    let h = h0 * rng.random_range(0.9..1.1);
                    Ok((BoundingBox::from_center(cx, cy, w, h)?, Pose::new(pts)?))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PlantedClass { class: ClassLabel::new(c as u32, format!("class{c}")), planted, samples })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::{fit_class_priors, PriorConfig, PriorSample};

    fn small() -> SynthConfig {
        SynthConfig { train: 6, val: 2, test: 3, ..Default::default() }
    }

    #[test]
    fn scenes_are_deterministic_and_valid() {
        let rec = SynthRecord::new(small(), 4).unwrap();
        let a = generate_scenes(&rec).unwrap();
        let b = generate_scenes(&SynthRecord::new(small(), 4).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scenes(&SynthRecord::new(small(), 5).unwrap()).unwrap());
        assert_eq!(a.len(), 11);
        for s in &a {
            assert_eq!(s.proposals.len(), s.features.rows());
            for p in &s.proposals {
                assert!(p.bbox.x1() >= 0.0 && p.bbox.x2() <= 240.0 && p.bbox.y1() >= 0.0 && p.bbox.y2() <= 300.0);
            }
        }
    }

    #[test]
    fn item_features_sit_near_their_cluster() {
        let rec = SynthRecord::new(SynthConfig { train: 30, val: 0, test: 0, ..Default::default() }, 1).unwrap();
        let scenes = generate_scenes(&rec).unwrap();
        let mean = rec.mean("hat");
        let mut on = Vec::new();
        let mut off = Vec::new();
        for s in &scenes {
            let Some(hat) = s.items.iter().find(|a| a.class == "hat") else { continue };
            for (p, f) in s.proposals.iter().zip(s.features.iter_rows()) {
                let proj: f64 = mean.iter().zip(f).map(|(m, x)| m * *x as f64).sum::<f64>() / 2.5;
                if iou(&p.bbox, &hat.bbox) > 0.8 {
                    on.push(proj);
                } else if s.items.iter().all(|a| iou(&p.bbox, &a.bbox) < 0.1) {
                    off.push(proj);
                }
            }
        }
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(avg(&on) > 2.0, "{}", avg(&on));
        assert!(avg(&off) < 0.8, "{}", avg(&off));
    }

    #[test]
    fn zero_shape_noise_hits_the_variance_floor() {
        let mut cfg = small();
        cfg.train = 40;
        for c in &mut cfg.classes {
            c.aspect[1] = 0.0;
            c.perimeter[1] = 0.0;
            c.presence = 1.0;
        }
        let rec = SynthRecord::new(cfg, 2).unwrap();
        let scenes = generate_scenes(&rec).unwrap();
        let classes = rec.config.detected_classes();
        let hat = classes.iter().find(|c| c.name == "hat").unwrap();
        let samples: Vec<PriorSample> = scenes
            .iter()
            .filter(|s| s.split == Split::Train)
            .flat_map(|s| s.items.iter().filter(|a| a.class == "hat").map(move |a| PriorSample { bbox: a.bbox, pose: &s.pose, class: hat }))
            // clipping at the border changes the shape
            .filter(|p| p.bbox.y1() > 0.0)
            .collect();
        let report = fit_class_priors(std::slice::from_ref(hat), &samples, &PriorConfig::default()).unwrap();
        let m = &report.models["hat"];
        assert!(m.aspect.variance <= 1e-4 * (1.0 + 1e-9), "{}", m.aspect.variance);
        assert!(m.perimeter.variance <= 1e-4 * (1.0 + 1e-9));
    }

    #[test]
    fn planted_generator_shapes() {
        let classes = planted_joint_classes(3, 5, 50, 3.0).unwrap();
        assert_eq!(classes.len(), 5);
        for c in &classes {
            assert_ne!(c.planted[0], c.planted[1]);
            assert_eq!(c.samples.len(), 50);
        }
    }
}
