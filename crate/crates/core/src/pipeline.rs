//! Dataset-level stages: prior fitting, patch labeling, appearance training
//! with validation calibration, detection and evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::appearance::{
    label_patches, log_sigmoid, select_lambda, train_svm, AppearanceMetadata, AppearanceModel, FeatureMatrix,
    LambdaChoice, PatchImage, PatchLabelSet,
};
use crate::config::PipelineConfig;
use crate::dataio::{
    AppearanceModelFile, ClassMetrics, Dataset, FeatureIndex, ImageEntry, ImageGroundTruth, MetricsReport,
    PriorModelFile, Split,
};
use crate::detection::{detect_image, nms, Ablation, Detection, ImageInput, ModelSet, ScoreComponents};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_detections, ground_truth_by_class, mean_ap, pr_curve, proposal_stats as stats_of, ClassGroundTruth,
    PrCurve, ProposalStats, StatsImage,
};
use crate::geometry::{geometric_features, ClassLabel, Pose, Proposal};
use crate::priors::{fit_class_priors, log_prior, ClassPriorModel, PriorSample, SkippedClass};
use crate::seed;

/// Training and validation images. An explicit validation split wins;
/// otherwise a seeded fraction of the training split is held out.
pub fn training_splits<'a>(ds: &'a Dataset, cfg: &PipelineConfig) -> (Vec<&'a ImageEntry>, Vec<&'a ImageEntry>) {
    let train: Vec<&ImageEntry> = ds.images(Split::Train).collect();
    let val: Vec<&ImageEntry> = ds.images(Split::Val).collect();
    if !val.is_empty() || cfg.validation_fraction == 0.0 {
        return (train, val);
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut seed::rng(cfg.split_seed()));
    let n_val = ((train.len() as f64) * cfg.validation_fraction).round() as usize;
    let mut is_val = vec![false; train.len()];
    for &i in &order[..n_val.min(train.len())] {
        is_val[i] = true;
    }
    let (v, t): (Vec<_>, Vec<_>) = train.into_iter().zip(is_val).partition(|(_, v)| *v);
    (t.into_iter().map(|(i, _)| i).collect(), v.into_iter().map(|(i, _)| i).collect())
}

fn par_map<'a, T: Send>(
    images: &[&'a ImageEntry],
    f: impl Fn(&'a ImageEntry) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    images.par_iter().map(|img| f(img)).collect()
}

pub fn fit_priors(ds: &Dataset, cfg: &PipelineConfig) -> Result<PriorModelFile> {
    let (train, _) = training_splits(ds, cfg);
    let loaded: Vec<(Pose, ImageGroundTruth)> =
        par_map(&train, |img| Ok((ds.require_pose(img)?, ds.require_ground_truth(img)?)))?;
    let samples: Vec<PriorSample<'_>> = loaded
        .iter()
        .flat_map(|(pose, gt)| gt.boxes.iter().map(move |b| PriorSample { bbox: b.bbox, pose, class: &b.class }))
        .collect();
    let prior_cfg = cfg.prior_config();
    let report = fit_class_priors(ds.classes(), &samples, &prior_cfg)?;
    for s in &report.skipped {
        log::warn!("no prior for class `{}`: {}", s.class, s.reason);
    }
    Ok(PriorModelFile { config: prior_cfg, models: report.models, skipped: report.skipped })
}

/// Labels patches of the training images (validation images excluded).
pub fn make_patches(ds: &Dataset, cfg: &PipelineConfig) -> Result<PatchLabelSet> {
    let (train, _) = training_splits(ds, cfg);
    let loaded: Vec<(Vec<Proposal>, ImageGroundTruth)> =
        par_map(&train, |img| Ok((ds.proposals(img)?, ds.require_ground_truth(img)?)))?;
    let inputs: Vec<PatchImage<'_>> = train
        .iter()
        .zip(&loaded)
        .map(|(img, (props, gt))| PatchImage {
            image_id: &img.id,
            width: img.width,
            height: img.height,
            proposals: props,
            ground_truth: &gt.boxes,
            excluded: &gt.excluded,
        })
        .collect();
    label_patches(&inputs, cfg.enlargement)
}

/// One validation image, preprocessed for calibration.
struct ValImage {
    id: String,
    proposals: Vec<Proposal>,
    features: FeatureMatrix,
    pose: Option<Pose>,
}

fn load_val(ds: &Dataset, val: &[&ImageEntry]) -> Result<(Vec<ValImage>, BTreeMap<String, ClassGroundTruth>)> {
    let loaded: Vec<(ValImage, ImageGroundTruth)> = par_map(val, |img| {
        let proposals = ds.proposals(img)?;
        let features = ds.features(img, &proposals)?;
        Ok((ValImage { id: img.id.clone(), proposals, features, pose: Some(ds.require_pose(img)?) }, ds.require_ground_truth(img)?))
    })?;
    let gt = ground_truth_by_class(loaded.iter().map(|(v, g)| (v.id.as_str(), g.boxes.as_slice())));
    Ok((loaded.into_iter().map(|(v, _)| v).collect(), gt))
}

/// Validation AP of one class under the full score with the given margins.
fn validation_ap(
    class: &ClassLabel,
    val: &[ValImage],
    priors: &[Vec<f64>],
    margins: &[Vec<f64>],
    lambda: f64,
    gt: Option<&ClassGroundTruth>,
    nms_iou: f64,
) -> Option<f64> {
    let empty = ClassGroundTruth::new();
    let mut dets = Vec::new();
    for ((img, prior), margin) in val.iter().zip(priors).zip(margins) {
        let scored: Vec<Detection> = img
            .proposals
            .iter()
            .zip(prior)
            .zip(margin)
            .map(|((p, lp), m)| Detection {
                image_id: img.id.clone(),
                class: class.clone(),
                bbox: p.bbox,
                proposal_id: p.id,
                log_score: log_sigmoid(lambda * m) + lp,
                components: ScoreComponents::default(),
            })
            .collect();
        dets.extend(nms(scored, nms_iou));
    }
    let refs: Vec<&Detection> = dets.iter().collect();
    pr_curve(&class.name, &refs, gt.unwrap_or(&empty)).ap
}

/// Row of every labeled patch, keyed by `(image id, box id)`.
fn patch_rows(index: &FeatureIndex) -> BTreeMap<(&str, &str), usize> {
    index.rows.iter().enumerate().map(|(i, r)| ((r.image_id.as_str(), r.box_id.as_str()), i)).collect()
}

/// One-vs-rest SVM per class on patch features, with `c` and the sigmoid
/// slope chosen jointly per class by validation AP of the full score.
pub fn train_appearance(
    ds: &Dataset,
    patches: &PatchLabelSet,
    features: &FeatureMatrix,
    index: &FeatureIndex,
    priors: &PriorModelFile,
    cfg: &PipelineConfig,
) -> Result<AppearanceModelFile> {
    if index.rows.len() != features.rows() {
        return Err(Error::validation("patch feature index and matrix disagree in length"));
    }
    let rows = patch_rows(index);
    let lookup = |p: &crate::appearance::Patch| -> Result<&[f32]> {
        let key = (p.image_id.as_str(), p.box_id());
        rows.get(&(key.0, key.1.as_str()))
            .map(|&i| features.row(i))
            .ok_or_else(|| Error::validation(format!("no feature row for patch ({}, {})", p.image_id, p.box_id())))
    };
    let mut positives: BTreeMap<&str, Vec<&[f32]>> = BTreeMap::new();
    for (class, list) in &patches.positives {
        positives.insert(class, list.iter().map(lookup).collect::<Result<_>>()?);
    }
    let background: Vec<&[f32]> = patches.background.iter().map(lookup).collect::<Result<_>>()?;

    let (_, val) = training_splits(ds, cfg);
    let (val_images, val_gt) = load_val(ds, &val)?;
    let detect_cfg = cfg.detect_config();

    let mut c_grid = cfg.c_grid.clone();
    c_grid.sort_by(f64::total_cmp);
    c_grid.dedup();

    let results: Vec<Result<std::result::Result<AppearanceModel, SkippedClass>>> = ds
        .classes()
        .par_iter()
        .map(|class| {
            let pos = positives.get(class.name.as_str()).cloned().unwrap_or_default();
            if pos.is_empty() {
                return Ok(Err(SkippedClass { class: class.clone(), reason: "no positive patches".into() }));
            }
            let neg: Vec<&[f32]> = positives
                .iter()
                .filter(|(k, _)| **k != class.name)
                .flat_map(|(_, v)| v.iter().copied())
                .chain(background.iter().copied())
                .collect();
            let prior = priors.models.get(&class.name);
            if prior.is_none() {
                log::warn!("class `{}` has no prior; calibrating on appearance alone", class.name);
            }
            let prior_terms: Vec<Vec<f64>> = val_images
                .iter()
                .map(|img| {
                    img.proposals
                        .iter()
                        .map(|p| match prior {
                            Some(m) => Ok(log_prior(m, &geometric_features(&p.bbox), img.pose.as_ref(), detect_cfg.missing_joint)?.total()),
                            None => Ok(0.0),
                        })
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<_>>()?;

            let mut best: Option<(f64, LambdaChoice, crate::appearance::SvmFit)> = None;
            let mut search = Vec::new();
            for (ci, &c) in c_grid.iter().enumerate() {
                let fit = train_svm(&pos, &neg, c, &cfg.svm_config(class.id, ci))?;
                let margins: Vec<Vec<f64>> =
                    val_images.iter().map(|img| img.features.iter_rows().map(|f| fit.model.margin(f)).collect()).collect();
                let choice = select_lambda(&cfg.lambda_grid, |lambda| {
                    Ok(validation_ap(class, &val_images, &prior_terms, &margins, lambda, val_gt.get(&class.name), detect_cfg.nms_iou))
                });
                let choice = match choice {
                    Ok(ch) => ch,
                    Err(Error::EmptyValidation) => {
                        return Err(Error::validation(format!(
                            "class `{}` has no ground truth in the validation images; cannot calibrate",
                            class.name
                        )))
                    }
                    Err(e) => return Err(e),
                };
                search.extend(choice.table.iter().map(|(l, ap)| (c, *l, *ap)));
                if best.as_ref().is_none_or(|(_, b, _)| choice.ap > b.ap) {
                    best = Some((c, choice, fit));
                }
            }
            let (c, choice, fit) = best.expect("non-empty c grid");
            let metadata = AppearanceMetadata {
                c,
                epochs: cfg.svm_epochs,
                seed: cfg.svm_config(class.id, c_grid.iter().position(|x| *x == c).expect("c in grid")).seed,
                positives: pos.len(),
                negatives: neg.len(),
                objective: fit.objective,
                validation_ap: Some(choice.ap),
                search,
            };
            log::info!("class `{}`: c={c} lambda={} validation AP {:.4}", class.name, choice.lambda, choice.ap);
            Ok(Ok(AppearanceModel::from_svm(class.clone(), fit.model, choice.lambda, metadata)?))
        })
        .collect();

    let mut models = BTreeMap::new();
    let mut skipped = Vec::new();
    for r in results {
        match r? {
            Ok(m) => {
                models.insert(m.class.name.clone(), m);
            }
            Err(s) => {
                log::warn!("no appearance model for class `{}`: {}", s.class, s.reason);
                skipped.push(s);
            }
        }
    }
    Ok(AppearanceModelFile { dim: features.dim(), models, skipped })
}

/// Runs the detector over every image of `split`; detections come out in
/// manifest image order, then class order, then rank.
pub fn detect(
    ds: &Dataset,
    split: Split,
    priors: &BTreeMap<String, ClassPriorModel>,
    appearance: &BTreeMap<String, AppearanceModel>,
    cfg: &PipelineConfig,
) -> Result<Vec<Detection>> {
    let detect_cfg = cfg.detect_config();
    let models = ModelSet { classes: ds.classes(), priors, appearance };
    let images: Vec<&ImageEntry> = ds.images(split).collect();
    let per_image = par_map(&images, |img| {
        let proposals = ds.proposals(img)?;
        let features = if detect_cfg.ablation.uses_appearance() { Some(ds.features(img, &proposals)?) } else { None };
        let pose = if detect_cfg.ablation.uses_geometry() { Some(ds.require_pose(img)?) } else { None };
        let input = ImageInput { image_id: &img.id, proposals: &proposals, features: features.as_ref(), pose: pose.as_ref() };
        let by_class = detect_image(&input, &models, &detect_cfg)?;
        Ok(ds.classes().iter().flat_map(|c| by_class[&c.name].clone()).collect::<Vec<_>>())
    })?;
    Ok(per_image.into_iter().flatten().collect())
}

fn load_ground_truth(ds: &Dataset, images: &[&ImageEntry]) -> Result<Vec<ImageGroundTruth>> {
    par_map(images, |img| ds.require_ground_truth(img))
}

/// Per-class AP and mAP of `detections` against the ground truth of `split`.
pub fn evaluate(
    ds: &Dataset,
    split: Split,
    ablation: Ablation,
    detections: &[Detection],
) -> Result<(MetricsReport, Vec<PrCurve>)> {
    let images: Vec<&ImageEntry> = ds.images(split).collect();
    let gts = load_ground_truth(ds, &images)?;
    let known: std::collections::BTreeSet<&str> = images.iter().map(|i| i.id.as_str()).collect();
    if let Some(d) = detections.iter().find(|d| !known.contains(d.image_id.as_str())) {
        return Err(Error::validation(format!("detection for image `{}` outside the {split} split", d.image_id)));
    }
    let by_class = ground_truth_by_class(images.iter().zip(&gts).map(|(i, g)| (i.id.as_str(), g.boxes.as_slice())));
    let curves = evaluate_detections(ds.classes(), detections, &by_class);
    let summary = mean_ap(&curves)?;
    let classes = curves
        .iter()
        .map(|c| {
            let n = detections.iter().filter(|d| d.class.name == c.class).count();
            (c.class.clone(), ClassMetrics { ap: c.ap, ground_truth: c.ground_truth, detections: n })
        })
        .collect();
    let has_proposals = images.iter().all(|i| i.proposals.is_some());
    let proposal_stats = if has_proposals { Some(proposal_stats_with(ds, &images, &gts)?) } else { None };
    let report = MetricsReport { ablation, split, map: summary.map, classes, undefined: summary.undefined, proposal_stats };
    Ok((report, curves))
}

fn proposal_stats_with(ds: &Dataset, images: &[&ImageEntry], gts: &[ImageGroundTruth]) -> Result<ProposalStats> {
    let proposals: Vec<Vec<Proposal>> = par_map(images, |img| ds.proposals(img))?;
    let inputs: Vec<StatsImage<'_>> =
        proposals.iter().zip(gts).map(|(p, g)| StatsImage { proposals: p, ground_truth: &g.boxes }).collect();
    Ok(stats_of(&inputs))
}

pub fn proposal_stats(ds: &Dataset, split: Split) -> Result<ProposalStats> {
    let images: Vec<&ImageEntry> = ds.images(split).collect();
    let gts = load_ground_truth(ds, &images)?;
    proposal_stats_with(ds, &images, &gts)
}
