//! Detection matching, PR curves, average precision, the
//! clean-run-as-ground-truth protocol, control patches, and condition
//! suites for the size/count sweeps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{Detection, DetectorAdapter, PERSON_CLASS};
use crate::error::Result;
use crate::image::{Patch, PatchMode};
use crate::rngutil::derive_seed;
use crate::scenegen::AnnotatedImage;
use crate::transforms::{compose_into, sample_transform, BBox, TransformConfig};

/// Blank control patches use this intensity.
pub const BLANK_PATCH_VALUE: f64 = 0.75;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Precision/recall points swept from high to low confidence threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PRCurve {
    /// `(recall, precision)` pairs, one per prediction in descending
    /// confidence order.
    pub points: Vec<(f64, f64)>,
    pub confidences: Vec<f64>,
    pub gt_count: usize,
}

/// Greedy confidence-sweep matching: each prediction claims the unmatched
/// ground-truth box of its image with the highest IoU at or above the
/// threshold.
pub fn pr_curve(
    predictions: &[(usize, Detection)],
    ground_truth: &[(usize, BBox)],
    iou_threshold: f64,
) -> PRCurve {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[b]
            .1
            .objectness
            .partial_cmp(&predictions[a].1.objectness)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut matched = vec![false; ground_truth.len()];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points = Vec::with_capacity(predictions.len());
    let mut confidences = Vec::with_capacity(predictions.len());
    let ngt = ground_truth.len();
    for &idx in &order {
        let (img, det) = &predictions[idx];
        let mut best: Option<(usize, f64)> = None;
        for (gi, (gimg, gbox)) in ground_truth.iter().enumerate() {
            if gimg != img || matched[gi] {
                continue;
            }
            let overlap = det.box_.iou(gbox);
            if overlap >= iou_threshold && best.map_or(true, |(_, b)| overlap > b) {
                best = Some((gi, overlap));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        let recall = if ngt == 0 { 0.0 } else { tp as f64 / ngt as f64 };
        let precision = tp as f64 / (tp + fp) as f64;
        points.push((recall, precision));
        confidences.push(det.objectness);
    }
    PRCurve {
        points,
        confidences,
        gt_count: ngt,
    }
}

/// Area under the PR curve with all-point interpolation:
/// `AP = sum_k (r_k - r_{k-1}) * max_{j >= k} precision_j`.
pub fn average_precision(curve: &PRCurve) -> f64 {
    if curve.points.is_empty() {
        return 0.0;
    }
    let n = curve.points.len();
    // interpolated precision: running max from the low-confidence end
    let mut interp = vec![0.0; n];
    let mut run = 0.0f64;
    for k in (0..n).rev() {
        run = run.max(curve.points[k].1);
        interp[k] = run;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..n {
        let r = curve.points[k].0;
        if r > prev_recall {
            ap += (r - prev_recall) * interp[k];
            prev_recall = r;
        }
    }
    ap
}

/// Run the detector on unpatched images; its detections become the ground
/// truth the patched runs are scored against.
pub fn clean_gt_protocol(
    adapter: &DetectorAdapter,
    images: &[AnnotatedImage],
) -> Result<Vec<(usize, BBox)>> {
    let mut gt = Vec::new();
    for (i, scene) in images.iter().enumerate() {
        for det in adapter.detect(&scene.image)? {
            if det.class_id == PERSON_CLASS {
                gt.push((i, det.box_));
            }
        }
    }
    Ok(gt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlKind {
    Blank,
    Noise,
}

/// Control baselines: constant 0.75 and i.i.d. Uniform(0, 1) noise.
pub fn make_control_patch(kind: ControlKind, side: usize, rng: &mut impl Rng) -> Result<Patch> {
    match kind {
        ControlKind::Blank => Patch::new(side, BLANK_PATCH_VALUE, PatchMode::PixelLevel),
        ControlKind::Noise => {
            let pixels: Vec<f64> = (0..side * side).map(|_| rng.gen::<f64>()).collect();
            Patch::from_pixels(side, pixels, PatchMode::PixelLevel)
        }
    }
}

/// One labeled patch condition; `patch = None` is the unpatched control.
#[derive(Debug, Clone)]
pub struct Condition {
    pub label: String,
    pub patch: Option<Patch>,
    /// Size-sweep multiplier on the placed patch side.
    pub scale: f64,
}

impl Condition {
    pub fn new(label: impl Into<String>, patch: Option<Patch>) -> Self {
        Self {
            label: label.into(),
            patch,
            scale: 1.0,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub seed: u64,
    pub transform: TransformConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            seed: 0,
            transform: TransformConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub condition: String,
    pub adapter: String,
    pub scale: f64,
    /// AP of the patched run against clean-run ground truth.
    pub ap_clean_gt: f64,
    /// `(1 - ap_clean_gt) * 100`.
    pub ap_drop: f64,
    /// AP against the generator annotations, for context.
    pub ap_annotations: f64,
    pub images: usize,
    pub gt_boxes: usize,
}

/// Composite every condition onto the dataset with placements frozen per
/// `(image, person, seed)` so all conditions see identical draws, then
/// score each patched run against the adapter's clean-run ground truth.
pub fn run_condition_suite(
    dataset: &[AnnotatedImage],
    adapters: &[DetectorAdapter],
    conditions: &[Condition],
    config: &EvalConfig,
) -> Result<Vec<APReport>> {
    Ok(run_condition_suite_with_curves(dataset, adapters, conditions, config)?
        .into_iter()
        .map(|(report, _)| report)
        .collect())
}

/// [`run_condition_suite`] plus each condition's clean-GT PR curve.
pub fn run_condition_suite_with_curves(
    dataset: &[AnnotatedImage],
    adapters: &[DetectorAdapter],
    conditions: &[Condition],
    config: &EvalConfig,
) -> Result<Vec<(APReport, PRCurve)>> {
    config.transform.validate()?;
    let annotations: Vec<(usize, BBox)> = dataset
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.persons.iter().map(move |p| (i, *p)))
        .collect();
    let mut reports = Vec::new();
    for adapter in adapters {
        let clean_gt = clean_gt_protocol(adapter, dataset)?;
        for condition in conditions {
            let mut predictions: Vec<(usize, Detection)> = Vec::new();
            for (i, scene) in dataset.iter().enumerate() {
                let image = match &condition.patch {
                    None => scene.image.clone(),
                    Some(patch) => {
                        let mut composite = scene.image.clone();
                        for (j, person) in scene.persons.iter().enumerate() {
                            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                                config.seed,
                                i as u64,
                                j as u64,
                            ));
                            let t = sample_transform(&mut rng, &config.transform)?;
                            compose_into(
                                &mut composite,
                                patch,
                                person,
                                &t,
                                condition.scale,
                                config.transform.patch_ratio,
                                None,
                            )?;
                        }
                        composite
                    }
                };
                for det in adapter.detect(&image)? {
                    if det.class_id == PERSON_CLASS {
                        predictions.push((i, det));
                    }
                }
            }
            let curve = pr_curve(&predictions, &clean_gt, config.iou_threshold);
            let ap = ap_of(&predictions, &clean_gt, config.iou_threshold);
            let ap_ann = ap_of(&predictions, &annotations, config.iou_threshold);
            reports.push((
                APReport {
                    condition: condition.label.clone(),
                    adapter: adapter.name().to_string(),
                    scale: condition.scale,
                    ap_clean_gt: ap,
                    ap_drop: (1.0 - ap) * 100.0,
                    ap_annotations: ap_ann,
                    images: dataset.len(),
                    gt_boxes: clean_gt.len(),
                },
                curve,
            ));
        }
    }
    Ok(reports)
}

fn ap_of(predictions: &[(usize, Detection)], gt: &[(usize, BBox)], iou_threshold: f64) -> f64 {
    if gt.is_empty() {
        // no ground truth: perfect iff nothing was predicted
        return if predictions.is_empty() { 1.0 } else { 0.0 };
    }
    average_precision(&pr_curve(predictions, gt, iou_threshold))
}
