//! Built-in reference detector: normalized cross-correlation of anchor-grid
//! crops against an anisotropic Gaussian pedestrian template, squashed
//! through a logistic. Deterministic, closed-form gradients, attackable by
//! bright high-frequency spots.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::transforms::BBox;

use super::{nms, Detection, PERSON_CLASS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTemplateConfig {
    pub name: String,
    /// Anchor box heights in pixels; widths are `height * aspect`.
    pub anchor_heights: Vec<usize>,
    pub aspect: f64,
    /// Grid stride as a fraction of the anchor height.
    pub stride_frac: f64,
    /// Template spread along x as a fraction of the anchor width.
    pub sigma_u_frac: f64,
    /// Template spread along y as a fraction of the anchor height.
    pub sigma_v_frac: f64,
    pub logistic_slope: f64,
    pub logistic_bias: f64,
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for ToyTemplateConfig {
    fn default() -> Self {
        Self {
            name: "builtin-toy".to_string(),
            anchor_heights: vec![64, 96, 128],
            aspect: 0.5,
            stride_frac: 0.25,
            sigma_u_frac: 0.25,
            sigma_v_frac: 1.0 / 3.0,
            logistic_slope: 8.0,
            logistic_bias: -2.0,
            score_threshold: 0.5,
            nms_iou: 0.45,
        }
    }
}

impl ToyTemplateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchor_heights.is_empty() || self.anchor_heights.contains(&0) {
            return Err(Error::Config("anchor heights must be positive".into()));
        }
        if self.aspect <= 0.0
            || self.stride_frac <= 0.0
            || self.sigma_u_frac <= 0.0
            || self.sigma_v_frac <= 0.0
            || self.logistic_slope <= 0.0
        {
            return Err(Error::Config("toy detector parameters must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.score_threshold) || self.score_threshold == 0.0 {
            return Err(Error::Config("score threshold must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config("nms iou must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[inline]
fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Zero-mean, unit-norm template for one anchor size.
#[derive(Debug, Clone)]
struct Template {
    w: usize,
    h: usize,
    stride: usize,
    values: Vec<f64>,
}

impl Template {
    fn new(cfg: &ToyTemplateConfig, height: usize) -> Self {
        let w = ((height as f64 * cfg.aspect).round() as usize).max(1);
        let h = height;
        let stride = ((height as f64 * cfg.stride_frac).round() as usize).max(1);
        let su = cfg.sigma_u_frac * w as f64;
        let sv = cfg.sigma_v_frac * h as f64;
        let mut values = Vec::with_capacity(w * h);
        for v in 0..h {
            for u in 0..w {
                let du = u as f64 - w as f64 / 2.0;
                let dv = v as f64 - h as f64 / 2.0;
                values.push((-(du * du / (2.0 * su * su) + dv * dv / (2.0 * sv * sv))).exp());
            }
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        for x in &mut values {
            *x -= mean;
        }
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut values {
            *x /= norm;
        }
        Self { w, h, stride, values }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Anchor {
    pub tmpl: usize,
    pub x0: usize,
    pub y0: usize,
}

/// Per-anchor objectness scores of one image, reusable for patch-local
/// rescoring in the optimizer's inner loop.
#[derive(Debug, Clone)]
pub(crate) struct ToyScoreCache {
    pub anchors: Vec<Anchor>,
    pub scores: Vec<f64>,
}

#[derive(Debug)]
pub struct ToyDetector {
    config: ToyTemplateConfig,
    templates: Vec<Template>,
}

impl ToyDetector {
    pub fn new(config: ToyTemplateConfig) -> Result<Self> {
        config.validate()?;
        let templates = config
            .anchor_heights
            .iter()
            .map(|&h| Template::new(&config, h))
            .collect();
        Ok(Self { config, templates })
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn config(&self) -> &ToyTemplateConfig {
        &self.config
    }

    /// NCC of the crop at `(x0, y0)` against template `t`; zero-variance
    /// crops score 0. Also returns the crop deviation norm.
    fn ncc_at(&self, image: &GrayImage, t: &Template, x0: usize, y0: usize) -> (f64, f64) {
        let n = (t.w * t.h) as f64;
        let mut dot = 0.0;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let w = image.w();
        let px = image.pixels();
        let mut k = 0;
        for v in 0..t.h {
            let row = (y0 + v) * w + x0;
            for u in 0..t.w {
                let p = px[row + u];
                dot += p * t.values[k];
                sum += p;
                sumsq += p * p;
                k += 1;
            }
        }
        let var = sumsq - sum * sum / n;
        if var <= 1e-12 {
            return (0.0, 0.0);
        }
        let norm = var.sqrt();
        (dot / norm, norm)
    }

    fn objectness(&self, ncc: f64) -> f64 {
        logistic(self.config.logistic_slope * ncc + self.config.logistic_bias)
    }

    /// Score every anchor on the grid.
    pub(crate) fn score_all(&self, image: &GrayImage) -> ToyScoreCache {
        let mut anchors = Vec::new();
        let mut scores = Vec::new();
        for (ti, t) in self.templates.iter().enumerate() {
            if t.h > image.h() || t.w > image.w() {
                continue; // anchor larger than image
            }
            let mut y0 = 0;
            while y0 + t.h <= image.h() {
                let mut x0 = 0;
                while x0 + t.w <= image.w() {
                    let (ncc, _) = self.ncc_at(image, t, x0, y0);
                    anchors.push(Anchor { tmpl: ti, x0, y0 });
                    scores.push(self.objectness(ncc));
                    x0 += t.stride;
                }
                y0 += t.stride;
            }
        }
        ToyScoreCache { anchors, scores }
    }

    pub(crate) fn anchor_box(&self, a: &Anchor) -> BBox {
        let t = &self.templates[a.tmpl];
        BBox::new(a.x0 as f64, a.y0 as f64, t.w as f64, t.h as f64)
    }

    /// Max objectness over anchors at or above the operating threshold;
    /// 0 when none qualifies.
    pub(crate) fn max_from_cache(&self, cache: &ToyScoreCache) -> f64 {
        cache
            .scores
            .iter()
            .copied()
            .filter(|&s| s >= self.config.score_threshold)
            .fold(0.0, f64::max)
    }

    /// Like [`Self::max_from_cache`], but rescoring from `image` only the
    /// anchors whose crop intersects one of `regions`; everything else
    /// reuses the cached score. `image` must differ from the cached image
    /// only inside the regions.
    pub(crate) fn rescore_max(
        &self,
        image: &GrayImage,
        cache: &ToyScoreCache,
        regions: &[BBox],
    ) -> f64 {
        let overlaps = |b: &BBox, r: &BBox| {
            b.x < r.x + r.w && r.x < b.x + b.w && b.y < r.y + r.h && r.y < b.y + b.h
        };
        let mut best = 0.0f64;
        for (a, &cached) in cache.anchors.iter().zip(&cache.scores) {
            let b = self.anchor_box(a);
            let score = if regions.iter().any(|r| overlaps(&b, r)) {
                let t = &self.templates[a.tmpl];
                let (ncc, _) = self.ncc_at(image, t, a.x0, a.y0);
                self.objectness(ncc)
            } else {
                cached
            };
            if score >= self.config.score_threshold && score > best {
                best = score;
            }
        }
        best
    }

    pub fn detect(&self, image: &GrayImage) -> Vec<Detection> {
        let cache = self.score_all(image);
        let mut dets: Vec<Detection> = cache
            .anchors
            .iter()
            .zip(&cache.scores)
            .filter(|(_, &s)| s >= self.config.score_threshold)
            .map(|(a, &s)| Detection {
                box_: self.anchor_box(a),
                objectness: s,
                class_score: 1.0,
                class_id: PERSON_CLASS.to_string(),
            })
            .collect();
        dets.sort_by(|a, b| {
            b.objectness
                .partial_cmp(&a.objectness)
                .unwrap()
                .then_with(|| {
                    (a.box_.y, a.box_.x, a.box_.h)
                        .partial_cmp(&(b.box_.y, b.box_.x, b.box_.h))
                        .unwrap()
                })
        });
        nms(dets, self.config.nms_iou)
    }

    /// Closed-form gradient of `detection`'s objectness with respect to
    /// every image pixel; zero outside the detection's crop.
    pub fn image_gradient(&self, image: &GrayImage, detection: &Detection) -> Result<Vec<f64>> {
        let b = &detection.box_;
        let (ti, t) = self
            .templates
            .iter()
            .enumerate()
            .find(|(_, t)| t.h as f64 == b.h && t.w as f64 == b.w)
            .ok_or_else(|| {
                Error::InvalidParam(format!(
                    "detection box {b:?} does not match any anchor size"
                ))
            })?;
        let _ = ti;
        if b.x < 0.0
            || b.y < 0.0
            || b.x.fract() != 0.0
            || b.y.fract() != 0.0
            || b.x as usize + t.w > image.w()
            || b.y as usize + t.h > image.h()
        {
            return Err(Error::InvalidParam(format!(
                "detection box {b:?} is not an on-grid crop of a {}x{} image",
                image.h(),
                image.w()
            )));
        }
        let (x0, y0) = (b.x as usize, b.y as usize);
        let (ncc, norm) = self.ncc_at(image, t, x0, y0);
        let mut grad = vec![0.0; image.h() * image.w()];
        if norm <= 0.0 {
            return Ok(grad); // zero-variance crop: flat score
        }
        let n = (t.w * t.h) as f64;
        let mut sum = 0.0;
        for v in 0..t.h {
            for u in 0..t.w {
                sum += image.get(y0 + v, x0 + u);
            }
        }
        let mean = sum / n;
        let z = self.config.logistic_slope * ncc + self.config.logistic_bias;
        let s = logistic(z);
        let outer = self.config.logistic_slope * s * (1.0 - s);
        let mut k = 0;
        for v in 0..t.h {
            for u in 0..t.w {
                let chat = (image.get(y0 + v, x0 + u) - mean) / norm;
                grad[(y0 + v) * image.w() + x0 + u] =
                    outer * (t.values[k] - ncc * chat) / norm;
                k += 1;
            }
        }
        Ok(grad)
    }
}

/// Convenience wrapper: build a detector from `config` and run it.
pub fn toy_detect(config: &ToyTemplateConfig, image: &GrayImage) -> Result<Vec<Detection>> {
    Ok(ToyDetector::new(config.clone())?.detect(image))
}

/// Convenience wrapper over [`ToyDetector::image_gradient`].
pub fn toy_image_gradient(
    config: &ToyTemplateConfig,
    image: &GrayImage,
    detection: &Detection,
) -> Result<Vec<f64>> {
    ToyDetector::new(config.clone())?.image_gradient(image, detection)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn default_detector() -> ToyDetector {
        ToyDetector::new(ToyTemplateConfig::default()).unwrap()
    }

    /// Paint an affine copy of the anchor template into the image, so the
    /// crop at (x0, y0) has NCC exactly 1.
    fn paint_blob(image: &mut GrayImage, cfg: &ToyTemplateConfig, height: usize, x0: usize, y0: usize) {
        let w = (height as f64 * cfg.aspect).round() as usize;
        let su = cfg.sigma_u_frac * w as f64;
        let sv = cfg.sigma_v_frac * height as f64;
        for v in 0..height {
            for u in 0..w {
                let du = u as f64 - w as f64 / 2.0;
                let dv = v as f64 - height as f64 / 2.0;
                let g = (-(du * du / (2.0 * su * su) + dv * dv / (2.0 * sv * sv))).exp();
                image.set(y0 + v, x0 + u, 0.2 + 0.6 * g);
            }
        }
    }

    #[test]
    fn blank_image_yields_no_detections() {
        let det = default_detector();
        let image = GrayImage::new(256, 256, 0.5).unwrap();
        assert!(det.detect(&image).is_empty());
        // the score itself is logistic(-2), well below threshold
        let cache = det.score_all(&image);
        for s in cache.scores {
            assert_abs_diff_eq!(s, 1.0 / (1.0 + 2.0f64.exp()), epsilon = 1e-12);
        }
    }

    #[test]
    fn exact_template_blob_scores_logistic_six() {
        let det = default_detector();
        let cfg = ToyTemplateConfig::default();
        let mut image = GrayImage::new(256, 256, 0.2).unwrap();
        // anchor height 128, stride 32: (x0, y0) = (96, 64) is on the grid
        paint_blob(&mut image, &cfg, 128, 96, 64);
        let dets = det.detect(&image);
        assert!(!dets.is_empty());
        let top = &dets[0];
        assert_eq!(top.box_, BBox::new(96.0, 64.0, 64.0, 128.0));
        assert_abs_diff_eq!(top.objectness, 1.0 / (1.0 + (-6.0f64).exp()), epsilon = 1e-9);
        assert_abs_diff_eq!(top.objectness, 0.9975, epsilon = 1e-4);
    }

    #[test]
    fn blob_with_small_noise_still_detected() {
        let det = default_detector();
        let cfg = ToyTemplateConfig::default();
        let mut image = GrayImage::new(256, 256, 0.2).unwrap();
        paint_blob(&mut image, &cfg, 128, 96, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noisy: Vec<f64> = image
            .pixels()
            .iter()
            .map(|&p| (p + 0.01 * (rng.gen::<f64>() - 0.5)).clamp(0.0, 1.0))
            .collect();
        let image = GrayImage::from_pixels(256, 256, noisy).unwrap();
        let dets = det.detect(&image);
        assert!(!dets.is_empty());
        assert_eq!(dets[0].box_, BBox::new(96.0, 64.0, 64.0, 128.0));
    }

    #[test]
    fn two_far_apart_blobs_give_two_detections() {
        let det = default_detector();
        let cfg = ToyTemplateConfig::default();
        let mut image = GrayImage::new(320, 320, 0.2).unwrap();
        paint_blob(&mut image, &cfg, 128, 32, 32);
        paint_blob(&mut image, &cfg, 128, 224, 160);
        let dets = det.detect(&image);
        assert!(dets.len() >= 2, "got {} detections", dets.len());
        // sorted by descending objectness
        for pair in dets.windows(2) {
            assert!(pair[0].objectness >= pair[1].objectness);
        }
        // nms postcondition
        for i in 0..dets.len() {
            for j in i + 1..dets.len() {
                assert!(dets[i].box_.iou(&dets[j].box_) <= cfg.nms_iou);
            }
        }
    }

    #[test]
    fn translation_by_one_stride_shifts_detection() {
        let det = default_detector();
        let cfg = ToyTemplateConfig::default();
        let mut a = GrayImage::new(256, 256, 0.2).unwrap();
        paint_blob(&mut a, &cfg, 128, 64, 64);
        let mut b = GrayImage::new(256, 256, 0.2).unwrap();
        paint_blob(&mut b, &cfg, 128, 96, 64); // one 32 px stride right
        let da = det.detect(&a);
        let db = det.detect(&b);
        assert_eq!(da[0].box_.x + 32.0, db[0].box_.x);
        assert_eq!(da[0].box_.y, db[0].box_.y);
        assert_abs_diff_eq!(da[0].objectness, db[0].objectness, epsilon = 1e-9);
    }

    #[test]
    fn spot_at_blob_center_decreases_ncc() {
        // the mechanism the attack exploits
        let det = default_detector();
        let cfg = ToyTemplateConfig::default();
        let mut image = GrayImage::new(256, 256, 0.2).unwrap();
        paint_blob(&mut image, &cfg, 128, 96, 64);
        let clean = det.detect(&image)[0].objectness;
        // superimpose a bright spot (sigma 6 px) at the blob center
        let (cx, cy) = (96.0 + 32.0, 64.0 + 64.0);
        let spotted: Vec<f64> = image
            .pixels()
            .iter()
            .enumerate()
            .map(|(idx, &p)| {
                let (y, x) = (idx / 256, idx % 256);
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                (p + 0.354 * (-d2 / (2.0 * 36.0)).exp()).clamp(0.0, 1.0)
            })
            .collect();
        let spotted = GrayImage::from_pixels(256, 256, spotted).unwrap();
        let cache = det.score_all(&spotted);
        let at_anchor = cache
            .anchors
            .iter()
            .zip(&cache.scores)
            .find(|(a, _)| a.tmpl == 2 && a.x0 == 96 && a.y0 == 64)
            .map(|(_, &s)| s)
            .unwrap();
        assert!(at_anchor < clean, "spot did not reduce objectness");
    }

    #[test]
    fn gradient_zero_outside_crop_and_matches_fd() {
        let det = default_detector();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pixels: Vec<f64> = (0..96 * 96).map(|_| 0.2 + 0.6 * rng.gen::<f64>()).collect();
        let image = GrayImage::from_pixels(96, 96, pixels.clone()).unwrap();
        // build a synthetic "detection" for the 64-high anchor at (16, 16)
        let detection = Detection {
            box_: BBox::new(16.0, 16.0, 32.0, 64.0),
            objectness: 0.5,
            class_score: 1.0,
            class_id: PERSON_CLASS.to_string(),
        };
        let grad = det.image_gradient(&image, &detection).unwrap();
        // outside the crop: exactly zero
        assert_eq!(grad[0], 0.0);
        assert_eq!(grad[95 * 96 + 95], 0.0);
        // inside: central finite differences
        let score = |px: &[f64]| -> f64 {
            let img = GrayImage::from_pixels(96, 96, px.to_vec()).unwrap();
            let t = &det.templates[0];
            let (ncc, _) = det.ncc_at(&img, t, 16, 16);
            det.objectness(ncc)
        };
        let h = 1e-4;
        for &(y, x) in &[(20usize, 20usize), (40, 30), (70, 40)] {
            let k = y * 96 + x;
            let mut plus = pixels.clone();
            let mut minus = pixels.clone();
            plus[k] += h;
            minus[k] -= h;
            let fd = (score(&plus) - score(&minus)) / (2.0 * h);
            let denom = fd.abs().max(1e-9);
            assert!(
                (grad[k] - fd).abs() / denom < 1e-4,
                "pixel ({y},{x}): analytic {} vs fd {fd}",
                grad[k]
            );
        }
    }

    #[test]
    fn gradient_at_perfect_match_is_near_saturated() {
        let det = default_detector();
        let cfg = ToyTemplateConfig::default();
        let mut image = GrayImage::new(256, 256, 0.2).unwrap();
        paint_blob(&mut image, &cfg, 128, 96, 64);
        let d = det.detect(&image)[0].clone();
        let grad = det.image_gradient(&image, &d).unwrap();
        // chain rule: magnitude bounded by logistic'(6) * k * |dNCC| and
        // logistic'(6) ~ 0.00246, so the gradient is small everywhere
        let s6 = 1.0 / (1.0 + (-6.0f64).exp());
        let bound = 8.0 * s6 * (1.0 - s6);
        let max = grad.iter().fold(0.0f64, |m, &g| m.max(g.abs()));
        assert!(max > 0.0);
        assert!(max <= bound, "max grad {max} exceeds chain-rule bound {bound}");
    }

    #[test]
    fn gradient_rejects_mismatched_detection() {
        let det = default_detector();
        let image = GrayImage::new(64, 64, 0.5).unwrap();
        let detection = Detection {
            box_: BBox::new(3.5, 0.0, 32.0, 64.0),
            objectness: 0.5,
            class_score: 1.0,
            class_id: PERSON_CLASS.to_string(),
        };
        assert!(det.image_gradient(&image, &detection).is_err());
    }

    #[test]
    fn rescore_max_agrees_with_full_rescore() {
        let det = default_detector();
        let cfg = ToyTemplateConfig::default();
        let mut base = GrayImage::new(256, 256, 0.2).unwrap();
        paint_blob(&mut base, &cfg, 128, 96, 64);
        let cache = det.score_all(&base);
        // perturb a small region
        let mut perturbed = base.clone();
        for y in 100..130 {
            for x in 110..140 {
                perturbed.set(y, x, 0.95);
            }
        }
        let region = BBox::new(110.0, 100.0, 30.0, 30.0);
        let fast = det.rescore_max(&perturbed, &cache, &[region]);
        let slow = det.max_from_cache(&det.score_all(&perturbed));
        assert_abs_diff_eq!(fast, slow, epsilon = 1e-12);
    }
}
