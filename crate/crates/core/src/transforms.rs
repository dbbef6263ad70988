//! The transformation set applied to patches before placement: random
//! rotation, translation, scaling, additive noise, brightness and contrast,
//! plus upper-body compositing onto a pedestrian bounding box.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, Patch};

/// Patch side relative to the pedestrian bounding-box height.
pub const PATCH_HEIGHT_RATIO: f64 = 0.2;

/// Patch center sits this far down from the top of the bounding box.
pub const ANCHOR_HEIGHT_FRAC: f64 = 0.3;

/// Axis-aligned bounding box in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Intersection over union; 0 for disjoint or degenerate boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// One draw from the transformation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSample {
    /// Rotation in degrees, positive counterclockwise.
    pub angle_deg: f64,
    /// Translation jitter as a fraction of the bbox height; converted to
    /// pixels at placement time.
    pub dx: f64,
    pub dy: f64,
    /// Multiplier on the nominal patch size.
    pub scale_jitter: f64,
    /// Seed for the per-placement additive noise field.
    pub noise_seed: u64,
    /// Peak amplitude of the additive noise, 0 disables it.
    pub noise_amp: f64,
    /// Additive intensity offset.
    pub brightness: f64,
    /// Multiplicative intensity factor, > 0.
    pub contrast: f64,
}

impl TransformSample {
    pub fn identity() -> Self {
        Self {
            angle_deg: 0.0,
            dx: 0.0,
            dy: 0.0,
            scale_jitter: 1.0,
            noise_seed: 0,
            noise_amp: 0.0,
            brightness: 0.0,
            contrast: 1.0,
        }
    }
}

/// Sampling intervals for [`sample_transform`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformConfig {
    /// Angle bound in degrees; draws are uniform in `[-bound, +bound]`.
    pub angle_deg: f64,
    /// Translation bound as a fraction of bbox height.
    pub translate_frac: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Brightness bound; draws are uniform in `[-bound, +bound]`.
    pub brightness: f64,
    pub contrast_lo: f64,
    pub contrast_hi: f64,
    /// Additive pixel-noise amplitude; noise is uniform in `[-amp, +amp]`.
    pub noise_amp: f64,
    /// Patch side as a fraction of bbox height.
    pub patch_ratio: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            angle_deg: 20.0,
            translate_frac: 0.05,
            scale_lo: 0.9,
            scale_hi: 1.1,
            brightness: 0.1,
            contrast_lo: 0.8,
            contrast_hi: 1.2,
            noise_amp: 0.05,
            patch_ratio: PATCH_HEIGHT_RATIO,
        }
    }
}

impl TransformConfig {
    /// Degenerate config whose draws are always the identity transform.
    pub fn identity() -> Self {
        Self {
            angle_deg: 0.0,
            translate_frac: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
            brightness: 0.0,
            contrast_lo: 1.0,
            contrast_hi: 1.0,
            noise_amp: 0.0,
            patch_ratio: PATCH_HEIGHT_RATIO,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.angle_deg < 0.0 || self.translate_frac < 0.0 || self.brightness < 0.0 {
            return Err(Error::Config(
                "transform bounds must be non-negative".into(),
            ));
        }
        if self.noise_amp < 0.0 {
            return Err(Error::Config("noise amplitude must be non-negative".into()));
        }
        if self.scale_lo > self.scale_hi || self.contrast_lo > self.contrast_hi {
            return Err(Error::Config("inverted transform interval".into()));
        }
        if self.contrast_lo <= 0.0 {
            return Err(Error::Config("contrast must be positive".into()));
        }
        if self.patch_ratio <= 0.0 {
            return Err(Error::Config("patch ratio must be positive".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Draw one transform; each field is independent and uniform over its
/// configured interval. Deterministic given the rng state.
pub fn sample_transform(rng: &mut impl Rng, config: &TransformConfig) -> Result<TransformSample> {
    config.validate()?;
    Ok(TransformSample {
        angle_deg: uniform(rng, -config.angle_deg, config.angle_deg),
        dx: uniform(rng, -config.translate_frac, config.translate_frac),
        dy: uniform(rng, -config.translate_frac, config.translate_frac),
        scale_jitter: uniform(rng, config.scale_lo, config.scale_hi),
        noise_seed: rng.gen(),
        noise_amp: config.noise_amp,
        brightness: uniform(rng, -config.brightness, config.brightness),
        contrast: uniform(rng, config.contrast_lo, config.contrast_hi),
    })
}

/// A base image with patches composited into it.
#[derive(Debug, Clone)]
pub struct PatchedImage {
    pub image: GrayImage,
    /// Clipped placement regions and the transform that produced each.
    pub applied: Vec<(BBox, TransformSample)>,
}

/// Backprop record for one composited pixel: which four patch pixels it
/// sampled and with what weights. `passthrough` is the contrast factor, or
/// 0 where the composited value saturated.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TapeEntry {
    pub img_idx: usize,
    pub patch_idx: [usize; 4],
    pub weight: [f64; 4],
    pub passthrough: f64,
}

struct Placement {
    /// Placement center in image coordinates.
    cx: f64,
    cy: f64,
    /// Rendered patch side in image pixels.
    size: f64,
    cos_t: f64,
    sin_t: f64,
}

fn placement(person: &BBox, t: &TransformSample, extra_scale: f64, ratio: f64) -> Placement {
    let size = person.h * ratio * t.scale_jitter * extra_scale;
    let theta = t.angle_deg.to_radians();
    Placement {
        cx: person.x + person.w / 2.0 + t.dx * person.h,
        cy: person.y + ANCHOR_HEIGHT_FRAC * person.h + t.dy * person.h,
        size,
        cos_t: theta.cos(),
        sin_t: theta.sin(),
    }
}

/// Composite `patch` into `base` in place. Returns the clipped placement
/// region, or `None` when the target size degenerates below one pixel (the
/// placement is skipped with a warning).
pub(crate) fn compose_into(
    base: &mut GrayImage,
    patch: &Patch,
    person: &BBox,
    t: &TransformSample,
    extra_scale: f64,
    ratio: f64,
    mut tape: Option<&mut Vec<TapeEntry>>,
) -> Result<Option<BBox>> {
    if !person.is_valid() {
        return Err(Error::InvalidParam(format!(
            "invalid person bbox {person:?}"
        )));
    }
    if t.contrast <= 0.0 {
        return Err(Error::InvalidParam("contrast must be positive".into()));
    }
    let pl = placement(person, t, extra_scale, ratio);
    if pl.size < 1.0 {
        log::warn!(
            "patch placement skipped: target size {:.3} px below 1 px",
            pl.size
        );
        return Ok(None);
    }
    // bounding box of the rotated square
    let half = pl.size * (pl.cos_t.abs() + pl.sin_t.abs()) / 2.0;
    let x0 = ((pl.cx - half).floor().max(0.0)) as usize;
    let y0 = ((pl.cy - half).floor().max(0.0)) as usize;
    let x1 = ((pl.cx + half).ceil()).min(base.w() as f64 - 1.0);
    let y1 = ((pl.cy + half).ceil()).min(base.h() as f64 - 1.0);
    if x1 < x0 as f64 || y1 < y0 as f64 {
        return Ok(None);
    }
    let (x1, y1) = (x1 as usize, y1 as usize);

    let mut noise_rng = ChaCha8Rng::seed_from_u64(t.noise_seed);
    let n = (patch.side() - 1) as f64;
    let side = patch.side();
    for iy in y0..=y1 {
        for ix in x0..=x1 {
            let rx = ix as f64 - pl.cx;
            let ry = iy as f64 - pl.cy;
            // inverse rotation into the patch's own frame
            let u = pl.cos_t * rx + pl.sin_t * ry;
            let v = -pl.sin_t * rx + pl.cos_t * ry;
            let px = (u / pl.size + 0.5) * n;
            let py = (v / pl.size + 0.5) * n;
            let Some(sampled) = patch.sample_bilinear(px, py) else {
                continue; // outside the rotated square: base shows through
            };
            let noise = if t.noise_amp > 0.0 {
                uniform(&mut noise_rng, -t.noise_amp, t.noise_amp)
            } else {
                0.0
            };
            let raw = t.contrast * sampled + t.brightness + noise;
            let value = raw.clamp(0.0, 1.0);
            base.set(iy, ix, value);
            if let Some(tape) = tape.as_deref_mut() {
                let x0f = px.floor();
                let y0f = py.floor();
                let (px0, py0) = (x0f as usize, y0f as usize);
                let (px1, py1) = ((px0 + 1).min(side - 1), (py0 + 1).min(side - 1));
                let fx = px - x0f;
                let fy = py - y0f;
                tape.push(TapeEntry {
                    img_idx: iy * base.w() + ix,
                    patch_idx: [
                        py0 * side + px0,
                        py0 * side + px1,
                        py1 * side + px0,
                        py1 * side + px1,
                    ],
                    weight: [
                        (1.0 - fx) * (1.0 - fy),
                        fx * (1.0 - fy),
                        (1.0 - fx) * fy,
                        fx * fy,
                    ],
                    passthrough: if raw > 1.0 || raw < 0.0 { 0.0 } else { t.contrast },
                });
            }
        }
    }
    Ok(Some(BBox::new(
        x0 as f64,
        y0 as f64,
        (x1 - x0 + 1) as f64,
        (y1 - y0 + 1) as f64,
    )))
}

/// Scale, rotate, intensity-adjust and composite a patch onto a person's
/// upper body.
pub fn apply_patch(
    image: &GrayImage,
    patch: &Patch,
    person: &BBox,
    t: &TransformSample,
) -> Result<PatchedImage> {
    let mut composite = image.clone();
    let region = compose_into(
        &mut composite,
        patch,
        person,
        t,
        1.0,
        PATCH_HEIGHT_RATIO,
        None,
    )?;
    Ok(PatchedImage {
        image: composite,
        applied: region.map(|r| (r, *t)).into_iter().collect(),
    })
}

/// Pull a gradient on composite-image pixels back to patch pixels through
/// the recorded compositing tape.
pub(crate) fn backprop_tape(tape: &[TapeEntry], upstream: &[f64], patch_len: usize) -> Vec<f64> {
    let mut grad = vec![0.0; patch_len];
    for e in tape {
        let u = upstream[e.img_idx] * e.passthrough;
        if u == 0.0 {
            continue;
        }
        for k in 0..4 {
            grad[e.patch_idx[k]] += u * e.weight[k];
        }
    }
    grad
}
