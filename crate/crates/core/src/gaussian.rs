//! Gaussian bulb-spot patch model: rasterization, total variation, and
//! parameter gradients.
//!
//! A patch is a constant background plus a superposition of isotropic 2D
//! Gaussian spots, each realizable as a small incandescent bulb on a board.
//! Values above 1 after superposition saturate, matching camera clipping.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Patch, PatchMode};

/// Amplitude and spread of the bulb profile measured from a real bulb,
/// in normalized units (amplitude assumes the default 30 degC camera span).
pub const DEFAULT_SPOT_AMPLITUDE: f64 = 0.354;
pub const DEFAULT_SPOT_SIGMA: f64 = 70.07;

/// Spot centers plus shared amplitude, spread, and background level; the
/// optimization variable for Gaussian-mode attacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPatchParams {
    /// Spot centers `(x, y)` in patch pixel coordinates.
    pub centers: Vec<(f64, f64)>,
    /// Shared spot amplitude in normalized intensity units.
    pub s: f64,
    /// Shared spot standard deviation in pixels.
    pub sigma: f64,
    /// Background intensity in `[0, 1]`.
    pub mu: f64,
}

impl GaussianPatchParams {
    pub fn new(centers: Vec<(f64, f64)>, s: f64, sigma: f64, mu: f64) -> Self {
        Self {
            centers,
            s,
            sigma,
            mu,
        }
    }

    pub fn spot_count(&self) -> usize {
        self.centers.len()
    }

    pub fn validate(&self, side: usize) -> Result<()> {
        if self.sigma <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.s < 0.0 {
            return Err(Error::InvalidParam(format!(
                "amplitude must be >= 0, got {}",
                self.s
            )));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::InvalidParam(format!(
                "background {} outside [0, 1]",
                self.mu
            )));
        }
        let n = side as f64;
        for &(x, y) in &self.centers {
            if !(0.0..=n).contains(&x) || !(0.0..=n).contains(&y) {
                return Err(Error::InvalidParam(format!(
                    "center ({x}, {y}) outside [0, {n}]^2"
                )));
            }
        }
        Ok(())
    }
}

/// 1D Gaussian factors `exp(-(k - c)^2 / (2 sigma^2))` for k = 0..side-1.
fn axis_profile(side: usize, center: f64, sigma: f64) -> Vec<f64> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    (0..side)
        .map(|k| {
            let d = k as f64 - center;
            (-d * d * inv).exp()
        })
        .collect()
}

/// Accumulate one spot's raster into `acc` (row-major, side x side).
fn add_spot(acc: &mut [f64], side: usize, center: (f64, f64), s: f64, sigma: f64, sign: f64) {
    let gx = axis_profile(side, center.0, sigma);
    let gy = axis_profile(side, center.1, sigma);
    for y in 0..side {
        let row = s * sign * gy[y];
        let out = &mut acc[y * side..(y + 1) * side];
        for x in 0..side {
            out[x] += row * gx[x];
        }
    }
}

/// Unclamped superposition `mu + sum_i g_i` evaluated at every integer pixel.
pub(crate) fn raw_superposition(params: &GaussianPatchParams, side: usize) -> Vec<f64> {
    let mut acc = vec![0.0; side * side];
    for &c in &params.centers {
        add_spot(&mut acc, side, c, params.s, params.sigma, 1.0);
    }
    for v in &mut acc {
        *v += params.mu;
    }
    acc
}

/// Rasterize the spot superposition, saturating into `[0, 1]`.
pub fn render_gaussian_patch(params: &GaussianPatchParams, side: usize) -> Result<Patch> {
    if side == 0 {
        return Err(Error::InvalidParam("side must be >= 1".into()));
    }
    params.validate(side)?;
    let mut pixels = raw_superposition(params, side);
    for v in &mut pixels {
        *v = v.clamp(0.0, 1.0);
    }
    Patch::from_pixels(side, pixels, PatchMode::GaussianRendered)
}

/// Rasterize without validating centers; the optimizer's finite-difference
/// probes may step just outside the patch square.
pub(crate) fn render_gaussian_patch_unchecked(params: &GaussianPatchParams, side: usize) -> Patch {
    let mut pixels = raw_superposition(params, side);
    for v in &mut pixels {
        *v = v.clamp(0.0, 1.0);
    }
    Patch::from_pixels(side, pixels, PatchMode::GaussianRendered).expect("clamped pixels in range")
}

/// Total variation of a patch: sum over pixels of the local gradient
/// magnitude, with out-of-grid neighbor differences contributing 0.
pub fn total_variation(patch: &Patch) -> f64 {
    tv_of_grid(patch.pixels(), patch.side(), patch.side())
}

pub(crate) fn tv_of_grid(p: &[f64], h: usize, w: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..h {
        for j in 0..w {
            let v = p[i * w + j];
            let dv = if i + 1 < h { v - p[(i + 1) * w + j] } else { 0.0 };
            let dh = if j + 1 < w { v - p[i * w + j + 1] } else { 0.0 };
            acc += (dv * dv + dh * dh).sqrt();
        }
    }
    acc
}

/// Subgradient of `tv_of_grid` with respect to every pixel. Terms with a
/// vanishing local magnitude contribute 0.
pub(crate) fn tv_gradient(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut grad = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let v = p[i * w + j];
            let dv = if i + 1 < h { v - p[(i + 1) * w + j] } else { 0.0 };
            let dh = if j + 1 < w { v - p[i * w + j + 1] } else { 0.0 };
            let r = (dv * dv + dh * dh).sqrt();
            if r > 1e-12 {
                grad[i * w + j] += (dv + dh) / r;
                if i + 1 < h {
                    grad[(i + 1) * w + j] -= dv / r;
                }
                if j + 1 < w {
                    grad[i * w + j + 1] -= dh / r;
                }
            }
        }
    }
    grad
}

/// Gradient of `sum_pixels upstream(x, y) * rendered(x, y)` with respect to
/// every spot center. Saturated pixels contribute zero.
pub fn render_gradient(
    params: &GaussianPatchParams,
    side: usize,
    upstream: &[f64],
) -> Result<Vec<(f64, f64)>> {
    params.validate(side)?;
    if upstream.len() != side * side {
        return Err(Error::ShapeMismatch {
            expected: format!("{} upstream values", side * side),
            got: format!("{}", upstream.len()),
        });
    }
    let raw = raw_superposition(params, side);
    let inv_sigma2 = 1.0 / (params.sigma * params.sigma);
    let mut grads = vec![(0.0, 0.0); params.centers.len()];
    for (i, &(px, py)) in params.centers.iter().enumerate() {
        let gx = axis_profile(side, px, params.sigma);
        let gy = axis_profile(side, py, params.sigma);
        let mut acc_x = 0.0;
        let mut acc_y = 0.0;
        for y in 0..side {
            let dy = y as f64 - py;
            for x in 0..side {
                let idx = y * side + x;
                let v = raw[idx];
                if v > 1.0 || v < 0.0 {
                    continue; // saturated
                }
                let u = upstream[idx];
                if u == 0.0 {
                    continue;
                }
                let g = params.s * gx[x] * gy[y];
                let dx = x as f64 - px;
                acc_x += u * g * dx * inv_sigma2;
                acc_y += u * g * dy * inv_sigma2;
            }
        }
        grads[i] = (acc_x, acc_y);
    }
    Ok(grads)
}

/// Incremental rasterizer for the optimizer's inner loop: caches per-spot
/// rasters and a running unclamped sum so moving one spot costs two spot
/// rasters instead of a full re-render.
#[derive(Debug, Clone)]
pub(crate) struct IncrementalRenderer {
    side: usize,
    s: f64,
    sigma: f64,
    mu: f64,
    centers: Vec<(f64, f64)>,
    spot_rasters: Vec<Vec<f64>>,
    /// Unclamped `sum_i g_i` (background excluded).
    sum: Vec<f64>,
}

impl IncrementalRenderer {
    pub fn new(params: &GaussianPatchParams, side: usize) -> Self {
        let mut spot_rasters = Vec::with_capacity(params.centers.len());
        let mut sum = vec![0.0; side * side];
        for &c in &params.centers {
            let mut r = vec![0.0; side * side];
            add_spot(&mut r, side, c, params.s, params.sigma, 1.0);
            for (a, b) in sum.iter_mut().zip(&r) {
                *a += *b;
            }
            spot_rasters.push(r);
        }
        Self {
            side,
            s: params.s,
            sigma: params.sigma,
            mu: params.mu,
            centers: params.centers.clone(),
            spot_rasters,
            sum,
        }
    }

    pub fn move_spot(&mut self, i: usize, center: (f64, f64)) {
        let old = &self.spot_rasters[i];
        for (a, b) in self.sum.iter_mut().zip(old) {
            *a -= *b;
        }
        let mut r = vec![0.0; self.side * self.side];
        add_spot(&mut r, self.side, center, self.s, self.sigma, 1.0);
        for (a, b) in self.sum.iter_mut().zip(&r) {
            *a += *b;
        }
        self.spot_rasters[i] = r;
        self.centers[i] = center;
    }

    pub fn center(&self, i: usize) -> (f64, f64) {
        self.centers[i]
    }

    /// Clamped patch for the current centers.
    pub fn patch(&self) -> Patch {
        let pixels: Vec<f64> = self
            .sum
            .iter()
            .map(|&v| (v + self.mu).clamp(0.0, 1.0))
            .collect();
        Patch::from_pixels(self.side, pixels, PatchMode::GaussianRendered)
            .expect("clamped pixels are in range")
    }
}

/// On-disk patch parameter document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatchParamsFile {
    pub side_px: usize,
    pub m: usize,
    pub centers: Vec<(f64, f64)>,
    pub s: f64,
    pub sigma: f64,
    pub mu: f64,
    pub mode: PatchMode,
}

impl PatchParamsFile {
    pub fn from_params(params: &GaussianPatchParams, side: usize) -> Self {
        Self {
            side_px: side,
            m: params.spot_count(),
            centers: params.centers.clone(),
            s: params.s,
            sigma: params.sigma,
            mu: params.mu,
            mode: PatchMode::GaussianRendered,
        }
    }

    pub fn to_params(&self) -> Result<GaussianPatchParams> {
        if self.m != self.centers.len() {
            return Err(Error::Parse {
                what: "patch parameter file".into(),
                msg: format!("m = {} but {} centers listed", self.m, self.centers.len()),
            });
        }
        let params = GaussianPatchParams::new(self.centers.clone(), self.s, self.sigma, self.mu);
        params.validate(self.side_px)?;
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            what: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Naive double-loop evaluation of the superposition plus clamping,
    /// independent of the separable rasterizer.
    pub(crate) fn render_oracle(params: &GaussianPatchParams, side: usize) -> Vec<f64> {
        let mut out = vec![0.0; side * side];
        for y in 0..side {
            for x in 0..side {
                let mut v = params.mu;
                for &(px, py) in &params.centers {
                    let dx = x as f64 - px;
                    let dy = y as f64 - py;
                    v += params.s
                        * (-(dx * dx + dy * dy) / (2.0 * params.sigma * params.sigma)).exp();
                }
                out[y * side + x] = v.clamp(0.0, 1.0);
            }
        }
        out
    }

    #[test]
    fn empty_superposition_is_background() {
        let params = GaussianPatchParams::new(vec![], 0.2, 70.07, 0.75);
        let patch = render_gaussian_patch(&params, 16).unwrap();
        assert!(patch.pixels().iter().all(|&p| p == 0.75));
    }

    #[test]
    fn single_spot_matches_direct_evaluation() {
        let params = GaussianPatchParams::new(vec![(150.0, 150.0)], 0.2, 70.07, 0.5);
        let patch = render_gaussian_patch(&params, 300).unwrap();
        assert_abs_diff_eq!(patch.get(150, 150), 0.7, epsilon = 1e-12);
        // pixel at (x=220, y=150): distance 70 from the center
        let expected = 0.5 + 0.2 * (-(70.0f64 * 70.0) / (2.0 * 70.07 * 70.07)).exp();
        assert_abs_diff_eq!(patch.get(150, 220), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(patch.get(150, 220), 0.62143, epsilon = 5e-6);
    }

    #[test]
    fn superposition_clamps_to_one() {
        let params = GaussianPatchParams::new(vec![(150.0, 150.0)], 0.354, 70.07, 0.75);
        let patch = render_gaussian_patch(&params, 300).unwrap();
        assert_eq!(patch.get(150, 150), 1.0);
        let oracle = render_oracle(&params, 300);
        for (a, b) in patch.pixels().iter().zip(&oracle) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn rejects_bad_params() {
        let bad_sigma = GaussianPatchParams::new(vec![(1.0, 1.0)], 0.2, 0.0, 0.5);
        assert!(render_gaussian_patch(&bad_sigma, 16).is_err());
        let outside = GaussianPatchParams::new(vec![(20.0, 1.0)], 0.2, 5.0, 0.5);
        assert!(render_gaussian_patch(&outside, 16).is_err());
    }

    #[test]
    fn rendering_is_deterministic() {
        let params = GaussianPatchParams::new(
            vec![(10.0, 20.0), (40.0, 7.5), (33.3, 60.0)],
            0.354,
            12.0,
            0.3,
        );
        let a = render_gaussian_patch(&params, 64).unwrap();
        let b = render_gaussian_patch(&params, 64).unwrap();
        assert_eq!(a.pixels(), b.pixels());
    }

    #[test]
    fn far_apart_spots_peak_at_clamp_mu_plus_s() {
        let params = GaussianPatchParams::new(vec![(30.0, 30.0), (250.0, 250.0)], 0.2, 8.0, 0.5);
        let patch = render_gaussian_patch(&params, 300).unwrap();
        assert_abs_diff_eq!(patch.get(30, 30), 0.7, epsilon = 1e-6);
        assert_abs_diff_eq!(patch.get(250, 250), 0.7, epsilon = 1e-6);
    }

    #[test]
    fn tv_of_constant_patch_is_zero() {
        let patch = Patch::new(32, 0.42, PatchMode::PixelLevel).unwrap();
        assert_eq!(total_variation(&patch), 0.0);
    }

    #[test]
    fn tv_hand_enumerated_2x2() {
        // rows [[0,1],[0,1]]: the two left pixels each contribute sqrt(0+1),
        // the right column contributes 0.
        let patch = Patch::from_pixels(2, vec![0.0, 1.0, 0.0, 1.0], PatchMode::PixelLevel).unwrap();
        assert_abs_diff_eq!(total_variation(&patch), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn tv_matches_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let vals: Vec<f64> = (0..64).map(|_| rng.gen::<f64>()).collect();
            let patch = Patch::from_pixels(8, vals.clone(), PatchMode::PixelLevel).unwrap();
            // independent double loop
            let mut acc = 0.0;
            for i in 0..8usize {
                for j in 0..8usize {
                    let a = if i < 7 { vals[i * 8 + j] - vals[(i + 1) * 8 + j] } else { 0.0 };
                    let b = if j < 7 { vals[i * 8 + j] - vals[i * 8 + j + 1] } else { 0.0 };
                    acc += f64::sqrt(a * a + b * b);
                }
            }
            assert_abs_diff_eq!(total_variation(&patch), acc, epsilon = 1e-9);
        }
    }

    #[test]
    fn tv_invariant_under_global_offset() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<f64> = (0..256).map(|_| rng.gen::<f64>() * 0.5).collect();
        let a = Patch::from_pixels(16, vals.clone(), PatchMode::PixelLevel).unwrap();
        let shifted: Vec<f64> = vals.iter().map(|v| v + 0.4).collect();
        let b = Patch::from_pixels(16, shifted, PatchMode::PixelLevel).unwrap();
        assert_abs_diff_eq!(total_variation(&a), total_variation(&b), epsilon = 1e-9);
    }

    #[test]
    fn render_gradient_zero_upstream() {
        let params = GaussianPatchParams::new(vec![(20.0, 20.0)], 0.2, 8.0, 0.3);
        let grads = render_gradient(&params, 64, &vec![0.0; 64 * 64]).unwrap();
        assert_eq!(grads, vec![(0.0, 0.0)]);
    }

    #[test]
    fn render_gradient_symmetric_config_is_near_zero() {
        // interior unclamped spot, uniform upstream: symmetric integrand
        let params = GaussianPatchParams::new(vec![(100.0, 100.0)], 0.2, 8.0, 0.3);
        let grads = render_gradient(&params, 201, &vec![1.0; 201 * 201]).unwrap();
        assert_abs_diff_eq!(grads[0].0, 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!(grads[0].1, 0.0, epsilon = 1e-8);
    }

    #[test]
    fn render_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let side = 48usize;
        for _ in 0..10 {
            let centers: Vec<(f64, f64)> = (0..3)
                .map(|_| (8.0 + 32.0 * rng.gen::<f64>(), 8.0 + 32.0 * rng.gen::<f64>()))
                .collect();
            // small amplitude so nothing clamps
            let params = GaussianPatchParams::new(centers, 0.15, 6.0, 0.3);
            let upstream: Vec<f64> = (0..side * side).map(|_| rng.gen::<f64>() - 0.5).collect();
            let grads = render_gradient(&params, side, &upstream).unwrap();
            let loss = |p: &GaussianPatchParams| -> f64 {
                let patch = render_gaussian_patch(p, side).unwrap();
                patch.pixels().iter().zip(&upstream).map(|(a, b)| a * b).sum()
            };
            let h = 1e-3;
            for (i, g) in grads.iter().enumerate() {
                for axis in 0..2 {
                    let mut plus = params.clone();
                    let mut minus = params.clone();
                    if axis == 0 {
                        plus.centers[i].0 += h;
                        minus.centers[i].0 -= h;
                    } else {
                        plus.centers[i].1 += h;
                        minus.centers[i].1 -= h;
                    }
                    let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    let an = if axis == 0 { g.0 } else { g.1 };
                    let denom = fd.abs().max(1e-6);
                    assert!(
                        (an - fd).abs() / denom < 1e-4,
                        "analytic {an} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn render_gradient_rejects_shape_mismatch() {
        let params = GaussianPatchParams::new(vec![(5.0, 5.0)], 0.2, 4.0, 0.3);
        assert!(render_gradient(&params, 16, &vec![0.0; 10]).is_err());
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(19);
        let (h, w) = (6usize, 7usize);
        let p: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>()).collect();
        let grad = tv_gradient(&p, h, w);
        let step = 1e-6;
        for k in 0..h * w {
            let mut plus = p.clone();
            let mut minus = p.clone();
            plus[k] += step;
            minus[k] -= step;
            let fd = (tv_of_grid(&plus, h, w) - tv_of_grid(&minus, h, w)) / (2.0 * step);
            assert_abs_diff_eq!(grad[k], fd, epsilon = 1e-4);
        }
    }

    #[test]
    fn incremental_renderer_tracks_full_render() {
        let mut params = GaussianPatchParams::new(
            vec![(10.0, 12.0), (30.0, 40.0), (50.0, 20.0)],
            0.354,
            15.0,
            0.3,
        );
        let mut inc = IncrementalRenderer::new(&params, 64);
        inc.move_spot(1, (35.0, 18.0));
        params.centers[1] = (35.0, 18.0);
        let full = render_gaussian_patch(&params, 64).unwrap();
        for (a, b) in inc.patch().pixels().iter().zip(full.pixels()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn params_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("patch.json");
        let params = GaussianPatchParams::new(vec![(1.5, 2.5)], 0.354, 70.07, 0.75);
        PatchParamsFile::from_params(&params, 300).save(&path).unwrap();
        let back = PatchParamsFile::load(&path).unwrap().to_params().unwrap();
        assert_eq!(params, back);
    }
}
