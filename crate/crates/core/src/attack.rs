//! Loss assembly and the patch optimization loop: expectation over
//! transformations, ensemble objectness, total-variation weighting, and
//! momentum updates driven by central finite differences, Nelder-Mead, or
//! analytic chain-rule gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{ensemble_objectness, DetectorAdapter, PERSON_CLASS};
use crate::error::{Error, Result};
use crate::gaussian::{
    render_gradient, total_variation, tv_gradient, tv_of_grid, GaussianPatchParams,
    IncrementalRenderer, DEFAULT_SPOT_AMPLITUDE, DEFAULT_SPOT_SIGMA,
};
use crate::image::{GrayImage, Patch, PatchMode};
use crate::rngutil::derive_seed;
use crate::scenegen::AnnotatedImage;
use crate::transforms::{
    backprop_tape, compose_into, sample_transform, BBox, TapeEntry, TransformConfig,
    TransformSample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMode {
    Gaussian,
    Pixel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentumFd,
    NelderMead,
    AnalyticSgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    Uniform,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub mode: AttackMode,
    /// TV weight in the combined loss.
    pub lambda_tv: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Step scale. Objectness gradients w.r.t. spot centers are tiny
    /// (O(1e-4) per canvas pixel), so center-mode rates in the thousands
    /// yield pixel-scale moves; pixel mode wants small rates instead.
    pub learning_rate: f64,
    pub momentum: f64,
    /// Transform draws per batch sample per step.
    pub eot_draws: usize,
    /// Central-difference step for spot centers, in canvas pixels. Keep it
    /// at least as large as one pixel of the downsampled placement
    /// (`side / placed_width`), or the differences mostly cancel.
    pub fd_step: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub init_scheme: InitScheme,
    /// Patch raster side in pixels.
    pub side: usize,
    /// Spot count M.
    pub spots: usize,
    pub s: f64,
    pub sigma: f64,
    pub mu: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            mode: AttackMode::Gaussian,
            lambda_tv: 1e-4,
            batch_size: 8,
            iterations: 100,
            learning_rate: 8000.0,
            momentum: 0.9,
            eot_draws: 1,
            fd_step: 8.0,
            optimizer: OptimizerKind::SgdMomentumFd,
            seed: 0,
            init_scheme: InitScheme::Uniform,
            side: Patch::DEFAULT_SIDE,
            spots: 22,
            s: DEFAULT_SPOT_AMPLITUDE,
            sigma: DEFAULT_SPOT_SIGMA,
            mu: 0.30,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_tv < 0.0 {
            return Err(Error::Config("lambda_tv must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.fd_step <= 0.0 {
            return Err(Error::Config("fd step must be positive".into()));
        }
        if self.side == 0 {
            return Err(Error::Config("patch side must be >= 1".into()));
        }
        if self.sigma <= 0.0 || self.s < 0.0 || !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::Config("invalid spot parameters".into()));
        }
        if self.eot_draws == 0 {
            return Err(Error::Config("eot draws must be >= 1".into()));
        }
        Ok(())
    }

    pub fn gaussian_params(&self, centers: Vec<(f64, f64)>) -> GaussianPatchParams {
        GaussianPatchParams::new(centers, self.s, self.sigma, self.mu)
    }
}

/// Optimization variable: spot layout or raw pixels.
#[derive(Debug, Clone, PartialEq)]
pub enum Params {
    Gaussian(GaussianPatchParams),
    Pixel(Patch),
}

impl Params {
    pub fn render(&self, side: usize) -> Result<Patch> {
        match self {
            Params::Gaussian(p) => crate::gaussian::render_gaussian_patch(p, side),
            Params::Pixel(p) => Ok(p.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub total: f64,
    pub objectness: f64,
    pub tv: f64,
}

#[derive(Debug, Clone)]
pub struct AttackState {
    pub params: Params,
    pub momentum: Vec<f64>,
    pub iteration: usize,
    pub loss_history: Vec<LossRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub objectness: f64,
    pub tv: f64,
}

/// The combined loss on one batch: batch-mean ensemble objectness over
/// fresh transform draws, plus `lambda * TV(patch)`. Each scene is scored
/// with the patch composited onto every one of its person boxes, matching
/// the evaluation protocol; each placement gets an independent draw.
pub fn attack_loss(
    patch: &Patch,
    batch: &[(&GrayImage, &[BBox])],
    adapters: &[DetectorAdapter],
    lambda: f64,
    rng: &mut impl Rng,
    transform: &TransformConfig,
    eot_draws: usize,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::InvalidParam("batch must be nonempty".into()));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for (image, persons) in batch {
        for _ in 0..eot_draws.max(1) {
            let mut composite = (*image).clone();
            for person in *persons {
                let t = sample_transform(rng, transform)?;
                compose_into(
                    &mut composite,
                    patch,
                    person,
                    &t,
                    1.0,
                    transform.patch_ratio,
                    None,
                )?;
            }
            acc += ensemble_objectness(adapters, &composite)?;
            count += 1;
        }
    }
    let objectness = acc / count as f64;
    let tv = total_variation(patch);
    Ok(LossBreakdown {
        total: objectness + lambda * tv,
        objectness,
        tv,
    })
}

/// Clip parameters back onto their feasible set.
pub fn project_params(params: Params, side: usize) -> Params {
    match params {
        Params::Gaussian(mut p) => {
            let n = side as f64;
            for c in &mut p.centers {
                c.0 = c.0.clamp(0.0, n);
                c.1 = c.1.clamp(0.0, n);
            }
            Params::Gaussian(p)
        }
        Params::Pixel(p) => {
            let side = p.side();
            let pixels: Vec<f64> = p.pixels().iter().map(|v| v.clamp(0.0, 1.0)).collect();
            Params::Pixel(Patch::from_pixels(side, pixels, PatchMode::PixelLevel).unwrap())
        }
    }
}

/// Initial parameters: spot centers uniform in the central 80% of the patch
/// (or a jittered sqrt(M) x sqrt(M) grid), or a mid-gray pixel patch.
pub fn init_params(
    config: &AttackConfig,
    rng: &mut impl Rng,
) -> Params {
    match config.mode {
        AttackMode::Pixel => {
            Params::Pixel(Patch::new(config.side, 0.5, PatchMode::PixelLevel).unwrap())
        }
        AttackMode::Gaussian => {
            let n = config.side as f64;
            let m = config.spots;
            let centers: Vec<(f64, f64)> = match config.init_scheme {
                InitScheme::Uniform => (0..m)
                    .map(|_| {
                        (
                            n * (0.1 + 0.8 * rng.gen::<f64>()),
                            n * (0.1 + 0.8 * rng.gen::<f64>()),
                        )
                    })
                    .collect(),
                InitScheme::Grid => {
                    let g = (m as f64).sqrt().ceil() as usize;
                    let cell = 0.8 * n / g as f64;
                    let jitter = 0.1 * cell;
                    (0..m)
                        .map(|k| {
                            let (row, col) = (k / g, k % g);
                            let cx = n * 0.1 + cell * (col as f64 + 0.5);
                            let cy = n * 0.1 + cell * (row as f64 + 0.5);
                            (
                                cx + jitter * (2.0 * rng.gen::<f64>() - 1.0),
                                cy + jitter * (2.0 * rng.gen::<f64>() - 1.0),
                            )
                        })
                        .collect()
                }
            };
            Params::Gaussian(config.gaussian_params(centers))
        }
    }
}

// rng stream tags
const STREAM_INIT: u64 = 0;
const STREAM_BATCH: u64 = 1;
const STREAM_TRANSFORM: u64 = 2;
const STREAM_NM: u64 = 3;

/// One training sample: a scene image and all its person boxes. The patch
/// is placed on every person, exactly as the evaluation protocol does.
#[derive(Clone, Copy)]
struct Sample<'a> {
    image: &'a GrayImage,
    persons: &'a [BBox],
}

fn scene_samples(dataset: &[AnnotatedImage]) -> Vec<Sample<'_>> {
    dataset
        .iter()
        .filter(|scene| !scene.persons.is_empty())
        .map(|scene| Sample {
            image: &scene.image,
            persons: &scene.persons,
        })
        .collect()
}

/// Distinct batch indices for one step, derived deterministically.
fn batch_indices(n: usize, batch_size: usize, seed: u64, iteration: u64) -> Vec<usize> {
    if batch_size >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_BATCH, iteration));
    let mut pool: Vec<usize> = (0..n).collect();
    for k in 0..batch_size {
        let j = rng.gen_range(k..n);
        pool.swap(k, j);
    }
    pool.truncate(batch_size);
    pool
}

/// Frozen per-step evaluation context: one transform draw per person per
/// batch sample per EOT draw, shared by every loss evaluation of the step
/// so finite differences see a consistent objective.
struct FrozenBatch<'a> {
    items: Vec<(Sample<'a>, Vec<TransformSample>)>,
}

fn freeze_batch<'a>(
    samples: &[Sample<'a>],
    indices: &[usize],
    transform: &TransformConfig,
    eot_draws: usize,
    seed: u64,
    iteration: u64,
) -> Result<FrozenBatch<'a>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_TRANSFORM, iteration));
    let mut items = Vec::with_capacity(indices.len() * eot_draws);
    for &i in indices {
        for _ in 0..eot_draws {
            let ts = samples[i]
                .persons
                .iter()
                .map(|_| sample_transform(&mut rng, transform))
                .collect::<Result<Vec<_>>>()?;
            items.push((samples[i], ts));
        }
    }
    Ok(FrozenBatch { items })
}

/// Slow but adapter-agnostic loss on a frozen batch.
fn frozen_loss(
    patch: &Patch,
    frozen: &FrozenBatch<'_>,
    adapters: &[DetectorAdapter],
    lambda: f64,
    ratio: f64,
) -> Result<LossBreakdown> {
    let mut acc = 0.0;
    for (sample, ts) in &frozen.items {
        let mut composite = sample.image.clone();
        for (person, t) in sample.persons.iter().zip(ts) {
            compose_into(&mut composite, patch, person, t, 1.0, ratio, None)?;
        }
        acc += ensemble_objectness(adapters, &composite)?;
    }
    let objectness = acc / frozen.items.len() as f64;
    let tv = total_variation(patch);
    Ok(LossBreakdown {
        total: objectness + lambda * tv,
        objectness,
        tv,
    })
}

fn toy_detectors<'a>(
    adapters: &'a [DetectorAdapter],
) -> Option<Vec<&'a crate::detect::ToyDetector>> {
    adapters
        .iter()
        .map(|a| match a {
            DetectorAdapter::Toy(t) => Some(t),
            DetectorAdapter::External(_) => None,
        })
        .collect()
}

/// Fast loss evaluator for toy-detector ensembles: per-anchor scores of the
/// step's base composites are cached, and perturbed patches only rescore
/// anchors intersecting the placement region.
struct FastEval<'a> {
    detectors: Vec<&'a crate::detect::ToyDetector>,
    slots: Vec<FastSlot<'a>>,
    ratio: f64,
    lambda: f64,
}

struct FastSlot<'a> {
    clean: &'a GrayImage,
    /// `(person, transform)` placements, one per person in the scene.
    placements: Vec<(BBox, TransformSample)>,
    scratch: GrayImage,
    /// Placement regions actually written (sub-pixel placements are skipped).
    regions: Vec<BBox>,
    caches: Vec<crate::detect::ToyScoreCache>,
    base_objectness: f64,
}

impl<'a> FastEval<'a> {
    fn new(
        detectors: Vec<&'a crate::detect::ToyDetector>,
        frozen: &FrozenBatch<'a>,
        base_patch: &Patch,
        ratio: f64,
        lambda: f64,
    ) -> Result<Self> {
        let mut slots = Vec::with_capacity(frozen.items.len());
        for (sample, ts) in &frozen.items {
            let mut scratch = sample.image.clone();
            let mut regions = Vec::new();
            for (person, t) in sample.persons.iter().zip(ts) {
                if let Some(region) =
                    compose_into(&mut scratch, base_patch, person, t, 1.0, ratio, None)?
                {
                    regions.push(region);
                }
            }
            let caches: Vec<_> = detectors.iter().map(|d| d.score_all(&scratch)).collect();
            let base_objectness = detectors
                .iter()
                .zip(&caches)
                .map(|(d, c)| d.max_from_cache(c))
                .sum();
            slots.push(FastSlot {
                clean: sample.image,
                placements: sample.persons.iter().copied().zip(ts.iter().copied()).collect(),
                scratch,
                regions,
                caches,
                base_objectness,
            });
        }
        Ok(Self {
            detectors,
            slots,
            ratio,
            lambda,
        })
    }

    fn base_loss(&self, base_patch: &Patch) -> LossBreakdown {
        let objectness = self
            .slots
            .iter()
            .map(|s| s.base_objectness)
            .sum::<f64>()
            / self.slots.len() as f64;
        let tv = total_variation(base_patch);
        LossBreakdown {
            total: objectness + self.lambda * tv,
            objectness,
            tv,
        }
    }

    /// Loss of a perturbed patch sharing the step's frozen transforms. The
    /// perturbed patch must have the same side as the base patch so the
    /// placement regions coincide.
    fn perturbed_loss(&mut self, patch: &Patch) -> f64 {
        let mut acc = 0.0;
        for slot in &mut self.slots {
            if slot.regions.is_empty() {
                acc += slot.base_objectness;
                continue;
            }
            // restore every placement region from the clean image, then
            // composite the perturbed patch over all placements again
            for region in &slot.regions {
                let (x0, y0) = (region.x as usize, region.y as usize);
                let (rw, rh) = (region.w as usize, region.h as usize);
                for y in y0..y0 + rh {
                    for x in x0..x0 + rw {
                        let v = slot.clean.get(y, x);
                        slot.scratch.set(y, x, v);
                    }
                }
            }
            for (person, t) in &slot.placements {
                compose_into(&mut slot.scratch, patch, person, t, 1.0, self.ratio, None)
                    .expect("placement already validated");
            }
            acc += self
                .detectors
                .iter()
                .zip(&slot.caches)
                .map(|(d, c)| d.rescore_max(&slot.scratch, c, &slot.regions))
                .sum::<f64>();
        }
        let objectness = acc / self.slots.len() as f64;
        objectness + self.lambda * tv_of_grid(patch.pixels(), patch.side(), patch.side())
    }
}

fn check_capabilities(adapters: &[DetectorAdapter], needed_by: &str) -> Result<()> {
    for a in adapters {
        if !a.capabilities().image_gradients {
            return Err(Error::Capability {
                adapter: a.name().to_string(),
                needed: format!("image_gradients (required by {needed_by})"),
            });
        }
    }
    Ok(())
}

/// Run the configured optimizer over the dataset. Deterministic given the
/// config seed.
pub fn optimize_patch(
    dataset: &[AnnotatedImage],
    adapters: &[DetectorAdapter],
    config: &AttackConfig,
    transform: &TransformConfig,
) -> Result<(Params, AttackState)> {
    config.validate()?;
    transform.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidParam("dataset must be nonempty".into()));
    }
    if adapters.is_empty() {
        return Err(Error::InvalidParam("need at least one adapter".into()));
    }
    match (config.mode, config.optimizer) {
        (AttackMode::Pixel, OptimizerKind::AnalyticSgd) => {
            check_capabilities(adapters, "pixel mode")?
        }
        (AttackMode::Pixel, _) => {
            return Err(Error::Config(
                "pixel mode requires the analytic-sgd optimizer".into(),
            ))
        }
        (AttackMode::Gaussian, OptimizerKind::AnalyticSgd) => {
            check_capabilities(adapters, "analytic-sgd")?
        }
        (AttackMode::Gaussian, _) => {}
    }
    let samples = scene_samples(dataset);
    if samples.is_empty() {
        return Err(Error::InvalidParam(
            "dataset contains no annotated persons".into(),
        ));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_INIT, 0));
    let params = project_params(init_params(config, &mut init_rng), config.side);
    match config.optimizer {
        OptimizerKind::SgdMomentumFd => {
            sgd_fd_loop(&samples, adapters, config, transform, params)
        }
        OptimizerKind::AnalyticSgd => {
            analytic_loop(&samples, adapters, config, transform, params)
        }
        OptimizerKind::NelderMead => {
            nelder_mead_loop(&samples, adapters, config, transform, params)
        }
    }
}

fn record_or_abort(
    history: &mut Vec<LossRecord>,
    iteration: usize,
    loss: LossBreakdown,
) -> Result<()> {
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration,
            value: loss.total,
        });
    }
    history.push(LossRecord {
        iteration,
        total: loss.total,
        objectness: loss.objectness,
        tv: loss.tv,
    });
    Ok(())
}

fn sgd_fd_loop(
    samples: &[Sample<'_>],
    adapters: &[DetectorAdapter],
    config: &AttackConfig,
    transform: &TransformConfig,
    params: Params,
) -> Result<(Params, AttackState)> {
    let Params::Gaussian(mut gparams) = params else {
        unreachable!("sgd-momentum-fd runs in gaussian mode");
    };
    let m = gparams.centers.len();
    let mut velocity = vec![0.0; 2 * m];
    let mut history = Vec::with_capacity(config.iterations);
    let mut renderer = IncrementalRenderer::new(&gparams, config.side);
    let toys = toy_detectors(adapters);

    for iter in 0..config.iterations {
        let indices = batch_indices(samples.len(), config.batch_size, config.seed, iter as u64);
        let frozen = freeze_batch(
            samples,
            &indices,
            transform,
            config.eot_draws,
            config.seed,
            iter as u64,
        )?;
        let base_patch = renderer.patch();
        let gradient;
        let base_loss;
        if let Some(ref detectors) = toys {
            let mut eval = FastEval::new(
                detectors.clone(),
                &frozen,
                &base_patch,
                transform.patch_ratio,
                config.lambda_tv,
            )?;
            base_loss = eval.base_loss(&base_patch);
            let mut g = vec![0.0; 2 * m];
            for i in 0..m {
                let center = renderer.center(i);
                for axis in 0..2 {
                    let mut plus = center;
                    let mut minus = center;
                    if axis == 0 {
                        plus.0 += config.fd_step;
                        minus.0 -= config.fd_step;
                    } else {
                        plus.1 += config.fd_step;
                        minus.1 -= config.fd_step;
                    }
                    renderer.move_spot(i, plus);
                    let lp = eval.perturbed_loss(&renderer.patch());
                    renderer.move_spot(i, minus);
                    let lm = eval.perturbed_loss(&renderer.patch());
                    renderer.move_spot(i, center);
                    g[2 * i + axis] = (lp - lm) / (2.0 * config.fd_step);
                }
            }
            gradient = g;
        } else {
            base_loss = frozen_loss(
                &base_patch,
                &frozen,
                adapters,
                config.lambda_tv,
                transform.patch_ratio,
            )?;
            let mut g = vec![0.0; 2 * m];
            for i in 0..m {
                for axis in 0..2 {
                    let mut plus = gparams.clone();
                    let mut minus = gparams.clone();
                    if axis == 0 {
                        plus.centers[i].0 += config.fd_step;
                        minus.centers[i].0 -= config.fd_step;
                    } else {
                        plus.centers[i].1 += config.fd_step;
                        minus.centers[i].1 -= config.fd_step;
                    }
                    let lp = frozen_loss(
                        &crate::gaussian::render_gaussian_patch_unchecked(&plus, config.side),
                        &frozen,
                        adapters,
                        config.lambda_tv,
                        transform.patch_ratio,
                    )?;
                    let lm = frozen_loss(
                        &crate::gaussian::render_gaussian_patch_unchecked(&minus, config.side),
                        &frozen,
                        adapters,
                        config.lambda_tv,
                        transform.patch_ratio,
                    )?;
                    g[2 * i + axis] = (lp.total - lm.total) / (2.0 * config.fd_step);
                }
            }
            gradient = g;
        }
        record_or_abort(&mut history, iter, base_loss)?;

        for k in 0..2 * m {
            velocity[k] = config.momentum * velocity[k] - config.learning_rate * gradient[k];
        }
        let n = config.side as f64;
        for i in 0..m {
            let c = (
                (gparams.centers[i].0 + velocity[2 * i]).clamp(0.0, n),
                (gparams.centers[i].1 + velocity[2 * i + 1]).clamp(0.0, n),
            );
            gparams.centers[i] = c;
            renderer.move_spot(i, c);
        }
    }
    let iteration = history.len();
    Ok((
        Params::Gaussian(gparams.clone()),
        AttackState {
            params: Params::Gaussian(gparams),
            momentum: velocity,
            iteration,
            loss_history: history,
        },
    ))
}

fn analytic_loop(
    samples: &[Sample<'_>],
    adapters: &[DetectorAdapter],
    config: &AttackConfig,
    transform: &TransformConfig,
    params: Params,
) -> Result<(Params, AttackState)> {
    let mut params = params;
    let dim = match &params {
        Params::Gaussian(g) => 2 * g.centers.len(),
        Params::Pixel(p) => p.side() * p.side(),
    };
    let mut velocity = vec![0.0; dim];
    let mut history = Vec::with_capacity(config.iterations);

    for iter in 0..config.iterations {
        let indices = batch_indices(samples.len(), config.batch_size, config.seed, iter as u64);
        let frozen = freeze_batch(
            samples,
            &indices,
            transform,
            config.eot_draws,
            config.seed,
            iter as u64,
        )?;
        let patch = params.render(config.side)?;
        let side = patch.side();
        // mean over the batch of d(max objectness)/d(patch pixel)
        let mut patch_grad = vec![0.0; side * side];
        let mut obj_acc = 0.0;
        for (sample, ts) in &frozen.items {
            let mut tape: Vec<TapeEntry> = Vec::new();
            let mut composite = sample.image.clone();
            for (person, t) in sample.persons.iter().zip(ts) {
                compose_into(
                    &mut composite,
                    &patch,
                    person,
                    t,
                    1.0,
                    transform.patch_ratio,
                    Some(&mut tape),
                )?;
            }
            for adapter in adapters {
                let dets = adapter.detect(&composite)?;
                let best = dets.into_iter().find(|d| d.class_id == PERSON_CLASS);
                let Some(best) = best else { continue };
                obj_acc += best.objectness;
                let img_grad = adapter.image_gradient(&composite, &best)?;
                let g = backprop_tape(&tape, &img_grad, side * side);
                for (a, b) in patch_grad.iter_mut().zip(&g) {
                    *a += *b;
                }
            }
        }
        let count = frozen.items.len() as f64;
        for g in &mut patch_grad {
            *g /= count;
        }
        let objectness = obj_acc / count;
        let tv = total_variation(&patch);
        record_or_abort(
            &mut history,
            iter,
            LossBreakdown {
                total: objectness + config.lambda_tv * tv,
                objectness,
                tv,
            },
        )?;
        // add the TV term's pixel gradient
        let tvg = tv_gradient(patch.pixels(), side, side);
        for (a, b) in patch_grad.iter_mut().zip(&tvg) {
            *a += config.lambda_tv * *b;
        }
        match &mut params {
            Params::Pixel(p) => {
                let mut pixels = p.pixels().to_vec();
                for k in 0..dim {
                    velocity[k] =
                        config.momentum * velocity[k] - config.learning_rate * patch_grad[k];
                    pixels[k] = (pixels[k] + velocity[k]).clamp(0.0, 1.0);
                }
                *p = Patch::from_pixels(side, pixels, PatchMode::PixelLevel).unwrap();
            }
            Params::Gaussian(g) => {
                let center_grad = render_gradient(g, side, &patch_grad)?;
                let n = config.side as f64;
                for (i, cg) in center_grad.iter().enumerate() {
                    velocity[2 * i] =
                        config.momentum * velocity[2 * i] - config.learning_rate * cg.0;
                    velocity[2 * i + 1] =
                        config.momentum * velocity[2 * i + 1] - config.learning_rate * cg.1;
                    g.centers[i].0 = (g.centers[i].0 + velocity[2 * i]).clamp(0.0, n);
                    g.centers[i].1 = (g.centers[i].1 + velocity[2 * i + 1]).clamp(0.0, n);
                }
            }
        }
    }
    let iteration = history.len();
    Ok((
        params.clone(),
        AttackState {
            params,
            momentum: velocity,
            iteration,
            loss_history: history,
        },
    ))
}

fn nelder_mead_loop(
    samples: &[Sample<'_>],
    adapters: &[DetectorAdapter],
    config: &AttackConfig,
    transform: &TransformConfig,
    params: Params,
) -> Result<(Params, AttackState)> {
    let Params::Gaussian(gparams) = params else {
        return Err(Error::Config(
            "nelder-mead supports gaussian mode only".into(),
        ));
    };
    let m = gparams.centers.len();
    let dim = 2 * m;
    // transforms are frozen for the whole run: Nelder-Mead's simplex logic
    // assumes a fixed objective
    let indices = batch_indices(samples.len(), config.batch_size, config.seed, 0);
    let frozen = freeze_batch(
        samples,
        &indices,
        transform,
        config.eot_draws,
        config.seed,
        derive_seed(config.seed, STREAM_NM, 0),
    )?;
    let flatten = |p: &GaussianPatchParams| -> Vec<f64> {
        p.centers.iter().flat_map(|&(x, y)| [x, y]).collect()
    };
    let unflatten = |x: &[f64]| -> GaussianPatchParams {
        let n = config.side as f64;
        let centers = x
            .chunks(2)
            .map(|c| (c[0].clamp(0.0, n), c[1].clamp(0.0, n)))
            .collect();
        config.gaussian_params(centers)
    };
    let evaluate = |x: &[f64]| -> Result<LossBreakdown> {
        let p = unflatten(x);
        let patch = crate::gaussian::render_gaussian_patch(&p, config.side)?;
        frozen_loss(
            &patch,
            &frozen,
            adapters,
            config.lambda_tv,
            transform.patch_ratio,
        )
    };

    let mut history = Vec::with_capacity(config.iterations);
    if dim == 0 {
        // nothing to optimize; still report losses
        for iter in 0..config.iterations {
            let loss = evaluate(&[])?;
            record_or_abort(&mut history, iter, loss)?;
        }
        let iteration = history.len();
        return Ok((
            Params::Gaussian(gparams.clone()),
            AttackState {
                params: Params::Gaussian(gparams),
                momentum: vec![],
                iteration,
                loss_history: history,
            },
        ));
    }

    // initial simplex: the init point plus one vertex per coordinate
    let x0 = flatten(&gparams);
    let step = 0.05 * config.side as f64;
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((x0.clone(), evaluate(&x0)?.total));
    for k in 0..dim {
        let mut x = x0.clone();
        x[k] += step;
        let f = evaluate(&x)?.total;
        simplex.push((x, f));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    for iter in 0..config.iterations {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let best = evaluate(&simplex[0].0)?;
        record_or_abort(&mut history, iter, best)?;
        let worst = simplex.len() - 1;
        let centroid: Vec<f64> = (0..dim)
            .map(|k| {
                simplex[..worst].iter().map(|(x, _)| x[k]).sum::<f64>() / worst as f64
            })
            .collect();
        let reflect: Vec<f64> = (0..dim)
            .map(|k| centroid[k] + alpha * (centroid[k] - simplex[worst].0[k]))
            .collect();
        let f_reflect = evaluate(&reflect)?.total;
        if f_reflect < simplex[0].1 {
            let expand: Vec<f64> = (0..dim)
                .map(|k| centroid[k] + gamma * (reflect[k] - centroid[k]))
                .collect();
            let f_expand = evaluate(&expand)?.total;
            simplex[worst] = if f_expand < f_reflect {
                (expand, f_expand)
            } else {
                (reflect, f_reflect)
            };
        } else if f_reflect < simplex[worst - 1].1 {
            simplex[worst] = (reflect, f_reflect);
        } else {
            let contract: Vec<f64> = (0..dim)
                .map(|k| centroid[k] + rho * (simplex[worst].0[k] - centroid[k]))
                .collect();
            let f_contract = evaluate(&contract)?.total;
            if f_contract < simplex[worst].1 {
                simplex[worst] = (contract, f_contract);
            } else {
                // shrink toward the best vertex
                let best_x = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    for k in 0..dim {
                        v.0[k] = best_x[k] + sigma * (v.0[k] - best_x[k]);
                    }
                    v.1 = evaluate(&v.0)?.total;
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let final_params = unflatten(&simplex[0].0);
    let iteration = history.len();
    Ok((
        Params::Gaussian(final_params.clone()),
        AttackState {
            params: Params::Gaussian(final_params),
            momentum: vec![0.0; dim],
            iteration,
            loss_history: history,
        },
    ))
}

/// Loss history as a plain CSV table.
pub fn save_loss_history(history: &[LossRecord], path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("iteration,loss,loss_obj,loss_tv\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.12},{:.12},{:.12}\n",
            r.iteration, r.total, r.objectness, r.tv
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Mean of the first and last `window` recorded losses; the usual smoothed
/// before/after comparison.
pub fn smoothed_endpoints(history: &[LossRecord], window: usize) -> Option<(f64, f64)> {
    if history.is_empty() {
        return None;
    }
    let w = window.min(history.len());
    let first = history[..w].iter().map(|r| r.objectness).sum::<f64>() / w as f64;
    let last = history[history.len() - w..]
        .iter()
        .map(|r| r.objectness)
        .sum::<f64>()
        / w as f64;
    Some((first, last))
}
