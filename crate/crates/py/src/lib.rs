//! Thin Python bindings over the core toolkit. Images and patches cross the
//! boundary as `(side/h/w, flat row-major pixel list)` pairs; boxes as
//! `(x, y, w, h)` tuples.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use irpatch::board;
use irpatch::calibrate;
use irpatch::detect::{DetectorAdapter, ToyTemplateConfig};
use irpatch::evaluate;
use irpatch::gaussian::{self, GaussianPatchParams};
use irpatch::image::{GrayImage, Patch, PatchMode};
use irpatch::scenegen::{self, SceneConfig};
use irpatch::transforms::BBox;

fn err(e: irpatch::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Rasterize a Gaussian spot patch; returns the flat row-major pixel list.
#[pyfunction]
#[pyo3(signature = (centers, s, sigma, mu, side))]
fn render_gaussian_patch(
    centers: Vec<(f64, f64)>,
    s: f64,
    sigma: f64,
    mu: f64,
    side: usize,
) -> PyResult<Vec<f64>> {
    let params = GaussianPatchParams::new(centers, s, sigma, mu);
    let patch = gaussian::render_gaussian_patch(&params, side).map_err(err)?;
    Ok(patch.pixels().to_vec())
}

#[pyfunction]
fn total_variation(side: usize, pixels: Vec<f64>) -> PyResult<f64> {
    let patch = Patch::from_pixels(side, pixels, PatchMode::PixelLevel).map_err(err)?;
    Ok(gaussian::total_variation(&patch))
}

/// Run the built-in detector; returns `(x, y, w, h, objectness)` tuples
/// sorted by descending objectness.
#[pyfunction]
fn toy_detect(h: usize, w: usize, pixels: Vec<f64>) -> PyResult<Vec<(f64, f64, f64, f64, f64)>> {
    let image = GrayImage::from_pixels(h, w, pixels).map_err(err)?;
    let adapter = DetectorAdapter::toy(ToyTemplateConfig::default()).map_err(err)?;
    let dets = adapter.detect(&image).map_err(err)?;
    Ok(dets
        .into_iter()
        .map(|d| (d.box_.x, d.box_.y, d.box_.w, d.box_.h, d.objectness))
        .collect())
}

#[pyfunction]
fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    BBox::new(a.0, a.1, a.2, a.3).iou(&BBox::new(b.0, b.1, b.2, b.3))
}

/// All-point interpolated AP. Predictions are
/// `(image_index, (x, y, w, h), confidence)`; ground truth is
/// `(image_index, (x, y, w, h))`.
#[pyfunction]
#[pyo3(signature = (predictions, ground_truth, iou_threshold = 0.5))]
fn average_precision(
    predictions: Vec<(usize, (f64, f64, f64, f64), f64)>,
    ground_truth: Vec<(usize, (f64, f64, f64, f64))>,
    iou_threshold: f64,
) -> f64 {
    let preds: Vec<(usize, irpatch::detect::Detection)> = predictions
        .into_iter()
        .map(|(i, b, conf)| {
            (
                i,
                irpatch::detect::Detection {
                    box_: BBox::new(b.0, b.1, b.2, b.3),
                    objectness: conf,
                    class_score: 1.0,
                    class_id: irpatch::detect::PERSON_CLASS.to_string(),
                },
            )
        })
        .collect();
    let gt: Vec<(usize, BBox)> = ground_truth
        .into_iter()
        .map(|(i, b)| (i, BBox::new(b.0, b.1, b.2, b.3)))
        .collect();
    evaluate::average_precision(&evaluate::pr_curve(&preds, &gt, iou_threshold))
}

/// Fit the bulb temperature profile; returns
/// `(amplitude, center, sigma, baseline, rmse, converged)`.
#[pyfunction]
fn fit_bulb_profile(
    positions: Vec<f64>,
    temperatures: Vec<f64>,
) -> PyResult<(f64, f64, f64, f64, f64, bool)> {
    if positions.len() != temperatures.len() {
        return Err(PyValueError::new_err("positions and temperatures differ in length"));
    }
    let samples: Vec<calibrate::ProfileSample> = positions
        .into_iter()
        .zip(temperatures)
        .map(|(position, temperature)| calibrate::ProfileSample {
            position,
            temperature,
        })
        .collect();
    let fit = calibrate::fit_bulb_profile(&samples).map_err(err)?;
    Ok((
        fit.amplitude,
        fit.center,
        fit.sigma,
        fit.baseline,
        fit.rmse,
        fit.converged,
    ))
}

#[pyfunction]
#[pyo3(signature = (amplitude, camera_span = (15.0, 45.0)))]
fn temperature_to_intensity(amplitude: f64, camera_span: (f64, f64)) -> PyResult<f64> {
    calibrate::temperature_to_intensity(amplitude, camera_span).map_err(err)
}

/// Generate one annotated scene; returns
/// `(h, w, pixels, [(x, y, w, h), ...])`.
#[pyfunction]
fn synth_scene(seed: u64) -> PyResult<(usize, usize, Vec<f64>, Vec<(f64, f64, f64, f64)>)> {
    use rand::SeedableRng;
    let config = SceneConfig::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let scene = scenegen::synth_scene(&mut rng, &config).map_err(err)?;
    let boxes = scene
        .persons
        .iter()
        .map(|b| (b.x, b.y, b.w, b.h))
        .collect();
    Ok((
        scene.image.h(),
        scene.image.w(),
        scene.image.pixels().to_vec(),
        boxes,
    ))
}

/// Map spot centers onto board centimeters; returns
/// `([(id, x_cm, y_cm), ...], warnings)`.
#[pyfunction]
#[pyo3(signature = (centers, side_px, board_cm = 35.0, min_spacing_cm = 1.0))]
fn export_board(
    centers: Vec<(f64, f64)>,
    side_px: usize,
    board_cm: f64,
    min_spacing_cm: f64,
) -> PyResult<(Vec<(usize, f64, f64)>, Vec<String>)> {
    let params = GaussianPatchParams::new(
        centers,
        gaussian::DEFAULT_SPOT_AMPLITUDE,
        gaussian::DEFAULT_SPOT_SIGMA,
        0.5,
    );
    let layout = board::export_board(&params, side_px, board_cm, min_spacing_cm).map_err(err)?;
    Ok((layout.bulbs, layout.warnings))
}

#[pymodule]
fn irpatch_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(render_gaussian_patch, m)?)?;
    m.add_function(wrap_pyfunction!(total_variation, m)?)?;
    m.add_function(wrap_pyfunction!(toy_detect, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(fit_bulb_profile, m)?)?;
    m.add_function(wrap_pyfunction!(temperature_to_intensity, m)?)?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    m.add_function(wrap_pyfunction!(export_board, m)?)?;
    Ok(())
}
