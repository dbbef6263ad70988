//! Detector abstraction producing (box, objectness, class score) triples,
//! with a built-in template-matching reference detector and a client for
//! external black-box detectors.

mod external;
mod toy;

pub use external::{serve_adapter, ExternalDetector, WireDetection, WireRequest, WireResponse};
pub use toy::{toy_detect, toy_image_gradient, ToyDetector, ToyTemplateConfig};
pub(crate) use toy::ToyScoreCache;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::GrayImage;
use crate::transforms::BBox;

pub const PERSON_CLASS: &str = "person";

/// One detector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub box_: BBox,
    pub objectness: f64,
    pub class_score: f64,
    pub class_id: String,
}

/// What an adapter can do beyond plain scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub image_gradients: bool,
}

/// A concrete detector behind the common interface.
#[derive(Debug)]
pub enum DetectorAdapter {
    Toy(ToyDetector),
    External(ExternalDetector),
}

impl DetectorAdapter {
    pub fn toy(config: ToyTemplateConfig) -> Result<Self> {
        Ok(DetectorAdapter::Toy(ToyDetector::new(config)?))
    }

    pub fn name(&self) -> &str {
        match self {
            DetectorAdapter::Toy(t) => t.name(),
            DetectorAdapter::External(e) => e.name(),
        }
    }

    pub fn capabilities(&self) -> Capabilities {
        match self {
            DetectorAdapter::Toy(_) => Capabilities {
                image_gradients: true,
            },
            DetectorAdapter::External(_) => Capabilities {
                image_gradients: false,
            },
        }
    }

    /// Run detection; the returned list is sorted by descending objectness.
    pub fn detect(&self, image: &GrayImage) -> Result<Vec<Detection>> {
        match self {
            DetectorAdapter::Toy(t) => Ok(t.detect(image)),
            DetectorAdapter::External(e) => e
                .detect(image)
                .map_err(|err| err.in_adapter(e.name())),
        }
    }

    /// Per-pixel gradient of one detection's objectness, for adapters that
    /// support it.
    pub fn image_gradient(&self, image: &GrayImage, detection: &Detection) -> Result<Vec<f64>> {
        match self {
            DetectorAdapter::Toy(t) => t.image_gradient(image, detection),
            DetectorAdapter::External(e) => Err(crate::error::Error::Capability {
                adapter: e.name().to_string(),
                needed: "image_gradients".into(),
            }),
        }
    }
}

/// Maximum objectness over a detection list; 0 when empty.
pub fn max_objectness(detections: &[Detection]) -> f64 {
    detections
        .iter()
        .map(|d| d.objectness)
        .fold(0.0, f64::max)
}

/// Summed per-adapter max objectness of the target class over the ensemble.
pub fn ensemble_objectness(adapters: &[DetectorAdapter], image: &GrayImage) -> Result<f64> {
    ensemble_objectness_for_class(adapters, image, PERSON_CLASS)
}

pub fn ensemble_objectness_for_class(
    adapters: &[DetectorAdapter],
    image: &GrayImage,
    class_id: &str,
) -> Result<f64> {
    assert!(!adapters.is_empty(), "ensemble needs at least one adapter");
    let mut total = 0.0;
    for adapter in adapters {
        let dets = adapter.detect(image)?;
        let filtered: Vec<Detection> = dets
            .into_iter()
            .filter(|d| d.class_id == class_id)
            .collect();
        total += max_objectness(&filtered);
    }
    Ok(total)
}

/// Greedy non-maximum suppression on a list already sorted by descending
/// objectness.
pub fn nms(detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for det in detections {
        if kept
            .iter()
            .all(|k| k.box_.iou(&det.box_) <= iou_threshold)
        {
            kept.push(det);
        }
    }
    kept
}
