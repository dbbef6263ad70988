//! TOML experiment configuration shared by every CLI subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::calibrate::DEFAULT_CAMERA_SPAN;
use crate::detect::{DetectorAdapter, ExternalDetector, ToyTemplateConfig};
use crate::error::{Error, Result};
use crate::evaluate::EvalConfig;
use crate::scenegen::SceneConfig;
use crate::transforms::TransformConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// Directory holding `manifest.jsonl` plus images; produced by gen-data.
    pub dir: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            n_train: 40,
            n_test: 50,
        }
    }
}

/// One detector endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DetectorConfig {
    BuiltinToy {
        #[serde(default)]
        toy: ToyTemplateConfig,
    },
    External {
        #[serde(default)]
        name: Option<String>,
        /// Subprocess speaking the wire protocol on stdin/stdout.
        #[serde(default)]
        command: Vec<String>,
        /// TCP endpoint, as an alternative to `command`.
        #[serde(default)]
        host: Option<String>,
    },
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig::BuiltinToy {
            toy: ToyTemplateConfig::default(),
        }
    }
}

impl DetectorConfig {
    pub fn build(&self) -> Result<DetectorAdapter> {
        match self {
            DetectorConfig::BuiltinToy { toy } => DetectorAdapter::toy(toy.clone()),
            DetectorConfig::External {
                name,
                command,
                host,
            } => {
                let label = name.as_deref().unwrap_or("external");
                match (command.is_empty(), host) {
                    (false, None) => Ok(DetectorAdapter::External(
                        ExternalDetector::from_command(label, command)?,
                    )),
                    (true, Some(addr)) => Ok(DetectorAdapter::External(
                        ExternalDetector::from_tcp(label, addr)?,
                    )),
                    _ => Err(Error::Config(
                        "external detector needs exactly one of `command` or `host`".into(),
                    )),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrateConfig {
    /// Camera temperature span `(min, max)` in degC.
    pub camera_span: (f64, f64),
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            camera_span: DEFAULT_CAMERA_SPAN,
        }
    }
}

/// The whole experiment file. Every section has defaults, so an empty file
/// is a valid experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub scene: SceneConfig,
    pub attack: AttackConfig,
    pub transform: TransformConfig,
    pub detector: DetectorConfig,
    /// Extra ensemble members beyond `detector`.
    pub detectors: Vec<DetectorConfig>,
    pub evaluate: EvalConfig,
    pub calibrate: CalibrateConfig,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            what: path.display().to_string(),
            msg: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.attack.validate()?;
        self.transform.validate()?;
        if !(0.0..=1.0).contains(&self.evaluate.iou_threshold) {
            return Err(Error::Config("evaluate.iou_threshold outside [0, 1]".into()));
        }
        let (lo, hi) = self.calibrate.camera_span;
        if hi <= lo {
            return Err(Error::Config(format!("empty camera span ({lo}, {hi})")));
        }
        Ok(())
    }

    /// Effective seed: flag override, else the file, else 0.
    pub fn effective_seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(0)
    }

    pub fn effective_out_dir(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.or_else(|| self.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Primary detector plus any extra ensemble members.
    pub fn build_adapters(&self) -> Result<Vec<DetectorAdapter>> {
        let mut adapters = vec![self.detector.build()?];
        for d in &self.detectors {
            adapters.push(d.build()?);
        }
        Ok(adapters)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_a_valid_experiment() {
        let config: ExperimentConfig = toml::from_str("").unwrap();
        config.validate().unwrap();
        assert_eq!(config.effective_seed(None), 0);
        assert_eq!(config.effective_seed(Some(9)), 9);
        assert!(matches!(config.detector, DetectorConfig::BuiltinToy { .. }));
    }

    #[test]
    fn sections_override_defaults() {
        let text = r#"
seed = 7
out_dir = "runs/a"

[dataset]
n_train = 3
n_test = 2

[attack]
iterations = 5
spots = 9
optimizer = "nelder-mead"

[transform]
angle_deg = 10.0

[detector]
kind = "builtin-toy"

[detector.toy]
name = "variant"
logistic_slope = 7.5
"#;
        let config: ExperimentConfig = toml::from_str(text).unwrap();
        config.validate().unwrap();
        assert_eq!(config.seed, Some(7));
        assert_eq!(config.dataset.n_train, 3);
        assert_eq!(config.attack.iterations, 5);
        assert_eq!(config.attack.spots, 9);
        assert_eq!(
            config.attack.optimizer,
            crate::attack::OptimizerKind::NelderMead
        );
        assert_eq!(config.transform.angle_deg, 10.0);
        let DetectorConfig::BuiltinToy { toy } = &config.detector else {
            panic!("expected builtin-toy");
        };
        assert_eq!(toy.name, "variant");
        assert_eq!(toy.logistic_slope, 7.5);
        // untouched sections keep defaults
        assert_eq!(config.attack.lambda_tv, 1e-4);
        assert_eq!(config.evaluate.iou_threshold, 0.5);
    }

    #[test]
    fn invalid_sections_are_rejected() {
        let bad_lambda: ExperimentConfig =
            toml::from_str("[attack]\nlambda_tv = -1.0\n").unwrap();
        assert!(bad_lambda.validate().is_err());
        let bad_span: ExperimentConfig =
            toml::from_str("[calibrate]\ncamera_span = [40.0, 20.0]\n").unwrap();
        assert!(bad_span.validate().is_err());
        assert!(toml::from_str::<ExperimentConfig>("seed = \"x\"").is_err());
    }

    #[test]
    fn external_detector_needs_one_endpoint() {
        let both: DetectorConfig = toml::from_str(
            "kind = \"external\"\ncommand = [\"detector\"]\nhost = \"localhost:9\"\n",
        )
        .unwrap();
        assert!(both.build().is_err());
        let neither: DetectorConfig = toml::from_str("kind = \"external\"\n").unwrap();
        assert!(neither.build().is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        let config = ExperimentConfig {
            seed: Some(3),
            ..ExperimentConfig::default()
        };
        std::fs::write(&path, toml::to_string(&config).unwrap()).unwrap();
        let back = ExperimentConfig::load(&path).unwrap();
        assert_eq!(config, back);
    }
}
