//! TOML run configuration shared by all `ldct` commands.
//!
//! Unknown keys are rejected everywhere. A single top-level `seed` drives
//! every random choice through fixed offsets: phantoms use `seed`, noise
//! `seed + 1`, weight initialization `seed + 2` and batch shuffling
//! `seed + 3`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ImageShape, ScanGeometry};
use crate::noise::DEFAULT_ELECTRONIC_VARIANCE;
use crate::pfbs::{ModelConfig, PfbsMode, TrainingConfig};
use crate::phantom::EllipsePhantomSpec;
use crate::tv::{lambda_preset, TvParams};

pub const PHANTOM_SEED_OFFSET: u64 = 0;
pub const NOISE_SEED_OFFSET: u64 = 1;
pub const INIT_SEED_OFFSET: u64 = 2;
pub const SHUFFLE_SEED_OFFSET: u64 = 3;

/// Water attenuation (1/cm) used for HU previews.
pub const DEFAULT_MU_WATER: f64 = 0.193;
pub const DISPLAY_WINDOW_HU: (f64, f64) = (-150.0, 150.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "reference")]
    Reference,
    #[serde(rename = "fbp")]
    Fbp,
    #[serde(rename = "tv")]
    Tv,
    #[serde(rename = "pfbs-ir")]
    PfbsIr,
    #[serde(rename = "pfbs-air")]
    PfbsAir,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Reference => "reference",
            Method::Fbp => "fbp",
            Method::Tv => "tv",
            Method::PfbsIr => "pfbs-ir",
            Method::PfbsAir => "pfbs-air",
        }
    }

    pub fn pfbs_mode(&self) -> Option<PfbsMode> {
        match self {
            Method::PfbsIr => Some(PfbsMode::Ir),
            Method::PfbsAir => Some(PfbsMode::Air),
            _ => None,
        }
    }
}

fn default_geometry() -> String {
    "desk_small".into()
}

fn default_doses() -> Vec<f64> {
    vec![5e4]
}

fn default_electronic_variance() -> f64 {
    DEFAULT_ELECTRONIC_VARIANCE
}

fn default_dose() -> f64 {
    5e4
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Geometry preset name.
    #[serde(default = "default_geometry")]
    pub geometry: String,
    /// Overrides the preset's image field of view (cm).
    #[serde(default)]
    pub image_fov: Option<f64>,
    /// Reconstruction grid width in pixels; the pixel size is
    /// `image_fov / width`.
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub preview: PreviewSection,
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub reconstruct: Option<ReconstructSection>,
    #[serde(default)]
    pub eval: Option<EvalSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreviewSection {
    pub mu_water: f64,
    pub window_hu: (f64, f64),
}

impl Default for PreviewSection {
    fn default() -> Self {
        Self {
            mu_water: DEFAULT_MU_WATER,
            window_hu: DISPLAY_WINDOW_HU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub out_dir: PathBuf,
    pub count: usize,
    #[serde(default = "default_doses")]
    pub doses: Vec<f64>,
    #[serde(default = "default_electronic_variance")]
    pub electronic_variance: f64,
    /// Phantom distribution; its `seed`, `width` and `fov` are replaced by
    /// the run seed and grid.
    #[serde(default)]
    pub phantom: Option<EllipsePhantomSpec>,
}

fn default_width() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub stages: usize,
    pub channels: usize,
    pub final_relu: bool,
    /// Scale applied to the Kaiming initialization of each stage's last conv.
    pub output_init_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(PfbsMode::Air);
        Self {
            stages: m.stages,
            channels: m.channels,
            final_relu: m.final_relu,
            output_init_scale: m.output_init_scale,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, mode: PfbsMode, seed: u64) -> ModelConfig {
        ModelConfig {
            mode,
            stages: self.stages,
            channels: self.channels,
            final_relu: self.final_relu,
            output_init_scale: self.output_init_scale,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainingConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
        }
    }
}

impl TrainingSection {
    pub fn training_config(&self, seed: u64) -> TrainingConfig {
        TrainingConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub method: Method,
    #[serde(default = "default_dose")]
    pub dose: f64,
    #[serde(default = "default_true")]
    pub resume: bool,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
}

/// TV settings; `lambda` defaults to the per-dose preset (0.01 when the dose
/// has none).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TvSection {
    pub lambda: Option<f64>,
    pub mu: f64,
    pub outer_iters: usize,
    pub cg_iters: usize,
    pub cg_tol: f64,
}

impl Default for TvSection {
    fn default() -> Self {
        let p = TvParams::new(0.01);
        Self {
            lambda: None,
            mu: p.mu,
            outer_iters: p.outer_iters,
            cg_iters: p.cg_iters,
            cg_tol: p.cg_tol,
        }
    }
}

impl TvSection {
    pub fn params(&self, dose: Option<f64>) -> TvParams {
        let lambda = self.lambda.or_else(|| dose.and_then(lambda_preset)).unwrap_or(0.01);
        TvParams {
            lambda,
            mu: self.mu,
            outer_iters: self.outer_iters,
            cg_iters: self.cg_iters,
            cg_tol: self.cg_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructSection {
    pub method: Method,
    pub input: PathBuf,
    pub output: PathBuf,
    #[serde(default)]
    pub preview: Option<PathBuf>,
    /// Checkpoint directory, required for the `pfbs-*` methods.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Dose of the input, used for the TV lambda preset.
    #[serde(default)]
    pub dose: Option<f64>,
    #[serde(default)]
    pub tv: TvSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub methods: Vec<Method>,
    /// Checkpoint directory per `pfbs-*` method and dose, keyed
    /// `"<method>@<dose>"`, or per method alone.
    #[serde(default)]
    pub checkpoints: BTreeMap<String, PathBuf>,
    /// Doses to evaluate; all doses in the manifest when empty.
    #[serde(default)]
    pub doses: Vec<f64>,
    /// Evaluate at most this many test samples per dose.
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub tv: TvSection,
}

impl EvalSection {
    pub fn checkpoint(&self, method: Method, dose: f64) -> Option<&PathBuf> {
        self.checkpoints
            .get(&format!("{}@{dose}", method.as_str()))
            .or_else(|| self.checkpoints.get(method.as_str()))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the fully resolved config (defaults filled in) to `path`.
    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn scan_geometry(&self) -> Result<ScanGeometry> {
        let g = ScanGeometry::preset(&self.geometry).map_err(|e| Error::Config(e.to_string()))?;
        match self.image_fov {
            Some(fov) => g.with_image_fov(fov).map_err(|e| Error::Config(e.to_string())),
            None => Ok(g),
        }
    }

    pub fn image_shape(&self) -> Result<ImageShape> {
        let g = self.scan_geometry()?;
        ImageShape::new(self.width, self.width, g.image_fov() / self.width as f64)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn phantom_spec(&self, section: &SimulateSection) -> Result<EllipsePhantomSpec> {
        let geometry = self.scan_geometry()?;
        let spec = EllipsePhantomSpec {
            width: self.width,
            fov: geometry.image_fov(),
            seed: self.seed.wrapping_add(PHANTOM_SEED_OFFSET),
            ..section.phantom.clone().unwrap_or_default()
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c.geometry, "desk_small");
        assert_eq!(c.seed, 0);
        assert_eq!(c.preview.window_hu, (-150.0, 150.0));
        assert!(c.scan_geometry().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[train]\nmanifest='a'\nout_dir='b'\nmethod='pfbs-air'\nlr=1").is_err());
        assert!(RunConfig::from_toml("geometry = 'nope'")
            .unwrap()
            .scan_geometry()
            .is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let text = r#"
            seed = 5
            [train]
            manifest = "data/manifest.jsonl"
            out_dir = "runs/air"
            method = "pfbs-air"
            [train.training]
            epochs = 2
            batch_size = 4
            lr = 0.0
            beta1 = 0.9
            beta2 = 0.999
            eps = 1e-8
        "#;
        let c = RunConfig::from_toml(text).unwrap();
        let again = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, again);
        assert_eq!(again.train.unwrap().training.lr, 0.0);
    }

    #[test]
    fn tv_lambda_follows_dose_preset() {
        let tv = TvSection::default();
        assert_eq!(tv.params(Some(1e4)).lambda, 0.03);
        assert_eq!(tv.params(Some(123.0)).lambda, 0.01);
        let fixed = TvSection {
            lambda: Some(0.2),
            ..tv
        };
        assert_eq!(fixed.params(Some(1e4)).lambda, 0.2);
    }
}
