use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vineyield_core::association::AssociationConfig;
use vineyield_core::pipeline::{ImageSettings, IngestSettings};
use vineyield_core::synth::FieldSpec;
use vineyield_neural::{CnnRegressorConfig, RobustLossParams, ScheduleConfig, TransformerConfig};

/// Input files. Relative entries resolve against the config file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub yield_csv: Option<PathBuf>,
    pub calibration_csv: Option<PathBuf>,
    pub image_index: Option<PathBuf>,
    pub track_csv: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    /// Hand-labelled boxes (JSONL, same shape as detections) for AP checks.
    pub labels: Option<PathBuf>,
    pub regions: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSettings {
    pub mode: String,
    pub iou_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluateSettings {
    pub bins: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencySettings {
    /// Test points whose CAMs are aggregated.
    pub max_points: usize,
    /// North × South pairs per point.
    pub max_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// `"f32"` or `"f64"` for training and inference.
    pub precision: String,
    pub paths: Paths,
    pub ingest: IngestSettings,
    pub images: ImageSettings,
    pub association: AssociationConfig,
    pub detection: DetectionSettings,
    pub cnn: CnnRegressorConfig,
    pub cnn_schedule: ScheduleConfig,
    pub loss: RobustLossParams,
    pub transformer: TransformerConfig,
    pub transformer_schedule: ScheduleConfig,
    pub evaluate: EvaluateSettings,
    pub saliency: SaliencySettings,
    pub synth: FieldSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            precision: "f32".into(),
            paths: Paths::default(),
            ingest: IngestSettings::default(),
            images: ImageSettings::default(),
            association: AssociationConfig::default(),
            detection: DetectionSettings { mode: "area".into(), iou_threshold: 0.5 },
            cnn: CnnRegressorConfig::default(),
            cnn_schedule: ScheduleConfig::cnn_default(),
            loss: RobustLossParams::default(),
            transformer: TransformerConfig::default(),
            transformer_schedule: ScheduleConfig::transformer_default(),
            evaluate: EvaluateSettings { bins: vec![10.0, 20.0] },
            saliency: SaliencySettings { max_points: 32, max_pairs: 4 },
            synth: FieldSpec::default(),
        }
    }
}

/// Overlays `top` onto `base` table by table, so a config only names what it changes.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut base = toml::Value::try_from(Self::default())?;
        let top: toml::Value = toml::from_str(text).context("config is not valid TOML")?;
        merge(&mut base, top);
        let cfg: Self = base.try_into().context("config does not match the pipeline schema")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config and anchors its relative paths at the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::parse(&text)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        cfg.anchor(dir);
        Ok(cfg)
    }

    fn anchor(&mut self, dir: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p.as_mut() {
                if x.is_relative() {
                    *x = dir.join(&*x);
                }
            }
        };
        let p = &mut self.paths;
        for slot in [
            &mut p.yield_csv,
            &mut p.calibration_csv,
            &mut p.image_index,
            &mut p.track_csv,
            &mut p.detections,
            &mut p.labels,
            &mut p.regions,
        ] {
            fix(slot);
        }
        if self.out.is_relative() {
            self.out = dir.join(&self.out);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.precision.as_str(), "f32" | "f64") {
            bail!("precision must be \"f32\" or \"f64\", got {:?}", self.precision);
        }
        self.association.validate()?;
        self.cnn.validate()?;
        self.transformer.validate()?;
        self.loss.validate()?;
        if self.evaluate.bins.iter().any(|b| !(*b > 0.0)) {
            bail!("evaluation bin sizes must be positive");
        }
        Ok(())
    }

    /// SHA-256 of the resolved config, hex encoded. The output directory is
    /// left out: where results land does not change what they are.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

pub fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let p = p.as_deref().with_context(|| format!("config is missing paths.{what}"))?;
    if !p.exists() {
        bail!("paths.{what} does not exist: {}", p.display());
    }
    Ok(p)
}
