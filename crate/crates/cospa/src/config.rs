//! Run configuration: a TOML file merged with command-line overrides. The
//! merged result is written next to each command's outputs so a run can be
//! replayed with `--config <snapshot>`.

use std::path::{Path, PathBuf};

use cospa_core::scene::SceneRanges;
use serde::{Deserialize, Serialize};

use crate::model::{ModelKind, Preset};
use crate::{Error, Result};

pub const SNAPSHOT_NAME: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub simulate: SimulateConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub evaluate: EvaluateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            simulate: SimulateConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Scene manifest (JSON lines).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenes: Option<PathBuf>,
    /// Output directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Checkpoint to run (enhance, beampattern).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint to continue training from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cospa: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crunet: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Scene id within the manifest (beampattern); defaults to the first.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub count: usize,
    pub duration: f64,
    pub rt60: (f64, f64),
    pub snr_db: (f64, f64),
    pub smr_db: (f64, f64),
    pub n_mics: usize,
    pub spacing: f64,
    /// Also write `.speech/.noise/.music/.sensor/.target` WAVs.
    pub write_components: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let r = SceneRanges::default();
        Self {
            count: 50,
            duration: r.duration,
            rt60: r.rt60,
            snr_db: r.snr_db,
            smr_db: r.smr_db,
            n_mics: r.n_mics,
            spacing: r.spacing,
            write_components: true,
        }
    }
}

impl SimulateConfig {
    pub fn ranges(&self) -> Result<SceneRanges> {
        let r = SceneRanges {
            duration: self.duration,
            rt60: self.rt60,
            snr_db: self.snr_db,
            smr_db: self.smr_db,
            n_mics: self.n_mics,
            spacing: self.spacing,
            ..SceneRanges::default()
        };
        r.validate()?;
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub preset: Preset,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Cospa,
            preset: Preset::Desk,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    /// Stop once an epoch's mean loss (dB) reaches this.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_below: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-3,
            clip_norm: Some(10.0),
            stop_below: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub methods: Vec<String>,
    /// Reference microphone for multichannel methods.
    pub mic: usize,
}

pub const METHODS: [&str; 6] = ["cospa", "crunet", "dnn-mvdr", "omvdr", "ogmvdr", "passthrough"];

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            methods: METHODS.iter().map(|s| s.to_string()).collect(),
            mic: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Invalid(format!("config serialization: {e}")))
    }

    /// Writes the snapshot into `dir` (created if missing).
    pub fn snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(SNAPSHOT_NAME);
        std::fs::write(&p, self.to_toml()?).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }
}
