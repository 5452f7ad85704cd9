use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ouro_core::sceneforge::SceneConfig;
use ouro_core::{Channel, Profile};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

pub const PROVENANCE_FORMAT: &str = "ouro-provenance/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataConfig {
    pub profile: Profile,
    pub count: usize,
    pub resolution: usize,
    pub split: String,
    pub previews: bool,
    pub seed: u64,
    pub scene: SceneConfig,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            profile: Profile::IndoorLike,
            count: 16,
            resolution: 64,
            split: "train".into(),
            previews: false,
            seed: 0,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Channels to produce with an rgb2x checkpoint; empty means all five.
    pub tokens: Vec<Channel>,
    pub caption: Option<String>,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { tokens: Vec::new(), caption: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferVideoConfig {
    pub task: Channel,
    pub window_size: usize,
    pub stride: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for InferVideoConfig {
    fn default() -> Self {
        Self { task: Channel::Normal, window_size: 8, stride: 4, gamma: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub channels: String,
    pub allow_unpaired: bool,
    pub per_channel_si: bool,
    pub perceptual: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { channels: "a,n,r,m,E,rgb".into(), allow_unpaired: false, per_channel_si: false, perceptual: "none".into() }
    }
}

/// Reads the config block for `command` from `path`, or the defaults. A
/// provenance file is accepted in place of a block and yields the config it
/// recorded.
pub fn load_block<C: DeserializeOwned + Default>(path: Option<&Path>, command: &str) -> CliResult<C> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let bytes = fs::read(path).map_err(|e| CliError::Invalid(format!("config {}: {e}", path.display())))?;
    let mut value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| CliError::Invalid(format!("config {}: {e}", path.display())))?;
    if value.get("format").and_then(|f| f.as_str()) == Some(PROVENANCE_FORMAT) {
        let p: Provenance = serde_json::from_value(value)
            .map_err(|e| CliError::Invalid(format!("provenance {}: {e}", path.display())))?;
        if p.command != command {
            return Err(CliError::Invalid(format!(
                "{} records a '{}' run, not '{command}'",
                path.display(),
                p.command
            )));
        }
        value = p.config;
    }
    serde_json::from_value(value).map_err(|e| CliError::Invalid(format!("config {}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub format: String,
    pub command: String,
    pub argv: Vec<String>,
    /// Fully resolved config block.
    pub config: serde_json::Value,
    pub versions: BTreeMap<String, String>,
    pub started_unix_s: u64,
    pub wall_time_s: f64,
    pub status: String,
    pub outputs: Vec<PathBuf>,
}

/// Collects provenance while a command runs.
pub struct Recorder {
    command: String,
    argv: Vec<String>,
    config: serde_json::Value,
    started: SystemTime,
    clock: Instant,
    pub outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn new<C: Serialize>(command: &str, argv: &[String], config: &C) -> Self {
        Self {
            command: command.into(),
            argv: argv.to_vec(),
            config: serde_json::to_value(config).expect("config serializes"),
            started: SystemTime::now(),
            clock: Instant::now(),
            outputs: Vec::new(),
        }
    }

    pub fn write<T>(self, path: &Path, result: &CliResult<T>) -> CliResult<()> {
        let mut versions = BTreeMap::new();
        versions.insert("ouro".into(), env!("CARGO_PKG_VERSION").into());
        versions.insert("checkpoint_format".into(), ouro_core::trainer::CHECKPOINT_FORMAT.to_string());
        versions.insert("otns".into(), ouro_core::otns::VERSION.to_string());
        let p = Provenance {
            format: PROVENANCE_FORMAT.into(),
            command: self.command,
            argv: self.argv,
            config: self.config,
            versions,
            started_unix_s: self.started.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            wall_time_s: self.clock.elapsed().as_secs_f64(),
            status: match result {
                Ok(_) => "ok".into(),
                Err(e) => format!("error: {e}"),
            },
            outputs: self.outputs,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
        }
        let bytes = serde_json::to_vec_pretty(&p).expect("provenance serializes");
        fs::write(path, bytes).map_err(|e| io_error(path, e))
    }
}

pub fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Runtime(ouro_core::Error::Io { path: path.to_path_buf(), source })
}
