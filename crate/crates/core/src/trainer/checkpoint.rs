//! Checkpoint directories: `params/*.otns`, `meta.json`, `optim.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{Adam, AdamConfig};
use crate::diffusion::{Codec, DiffusionSchedule, Direction, NoiseSpec, ScheduleConfig};
use crate::error::{Error, IoContext, Result};
use crate::nn::{DenoiserModel, ModelConfig, Mode, ParamStore};
use crate::otns::{read_tensor, write_tensor, NamedTensor};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Everything a model needs besides its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub noise: NoiseSpec,
    pub codec: Codec,
}

impl ModelSpec {
    pub fn direction(&self) -> Direction {
        self.model.direction
    }

    pub fn build_schedule(&self) -> Result<DiffusionSchedule> {
        self.schedule.build()
    }

    /// SHA-256 over the canonical JSON of the spec.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("spec serializes")))
    }

    /// True when both specs share schedule, noise and codec.
    pub fn diffusion_compatible(&self, other: &Self) -> bool {
        self.schedule == other.schedule && self.noise == other.noise && self.codec == other.codec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: u32,
    pub spec: ModelSpec,
    pub mode: Mode,
    pub alpha_bar_terminal: f64,
    pub step: u64,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub param_names: Vec<String>,
    pub params_hash: String,
    pub config_hash: String,
}

#[derive(Debug)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub model: DenoiserModel<T>,
    pub optim: Option<Adam<T>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Accept parameter files whose hash differs from the recorded one.
    pub allow_hash_mismatch: bool,
}

fn param_file(i: usize, name: &str) -> String {
    format!("{i:03}_{name}.otns")
}

fn params_hash<T: Scalar>(p: &ParamStore<T>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, a) in p.iter() {
        h.update(NamedTensor::from_array(name, a.view()).to_bytes()?);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    spec: &ModelSpec,
    model: &DenoiserModel<T>,
    optim: Option<&Adam<T>>,
    step: u64,
    seed: u64,
) -> Result<()> {
    if model.config() != &spec.model {
        return Err(Error::Checkpoint("model config differs from spec".into()));
    }
    let pdir = dir.join("params");
    fs::create_dir_all(&pdir).at(&pdir)?;
    for (i, (name, a)) in model.params().iter().enumerate() {
        write_tensor(&NamedTensor::from_array(name, a.view()), pdir.join(param_file(i, name)))?;
    }
    let sched = spec.build_schedule()?;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT,
        spec: spec.clone(),
        mode: model.mode(),
        alpha_bar_terminal: sched.alpha_bar(sched.terminal())?,
        step,
        seed,
        optimizer: optim.map(|o| o.config).unwrap_or(AdamConfig::new(0.0, 0.0)),
        param_names: model.params().names().to_vec(),
        params_hash: params_hash(model.params())?,
        config_hash: spec.hash(),
    };
    let mp = dir.join("meta.json");
    fs::write(&mp, serde_json::to_vec_pretty(&meta)?).at(&mp)?;
    let op = dir.join("optim.bin");
    match optim {
        Some(o) => fs::write(&op, o.to_bytes()?).at(&op)?,
        None if op.exists() => fs::remove_file(&op).at(&op)?,
        None => {}
    }
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let mp = dir.join("meta.json");
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(&mp).at(&mp)?)?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", meta.format)));
    }
    Ok(meta)
}

pub fn load_checkpoint<T: Scalar>(dir: &Path, opts: LoadOptions) -> Result<Checkpoint<T>> {
    let meta = read_meta(dir)?;
    if meta.config_hash != meta.spec.hash() {
        return Err(Error::Checkpoint(format!("{}: config hash does not match its metadata", dir.display())));
    }
    let sched = meta.spec.build_schedule()?;
    if (sched.alpha_bar(sched.terminal())? - meta.alpha_bar_terminal).abs() > 1e-12 {
        return Err(Error::Checkpoint("stored schedule does not rebuild to the same terminal alpha_bar".into()));
    }
    let mut params = ParamStore::<T>::default();
    for (i, name) in meta.param_names.iter().enumerate() {
        let t = read_tensor(dir.join("params").join(param_file(i, name)))?;
        if &t.name != name {
            return Err(Error::Checkpoint(format!("parameter file {i} holds '{}', expected '{name}'", t.name)));
        }
        params.push(name.clone(), t.to_array());
    }
    let hash = params_hash(&params)?;
    if hash != meta.params_hash && !opts.allow_hash_mismatch {
        return Err(Error::Checkpoint(format!(
            "{}: parameter hash mismatch (recorded {}, found {hash})",
            dir.display(),
            meta.params_hash
        )));
    }
    let model = DenoiserModel::from_params(meta.spec.model.clone(), meta.mode, params)?;
    let op = dir.join("optim.bin");
    let optim = if op.is_file() {
        Some(Adam::from_bytes(meta.optimizer, model.params(), &fs::read(&op).at(&op)?)?)
    } else {
        None
    };
    Ok(Checkpoint { meta, model, optim })
}
