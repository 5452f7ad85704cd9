use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LoadOptions, ModelSpec};
use super::config::{SourceKind, TrainConfig};
use super::cycle;
use super::data::{batch_plan, check_sources, stream_seed, Source, STREAM_STEP};
use super::optim::{Adam, AdamConfig};
use super::passes::Ctx;
use super::stage1;
use crate::diffusion::{DiffusionSchedule, Direction};
use crate::error::{Error, IoContext, Result};
use crate::nn::{DenoiserModel, ParamStore};
use crate::objectives::LossBreakdown;
use crate::scalar::Scalar;

const STREAM_INIT: u64 = 2;
const RUN_FILE: &str = "train.json";

/// One model under training.
#[derive(Debug)]
pub struct Member<T> {
    pub spec: ModelSpec,
    pub model: DenoiserModel<T>,
    pub opt: Adam<T>,
}

/// One JSON line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: u64,
    pub direction: String,
    pub kind: SourceKind,
    pub items: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunRecord {
    config: TrainConfig,
    run_hash: String,
}

/// Hash of everything that shapes the trajectory except its length.
pub fn run_hash(cfg: &TrainConfig) -> String {
    let mut c = cfg.clone();
    c.steps = 0;
    c.checkpoint_every = 0;
    hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
}

#[derive(Debug)]
pub struct Trainer<T> {
    cfg: TrainConfig,
    sources: Vec<Source<T>>,
    schedule: DiffusionSchedule,
    members: Vec<Member<T>>,
    step: u64,
    last_good: Option<PathBuf>,
}

fn spec_for(cfg: &TrainConfig, d: Direction) -> ModelSpec {
    ModelSpec { model: cfg.model.config(d), schedule: cfg.schedule.clone(), noise: cfg.noise.clone(), codec: cfg.codec }
}

fn directions(cfg: &TrainConfig) -> Vec<Direction> {
    match cfg.direction {
        Some(d) => vec![d],
        None => vec![Direction::Rgb2x, Direction::X2rgb],
    }
}

impl<T: Scalar> Trainer<T> {
    /// Fresh models initialized from `cfg.seed`.
    pub fn new(cfg: TrainConfig, sources: Vec<Source<T>>) -> Result<Self> {
        let members = directions(&cfg)
            .into_iter()
            .map(|d| {
                let spec = spec_for(&cfg, d);
                let model = DenoiserModel::build(spec.model.clone(), stream_seed(cfg.seed, STREAM_INIT, d as u64))?;
                let opt = Adam::new(AdamConfig::new(cfg.lr, cfg.grad_clip), model.params());
                Ok(Member { spec, model, opt })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(cfg, sources, members, 0)
    }

    /// Starts from trained models (one per direction, in direction order)
    /// with fresh optimizer state. Their schedule, noise and codec must match
    /// `cfg`.
    pub fn from_pretrained(cfg: TrainConfig, sources: Vec<Source<T>>, models: Vec<Checkpoint<T>>) -> Result<Self> {
        let dirs = directions(&cfg);
        if models.len() != dirs.len() {
            return Err(Error::Config(format!("expected {} pretrained models, got {}", dirs.len(), models.len())));
        }
        let mut members = Vec::new();
        for (d, ck) in dirs.into_iter().zip(models) {
            let spec = ck.meta.spec;
            if spec.direction() != d {
                return Err(Error::Config(format!("pretrained model is {}, expected {}", spec.direction().name(), d.name())));
            }
            if !spec.diffusion_compatible(&spec_for(&cfg, d)) {
                return Err(Error::Config(format!(
                    "pretrained {} model uses a different schedule, noise or codec than the run",
                    d.name()
                )));
            }
            let opt = Adam::new(AdamConfig::new(cfg.lr, cfg.grad_clip), ck.model.params());
            members.push(Member { spec, model: ck.model, opt });
        }
        Self::assemble(cfg, sources, members, 0)
    }

    /// Continues a run saved by [`Trainer::save`]. The run configuration must
    /// match the saved one (apart from `steps`) unless `allow_mismatch`.
    pub fn resume(cfg: TrainConfig, sources: Vec<Source<T>>, dir: &Path, allow_mismatch: bool) -> Result<Self> {
        let rp = dir.join(RUN_FILE);
        let rec: RunRecord = serde_json::from_slice(&fs::read(&rp).at(&rp)?)?;
        if rec.run_hash != run_hash(&cfg) && !allow_mismatch {
            return Err(Error::Config(format!(
                "{}: run configuration differs from the checkpoint's; pass the override to resume anyway",
                dir.display()
            )));
        }
        let dirs = directions(&cfg);
        let mut members = Vec::new();
        let mut step = None;
        for d in &dirs {
            let sub = if dirs.len() == 1 { dir.to_path_buf() } else { dir.join(d.name()) };
            let ck = load_checkpoint::<T>(&sub, LoadOptions::default())?;
            if ck.meta.spec.direction() != *d {
                return Err(Error::Checkpoint(format!("{} holds a {} model", sub.display(), ck.meta.spec.direction().name())));
            }
            if *step.get_or_insert(ck.meta.step) != ck.meta.step {
                return Err(Error::Checkpoint("joint checkpoints were saved at different steps".into()));
            }
            let mut opt = ck.optim.ok_or_else(|| Error::Checkpoint(format!("{} has no optimizer state", sub.display())))?;
            opt.config = AdamConfig::new(cfg.lr, cfg.grad_clip);
            members.push(Member { spec: ck.meta.spec, model: ck.model, opt });
        }
        let mut t = Self::assemble(cfg, sources, members, step.unwrap_or(0))?;
        t.last_good = Some(dir.to_path_buf());
        Ok(t)
    }

    fn assemble(cfg: TrainConfig, sources: Vec<Source<T>>, members: Vec<Member<T>>, step: u64) -> Result<Self> {
        cfg.validate()?;
        check_sources(&sources, cfg.direction.is_none())?;
        let schedule = cfg.schedule.build()?;
        if members.len() == 2 && !members[0].spec.diffusion_compatible(&members[1].spec) {
            return Err(Error::Config("joint models disagree on schedule, noise or codec".into()));
        }
        Ok(Self { cfg, sources, schedule, members, step, last_good: None })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn members(&self) -> &[Member<T>] {
        &self.members
    }

    pub fn model(&self, d: Direction) -> Option<&DenoiserModel<T>> {
        self.members.iter().find(|m| m.spec.direction() == d).map(|m| &m.model)
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn ctx(&self) -> Ctx<'_> {
        Ctx { schedule: &self.schedule, noise: &self.cfg.noise, codec: &self.cfg.codec }
    }

    fn last_good(&self) -> String {
        self.last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into())
    }

    /// Loss lines and per-member gradients of the batch at the current step,
    /// without updating anything.
    pub fn gradients(&self) -> Result<(Vec<LogLine>, Vec<ParamStore<T>>)> {
        let step = self.step;
        let lens: Vec<usize> = self.sources.iter().map(|s| s.records.len()).collect();
        let ratios: Vec<f64> = self.sources.iter().map(|s| s.ratio).collect();
        let plan = batch_plan(&lens, &ratios, self.cfg.batch_size, self.cfg.seed, step);
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, STREAM_STEP, step));
        let ctx = self.ctx();
        let line = |direction: &str, kind, items, loss| LogLine {
            step,
            direction: direction.to_string(),
            kind,
            items,
            loss,
            grad_norm: 0.0,
        };
        if self.members.len() == 1 {
            let m = &self.members[0];
            let items: Vec<_> = plan.iter().map(|&(k, r)| &self.sources[k].records[r]).collect();
            let (loss, g) = stage1::step(&ctx, &m.model, &items, self.cfg.dropout_p, &mut rng)?;
            Ok((vec![line(m.spec.direction().name(), SourceKind::Annotated, items.len(), loss)], vec![g]))
        } else {
            let items: Vec<_> = plan.iter().map(|&(k, r)| (&self.sources[k].records[r], self.sources[k].kind)).collect();
            let out = cycle::step(&ctx, &self.cfg, &self.members[0].model, &self.members[1].model, &items, &mut rng)?;
            Ok((
                out.per_kind.into_iter().map(|(k, n, l)| line("joint", k, n, l)).collect(),
                vec![out.grads_rgb2x, out.grads_x2rgb],
            ))
        }
    }

    /// Mutable access for tests and tools that edit weights in place.
    pub fn model_mut(&mut self, d: Direction) -> Option<&mut DenoiserModel<T>> {
        self.members.iter_mut().find(|m| m.spec.direction() == d).map(|m| &mut m.model)
    }

    /// Runs one optimizer step and returns its log lines.
    pub fn train_step(&mut self) -> Result<Vec<LogLine>> {
        let (mut lines, grads) = self.gradients()?;
        let finite = lines.iter().all(|l| l.loss.is_finite()) && grads.iter().all(|g| g.all_finite());
        if !finite {
            return Err(Error::NonFiniteLoss { step: self.step, last_good: self.last_good() });
        }
        let mut norm = 0.0f64;
        let lr = self.cfg.lr_at(self.step);
        for (m, g) in self.members.iter_mut().zip(&grads) {
            m.opt.config.lr = lr;
            norm = norm.max(m.opt.step(m.model.params_mut(), g));
        }
        if !self.members.iter().all(|m| m.model.params().all_finite()) {
            return Err(Error::NonFiniteLoss { step: self.step, last_good: self.last_good() });
        }
        self.step += 1;
        for l in &mut lines {
            l.grad_norm = norm;
        }
        Ok(lines)
    }

    /// Writes checkpoints for every member under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        for m in &self.members {
            let sub = if self.members.len() == 1 { dir.to_path_buf() } else { dir.join(m.spec.direction().name()) };
            save_checkpoint(&sub, &m.spec, &m.model, Some(&m.opt), self.step, self.cfg.seed)?;
        }
        let rp = dir.join(RUN_FILE);
        let rec = RunRecord { config: self.cfg.clone(), run_hash: run_hash(&self.cfg) };
        fs::write(&rp, serde_json::to_vec_pretty(&rec)?).at(&rp)?;
        Ok(())
    }

    /// Trains until `cfg.steps`, appending JSON lines to `log`, saving
    /// periodic checkpoints as `out/step-NNNNNN` and the last as `out/final`.
    pub fn run(&mut self, out: &Path, log: &mut dyn Write) -> Result<Vec<LogLine>> {
        let mut history = Vec::new();
        while self.step < self.cfg.steps {
            let lines = self.train_step()?;
            for l in &lines {
                writeln!(log, "{}", serde_json::to_string(l)?).at(out)?;
            }
            if self.step % 50 == 0 || self.step == self.cfg.steps {
                if let Some(l) = lines.first() {
                    info!("step {} {} total {:.5}", self.step, l.direction, l.loss.total);
                }
            }
            history.extend(lines);
            let k = self.cfg.checkpoint_every;
            if k > 0 && self.step % k == 0 && self.step < self.cfg.steps {
                let dir = out.join(format!("step-{:06}", self.step));
                self.save(&dir)?;
                self.last_good = Some(dir);
            }
        }
        let dir = out.join("final");
        self.save(&dir)?;
        self.last_good = Some(dir);
        Ok(history)
    }
}
