use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{SourceKind, TrainConfig};
use crate::dataset::read_split;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sceneforge::record_seed;
use crate::types::{validate_record, DatasetRecord};

/// In-memory records of one data source.
#[derive(Debug, Clone)]
pub struct Source<T> {
    pub records: Vec<DatasetRecord<T>>,
    pub ratio: f64,
    pub kind: SourceKind,
}

impl<T: Scalar> Source<T> {
    pub fn annotated(records: Vec<DatasetRecord<T>>) -> Self {
        Self { records, ratio: 1.0, kind: SourceKind::Annotated }
    }

    pub fn wild(records: Vec<DatasetRecord<T>>, ratio: f64) -> Self {
        Self { records, ratio, kind: SourceKind::Wild }
    }

    pub fn with_ratio(mut self, ratio: f64) -> Self {
        self.ratio = ratio;
        self
    }
}

pub fn load_sources<T: Scalar>(cfg: &TrainConfig) -> Result<Vec<Source<T>>> {
    if cfg.sources.is_empty() {
        return Err(Error::Config("no data sources configured".into()));
    }
    cfg.sources
        .iter()
        .map(|s| {
            let records = read_split(&s.root.join(&s.split))?;
            Ok(Source { records, ratio: s.ratio, kind: s.kind })
        })
        .collect()
}

pub(crate) fn check_sources<T: Scalar>(sources: &[Source<T>], joint: bool) -> Result<()> {
    if sources.is_empty() {
        return Err(Error::Config("no data sources".into()));
    }
    let sum: f64 = sources.iter().map(|s| s.ratio).sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("source ratios sum to {sum}, expected 1")));
    }
    for s in sources {
        if s.records.is_empty() && s.ratio > 0.0 {
            return Err(Error::Config("a data source with a positive ratio has no records".into()));
        }
        if s.kind == SourceKind::Wild && !joint {
            return Err(Error::Config("wild data is only usable in joint training".into()));
        }
        for r in &s.records {
            let v = validate_record(r);
            if let Some(first) = v.first() {
                return Err(Error::Record { id: r.id.clone(), source: Box::new(Error::Validation(first.to_string())) });
            }
            if s.kind == SourceKind::Annotated && r.intrinsics.mask.is_empty() {
                return Err(Error::Validation(format!("record {} has no annotated channels", r.id)));
            }
        }
    }
    Ok(())
}

/// Seed for item `index` of an independent stream derived from `seed`.
pub fn stream_seed(seed: u64, stream: u64, index: u64) -> u64 {
    record_seed(record_seed(seed, stream), index)
}

pub(crate) const STREAM_STEP: u64 = 1;
const STREAM_ORDER: u64 = 1000;

/// Items per source in every batch, by largest remainder of `ratio·batch`.
pub(crate) fn batch_counts(ratios: &[f64], batch: usize) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * batch as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..ratios.len()).collect();
    rest.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let missing = batch - counts.iter().sum::<usize>();
    for &k in rest.iter().take(missing) {
        counts[k] += 1;
    }
    counts
}

/// `(source, record)` pairs of the batch at `step`: each source walks through
/// seeded epoch permutations of its records, so the plan depends only on
/// `(seed, step)`.
pub(crate) fn batch_plan(lens: &[usize], ratios: &[f64], batch: usize, seed: u64, step: u64) -> Vec<(usize, usize)> {
    let counts = batch_counts(ratios, batch);
    let mut plan = Vec::with_capacity(batch);
    for (k, (&len, &c)) in lens.iter().zip(&counts).enumerate() {
        for j in 0..c {
            let g = step * c as u64 + j as u64;
            let epoch = g / len as u64;
            let pos = (g % len as u64) as usize;
            let mut perm: Vec<usize> = (0..len).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, STREAM_ORDER + k as u64, epoch)));
            plan.push((k, perm[pos]));
        }
    }
    plan
}
