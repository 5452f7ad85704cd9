use serde::{Deserialize, Serialize};

use ndarray::{Array, Dimension, Zip};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Cumulative noise-retention factors ᾱ_0..ᾱ_T.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    alpha_bar: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

impl DiffusionSchedule {
    /// ᾱ_t = Π_{s ≤ t} (1 − β_s) with ᾱ_0 = 1. Only checks that the sequence
    /// strictly decreases; terminal bounds are enforced by [`make_schedule`].
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one beta".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Config("alpha_bar not strictly decreasing".into()));
        }
        Ok(Self { alpha_bar })
    }

    /// Terminal timestep index T.
    pub fn terminal(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::Config(format!("timestep {t} outside 0..={}", self.terminal())))
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `(√ᾱ_t, √(1 − ᾱ_t))`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let a = self.alpha_bar(t)?;
        Ok((a.sqrt(), (1.0 - a).sqrt()))
    }

    pub fn check_invariants(&self) -> Result<()> {
        let first = self.alpha_bar[0];
        let last = self.alpha_bar[self.terminal()];
        if first < 0.999 {
            return Err(Error::Config(format!("alpha_bar[0] = {first} < 0.999")));
        }
        if last > 0.01 {
            return Err(Error::Config(format!("alpha_bar[T] = {last} > 0.01")));
        }
        if self.alpha_bar.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::Config("alpha_bar outside (0, 1]".into()));
        }
        Ok(())
    }
}

/// Linear-β schedule with T steps; rejects schedules violating the
/// ᾱ_0 ≥ 0.999 and ᾱ_T ≤ 0.01 endpoint bounds.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps < 1 {
        return Err(Error::Config("T must be at least 1".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let s = DiffusionSchedule::from_betas(&betas)?;
    s.check_invariants()?;
    Ok(s)
}

fn check_shapes<T, D: Dimension>(a: &Array<T, D>, b: &Array<T, D>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Forward noising `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn noise_target<T: Scalar, D: Dimension>(
    z0: &Array<T, D>,
    eps: &Array<T, D>,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Array<T, D>> {
    check_shapes(z0, eps)?;
    let (a, b) = sched.coefficients(t)?;
    let (a, b) = (T::lit(a), T::lit(b));
    Ok(Zip::from(z0).and(eps).map_collect(|&z, &e| a * z + b * e))
}

/// Velocity target `v = √ᾱ_t·ε − √(1−ᾱ_t)·z0`.
pub fn v_target<T: Scalar, D: Dimension>(
    z0: &Array<T, D>,
    eps: &Array<T, D>,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Array<T, D>> {
    check_shapes(z0, eps)?;
    let (a, b) = sched.coefficients(t)?;
    let (a, b) = (T::lit(a), T::lit(b));
    Ok(Zip::from(z0).and(eps).map_collect(|&z, &e| a * e - b * z))
}

/// Single-step latent recovery at the terminal index:
/// `ẑ0 = √ᾱ_T·z_T − √(1−ᾱ_T)·v̂`.
pub fn v_to_z0<T: Scalar, D: Dimension>(
    z_t: &Array<T, D>,
    v: &Array<T, D>,
    sched: &DiffusionSchedule,
) -> Result<Array<T, D>> {
    check_shapes(z_t, v)?;
    let (a, b) = sched.coefficients(sched.terminal())?;
    let (a, b) = (T::lit(a), T::lit(b));
    Ok(Zip::from(z_t).and(v).map_collect(|&z, &v| a * z - b * v))
}

/// d ẑ0 / d v̂ at the terminal index, `−√(1−ᾱ_T)`.
pub fn dz0_dv(sched: &DiffusionSchedule) -> f64 {
    -(1.0 - sched.alpha_bar[sched.terminal()]).sqrt()
}
