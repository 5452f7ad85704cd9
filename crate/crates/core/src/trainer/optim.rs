use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::otns::NamedTensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub clip: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, clip: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip }
    }
}

/// Adam with global-norm clipping, no weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: ParamStore<T>,
    v: ParamStore<T>,
    t: u64,
}

const OPTIM_MAGIC: &[u8; 4] = b"OOPT";

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        Self { config, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) -> f64 {
        let norm = grads.l2_norm();
        let clip = if norm > self.config.clip { self.config.clip / norm } else { 1.0 };
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step = T::lit(c.lr / bc1);
        let sbc2 = T::lit(bc2.sqrt());
        let eps = T::lit(c.eps);
        let clip = T::lit(clip);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads.values())
            .zip(self.m.values_mut().iter_mut())
            .zip(self.v.values_mut().iter_mut())
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g * clip;
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                *p -= step * *m / (v.sqrt() / sbc2 + eps);
            });
        }
        norm
    }

    /// `OOPT | u64 t | u32 count | count × (u64 len | OTNS m) | count × (u64 len | OTNS v)`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(OPTIM_MAGIC);
        out.extend_from_slice(&self.t.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u32).to_le_bytes());
        for store in [&self.m, &self.v] {
            for (name, a) in store.iter() {
                let b = NamedTensor::from_array(name, a.view()).to_bytes()?;
                out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                out.extend_from_slice(&b);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(config: AdamConfig, params: &ParamStore<T>, bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("optimizer state: {m}"));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != OPTIM_MAGIC {
            return Err(bad("bad magic"));
        }
        let t = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if count != params.len() {
            return Err(bad("parameter count differs"));
        }
        let mut out = Self::new(config, params);
        for store in [&mut out.m, &mut out.v] {
            for i in 0..count {
                let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
                let tensor = NamedTensor::from_bytes(take(len)?)?;
                let expected = &params.names()[i];
                let slot = store.values_mut().get_mut(i).unwrap();
                if &tensor.name != expected || tensor.dims != slot.shape() {
                    return Err(bad(&format!("entry {i} does not match parameter {expected}")));
                }
                *slot = tensor.to_array();
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        out.t = t;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamStore::<f64>::default();
        let id = p.push("x", ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let mut opt = Adam::new(AdamConfig::new(0.1, 10.0), &p);
        for _ in 0..500 {
            let mut g = p.zeros_like();
            *g.get_mut(id) = p.get(id).mapv(|x| 2.0 * x);
            opt.step(&mut p, &g);
        }
        assert!(p.get(id).iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn clipping_bounds_the_first_step() {
        let mut p = ParamStore::<f64>::default();
        let id = p.push("x", ArrayD::zeros(IxDyn(&[1])));
        let mut g = p.zeros_like();
        g.get_mut(id).fill(1e6);
        let mut opt = Adam::new(AdamConfig::new(0.5, 1.0), &p);
        assert_eq!(opt.step(&mut p, &g), 1e6);
        // Adam's first step has magnitude lr regardless of scale.
        assert!((p.get(id)[[0]] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn state_round_trips_bitwise() {
        let mut p = ParamStore::<f32>::default();
        let id = p.push("w", ArrayD::from_elem(IxDyn(&[2, 3]), 0.25));
        let mut opt = Adam::new(AdamConfig::new(1e-3, 1.0), &p);
        let mut g = p.zeros_like();
        g.get_mut(id).fill(0.7);
        opt.step(&mut p, &g);
        let back = Adam::from_bytes(opt.config, &p, &opt.to_bytes().unwrap()).unwrap();
        assert_eq!(back, opt);
        let mut bytes = opt.to_bytes().unwrap();
        bytes.pop();
        assert!(Adam::from_bytes(opt.config, &p, &bytes).is_err());
    }
}
