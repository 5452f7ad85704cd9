use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::diffusion::condition::{Codec, ConditionStack};
use crate::diffusion::noise::{multires_noise, NoiseSpec};
use crate::diffusion::schedule::{v_to_z0, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{Caption, TaskToken};

/// Which way a model renders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Rgb2x,
    X2rgb,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Rgb2x => "rgb2x",
            Direction::X2rgb => "x2rgb",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb2x" => Ok(Direction::Rgb2x),
            "x2rgb" => Ok(Direction::X2rgb),
            _ => Err(Error::Validation(format!("unknown direction '{s}'"))),
        }
    }
}

/// The switch input: a task token for RGB→X, a caption for X→RGB.
#[derive(Debug, Clone, PartialEq)]
pub enum Prompt {
    Task(TaskToken),
    Caption(Caption),
}

impl Prompt {
    pub fn direction(&self) -> Direction {
        match self {
            Prompt::Task(_) => Direction::Rgb2x,
            Prompt::Caption(_) => Direction::X2rgb,
        }
    }
}

/// Anything that predicts a velocity from a noisy latent and a condition.
pub trait VPredictor<T: Scalar> {
    fn predict_v(&self, z_t: &Array3<T>, cond: &ConditionStack<T>, prompt: &Prompt) -> Result<Array3<T>>;
}

/// Latent planes produced by every model.
pub const LATENT_PLANES: usize = 3;

/// Shared inference settings.
#[derive(Debug, Clone)]
pub struct Sampling<'a> {
    pub schedule: &'a DiffusionSchedule,
    pub noise: &'a NoiseSpec,
    pub codec: &'a Codec,
}

/// One-evaluation inference from pure noise at t = T:
/// `z_T = ε`, `v̂ = model(z_T, cond, prompt)`, output `decode(√ᾱ_T·z_T − √(1−ᾱ_T)·v̂)`.
pub fn single_step_infer<T: Scalar, M: VPredictor<T> + ?Sized>(
    model: &M,
    cond: &ConditionStack<T>,
    prompt: &Prompt,
    seed: u64,
    s: &Sampling<'_>,
) -> Result<Array3<T>> {
    let (h, w) = cond.dims();
    let z_t: Array3<T> = multires_noise((h, w, LATENT_PLANES), &s.noise.with_seed(seed));
    let v = model.predict_v(&z_t, cond, prompt)?;
    if v.dim() != z_t.dim() {
        return Err(Error::Shape(format!("model returned {:?}, expected {:?}", v.dim(), z_t.dim())));
    }
    let z0 = v_to_z0(&z_t, &v, s.schedule)?;
    Ok(s.codec.decode(&z0))
}
