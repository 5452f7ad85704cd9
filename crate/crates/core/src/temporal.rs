//! Training-free video inference with an inflated image model: overlapping
//! windows processed in order, each overlap initialized from the previous
//! window's prediction.

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::diffusion::{multires_noise, noise_target, v_to_z0, Prompt, Sampling, LATENT_PLANES};
use crate::error::{Error, Result};
use crate::nn::{DenoiserModel, Mode};
use crate::scalar::Scalar;
use crate::sceneforge::record_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VideoConfig {
    pub window_size: usize,
    pub stride: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for VideoConfig {
    fn default() -> Self {
        Self { window_size: 8, stride: 4, gamma: 0.1, seed: 0 }
    }
}

impl VideoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.stride && self.stride < self.window_size) {
            return Err(Error::Config(format!(
                "stride {} must satisfy 1 <= stride < window size {}",
                self.stride, self.window_size
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        Ok(())
    }
}

/// Inclusive frame ranges in processing order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub windows: Vec<(usize, usize)>,
    pub window_size: usize,
    pub stride: usize,
}

impl WindowPlan {
    /// Frames shared by window `k` and window `k − 1`.
    pub fn overlap(&self, k: usize) -> usize {
        if k == 0 {
            return 0;
        }
        let (_, prev_end) = self.windows[k - 1];
        let (start, _) = self.windows[k];
        (prev_end + 1).saturating_sub(start)
    }

    /// Window whose output is kept for `frame`: the last one containing it.
    pub fn owner(&self, frame: usize) -> Option<usize> {
        self.windows.iter().rposition(|&(s, e)| s <= frame && frame <= e)
    }

    pub fn n_frames(&self) -> usize {
        self.windows.last().map_or(0, |w| w.1 + 1)
    }
}

pub fn plan_windows(n_frames: usize, window_size: usize, stride: usize) -> Result<WindowPlan> {
    if window_size == 0 || stride == 0 || stride >= window_size {
        return Err(Error::Config(format!("invalid window {window_size} / stride {stride}")));
    }
    if n_frames < window_size {
        return Err(Error::Config(format!("{n_frames} frames is fewer than the window size {window_size}")));
    }
    let mut windows = Vec::new();
    let mut start = 0;
    loop {
        let end = start + window_size - 1;
        if end >= n_frames - 1 {
            let s = n_frames - window_size;
            windows.push((s, n_frames - 1));
            break;
        }
        windows.push((start, end));
        start += stride;
    }
    Ok(WindowPlan { windows, window_size, stride })
}

/// `γ·z_prev + (1 − γ)·ε`.
pub fn blend_init<T: Scalar>(z_prev: &Array3<T>, eps: &Array3<T>, gamma: f64) -> Result<Array3<T>> {
    if z_prev.dim() != eps.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", z_prev.dim(), eps.dim())));
    }
    if gamma == 1.0 {
        return Ok(z_prev.clone());
    }
    if gamma == 0.0 {
        return Ok(eps.clone());
    }
    let (g, h) = (T::lit(gamma), T::lit(1.0 - gamma));
    Ok(Zip::from(z_prev).and(eps).map_collect(|&a, &b| g * a + h * b))
}

/// Predicts velocities for one clip of frames sharing a prompt.
pub trait ClipPredictor<T: Scalar> {
    fn predict_clip(&self, z: &[Array3<T>], cond: &[Array3<T>], prompt: &Prompt) -> Result<Vec<Array3<T>>>;
}

impl<T: Scalar> ClipPredictor<T> for DenoiserModel<T> {
    fn predict_clip(&self, z: &[Array3<T>], cond: &[Array3<T>], prompt: &Prompt) -> Result<Vec<Array3<T>>> {
        self.forward_clip(z, cond, prompt)
    }
}

#[derive(Debug, Clone)]
pub struct VideoOutput<T> {
    /// Decoded output per frame.
    pub frames: Vec<Array3<T>>,
    pub plan: WindowPlan,
    /// Initial latents of every window, in window order.
    pub inits: Vec<Vec<Array3<T>>>,
    /// Predicted clean latents of every window.
    pub z0: Vec<Vec<Array3<T>>>,
    /// Per-frame denoiser evaluations spent (set by [`infer_video`]).
    pub evaluations: u64,
}

/// Seed of the noise shared by all frames of window `k`.
pub fn window_seed(seed: u64, k: usize) -> u64 {
    if k == 0 {
        seed
    } else {
        record_seed(seed, k as u64)
    }
}

/// Windowed inference over latent-space conditions `cond` (one per frame).
/// Videos shorter than the window run as a single window.
pub fn infer_windows<T: Scalar, M: ClipPredictor<T> + ?Sized>(
    model: &M,
    cond: &[Array3<T>],
    prompt: &Prompt,
    vcfg: &VideoConfig,
    s: &Sampling<'_>,
) -> Result<VideoOutput<T>> {
    vcfg.validate()?;
    let n = cond.len();
    if n == 0 {
        return Err(Error::Validation("video has no frames".into()));
    }
    let (h, w, _) = cond[0].dim();
    if let Some(i) = cond.iter().position(|c| c.dim() != cond[0].dim()) {
        return Err(Error::Shape(format!("frame {i} has shape {:?}, frame 0 has {:?}", cond[i].dim(), cond[0].dim())));
    }
    let plan = if n < vcfg.window_size {
        WindowPlan { windows: vec![(0, n - 1)], window_size: n, stride: vcfg.stride }
    } else {
        plan_windows(n, vcfg.window_size, vcfg.stride)?
    };
    let t = s.schedule.terminal();
    let mut last_init: Vec<Option<Array3<T>>> = vec![None; n];
    let mut last_z0: Vec<Option<Array3<T>>> = vec![None; n];
    let (mut inits, mut z0s) = (Vec::new(), Vec::new());
    for (k, &(start, end)) in plan.windows.iter().enumerate() {
        let eps: Array3<T> = multires_noise((h, w, LATENT_PLANES), &s.noise.with_seed(window_seed(vcfg.seed, k)));
        let mut init = Vec::with_capacity(end - start + 1);
        for f in start..=end {
            init.push(match (&last_z0[f], &last_init[f]) {
                (Some(z0), Some(zi)) => blend_init(&noise_target(z0, zi, t, s.schedule)?, &eps, vcfg.gamma)?,
                _ => eps.clone(),
            });
        }
        let v = model.predict_clip(&init, &cond[start..=end], prompt)?;
        let mut z0 = Vec::with_capacity(init.len());
        for (i, f) in (start..=end).enumerate() {
            let z = v_to_z0(&init[i], &v[i], s.schedule)?;
            last_init[f] = Some(init[i].clone());
            last_z0[f] = Some(z.clone());
            z0.push(z);
        }
        inits.push(init);
        z0s.push(z0);
    }
    let frames = last_z0.into_iter().map(|z| s.codec.decode(&z.expect("every frame is covered"))).collect();
    Ok(VideoOutput { frames, plan, inits, z0: z0s, evaluations: 0 })
}

/// Inflates an image-mode model and runs [`infer_windows`].
pub fn infer_video<T: Scalar>(
    model_image: &DenoiserModel<T>,
    cond: &[Array3<T>],
    prompt: &Prompt,
    vcfg: &VideoConfig,
    s: &Sampling<'_>,
) -> Result<VideoOutput<T>> {
    if model_image.mode() != Mode::Image {
        return Err(Error::Config("video inference expects an image-mode model".into()));
    }
    let video = model_image.inflate_temporal()?;
    let mut out = infer_windows(&video, cond, prompt, vcfg, s)?;
    out.evaluations = video.evaluations();
    Ok(out)
}

/// Baseline: every frame inferred on its own with seed `seed + i`.
pub fn infer_independent<T: Scalar>(
    model_image: &DenoiserModel<T>,
    cond: &[Array3<T>],
    prompt: &Prompt,
    seed: u64,
    s: &Sampling<'_>,
) -> Result<Vec<Array3<T>>> {
    cond.iter()
        .enumerate()
        .map(|(i, c)| {
            let (h, w, _) = c.dim();
            let z: Array3<T> = multires_noise((h, w, LATENT_PLANES), &s.noise.with_seed(seed.wrapping_add(i as u64)));
            let v = model_image.predict_clip(std::slice::from_ref(&z), std::slice::from_ref(c), prompt)?;
            Ok(s.codec.decode(&v_to_z0(&z, &v[0], s.schedule)?))
        })
        .collect()
}

/// Mean absolute difference between consecutive frames.
pub fn adjacent_difference<T: Scalar>(frames: &[Array3<T>]) -> f64 {
    if frames.len() < 2 {
        return 0.0;
    }
    let total: f64 = frames
        .windows(2)
        .map(|p| {
            let n = p[0].len() as f64;
            Zip::from(&p[0]).and(&p[1]).fold(0.0, |acc, &a, &b| acc + (a - b).to_f64().unwrap().abs()) / n
        })
        .sum();
    total / (frames.len() - 1) as f64
}
