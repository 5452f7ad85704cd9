//! Batched single-step passes through a model with their backward.

use ndarray::{s, Array3, Array4, Axis, Zip};
use rand::Rng;

use crate::diffusion::{
    dz0_dv, encode_slot, multires_noise_with, noise_target, slot_offset, v_to_z0, Codec, ConditionStack, DiffusionSchedule,
    NoiseSpec, Prompt,
};
use crate::error::{Error, Result};
use crate::nn::{hwc_to_chw, nchw_sample_to_hwc, stack_input, DenoiserModel, ParamStore, Trace};
use crate::scalar::Scalar;
use crate::types::{collapse_planes, decode_normal, expand_planes, Channel, ChannelMask, IntrinsicSet};

/// Diffusion settings shared by a run.
#[derive(Debug, Clone, Copy)]
pub struct Ctx<'a> {
    pub schedule: &'a DiffusionSchedule,
    pub noise: &'a NoiseSpec,
    pub codec: &'a Codec,
}

/// Result of one batched pass: decoded single-step predictions.
pub struct Pass<T> {
    pub out: Vec<Array3<T>>,
    trace: Option<Trace<T>>,
    latent_planes: usize,
}

impl<'a> Ctx<'a> {
    pub fn latent_noise<T: Scalar, R: Rng + ?Sized>(&self, h: usize, w: usize, rng: &mut R) -> Result<Array3<T>> {
        let (lh, lw) = self.codec.latent_dims(h, w)?;
        Ok(multires_noise_with((lh, lw, 3), self.noise, rng))
    }

    /// Noisy latent at the terminal step for a pixel-space target.
    pub fn noisy_target<T: Scalar, R: Rng + ?Sized>(&self, target: &Array3<T>, rng: &mut R) -> Result<Array3<T>> {
        let z0 = self.codec.encode(target)?;
        let (h, w, _) = target.dim();
        let eps = self.latent_noise(h, w, rng)?;
        let t = self.schedule.terminal();
        noise_target(&z0, &eps, t, self.schedule)
    }

    /// Runs `model` once per sample and decodes `ẑ0` to pixel space.
    pub fn run<T: Scalar>(
        &self,
        model: &DenoiserModel<T>,
        z_t: &[Array3<T>],
        cond: &[Array3<T>],
        prompts: &[Prompt],
        keep_trace: bool,
    ) -> Result<Pass<T>> {
        let x = stack_input(z_t, cond)?;
        let (v, trace) = model.forward(&x, prompts, 1, keep_trace)?;
        let mut out = Vec::with_capacity(z_t.len());
        for (n, z) in z_t.iter().enumerate() {
            let z0 = v_to_z0(z, &nchw_sample_to_hwc(&v, n), self.schedule)?;
            out.push(self.codec.decode(&z0));
        }
        Ok(Pass { out, trace, latent_planes: z_t[0].dim().2 })
    }

    /// Accumulates parameter gradients for `d_out` (pixel-space gradients of
    /// the decoded outputs) and returns gradients of the condition planes.
    pub fn back<T: Scalar>(
        &self,
        model: &DenoiserModel<T>,
        pass: &Pass<T>,
        d_out: &[Array3<T>],
        grads: &mut ParamStore<T>,
    ) -> Result<Vec<Array3<T>>> {
        let trace = pass.trace.as_ref().ok_or_else(|| Error::Config("pass was run without a trace".into()))?;
        let k = T::lit(dz0_dv(self.schedule));
        let first = self.codec.decode_backward(&d_out[0]);
        let (h, w, c) = first.dim();
        let mut dy = Array4::zeros((d_out.len(), c, h, w));
        for (n, d) in d_out.iter().enumerate() {
            let dz0 = self.codec.decode_backward(d);
            dy.slice_mut(s![n, .., .., ..]).assign(&hwc_to_chw(&dz0.mapv(|v| v * k)));
        }
        let dx = model.backward(trace, &dy, grads);
        Ok((0..d_out.len())
            .map(|n| {
                nchw_sample_to_hwc(&dx, n)
                    .slice(s![.., .., pass.latent_planes..])
                    .to_owned()
            })
            .collect())
    }
}

/// Three-plane pixel-space target for task token `c`.
pub fn token_target<T: Scalar>(x: &IntrinsicSet<T>, c: Channel) -> Array3<T> {
    let a = x.channel(c);
    match c {
        Channel::Normal => {
            let half = T::lit(0.5);
            a.mapv(|v| (v + T::one()) * half)
        }
        Channel::Roughness | Channel::Metallicity => expand_planes(a),
        _ => a.clone(),
    }
}

/// Channel-form prediction from a three-plane model output. Normal outputs
/// are decoded and renormalized to unit vectors.
pub fn token_prediction<T: Scalar>(out: &Array3<T>, c: Channel) -> Array3<T> {
    match c {
        Channel::Normal => decode_normal(out),
        Channel::Roughness | Channel::Metallicity => collapse_planes(out),
        _ => out.clone(),
    }
}

/// Adjoint of [`token_prediction`] at the model output `out`.
pub fn token_prediction_backward<T: Scalar>(d: &Array3<T>, out: &Array3<T>, c: Channel) -> Array3<T> {
    match c {
        Channel::Normal => {
            // n = u / |u| with u = 2·out − 1, so ∂L/∂out = 2 (d − n (n·d)) / |u|.
            let mut g = Array3::zeros(out.raw_dim());
            Zip::from(g.lanes_mut(Axis(2)))
                .and(out.lanes(Axis(2)))
                .and(d.lanes(Axis(2)))
                .for_each(|mut g, o, d| {
                    let u = [0, 1, 2].map(|k| 2.0 * o[k].as_f64() - 1.0);
                    let len = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if len <= 1e-12 {
                        return;
                    }
                    let n = u.map(|v| v / len);
                    let dv = [0, 1, 2].map(|k| d[k].as_f64());
                    let proj = n[0] * dv[0] + n[1] * dv[1] + n[2] * dv[2];
                    for k in 0..3 {
                        g[k] = T::lit(2.0 * (dv[k] - n[k] * proj) / len);
                    }
                });
            g
        }
        Channel::Roughness | Channel::Metallicity => {
            let third = T::lit(1.0 / 3.0);
            expand_planes(d).mapv(|v| v * third)
        }
        _ => d.clone(),
    }
}

/// X→RGB condition planes for `x` with slots outside `active` zeroed.
pub fn x_condition<T: Scalar>(x: &IntrinsicSet<T>, active: ChannelMask, codec: &Codec) -> Result<Array3<T>> {
    let mut slots = Vec::with_capacity(5);
    for c in Channel::ALL {
        let content = encode_slot(x, c);
        slots.push(match c {
            Channel::Irradiance => codec.downsample_direct(&content)?,
            _ => codec.encode(&content)?,
        });
    }
    let slots: [Array3<T>; 5] = slots.try_into().expect("five slots");
    Ok(ConditionStack::from_encoded_slots(slots, active)?.planes())
}

/// Adjoint of [`x_condition`]: per-channel gradients in channel form.
pub fn x_condition_backward<T: Scalar>(d: &Array3<T>, active: ChannelMask, codec: &Codec) -> IntrinsicSet<T> {
    let f = codec.factor();
    let (h, w, _) = d.dim();
    let mut out = IntrinsicSet::zeros(h * f, w * f, active);
    for c in active.present() {
        let o = slot_offset(c);
        let g = codec.encode_backward(&d.slice(s![.., .., o..o + c.planes()]).to_owned());
        *out.channel_mut(c) = match c {
            Channel::Normal => g.mapv(|v| v * T::lit(0.5)),
            _ => g,
        };
    }
    out
}
