//! Joint training of both directions with cycle-consistency terms.
//!
//! Chain A (every item): `I → X̂ → Ĩ`, the inverse model run once per token
//! from pure noise, then the forward model on the full predicted set.
//! Chain B (annotated items): `X → Î → X̃`, the forward model on the dropped
//! out ground truth, then the inverse model for the annotated tokens.

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{SourceKind, TrainConfig};
use super::passes::{token_prediction, token_prediction_backward, x_condition, x_condition_backward, Ctx};
use crate::diffusion::{assemble_condition, Prompt};
use crate::error::Result;
use crate::nn::{DenoiserModel, ParamStore};
use crate::objectives::{channel_loss, loss_cycle, loss_mse, LossBreakdown};
use crate::scalar::Scalar;
use crate::types::{Caption, Channel, ChannelMask, DatasetRecord, IntrinsicSet};

pub(super) struct JointOut<T> {
    /// Mean breakdown per source kind with its item count.
    pub per_kind: Vec<(SourceKind, usize, LossBreakdown)>,
    pub grads_rgb2x: ParamStore<T>,
    pub grads_x2rgb: ParamStore<T>,
}

fn add<T: Scalar>(acc: &mut Array3<T>, g: &Array3<T>, k: T) {
    acc.zip_mut_with(g, |a, &b| *a += b * k);
}

/// Runs the inverse model on every token and assembles `X̂` per item.
fn predict_all<T: Scalar, R: Rng + ?Sized>(
    ctx: &Ctx<'_>,
    rgb2x: &DenoiserModel<T>,
    images: &[&Array3<T>],
    rng: &mut R,
    keep: bool,
) -> Result<(super::passes::Pass<T>, Vec<IntrinsicSet<T>>)> {
    let (mut z, mut cond, mut prompts) = (Vec::new(), Vec::new(), Vec::new());
    for img in images {
        let (h, w, _) = img.dim();
        let enc = ctx.codec.encode(img)?;
        for c in Channel::ALL {
            z.push(ctx.latent_noise(h, w, rng)?);
            cond.push(enc.clone());
            prompts.push(Prompt::Task(c));
        }
    }
    let pass = ctx.run(rgb2x, &z, &cond, &prompts, keep)?;
    let xs = images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let (h, w, _) = img.dim();
            let mut x = IntrinsicSet::zeros(h, w, ChannelMask::FULL);
            for (k, c) in Channel::ALL.into_iter().enumerate() {
                *x.channel_mut(c) = token_prediction(&pass.out[i * 5 + k], c);
            }
            x
        })
        .collect();
    Ok((pass, xs))
}

pub(super) fn step<T: Scalar, R: Rng + ?Sized>(
    ctx: &Ctx<'_>,
    cfg: &TrainConfig,
    rgb2x: &DenoiserModel<T>,
    x2rgb: &DenoiserModel<T>,
    items: &[(&DatasetRecord<T>, SourceKind)],
    rng: &mut R,
) -> Result<JointOut<T>> {
    let bf = items.len() as f64;
    let w = T::lit(1.0 / bf);
    let lam = cfg.lambda_cyc;
    let wl = T::lit(lam / bf);
    let wild_caption = Caption::new(cfg.wild_caption.clone())?;
    let caption = |r: &DatasetRecord<T>, kind: SourceKind| match kind {
        SourceKind::Annotated => r.caption.clone(),
        SourceKind::Wild => wild_caption.clone(),
    };

    // Chain A forward.
    let images: Vec<&Array3<T>> = items.iter().map(|(r, _)| r.rgb.data()).collect();
    let (pass_a1, xhat) = predict_all(ctx, rgb2x, &images, rng, true)?;
    let (mut z, mut cond, mut prompts) = (Vec::new(), Vec::new(), Vec::new());
    for ((r, kind), x) in items.iter().zip(&xhat) {
        let (h, wd, _) = r.rgb.dims();
        z.push(ctx.latent_noise(h, wd, rng)?);
        cond.push(x_condition(x, ChannelMask::FULL, ctx.codec)?);
        prompts.push(Prompt::Caption(caption(r, *kind)));
    }
    let pass_a2 = ctx.run(x2rgb, &z, &cond, &prompts, true)?;

    // Chain B forward.
    let ann: Vec<usize> = (0..items.len()).filter(|&i| items[i].1 == SourceKind::Annotated).collect();
    let (mut z, mut cond, mut prompts, mut active) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &i in &ann {
        let r = items[i].0;
        let source = if cfg.cycle_x_from_prediction { &xhat[i] } else { &r.intrinsics };
        let stack = assemble_condition(source, ChannelMask::FULL, cfg.dropout_p, rng, ctx.codec)?;
        active.push(stack.active());
        cond.push(stack.planes());
        let (h, wd, _) = r.rgb.dims();
        z.push(ctx.latent_noise(h, wd, rng)?);
        prompts.push(Prompt::Caption(r.caption.clone()));
    }
    let pass_b1 = if ann.is_empty() { None } else { Some(ctx.run(x2rgb, &z, &cond, &prompts, true)?) };
    let (mut z, mut cond, mut prompts, mut owners) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    if let Some(p) = &pass_b1 {
        for (j, &i) in ann.iter().enumerate() {
            let r = items[i].0;
            let (h, wd, _) = r.rgb.dims();
            let enc = ctx.codec.encode(&p.out[j])?;
            for c in r.intrinsics.mask.present() {
                z.push(ctx.latent_noise(h, wd, rng)?);
                cond.push(enc.clone());
                prompts.push(Prompt::Task(c));
                owners.push((j, c));
            }
        }
    }
    let pass_b2 = if owners.is_empty() { None } else { Some(ctx.run(rgb2x, &z, &cond, &prompts, true)?) };

    // Losses and output gradients.
    let mut d_xhat: Vec<IntrinsicSet<T>> = xhat.iter().map(|x| {
        let (h, wd) = x.dims();
        IntrinsicSet::zeros(h, wd, ChannelMask::FULL)
    }).collect();
    let mut d_a2: Vec<Array3<T>> = pass_a2.out.iter().map(|o| Array3::zeros(o.dim())).collect();
    let mut d_b1: Vec<Array3<T>> = pass_b1.iter().flat_map(|p| p.out.iter().map(|o| Array3::zeros(o.dim()))).collect();
    let mut d_b2: Vec<Array3<T>> = pass_b2.iter().flat_map(|p| p.out.iter().map(|o| Array3::zeros(o.dim()))).collect();
    let mut sums = [(SourceKind::Annotated, 0usize, LossBreakdown::default()), (SourceKind::Wild, 0, LossBreakdown::default())];

    for (i, (r, kind)) in items.iter().enumerate() {
        let mut l = LossBreakdown::default();
        let rgb = r.rgb.data();
        match kind {
            SourceKind::Wild => {
                let (v, g) = loss_mse(rgb, &pass_a2.out[i])?;
                l.cycle_i = v;
                add(&mut d_a2[i], &g, wl);
            }
            SourceKind::Annotated => {
                let j = ann.iter().position(|&a| a == i).expect("annotated index");
                let mask = r.intrinsics.mask;
                let b1 = &pass_b1.as_ref().expect("annotated pass").out[j];
                if cfg.use_task_loss_in_cycle {
                    for c in mask.present() {
                        let (v, g) = channel_loss(c, r.intrinsics.channel(c), xhat[i].channel(c))?;
                        *l.channel_mut(c) = v;
                        add(d_xhat[i].channel_mut(c), &g, w);
                    }
                    let (v, g) = loss_mse(rgb, b1)?;
                    l.rgb = v;
                    add(&mut d_b1[j], &g, w);
                }
                let (h, wd) = r.intrinsics.dims();
                let mut x_cyc = IntrinsicSet::zeros(h, wd, mask);
                let b2 = pass_b2.as_ref().expect("annotated tokens");
                for (k, &(o, c)) in owners.iter().enumerate() {
                    if o == j {
                        *x_cyc.channel_mut(c) = token_prediction(&b2.out[k], c);
                    }
                }
                let cy = loss_cycle(&r.intrinsics, &x_cyc, rgb, &pass_a2.out[i], mask)?;
                l.cycle_x = cy.cycle_x;
                l.cycle_i = cy.cycle_i;
                add(&mut d_a2[i], &cy.grad_i, wl);
                for (k, &(o, c)) in owners.iter().enumerate() {
                    if o == j {
                        add(&mut d_b2[k], &token_prediction_backward(cy.grad_x.channel(c), &b2.out[k], c), wl);
                    }
                }
            }
        }
        let slot = &mut sums[(*kind == SourceKind::Wild) as usize];
        slot.1 += 1;
        slot.2.accumulate(&l.finalize(lam));
    }

    // Backward, latest passes first.
    let mut grads_r = rgb2x.params().zeros_like();
    let mut grads_x = x2rgb.params().zeros_like();
    if let Some(p) = &pass_b2 {
        let d_cond = ctx.back(rgb2x, p, &d_b2, &mut grads_r)?;
        if !cfg.detach_cycle {
            let one = T::one();
            for (k, &(o, _)) in owners.iter().enumerate() {
                add(&mut d_b1[o], &ctx.codec.encode_backward(&d_cond[k]), one);
            }
        }
    }
    if let Some(p) = &pass_b1 {
        let d_cond = ctx.back(x2rgb, p, &d_b1, &mut grads_x)?;
        if cfg.cycle_x_from_prediction && !cfg.detach_cycle {
            for (j, &i) in ann.iter().enumerate() {
                let g = x_condition_backward(&d_cond[j], active[j], ctx.codec);
                for c in active[j].present() {
                    add(d_xhat[i].channel_mut(c), g.channel(c), T::one());
                }
            }
        }
    }
    let d_cond = ctx.back(x2rgb, &pass_a2, &d_a2, &mut grads_x)?;
    if !cfg.detach_cycle {
        for (i, d) in d_cond.iter().enumerate() {
            let g = x_condition_backward(d, ChannelMask::FULL, ctx.codec);
            for c in Channel::ALL {
                add(d_xhat[i].channel_mut(c), g.channel(c), T::one());
            }
        }
    }
    let d_a1: Vec<Array3<T>> = d_xhat
        .iter()
        .enumerate()
        .flat_map(|(i, d)| {
            let outs = &pass_a1.out[i * 5..i * 5 + 5];
            Channel::ALL.into_iter().zip(outs).map(move |(c, o)| token_prediction_backward(d.channel(c), o, c))
        })
        .collect();
    ctx.back(rgb2x, &pass_a1, &d_a1, &mut grads_r)?;

    let per_kind = sums
        .into_iter()
        .filter(|s| s.1 > 0)
        .map(|(k, n, l)| (k, n, l.scaled(1.0 / n as f64)))
        .collect();
    Ok(JointOut { per_kind, grads_rgb2x: grads_r, grads_x2rgb: grads_x })
}

/// Image cycle loss `‖I − x2rgb(rgb2x(I))‖²` for one image, sampled from the
/// pure-noise seed `seed`.
pub fn cycle_image_loss<T: Scalar>(
    ctx: &Ctx<'_>,
    rgb2x: &DenoiserModel<T>,
    x2rgb: &DenoiserModel<T>,
    rgb: &Array3<T>,
    caption: &Caption,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, xhat) = predict_all(ctx, rgb2x, &[rgb], &mut rng, false)?;
    let (h, w, _) = rgb.dim();
    let z = ctx.latent_noise(h, w, &mut rng)?;
    let cond = x_condition(&xhat[0], ChannelMask::FULL, ctx.codec)?;
    let out = ctx.run(x2rgb, &[z], &[cond], &[Prompt::Caption(caption.clone())], false)?;
    Ok(loss_mse(rgb, &out.out[0])?.0)
}
