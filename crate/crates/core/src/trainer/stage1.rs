use rand::Rng;

use super::passes::{token_prediction, token_prediction_backward, token_target, Ctx};
use crate::diffusion::{assemble_condition, Direction, Prompt};
use crate::error::Result;
use crate::nn::{DenoiserModel, ParamStore};
use crate::objectives::{channel_loss, loss_mse, LossBreakdown};
use crate::scalar::Scalar;
use crate::types::{ChannelMask, DatasetRecord};

/// One independent training step: loss averaged over `items` and the
/// parameter gradients of that average.
pub(super) fn step<T: Scalar, R: Rng + ?Sized>(
    ctx: &Ctx<'_>,
    model: &DenoiserModel<T>,
    items: &[&DatasetRecord<T>],
    dropout_p: f64,
    rng: &mut R,
) -> Result<(LossBreakdown, ParamStore<T>)> {
    let b = items.len() as f64;
    let w = T::lit(1.0 / b);
    let (mut z, mut cond, mut prompts, mut tokens) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for r in items {
        match model.config().direction {
            Direction::Rgb2x => {
                let present = r.intrinsics.mask.present();
                let c = present[rng.random_range(0..present.len())];
                z.push(ctx.noisy_target(&token_target(&r.intrinsics, c), rng)?);
                cond.push(ctx.codec.encode(r.rgb.data())?);
                prompts.push(Prompt::Task(c));
                tokens.push(Some(c));
            }
            Direction::X2rgb => {
                let stack = assemble_condition(&r.intrinsics, ChannelMask::FULL, dropout_p, rng, ctx.codec)?;
                cond.push(stack.planes());
                z.push(ctx.noisy_target(r.rgb.data(), rng)?);
                prompts.push(Prompt::Caption(r.caption.clone()));
                tokens.push(None);
            }
        }
    }
    let pass = ctx.run(model, &z, &cond, &prompts, true)?;
    let mut loss = LossBreakdown::default();
    let mut d_out = Vec::with_capacity(items.len());
    for ((r, out), token) in items.iter().zip(&pass.out).zip(&tokens) {
        match *token {
            Some(c) => {
                let (v, g) = channel_loss(c, r.intrinsics.channel(c), &token_prediction(out, c))?;
                *loss.channel_mut(c) += v / b;
                d_out.push(token_prediction_backward(&g, out, c).mapv(|x| x * w));
            }
            None => {
                let (v, g) = loss_mse(r.rgb.data(), out)?;
                loss.rgb += v / b;
                d_out.push(g.mapv(|x| x * w));
            }
        }
    }
    let mut grads = model.params().zeros_like();
    ctx.back(model, &pass, &d_out, &mut grads)?;
    Ok((loss.finalize(0.0), grads))
}
