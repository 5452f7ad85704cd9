//! Diffusion mathematics for the single-step regime: schedule, pyramid noise,
//! v-parameterization, condition assembly with channel dropout, and the
//! one-evaluation sampler.

mod condition;
mod noise;
mod sampler;
mod schedule;

pub use condition::{
    area_downsample, assemble_condition, encode_slot, full_condition, nearest_upsample, slot_offset, Codec, ConditionStack,
    RGB2X_COND_PLANES, X2RGB_COND_PLANES,
};
pub use noise::{multires_noise, multires_noise_with, NoiseSpec};
pub use sampler::{single_step_infer, Direction, Prompt, Sampling, VPredictor, LATENT_PLANES};
pub use schedule::{
    dz0_dv, make_schedule, noise_target, v_target, v_to_z0, DiffusionSchedule, ScheduleConfig,
};
