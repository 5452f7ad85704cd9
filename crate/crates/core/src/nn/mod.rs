//! Hand-differentiated convolutional denoiser.

mod attention;
mod model;
mod ops;
mod params;

pub use attention::{attn_backward, attn_forward, AttnCache, AttnIds};
pub use model::{
    caption_buckets, hwc_to_chw, nchw_sample_to_hwc, stack_input, DenoiserModel, ModelConfig, Mode, Trace,
    CAPTION_BUCKETS,
};
pub use ops::{conv_backward, conv_forward, ConvCache};
pub use params::{ParamId, ParamStore};
