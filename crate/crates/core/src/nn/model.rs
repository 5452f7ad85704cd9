use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, Array3, Array4, Axis, Ix1, Ix2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{attn_backward, attn_forward, AttnCache, AttnIds};
use super::ops::{
    avgpool2, avgpool2_backward, concat_channels, conv_backward, conv_forward, silu, silu_backward, split_channels,
    upsample2, upsample2_backward, ConvCache,
};
use super::params::{ParamId, ParamStore};
use crate::diffusion::{ConditionStack, Direction, Prompt, VPredictor, LATENT_PLANES, RGB2X_COND_PLANES, X2RGB_COND_PLANES};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::Channel;

/// Rows of the caption embedding table; words hash into these buckets.
pub const CAPTION_BUCKETS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub direction: Direction,
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub attention_at: Vec<usize>,
    pub embed_dim: usize,
}

impl ModelConfig {
    /// Standard configuration with attention at the bottleneck only.
    pub fn new(direction: Direction, base_width: usize, depth: usize) -> Self {
        let cond = match direction {
            Direction::Rgb2x => RGB2X_COND_PLANES,
            Direction::X2rgb => X2RGB_COND_PLANES,
        };
        Self {
            direction,
            in_channels: LATENT_PLANES + cond,
            base_width,
            depth,
            attention_at: vec![depth],
            embed_dim: 32,
        }
    }

    pub fn cond_channels(&self) -> usize {
        self.in_channels - LATENT_PLANES
    }

    pub fn width(&self, stage: usize) -> usize {
        self.base_width << stage
    }

    pub fn validate(&self) -> Result<()> {
        let expected = LATENT_PLANES
            + match self.direction {
                Direction::Rgb2x => RGB2X_COND_PLANES,
                Direction::X2rgb => X2RGB_COND_PLANES,
            };
        if self.in_channels != expected {
            return Err(Error::Config(format!(
                "{} models take {expected} input planes, got {}",
                self.direction.name(),
                self.in_channels
            )));
        }
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be at least 2, got {}", self.depth)));
        }
        if self.base_width == 0 || self.embed_dim == 0 {
            return Err(Error::Config("base_width and embed_dim must be positive".into()));
        }
        if !self.attention_at.contains(&self.depth) {
            return Err(Error::Config("attention is required at the deepest stage".into()));
        }
        if let Some(s) = self.attention_at.iter().find(|&&s| s > self.depth) {
            return Err(Error::Config(format!("attention stage {s} exceeds depth {}", self.depth)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Image,
    Video,
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

impl ConvIds {
    fn register<T: Scalar>(p: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let std = gain * (2.0 / (cin * 9) as f64).sqrt();
        Self {
            w: p.push_normal(&format!("{name}.w"), &[cout, cin, 3, 3], std, rng),
            b: p.push_zeros(&format!("{name}.b"), &[cout]),
        }
    }
}

#[derive(Debug, Clone)]
struct Layout {
    conv_in: ConvIds,
    enc: Vec<ConvIds>,
    enc_attn: Vec<Option<AttnIds>>,
    down: Vec<ConvIds>,
    mid1: ConvIds,
    mid_attn: AttnIds,
    mid2: ConvIds,
    up: Vec<ConvIds>,
    dec: Vec<ConvIds>,
    out: ConvIds,
    table: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

/// Conv followed by SiLU.
#[derive(Debug, Clone)]
struct ActCache<T> {
    conv: ConvCache<T>,
    pre: Array4<T>,
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    rows: Vec<Vec<usize>>,
    emb: Array2<T>,
    conv_in: ActCache<T>,
    enc: Vec<ActCache<T>>,
    enc_attn: Vec<Option<AttnCache<T>>>,
    down: Vec<ActCache<T>>,
    mid1: ActCache<T>,
    mid_attn: AttnCache<T>,
    mid2: ActCache<T>,
    up: Vec<ActCache<T>>,
    dec: Vec<ActCache<T>>,
    out: ConvCache<T>,
}

/// The velocity predictor: a conditional encoder–decoder with skip
/// connections, bottleneck attention and a prompt embedding added at the
/// bottleneck.
#[derive(Debug)]
pub struct DenoiserModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    mode: Mode,
    layout: Layout,
    evals: AtomicU64,
}

impl<T: Scalar> Clone for DenoiserModel<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            mode: self.mode,
            layout: self.layout.clone(),
            evals: AtomicU64::new(self.evals.load(Ordering::Relaxed)),
        }
    }
}

/// FNV-1a over the bytes of a word.
fn fnv1a(word: &str) -> u64 {
    word.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Table rows averaged to embed `caption`: one bucket per lowercase word.
pub fn caption_buckets(caption: &str) -> Vec<usize> {
    let rows: Vec<usize> = caption
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| (fnv1a(&w.to_lowercase()) % CAPTION_BUCKETS as u64) as usize)
        .collect();
    if rows.is_empty() {
        vec![(fnv1a("") % CAPTION_BUCKETS as u64) as usize]
    } else {
        rows
    }
}

impl<T: Scalar> DenoiserModel<T> {
    /// Deterministic initialization from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::default();
        let d = config.depth;
        let w = |i| config.width(i);
        let conv_in = ConvIds::register(&mut p, "conv_in", config.in_channels, w(0), 1.0, &mut rng);
        let mut enc = Vec::new();
        let mut enc_attn = Vec::new();
        let mut down = Vec::new();
        for i in 0..d {
            enc.push(ConvIds::register(&mut p, &format!("enc{i}"), w(i), w(i), 1.0, &mut rng));
            enc_attn.push(
                config
                    .attention_at
                    .contains(&i)
                    .then(|| AttnIds::register(&mut p, &format!("enc{i}.attn"), w(i), &mut rng)),
            );
            down.push(ConvIds::register(&mut p, &format!("down{i}"), w(i), w(i + 1), 1.0, &mut rng));
        }
        let mid1 = ConvIds::register(&mut p, "mid1", w(d), w(d), 1.0, &mut rng);
        let mid_attn = AttnIds::register(&mut p, "mid.attn", w(d), &mut rng);
        let mid2 = ConvIds::register(&mut p, "mid2", w(d), w(d), 1.0, &mut rng);
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for i in 0..d {
            up.push(ConvIds::register(&mut p, &format!("up{i}"), w(i + 1), w(i), 1.0, &mut rng));
            dec.push(ConvIds::register(&mut p, &format!("dec{i}"), 2 * w(i), w(i), 1.0, &mut rng));
        }
        let out = ConvIds::register(&mut p, "conv_out", w(0), LATENT_PLANES, 0.1, &mut rng);
        let rows = match config.direction {
            Direction::Rgb2x => Channel::ALL.len(),
            Direction::X2rgb => CAPTION_BUCKETS,
        };
        let table = p.push_normal("embed.table", &[rows, config.embed_dim], 1.0, &mut rng);
        let proj_w = p.push_normal("embed.proj.w", &[w(d), config.embed_dim], (1.0 / config.embed_dim as f64).sqrt(), &mut rng);
        let proj_b = p.push_zeros("embed.proj.b", &[w(d)]);
        let layout = Layout { conv_in, enc, enc_attn, down, mid1, mid_attn, mid2, up, dec, out, table, proj_w, proj_b };
        Ok(Self { config, params: p, mode: Mode::Image, layout, evals: AtomicU64::new(0) })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Number of single-sample forward evaluations performed so far.
    pub fn evaluations(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn reset_evaluations(&self) {
        self.evals.store(0, Ordering::Relaxed);
    }

    /// A video-mode copy: every 3×3 kernel becomes a 1×3×3 spatio-temporal
    /// kernel with the same weights; attention then spans all frames of a clip.
    pub fn inflate_temporal(&self) -> Result<Self> {
        if self.mode == Mode::Video {
            return Err(Error::Config("model is already inflated".into()));
        }
        let mut out = self.clone();
        out.mode = Mode::Video;
        for (name, v) in self.params.names().iter().zip(self.params.values()) {
            if v.ndim() == 4 {
                let s = v.shape();
                let id = out.params.id(name).expect("same names");
                *out.params.get_mut(id) = v.clone().into_shape_with_order(IxDyn(&[s[0], s[1], 1, s[2], s[3]])).expect("contiguous");
            }
        }
        out.evals = AtomicU64::new(0);
        Ok(out)
    }

    /// Table rows whose mean is the prompt embedding.
    pub fn embedding_rows(&self, prompt: &Prompt) -> Result<Vec<usize>> {
        if prompt.direction() != self.config.direction {
            return Err(Error::Validation(format!(
                "{} model cannot take a {} prompt",
                self.config.direction.name(),
                prompt.direction().name()
            )));
        }
        Ok(match prompt {
            Prompt::Task(t) => vec![t.index()],
            Prompt::Caption(c) => caption_buckets(c.as_str()),
        })
    }

    pub fn embedding(&self, prompt: &Prompt) -> Result<Array1<T>> {
        let rows = self.embedding_rows(prompt)?;
        Ok(self.mean_rows(&rows))
    }

    fn mean_rows(&self, rows: &[usize]) -> Array1<T> {
        let table = self.params.get(self.layout.table).view().into_dimensionality::<Ix2>().unwrap();
        let mut e = Array1::zeros(self.config.embed_dim);
        for &r in rows {
            e += &table.row(r);
        }
        e / T::lit(rows.len() as f64)
    }

    fn check_input(&self, x: &Array4<T>, prompts: usize, clip_len: usize) -> Result<()> {
        let (n, c, h, w) = x.dim();
        if c != self.config.in_channels {
            return Err(Error::Shape(format!("expected {} input planes, got {c}", self.config.in_channels)));
        }
        let m = 1usize << self.config.depth;
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("resolution {h}×{w} is not divisible by {m}")));
        }
        if prompts != n {
            return Err(Error::Shape(format!("{prompts} prompts for a batch of {n}")));
        }
        if clip_len == 0 || n % clip_len != 0 {
            return Err(Error::Shape(format!("batch of {n} does not split into clips of {clip_len}")));
        }
        if self.mode == Mode::Image && clip_len != 1 {
            return Err(Error::Shape("image-mode models process single frames".into()));
        }
        Ok(())
    }

    fn conv(&self, ids: ConvIds, x: &Array4<T>, clip: usize, keep: bool) -> (Array4<T>, Option<ConvCache<T>>) {
        conv_forward(x, self.params.get(ids.w), self.params.get(ids.b), clip, keep)
    }

    fn conv_act(&self, ids: ConvIds, x: &Array4<T>, clip: usize, keep: bool) -> (Array4<T>, Option<ActCache<T>>) {
        let (pre, cache) = self.conv(ids, x, clip, keep);
        let post = silu(&pre);
        (post, cache.map(|conv| ActCache { conv, pre }))
    }

    fn conv_act_back(&self, ids: ConvIds, c: &ActCache<T>, dy: &Array4<T>, g: &mut ParamStore<T>) -> Array4<T> {
        let d = silu_backward(&c.pre, dy);
        let (dw, db) = g.pair_mut(ids.w, ids.b);
        conv_backward(&c.conv, self.params.get(ids.w), &d, dw, db)
    }

    /// Batched forward over NCHW input (latent planes first, then condition
    /// planes). `clip_len` frames form one clip; it must be 1 in image mode.
    pub fn forward(&self, x: &Array4<T>, prompts: &[Prompt], clip_len: usize, keep_trace: bool) -> Result<(Array4<T>, Option<Trace<T>>)> {
        self.check_input(x, prompts.len(), clip_len)?;
        let rows = prompts.iter().map(|p| self.embedding_rows(p)).collect::<Result<Vec<_>>>()?;
        self.evals.fetch_add(x.dim().0 as u64, Ordering::Relaxed);
        let l = &self.layout;
        let k = keep_trace;
        let d = self.config.depth;

        let (mut h, c_in) = self.conv_act(l.conv_in, x, clip_len, k);
        let mut skips = Vec::with_capacity(d);
        let (mut enc_c, mut attn_c, mut down_c) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..d {
            let (e, c) = self.conv_act(l.enc[i], &h, clip_len, k);
            h = e;
            enc_c.push(c);
            let ac = match &l.enc_attn[i] {
                Some(ids) => {
                    let (a, c) = attn_forward(&self.params, ids, &h, clip_len, k);
                    h = a;
                    c
                }
                None => None,
            };
            attn_c.push(ac);
            skips.push(h.clone());
            let (dn, c) = self.conv_act(l.down[i], &avgpool2(&h), clip_len, k);
            h = dn;
            down_c.push(c);
        }

        let mut emb = Array2::zeros((rows.len(), self.config.embed_dim));
        for (n, r) in rows.iter().enumerate() {
            emb.row_mut(n).assign(&self.mean_rows(r));
        }
        let pw = self.params.get(l.proj_w).view().into_dimensionality::<Ix2>().unwrap();
        let pb = self.params.get(l.proj_b).view().into_dimensionality::<Ix1>().unwrap();
        let add = emb.dot(&pw.t()) + &pb;
        for (n, mut sample) in h.outer_iter_mut().enumerate() {
            for (c, mut plane) in sample.outer_iter_mut().enumerate() {
                let v = add[[n, c]];
                plane.mapv_inplace(|x| x + v);
            }
        }

        let (m1, mid1) = self.conv_act(l.mid1, &h, clip_len, k);
        let (ma, mid_attn) = attn_forward(&self.params, &l.mid_attn, &m1, clip_len, k);
        let (m2, mid2) = self.conv_act(l.mid2, &ma, clip_len, k);
        h = m2;

        let mut up_c: Vec<Option<ActCache<T>>> = (0..d).map(|_| None).collect();
        let mut dec_c: Vec<Option<ActCache<T>>> = (0..d).map(|_| None).collect();
        for i in (0..d).rev() {
            let (u, c) = self.conv_act(l.up[i], &upsample2(&h), clip_len, k);
            up_c[i] = c;
            let (dd, c) = self.conv_act(l.dec[i], &concat_channels(&u, &skips[i]), clip_len, k);
            dec_c[i] = c;
            h = dd;
        }
        let (y, out) = self.conv(l.out, &h, clip_len, k);

        let trace = if k {
            Some(Trace {
                rows,
                emb,
                conv_in: c_in.unwrap(),
                enc: enc_c.into_iter().map(Option::unwrap).collect(),
                enc_attn: attn_c,
                down: down_c.into_iter().map(Option::unwrap).collect(),
                mid1: mid1.unwrap(),
                mid_attn: mid_attn.unwrap(),
                mid2: mid2.unwrap(),
                up: up_c.into_iter().map(Option::unwrap).collect(),
                dec: dec_c.into_iter().map(Option::unwrap).collect(),
                out: out.unwrap(),
            })
        } else {
            None
        };
        Ok((y, trace))
    }

    /// Accumulates parameter gradients of `<dy, v̂>` into `grads` and returns
    /// the gradient with respect to the input planes.
    pub fn backward(&self, trace: &Trace<T>, dy: &Array4<T>, grads: &mut ParamStore<T>) -> Array4<T> {
        let l = &self.layout;
        let d = self.config.depth;
        let (dw, db) = grads.pair_mut(l.out.w, l.out.b);
        let mut g = conv_backward(&trace.out, self.params.get(l.out.w), dy, dw, db);
        let mut dskips: Vec<Array4<T>> = Vec::with_capacity(d);
        for i in 0..d {
            let gc = self.conv_act_back(l.dec[i], &trace.dec[i], &g, grads);
            let (du, ds) = split_channels(&gc, self.config.width(i));
            dskips.push(ds);
            g = upsample2_backward(&self.conv_act_back(l.up[i], &trace.up[i], &du, grads));
        }
        g = self.conv_act_back(l.mid2, &trace.mid2, &g, grads);
        g = attn_backward(&self.params, &l.mid_attn, &trace.mid_attn, &g, grads);
        g = self.conv_act_back(l.mid1, &trace.mid1, &g, grads);

        // Embedding injection: h += P·e + b, broadcast over space.
        let dadd = g.sum_axis(Axis(3)).sum_axis(Axis(2));
        *grads.get_mut(l.proj_b) += &dadd.sum_axis(Axis(0)).into_dyn();
        *grads.get_mut(l.proj_w) += &dadd.t().dot(&trace.emb).into_dyn();
        let pw = self.params.get(l.proj_w).view().into_dimensionality::<Ix2>().unwrap();
        let demb = dadd.dot(&pw);
        {
            let mut table = grads.get_mut(l.table).view_mut().into_dimensionality::<Ix2>().unwrap();
            for (n, rows) in trace.rows.iter().enumerate() {
                let share = demb.row(n).mapv(|v| v / T::lit(rows.len() as f64));
                for &r in rows {
                    let mut row = table.row_mut(r);
                    row += &share;
                }
            }
        }

        for i in (0..d).rev() {
            g = avgpool2_backward(&self.conv_act_back(l.down[i], &trace.down[i], &g, grads));
            g += &dskips[i];
            if let (Some(ids), Some(c)) = (&l.enc_attn[i], &trace.enc_attn[i]) {
                g = attn_backward(&self.params, ids, c, &g, grads);
            }
            g = self.conv_act_back(l.enc[i], &trace.enc[i], &g, grads);
        }
        self.conv_act_back(l.conv_in, &trace.conv_in, &g, grads)
    }

    /// Forward over HWC latents and conditions, one clip.
    pub fn forward_clip(&self, z: &[Array3<T>], cond: &[Array3<T>], prompt: &Prompt) -> Result<Vec<Array3<T>>> {
        if z.len() != cond.len() || z.is_empty() {
            return Err(Error::Shape("latent and condition frame counts differ".into()));
        }
        let x = stack_input(z, cond)?;
        let prompts = vec![prompt.clone(); z.len()];
        let clip = if self.mode == Mode::Video { z.len() } else { 1 };
        let (y, _) = self.forward(&x, &prompts, clip, false)?;
        Ok((0..z.len()).map(|n| nchw_sample_to_hwc(&y, n)).collect())
    }
}

/// Concatenates HWC latents and conditions into one NCHW batch.
pub fn stack_input<T: Scalar>(z: &[Array3<T>], cond: &[Array3<T>]) -> Result<Array4<T>> {
    let (h, w, cz) = z[0].dim();
    let cc = cond[0].dim().2;
    let mut x = Array4::zeros((z.len(), cz + cc, h, w));
    for (n, (zi, ci)) in z.iter().zip(cond).enumerate() {
        if zi.dim() != (h, w, cz) || ci.dim() != (h, w, cc) {
            return Err(Error::Shape(format!(
                "latent {:?} and condition {:?} do not share a resolution",
                zi.dim(),
                ci.dim()
            )));
        }
        x.slice_mut(s![n, ..cz, .., ..]).assign(&zi.view().permuted_axes([2, 0, 1]));
        x.slice_mut(s![n, cz.., .., ..]).assign(&ci.view().permuted_axes([2, 0, 1]));
    }
    Ok(x)
}

pub fn hwc_to_chw<T: Scalar>(a: &Array3<T>) -> Array3<T> {
    a.view().permuted_axes([2, 0, 1]).as_standard_layout().into_owned()
}

pub fn nchw_sample_to_hwc<T: Scalar>(y: &Array4<T>, n: usize) -> Array3<T> {
    y.index_axis(Axis(0), n).permuted_axes([1, 2, 0]).as_standard_layout().into_owned()
}

impl<T: Scalar> VPredictor<T> for DenoiserModel<T> {
    fn predict_v(&self, z_t: &Array3<T>, cond: &ConditionStack<T>, prompt: &Prompt) -> Result<Array3<T>> {
        let planes = cond.planes();
        if planes.dim().2 != self.config.cond_channels() {
            return Err(Error::Shape(format!(
                "expected {} condition planes, got {}",
                self.config.cond_channels(),
                planes.dim().2
            )));
        }
        let out = self.forward_clip(std::slice::from_ref(z_t), std::slice::from_ref(&planes), prompt)?;
        Ok(out.into_iter().next().unwrap())
    }
}

impl<T: Scalar> DenoiserModel<T> {
    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, mode: Mode, params: ParamStore<T>) -> Result<Self> {
        let fresh = Self::build(config, 0)?;
        let mut m = if mode == Mode::Video { fresh.inflate_temporal()? } else { fresh };
        m.params.load_from(&params)?;
        Ok(m)
    }
}
