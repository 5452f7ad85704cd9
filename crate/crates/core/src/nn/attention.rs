//! Single-head residual self-attention over the tokens of a clip.

use ndarray::{Array2, Array4, ArrayView2, Axis, Ix2};

use super::ops::{clip_tokens, softmax_rows, write_clip_tokens};
use super::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AttnIds {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
    pub bo: ParamId,
}

impl AttnIds {
    pub fn register<T: Scalar, R: rand::Rng + ?Sized>(p: &mut ParamStore<T>, prefix: &str, c: usize, rng: &mut R) -> Self {
        let std = 1.0 / (c as f64).sqrt();
        Self {
            q: p.push_normal(&format!("{prefix}.q"), &[c, c], std, rng),
            k: p.push_normal(&format!("{prefix}.k"), &[c, c], std, rng),
            v: p.push_normal(&format!("{prefix}.v"), &[c, c], std, rng),
            o: p.push_normal(&format!("{prefix}.o"), &[c, c], 0.5 * std, rng),
            bo: p.push_zeros(&format!("{prefix}.bo"), &[c]),
        }
    }
}

#[derive(Debug, Clone)]
struct ClipCache<T> {
    x: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    a: Array2<T>,
    o: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct AttnCache<T> {
    clips: Vec<ClipCache<T>>,
    clip_len: usize,
}

fn mat<T: Scalar>(p: &ParamStore<T>, id: ParamId) -> ArrayView2<'_, T> {
    p.get(id).view().into_dimensionality::<Ix2>().expect("2-D attention weight")
}

/// Tokens of all `clip_len` frames attend to each other jointly.
pub fn attn_forward<T: Scalar>(
    p: &ParamStore<T>,
    ids: &AttnIds,
    x: &Array4<T>,
    clip_len: usize,
    keep_cache: bool,
) -> (Array4<T>, Option<AttnCache<T>>) {
    let c = x.dim().1;
    let scale = T::lit(1.0 / (c as f64).sqrt());
    let (wq, wk, wv, wo) = (mat(p, ids.q), mat(p, ids.k), mat(p, ids.v), mat(p, ids.o));
    let bo = p.get(ids.bo).view().into_dimensionality::<ndarray::Ix1>().unwrap();
    let mut y = x.clone();
    let mut clips = Vec::new();
    for start in (0..x.dim().0).step_by(clip_len) {
        let t = clip_tokens(x, start, clip_len);
        let q = t.dot(&wq);
        let k = t.dot(&wk);
        let v = t.dot(&wv);
        let mut a = q.dot(&k.t()) * scale;
        softmax_rows(&mut a);
        let o = a.dot(&v);
        let out = &t + &o.dot(&wo) + &bo;
        write_clip_tokens(&out, &mut y, start, clip_len);
        if keep_cache {
            clips.push(ClipCache { x: t, q, k, v, a, o });
        }
    }
    (y, keep_cache.then_some(AttnCache { clips, clip_len }))
}

pub fn attn_backward<T: Scalar>(
    p: &ParamStore<T>,
    ids: &AttnIds,
    cache: &AttnCache<T>,
    dy: &Array4<T>,
    grads: &mut ParamStore<T>,
) -> Array4<T> {
    let c = dy.dim().1;
    let scale = T::lit(1.0 / (c as f64).sqrt());
    let (wq, wk, wv, wo) = (mat(p, ids.q), mat(p, ids.k), mat(p, ids.v), mat(p, ids.o));
    let mut dx = dy.clone();
    let clip_len = cache.clip_len;
    for (ci, cc) in cache.clips.iter().enumerate() {
        let start = ci * clip_len;
        let g = clip_tokens(dy, start, clip_len);
        *grads.get_mut(ids.o) += &cc.o.t().dot(&g).into_dyn();
        *grads.get_mut(ids.bo) += &g.sum_axis(Axis(0)).into_dyn();
        let d_o = g.dot(&wo.t());
        let da = d_o.dot(&cc.v.t());
        let dv = cc.a.t().dot(&d_o);
        let row = (&da * &cc.a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = (&da - &row) * &cc.a * scale;
        let dq = ds.dot(&cc.k);
        let dk = ds.t().dot(&cc.q);
        *grads.get_mut(ids.q) += &cc.x.t().dot(&dq).into_dyn();
        *grads.get_mut(ids.k) += &cc.x.t().dot(&dk).into_dyn();
        *grads.get_mut(ids.v) += &cc.x.t().dot(&dv).into_dyn();
        let dt = g + dq.dot(&wq.t()) + dk.dot(&wk.t()) + dv.dot(&wv.t());
        write_clip_tokens(&dt, &mut dx, start, clip_len);
    }
    dx
}
