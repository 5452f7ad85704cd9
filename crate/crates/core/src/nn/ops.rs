//! Batched NCHW primitives with explicit backward passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayD, ArrayView2, Axis, Zip};

use crate::scalar::Scalar;

/// Cached state of one convolution call.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    pub cols: Vec<Array2<T>>,
    pub input_dim: (usize, usize, usize, usize),
    pub clip_len: usize,
}

/// Kernel geometry read from the weight tensor: `[cout, cin, k, k]` for
/// spatial kernels or `[cout, cin, kt, k, k]` for spatio-temporal ones.
fn geometry<T>(w: &ArrayD<T>) -> (usize, usize, usize, usize) {
    match *w.shape() {
        [co, ci, k, _] => (co, ci, 1, k),
        [co, ci, kt, k, _] => (co, ci, kt, k),
        ref s => panic!("unsupported conv weight shape {s:?}"),
    }
}

fn weight_matrix<T: Scalar>(w: &ArrayD<T>) -> ArrayView2<'_, T> {
    let co = w.shape()[0];
    let rest = w.len() / co;
    w.view().into_shape_with_order((co, rest)).expect("contiguous weights")
}

/// Fills `cols` (rows ordered `(cin, dt, ky, kx)`, columns `y·W + x`) for sample `n`.
/// Temporal taps reach other frames of the same clip and are zero outside it.
fn im2col<T: Scalar>(x: &[T], dims: (usize, usize, usize, usize), n: usize, clip_len: usize, kt: usize, k: usize, cols: &mut [T]) {
    let (_, c_in, h, w) = dims;
    let hw = h * w;
    let pad = (k / 2) as isize;
    let tpad = (kt / 2) as isize;
    let frame = (n % clip_len) as isize;
    let clip_start = n - n % clip_len;
    cols.fill(T::zero());
    for c in 0..c_in {
        for dt in 0..kt {
            let src_f = frame + dt as isize - tpad;
            if src_f < 0 || src_f >= clip_len as isize {
                continue;
            }
            let src = &x[((clip_start + src_f as usize) * c_in + c) * hw..][..hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * kt + dt) * k + ky) * k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    let ox = kx as isize - pad;
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        let sx0 = (x0 as isize + ox) as usize;
                        dst[y * w + x0..y * w + x1].copy_from_slice(&src[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulating into `dx`.
fn col2im<T: Scalar>(cols: &[T], dims: (usize, usize, usize, usize), n: usize, clip_len: usize, kt: usize, k: usize, dx: &mut [T]) {
    let (_, c_in, h, w) = dims;
    let hw = h * w;
    let pad = (k / 2) as isize;
    let tpad = (kt / 2) as isize;
    let frame = (n % clip_len) as isize;
    let clip_start = n - n % clip_len;
    for c in 0..c_in {
        for dt in 0..kt {
            let src_f = frame + dt as isize - tpad;
            if src_f < 0 || src_f >= clip_len as isize {
                continue;
            }
            let base = ((clip_start + src_f as usize) * c_in + c) * hw;
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * kt + dt) * k + ky) * k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    let ox = kx as isize - pad;
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        let sx0 = (x0 as isize + ox) as usize;
                        let d = &mut dx[base + sy * w + sx0..base + sy * w + sx0 + (x1 - x0)];
                        for (o, v) in d.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                            *o = *o + *v;
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded stride-1 convolution over an NCHW batch grouped into clips of
/// `clip_len` frames. With a spatial (4-D) weight every frame is independent.
pub fn conv_forward<T: Scalar>(
    x: &Array4<T>,
    w: &ArrayD<T>,
    b: &ArrayD<T>,
    clip_len: usize,
    keep_cache: bool,
) -> (Array4<T>, Option<ConvCache<T>>) {
    let (co, ci, kt, k) = geometry(w);
    let dims = x.dim();
    let (n, c_in, h, wd) = dims;
    assert_eq!(c_in, ci, "conv input channels");
    assert_eq!(n % clip_len, 0, "batch not divisible into clips");
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let wm = weight_matrix(w);
    let bias = b.view().into_shape_with_order(co).expect("bias is 1-D");
    let hw = h * wd;
    let mut y = Array4::<T>::zeros((n, co, h, wd));
    let mut cache = keep_cache.then(|| Vec::with_capacity(n));
    let mut cols = Array2::<T>::zeros((ci * kt * k * k, hw));
    for s in 0..n {
        im2col(xs, dims, s, clip_len, kt, k, cols.as_slice_mut().unwrap());
        let mut ys = y.index_axis_mut(Axis(0), s).into_shape_with_order((co, hw)).unwrap();
        for (mut row, &bv) in ys.rows_mut().into_iter().zip(bias.iter()) {
            row.fill(bv);
        }
        general_mat_mul(T::one(), &wm, &cols, T::one(), &mut ys);
        if let Some(c) = cache.as_mut() {
            c.push(cols.clone());
        }
    }
    (y, cache.map(|cols| ConvCache { cols, input_dim: dims, clip_len }))
}

/// Returns `dx` and accumulates `dw`, `db`.
pub fn conv_backward<T: Scalar>(
    cache: &ConvCache<T>,
    w: &ArrayD<T>,
    dy: &Array4<T>,
    dw: &mut ArrayD<T>,
    db: &mut ArrayD<T>,
) -> Array4<T> {
    let (co, _, kt, k) = geometry(w);
    let dims = cache.input_dim;
    let (n, c_in, h, wd) = dims;
    let hw = h * wd;
    let wm = weight_matrix(w);
    let mut dwm = dw.view_mut().into_shape_with_order((co, wm.ncols())).expect("contiguous grads");
    let mut dbv = db.view_mut().into_shape_with_order(co).expect("bias is 1-D");
    let mut dx = vec![T::zero(); n * c_in * hw];
    let mut dcols = Array2::<T>::zeros((wm.ncols(), hw));
    let dy = dy.as_standard_layout();
    for s in 0..n {
        let dys = dy.index_axis(Axis(0), s).into_shape_with_order((co, hw)).unwrap();
        general_mat_mul(T::one(), &dys, &cache.cols[s].t(), T::one(), &mut dwm);
        for (o, row) in dbv.iter_mut().zip(dys.rows()) {
            *o = *o + row.sum();
        }
        general_mat_mul(T::one(), &wm.t(), &dys, T::zero(), &mut dcols);
        col2im(dcols.as_slice().unwrap(), dims, s, cache.clip_len, kt, k, &mut dx);
    }
    Array4::from_shape_vec(dims, dx).unwrap()
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_backward<T: Scalar>(pre: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
    Zip::from(pre).and(dy).map_collect(|&x, &g| {
        let s = sigmoid(x);
        g * s * (T::one() + x * (T::one() - s))
    })
}

pub fn avgpool2<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let q = T::lit(0.25);
    Array4::from_shape_fn((n, c, h / 2, w / 2), |(a, b, i, j)| {
        (x[[a, b, 2 * i, 2 * j]] + x[[a, b, 2 * i + 1, 2 * j]] + x[[a, b, 2 * i, 2 * j + 1]] + x[[a, b, 2 * i + 1, 2 * j + 1]]) * q
    })
}

pub fn avgpool2_backward<T: Scalar>(dy: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = dy.dim();
    let q = T::lit(0.25);
    Array4::from_shape_fn((n, c, h * 2, w * 2), |(a, b, i, j)| dy[[a, b, i / 2, j / 2]] * q)
}

pub fn upsample2<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, h * 2, w * 2), |(a, b, i, j)| x[[a, b, i / 2, j / 2]])
}

pub fn upsample2_backward<T: Scalar>(dy: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = dy.dim();
    Array4::from_shape_fn((n, c, h / 2, w / 2), |(a, b, i, j)| {
        dy[[a, b, 2 * i, 2 * j]] + dy[[a, b, 2 * i + 1, 2 * j]] + dy[[a, b, 2 * i, 2 * j + 1]] + dy[[a, b, 2 * i + 1, 2 * j + 1]]
    })
}

pub fn concat_channels<T: Scalar>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("matching NHW")
}

pub fn split_channels<T: Scalar>(g: &Array4<T>, first: usize) -> (Array4<T>, Array4<T>) {
    (g.slice(s![.., ..first, .., ..]).to_owned(), g.slice(s![.., first.., .., ..]).to_owned())
}

/// Tokens of one clip as a `(clip_len·h·w, C)` matrix.
pub fn clip_tokens<T: Scalar>(x: &Array4<T>, start: usize, clip_len: usize) -> Array2<T> {
    let (_, c, h, w) = x.dim();
    let hw = h * w;
    let mut t = Array2::zeros((clip_len * hw, c));
    for f in 0..clip_len {
        let frame = x.index_axis(Axis(0), start + f);
        let flat = frame.into_shape_with_order((c, hw)).unwrap();
        t.slice_mut(s![f * hw..(f + 1) * hw, ..]).assign(&flat.t());
    }
    t
}

pub fn write_clip_tokens<T: Scalar>(t: &Array2<T>, x: &mut Array4<T>, start: usize, clip_len: usize) {
    let (_, c, h, w) = x.dim();
    let hw = h * w;
    for f in 0..clip_len {
        let mut frame = x.index_axis_mut(Axis(0), start + f).into_shape_with_order((c, hw)).unwrap();
        frame.assign(&t.slice(s![f * hw..(f + 1) * hw, ..]).t());
    }
}

pub fn softmax_rows<T: Scalar>(s: &mut Array2<T>) {
    for mut row in s.rows_mut() {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{IxDyn, Ix4};

    fn as4(a: ArrayD<f64>) -> Array4<f64> {
        a.into_dimensionality::<Ix4>().unwrap()
    }

    fn naive_conv(x: &Array4<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>) -> Array4<f64> {
        let (n, _, h, wd) = x.dim();
        let (co, ci, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        let p = (k / 2) as isize;
        Array4::from_shape_fn((n, co, h, wd), |(s, o, i, j)| {
            let mut acc = b[[o]];
            for c in 0..ci {
                for ky in 0..k {
                    for kx in 0..k {
                        let (y, xx) = (i as isize + ky as isize - p, j as isize + kx as isize - p);
                        if y >= 0 && y < h as isize && xx >= 0 && xx < wd as isize {
                            acc += w[[o, c, ky, kx]] * x[[s, c, y as usize, xx as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    fn ramp(shape: &[usize], scale: f64) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|k| ((k * 7 % 11) as f64 - 5.0) * scale).collect()).unwrap()
    }

    #[test]
    fn conv_matches_naive() {
        let x = as4(ramp(&[2, 3, 5, 6], 0.1));
        let w = ramp(&[4, 3, 3, 3], 0.05);
        let b = ramp(&[4], 0.2);
        let (y, _) = conv_forward(&x, &w, &b, 1, false);
        let r = naive_conv(&x, &w, &b);
        assert!((&y - &r).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn conv_backward_is_adjoint() {
        let x = as4(ramp(&[2, 3, 5, 6], 0.1));
        let w = ramp(&[4, 3, 3, 3], 0.05);
        let b = ramp(&[4], 0.2);
        let (y, cache) = conv_forward(&x, &w, &b, 1, true);
        let g = as4(ramp(&[2, 4, 5, 6], 0.3));
        let mut dw = ArrayD::zeros(w.raw_dim());
        let mut db = ArrayD::zeros(b.raw_dim());
        let dx = conv_backward(cache.as_ref().unwrap(), &w, &g, &mut dw, &mut db);
        // <conv(x) - b, g> is bilinear in (x, w).
        let lhs: f64 = (&y * &g).sum() - (0..4).map(|o| b[[o]] * g.index_axis(Axis(1), o).sum()).sum::<f64>();
        assert!((lhs - (&dx * &x).sum()).abs() < 1e-9);
        assert!((lhs - (&dw * &w).sum()).abs() < 1e-9);
        assert!((db[[0]] - g.index_axis(Axis(1), 0).sum()).abs() < 1e-12);
    }

    #[test]
    fn temporal_extent_one_equals_spatial() {
        let x = as4(ramp(&[4, 2, 4, 4], 0.1));
        let w = ramp(&[3, 2, 3, 3], 0.05);
        let w5 = w.clone().into_shape_with_order(IxDyn(&[3, 2, 1, 3, 3])).unwrap();
        let b = ramp(&[3], 0.2);
        let (a, _) = conv_forward(&x, &w, &b, 1, false);
        let (v, _) = conv_forward(&x, &w5, &b, 4, false);
        assert_eq!(a, v);
    }

    #[test]
    fn temporal_taps_reach_neighbours() {
        let mut x = Array4::<f64>::zeros((3, 1, 3, 3));
        x[[1, 0, 1, 1]] = 1.0;
        let mut w = ArrayD::<f64>::zeros(IxDyn(&[1, 1, 3, 3, 3]));
        w[[0, 0, 0, 1, 1]] = 2.0; // previous-frame tap
        let b = ArrayD::zeros(IxDyn(&[1]));
        let (y, _) = conv_forward(&x, &w, &b, 3, false);
        // Frame 2 sees frame 1 through tap dt = 0 (offset −1).
        assert_eq!(y[[2, 0, 1, 1]], 2.0);
        assert_eq!(y[[1, 0, 1, 1]], 0.0);
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let x = as4(ramp(&[1, 2, 4, 4], 0.1));
        let g = as4(ramp(&[1, 2, 2, 2], 0.3));
        assert!(((&avgpool2(&x) * &g).sum() - (&x * &avgpool2_backward(&g)).sum()).abs() < 1e-12);
        let g2 = as4(ramp(&[1, 2, 8, 8], 0.3));
        assert!(((&upsample2(&x) * &g2).sum() - (&x * &upsample2_backward(&g2)).sum()).abs() < 1e-12);
    }
}
