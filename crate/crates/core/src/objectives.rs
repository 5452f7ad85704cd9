//! Training losses and their gradients with respect to the prediction.
//!
//! Every loss is normalized by the pixel count N and returns `(value, dL/dpred)`.

use ndarray::{Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{Channel, ChannelMask, IntrinsicSet};

/// Bound on the cosine inside the `arccos` derivative.
pub const COS_CLAMP: f64 = 1.0 - 1e-7;

/// Per-channel least-squares fit `E ≈ s·Ê + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    pub scale: [f64; 3],
    pub shift: [f64; 3],
    /// Minimized sum of squared residuals (not normalized).
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub n: f64,
    pub a: f64,
    pub r: f64,
    pub m: f64,
    #[serde(rename = "E")]
    pub e: f64,
    pub rgb: f64,
    pub cycle_x: f64,
    pub cycle_i: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn channel(&self, c: Channel) -> f64 {
        match c {
            Channel::Normal => self.n,
            Channel::Albedo => self.a,
            Channel::Roughness => self.r,
            Channel::Metallicity => self.m,
            Channel::Irradiance => self.e,
        }
    }

    pub fn channel_mut(&mut self, c: Channel) -> &mut f64 {
        match c {
            Channel::Normal => &mut self.n,
            Channel::Albedo => &mut self.a,
            Channel::Roughness => &mut self.r,
            Channel::Metallicity => &mut self.m,
            Channel::Irradiance => &mut self.e,
        }
    }

    /// Recomputes `total` with unit channel weights and cycle weight `lambda_cyc`.
    pub fn finalize(mut self, lambda_cyc: f64) -> Self {
        self.total = self.n + self.a + self.r + self.m + self.e + self.rgb + lambda_cyc * (self.cycle_x + self.cycle_i);
        self
    }

    /// Component-wise sum (totals included).
    pub fn accumulate(&mut self, o: &Self) {
        self.n += o.n;
        self.a += o.a;
        self.r += o.r;
        self.m += o.m;
        self.e += o.e;
        self.rgb += o.rgb;
        self.cycle_x += o.cycle_x;
        self.cycle_i += o.cycle_i;
        self.total += o.total;
    }

    pub fn scaled(mut self, k: f64) -> Self {
        for v in [
            &mut self.n,
            &mut self.a,
            &mut self.r,
            &mut self.m,
            &mut self.e,
            &mut self.rgb,
            &mut self.cycle_x,
            &mut self.cycle_i,
            &mut self.total,
        ] {
            *v *= k;
        }
        self
    }

    pub fn is_finite(&self) -> bool {
        [self.n, self.a, self.r, self.m, self.e, self.rgb, self.cycle_x, self.cycle_i, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn same_shape<T>(a: &Array3<T>, b: &Array3<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("shapes {:?} and {:?} differ", a.dim(), b.dim())));
    }
    Ok(())
}

fn pixels<T>(a: &Array3<T>) -> f64 {
    let (h, w, _) = a.dim();
    (h * w) as f64
}

/// Angular normal loss: mean over pixels of the angle between `gt` and `pred`.
#[derive(Debug, Clone)]
pub struct NormalLoss<T> {
    pub value: f64,
    pub grad: Array3<T>,
    /// Pixels whose prediction had zero length (scored as π/2).
    pub degenerate: usize,
}

pub fn loss_normal<T: Scalar>(gt: &Array3<T>, pred: &Array3<T>) -> Result<NormalLoss<T>> {
    same_shape(gt, pred)?;
    if gt.dim().2 != 3 {
        return Err(Error::Shape("normal maps need 3 planes".into()));
    }
    let n = pixels(gt);
    let mut grad = Array3::zeros(pred.raw_dim());
    let mut sum = 0.0;
    let mut degenerate = 0;
    for ((g, p), mut d) in gt.lanes(Axis(2)).into_iter().zip(pred.lanes(Axis(2))).zip(grad.lanes_mut(Axis(2))) {
        let gv = [g[0].as_f64(), g[1].as_f64(), g[2].as_f64()];
        let pv = [p[0].as_f64(), p[1].as_f64(), p[2].as_f64()];
        let gn = gv.iter().map(|x| x * x).sum::<f64>().sqrt();
        let pn = pv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if pn == 0.0 || gn == 0.0 {
            degenerate += 1;
            sum += std::f64::consts::FRAC_PI_2;
            continue;
        }
        let raw = (0..3).map(|k| gv[k] * pv[k]).sum::<f64>() / (gn * pn);
        sum += raw.clamp(-1.0, 1.0).acos();
        let c = raw.clamp(-COS_CLAMP, COS_CLAMP);
        let dtheta = -1.0 / (1.0 - c * c).sqrt() / n;
        for k in 0..3 {
            let dc = (gv[k] / gn - raw * pv[k] / pn) / pn;
            d[k] = T::lit(dtheta * dc);
        }
    }
    Ok(NormalLoss { value: sum / n, grad, degenerate })
}

/// Closed-form per-channel least squares of `gt` on `pred`.
pub fn fit_affine<T: Scalar>(pred: &Array3<T>, gt: &Array3<T>) -> Result<AffineFit> {
    same_shape(gt, pred)?;
    if gt.dim().2 != 3 {
        return Err(Error::Shape("irradiance maps need 3 planes".into()));
    }
    let mut fit = AffineFit { scale: [0.0; 3], shift: [0.0; 3], residual: 0.0 };
    for c in 0..3 {
        let p = pred.index_axis(Axis(2), c);
        let g = gt.index_axis(Axis(2), c);
        let n = p.len() as f64;
        let mp = p.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let mg = g.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let (mut cov, mut var) = (0.0, 0.0);
        for (a, b) in p.iter().zip(g.iter()) {
            let dp = a.as_f64() - mp;
            cov += dp * (b.as_f64() - mg);
            var += dp * dp;
        }
        let (s, t) = if var / n < 1e-12 { (0.0, mg) } else { (cov / var, mg - cov / var * mp) };
        fit.scale[c] = s;
        fit.shift[c] = t;
        fit.residual += p
            .iter()
            .zip(g.iter())
            .map(|(a, b)| (b.as_f64() - s * a.as_f64() - t).powi(2))
            .sum::<f64>();
    }
    Ok(fit)
}

/// Affine-invariant irradiance loss: fitted residual divided by N.
/// The gradient treats the fit as fixed, which is exact at the optimum.
pub fn loss_irradiance<T: Scalar>(gt: &Array3<T>, pred: &Array3<T>) -> Result<(f64, Array3<T>)> {
    let fit = fit_affine(pred, gt)?;
    let n = pixels(gt);
    let mut grad = Array3::zeros(pred.raw_dim());
    Zip::indexed(&mut grad).and(gt).and(pred).for_each(|(_, _, c), d, &g, &p| {
        let r = g.as_f64() - fit.scale[c] * p.as_f64() - fit.shift[c];
        *d = T::lit(-2.0 * fit.scale[c] * r / n);
    });
    Ok((fit.residual / n, grad))
}

/// Per-pixel mean of the squared norm over planes.
pub fn loss_mse<T: Scalar>(gt: &Array3<T>, pred: &Array3<T>) -> Result<(f64, Array3<T>)> {
    same_shape(gt, pred)?;
    let n = pixels(gt);
    let mut sum = 0.0;
    let grad = Zip::from(gt).and(pred).map_collect(|&g, &p| {
        let d = p.as_f64() - g.as_f64();
        sum += d * d;
        T::lit(2.0 * d / n)
    });
    Ok((sum / n, grad))
}

/// Masked task loss over intrinsic channels. Normals in `pred` are vectors
/// (any length); absent channels contribute zero loss and zero gradient.
pub fn task_loss<T: Scalar>(
    pred: &IntrinsicSet<T>,
    gt: &IntrinsicSet<T>,
    mask: ChannelMask,
) -> Result<(LossBreakdown, IntrinsicSet<T>)> {
    let (h, w) = gt.dims();
    let mut grads = IntrinsicSet::zeros(h, w, mask);
    let mut out = LossBreakdown::default();
    for c in mask.present() {
        let (v, g) = channel_loss(c, gt.channel(c), pred.channel(c))?;
        *out.channel_mut(c) = v;
        *grads.channel_mut(c) = g;
    }
    Ok((out.finalize(0.0), grads))
}

/// Loss for one intrinsic channel.
pub fn channel_loss<T: Scalar>(c: Channel, gt: &Array3<T>, pred: &Array3<T>) -> Result<(f64, Array3<T>)> {
    match c {
        Channel::Normal => loss_normal(gt, pred).map(|l| (l.value, l.grad)),
        Channel::Irradiance => loss_irradiance(gt, pred),
        _ => loss_mse(gt, pred),
    }
}

/// Cycle losses with gradients for `x_cycled` (in storage encoding, normals
/// as `(n+1)/2`) and `i_cycled`.
#[derive(Debug, Clone)]
pub struct CycleLoss<T> {
    pub cycle_x: f64,
    pub cycle_i: f64,
    pub grad_x: IntrinsicSet<T>,
    pub grad_i: Array3<T>,
}

/// `cycle_x` is the mean over present channels of the storage-space MSE;
/// `cycle_i` compares images. Normals in both sets are vectors and are
/// encoded before comparison.
pub fn loss_cycle<T: Scalar>(
    x_gt: &IntrinsicSet<T>,
    x_cycled: &IntrinsicSet<T>,
    i_gt: &Array3<T>,
    i_cycled: &Array3<T>,
    mask: ChannelMask,
) -> Result<CycleLoss<T>> {
    let (h, w) = x_gt.dims();
    let mut grad_x = IntrinsicSet::zeros(h, w, mask);
    let present = mask.present();
    let mut cycle_x = 0.0;
    let half = T::lit(0.5);
    for &c in &present {
        let (v, mut g) = if c == Channel::Normal {
            let enc = |a: &Array3<T>| a.mapv(|v| (v + T::one()) * half);
            let (v, g) = loss_mse(&enc(x_gt.channel(c)), &enc(x_cycled.channel(c)))?;
            (v, g * half)
        } else {
            loss_mse(x_gt.channel(c), x_cycled.channel(c))?
        };
        let k = T::lit(1.0 / present.len() as f64);
        g.mapv_inplace(|v| v * k);
        cycle_x += v;
        *grad_x.channel_mut(c) = g;
    }
    if !present.is_empty() {
        cycle_x /= present.len() as f64;
    }
    let (cycle_i, grad_i) = loss_mse(i_gt, i_cycled)?;
    Ok(CycleLoss { cycle_x, cycle_i, grad_x, grad_i })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn filled(v: [f64; 3]) -> Array3<f64> {
        Array3::from_shape_fn((4, 4, 3), |(_, _, k)| v[k])
    }

    #[test]
    fn normal_loss_cases() {
        let n = filled([0.0, 0.0, 1.0]);
        assert_eq!(loss_normal(&n, &n).unwrap().value, 0.0);
        let neg = n.mapv(|v| -v);
        assert!((loss_normal(&n, &neg).unwrap().value - std::f64::consts::PI).abs() < 1e-12);
        let a = Array3::from_shape_vec((1, 1, 3), vec![1.0, 0.0, 0.0]).unwrap();
        let b = Array3::from_shape_vec((1, 1, 3), vec![0.0, 1.0, 0.0]).unwrap();
        assert!((loss_normal(&a, &b).unwrap().value - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn zero_prediction_counts_as_orthogonal() {
        let n = filled([0.0, 0.0, 1.0]);
        let l = loss_normal(&n, &Array3::zeros((4, 4, 3))).unwrap();
        assert_eq!(l.degenerate, 16);
        assert!((l.value - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!(l.grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mse_conventions() {
        let z1 = Array3::<f64>::zeros((4, 4, 1));
        let z3 = Array3::<f64>::zeros((4, 4, 3));
        assert_eq!(loss_mse(&z1, &z1).unwrap().0, 0.0);
        assert_eq!(loss_mse(&z1, &z1.mapv(|_| 1.0)).unwrap().0, 1.0);
        assert_eq!(loss_mse(&z3, &z3.mapv(|_| 1.0)).unwrap().0, 3.0);
        assert!(loss_mse(&z1, &z3).is_err());
    }

    #[test]
    fn exact_affine_relation() {
        let e = Array3::from_shape_fn((4, 4, 3), |(i, j, k)| (i * 4 + j) as f64 * 0.1 + k as f64);
        let p = e.mapv(|v| (v - 0.5) / 2.0);
        let f = fit_affine(&p, &e).unwrap();
        for c in 0..3 {
            assert!((f.scale[c] - 2.0).abs() < 1e-12);
            assert!((f.shift[c] - 0.5).abs() < 1e-12);
        }
        assert!(f.residual < 1e-20);
    }

    #[test]
    fn constant_prediction_is_degenerate() {
        let e = Array3::from_shape_fn((4, 4, 3), |(i, j, _)| (i + j) as f64);
        let f = fit_affine(&Array3::from_elem((4, 4, 3), 0.7), &e).unwrap();
        let mean = e.index_axis(Axis(2), 0).mean().unwrap();
        assert_eq!(f.scale, [0.0; 3]);
        assert!((f.shift[0] - mean).abs() < 1e-12);
        let ss: f64 = e.iter().map(|v| (v - mean).powi(2)).sum();
        assert!((f.residual - ss).abs() < 1e-9);
    }

    #[test]
    fn task_loss_albedo_offset() {
        let mut gt = IntrinsicSet::<f64>::zeros(4, 4, ChannelMask::FULL);
        gt.normal = filled([0.0, 0.0, 1.0]);
        gt.albedo.fill(0.5);
        gt.irradiance = Array3::from_shape_fn((4, 4, 3), |(i, j, k)| 1.0 + (i + 2 * j + k) as f64 * 0.1);
        let mut pred = gt.clone();
        pred.albedo.mapv_inplace(|v| v + 0.1);
        let (l, _) = task_loss(&pred, &gt, ChannelMask::FULL).unwrap();
        assert!((l.total - 0.03).abs() < 1e-12, "{}", l.total);
        let (l0, _) = task_loss(&gt, &gt, ChannelMask::FULL).unwrap();
        assert_eq!(l0.total, 0.0);
    }

    #[test]
    fn indoor_mask_zeroes_material_terms() {
        let gt = IntrinsicSet::<f64>::zeros(4, 4, ChannelMask::FULL);
        let mut pred = gt.clone();
        pred.roughness.fill(1.0);
        pred.metallicity.fill(1.0);
        let mask = crate::types::Profile::IndoorLike.mask();
        let (l, g) = task_loss(&pred, &gt, mask).unwrap();
        assert_eq!((l.r, l.m), (0.0, 0.0));
        assert!(g.roughness.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cycle_cases() {
        let x = IntrinsicSet::<f64>::zeros(4, 4, ChannelMask::FULL);
        let i = Array3::from_elem((4, 4, 3), 0.3);
        let l = loss_cycle(&x, &x, &i, &i, ChannelMask::FULL).unwrap();
        assert_eq!((l.cycle_x, l.cycle_i), (0.0, 0.0));
        let mut xt = x.clone();
        xt.albedo.fill(5.0);
        let l = loss_cycle(&x, &xt, &i, &i.mapv(|v| v + 0.2), ChannelMask::EMPTY).unwrap();
        assert_eq!(l.cycle_x, 0.0);
        assert!((l.cycle_i - 0.12).abs() < 1e-12);
    }
}
