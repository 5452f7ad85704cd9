//! Image metrics, directory evaluation and report rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb};
use log::warn;
use ndarray::{s, Array2, Array3, Axis, Zip};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::{channel_file, read_meta};
use crate::error::{Error, IoContext, Result};
use crate::imageio::load_image;
use crate::objectives::{fit_affine, loss_mse};
use crate::types::{decode_normal, Channel, ChannelMask};

pub const PSNR_CAP: f64 = 99.0;
pub const ANGLE_THRESHOLD_DEG: f64 = 11.25;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_dims(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

pub fn psnr(gt: &Array3<f64>, pred: &Array3<f64>, peak: f64) -> Result<f64> {
    same_dims(gt, pred)?;
    let mse = Zip::from(gt).and(pred).fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b)) / gt.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((20.0 * peak.log10() - 10.0 * mse.log10()).min(PSNR_CAP))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let sum: f64 = g.iter().sum();
    g.into_iter().map(|v| v / sum).collect()
}

/// Separable "valid" Gaussian filtering.
fn filter(a: &Array2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = a.dim();
    let k = g.len();
    let rows: Array2<f64> = Array2::from_shape_fn((h, w - k + 1), |(i, j)| (0..k).map(|t| g[t] * a[[i, j + t]]).sum::<f64>());
    Array2::from_shape_fn((h - k + 1, w - k + 1), |(i, j)| (0..k).map(|t| g[t] * rows[[i + t, j]]).sum::<f64>())
}

fn ssim_plane(x: &Array2<f64>, y: &Array2<f64>, g: &[f64]) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mx = filter(x, g);
    let my = filter(y, g);
    let sxx = filter(&(x * x), g) - &mx * &mx;
    let syy = filter(&(y * y), g) - &my * &my;
    let sxy = filter(&(x * y), g) - &mx * &my;
    let map = Zip::from(&mx).and(&my).and(&sxx).and(&syy).and(&sxy).map_collect(|&a, &b, &vx, &vy, &cxy| {
        ((2.0 * a * b + c1) * (2.0 * cxy + c2)) / ((a * a + b * b + c1) * (vx + vy + c2))
    });
    map.mean().unwrap_or(1.0)
}

/// Mean SSIM over an 11×11 Gaussian window (σ = 1.5), averaged over planes.
pub fn ssim(gt: &Array3<f64>, pred: &Array3<f64>) -> Result<f64> {
    same_dims(gt, pred)?;
    let (h, w, c) = gt.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("{h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} SSIM window")));
    }
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!("SSIM needs 1 or 3 planes, got {c}")));
    }
    let g = gaussian_window();
    let total: f64 = (0..c)
        .map(|k| ssim_plane(&gt.index_axis(Axis(2), k).to_owned(), &pred.index_axis(Axis(2), k).to_owned(), &g))
        .sum();
    Ok(total / c as f64)
}

fn si_fit(gt: &[f64], pred: &[f64]) -> (f64, f64) {
    let pp: f64 = pred.iter().map(|p| p * p).sum();
    let gp: f64 = gt.iter().zip(pred).map(|(g, p)| g * p).sum();
    let alpha = if pp > 0.0 { (gp / pp).max(0.0) } else { 0.0 };
    let sse: f64 = gt.iter().zip(pred).map(|(g, p)| (g - alpha * p).powi(2)).sum();
    (alpha, sse)
}

/// RMSE after the best global non-negative scale of `pred`.
pub fn si_rmse(gt: &Array3<f64>, pred: &Array3<f64>) -> Result<f64> {
    same_dims(gt, pred)?;
    let g: Vec<f64> = gt.iter().copied().collect();
    let p: Vec<f64> = pred.iter().copied().collect();
    Ok((si_fit(&g, &p).1 / g.len() as f64).sqrt())
}

/// Per-plane variant of [`si_rmse`]: one scale per plane.
pub fn si_rmse_per_channel(gt: &Array3<f64>, pred: &Array3<f64>) -> Result<f64> {
    same_dims(gt, pred)?;
    let mut sse = 0.0;
    for k in 0..gt.dim().2 {
        let g: Vec<f64> = gt.index_axis(Axis(2), k).iter().copied().collect();
        let p: Vec<f64> = pred.index_axis(Axis(2), k).iter().copied().collect();
        sse += si_fit(&g, &p).1;
    }
    Ok((sse / gt.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngularStats {
    pub mean_deg: f64,
    pub pct_below_11_25: f64,
}

/// Angular error between unit `n_gt` and renormalized `n_pred`; zero-length
/// predictions count as `(0, 0, 1)`.
pub fn angular_stats(n_gt: &Array3<f64>, n_pred: &Array3<f64>) -> Result<AngularStats> {
    same_dims(n_gt, n_pred)?;
    if n_gt.dim().2 != 3 {
        return Err(Error::Shape("normals need 3 planes".into()));
    }
    let (h, w, _) = n_gt.dim();
    let (mut sum, mut below) = (0.0, 0usize);
    for i in 0..h {
        for j in 0..w {
            let g = n_gt.slice(s![i, j, ..]);
            let p = n_pred.slice(s![i, j, ..]);
            let len = p.dot(&p).sqrt();
            let p = if len > 0.0 { p.mapv(|v| v / len) } else { ndarray::arr1(&[0.0, 0.0, 1.0]) };
            let glen = g.dot(&g).sqrt();
            let cos = (g.dot(&p) / glen).clamp(-1.0, 1.0);
            let deg = cos.acos().to_degrees();
            sum += deg;
            if deg < ANGLE_THRESHOLD_DEG {
                below += 1;
            }
        }
    }
    let n = (h * w) as f64;
    Ok(AngularStats { mean_deg: sum / n, pct_below_11_25: 100.0 * below as f64 / n })
}

/// A learned perceptual distance supplied by the caller.
pub trait PerceptualBackend: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, gt: &Array3<f64>, pred: &Array3<f64>) -> Result<f64>;
}

/// Stand-in backend returning the per-pixel MSE.
#[derive(Debug, Clone, Copy, Default)]
pub struct MseBackend;

impl PerceptualBackend for MseBackend {
    fn name(&self) -> &str {
        "mse"
    }

    fn distance(&self, gt: &Array3<f64>, pred: &Array3<f64>) -> Result<f64> {
        Ok(loss_mse(gt, pred)?.0)
    }
}

/// `"none"` selects no backend.
pub fn backend_by_name(name: &str) -> Result<Option<Box<dyn PerceptualBackend>>> {
    match name {
        "none" => Ok(None),
        "mse" => Ok(Some(Box::new(MseBackend))),
        _ => Err(Error::Validation(format!("unknown perceptual backend '{name}'"))),
    }
}

/// A metric value, or a marker that the metric could not be computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricValue {
    Value(f64),
    Unavailable,
}

impl MetricValue {
    pub fn value(self) -> Option<f64> {
        match self {
            MetricValue::Value(v) => Some(v),
            MetricValue::Unavailable => None,
        }
    }
}

impl fmt::Display for MetricValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricValue::Value(v) => write!(f, "{v:.4}"),
            MetricValue::Unavailable => f.write_str("unavailable"),
        }
    }
}

impl Serialize for MetricValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MetricValue::Value(v) => s.serialize_f64(*v),
            MetricValue::Unavailable => s.serialize_str("unavailable"),
        }
    }
}

impl<'de> Deserialize<'de> for MetricValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::Number(n) => Ok(MetricValue::Value(n.as_f64().unwrap_or(f64::NAN))),
            serde_json::Value::String(s) if s == "unavailable" => Ok(MetricValue::Unavailable),
            other => Err(serde::de::Error::custom(format!("bad metric value {other}"))),
        }
    }
}

pub fn perceptual(gt: &Array3<f64>, pred: &Array3<f64>, backend: Option<&dyn PerceptualBackend>) -> Result<MetricValue> {
    let Some(b) = backend else {
        return Ok(MetricValue::Unavailable);
    };
    let v = b.distance(gt, pred)?;
    if !v.is_finite() {
        return Err(Error::Backend(format!("perceptual backend '{}' returned {v}", b.name())));
    }
    Ok(MetricValue::Value(v))
}

/// What a report column compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EvalTarget {
    Intrinsic(Channel),
    Rgb,
}

impl EvalTarget {
    pub fn name(self) -> &'static str {
        match self {
            EvalTarget::Intrinsic(c) => c.name(),
            EvalTarget::Rgb => "rgb",
        }
    }

    fn file(self, dir: &Path) -> std::path::PathBuf {
        match self {
            EvalTarget::Intrinsic(c) => channel_file(dir, c),
            EvalTarget::Rgb => dir.join("rgb.otns"),
        }
    }

    /// Parses a comma list such as `a,n,r,m,E,rgb`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let t = if part == "rgb" { EvalTarget::Rgb } else { EvalTarget::Intrinsic(part.parse()?) };
            if !out.contains(&t) {
                out.push(t);
            }
        }
        if out.is_empty() {
            return Err(Error::Validation("no channels selected".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelReport {
    /// Images that contributed to every metric of this channel.
    pub images: usize,
    pub metrics: BTreeMap<String, MetricValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub model: String,
    pub channels: BTreeMap<String, ChannelReport>,
    pub paired_ids: usize,
    pub warnings: Vec<String>,
}

#[derive(Default)]
pub struct EvalOptions {
    pub allow_unpaired: bool,
    pub per_channel_si: bool,
    pub perceptual: Option<Box<dyn PerceptualBackend>>,
}

fn subdirs(root: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for e in fs::read_dir(root).at(root)? {
        let e = e.at(root)?;
        if e.path().is_dir() {
            out.insert(e.file_name().to_string_lossy().into_owned());
        }
    }
    Ok(out)
}

fn clamp01(a: &Array3<f64>) -> Array3<f64> {
    a.mapv(|v| v.clamp(0.0, 1.0))
}

fn metrics_for(
    t: EvalTarget,
    gt: &Array3<f64>,
    pred: &Array3<f64>,
    opts: &EvalOptions,
) -> Result<Vec<(&'static str, MetricValue)>> {
    let backend = opts.perceptual.as_deref();
    let v = MetricValue::Value;
    let mut out = Vec::new();
    match t {
        EvalTarget::Intrinsic(Channel::Normal) => {
            let st = angular_stats(&decode_normal(gt), &decode_normal(pred))?;
            out.push(("mean_deg", v(st.mean_deg)));
            out.push(("pct_below_11.25", v(st.pct_below_11_25)));
        }
        EvalTarget::Intrinsic(Channel::Irradiance) => {
            let fit = fit_affine(pred, gt)?;
            let aligned = Array3::from_shape_fn(pred.dim(), |(i, j, k)| fit.scale[k] * pred[[i, j, k]] + fit.shift[k]);
            out.push(("psnr", v(psnr(gt, &aligned, 1.0)?)));
            out.push(("psnr_raw", v(psnr(gt, pred, 1.0)?)));
            out.push(("lpips", perceptual(gt, &aligned, backend)?));
        }
        EvalTarget::Intrinsic(Channel::Albedo) => {
            let p = clamp01(pred);
            out.push(("psnr", v(psnr(gt, &p, 1.0)?)));
            out.push(("lpips", perceptual(gt, &p, backend)?));
            out.push(("ssim", v(ssim(gt, &p)?)));
            let si = if opts.per_channel_si { si_rmse_per_channel(gt, &p)? } else { si_rmse(gt, &p)? };
            out.push(("si_rmse", v(si)));
        }
        EvalTarget::Intrinsic(_) => {
            let p = clamp01(pred);
            out.push(("psnr", v(psnr(gt, &p, 1.0)?)));
            out.push(("lpips", perceptual(gt, &p, backend)?));
        }
        EvalTarget::Rgb => {
            let p = clamp01(pred);
            out.push(("psnr", v(psnr(gt, &p, 1.0)?)));
            out.push(("lpips", perceptual(gt, &p, backend)?));
            out.push(("ssim", v(ssim(gt, &p)?)));
        }
    }
    Ok(out)
}

/// Compares `<pred_root>/<id>/<channel>.otns` against the records of
/// `gt_root` (a dataset split). Channels absent from a ground-truth record
/// are skipped for that record; missing predictions are excluded with a
/// warning; prediction ids without ground truth are refused unless
/// `allow_unpaired`.
pub fn evaluate(pred_root: &Path, gt_root: &Path, targets: &[EvalTarget], opts: &EvalOptions) -> Result<MetricReport> {
    let pred_ids = subdirs(pred_root)?;
    let gt_ids: BTreeSet<String> = subdirs(gt_root)?.into_iter().filter(|id| gt_root.join(id).join("meta.json").is_file()).collect();
    let unpaired: Vec<&String> = pred_ids.difference(&gt_ids).collect();
    let mut warnings = Vec::new();
    if !unpaired.is_empty() {
        let list = unpaired.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ");
        if !opts.allow_unpaired {
            return Err(Error::Validation(format!("predictions without ground truth: {list}")));
        }
        warnings.push(format!("ignored unpaired predictions: {list}"));
    }
    let mut sums: BTreeMap<EvalTarget, (usize, BTreeMap<&'static str, (f64, bool)>)> = BTreeMap::new();
    let mut paired = 0;
    for id in &gt_ids {
        let gdir = gt_root.join(id);
        let pdir = pred_root.join(id);
        if !pdir.is_dir() {
            warnings.push(format!("{id}: no prediction directory"));
            continue;
        }
        paired += 1;
        let mask = read_meta(&gdir)?.mask;
        for &t in targets {
            if let EvalTarget::Intrinsic(c) = t {
                if !mask.get(c) {
                    continue;
                }
            }
            let pf = t.file(&pdir);
            if !pf.is_file() {
                warnings.push(format!("{id}: missing {} prediction", t.name()));
                continue;
            }
            let gt = load_image::<f64>(t.file(&gdir))?;
            let pred = load_image::<f64>(&pf)?;
            if gt.dim() != pred.dim() {
                return Err(Error::Shape(format!("{id}/{}: prediction {:?} vs ground truth {:?}", t.name(), pred.dim(), gt.dim())));
            }
            let entry = sums.entry(t).or_default();
            entry.0 += 1;
            for (name, value) in metrics_for(t, &gt, &pred, opts)? {
                let slot = entry.1.entry(name).or_insert((0.0, true));
                match value {
                    MetricValue::Value(v) => slot.0 += v,
                    MetricValue::Unavailable => slot.1 = false,
                }
            }
        }
    }
    for w in &warnings {
        warn!("{w}");
    }
    let channels = sums
        .into_iter()
        .map(|(t, (n, m))| {
            let metrics = m
                .into_iter()
                .map(|(k, (sum, ok))| {
                    (k.to_string(), if ok { MetricValue::Value(sum / n as f64) } else { MetricValue::Unavailable })
                })
                .collect();
            (t.name().to_string(), ChannelReport { images: n, metrics })
        })
        .collect();
    Ok(MetricReport {
        dataset: gt_root.display().to_string(),
        model: pred_root.display().to_string(),
        channels,
        paired_ids: paired,
        warnings,
    })
}

/// Aligned plain-text table, one row per channel and metric.
pub fn render_table(r: &MetricReport) -> String {
    let mut rows = vec![("channel".to_string(), "metric".to_string(), "value".to_string(), "images".to_string())];
    for (c, rep) in &r.channels {
        for (m, v) in &rep.metrics {
            rows.push((c.clone(), m.clone(), v.to_string(), rep.images.to_string()));
        }
    }
    let w0 = rows.iter().map(|r| r.0.chars().count()).max().unwrap_or(0);
    let w1 = rows.iter().map(|r| r.1.chars().count()).max().unwrap_or(0);
    let w2 = rows.iter().map(|r| r.2.chars().count()).max().unwrap_or(0);
    let mut out = String::new();
    for (i, (a, b, c, d)) in rows.iter().enumerate() {
        out.push_str(&format!("{a:<w0$}  {b:<w1$}  {c:>w2$}  {d}\n"));
        if i == 0 {
            out.push_str(&format!("{}\n", "-".repeat(w0 + w1 + w2 + 6 + 6)));
        }
    }
    out
}

/// Writes `table.txt`, `report.json` and one bar plot per metric
/// (`<metric>.png`, one bar per channel) into `dir`.
pub fn render_report(r: &MetricReport, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir).at(dir)?;
    let mut written = Vec::new();
    let tp = dir.join("table.txt");
    fs::write(&tp, render_table(r)).at(&tp)?;
    written.push(tp);
    let jp = dir.join("report.json");
    fs::write(&jp, serde_json::to_vec_pretty(r)?).at(&jp)?;
    written.push(jp);
    let mut by_metric: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for rep in r.channels.values() {
        for (m, v) in &rep.metrics {
            if let Some(x) = v.value() {
                by_metric.entry(m.as_str()).or_default().push(x);
            }
        }
    }
    for (m, values) in by_metric {
        let p = dir.join(format!("{}.png", m.replace('.', "_")));
        bar_plot(&values, &p)?;
        written.push(p);
    }
    Ok(written)
}

fn bar_plot(values: &[f64], path: &Path) -> Result<()> {
    const BAR: u32 = 32;
    const GAP: u32 = 8;
    const HEIGHT: u32 = 160;
    let width = GAP + values.len() as u32 * (BAR + GAP);
    let max = values.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-12);
    let img = ImageBuffer::from_fn(width, HEIGHT, |x, y| {
        let slot = x.saturating_sub(GAP) / (BAR + GAP);
        let inside = x >= GAP && (x - GAP) % (BAR + GAP) < BAR && (slot as usize) < values.len();
        if inside {
            let h = ((values[slot as usize].abs() / max) * (HEIGHT - 4) as f64).round() as u32;
            if y >= HEIGHT - h {
                return Rgb([60u8, 110, 180]);
            }
        }
        if y == HEIGHT - 1 {
            Rgb([0, 0, 0])
        } else {
            Rgb([255, 255, 255])
        }
    });
    img.save(path)?;
    Ok(())
}

/// Loads a report written by [`render_report`] or the evaluation command.
pub fn read_report(path: &Path) -> Result<MetricReport> {
    Ok(serde_json::from_slice(&fs::read(path).at(path)?)?)
}

/// Channels a ground-truth mask allows, in report order.
pub fn available_targets(mask: ChannelMask) -> Vec<EvalTarget> {
    let mut v: Vec<EvalTarget> = mask.present().into_iter().map(EvalTarget::Intrinsic).collect();
    v.push(EvalTarget::Rgb);
    v
}
