use std::fs;

use ndarray::Array3;
use ouro_core::evalkit::{
    angular_stats, backend_by_name, evaluate, perceptual, psnr, read_report, render_report, si_rmse, ssim,
    EvalOptions, EvalTarget, MetricValue, PerceptualBackend, PSNR_CAP,
};
use ouro_core::objectives::loss_mse;
use ouro_core::sceneforge::{build_dataset, BuildOptions};
use ouro_core::{Channel, Error, Profile, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand3(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn(shape, || rng.random::<f64>())
}

#[test]
fn psnr_reference_values() {
    let gt = rand3((8, 8, 3), 1).mapv(|v| v * 0.8);
    assert!((psnr(&gt, &gt.mapv(|v| v + 0.1), 1.0).unwrap() - 20.0).abs() < 1e-3);
    assert!((psnr(&gt, &gt.mapv(|v| v + 0.01), 1.0).unwrap() - 40.0).abs() < 1e-3);
    assert_eq!(psnr(&gt, &gt, 1.0).unwrap(), PSNR_CAP);
    let mut last = f64::INFINITY;
    for k in 1..20 {
        let p = psnr(&gt, &gt.mapv(|v| v + 0.01 * k as f64), 1.0).unwrap();
        assert!(p < last);
        last = p;
    }
    assert!(psnr(&gt, &Array3::zeros((8, 8, 1)), 1.0).is_err());
}

#[test]
fn ssim_cases() {
    let a = rand3((16, 16, 3), 2);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let c = Array3::from_elem((12, 12, 1), 0.3);
    assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
    let bin = Array3::from_shape_fn((16, 16, 1), |(i, j, _)| ((i + j) % 2) as f64);
    assert!(ssim(&bin, &bin.mapv(|v| 1.0 - v)).unwrap() < 0.0);
    assert!(ssim(&Array3::zeros((8, 8, 3)), &Array3::zeros((8, 8, 3))).is_err());
    let noisy = &a + &rand3((16, 16, 3), 3).mapv(|v| 0.2 * (v - 0.5));
    let s = ssim(&a, &noisy).unwrap();
    assert!(s > 0.0 && s < 1.0);
}

#[test]
fn si_rmse_matches_a_grid_search() {
    for seed in 0..5 {
        let gt = rand3((6, 6, 3), 10 + seed);
        let pred = rand3((6, 6, 3), 20 + seed);
        let n = gt.len() as f64;
        let best = (0..=300_000)
            .map(|k| {
                let a = k as f64 * 1e-5;
                ((&gt - &pred.mapv(|v| a * v)).mapv(|d| d * d).sum() / n).sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        let v = si_rmse(&gt, &pred).unwrap();
        assert!(v <= best + 1e-12 && best - v < 1e-6, "{v} {best}");
    }
    let gt = rand3((4, 4, 3), 5);
    assert!(si_rmse(&gt, &gt.mapv(|v| 2.0 * v)).unwrap() < 1e-12);
    assert!(si_rmse(&gt, &gt).unwrap() < 1e-12);
    let rms = (gt.mapv(|v| v * v).sum() / gt.len() as f64).sqrt();
    assert!((si_rmse(&gt, &Array3::zeros(gt.dim())).unwrap() - rms).abs() < 1e-15);
}

proptest! {
    #[test]
    fn si_rmse_ignores_positive_scale(seed in 0u64..1000, c in 0.01f64..100.0) {
        let gt = rand3((5, 5, 3), seed);
        let pred = rand3((5, 5, 3), seed + 7);
        let a = si_rmse(&gt, &pred).unwrap();
        let b = si_rmse(&gt, &pred.mapv(|v| v * c)).unwrap();
        prop_assert!((a - b).abs() < 1e-8);
    }

    #[test]
    fn angular_mean_ignores_prediction_length(seed in 0u64..1000, c in 0.01f64..100.0) {
        let n = rand3((4, 4, 3), seed).mapv(|v| v - 0.5);
        let unit = {
            let mut u = n.clone();
            for mut px in u.lanes_mut(ndarray::Axis(2)) {
                let l = px.dot(&px).sqrt();
                px.mapv_inplace(|v| v / l);
            }
            u
        };
        let pred = rand3((4, 4, 3), seed + 1).mapv(|v| v - 0.5);
        let a = angular_stats(&unit, &pred).unwrap();
        let b = angular_stats(&unit, &pred.mapv(|v| v * c)).unwrap();
        prop_assert!((a.mean_deg - b.mean_deg).abs() < 1e-9);
    }
}

#[test]
fn angular_reference_cases() {
    let z = Array3::from_shape_fn((2, 2, 3), |(_, _, k)| (k == 2) as u8 as f64);
    let x = Array3::from_shape_fn((2, 2, 3), |(_, _, k)| (k == 0) as u8 as f64);
    let s = angular_stats(&z, &z).unwrap();
    assert_eq!((s.mean_deg, s.pct_below_11_25), (0.0, 100.0));
    let s = angular_stats(&z, &x).unwrap();
    assert_eq!((s.mean_deg, s.pct_below_11_25), (90.0, 0.0));
    let mut half = z.clone();
    half.slice_mut(ndarray::s![0, .., ..]).assign(&x.slice(ndarray::s![0, .., ..]));
    let s = angular_stats(&z, &half).unwrap();
    assert_eq!((s.mean_deg, s.pct_below_11_25), (45.0, 50.0));
    let s = angular_stats(&z, &Array3::zeros((2, 2, 3))).unwrap();
    assert_eq!(s.mean_deg, 0.0);
}

struct NanBackend;

impl PerceptualBackend for NanBackend {
    fn name(&self) -> &str {
        "broken"
    }
    fn distance(&self, _: &Array3<f64>, _: &Array3<f64>) -> Result<f64> {
        Ok(f64::NAN)
    }
}

#[test]
fn perceptual_slot() {
    let a = rand3((4, 4, 3), 1);
    let b = rand3((4, 4, 3), 2);
    assert_eq!(perceptual(&a, &b, None).unwrap(), MetricValue::Unavailable);
    let mse = backend_by_name("mse").unwrap().unwrap();
    assert_eq!(perceptual(&a, &b, Some(mse.as_ref())).unwrap(), MetricValue::Value(loss_mse(&a, &b).unwrap().0));
    let err = perceptual(&a, &b, Some(&NanBackend)).unwrap_err();
    assert!(err.to_string().contains("broken"), "{err}");
    assert!(backend_by_name("lpips-vgg").is_err());
    assert!(backend_by_name("none").unwrap().is_none());
    assert_eq!(serde_json::to_string(&MetricValue::Unavailable).unwrap(), "\"unavailable\"");
}

fn dataset(n: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let opts = BuildOptions { resolution: 16, ..BuildOptions::default() };
    build_dataset(n, 4, dir.path(), Profile::IndoorLike, &opts).unwrap();
    dir
}

#[test]
fn self_evaluation_is_perfect() {
    let d = dataset(3);
    let split = d.path().join("train");
    let targets = EvalTarget::parse_list("a,n,r,m,E,rgb").unwrap();
    let r = evaluate(&split, &split, &targets, &EvalOptions::default()).unwrap();
    assert_eq!(r.paired_ids, 3);
    assert!(!r.channels.contains_key("roughness"));
    let m = |c: &str, k: &str| r.channels[c].metrics[k].value().unwrap();
    assert_eq!(m("albedo", "psnr"), PSNR_CAP);
    assert!((m("albedo", "ssim") - 1.0).abs() < 1e-12);
    assert!(m("albedo", "si_rmse") < 1e-12);
    assert!(m("normal", "mean_deg") < 1e-5);
    assert_eq!(m("rgb", "psnr"), PSNR_CAP);
    assert_eq!(r.channels["albedo"].metrics["lpips"], MetricValue::Unavailable);
    assert_eq!(r.channels["irradiance"].images, 3);
}

#[test]
fn missing_and_unpaired_predictions() {
    let d = dataset(3);
    let split = d.path().join("train");
    let pred = tempfile::tempdir().unwrap();
    let ids: Vec<String> = {
        let mut v: Vec<_> = fs::read_dir(&split).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
        v.sort();
        v
    };
    for id in &ids[..2] {
        let dst = pred.path().join(id);
        fs::create_dir_all(&dst).unwrap();
        fs::copy(split.join(id).join("albedo.otns"), dst.join("albedo.otns")).unwrap();
    }
    let targets = [EvalTarget::Intrinsic(Channel::Albedo)];
    let r = evaluate(pred.path(), &split, &targets, &EvalOptions::default()).unwrap();
    assert_eq!(r.channels["albedo"].images, 2);
    assert_eq!(r.warnings.len(), 1);

    fs::create_dir_all(pred.path().join("stranger")).unwrap();
    let err = evaluate(pred.path(), &split, &targets, &EvalOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Validation(ref s) if s.contains("stranger")));
    let opts = EvalOptions { allow_unpaired: true, ..EvalOptions::default() };
    let r2 = evaluate(pred.path(), &split, &targets, &opts).unwrap();
    assert_eq!(r2.channels, r.channels);
}

#[test]
fn report_rendering_is_deterministic() {
    let d = dataset(2);
    let split = d.path().join("train");
    let targets = EvalTarget::parse_list("a,n,E,rgb").unwrap();
    let opts = EvalOptions { perceptual: backend_by_name("mse").unwrap(), ..EvalOptions::default() };
    let a = evaluate(&split, &split, &targets, &opts).unwrap();
    let b = evaluate(&split, &split, &targets, &opts).unwrap();
    assert_eq!(a, b);
    let out = tempfile::tempdir().unwrap();
    let files = render_report(&a, out.path()).unwrap();
    assert!(files.iter().all(|f| f.is_file()));
    assert!(out.path().join("psnr.png").is_file());
    let table = fs::read_to_string(out.path().join("table.txt")).unwrap();
    assert!(table.contains("albedo") && table.contains("mean_deg"));
    assert_eq!(read_report(&out.path().join("report.json")).unwrap(), a);
}

#[test]
fn channel_lists() {
    assert_eq!(EvalTarget::parse_list("a, rgb,a").unwrap(), vec![EvalTarget::Intrinsic(Channel::Albedo), EvalTarget::Rgb]);
    assert!(EvalTarget::parse_list("q").is_err());
    assert!(EvalTarget::parse_list("").is_err());
}
