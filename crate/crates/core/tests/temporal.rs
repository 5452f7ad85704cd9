use ndarray::Array3;
use ouro_core::diffusion::{
    make_schedule, noise_target, single_step_infer, Codec, ConditionStack, Direction, NoiseSpec, Prompt, Sampling,
};
use ouro_core::nn::{DenoiserModel, ModelConfig};
use ouro_core::temporal::{infer_video, infer_windows, window_seed, ClipPredictor, VideoConfig};
use ouro_core::{Channel, Result};

fn small() -> DenoiserModel<f64> {
    let mut c = ModelConfig::new(Direction::Rgb2x, 4, 2);
    c.embed_dim = 4;
    DenoiserModel::build(c, 3).unwrap()
}

fn frame(shift: f64) -> Array3<f64> {
    Array3::from_shape_fn((8, 8, 3), |(i, j, k)| ((i as f64 + shift) * 0.3 + j as f64 * 0.2 + k as f64).sin() * 0.5 + 0.5)
}

struct ZeroVelocity;

impl ClipPredictor<f64> for ZeroVelocity {
    fn predict_clip(&self, z: &[Array3<f64>], _: &[Array3<f64>], _: &Prompt) -> Result<Vec<Array3<f64>>> {
        Ok(z.iter().map(|a| Array3::zeros(a.dim())).collect())
    }
}

/// Returns its input latent as the velocity.
struct Echo;

impl ClipPredictor<f64> for Echo {
    fn predict_clip(&self, z: &[Array3<f64>], _: &[Array3<f64>], _: &Prompt) -> Result<Vec<Array3<f64>>> {
        Ok(z.to_vec())
    }
}

#[test]
fn single_frame_matches_image_inference() {
    let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
    let noise = NoiseSpec::default();
    let s = Sampling { schedule: &sched, noise: &noise, codec: &Codec::Identity };
    let m = small();
    let p = Prompt::Task(Channel::Albedo);
    let img = frame(0.0);
    let vcfg = VideoConfig { seed: 17, ..VideoConfig::default() };
    let video = infer_video(&m, &[img.clone()], &p, &vcfg, &s).unwrap();
    let cond = ConditionStack::from_image(&img, &Codec::Identity).unwrap();
    let single = single_step_infer(&m, &cond, &p, 17, &s).unwrap();
    let d = (&video.frames[0] - &single).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(d < 1e-6, "{d}");
    assert_eq!(video.evaluations, 1);
}

#[test]
fn constant_video_gives_identical_frames() {
    let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
    let noise = NoiseSpec::default();
    let s = Sampling { schedule: &sched, noise: &noise, codec: &Codec::Identity };
    let frames = vec![frame(0.0); 4];
    let out = infer_video(&small(), &frames, &Prompt::Task(Channel::Normal), &VideoConfig::default(), &s).unwrap();
    for f in &out.frames[1..] {
        let d = (f - &out.frames[0]).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(d < 1e-6, "{d}");
    }
}

#[test]
fn full_gamma_hands_off_the_previous_latent() {
    let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
    let noise = NoiseSpec::default();
    let s = Sampling { schedule: &sched, noise: &noise, codec: &Codec::Identity };
    let frames: Vec<_> = (0..10).map(|i| frame(i as f64)).collect();
    let vcfg = VideoConfig { window_size: 4, stride: 2, gamma: 1.0, seed: 5 };
    let out = infer_windows(&Echo, &frames, &Prompt::Task(Channel::Albedo), &vcfg, &s).unwrap();
    let t = sched.terminal();
    for k in 1..out.plan.windows.len() {
        let (ps, _) = out.plan.windows[k - 1];
        let (start, _) = out.plan.windows[k];
        for i in 0..out.plan.overlap(k) {
            let f = start + i;
            let expected = noise_target(&out.z0[k - 1][f - ps], &out.inits[k - 1][f - ps], t, &sched).unwrap();
            assert_eq!(out.inits[k][i], expected);
        }
    }
}

#[test]
fn zero_gamma_starts_every_window_from_its_noise() {
    let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
    let noise = NoiseSpec::default();
    let s = Sampling { schedule: &sched, noise: &noise, codec: &Codec::Identity };
    let frames: Vec<_> = (0..9).map(|i| frame(i as f64)).collect();
    let vcfg = VideoConfig { window_size: 4, stride: 3, gamma: 0.0, seed: 2 };
    let out = infer_windows(&ZeroVelocity, &frames, &Prompt::Task(Channel::Albedo), &vcfg, &s).unwrap();
    for (k, init) in out.inits.iter().enumerate() {
        let eps: Array3<f64> = ouro_core::diffusion::multires_noise((8, 8, 3), &noise.with_seed(window_seed(2, k)));
        assert!(init.iter().all(|z| *z == eps));
    }
    // Overlapped frames keep the later window's prediction.
    let a = sched.alpha_bar(sched.terminal()).unwrap().sqrt();
    assert_eq!(out.frames[5], out.inits[2][0].mapv(|v| v * a));
}

#[test]
fn deterministic_and_counts_evaluations() {
    let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
    let noise = NoiseSpec::default();
    let s = Sampling { schedule: &sched, noise: &noise, codec: &Codec::Identity };
    let frames: Vec<_> = (0..10).map(|i| frame(i as f64 * 0.1)).collect();
    let vcfg = VideoConfig { window_size: 4, stride: 2, gamma: 0.1, seed: 1 };
    let m = small();
    let p = Prompt::Task(Channel::Irradiance);
    let a = infer_video(&m, &frames, &p, &vcfg, &s).unwrap();
    let b = infer_video(&m, &frames, &p, &vcfg, &s).unwrap();
    assert_eq!(a.frames, b.frames);
    assert_eq!(a.evaluations, 16);
    assert_eq!(m.evaluations(), 0);
}

#[test]
fn rejects_mixed_resolutions_and_bad_configs() {
    let sched = make_schedule(1000, 1e-4, 0.02).unwrap();
    let noise = NoiseSpec::default();
    let s = Sampling { schedule: &sched, noise: &noise, codec: &Codec::Identity };
    let p = Prompt::Task(Channel::Albedo);
    let frames = vec![frame(0.0), Array3::zeros((16, 16, 3))];
    assert!(infer_video(&small(), &frames, &p, &VideoConfig::default(), &s).is_err());
    let bad = VideoConfig { window_size: 4, stride: 4, ..VideoConfig::default() };
    assert!(infer_video(&small(), &[frame(0.0)], &p, &bad, &s).is_err());
    let video = small().inflate_temporal().unwrap();
    assert!(infer_video(&video, &[frame(0.0)], &p, &VideoConfig::default(), &s).is_err());
}
