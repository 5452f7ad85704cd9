use ndarray::{Array3, Array4};
use ouro_core::diffusion::{assemble_condition, Codec, ConditionStack, Direction, Prompt, VPredictor};
use ouro_core::nn::{stack_input, DenoiserModel, ModelConfig, Mode};
use ouro_core::{Caption, Channel, ChannelMask, Error, IntrinsicSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn3(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

fn randn4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

fn small(direction: Direction) -> ModelConfig {
    let mut c = ModelConfig::new(direction, 4, 2);
    c.embed_dim = 4;
    c
}

fn task(c: Channel) -> Prompt {
    Prompt::Task(c)
}

#[test]
fn shape_matrix() {
    for depth in [2, 3] {
        for width in [32, 64] {
            for res in [32, 64] {
                let m = DenoiserModel::<f32>::build(ModelConfig::new(Direction::Rgb2x, width, depth), 1).unwrap();
                let x = Array4::<f32>::zeros((1, 6, res, res));
                let (y, _) = m.forward(&x, &[task(Channel::Albedo)], 1, false).unwrap();
                assert_eq!(y.dim(), (1, 3, res, res), "depth {depth} width {width} res {res}");
                assert!(y.iter().all(|v| v.is_finite()));
            }
        }
    }
}

#[test]
fn x2rgb_takes_fourteen_planes() {
    let m = DenoiserModel::<f32>::build(ModelConfig::new(Direction::X2rgb, 8, 2), 0).unwrap();
    assert_eq!(m.config().in_channels, 14);
    let x = Array4::<f32>::zeros((2, 14, 16, 16));
    let p = Prompt::Caption(Caption::new("a red sphere").unwrap());
    let (y, _) = m.forward(&x, &[p.clone(), p], 1, false).unwrap();
    assert_eq!(y.dim(), (2, 3, 16, 16));
}

#[test]
fn initialization_is_deterministic() {
    let a = DenoiserModel::<f32>::build(small(Direction::Rgb2x), 11).unwrap();
    let b = DenoiserModel::<f32>::build(small(Direction::Rgb2x), 11).unwrap();
    let c = DenoiserModel::<f32>::build(small(Direction::Rgb2x), 12).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}

#[test]
fn indivisible_resolution_is_a_config_error() {
    let m = DenoiserModel::<f32>::build(ModelConfig::new(Direction::Rgb2x, 8, 2), 0).unwrap();
    let x = Array4::<f32>::zeros((1, 6, 63, 63));
    assert!(matches!(m.forward(&x, &[task(Channel::Normal)], 1, false), Err(Error::Config(_))));
}

#[test]
fn invalid_configs_rejected() {
    let mut c = ModelConfig::new(Direction::Rgb2x, 8, 1);
    assert!(DenoiserModel::<f32>::build(c.clone(), 0).is_err());
    c.depth = 2;
    c.attention_at = vec![1];
    assert!(DenoiserModel::<f32>::build(c.clone(), 0).is_err());
    c.attention_at = vec![2];
    c.in_channels = 14;
    assert!(DenoiserModel::<f32>::build(c, 0).is_err());
}

#[test]
fn wrong_prompt_kind_rejected() {
    let m = DenoiserModel::<f64>::build(small(Direction::Rgb2x), 0).unwrap();
    let x = Array4::<f64>::zeros((1, 6, 8, 8));
    let p = Prompt::Caption(Caption::new("a photo").unwrap());
    assert!(m.forward(&x, &[p], 1, false).is_err());
}

#[test]
fn zero_output_projection_gives_zero_velocity() {
    let mut m = DenoiserModel::<f64>::build(small(Direction::Rgb2x), 3).unwrap();
    for name in ["conv_out.w", "conv_out.b"] {
        let id = m.params().id(name).unwrap();
        m.params_mut().get_mut(id).fill(0.0);
    }
    let (y, _) = m.forward(&randn4((1, 6, 8, 8), 1), &[task(Channel::Albedo)], 1, false).unwrap();
    assert!(y.iter().all(|&v| v == 0.0));
}

#[test]
fn token_embeddings_are_distinct() {
    let m = DenoiserModel::<f64>::build(ModelConfig::new(Direction::Rgb2x, 8, 2), 5).unwrap();
    let e: Vec<_> = Channel::ALL.iter().map(|&c| m.embedding(&task(c)).unwrap()).collect();
    for i in 0..e.len() {
        for j in i + 1..e.len() {
            let d: f64 = (&e[i] - &e[j]).mapv(|v| v * v).sum();
            assert!(d > 0.0);
        }
    }
}

#[test]
fn masked_slot_contents_do_not_matter() {
    let m = DenoiserModel::<f64>::build(small(Direction::X2rgb), 2).unwrap();
    let mut x = IntrinsicSet::<f64>::zeros(8, 8, ChannelMask::FULL);
    x.albedo.fill(0.3);
    x.normal.index_axis_mut(ndarray::Axis(2), 2).fill(1.0);
    let mut y = x.clone();
    y.albedo.fill(0.9);
    let mask = ChannelMask::from_channels(&[Channel::Normal]);
    let ca = assemble_condition(&x, mask, 0.0, &mut ChaCha8Rng::seed_from_u64(0), &Codec::Identity).unwrap();
    let cb = assemble_condition(&y, mask, 0.0, &mut ChaCha8Rng::seed_from_u64(0), &Codec::Identity).unwrap();
    let z = randn3((8, 8, 3), 4);
    let p = Prompt::Caption(Caption::new("a photo").unwrap());
    assert_eq!(m.predict_v(&z, &ca, &p).unwrap(), m.predict_v(&z, &cb, &p).unwrap());
}

#[test]
fn evaluation_counter_counts_samples() {
    let m = DenoiserModel::<f32>::build(ModelConfig::new(Direction::Rgb2x, 4, 2), 0).unwrap();
    let img = Array3::<f32>::zeros((8, 8, 3));
    let cond = ConditionStack::from_image(&img, &Codec::Identity).unwrap();
    m.predict_v(&Array3::zeros((8, 8, 3)), &cond, &task(Channel::Normal)).unwrap();
    assert_eq!(m.evaluations(), 1);
    m.forward(&Array4::zeros((3, 6, 8, 8)), &vec![task(Channel::Normal); 3], 1, false).unwrap();
    assert_eq!(m.evaluations(), 4);
}

// ---- gradient checks ----

/// Scalar probe: `<r, v̂>`; with `r = 1` the plain sum of the output.
fn probe_loss(m: &DenoiserModel<f64>, x: &Array4<f64>, prompts: &[Prompt], clip: usize, r: &Array4<f64>) -> f64 {
    let (y, _) = m.forward(x, prompts, clip, false).unwrap();
    (&y * r).sum()
}

/// Directional central difference along a random 1e-2-scale perturbation of
/// a few entries of `name`, compared with the analytic gradient.
fn check_param(m: &DenoiserModel<f64>, x: &Array4<f64>, prompts: &[Prompt], clip: usize, name: &str, seed: u64) {
    let r = Array4::from_elem((x.dim().0, 3, x.dim().2, x.dim().3), 1.0);
    let (_, trace) = m.forward(x, prompts, clip, true).unwrap();
    let mut grads = m.params().zeros_like();
    m.backward(trace.as_ref().unwrap(), &r, &mut grads);
    let id = m.params().id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let n = m.params().get(id).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for slice in 0..3 {
        let start = rng.random_range(0..n);
        let len = 6.min(n - start);
        let dir: Vec<f64> = (0..len).map(|_| 1e-2 * rng.sample::<f64, _>(StandardNormal)).collect();
        let g = grads.get(id).as_slice().unwrap();
        let analytic: f64 = dir.iter().enumerate().map(|(k, u)| g[start + k] * u).sum();
        let shifted = |sign: f64| {
            let mut mm = m.clone();
            let p = mm.params_mut().get_mut(id).as_slice_mut().unwrap();
            for (k, u) in dir.iter().enumerate() {
                p[start + k] += sign * u;
            }
            probe_loss(&mm, x, prompts, clip, &r)
        };
        let fd = (shifted(1.0) - shifted(-1.0)) / 2.0;
        let rel = (fd - analytic).abs() / analytic.abs().max(fd.abs()).max(1e-10);
        assert!(rel <= 1e-3, "{name} slice {slice}: analytic {analytic:e}, fd {fd:e}, rel {rel:e}");
    }
}

fn rgb2x_setup() -> (DenoiserModel<f64>, Array4<f64>, Vec<Prompt>) {
    let m = DenoiserModel::<f64>::build(small(Direction::Rgb2x), 21).unwrap();
    let x = randn4((2, 6, 8, 8), 3);
    (m, x, vec![task(Channel::Albedo), task(Channel::Irradiance)])
}

#[test]
fn gradcheck_conv_layers() {
    let (m, x, p) = rgb2x_setup();
    for (i, name) in ["conv_in.w", "enc0.w", "down1.w", "mid2.w", "up0.w", "dec1.w", "conv_out.w", "dec0.b"].iter().enumerate() {
        check_param(&m, &x, &p, 1, name, 100 + i as u64);
    }
}

#[test]
fn gradcheck_attention() {
    let (m, x, p) = rgb2x_setup();
    for (i, name) in ["mid.attn.q", "mid.attn.k", "mid.attn.v", "mid.attn.o", "mid.attn.bo"].iter().enumerate() {
        check_param(&m, &x, &p, 1, name, 200 + i as u64);
    }
}

#[test]
fn gradcheck_embedding() {
    let (m, x, p) = rgb2x_setup();
    for (i, name) in ["embed.table", "embed.proj.w", "embed.proj.b"].iter().enumerate() {
        check_param(&m, &x, &p, 1, name, 300 + i as u64);
    }
    let m = DenoiserModel::<f64>::build(small(Direction::X2rgb), 4).unwrap();
    let x = randn4((2, 14, 8, 8), 5);
    let p = vec![
        Prompt::Caption(Caption::new("a red sphere under 1 lights").unwrap()),
        Prompt::Caption(Caption::new("a photo").unwrap()),
    ];
    check_param(&m, &x, &p, 1, "embed.table", 310);
}

#[test]
fn gradcheck_encoder_attention_stage() {
    let mut c = small(Direction::Rgb2x);
    c.attention_at = vec![1, 2];
    let m = DenoiserModel::<f64>::build(c, 8).unwrap();
    let x = randn4((1, 6, 8, 8), 9);
    check_param(&m, &x, &[task(Channel::Normal)], 1, "enc1.attn.k", 400);
}

#[test]
fn gradcheck_video_mode() {
    let (m, _, _) = rgb2x_setup();
    let v = m.inflate_temporal().unwrap();
    let x = randn4((3, 6, 8, 8), 12);
    let p = vec![task(Channel::Normal); 3];
    check_param(&v, &x, &p, 3, "mid.attn.q", 500);
    check_param(&v, &x, &p, 3, "enc1.w", 501);
}

#[test]
fn input_gradient_matches_finite_differences() {
    let (m, x, p) = rgb2x_setup();
    let r = Array4::from_elem((2, 3, 8, 8), 1.0);
    let (_, trace) = m.forward(&x, &p, 1, true).unwrap();
    let mut grads = m.params().zeros_like();
    let dx = m.backward(trace.as_ref().unwrap(), &r, &mut grads);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..3 {
        let u = randn4(x.dim(), rng.random()) * 1e-2;
        let analytic = (&dx * &u).sum();
        let fd = (probe_loss(&m, &(&x + &u), &p, 1, &r) - probe_loss(&m, &(&x - &u), &p, 1, &r)) / 2.0;
        assert!((fd - analytic).abs() / analytic.abs().max(1e-10) <= 1e-3, "{analytic} vs {fd}");
    }
}

// ---- temporal inflation ----

#[test]
fn inflation_keeps_parameter_count_and_errors_twice() {
    let m = DenoiserModel::<f32>::build(ModelConfig::new(Direction::Rgb2x, 8, 2), 0).unwrap();
    let v = m.inflate_temporal().unwrap();
    assert_eq!(v.mode(), Mode::Video);
    assert_eq!(m.params().count(), v.params().count());
    assert_eq!(m.params().names(), v.params().names());
    assert!(v.inflate_temporal().is_err());
    assert_eq!(m.mode(), Mode::Image);
}

#[test]
fn single_frame_video_equals_image() {
    let m = DenoiserModel::<f32>::build(ModelConfig::new(Direction::Rgb2x, 8, 2), 6).unwrap();
    let v = m.inflate_temporal().unwrap();
    let x = randn4((1, 6, 16, 16), 1).mapv(|a| a as f32);
    let p = [task(Channel::Roughness)];
    let (a, _) = m.forward(&x, &p, 1, false).unwrap();
    let (b, _) = v.forward(&x, &p, 1, false).unwrap();
    assert!((&a - &b).iter().all(|d| d.abs() <= 1e-6));
}

#[test]
fn constant_clip_matches_image_per_frame() {
    let m = DenoiserModel::<f64>::build(ModelConfig::new(Direction::Rgb2x, 8, 2), 6).unwrap();
    let v = m.inflate_temporal().unwrap();
    let z = randn3((16, 16, 3), 2);
    let c = randn3((16, 16, 3), 3);
    let p = task(Channel::Albedo);
    let img = m.forward_clip(std::slice::from_ref(&z), std::slice::from_ref(&c), &p).unwrap();
    let frames = v.forward_clip(&vec![z.clone(); 4], &vec![c.clone(); 4], &p).unwrap();
    for f in &frames {
        assert!((f - &img[0]).iter().all(|d| d.abs() <= 1e-6));
    }
}

#[test]
fn video_attention_mixes_frames() {
    let m = DenoiserModel::<f64>::build(ModelConfig::new(Direction::Rgb2x, 8, 2), 6).unwrap();
    let v = m.inflate_temporal().unwrap();
    let p = task(Channel::Albedo);
    let z = [randn3((16, 16, 3), 2), randn3((16, 16, 3), 7)];
    let c = [randn3((16, 16, 3), 3), randn3((16, 16, 3), 8)];
    let joint = v.forward_clip(&z, &c, &p).unwrap();
    let alone = m.forward_clip(&z[..1], &c[..1], &p).unwrap();
    assert!((&joint[0] - &alone[0]).iter().any(|d| d.abs() > 1e-6));
    let x = stack_input(&z, &c).unwrap();
    assert!(m.forward(&x, &[p.clone(), p], 2, false).is_err());
}
