//! Procedural toy scenes and an analytic G-buffer renderer.
//!
//! The camera is orthographic, looking down −z, so the view direction is
//! `v = (0, 0, 1)` at every pixel. Shading per pixel with normal `n`, albedo
//! `a`, roughness `r`, metallicity `m` and directional lights `l_i`:
//!
//! ```text
//! E    = ambient + Σ I_i · max(0, n·l_i)
//! spec = Σ I_i · (0.04·(1−m) + a·m) · max(0, n·h_i)^(2 / max(r, 0.05)²)
//! rgb  = clamp(a ⊙ E · (1−m) + spec, 0, 1)
//! ```
//!
//! Intrinsics are rounded through their on-disk form (f32, encoded normals)
//! before shading, so re-shading channels loaded at f32 reproduces the stored
//! image.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{record_dir, write_manifest, write_record, read_manifest, Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{
    decode_normal, Caption, ChannelMask, Colorspace, DatasetRecord, ImageTensor, IntrinsicSet, Profile,
    MAX_CAPTION_CHARS,
};

pub const MAX_OBJECTS: usize = 6;
pub const MAX_LIGHTS: usize = 3;
pub const ROUGHNESS_FLOOR: f64 = 0.05;
pub const DIELECTRIC_F0: f64 = 0.04;
pub const MIN_RESOLUTION: usize = 16;
const VIEW: [f64; 3] = [0.0, 0.0, 1.0];
const RAY_ORIGIN_Z: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Box,
    Plane,
}

impl ShapeKind {
    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Box => "box",
            ShapeKind::Plane => "plane",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub center: [f64; 3],
    /// Sphere radius or box half-extent; unused for planes.
    pub size: f64,
    /// Rotation about x then y, in radians. Orients boxes and plane normals.
    pub tilt: [f64; 2],
    pub albedo: [f64; 3],
    pub roughness: f64,
    pub metallicity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Light {
    pub direction: [f64; 3],
    pub intensity: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lighting {
    pub lights: Vec<Light>,
    pub ambient: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// Half-width of the orthographic frame in world units.
    pub extent: f64,
    pub pan: [f64; 2],
}

impl Default for Camera {
    fn default() -> Self {
        Self { extent: 1.0, pan: [0.0, 0.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub lighting: Lighting,
    pub camera: Camera,
    pub backdrop_albedo: [f64; 3],
}

/// Bounds for [`sample_scene`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_lights: usize,
    pub max_lights: usize,
    pub shapes: Vec<ShapeKind>,
    pub ambient_max: f64,
    pub intensity_range: [f64; 2],
    pub backdrop_albedo: [f64; 3],
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_objects: 1,
            max_objects: MAX_OBJECTS,
            min_lights: 1,
            max_lights: MAX_LIGHTS,
            shapes: vec![ShapeKind::Sphere, ShapeKind::Box, ShapeKind::Plane],
            ambient_max: 0.2,
            intensity_range: [0.4, 1.0],
            backdrop_albedo: [0.5, 0.5, 0.5],
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene config: {m}")));
        if self.min_objects < 1 || self.min_objects > self.max_objects || self.max_objects > MAX_OBJECTS {
            return bad("object count bounds must satisfy 1 <= min <= max <= 6");
        }
        if self.min_lights < 1 || self.min_lights > self.max_lights || self.max_lights > MAX_LIGHTS {
            return bad("light count bounds must satisfy 1 <= min <= max <= 3");
        }
        if self.shapes.is_empty() {
            return bad("no shapes allowed");
        }
        let [lo, hi] = self.intensity_range;
        if !(0.0..=hi).contains(&lo) || !(0.0..=1.0).contains(&self.ambient_max) {
            return bad("intensity/ambient bounds invalid");
        }
        if self.backdrop_albedo.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("backdrop albedo outside [0, 1]");
        }
        Ok(())
    }
}

/// Named albedo palette; captions use the nearest entry.
pub const PALETTE: [(&str, [f64; 3]); 11] = [
    ("red", [0.8, 0.1, 0.1]),
    ("green", [0.1, 0.7, 0.2]),
    ("blue", [0.1, 0.2, 0.8]),
    ("yellow", [0.85, 0.8, 0.1]),
    ("cyan", [0.1, 0.75, 0.8]),
    ("magenta", [0.8, 0.1, 0.7]),
    ("orange", [0.9, 0.45, 0.1]),
    ("purple", [0.45, 0.15, 0.7]),
    ("white", [0.9, 0.9, 0.9]),
    ("gray", [0.5, 0.5, 0.5]),
    ("black", [0.08, 0.08, 0.08]),
];

pub fn color_name(rgb: [f64; 3]) -> &'static str {
    PALETTE
        .iter()
        .min_by(|a, b| dist2(a.1, rgb).total_cmp(&dist2(b.1, rgb)))
        .map(|p| p.0)
        .unwrap()
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: [f64; 3]) -> Option<[f64; 3]> {
    let len = dot(v, v).sqrt();
    (len > 1e-12).then(|| [v[0] / len, v[1] / len, v[2] / len])
}

/// Rotation about x by `tilt[0]`, then about y by `tilt[1]`.
fn rotate(tilt: [f64; 2], v: [f64; 3]) -> [f64; 3] {
    let (sa, ca) = tilt[0].sin_cos();
    let (sb, cb) = tilt[1].sin_cos();
    let x1 = [v[0], ca * v[1] - sa * v[2], sa * v[1] + ca * v[2]];
    [cb * x1[0] + sb * x1[2], x1[1], -sb * x1[0] + cb * x1[2]]
}

fn rotate_inv(tilt: [f64; 2], v: [f64; 3]) -> [f64; 3] {
    let (sa, ca) = tilt[0].sin_cos();
    let (sb, cb) = tilt[1].sin_cos();
    let y1 = [cb * v[0] - sb * v[2], v[1], sb * v[0] + cb * v[2]];
    [y1[0], ca * y1[1] + sa * y1[2], -sa * y1[1] + ca * y1[2]]
}

/// Deterministic scene sample for `seed`.
pub fn sample_scene(seed: u64, config: &SceneConfig) -> Result<SceneSpec> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_obj = rng.random_range(config.min_objects..=config.max_objects);
    let objects = (0..n_obj)
        .map(|_| {
            let shape = config.shapes[rng.random_range(0..config.shapes.len())];
            let (_, base) = PALETTE[rng.random_range(0..PALETTE.len())];
            let albedo = base.map(|c| (c + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0));
            let center = match shape {
                ShapeKind::Plane => [0.0, 0.0, rng.random_range(-1.0..-0.6)],
                _ => [
                    rng.random_range(-0.7..0.7),
                    rng.random_range(-0.7..0.7),
                    rng.random_range(-0.3..0.3),
                ],
            };
            let size = match shape {
                ShapeKind::Sphere => rng.random_range(0.2..0.5),
                ShapeKind::Box => rng.random_range(0.15..0.4),
                ShapeKind::Plane => 0.0,
            };
            let tilt = match shape {
                ShapeKind::Sphere => [0.0, 0.0],
                ShapeKind::Box => [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)],
                ShapeKind::Plane => [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)],
            };
            let metallicity = if rng.random_bool(0.7) {
                rng.random_range(0.0..0.3)
            } else {
                rng.random_range(0.6..1.0)
            };
            SceneObject {
                shape,
                center,
                size,
                tilt,
                albedo,
                roughness: rng.random_range(0.0..1.0),
                metallicity,
            }
        })
        .collect();
    let n_lights = rng.random_range(config.min_lights..=config.max_lights);
    let [lo, hi] = config.intensity_range;
    let lights = (0..n_lights)
        .map(|_| {
            let direction = loop {
                let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.2..1.0)];
                if let Some(u) = normalize(v) {
                    break u;
                }
            };
            let level = if hi > lo { rng.random_range(lo..hi) } else { lo };
            let intensity = [0; 3].map(|_| (level * rng.random_range(0.85..1.0)).max(0.0));
            Light { direction, intensity }
        })
        .collect();
    let ambient = if config.ambient_max > 0.0 {
        let level = rng.random_range(0.0..config.ambient_max);
        [level; 3]
    } else {
        [0.0; 3]
    };
    Ok(SceneSpec {
        objects,
        lighting: Lighting { lights, ambient },
        camera: Camera::default(),
        backdrop_albedo: config.backdrop_albedo,
    })
}

/// Lists every violated [`SceneSpec`] invariant.
pub fn scene_violations(s: &SceneSpec) -> Vec<String> {
    let mut out = Vec::new();
    if !(1..=MAX_OBJECTS).contains(&s.objects.len()) {
        out.push(format!("{} objects", s.objects.len()));
    }
    if !(1..=MAX_LIGHTS).contains(&s.lighting.lights.len()) {
        out.push(format!("{} lights", s.lighting.lights.len()));
    }
    let unit = |v: &f64| (0.0..=1.0).contains(v);
    for (i, o) in s.objects.iter().enumerate() {
        if !o.albedo.iter().all(unit) || !unit(&o.roughness) || !unit(&o.metallicity) {
            out.push(format!("object {i} material outside [0, 1]"));
        }
    }
    for (i, l) in s.lighting.lights.iter().enumerate() {
        if (dot(l.direction, l.direction).sqrt() - 1.0).abs() > 1e-9 {
            out.push(format!("light {i} direction not unit"));
        }
        if l.intensity.iter().any(|v| *v < 0.0) {
            out.push(format!("light {i} negative intensity"));
        }
    }
    if s.lighting.ambient.iter().any(|v| *v < 0.0) {
        out.push("negative ambient".into());
    }
    out
}

struct Hit {
    depth: f64,
    normal: [f64; 3],
    object: usize,
}

fn intersect(o: &SceneObject, x: f64, y: f64) -> Option<(f64, [f64; 3])> {
    match o.shape {
        ShapeKind::Sphere => {
            let (dx, dy) = (x - o.center[0], y - o.center[1]);
            let rem = o.size * o.size - dx * dx - dy * dy;
            if rem < 0.0 {
                return None;
            }
            let dz = rem.sqrt();
            let n = normalize([dx, dy, dz]).unwrap_or(VIEW);
            Some((o.center[2] + dz, n))
        }
        ShapeKind::Plane => {
            let n = rotate(o.tilt, VIEW);
            if n[2] < 1e-6 {
                return None;
            }
            // n·(p − c) = 0 with p = (x, y, z).
            let z = o.center[2] - (n[0] * (x - o.center[0]) + n[1] * (y - o.center[1])) / n[2];
            Some((z, n))
        }
        ShapeKind::Box => {
            let origin = rotate_inv(o.tilt, [x - o.center[0], y - o.center[1], RAY_ORIGIN_Z - o.center[2]]);
            let dir = rotate_inv(o.tilt, [0.0, 0.0, -1.0]);
            let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis = 0;
            let mut sign = 1.0;
            for k in 0..3 {
                if dir[k].abs() < 1e-12 {
                    if origin[k].abs() > o.size {
                        return None;
                    }
                    continue;
                }
                let t1 = (-o.size - origin[k]) / dir[k];
                let t2 = (o.size - origin[k]) / dir[k];
                let (ta, tb, s) = if t1 < t2 { (t1, t2, -1.0) } else { (t2, t1, 1.0) };
                if ta > t_near {
                    t_near = ta;
                    axis = k;
                    sign = s;
                }
                t_far = t_far.min(tb);
            }
            if t_near > t_far || t_far < 0.0 {
                return None;
            }
            let mut local_n = [0.0; 3];
            local_n[axis] = sign;
            let n = rotate(o.tilt, local_n);
            Some((RAY_ORIGIN_Z - t_near, n))
        }
    }
}

fn trace(s: &SceneSpec, x: f64, y: f64) -> Option<Hit> {
    s.objects
        .iter()
        .enumerate()
        .filter_map(|(i, o)| intersect(o, x, y).map(|(depth, normal)| Hit { depth, normal, object: i }))
        .filter(|h| h.normal[2] > 0.0)
        .max_by(|a, b| a.depth.total_cmp(&b.depth))
}

/// Per-pixel shading. Returns `(E, unclamped rgb)`.
pub fn shade_pixel(n: [f64; 3], a: [f64; 3], r: f64, m: f64, lighting: &Lighting) -> ([f64; 3], [f64; 3]) {
    let e = irradiance_at(n, lighting);
    let rgb = [0, 1, 2].map(|k| a[k] * e[k] * (1.0 - m) + spec_term(n, a[k], r, m, lighting, k));
    (e, rgb)
}

/// Diffuse irradiance `ambient + Σ I_i · max(0, n·l_i)`.
pub fn irradiance_at(n: [f64; 3], lighting: &Lighting) -> [f64; 3] {
    let mut e = lighting.ambient;
    for l in &lighting.lights {
        let ndl = dot(n, l.direction).max(0.0);
        for k in 0..3 {
            e[k] += l.intensity[k] * ndl;
        }
    }
    e
}

/// Shades an intrinsic set, using its normal/albedo/roughness/metallicity and
/// recomputing irradiance. Returns `(E, clamped rgb)`.
pub fn shade<T: Scalar>(x: &IntrinsicSet<T>, lighting: &Lighting) -> (Array3<T>, Array3<T>) {
    let (h, w) = x.dims();
    let mut e_out = Array3::zeros((h, w, 3));
    let mut rgb_out = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            let n = [0, 1, 2].map(|k| x.normal[[i, j, k]].as_f64());
            let a = [0, 1, 2].map(|k| x.albedo[[i, j, k]].as_f64());
            let (e, rgb) = shade_pixel(n, a, x.roughness[[i, j, 0]].as_f64(), x.metallicity[[i, j, 0]].as_f64(), lighting);
            for k in 0..3 {
                e_out[[i, j, k]] = T::lit(e[k]);
                rgb_out[[i, j, k]] = T::lit(rgb[k].clamp(0.0, 1.0));
            }
        }
    }
    (e_out, rgb_out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput<T> {
    pub rgb: ImageTensor<T>,
    pub intrinsics: IntrinsicSet<T>,
}

/// Renders all five channels (full mask) and the shaded image.
pub fn render_gbuffer<T: Scalar>(s: &SceneSpec, resolution: usize) -> Result<RenderOutput<T>> {
    if resolution < MIN_RESOLUTION {
        return Err(Error::Config(format!("resolution {resolution} below {MIN_RESOLUTION}")));
    }
    let problems = scene_violations(s);
    if !problems.is_empty() {
        return Err(Error::Validation(problems.join("; ")));
    }
    let res = resolution;
    let mut enc_normal = Array3::<f64>::zeros((res, res, 3));
    let mut x = IntrinsicSet::<f64>::zeros(res, res, ChannelMask::FULL);
    let ext = s.camera.extent;
    for i in 0..res {
        for j in 0..res {
            let px = s.camera.pan[0] + ext * (2.0 * (j as f64 + 0.5) / res as f64 - 1.0);
            let py = s.camera.pan[1] + ext * (1.0 - 2.0 * (i as f64 + 0.5) / res as f64);
            let (n, a, r, m) = match trace(s, px, py) {
                Some(hit) => {
                    let o = &s.objects[hit.object];
                    (hit.normal, o.albedo, o.roughness, o.metallicity)
                }
                None => (VIEW, s.backdrop_albedo, 1.0, 0.0),
            };
            for k in 0..3 {
                enc_normal[[i, j, k]] = ((n[k] + 1.0) * 0.5).clamp(0.0, 1.0).snap_f32();
                x.albedo[[i, j, k]] = a[k].snap_f32();
            }
            x.roughness[[i, j, 0]] = r.snap_f32();
            x.metallicity[[i, j, 0]] = m.snap_f32();
        }
    }
    x.normal = decode_normal(&enc_normal).mapv(f64::snap_f32);
    let (e, _) = shade(&x, &s.lighting);
    x.irradiance = e.mapv(f64::snap_f32);
    let rgb = reshade_stored(&x, &s.lighting).mapv(f64::snap_f32);
    let cast = |a: &Array3<f64>| a.mapv(T::lit);
    let intrinsics = IntrinsicSet {
        normal: cast(&x.normal),
        albedo: cast(&x.albedo),
        roughness: cast(&x.roughness),
        metallicity: cast(&x.metallicity),
        irradiance: cast(&x.irradiance),
        mask: ChannelMask::FULL,
    };
    Ok(RenderOutput {
        rgb: ImageTensor::new(cast(&rgb), Colorspace::Linear)?,
        intrinsics,
    })
}

/// Specular contribution to colour channel `k`.
pub fn spec_term(n: [f64; 3], a_k: f64, r: f64, m: f64, lighting: &Lighting, k: usize) -> f64 {
    let exponent = 2.0 / r.max(ROUGHNESS_FLOOR).powi(2);
    lighting
        .lights
        .iter()
        .map(|l| {
            let ndh = normalize([l.direction[0] + VIEW[0], l.direction[1] + VIEW[1], l.direction[2] + VIEW[2]])
                .map(|h| dot(n, h).max(0.0))
                .unwrap_or(0.0);
            l.intensity[k] * (DIELECTRIC_F0 * (1.0 - m) + a_k * m) * ndh.powf(exponent)
        })
        .sum()
}

/// Re-shades stored channels with the stored irradiance: `a·E·(1−m) + spec`, clamped.
pub fn reshade_stored<T: Scalar>(x: &IntrinsicSet<T>, lighting: &Lighting) -> Array3<f64> {
    let (h, w) = x.dims();
    Array3::from_shape_fn((h, w, 3), |(i, j, k)| {
        let n = [0, 1, 2].map(|c| x.normal[[i, j, c]].as_f64());
        let a = x.albedo[[i, j, k]].as_f64();
        let r = x.roughness[[i, j, 0]].as_f64();
        let m = x.metallicity[[i, j, 0]].as_f64();
        (a * x.irradiance[[i, j, k]].as_f64() * (1.0 - m) + spec_term(n, a, r, m, lighting, k)).clamp(0.0, 1.0)
    })
}

/// Template caption: "a <color> <shape> and a <color> <shape> under <k> lights".
pub fn caption(s: &SceneSpec) -> Caption {
    let objects: Vec<String> = s
        .objects
        .iter()
        .map(|o| format!("a {} {}", color_name(o.albedo), o.shape.word()))
        .collect();
    let mut text = format!("{} under {} lights", objects.join(" and "), s.lighting.lights.len());
    if text.chars().count() > MAX_CAPTION_CHARS {
        text = text.chars().take(MAX_CAPTION_CHARS).collect();
    }
    Caption::new(text).expect("caption truncated to limit")
}

/// Seed for record `index` of a dataset built from `seed`.
pub fn record_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair.
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds one record in memory.
pub fn make_record<T: Scalar>(
    id: String,
    scene_seed: u64,
    profile: Profile,
    resolution: usize,
    config: &SceneConfig,
) -> Result<(DatasetRecord<T>, SceneSpec)> {
    let spec = sample_scene(scene_seed, config)?;
    let out = render_gbuffer::<T>(&spec, resolution)?;
    let record = DatasetRecord {
        id,
        rgb: out.rgb,
        intrinsics: out.intrinsics.with_mask(profile.mask()),
        caption: caption(&spec),
        profile,
    };
    Ok((record, spec))
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub resolution: usize,
    pub split: String,
    pub scene: SceneConfig,
    pub previews: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            resolution: 64,
            split: "train".into(),
            scene: SceneConfig::default(),
            previews: false,
        }
    }
}

/// Writes `n` records of `profile` under `<out_root>/<split>/` and merges
/// their entries into `<out_root>/manifest.json`.
pub fn build_dataset(n: usize, seed: u64, out_root: &Path, profile: Profile, opts: &BuildOptions) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("{}-{:05}", profile.name(), i);
        let scene_seed = record_seed(seed, i as u64);
        let wrap = |e: Error| Error::Record { id: id.clone(), source: Box::new(e) };
        let (record, spec) = make_record::<f32>(id.clone(), scene_seed, profile, opts.resolution, &opts.scene).map_err(wrap)?;
        let dir = record_dir(out_root, &opts.split, &id);
        write_record(&dir, &record, Some(scene_seed), Some(spec.lighting.clone()), opts.previews).map_err(wrap)?;
        entries.push(ManifestEntry { id, seed: scene_seed, profile });
    }
    let mut manifest = if out_root.join("manifest.json").is_file() {
        read_manifest(out_root)?
    } else {
        Vec::new()
    };
    manifest.retain(|e| !entries.iter().any(|n| n.id == e.id));
    manifest.extend(entries.iter().cloned());
    manifest.sort_by(|a, b| a.id.cmp(&b.id));
    write_manifest(out_root, &manifest)?;
    Ok(entries)
}

/// Renders `n_frames` of a scene while the camera pans along x by `step` per frame.
pub fn render_pan<T: Scalar>(s: &SceneSpec, n_frames: usize, resolution: usize, step: f64) -> Result<Vec<RenderOutput<T>>> {
    (0..n_frames)
        .map(|f| {
            let mut shot = s.clone();
            shot.camera.pan[0] += step * f as f64;
            render_gbuffer(&shot, resolution)
        })
        .collect()
}
