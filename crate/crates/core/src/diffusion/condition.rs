use ndarray::{concatenate, Array3, Axis};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{Channel, ChannelMask, IntrinsicSet};

/// Maps between pixel space and the model's latent space.
///
/// `Identity` is the default; `AvgPool` downsamples by `factor` with area
/// averaging and decodes with nearest upsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Codec {
    Identity,
    AvgPool { factor: usize },
}

impl Default for Codec {
    fn default() -> Self {
        Codec::Identity
    }
}

impl Codec {
    pub fn factor(&self) -> usize {
        match *self {
            Codec::Identity => 1,
            Codec::AvgPool { factor } => factor,
        }
    }

    pub fn latent_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = self.factor();
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!("{h}x{w} not divisible by codec factor {f}")));
        }
        Ok((h / f, w / f))
    }

    pub fn encode<T: Scalar>(&self, x: &Array3<T>) -> Result<Array3<T>> {
        match *self {
            Codec::Identity => Ok(x.clone()),
            Codec::AvgPool { factor } => area_downsample(x, factor),
        }
    }

    pub fn decode<T: Scalar>(&self, z: &Array3<T>) -> Array3<T> {
        match *self {
            Codec::Identity => z.clone(),
            Codec::AvgPool { factor } => nearest_upsample(z, factor),
        }
    }

    /// The irradiance path: resized straight to latent resolution instead of
    /// going through the full encoder.
    pub fn downsample_direct<T: Scalar>(&self, x: &Array3<T>) -> Result<Array3<T>> {
        area_downsample(x, self.factor())
    }

    /// Adjoint of [`Codec::encode`] / [`Codec::downsample_direct`].
    pub fn encode_backward<T: Scalar>(&self, g: &Array3<T>) -> Array3<T> {
        let f = self.factor();
        if f == 1 {
            return g.clone();
        }
        let scale = T::lit(1.0 / (f * f) as f64);
        nearest_upsample(g, f).mapv(|v| v * scale)
    }

    /// Adjoint of [`Codec::decode`].
    pub fn decode_backward<T: Scalar>(&self, g: &Array3<T>) -> Array3<T> {
        let f = self.factor();
        if f == 1 {
            return g.clone();
        }
        let scale = T::lit((f * f) as f64);
        area_downsample(g, f).expect("decoded gradient divisible by factor").mapv(|v| v * scale)
    }
}

pub fn area_downsample<T: Scalar>(x: &Array3<T>, f: usize) -> Result<Array3<T>> {
    let (h, w, c) = x.dim();
    if f == 1 {
        return Ok(x.clone());
    }
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::Shape(format!("{h}x{w} not divisible by {f}")));
    }
    let inv = T::lit(1.0 / (f * f) as f64);
    let mut out = Array3::zeros((h / f, w / f, c));
    for ((i, j, k), v) in x.indexed_iter() {
        out[[i / f, j / f, k]] = out[[i / f, j / f, k]] + *v * inv;
    }
    Ok(out)
}

pub fn nearest_upsample<T: Scalar>(z: &Array3<T>, f: usize) -> Array3<T> {
    let (h, w, c) = z.dim();
    Array3::from_shape_fn((h * f, w * f, c), |(i, j, k)| z[[i / f, j / f, k]])
}

/// Conditioning input for one denoiser call, in latent space.
///
/// RGB→X carries the image slot only. X→RGB carries the five channel slots in
/// the fixed order n, a, r, m, E (3 + 3 + 1 + 1 + 3 planes); zeroed slots are
/// exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionStack<T> {
    image: Option<Array3<T>>,
    slots: Vec<Array3<T>>,
    active: ChannelMask,
}

impl<T: Scalar> ConditionStack<T> {
    pub fn from_image(image: &Array3<T>, codec: &Codec) -> Result<Self> {
        if image.dim().2 != 3 {
            return Err(Error::Shape(format!("conditioning image has {} planes", image.dim().2)));
        }
        Ok(Self { image: Some(codec.encode(image)?), slots: Vec::new(), active: ChannelMask::EMPTY })
    }

    /// Builds an X→RGB stack from already-encoded slot contents (encoded
    /// normals, 1-plane roughness/metallicity); inactive slots are zeroed.
    pub fn from_encoded_slots(slots: [Array3<T>; 5], active: ChannelMask) -> Result<Self> {
        let (h, w, _) = slots[0].dim();
        let mut out = Vec::with_capacity(5);
        for (c, mut s) in Channel::ALL.into_iter().zip(slots) {
            if s.dim() != (h, w, c.planes()) {
                return Err(Error::Shape(format!("{c} slot has shape {:?}", s.dim())));
            }
            if !active.get(c) {
                s.fill(T::zero());
            }
            out.push(s);
        }
        Ok(Self { image: None, slots: out, active })
    }

    pub fn is_image(&self) -> bool {
        self.image.is_some()
    }

    pub fn active(&self) -> ChannelMask {
        self.active
    }

    pub fn slot(&self, c: Channel) -> Option<&Array3<T>> {
        self.slots.get(c.index())
    }

    pub fn image(&self) -> Option<&Array3<T>> {
        self.image.as_ref()
    }

    pub fn dims(&self) -> (usize, usize) {
        let a = self.image.as_ref().unwrap_or_else(|| &self.slots[0]);
        let (h, w, _) = a.dim();
        (h, w)
    }

    /// All slots concatenated along the plane axis.
    pub fn planes(&self) -> Array3<T> {
        match &self.image {
            Some(img) => img.clone(),
            None => {
                let views: Vec<_> = self.slots.iter().map(|s| s.view()).collect();
                concatenate(Axis(2), &views).expect("slots share spatial dims")
            }
        }
    }

    pub fn num_planes(&self) -> usize {
        match &self.image {
            Some(img) => img.dim().2,
            None => self.slots.iter().map(|s| s.dim().2).sum(),
        }
    }
}

/// Plane offset of each X→RGB slot inside [`ConditionStack::planes`].
pub fn slot_offset(c: Channel) -> usize {
    Channel::ALL[..c.index()].iter().map(|c| c.planes()).sum()
}

pub const X2RGB_COND_PLANES: usize = 11;
pub const RGB2X_COND_PLANES: usize = 3;

/// Slot content for channel `c` before encoding: normals mapped to `(n+1)/2`.
pub fn encode_slot<T: Scalar>(x: &IntrinsicSet<T>, c: Channel) -> Array3<T> {
    let a = x.channel(c);
    match c {
        Channel::Normal => {
            let half = T::lit(0.5);
            a.mapv(|v| (v + T::one()) * half)
        }
        _ => a.clone(),
    }
}

/// Builds the X→RGB condition with channel dropout.
///
/// A slot is populated only if the channel is present in both `x.mask` and
/// `mask` and survives dropout (kept with probability `1 − dropout_p`). One
/// uniform draw is consumed per slot regardless, so the RNG stream does not
/// depend on the mask. Irradiance takes the codec's direct low-resolution path.
pub fn assemble_condition<T: Scalar, R: Rng + ?Sized>(
    x: &IntrinsicSet<T>,
    mask: ChannelMask,
    dropout_p: f64,
    rng: &mut R,
    codec: &Codec,
) -> Result<ConditionStack<T>> {
    if !(0.0..=1.0).contains(&dropout_p) {
        return Err(Error::Config(format!("dropout_p {dropout_p} outside [0, 1]")));
    }
    let mut active = ChannelMask::EMPTY;
    let mut slots: Vec<Array3<T>> = Vec::with_capacity(5);
    for c in Channel::ALL {
        let keep = rng.random::<f64>() >= dropout_p;
        let present = x.mask.get(c) && mask.get(c) && keep;
        active.set(c, present);
        let content = encode_slot(x, c);
        let encoded = match c {
            Channel::Irradiance => codec.downsample_direct(&content)?,
            _ => codec.encode(&content)?,
        };
        slots.push(encoded);
    }
    let slots: [Array3<T>; 5] = slots.try_into().expect("five slots");
    ConditionStack::from_encoded_slots(slots, active)
}

/// [`assemble_condition`] without dropout: every channel in both `x.mask`
/// and `mask` is populated.
pub fn full_condition<T: Scalar>(x: &IntrinsicSet<T>, mask: ChannelMask, codec: &Codec) -> Result<ConditionStack<T>> {
    assemble_condition(x, mask, 0.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0), codec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Profile;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn full_set(h: usize, w: usize) -> IntrinsicSet<f64> {
        let mut x = IntrinsicSet::zeros(h, w, ChannelMask::FULL);
        x.normal.fill(0.0);
        x.normal.index_axis_mut(Axis(2), 2).fill(1.0);
        x.albedo.fill(0.4);
        x.roughness.fill(0.6);
        x.metallicity.fill(0.2);
        x.irradiance = Array3::from_shape_fn((h, w, 3), |(i, j, k)| 1.0 + (i * w + j + k) as f64 * 0.01);
        x
    }

    #[test]
    fn no_dropout_full_mask_populates_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = assemble_condition(&full_set(8, 8), ChannelMask::FULL, 0.0, &mut rng, &Codec::Identity).unwrap();
        assert_eq!(s.active(), ChannelMask::FULL);
        assert_eq!(s.num_planes(), X2RGB_COND_PLANES);
        for c in Channel::ALL {
            assert!(s.slot(c).unwrap().iter().any(|v| *v != 0.0), "{c}");
        }
        let planes = s.planes();
        assert_eq!(planes[[0, 0, slot_offset(Channel::Normal) + 2]], 1.0);
        assert_eq!(planes[[0, 0, slot_offset(Channel::Roughness)]], 0.6);
    }

    #[test]
    fn full_dropout_zeroes_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = assemble_condition(&full_set(8, 8), ChannelMask::FULL, 1.0, &mut rng, &Codec::Identity).unwrap();
        assert!(s.planes().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn indoor_mask_zeroes_r_and_m() {
        let x = full_set(8, 8).with_mask(Profile::IndoorLike.mask());
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = assemble_condition(&x, ChannelMask::FULL, 0.3, &mut rng, &Codec::Identity).unwrap();
            assert!(s.slot(Channel::Roughness).unwrap().iter().all(|v| *v == 0.0));
            assert!(s.slot(Channel::Metallicity).unwrap().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn dropout_marginals() {
        let x = full_set(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut dropped = [0usize; 5];
        let n = 10_000;
        for _ in 0..n {
            let s = assemble_condition(&x, ChannelMask::FULL, 0.3, &mut rng, &Codec::Identity).unwrap();
            for c in Channel::ALL {
                if !s.active().get(c) {
                    dropped[c.index()] += 1;
                }
            }
        }
        for d in dropped {
            let freq = d as f64 / n as f64;
            assert!((freq - 0.3).abs() <= 0.02, "{freq}");
        }
    }

    #[test]
    fn irradiance_information_is_at_latent_resolution() {
        let codec = Codec::AvgPool { factor: 4 };
        let a = full_set(16, 16);
        let mut b = a.clone();
        // Perturb E within each 4x4 block while keeping block means fixed.
        for i in (0..16).step_by(4) {
            for j in (0..16).step_by(4) {
                for k in 0..3 {
                    b.irradiance[[i, j, k]] += 0.3;
                    b.irradiance[[i + 1, j + 2, k]] -= 0.3;
                }
            }
        }
        assert_ne!(a.irradiance, b.irradiance);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let sa = assemble_condition(&a, ChannelMask::FULL, 0.0, &mut r1, &codec).unwrap();
        let sb = assemble_condition(&b, ChannelMask::FULL, 0.0, &mut r2, &codec).unwrap();
        let (pa, pb) = (sa.planes(), sb.planes());
        assert_eq!(sa.dims(), (4, 4));
        for (x, y) in pa.iter().zip(pb.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn codec_round_trip_and_adjoints() {
        let x = Array3::from_shape_fn((8, 8, 3), |(i, j, k)| (i * 31 + j * 7 + k) as f64 * 0.01);
        assert_eq!(Codec::Identity.decode(&Codec::Identity.encode(&x).unwrap()), x);
        let c = Codec::AvgPool { factor: 2 };
        let z = c.encode(&x).unwrap();
        let g = Array3::from_shape_fn(z.dim(), |(i, j, k)| (i + 2 * j + 3 * k) as f64);
        // <encode(x), g> == <x, encode_backward(g)>
        let lhs: f64 = (&z * &g).sum();
        let rhs: f64 = (&x * &c.encode_backward(&g)).sum();
        assert!((lhs - rhs).abs() < 1e-9);
        let y = Array3::from_shape_fn((8, 8, 3), |(i, j, k)| ((i + j + k) % 5) as f64);
        let lhs: f64 = (&c.decode(&z) * &y).sum();
        let rhs: f64 = (&z * &c.decode_backward(&y)).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
