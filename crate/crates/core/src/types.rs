//! Domain types shared by every module: images, intrinsic channel sets,
//! channel masks, task tokens and dataset records.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MIN_SIDE: usize = 8;
pub const MAX_CAPTION_CHARS: usize = 256;
pub const UNIT_NORM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Colorspace {
    Linear,
    UnitEncoded,
}

/// An H×W×C float image (C ∈ {1, 3}).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T> {
    data: Array3<T>,
    colorspace: Colorspace,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn new(data: Array3<T>, colorspace: Colorspace) -> Result<Self> {
        let img = Self { data, colorspace };
        let problems = img.violations();
        if problems.is_empty() {
            Ok(img)
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn into_data(self) -> Array3<T> {
        self.data
    }

    pub fn colorspace(&self) -> Colorspace {
        self.colorspace
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let (h, w, c) = self.data.dim();
        if h < MIN_SIDE || w < MIN_SIDE {
            out.push(format!("image {h}x{w} smaller than {MIN_SIDE}x{MIN_SIDE}"));
        }
        if c != 1 && c != 3 {
            out.push(format!("image has {c} channels, expected 1 or 3"));
        }
        if let Some(((i, j, k), _)) = self.data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            out.push(format!("non-finite value at ({i}, {j}, {k})"));
        }
        if self.colorspace == Colorspace::UnitEncoded {
            if let Some(((i, j, k), v)) = self
                .data
                .indexed_iter()
                .find(|(_, v)| **v < T::zero() || **v > T::one())
            {
                out.push(format!("unit-encoded value {v} at ({i}, {j}, {k}) outside [0, 1]"));
            }
        }
        out
    }
}

/// One of the five intrinsic channels. Doubles as the task token that selects
/// which channel an RGB→X call produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Normal,
    Albedo,
    Roughness,
    Metallicity,
    Irradiance,
}

pub type TaskToken = Channel;

impl Channel {
    /// Fixed slot order used by condition stacks and masks.
    pub const ALL: [Channel; 5] = [
        Channel::Normal,
        Channel::Albedo,
        Channel::Roughness,
        Channel::Metallicity,
        Channel::Irradiance,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Stored planes: 3 for vector/colour channels, 1 for scalar maps.
    pub fn planes(self) -> usize {
        match self {
            Channel::Roughness | Channel::Metallicity => 1,
            _ => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Normal => "normal",
            Channel::Albedo => "albedo",
            Channel::Roughness => "roughness",
            Channel::Metallicity => "metallicity",
            Channel::Irradiance => "irradiance",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Channel::Normal => "n",
            Channel::Albedo => "a",
            Channel::Roughness => "r",
            Channel::Metallicity => "m",
            Channel::Irradiance => "E",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Channel::ALL
            .into_iter()
            .find(|c| c.name() == s || c.short() == s)
            .ok_or_else(|| Error::Validation(format!("unknown channel '{s}'")))
    }
}

/// Availability flags for the five intrinsic channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ChannelMask {
    pub normal: bool,
    pub albedo: bool,
    pub roughness: bool,
    pub metallicity: bool,
    pub irradiance: bool,
}

impl ChannelMask {
    pub const FULL: ChannelMask = ChannelMask {
        normal: true,
        albedo: true,
        roughness: true,
        metallicity: true,
        irradiance: true,
    };
    pub const EMPTY: ChannelMask = ChannelMask {
        normal: false,
        albedo: false,
        roughness: false,
        metallicity: false,
        irradiance: false,
    };

    pub fn from_channels(channels: &[Channel]) -> Self {
        let mut m = Self::EMPTY;
        for &c in channels {
            m.set(c, true);
        }
        m
    }

    pub fn get(&self, c: Channel) -> bool {
        match c {
            Channel::Normal => self.normal,
            Channel::Albedo => self.albedo,
            Channel::Roughness => self.roughness,
            Channel::Metallicity => self.metallicity,
            Channel::Irradiance => self.irradiance,
        }
    }

    pub fn set(&mut self, c: Channel, present: bool) {
        match c {
            Channel::Normal => self.normal = present,
            Channel::Albedo => self.albedo = present,
            Channel::Roughness => self.roughness = present,
            Channel::Metallicity => self.metallicity = present,
            Channel::Irradiance => self.irradiance = present,
        }
    }

    pub fn present(&self) -> Vec<Channel> {
        Channel::ALL.into_iter().filter(|&c| self.get(c)).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.present().is_empty()
    }
}

/// Five per-pixel G-buffer channels. Normals are held as unit vectors in
/// memory; absent channels are all-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct IntrinsicSet<T> {
    pub normal: Array3<T>,
    pub albedo: Array3<T>,
    pub roughness: Array3<T>,
    pub metallicity: Array3<T>,
    pub irradiance: Array3<T>,
    pub mask: ChannelMask,
}

impl<T: Scalar> IntrinsicSet<T> {
    pub fn zeros(h: usize, w: usize, mask: ChannelMask) -> Self {
        Self {
            normal: Array3::zeros((h, w, 3)),
            albedo: Array3::zeros((h, w, 3)),
            roughness: Array3::zeros((h, w, 1)),
            metallicity: Array3::zeros((h, w, 1)),
            irradiance: Array3::zeros((h, w, 3)),
            mask,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        let (h, w, _) = self.albedo.dim();
        (h, w)
    }

    pub fn channel(&self, c: Channel) -> &Array3<T> {
        match c {
            Channel::Normal => &self.normal,
            Channel::Albedo => &self.albedo,
            Channel::Roughness => &self.roughness,
            Channel::Metallicity => &self.metallicity,
            Channel::Irradiance => &self.irradiance,
        }
    }

    pub fn channel_mut(&mut self, c: Channel) -> &mut Array3<T> {
        match c {
            Channel::Normal => &mut self.normal,
            Channel::Albedo => &mut self.albedo,
            Channel::Roughness => &mut self.roughness,
            Channel::Metallicity => &mut self.metallicity,
            Channel::Irradiance => &mut self.irradiance,
        }
    }

    /// Restricts to `mask`, zeroing every channel that becomes absent.
    pub fn with_mask(mut self, mask: ChannelMask) -> Self {
        for c in Channel::ALL {
            if !mask.get(c) {
                self.channel_mut(c).fill(T::zero());
            }
        }
        self.mask = mask;
        self
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let (h, w) = self.dims();
        for c in Channel::ALL {
            let a = self.channel(c);
            let (ch, cw, cp) = a.dim();
            if (ch, cw) != (h, w) || cp != c.planes() {
                out.push(Violation::Shape {
                    channel: c,
                    found: (ch, cw, cp),
                    expected: (h, w, c.planes()),
                });
                continue;
            }
            if let Some(((i, j, _), _)) = a.indexed_iter().find(|(_, v)| !v.is_finite()) {
                out.push(Violation::NonFinite { channel: c, pixel: (i, j) });
                continue;
            }
            if !self.mask.get(c) {
                if a.iter().any(|v| *v != T::zero()) {
                    out.push(Violation::AbsentNonZero(c));
                }
                continue;
            }
            match c {
                Channel::Normal => {
                    for ((i, j), len) in pixel_norms(a.view()).indexed_iter() {
                        if (len - 1.0).abs() > UNIT_NORM_TOL {
                            out.push(Violation::NotUnit { pixel: (i, j), length: *len });
                            break;
                        }
                    }
                }
                Channel::Albedo | Channel::Roughness | Channel::Metallicity => {
                    if let Some(((i, j, _), v)) =
                        a.indexed_iter().find(|(_, v)| **v < T::zero() || **v > T::one())
                    {
                        out.push(Violation::OutOfRange { channel: c, pixel: (i, j), value: v.as_f64() });
                    }
                }
                Channel::Irradiance => {
                    if let Some(((i, j, _), v)) = a.indexed_iter().find(|(_, v)| **v < T::zero()) {
                        out.push(Violation::OutOfRange { channel: c, pixel: (i, j), value: v.as_f64() });
                    }
                }
            }
        }
        out
    }
}

fn pixel_norms<T: Scalar>(a: ArrayView3<'_, T>) -> ndarray::Array2<f64> {
    a.map_axis(Axis(2), |v| v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt())
}

/// Free-text image description used to condition X→RGB.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Caption(String);

impl Caption {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.chars().count() > MAX_CAPTION_CHARS {
            return Err(Error::Validation(format!(
                "caption longer than {MAX_CAPTION_CHARS} characters"
            )));
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.trim().is_empty()
    }
}

impl fmt::Display for Caption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Dataset profile, which fixes the channel availability of its records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    IndoorLike,
    CityLike,
    Wild,
}

impl Profile {
    pub fn mask(self) -> ChannelMask {
        match self {
            Profile::IndoorLike => {
                ChannelMask::from_channels(&[Channel::Albedo, Channel::Normal, Channel::Irradiance])
            }
            Profile::CityLike => ChannelMask::from_channels(&[
                Channel::Albedo,
                Channel::Normal,
                Channel::Roughness,
                Channel::Metallicity,
            ]),
            Profile::Wild => ChannelMask::EMPTY,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::IndoorLike => "indoor-like",
            Profile::CityLike => "city-like",
            Profile::Wild => "wild",
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indoor-like" => Ok(Profile::IndoorLike),
            "city-like" => Ok(Profile::CityLike),
            "wild" => Ok(Profile::Wild),
            _ => Err(Error::Validation(format!("unknown profile '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord<T> {
    pub id: String,
    pub rgb: ImageTensor<T>,
    pub intrinsics: IntrinsicSet<T>,
    pub caption: Caption,
    pub profile: Profile,
}

/// One broken invariant found by [`validate_record`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Image(String),
    Shape {
        channel: Channel,
        found: (usize, usize, usize),
        expected: (usize, usize, usize),
    },
    NonFinite { channel: Channel, pixel: (usize, usize) },
    NotUnit { pixel: (usize, usize), length: f64 },
    OutOfRange { channel: Channel, pixel: (usize, usize), value: f64 },
    AbsentNonZero(Channel),
    ProfileMask { profile: Profile, mask: ChannelMask },
    RgbSize { rgb: (usize, usize), intrinsics: (usize, usize) },
    EmptyCaption,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Image(s) => write!(f, "rgb: {s}"),
            Violation::Shape { channel, found, expected } => {
                write!(f, "{channel}: shape {found:?}, expected {expected:?}")
            }
            Violation::NonFinite { channel, pixel } => write!(f, "{channel}: non-finite at {pixel:?}"),
            Violation::NotUnit { pixel, length } => {
                write!(f, "normal: length {length:.6} at pixel {pixel:?} is not unit")
            }
            Violation::OutOfRange { channel, pixel, value } => {
                write!(f, "{channel}: value {value} out of range at {pixel:?}")
            }
            Violation::AbsentNonZero(c) => write!(f, "{c}: absent channel is not all-zero"),
            Violation::ProfileMask { profile, mask } => {
                write!(f, "profile {} does not allow mask {:?}", profile.name(), mask.present())
            }
            Violation::RgbSize { rgb, intrinsics } => {
                write!(f, "rgb size {rgb:?} differs from intrinsics {intrinsics:?}")
            }
            Violation::EmptyCaption => f.write_str("caption is empty"),
        }
    }
}

/// Lists every violated record invariant; an empty list means the record is valid.
pub fn validate_record<T: Scalar>(r: &DatasetRecord<T>) -> Vec<Violation> {
    let mut out: Vec<Violation> = r.rgb.violations().into_iter().map(Violation::Image).collect();
    if r.rgb.dims().2 != 3 {
        out.push(Violation::Image("rgb must have 3 channels".into()));
    }
    if let Some(((i, j, _), v)) =
        r.rgb.data().indexed_iter().find(|(_, v)| **v < T::zero() || **v > T::one())
    {
        out.push(Violation::Image(format!("value {v} at ({i}, {j}) outside [0, 1]")));
    }
    let (h, w, _) = r.rgb.dims();
    if (h, w) != r.intrinsics.dims() {
        out.push(Violation::RgbSize { rgb: (h, w), intrinsics: r.intrinsics.dims() });
    }
    out.extend(r.intrinsics.violations());
    if r.intrinsics.mask != r.profile.mask() {
        out.push(Violation::ProfileMask { profile: r.profile, mask: r.intrinsics.mask });
    }
    if r.caption.is_empty() {
        out.push(Violation::EmptyCaption);
    }
    out
}

/// Maps unit normals to `(n + 1) / 2`.
///
/// Fails on the first pixel whose length is off unit by more than 1e-4.
pub fn encode_normal<T: Scalar>(n: &Array3<T>) -> Result<ImageTensor<T>> {
    if n.dim().2 != 3 {
        return Err(Error::Shape(format!("normal map has {} planes", n.dim().2)));
    }
    for ((i, j), len) in pixel_norms(n.view()).indexed_iter() {
        if (len - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Validation(format!(
                "normal at pixel ({i}, {j}) has length {len:.6}"
            )));
        }
    }
    let half = T::lit(0.5);
    let enc = n.mapv(|v| ((v + T::one()) * half).max(T::zero()).min(T::one()));
    ImageTensor::new(enc, Colorspace::UnitEncoded)
}

/// Inverse of [`encode_normal`]: `normalize(2·img − 1)`, with zero-length
/// vectors mapped to `(0, 0, 1)`.
///
/// Computed in f64 and rounded once, so every precision decodes the same
/// stored bytes to the nearest representable normal.
pub fn decode_normal<T: Scalar>(img: &Array3<T>) -> Array3<T> {
    let mut out = img.mapv(|v| 2.0 * v.as_f64() - 1.0);
    normalize_pixels(&mut out);
    out.mapv(T::lit)
}

/// Normalizes each pixel vector in place; degenerate vectors become `(0, 0, 1)`.
pub fn normalize_pixels<T: Scalar>(a: &mut Array3<T>) {
    for mut px in a.lanes_mut(Axis(2)) {
        let len = px.iter().map(|&v| v * v).sum::<T>().sqrt();
        if len > T::lit(1e-12) {
            px.mapv_inplace(|v| v / len);
        } else {
            px.fill(T::zero());
            px[2] = T::one();
        }
    }
}

/// Repeats a single-plane map to three planes.
pub fn expand_planes<T: Scalar>(a: &Array3<T>) -> Array3<T> {
    let (h, w, c) = a.dim();
    if c == 3 {
        return a.clone();
    }
    let mut out = Array3::zeros((h, w, 3));
    Zip::from(out.lanes_mut(Axis(2)))
        .and(a.lanes(Axis(2)))
        .for_each(|mut o, i| o.fill(i[0]));
    out
}

/// Averages three planes down to one.
pub fn collapse_planes<T: Scalar>(a: &Array3<T>) -> Array3<T> {
    let n = T::lit(a.dim().2 as f64);
    a.sum_axis(Axis(2)).mapv(|v| v / n).insert_axis(Axis(2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;
    use proptest::prelude::*;

    #[test]
    fn encode_axis_vectors() {
        let n = arr3(&[[[0.0f64, 0.0, 1.0], [-1.0, 0.0, 0.0]]]);
        // 1x2 images are below the minimum size, so check the mapping directly.
        let enc = n.mapv(|v| (v + 1.0) * 0.5);
        assert_eq!(enc, arr3(&[[[0.5, 0.5, 1.0], [0.0, 0.5, 0.5]]]));
        let big = Array3::from_shape_fn((8, 8, 3), |(_, _, k)| if k == 2 { 1.0f64 } else { 0.0 });
        let e = encode_normal(&big).unwrap();
        assert!(e.data().lanes(Axis(2)).into_iter().all(|p| p.to_vec() == vec![0.5, 0.5, 1.0]));
    }

    #[test]
    fn decode_examples() {
        let img = arr3(&[[[0.5f64, 0.5, 1.0], [0.5, 0.5, 0.5], [1.0, 0.5, 0.5]]]);
        let d = decode_normal(&img);
        assert_eq!(d, arr3(&[[[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]]));
    }

    #[test]
    fn encode_rejects_non_unit_and_names_pixel() {
        let mut n = Array3::from_shape_fn((8, 8, 3), |(_, _, k)| if k == 2 { 1.0f64 } else { 0.0 });
        n[[3, 5, 2]] = 0.5;
        let err = encode_normal(&n).unwrap_err().to_string();
        assert!(err.contains("(3, 5)"), "{err}");
    }

    fn unit_map(h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((h, w, 3), |(_, _, k)| if k == 2 { 1.0 } else { 0.0 })
    }

    fn indoor_record() -> DatasetRecord<f64> {
        let mut x = IntrinsicSet::zeros(8, 8, Profile::IndoorLike.mask());
        x.normal = unit_map(8, 8);
        x.albedo.fill(0.5);
        x.irradiance.fill(1.2);
        DatasetRecord {
            id: "r0".into(),
            rgb: ImageTensor::new(Array3::from_elem((8, 8, 3), 0.3), Colorspace::Linear).unwrap(),
            intrinsics: x,
            caption: Caption::new("a gray plane under 1 lights").unwrap(),
            profile: Profile::IndoorLike,
        }
    }

    #[test]
    fn valid_indoor_record_has_empty_report() {
        assert!(validate_record(&indoor_record()).is_empty());
    }

    #[test]
    fn roughness_present_on_indoor_is_mask_mismatch() {
        let mut r = indoor_record();
        r.intrinsics.mask.roughness = true;
        r.intrinsics.roughness.fill(0.5);
        let v = validate_record(&r);
        assert!(v.iter().any(|v| matches!(v, Violation::ProfileMask { .. })), "{v:?}");
    }

    #[test]
    fn short_normal_is_unit_violation() {
        let mut r = indoor_record();
        r.intrinsics.normal[[2, 2, 2]] = 0.5;
        let v = validate_record(&r);
        assert!(v.iter().any(|v| matches!(v, Violation::NotUnit { pixel: (2, 2), .. })), "{v:?}");
    }

    #[test]
    fn absent_channel_must_be_zero() {
        let mut r = indoor_record();
        r.intrinsics.metallicity[[0, 0, 0]] = 0.1;
        assert!(validate_record(&r).contains(&Violation::AbsentNonZero(Channel::Metallicity)));
    }

    #[test]
    fn image_tensor_invariants() {
        assert!(ImageTensor::new(Array3::<f32>::zeros((7, 8, 3)), Colorspace::Linear).is_err());
        assert!(ImageTensor::new(Array3::<f32>::zeros((8, 8, 2)), Colorspace::Linear).is_err());
        assert!(ImageTensor::new(Array3::<f32>::from_elem((8, 8, 1), 1.5), Colorspace::UnitEncoded).is_err());
        assert!(ImageTensor::new(Array3::<f32>::from_elem((8, 8, 1), 1.5), Colorspace::Linear).is_ok());
    }

    #[test]
    fn caption_length_limit() {
        assert!(Caption::new("x".repeat(256)).is_ok());
        assert!(Caption::new("x".repeat(257)).is_err());
    }

    proptest! {
        #[test]
        fn normal_codec_round_trip(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            let len = (x * x + y * y + z * z).sqrt();
            prop_assume!(len > 1e-3);
            let n = Array3::from_shape_fn((8, 8, 3), |(_, _, k)| [x, y, z][k] / len);
            let back = decode_normal(encode_normal(&n).unwrap().data());
            for (a, b) in back.iter().zip(n.iter()) {
                prop_assert!((a - b).abs() <= 1e-5);
            }
        }
    }
}
