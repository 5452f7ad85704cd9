//! 8-bit PNG previews and PNG frame loading. PNGs are never the numeric
//! source of truth; OTNS files are.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::otns::{read_tensor, write_tensor, NamedTensor};
use crate::scalar::Scalar;

fn to_u8<T: Scalar>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an H×W×{1,3} array as a PNG, clamping to [0, 1].
pub fn save_png<T: Scalar>(a: &Array3<T>, path: impl AsRef<Path>) -> Result<()> {
    let (h, w, c) = a.dim();
    match c {
        1 => {
            let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                Luma([to_u8(a[[y as usize, x as usize, 0]])])
            });
            img.save(path.as_ref())?;
        }
        3 => {
            let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                let (y, x) = (y as usize, x as usize);
                Rgb([to_u8(a[[y, x, 0]]), to_u8(a[[y, x, 1]]), to_u8(a[[y, x, 2]])])
            });
            img.save(path.as_ref())?;
        }
        _ => return Err(Error::Shape(format!("cannot preview {c}-plane image"))),
    }
    Ok(())
}

/// Loads a PNG as an H×W×3 array in [0, 1].
pub fn load_png<T: Scalar>(path: impl AsRef<Path>) -> Result<Array3<T>> {
    let img = image::open(path.as_ref())?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, k)| {
        T::lit(img.get_pixel(x as u32, y as u32)[k] as f64 / 255.0)
    }))
}

/// Loads an H×W×C array from an `.otns` or `.png` file.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Array3<T>> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => load_png(path),
        _ => {
            let t = read_tensor(path)?;
            if t.dims.len() != 3 {
                return Err(Error::Shape(format!("{}: expected 3 dims, got {:?}", path.display(), t.dims)));
            }
            Ok(t.to_array::<T>().into_dimensionality().expect("3 dims checked"))
        }
    }
}

pub fn save_otns<T: Scalar>(a: &Array3<T>, name: &str, path: impl AsRef<Path>) -> Result<()> {
    write_tensor(&NamedTensor::from_array(name, a.view()), path)
}
