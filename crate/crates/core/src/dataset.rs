//! On-disk dataset layout:
//! `<root>/<split>/<id>/{rgb,normal,albedo,roughness,metallicity,irradiance}.otns`
//! plus `meta.json`. Normals are stored encoded; absent channels are stored as zeros.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::imageio::{load_image, save_otns, save_png};
use crate::sceneforge::Lighting;
use crate::scalar::Scalar;
use crate::types::{
    decode_normal, encode_normal, Caption, Channel, ChannelMask, Colorspace, DatasetRecord, ImageTensor,
    IntrinsicSet, Profile,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordMeta {
    pub id: String,
    pub profile: Profile,
    pub mask: ChannelMask,
    pub caption: Caption,
    pub seed: Option<u64>,
    pub resolution: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lighting: Option<Lighting>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub profile: Profile,
}

pub type Manifest = Vec<ManifestEntry>;

pub fn record_dir(root: &Path, split: &str, id: &str) -> PathBuf {
    root.join(split).join(id)
}

pub fn channel_file(dir: &Path, c: Channel) -> PathBuf {
    dir.join(format!("{}.otns", c.name()))
}

/// Writes a record and its metadata; `previews` adds 8-bit PNGs next to the tensors.
pub fn write_record<T: Scalar>(
    dir: &Path,
    record: &DatasetRecord<T>,
    seed: Option<u64>,
    lighting: Option<Lighting>,
    previews: bool,
) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let x = &record.intrinsics;
    save_otns(record.rgb.data(), "rgb", dir.join("rgb.otns"))?;
    if previews {
        save_png(record.rgb.data(), dir.join("rgb.png"))?;
    }
    for c in Channel::ALL {
        let stored = storage_form(x, c)?;
        save_otns(&stored, c.name(), channel_file(dir, c))?;
        if previews && x.mask.get(c) {
            save_png(&stored, dir.join(format!("{}.png", c.name())))?;
        }
    }
    let (h, w) = x.dims();
    let meta = RecordMeta {
        id: record.id.clone(),
        profile: record.profile,
        mask: x.mask,
        caption: record.caption.clone(),
        seed,
        resolution: [h, w],
        lighting,
    };
    let p = dir.join("meta.json");
    fs::write(&p, serde_json::to_vec_pretty(&meta)?).at(&p)
}

/// Channel content as written to disk (encoded normals, zeros when absent).
pub fn storage_form<T: Scalar>(x: &IntrinsicSet<T>, c: Channel) -> Result<Array3<T>> {
    let a = x.channel(c);
    if !x.mask.get(c) {
        return Ok(Array3::zeros(a.dim()));
    }
    Ok(match c {
        Channel::Normal => encode_normal(a)?.into_data(),
        _ => a.clone(),
    })
}

pub fn read_meta(dir: &Path) -> Result<RecordMeta> {
    let p = dir.join("meta.json");
    let bytes = fs::read(&p).at(&p)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Loads the intrinsic channels of a record directory; `rgb.otns` is not needed.
pub fn read_intrinsics<T: Scalar>(dir: &Path) -> Result<(IntrinsicSet<T>, RecordMeta)> {
    let meta = read_meta(dir)?;
    let [h, w] = meta.resolution;
    let mut x = IntrinsicSet::zeros(h, w, meta.mask);
    for c in meta.mask.present() {
        let stored = load_image::<T>(channel_file(dir, c))?;
        if stored.dim() != (h, w, c.planes()) {
            return Err(Error::Shape(format!(
                "{}: {} has shape {:?}",
                dir.display(),
                c,
                stored.dim()
            )));
        }
        *x.channel_mut(c) = match c {
            Channel::Normal => decode_normal(&stored),
            _ => stored,
        };
    }
    Ok((x, meta))
}

pub fn read_record<T: Scalar>(dir: &Path) -> Result<(DatasetRecord<T>, RecordMeta)> {
    let (x, meta) = read_intrinsics(dir)?;
    let rgb = ImageTensor::new(load_image::<T>(dir.join("rgb.otns"))?, Colorspace::Linear)?;
    let record = DatasetRecord {
        id: meta.id.clone(),
        rgb,
        intrinsics: x,
        caption: meta.caption.clone(),
        profile: meta.profile,
    };
    Ok((record, meta))
}

/// Sorted record ids (subdirectories holding a `meta.json`).
pub fn list_ids(split_dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(split_dir).at(split_dir)? {
        let entry = entry.at(split_dir)?;
        if entry.path().join("meta.json").is_file() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads every record under `split_dir`, sorted by id.
pub fn read_split<T: Scalar>(split_dir: &Path) -> Result<Vec<DatasetRecord<T>>> {
    list_ids(split_dir)?
        .into_iter()
        .map(|id| {
            read_record(&split_dir.join(&id))
                .map(|(r, _)| r)
                .map_err(|e| Error::Record { id, source: Box::new(e) })
        })
        .collect()
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(root).at(root)?;
    let p = root.join("manifest.json");
    fs::write(&p, serde_json::to_vec_pretty(manifest)?).at(&p)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let p = root.join("manifest.json");
    Ok(serde_json::from_slice(&fs::read(&p).at(&p)?)?)
}
