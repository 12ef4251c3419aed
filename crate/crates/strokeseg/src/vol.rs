//! VOL files: a JSON sidecar `<name>.json` describing a little-endian raw
//! body `<name>.raw` stored x-fastest.
//!
//! ```json
//! {"dims":[nx,ny,nz],"spacing":[sx,sy,sz],"dtype":"f32le","kind":"normalized"}
//! ```
//!
//! Preprocessed volumes additionally carry `"crop_origin"`, the box they were
//! cut from in the source grid.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use strokeseg_core::preprocess::CropBox;
use strokeseg_core::volume::{voxel_count, Dims, IntensityKind, Mask, Volume, VoxelData};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f32le")]
    F32,
    #[serde(rename = "i16le")]
    I16,
    #[serde(rename = "u8le")]
    U8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::I16 => 2,
            DType::U8 => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Hu,
    Normalized,
    Mask,
}

/// Where a cropped volume sits inside its source grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropOrigin {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
    pub source_dims: Dims,
}

impl CropOrigin {
    pub fn new(bbox: CropBox, source_dims: Dims) -> Self {
        Self {
            lo: bbox.lo,
            hi: bbox.hi,
            source_dims,
        }
    }

    pub fn crop_box(&self) -> CropBox {
        CropBox {
            lo: self.lo,
            hi: self.hi,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub dtype: DType,
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_origin: Option<CropOrigin>,
}

/// `(sidecar, raw)` paths for `p`, which may name either file or the common
/// stem.
pub fn vol_paths(p: &Path) -> (PathBuf, PathBuf) {
    let stem = match p.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => p.with_extension(""),
        _ => p.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s: OsString = stem.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".json"), with(".raw"))
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let (json, _) = vol_paths(path);
    let text = fs::read_to_string(&json).map_err(Error::io(&json))?;
    let sc: Sidecar = serde_json::from_str(&text).map_err(|e| format_err(&json, e.to_string()))?;
    if sc.dims.contains(&0) {
        return Err(format_err(
            &json,
            format!("dims must be positive, got {:?}", sc.dims),
        ));
    }
    if sc.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(format_err(
            &json,
            format!("spacing must be positive, got {:?}", sc.spacing),
        ));
    }
    Ok(sc)
}

fn read_body(path: &Path, sc: &Sidecar) -> Result<Vec<u8>> {
    let (_, raw) = vol_paths(path);
    let bytes = fs::read(&raw).map_err(Error::io(&raw))?;
    let expected = voxel_count(sc.dims) * sc.dtype.size();
    if bytes.len() != expected {
        return Err(format_err(
            &raw,
            format!(
                "dims {:?} as {:?} need {expected} bytes, file has {}",
                sc.dims,
                sc.dtype,
                bytes.len()
            ),
        ));
    }
    Ok(bytes)
}

fn write_pair(path: &Path, sc: &Sidecar, body: &[u8]) -> Result<()> {
    let (json, raw) = vol_paths(path);
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut f = fs::File::create(&raw).map_err(Error::io(&raw))?;
    f.write_all(body).map_err(Error::io(&raw))?;
    let text = serde_json::to_string(sc)?;
    fs::write(&json, text + "\n").map_err(Error::io(&json))
}

pub fn load_volume_with_sidecar(path: &Path) -> Result<(Volume, Sidecar)> {
    let sc = read_sidecar(path)?;
    let kind = match sc.kind {
        Kind::Hu => IntensityKind::Hu,
        Kind::Normalized => IntensityKind::Normalized,
        Kind::Mask => return Err(format_err(path, "sidecar describes a mask, not a volume")),
    };
    let bytes = read_body(path, &sc)?;
    let data = match sc.dtype {
        DType::F32 => VoxelData::F32(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        DType::I16 => VoxelData::I16(
            bytes
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]))
                .collect(),
        ),
        DType::U8 => return Err(format_err(path, "volumes must be f32le or i16le")),
    };
    let vol = Volume::new(sc.dims, sc.spacing, data, kind)
        .map_err(|e| format_err(path, e.to_string()))?;
    Ok((vol, sc))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    Ok(load_volume_with_sidecar(path)?.0)
}

pub fn save_volume(vol: &Volume, path: &Path) -> Result<()> {
    save_volume_with_crop(vol, None, path)
}

pub fn save_volume_with_crop(vol: &Volume, crop: Option<CropOrigin>, path: &Path) -> Result<()> {
    let (dtype, body) = match vol.data() {
        VoxelData::F32(v) => (
            DType::F32,
            v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>(),
        ),
        VoxelData::I16(v) => (DType::I16, v.iter().flat_map(|x| x.to_le_bytes()).collect()),
    };
    let kind = match vol.kind() {
        IntensityKind::Hu => Kind::Hu,
        IntensityKind::Normalized => Kind::Normalized,
    };
    let sc = Sidecar {
        dims: vol.dims(),
        spacing: vol.spacing(),
        dtype,
        kind,
        crop_origin: crop,
    };
    write_pair(path, &sc, &body)
}

/// Loads a `u8le` mask; values other than 0 and 1 are rejected.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let sc = read_sidecar(path)?;
    if sc.kind != Kind::Mask || sc.dtype != DType::U8 {
        return Err(format_err(
            path,
            "masks must have kind \"mask\" and dtype \"u8le\"",
        ));
    }
    let bytes = read_body(path, &sc)?;
    Mask::new(sc.dims, bytes).map_err(|e| format_err(path, e.to_string()))
}

pub fn save_mask(
    mask: &Mask,
    spacing: [f64; 3],
    crop: Option<CropOrigin>,
    path: &Path,
) -> Result<()> {
    let sc = Sidecar {
        dims: mask.dims(),
        spacing,
        dtype: DType::U8,
        kind: Kind::Mask,
        crop_origin: crop,
    };
    write_pair(path, &sc, mask.data())
}
