//! CT pre-processing: HU windowing, per-slice skull/coil removal, intensity
//! normalization and cropping to the brain bounding box.

pub mod components;

use alloc::{format, vec, vec::Vec};

use serde::{Deserialize, Serialize};

pub use components::Connectivity;

use crate::autograd::conv::run_tasks;
use crate::error::{Error, Result};
use crate::volume::{validate_pair, voxel_count, Dims, IntensityKind, Mask, Volume, VoxelData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub hu_lo: f64,
    pub hu_hi: f64,
    /// Z-score brain voxels before min-max normalization.
    pub standardize_first: bool,
    pub connectivity: Connectivity,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            hu_lo: 0.0,
            hu_hi: 80.0,
            standardize_first: true,
            connectivity: Connectivity::Eight,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.hu_lo < self.hu_hi) {
            return Err(Error::Config(format!(
                "hu_lo {} must be below hu_hi {}",
                self.hu_lo, self.hu_hi
            )));
        }
        Ok(())
    }
}

/// Axis-aligned box `[lo, hi)` in source voxel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl CropBox {
    pub fn dims(&self) -> Dims {
        [
            self.hi[0] - self.lo[0],
            self.hi[1] - self.lo[1],
            self.hi[2] - self.lo[2],
        ]
    }

    pub fn full(dims: Dims) -> Self {
        Self {
            lo: [0; 3],
            hi: dims,
        }
    }

    pub fn crop<T: Copy>(&self, src: &[T], dims: Dims) -> Vec<T> {
        let [cx, cy, cz] = self.dims();
        let mut out = Vec::with_capacity(cx * cy * cz);
        for z in self.lo[2]..self.hi[2] {
            for y in self.lo[1]..self.hi[1] {
                let row = (z * dims[1] + y) * dims[0];
                out.extend_from_slice(&src[row + self.lo[0]..row + self.hi[0]]);
            }
        }
        out
    }

    /// Places cropped data back into a zero-filled buffer of `dims`.
    pub fn uncrop<T: Copy + Default>(&self, cropped: &[T], dims: Dims) -> Vec<T> {
        let [cx, cy, _] = self.dims();
        let mut out = vec![T::default(); voxel_count(dims)];
        for (zi, z) in (self.lo[2]..self.hi[2]).enumerate() {
            for (yi, y) in (self.lo[1]..self.hi[1]).enumerate() {
                let src = (zi * cy + yi) * cx;
                let dst = (z * dims[1] + y) * dims[0] + self.lo[0];
                out[dst..dst + cx].copy_from_slice(&cropped[src..src + cx]);
            }
        }
        out
    }
}

fn with_data(vol: &Volume, data: Vec<f32>, kind: IntensityKind) -> Result<Volume> {
    Volume::new(vol.dims(), vol.spacing(), VoxelData::F32(data), kind)
}

/// Clamps every voxel into `[hu_lo, hu_hi]`.
pub fn hu_window(vol: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    if vol.kind() != IntensityKind::Hu {
        return Err(Error::NotHu);
    }
    cfg.validate()?;
    let (lo, hi) = (cfg.hu_lo as f32, cfg.hu_hi as f32);
    let data = vol.to_f32().into_iter().map(|v| v.clamp(lo, hi)).collect();
    with_data(vol, data, IntensityKind::Hu)
}

/// Per axial slice: keep the largest foreground component, zero voxels at or
/// above `hu_hi` (skull after windowing), then keep the largest remaining
/// component. Removed voxels become exactly 0.
pub fn strip_skull(vol: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    cfg.validate()?;
    let [nx, ny, nz] = vol.dims();
    let plane = nx * ny;
    let src = vol.to_f32();
    let (lo, hi) = (cfg.hu_lo as f32, cfg.hu_hi as f32);
    let conn = cfg.connectivity;
    let slices = run_tasks(nz, |z| {
        let mut s = src[z * plane..(z + 1) * plane].to_vec();
        let fg: Vec<bool> = s.iter().map(|v| *v > lo).collect();
        let keep = components::largest_component(&fg, nx, ny, conn);
        for (v, k) in s.iter_mut().zip(&keep) {
            if !k || *v >= hi {
                *v = 0.0;
            }
        }
        let fg: Vec<bool> = s.iter().map(|v| *v > lo).collect();
        let keep = components::largest_component(&fg, nx, ny, conn);
        for (v, k) in s.iter_mut().zip(keep) {
            if !k {
                *v = 0.0;
            }
        }
        s
    });
    with_data(vol, slices.concat(), vol.kind())
}

/// `(X - X_min) / (X_max - X_min)` over the whole volume. A constant volume
/// maps to all zeros (with a warning).
pub fn minmax_normalize(vol: &Volume) -> Result<Volume> {
    let data = vol.to_f32();
    let (mn, mx) = data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| {
            (a.min(*v), b.max(*v))
        });
    if !(mx > mn) {
        log::warn!("event=minmax_degenerate value={mn} voxels={}", data.len());
        return with_data(vol, vec![0.0; data.len()], IntensityKind::Normalized);
    }
    let (mn, range) = (mn as f64, mx as f64 - mn as f64);
    let out = data
        .iter()
        .map(|v| (((*v as f64) - mn) / range).clamp(0.0, 1.0) as f32)
        .collect();
    with_data(vol, out, IntensityKind::Normalized)
}

/// Z-score over brain voxels (value != 0) with population statistics;
/// non-brain voxels stay 0.
pub fn zscore_brain(vol: &Volume) -> Result<Volume> {
    let data = vol.to_f32();
    let brain: Vec<f64> = data
        .iter()
        .filter(|v| **v != 0.0)
        .map(|v| *v as f64)
        .collect();
    if brain.len() < 2 {
        return Err(Error::TooFewBrainVoxels(brain.len()));
    }
    let n = brain.len() as f64;
    let mean = brain.iter().sum::<f64>() / n;
    let var = brain.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = libm::sqrt(var);
    if !(sd > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let out = data
        .iter()
        .map(|v| {
            if *v != 0.0 {
                ((*v as f64 - mean) / sd) as f32
            } else {
                0.0
            }
        })
        .collect();
    with_data(vol, out, vol.kind())
}

/// Tight bounding box of non-zero voxels.
pub fn nonzero_box(data: &[f32], dims: Dims) -> Result<CropBox> {
    let mut lo = dims;
    let mut hi = [0usize; 3];
    let mut i = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if data[i] != 0.0 {
                    for (a, c) in [x, y, z].into_iter().enumerate() {
                        lo[a] = lo[a].min(c);
                        hi[a] = hi[a].max(c + 1);
                    }
                }
                i += 1;
            }
        }
    }
    if hi[0] == 0 {
        return Err(Error::EmptyVolume);
    }
    Ok(CropBox { lo, hi })
}

/// Crops `vol` and `mask` identically to `bbox`.
pub fn apply_crop(vol: &Volume, mask: &Mask, bbox: &CropBox) -> Result<(Volume, Mask)> {
    if vol.dims() != mask.dims() {
        return Err(Error::Dims(vol.dims(), mask.dims()));
    }
    let dims = vol.dims();
    let data = match vol.data() {
        VoxelData::F32(v) => VoxelData::F32(bbox.crop(v, dims)),
        VoxelData::I16(v) => VoxelData::I16(bbox.crop(v, dims)),
    };
    let v = Volume::new(bbox.dims(), vol.spacing(), data, vol.kind())?;
    let m = Mask::from_raw(bbox.dims(), bbox.crop(mask.data(), dims))?;
    Ok((v, m))
}

/// Crops both to the bounding box of `vol`'s non-zero voxels.
pub fn crop_nonzero(vol: &Volume, mask: &Mask) -> Result<(Volume, Mask, CropBox)> {
    if vol.dims() != mask.dims() {
        return Err(Error::Dims(vol.dims(), mask.dims()));
    }
    let bbox = nonzero_box(&vol.to_f32(), vol.dims())?;
    let (v, m) = apply_crop(vol, mask, &bbox)?;
    Ok((v, m, bbox))
}

/// Window, strip, (z-score,) min-max normalize, crop.
///
/// In the standardized variant the whole-volume min-max can lift the
/// background off zero, so non-brain voxels are reset to 0 afterwards. The
/// crop box is the brain bounding box of the stripped volume.
pub fn run_pipeline(
    vol: &Volume,
    mask: &Mask,
    cfg: &PreprocessConfig,
) -> Result<(Volume, Mask, CropBox)> {
    validate_pair(vol, mask)?;
    cfg.validate()?;
    let windowed = hu_window(vol, cfg)?;
    let stripped = strip_skull(&windowed, cfg)?;
    let brain: Vec<bool> = stripped.to_f32().iter().map(|v| *v != 0.0).collect();
    let normalized = if cfg.standardize_first {
        let z = zscore_brain(&stripped)?;
        let n = minmax_normalize(&z)?;
        let data = n
            .to_f32()
            .into_iter()
            .zip(&brain)
            .map(|(v, b)| if *b { v } else { 0.0 })
            .collect();
        with_data(&n, data, IntensityKind::Normalized)?
    } else {
        minmax_normalize(&stripped)?
    };
    let bbox = nonzero_box(&stripped.to_f32(), stripped.dims())?;
    let (v, m) = apply_crop(&normalized, mask, &bbox)?;
    Ok((v, m, bbox))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hu(dims: Dims, data: Vec<f32>) -> Volume {
        Volume::from_f32(dims, [1.0; 3], data, IntensityKind::Hu).unwrap()
    }

    #[test]
    fn window_clamps() {
        let v = hu([3, 1, 1], vec![-10.0, 40.0, 1000.0]);
        let w = hu_window(&v, &PreprocessConfig::default()).unwrap();
        assert_eq!(w.to_f32(), vec![0.0, 40.0, 80.0]);
        let c = hu([2, 2, 1], vec![500.0; 4]);
        assert_eq!(
            hu_window(&c, &PreprocessConfig::default())
                .unwrap()
                .to_f32(),
            vec![80.0; 4]
        );
    }

    #[test]
    fn window_rejects_normalized() {
        let v =
            Volume::from_f32([1, 1, 1], [1.0; 3], vec![0.5], IntensityKind::Normalized).unwrap();
        assert_eq!(
            hu_window(&v, &PreprocessConfig::default()),
            Err(Error::NotHu)
        );
    }

    #[test]
    fn window_works_on_i16() {
        let v = Volume::new(
            [3, 1, 1],
            [1.0; 3],
            VoxelData::I16(vec![-1000, 30, 900]),
            IntensityKind::Hu,
        )
        .unwrap();
        assert_eq!(
            hu_window(&v, &PreprocessConfig::default())
                .unwrap()
                .to_f32(),
            vec![0.0, 30.0, 80.0]
        );
    }

    #[test]
    fn minmax_examples() {
        let v = hu([3, 1, 1], vec![0.0, 40.0, 80.0]);
        assert_eq!(minmax_normalize(&v).unwrap().to_f32(), vec![0.0, 0.5, 1.0]);
        let v = hu([3, 1, 1], vec![10.0, 20.0, 30.0]);
        assert_eq!(minmax_normalize(&v).unwrap().to_f32(), vec![0.0, 0.5, 1.0]);
        let c = minmax_normalize(&hu([2, 1, 1], vec![7.0, 7.0])).unwrap();
        assert_eq!(c.to_f32(), vec![0.0, 0.0]);
        assert_eq!(c.kind(), IntensityKind::Normalized);
    }

    #[test]
    fn zscore_examples() {
        let v = hu([5, 1, 1], vec![0.0, 1.0, 2.0, 3.0, 0.0]);
        let z = zscore_brain(&v).unwrap().to_f32();
        let expected = [0.0, -1.22474, 0.0, 1.22474, 0.0];
        for (a, b) in z.iter().zip(expected) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        assert_eq!(
            zscore_brain(&hu([3, 1, 1], vec![4.0, 4.0, 0.0])),
            Err(Error::ZeroVariance)
        );
        assert_eq!(
            zscore_brain(&hu([3, 1, 1], vec![4.0, 0.0, 0.0])),
            Err(Error::TooFewBrainVoxels(1))
        );
    }

    #[test]
    fn crop_examples() {
        let dims = [8, 6, 3];
        let mut data = vec![0.0; voxel_count(dims)];
        for z in 0..=1 {
            for y in 3..=4 {
                for x in 2..=5 {
                    data[crate::volume::linear_index(dims, x, y, z)] = 1.0;
                }
            }
        }
        let v = hu(dims, data);
        let (c, m, b) = crop_nonzero(&v, &Mask::zeros(dims)).unwrap();
        assert_eq!(c.dims(), [4, 2, 2]);
        assert_eq!(m.dims(), [4, 2, 2]);
        assert_eq!(
            b,
            CropBox {
                lo: [2, 3, 0],
                hi: [6, 5, 2]
            }
        );

        let full = hu([2, 2, 2], vec![1.0; 8]);
        let (c, _, b) = crop_nonzero(&full, &Mask::zeros([2, 2, 2])).unwrap();
        assert_eq!(c, full);
        assert_eq!(b, CropBox::full([2, 2, 2]));

        let empty = hu([2, 2, 2], vec![0.0; 8]);
        assert_eq!(
            crop_nonzero(&empty, &Mask::zeros([2, 2, 2])).unwrap_err(),
            Error::EmptyVolume
        );
    }

    fn disk_slice(n: usize) -> Vec<f32> {
        let c = (n as f32 - 1.0) / 2.0;
        let mut s = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let r = ((x as f32 - c).powi(2) + (y as f32 - c).powi(2)).sqrt();
                s[y * n + x] = if r < 9.0 {
                    30.0
                } else if r < 12.0 {
                    80.0
                } else {
                    0.0
                };
            }
        }
        s
    }

    #[test]
    fn brain_disk_survives_skull_ring() {
        let n = 32;
        let s = disk_slice(n);
        let v = hu([n, n, 1], s.clone());
        let out = strip_skull(&v, &PreprocessConfig::default())
            .unwrap()
            .to_f32();
        for (o, i) in out.iter().zip(&s) {
            assert_eq!(*o, if *i == 30.0 { 30.0 } else { 0.0 });
        }
    }

    #[test]
    fn zero_slice_passes_through() {
        let v = hu([8, 8, 2], vec![0.0; 128]);
        assert_eq!(
            strip_skull(&v, &PreprocessConfig::default())
                .unwrap()
                .to_f32(),
            vec![0.0; 128]
        );
    }
}
