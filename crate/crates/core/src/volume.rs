//! In-memory volumes and lesion masks.
//!
//! Voxels are stored x-fastest (x, then y, then z), which maps directly onto
//! the W-H-D axes of a network tensor.

use alloc::{format, vec::Vec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(nx, ny, nz)`.
pub type Dims = [usize; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntensityKind {
    /// Hounsfield units (or any unnormalized intensity).
    Hu,
    /// Rescaled to `[0, 1]`.
    Normalized,
}

#[derive(Clone, Debug, PartialEq)]
pub enum VoxelData {
    F32(Vec<f32>),
    I16(Vec<i16>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::F32(v) => v.len(),
            VoxelData::I16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            VoxelData::F32(v) => v.clone(),
            VoxelData::I16(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: [f64; 3],
    data: VoxelData,
    kind: IntensityKind,
}

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

impl Volume {
    pub fn new(
        dims: Dims,
        spacing: [f64; 3],
        data: VoxelData,
        kind: IntensityKind,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Volume(format!(
                "dims must be positive, got {:?}",
                dims
            )));
        }
        if data.len() != voxel_count(dims) {
            return Err(Error::Volume(format!(
                "dims {:?} need {} voxels, data has {}",
                dims,
                voxel_count(dims),
                data.len()
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Volume(format!(
                "spacing must be positive, got {:?}",
                spacing
            )));
        }
        if kind == IntensityKind::Normalized {
            let in_range = match &data {
                VoxelData::F32(v) => v.iter().all(|x| (0.0..=1.0).contains(x)),
                VoxelData::I16(v) => v.iter().all(|x| (0..=1).contains(x)),
            };
            if !in_range {
                return Err(Error::Volume(
                    "normalized volume has values outside [0, 1]".into(),
                ));
            }
        }
        Ok(Self {
            dims,
            spacing,
            data,
            kind,
        })
    }

    pub fn from_f32(
        dims: Dims,
        spacing: [f64; 3],
        data: Vec<f32>,
        kind: IntensityKind,
    ) -> Result<Self> {
        Self::new(dims, spacing, VoxelData::F32(data), kind)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    pub fn kind(&self) -> IntensityKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.to_f32()
    }
}

/// Binary lesion mask aligned with a [`Volume`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    dims: Dims,
    data: Vec<u8>,
}

impl Mask {
    /// Checks only the length; see [`Mask::is_binary`] and [`validate_pair`].
    pub fn from_raw(dims: Dims, data: Vec<u8>) -> Result<Self> {
        if dims.contains(&0) || data.len() != voxel_count(dims) {
            return Err(Error::Volume(format!(
                "mask dims {:?} vs {} values",
                dims,
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        let m = Self::from_raw(dims, data)?;
        m.check_binary()?;
        Ok(m)
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: alloc::vec![0; voxel_count(dims)],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|v| *v <= 1)
    }

    fn check_binary(&self) -> Result<()> {
        match self.data.iter().find(|v| **v > 1) {
            Some(v) => Err(Error::NonBinaryMask(*v)),
            None => Ok(()),
        }
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|v| **v == 1).count()
    }
}

/// Returns only if dims agree and the mask is binary.
pub fn validate_pair(vol: &Volume, mask: &Mask) -> Result<()> {
    if vol.dims() != mask.dims() {
        return Err(Error::Dims(vol.dims(), mask.dims()));
    }
    mask.check_binary()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn length_contract() {
        let ok = Volume::from_f32([4, 4, 2], [1.0; 3], vec![0.0; 32], IntensityKind::Hu);
        assert_eq!(ok.unwrap().len(), 32);
        assert!(Volume::from_f32([4, 4, 2], [1.0; 3], vec![0.0; 31], IntensityKind::Hu).is_err());
    }

    #[test]
    fn spacing_and_range_checks() {
        assert!(
            Volume::from_f32([1, 1, 1], [1.0, 0.0, 1.0], vec![0.0], IntensityKind::Hu).is_err()
        );
        assert!(Volume::from_f32(
            [1, 1, 2],
            [1.0; 3],
            vec![0.0, 1.5],
            IntensityKind::Normalized
        )
        .is_err());
        assert!(Volume::from_f32(
            [1, 1, 2],
            [1.0; 3],
            vec![0.0, 1.0],
            IntensityKind::Normalized
        )
        .is_ok());
    }

    #[test]
    fn validate_pair_cases() {
        let v = Volume::from_f32([4, 4, 4], [1.0; 3], vec![0.5; 64], IntensityKind::Hu).unwrap();
        let mut data = vec![0u8; 64];
        data[3] = 1;
        assert!(validate_pair(&v, &Mask::from_raw([4, 4, 4], data.clone()).unwrap()).is_ok());
        assert_eq!(
            validate_pair(&v, &Mask::zeros([4, 4, 2])),
            Err(Error::Dims([4, 4, 4], [4, 4, 2]))
        );
        data[5] = 2;
        assert_eq!(
            validate_pair(&v, &Mask::from_raw([4, 4, 4], data).unwrap()),
            Err(Error::NonBinaryMask(2))
        );
    }
}
