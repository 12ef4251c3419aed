//! Training patch samplers and the inference grid.
//!
//! All origins are expressed in the coordinates of the padded volume held by
//! a [`PatchSource`]: any axis shorter than the patch is zero-padded
//! symmetrically up to the patch size first.

use alloc::{format, vec, vec::Vec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{linear_index, validate_pair, voxel_count, Dims, Mask, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum VoxelClass {
    Background = 0,
    Healthy = 1,
    Lesion = 2,
}

/// Per-voxel class: lesion where the mask is set, background where the
/// intensity is exactly zero, healthy tissue otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    dims: Dims,
    classes: Vec<VoxelClass>,
}

impl LabelMap {
    pub fn from_parts(dims: Dims, values: &[f32], mask: &[u8]) -> Self {
        let classes = values
            .iter()
            .zip(mask)
            .map(|(v, m)| match (*m, *v == 0.0) {
                (1, _) => VoxelClass::Lesion,
                (_, true) => VoxelClass::Background,
                _ => VoxelClass::Healthy,
            })
            .collect();
        Self { dims, classes }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn classes(&self) -> &[VoxelClass] {
        &self.classes
    }

    pub fn class_at(&self, x: usize, y: usize, z: usize) -> VoxelClass {
        self.classes[linear_index(self.dims, x, y, z)]
    }

    /// `[background, healthy, lesion]`.
    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for v in &self.classes {
            c[*v as usize] += 1;
        }
        c
    }

    fn indices(&self) -> [Vec<u32>; 3] {
        let mut out = [Vec::new(), Vec::new(), Vec::new()];
        for (i, v) in self.classes.iter().enumerate() {
            out[*v as usize].push(i as u32);
        }
        out
    }
}

pub fn build_label_map(vol: &Volume, mask: &Mask) -> Result<LabelMap> {
    validate_pair(vol, mask)?;
    Ok(LabelMap::from_parts(vol.dims(), &vol.to_f32(), mask.data()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassProbs {
    pub background: f64,
    pub healthy: f64,
    pub lesion: f64,
}

impl Default for ClassProbs {
    fn default() -> Self {
        Self {
            background: 0.0,
            healthy: 0.5,
            lesion: 0.5,
        }
    }
}

impl ClassProbs {
    fn as_array(&self) -> [f64; 3] {
        [self.background, self.healthy, self.lesion]
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.as_array();
        if p.iter().any(|v| !(v.is_finite() && *v >= 0.0))
            || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "class probabilities {:?} must be >= 0 and sum to 1",
                p
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Origins uniform over all valid placements.
    Uniform,
    /// Centers drawn by class with [`ClassProbs`].
    Weighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub patch_size: usize,
    pub patches_per_patient: usize,
    pub class_probs: ClassProbs,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Weighted,
            patch_size: 16,
            patches_per_patient: 32,
            class_probs: ClassProbs::default(),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn paper() -> Self {
        Self {
            patch_size: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patches_per_patient == 0 {
            return Err(Error::Config(
                "patch_size and patches_per_patient must be positive".into(),
            ));
        }
        self.class_probs.validate()
    }
}

/// Symmetric zero-padding needed to bring each axis up to `p`.
pub fn padding_for(dims: Dims, p: usize) -> [usize; 3] {
    dims.map(|d| p.saturating_sub(d) / 2)
}

pub fn padded_dims(dims: Dims, p: usize) -> Dims {
    dims.map(|d| d.max(p))
}

/// Copies `src` into a zero buffer of `padded_dims(dims, p)` at offset
/// `padding_for(dims, p)`.
pub fn pad_to<T: Copy + Default>(src: &[T], dims: Dims, p: usize) -> Vec<T> {
    let pd = padded_dims(dims, p);
    if pd == dims {
        return src.to_vec();
    }
    let off = padding_for(dims, p);
    let mut out = vec![T::default(); voxel_count(pd)];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            let s = linear_index(dims, 0, y, z);
            let d = linear_index(pd, off[0], y + off[1], z + off[2]);
            out[d..d + dims[0]].copy_from_slice(&src[s..s + dims[0]]);
        }
    }
    out
}

/// Inverse of [`pad_to`].
pub fn unpad<T: Copy>(padded: &[T], dims: Dims, p: usize) -> Vec<T> {
    let pd = padded_dims(dims, p);
    if pd == dims {
        return padded.to_vec();
    }
    let off = padding_for(dims, p);
    let mut out = Vec::with_capacity(voxel_count(dims));
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            let s = linear_index(pd, off[0], y + off[1], z + off[2]);
            out.extend_from_slice(&padded[s..s + dims[0]]);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub origin: [usize; 3],
    pub data: Vec<f32>,
    pub mask: Vec<u8>,
}

/// A padded volume/mask pair ready for patch extraction.
#[derive(Clone, Debug)]
pub struct PatchSource {
    patch: usize,
    dims: Dims,
    data: Vec<f32>,
    mask: Vec<u8>,
    labels: LabelMap,
    by_class: [Vec<u32>; 3],
}

impl PatchSource {
    pub fn new(vol: &Volume, mask: &Mask, patch: usize) -> Result<Self> {
        validate_pair(vol, mask)?;
        if patch == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        let dims = padded_dims(vol.dims(), patch);
        let data = pad_to(&vol.to_f32(), vol.dims(), patch);
        let mask = pad_to(mask.data(), vol.dims(), patch);
        let labels = LabelMap::from_parts(dims, &data, &mask);
        let by_class = labels.indices();
        Ok(Self {
            patch,
            dims,
            data,
            mask,
            labels,
            by_class,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    pub fn lesion_voxels(&self) -> usize {
        self.by_class[VoxelClass::Lesion as usize].len()
    }

    /// Writes the patch at `origin` into `data` and `mask` (both `P^3`).
    pub fn extract_into<M: From<u8>>(&self, origin: [usize; 3], data: &mut [f32], mask: &mut [M]) {
        let p = self.patch;
        let mut k = 0;
        for z in origin[2]..origin[2] + p {
            for y in origin[1]..origin[1] + p {
                let s = linear_index(self.dims, origin[0], y, z);
                data[k..k + p].copy_from_slice(&self.data[s..s + p]);
                for (d, m) in mask[k..k + p].iter_mut().zip(&self.mask[s..s + p]) {
                    *d = M::from(*m);
                }
                k += p;
            }
        }
    }

    pub fn extract(&self, origin: [usize; 3]) -> Patch {
        let n = self.patch.pow(3);
        let mut data = vec![0.0; n];
        let mut mask = vec![0u8; n];
        self.extract_into(origin, &mut data, &mut mask);
        Patch { origin, data, mask }
    }

    /// Lesion probability moves to healthy tissue when there is no lesion;
    /// any other empty class is dropped and the rest renormalized.
    fn effective_probs(&self, probs: &ClassProbs) -> [f64; 3] {
        let mut p = probs.as_array();
        let empty = |c: VoxelClass| self.by_class[c as usize].is_empty();
        if empty(VoxelClass::Lesion) && p[2] > 0.0 {
            log::warn!(
                "event=sampler_fallback reason=no_lesion_voxels moved_prob={}",
                p[2]
            );
            p[1] += p[2];
            p[2] = 0.0;
        }
        for c in [VoxelClass::Background, VoxelClass::Healthy] {
            if empty(c) && p[c as usize] > 0.0 {
                log::warn!("event=sampler_fallback reason=empty_class class={:?}", c);
                p[c as usize] = 0.0;
            }
        }
        let total: f64 = p.iter().sum();
        if total > 0.0 {
            p.map(|v| v / total)
        } else {
            // Only reachable when every class with mass is empty; draw uniformly
            // over whatever voxels exist.
            let n = self.by_class.iter().map(|v| v.len() as f64).sum::<f64>();
            [0, 1, 2].map(|i| self.by_class[i].len() as f64 / n)
        }
    }
}

/// Origin placing a patch of size `p` around `center`, shifted to stay in bounds.
pub fn clamp_origin(center: [usize; 3], dims: Dims, p: usize) -> [usize; 3] {
    [0, 1, 2].map(|a| center[a].saturating_sub(p / 2).min(dims[a] - p))
}

/// Seeded patch sampler (ChaCha8).
#[derive(Clone, Debug)]
pub struct Sampler {
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self { cfg, rng })
    }

    /// Independent stream `stream` under the configured seed.
    pub fn with_stream(cfg: SamplerConfig, stream: u64) -> Result<Self> {
        let mut s = Self::new(cfg)?;
        s.rng.set_stream(stream);
        Ok(s)
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn uniform_origin(&mut self, dims: Dims) -> [usize; 3] {
        let p = self.cfg.patch_size;
        [0, 1, 2].map(|a| self.rng.gen_range(0..=dims[a] - p))
    }

    /// Returns the origin and the class of the chosen center voxel.
    pub fn weighted_origin(&mut self, src: &PatchSource) -> ([usize; 3], [usize; 3], VoxelClass) {
        let probs = src.effective_probs(&self.cfg.class_probs);
        self.weighted_with(src, probs)
    }

    fn weighted_with(
        &mut self,
        src: &PatchSource,
        probs: [f64; 3],
    ) -> ([usize; 3], [usize; 3], VoxelClass) {
        let u: f64 = self.rng.gen();
        let mut acc = 0.0;
        let mut class = probs.iter().rposition(|p| *p > 0.0).unwrap_or(2);
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc && *p > 0.0 {
                class = i;
                break;
            }
        }
        while src.by_class[class].is_empty() {
            class = (class + 2) % 3;
        }
        let pool = &src.by_class[class];
        let idx = pool[self.rng.gen_range(0..pool.len())] as usize;
        let d = src.dims;
        let center = [idx % d[0], (idx / d[0]) % d[1], idx / (d[0] * d[1])];
        let class = [
            VoxelClass::Background,
            VoxelClass::Healthy,
            VoxelClass::Lesion,
        ][class];
        (clamp_origin(center, d, src.patch), center, class)
    }

    /// `n` origins with the configured sampler kind.
    pub fn draw_origins(&mut self, src: &PatchSource, n: usize) -> Result<Vec<[usize; 3]>> {
        if src.patch != self.cfg.patch_size {
            return Err(Error::Config(format!(
                "patch source built for P={} but sampler uses P={}",
                src.patch, self.cfg.patch_size
            )));
        }
        Ok(match self.cfg.kind {
            SamplerKind::Uniform => (0..n).map(|_| self.uniform_origin(src.dims)).collect(),
            SamplerKind::Weighted => {
                let probs = src.effective_probs(&self.cfg.class_probs);
                (0..n).map(|_| self.weighted_with(src, probs).0).collect()
            }
        })
    }

    /// `patches_per_patient` patches from `src`.
    pub fn sample(&mut self, src: &PatchSource) -> Result<Vec<Patch>> {
        let origins = self.draw_origins(src, self.cfg.patches_per_patient)?;
        Ok(origins.into_iter().map(|o| src.extract(o)).collect())
    }
}

/// Convenience wrapper: uniform patches from a volume/mask pair.
pub fn uniform_sample(
    vol: &Volume,
    mask: &Mask,
    cfg: &SamplerConfig,
    sampler: &mut Sampler,
) -> Result<Vec<Patch>> {
    let src = PatchSource::new(vol, mask, cfg.patch_size)?;
    let origins: Vec<_> = (0..cfg.patches_per_patient)
        .map(|_| sampler.uniform_origin(src.dims))
        .collect();
    Ok(origins.into_iter().map(|o| src.extract(o)).collect())
}

/// Convenience wrapper: class-weighted patches from a volume/mask pair.
pub fn weighted_sample(
    vol: &Volume,
    mask: &Mask,
    cfg: &SamplerConfig,
    sampler: &mut Sampler,
) -> Result<Vec<Patch>> {
    let src = PatchSource::new(vol, mask, cfg.patch_size)?;
    let probs = src.effective_probs(&cfg.class_probs);
    let origins: Vec<_> = (0..cfg.patches_per_patient)
        .map(|_| sampler.weighted_with(&src, probs).0)
        .collect();
    Ok(origins.into_iter().map(|o| src.extract(o)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub patch_size: usize,
    /// Fraction of the patch shared by neighbouring grid positions, in `[0, 1)`.
    pub overlap: f64,
}

impl GridSpec {
    pub fn new(patch_size: usize, overlap: f64) -> Result<Self> {
        let g = Self {
            patch_size,
            overlap,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("grid patch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!(
                "overlap {} must lie in [0, 1)",
                self.overlap
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        let s = libm::round(self.patch_size as f64 * (1.0 - self.overlap)) as usize;
        s.max(1)
    }
}

/// Origins along one axis: `0, s, 2s, ...` while the patch stays inside,
/// then a final origin flush with the far edge.
pub fn grid_axis(dim: usize, p: usize, stride: usize) -> Vec<usize> {
    let dim = dim.max(p);
    let mut out = Vec::new();
    let mut o = 0;
    while o + p < dim {
        out.push(o);
        o += stride;
    }
    if out.last() != Some(&(dim - p)) {
        out.push(dim - p);
    }
    out
}

/// Cartesian product of per-axis origins over the padded dims (x fastest).
pub fn grid_patches(dims: Dims, spec: &GridSpec) -> Result<Vec<[usize; 3]>> {
    spec.validate()?;
    let p = spec.patch_size;
    let s = spec.stride();
    let [ax, ay, az] = dims.map(|d| grid_axis(d, p, s));
    let mut out = Vec::with_capacity(ax.len() * ay.len() * az.len());
    for z in &az {
        for y in &ay {
            for x in &ax {
                out.push([*x, *y, *z]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::IntensityKind;

    fn pair(dims: Dims, f: impl Fn(usize, usize, usize) -> (f32, u8)) -> (Volume, Mask) {
        let mut v = Vec::new();
        let mut m = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let (a, b) = f(x, y, z);
                    v.push(a);
                    m.push(b);
                }
            }
        }
        (
            Volume::from_f32(dims, [1.0; 3], v, IntensityKind::Normalized).unwrap(),
            Mask::new(dims, m).unwrap(),
        )
    }

    #[test]
    fn label_map_definition() {
        let (v, m) = pair([3, 1, 1], |x, _, _| [(0.3, 1), (0.0, 0), (0.4, 0)][x]);
        let l = build_label_map(&v, &m).unwrap();
        assert_eq!(
            l.classes(),
            &[
                VoxelClass::Lesion,
                VoxelClass::Background,
                VoxelClass::Healthy
            ]
        );
        assert_eq!(l.counts().iter().sum::<usize>(), 3);
        assert!(build_label_map(&v, &Mask::zeros([1, 1, 3])).is_err());
    }

    #[test]
    fn padding_round_trips() {
        let dims = [5, 16, 3];
        let src: Vec<u16> = (0..voxel_count(dims) as u16).collect();
        let padded = pad_to(&src, dims, 8);
        assert_eq!(padded.len(), 8 * 16 * 8);
        assert_eq!(padding_for(dims, 8), [1, 0, 2]);
        assert_eq!(unpad(&padded, dims, 8), src);
    }

    #[test]
    fn volume_equal_to_patch_gives_single_placement() {
        let (v, m) = pair([8, 8, 8], |x, y, z| ((x + y + z) as f32 / 21.0, 0));
        let cfg = SamplerConfig {
            kind: SamplerKind::Uniform,
            patch_size: 8,
            patches_per_patient: 5,
            ..Default::default()
        };
        let mut s = Sampler::new(cfg.clone()).unwrap();
        for p in uniform_sample(&v, &m, &cfg, &mut s).unwrap() {
            assert_eq!(p.origin, [0, 0, 0]);
            assert_eq!(p.data, v.to_f32());
        }
    }

    #[test]
    fn patch_is_exact_subarray() {
        let dims = [12, 10, 9];
        let (v, m) = pair(dims, |x, y, z| {
            (
                (x * 100 + y * 10 + z) as f32 / 2000.0,
                ((x + y) % 3 == 0) as u8,
            )
        });
        let src = PatchSource::new(&v, &m, 4).unwrap();
        let p = src.extract([3, 5, 2]);
        let data = v.to_f32();
        let mut k = 0;
        for z in 2..6 {
            for y in 5..9 {
                for x in 3..7 {
                    let i = linear_index(dims, x, y, z);
                    assert_eq!(p.data[k].to_bits(), data[i].to_bits());
                    assert_eq!(p.mask[k], m.data()[i]);
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn clamping_keeps_center_inside() {
        let o = clamp_origin([3, 60, 30], [64, 64, 64], 16);
        assert_eq!(o, [0, 48, 22]);
        for (a, c) in [3usize, 60, 30].into_iter().enumerate() {
            assert!(o[a] <= c && c < o[a] + 16);
        }
    }

    #[test]
    fn healthy_only_probs_never_pick_other_classes() {
        let (v, m) = pair([20, 20, 20], |x, y, z| {
            let inside = (4..16).contains(&x) && (4..16).contains(&y) && (4..16).contains(&z);
            (if inside { 0.5 } else { 0.0 }, (inside && x < 7) as u8)
        });
        let src = PatchSource::new(&v, &m, 8).unwrap();
        let cfg = SamplerConfig {
            patch_size: 8,
            class_probs: ClassProbs {
                background: 0.0,
                healthy: 1.0,
                lesion: 0.0,
            },
            ..Default::default()
        };
        let mut s = Sampler::new(cfg).unwrap();
        for _ in 0..500 {
            let (_, c, class) = s.weighted_origin(&src);
            assert_eq!(class, VoxelClass::Healthy);
            assert_eq!(src.labels().class_at(c[0], c[1], c[2]), VoxelClass::Healthy);
        }
    }

    #[test]
    fn missing_lesion_falls_back_to_healthy() {
        let (v, m) = pair([10, 10, 10], |x, _, _| (if x > 2 { 0.5 } else { 0.0 }, 0));
        let src = PatchSource::new(&v, &m, 4).unwrap();
        let mut s = Sampler::new(SamplerConfig {
            patch_size: 4,
            ..Default::default()
        })
        .unwrap();
        for _ in 0..200 {
            assert_eq!(s.weighted_origin(&src).2, VoxelClass::Healthy);
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let (v, m) = pair([20, 20, 20], |x, y, _| (0.5, (x == 10 && y == 10) as u8));
        let src = PatchSource::new(&v, &m, 8).unwrap();
        let cfg = SamplerConfig {
            patch_size: 8,
            seed: 9,
            ..Default::default()
        };
        let a = Sampler::new(cfg.clone())
            .unwrap()
            .draw_origins(&src, 50)
            .unwrap();
        let b = Sampler::new(cfg.clone())
            .unwrap()
            .draw_origins(&src, 50)
            .unwrap();
        let c = Sampler::with_stream(cfg, 1)
            .unwrap()
            .draw_origins(&src, 50)
            .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn grid_examples() {
        let g = GridSpec::new(128, 0.25).unwrap();
        assert_eq!(g.stride(), 96);
        assert_eq!(grid_axis(256, 128, 96), vec![0, 96, 128]);
        for ov in [0.0, 0.25, 0.5, 0.75] {
            let g = GridSpec::new(128, ov).unwrap();
            assert_eq!(grid_patches([128, 128, 128], &g).unwrap(), vec![[0, 0, 0]]);
        }
        assert_eq!(
            GridSpec {
                patch_size: 4,
                overlap: 0.99
            }
            .stride(),
            1
        );
        assert!(GridSpec::new(4, 1.0).is_err());
    }
}
