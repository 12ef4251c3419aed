//! Seeded synthetic non-contrast CT heads with hypodense lesions.
//!
//! A head is an ellipsoidal skull shell in air around brain tissue whose
//! intensity varies smoothly (trilinear value noise). One to three
//! ellipsoidal lesions sit well inside the brain, darker by a fixed offset
//! with a one-voxel soft boundary.

use alloc::{format, vec, vec::Vec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{linear_index, voxel_count, Dims, IntensityKind, Mask, Volume, VoxelData};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FractionBasis {
    /// Lesion voxels relative to brain voxels.
    Brain,
    /// Lesion voxels relative to the whole grid.
    Volume,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub seed: u64,
    pub air_hu: f64,
    pub skull_hu: f64,
    /// Skull shell thickness in voxels.
    pub skull_thickness: f64,
    pub brain_mean_hu: f64,
    pub brain_sd_hu: f64,
    /// Lattice spacing of the brain texture, in voxels.
    pub noise_scale: f64,
    pub lesion_offset_hu: f64,
    pub lesion_count: [usize; 2],
    pub lesion_radius: [f64; 2],
    pub lesion_fraction: [f64; 2],
    pub fraction_basis: FractionBasis,
    pub max_retries: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [64; 3],
            spacing: [1.0; 3],
            seed: 0,
            air_hu: -1000.0,
            skull_hu: 900.0,
            skull_thickness: 3.0,
            brain_mean_hu: 35.0,
            brain_sd_hu: 5.0,
            noise_scale: 8.0,
            lesion_offset_hu: -12.0,
            lesion_count: [1, 3],
            lesion_radius: [2.5, 9.0],
            lesion_fraction: [0.008, 0.03],
            fraction_basis: FractionBasis::Brain,
            max_retries: 200,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("phantom: {m}")));
        if self.dims.iter().any(|d| *d < 32) {
            return bad("dims must be at least 32 per axis");
        }
        if self.lesion_count[0] == 0 || self.lesion_count[0] > self.lesion_count[1] {
            return bad("lesion_count must be a non-empty range starting at 1 or more");
        }
        let [r0, r1] = self.lesion_radius;
        if !(r0 >= 1.0 && r0 <= r1) {
            return bad("lesion_radius must satisfy 1 <= min <= max");
        }
        let [f0, f1] = self.lesion_fraction;
        if !(f0 > 0.0 && f0 <= f1 && f1 < 0.5) {
            return bad("lesion_fraction must satisfy 0 < min <= max < 0.5");
        }
        if !(self.skull_thickness >= 1.0 && self.noise_scale >= 1.0 && self.brain_sd_hu >= 0.0) {
            return bad("skull_thickness and noise_scale must be >= 1, brain_sd_hu >= 0");
        }
        if self.max_retries == 0 {
            return bad("max_retries must be positive");
        }
        Ok(())
    }

    /// Copy with a seed derived from this one for patient `index`.
    pub fn for_patient(&self, index: u64) -> Self {
        Self {
            seed: splitmix(self.seed ^ splitmix(index)),
            ..self.clone()
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    /// HU values stored as `i16`.
    pub volume: Volume,
    pub mask: Mask,
    /// Brain tissue (inside the skull), lesions included.
    pub brain: Mask,
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn rho(&self, p: [f64; 3]) -> f64 {
        let mut s = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.radii[a];
            s += d * d;
        }
        libm::sqrt(s)
    }

    /// Approximate signed distance in voxels (negative inside).
    fn signed_distance(&self, p: [f64; 3]) -> f64 {
        let mean_r = (self.radii[0] + self.radii[1] + self.radii[2]) / 3.0;
        (self.rho(p) - 1.0) * mean_r
    }
}

fn value_noise(rng: &mut ChaCha8Rng, dims: Dims, scale: f64) -> Vec<f64> {
    let g = dims.map(|d| (d as f64 / scale) as usize + 2);
    let lattice: Vec<f64> = (0..g[0] * g[1] * g[2])
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let at = |x: usize, y: usize, z: usize| lattice[x + g[0] * (y + g[1] * z)];
    let mut out = Vec::with_capacity(voxel_count(dims));
    for z in 0..dims[2] {
        let fz = z as f64 / scale;
        let (z0, tz) = (fz as usize, fz - libm::floor(fz));
        for y in 0..dims[1] {
            let fy = y as f64 / scale;
            let (y0, ty) = (fy as usize, fy - libm::floor(fy));
            for x in 0..dims[0] {
                let fx = x as f64 / scale;
                let (x0, tx) = (fx as usize, fx - libm::floor(fx));
                let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
                let plane = |zz: usize| {
                    lerp(
                        lerp(at(x0, y0, zz), at(x0 + 1, y0, zz), tx),
                        lerp(at(x0, y0 + 1, zz), at(x0 + 1, y0 + 1, zz), tx),
                        ty,
                    )
                };
                out.push(lerp(plane(z0), plane(z0 + 1), tz));
            }
        }
    }
    out
}

fn coords(dims: Dims, i: usize) -> [f64; 3] {
    [
        (i % dims[0]) as f64,
        ((i / dims[0]) % dims[1]) as f64,
        (i / (dims[0] * dims[1])) as f64,
    ]
}

/// Builds one phantom head. Deterministic in `cfg`.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<Phantom> {
    cfg.validate()?;
    let dims = cfg.dims;
    let n = voxel_count(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let center = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let center = center.map(|c| c + rng.gen_range(-2.0..=2.0));
    let outer_r = dims.map(|d| d as f64 * 0.42 * rng.gen_range(0.95..=1.05));
    let outer = Ellipsoid {
        center,
        radii: outer_r,
    };
    let inner = Ellipsoid {
        center,
        radii: outer_r.map(|r| r - cfg.skull_thickness),
    };

    let mut brain = vec![false; n];
    let mut hu = vec![cfg.air_hu; n];
    for i in 0..n {
        let p = coords(dims, i);
        if inner.rho(p) < 1.0 {
            brain[i] = true;
        } else if outer.rho(p) < 1.0 {
            hu[i] = cfg.skull_hu;
        }
    }
    let brain_count = brain.iter().filter(|b| **b).count();

    let noise = value_noise(&mut rng, dims, cfg.noise_scale);
    let (mut s, mut s2) = (0.0, 0.0);
    for (v, b) in noise.iter().zip(&brain) {
        if *b {
            s += v;
            s2 += v * v;
        }
    }
    let mean = s / brain_count as f64;
    let sd = libm::sqrt((s2 / brain_count as f64 - mean * mean).max(1e-12));
    for i in 0..n {
        if brain[i] {
            hu[i] = cfg.brain_mean_hu + (noise[i] - mean) / sd * cfg.brain_sd_hu;
        }
    }

    let interior = |i: usize| {
        let [x, y, z] = coords(dims, i).map(|c| c as usize);
        brain[i]
            && x > 0
            && y > 0
            && z > 0
            && x + 1 < dims[0]
            && y + 1 < dims[1]
            && z + 1 < dims[2]
            && [
                (x - 1, y, z),
                (x + 1, y, z),
                (x, y - 1, z),
                (x, y + 1, z),
                (x, y, z - 1),
                (x, y, z + 1),
            ]
            .iter()
            .all(|&(a, b, c)| brain[linear_index(dims, a, b, c)])
    };
    let basis = match cfg.fraction_basis {
        FractionBasis::Brain => brain_count,
        FractionBasis::Volume => n,
    } as f64;
    let (lo, hi) = (
        cfg.lesion_fraction[0] * basis,
        cfg.lesion_fraction[1] * basis,
    );

    for _ in 0..cfg.max_retries {
        let count = rng.gen_range(cfg.lesion_count[0]..=cfg.lesion_count[1]);
        let target = rng.gen_range(cfg.lesion_fraction[0]..=cfg.lesion_fraction[1]) * basis;
        let per = target / count as f64;
        let mut lesions = Vec::with_capacity(count);
        for _ in 0..count {
            let aspect = [0, 1, 2].map(|_| rng.gen_range(0.75..=1.25));
            let prod: f64 = aspect.iter().product();
            let r = libm::cbrt(per * 3.0 / (4.0 * core::f64::consts::PI) / prod);
            let radii = aspect.map(|a| (a * r).clamp(cfg.lesion_radius[0], cfg.lesion_radius[1]));
            let dir = [0, 1, 2].map(|_| rng.gen_range(-1.0..=1.0));
            let c = [0, 1, 2].map(|a| center[a] + dir[a] * 0.6 * inner.radii[a]);
            lesions.push(Ellipsoid { center: c, radii });
        }
        let mut factor = vec![0.0f64; n];
        let mut ok = true;
        for i in 0..n {
            let p = coords(dims, i);
            let f = lesions
                .iter()
                .map(|l| (0.5 - l.signed_distance(p)).clamp(0.0, 1.0))
                .fold(0.0, f64::max);
            if f > 0.0 && !interior(i) {
                ok = false;
                break;
            }
            factor[i] = f;
        }
        if !ok {
            continue;
        }
        let lesion_count = factor.iter().filter(|f| **f > 0.5).count() as f64;
        if lesion_count < lo || lesion_count > hi {
            continue;
        }
        let mut mask = vec![0u8; n];
        for i in 0..n {
            if factor[i] > 0.0 {
                hu[i] += cfg.lesion_offset_hu * factor[i];
            }
            mask[i] = (factor[i] > 0.5) as u8;
        }
        let data: Vec<i16> = hu
            .iter()
            .map(|v| libm::round(*v).clamp(i16::MIN as f64, i16::MAX as f64) as i16)
            .collect();
        let volume = Volume::new(dims, cfg.spacing, VoxelData::I16(data), IntensityKind::Hu)?;
        return Ok(Phantom {
            volume,
            mask: Mask::new(dims, mask)?,
            brain: Mask::new(dims, brain.iter().map(|b| *b as u8).collect())?,
        });
    }
    Err(Error::LesionPlacement(cfg.max_retries))
}
