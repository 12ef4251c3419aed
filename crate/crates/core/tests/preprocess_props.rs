use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strokeseg_core::phantom::{generate_phantom, PhantomConfig};
use strokeseg_core::preprocess::components::{largest_component, Connectivity};
use strokeseg_core::preprocess::{
    crop_nonzero, hu_window, minmax_normalize, run_pipeline, strip_skull, zscore_brain, CropBox,
    PreprocessConfig,
};
use strokeseg_core::volume::{IntensityKind, Mask, Volume};

/// Breadth-first flood fill; the largest component wins, ties to the one
/// whose first pixel comes first in raster order.
fn flood_fill_largest(fg: &[bool], w: usize, h: usize, eight: bool) -> Vec<bool> {
    let mut seen = vec![false; fg.len()];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..fg.len() {
        if !fg[start] || seen[start] {
            continue;
        }
        let mut comp = vec![];
        let mut q = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = q.pop_front() {
            comp.push(i);
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if (dx == 0 && dy == 0) || (!eight && dx != 0 && dy != 0) {
                        continue;
                    }
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if fg[j] && !seen[j] {
                        seen[j] = true;
                        q.push_back(j);
                    }
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    let mut keep = vec![false; fg.len()];
    for i in best {
        keep[i] = true;
    }
    keep
}

#[test]
fn largest_component_matches_flood_fill_on_random_slices() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for k in 0..100 {
        let density = rng.gen_range(0.2..0.65);
        let fg: Vec<bool> = (0..64 * 64).map(|_| rng.gen_bool(density)).collect();
        for (conn, eight) in [(Connectivity::Four, false), (Connectivity::Eight, true)] {
            assert_eq!(
                largest_component(&fg, 64, 64, conn),
                flood_fill_largest(&fg, 64, 64, eight),
                "slice {k}, {conn:?}"
            );
        }
    }
}

fn phantom(seed: u64) -> (Volume, Mask) {
    let p = generate_phantom(&PhantomConfig {
        seed,
        dims: [40, 40, 32],
        ..PhantomConfig::default()
    })
    .unwrap();
    (p.volume, p.mask)
}

#[test]
fn minmax_range_is_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let scale = rng.gen_range(0.1..1e4);
        let data: Vec<f32> = (0..9 * 7 * 5)
            .map(|_| rng.gen_range(-1.0..1.0) * scale)
            .collect();
        let v = Volume::from_f32([9, 7, 5], [1.0; 3], data, IntensityKind::Hu).unwrap();
        let out = minmax_normalize(&v).unwrap().to_f32();
        let (lo, hi) = out
            .iter()
            .fold((f32::MAX, f32::MIN), |(a, b), x| (a.min(*x), b.max(*x)));
        assert!(lo.abs() <= 1e-6 && (hi - 1.0).abs() <= 1e-6, "{lo} {hi}");
    }
}

#[test]
fn zscore_brain_statistics() {
    let cfg = PreprocessConfig::default();
    for seed in 0..3 {
        let (v, _) = phantom(seed);
        let stripped = strip_skull(&hu_window(&v, &cfg).unwrap(), &cfg).unwrap();
        let brain: Vec<bool> = stripped.to_f32().iter().map(|x| *x != 0.0).collect();
        let z = zscore_brain(&stripped).unwrap().to_f32();
        let vals: Vec<f64> = z
            .iter()
            .zip(&brain)
            .filter(|(_, b)| **b)
            .map(|(x, _)| *x as f64)
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-5, "{mean}");
        assert!((sd - 1.0).abs() < 1e-5, "{sd}");
        assert!(z.iter().zip(&brain).all(|(x, b)| *b || *x == 0.0));
    }
}

#[test]
fn hu_window_is_idempotent() {
    let cfg = PreprocessConfig::default();
    let (v, _) = phantom(11);
    let once = hu_window(&v, &cfg).unwrap();
    let twice = hu_window(&once, &cfg).unwrap();
    assert_eq!(once.to_f32(), twice.to_f32());
}

#[test]
fn crop_round_trips() {
    let (v, m) = phantom(3);
    let stripped = {
        let cfg = PreprocessConfig::default();
        strip_skull(&hu_window(&v, &cfg).unwrap(), &cfg).unwrap()
    };
    let (cv, cm, bbox) = crop_nonzero(&stripped, &m).unwrap();
    assert_eq!(cv.dims(), bbox.dims());
    assert_eq!(bbox.uncrop(&cv.to_f32(), v.dims()), stripped.to_f32());
    assert_eq!(bbox.uncrop(cm.data(), v.dims()), m.data());
    let full = CropBox::full(v.dims());
    assert_eq!(full.crop(&v.to_f32(), v.dims()), v.to_f32());
}

#[test]
fn pipeline_keeps_lesions_and_normalizes() {
    for standardize_first in [true, false] {
        let cfg = PreprocessConfig {
            standardize_first,
            ..PreprocessConfig::default()
        };
        let (v, m) = phantom(7);
        let (pv, pm, _) = run_pipeline(&v, &m, &cfg).unwrap();
        assert_eq!(pm.count_ones(), m.count_ones());
        assert_eq!(pv.kind(), IntensityKind::Normalized);
        let d = pv.to_f32();
        assert!(d.iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(d.contains(&1.0));
        let dims = pv.dims();
        assert!(dims.iter().zip(v.dims()).all(|(a, b)| *a <= b));
    }
}
