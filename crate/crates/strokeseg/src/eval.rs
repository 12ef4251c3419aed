//! Evaluation: sliding-window inference per patient, metric tables, the
//! overlap sweep, overlays and single-volume prediction.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{Rgb, RgbImage};
use serde::Serialize;
use strokeseg_core::metrics::{
    binarize, confusion, mean_std, metrics, sliding_window_predict, ConfusionCounts, MeanStd,
    Metrics, ProbabilityVolume, Segmenter,
};
use strokeseg_core::preprocess::{run_pipeline, PreprocessConfig};
use strokeseg_core::sampling::{grid_patches, padded_dims, GridSpec};
use strokeseg_core::volume::{linear_index, Dims, IntensityKind, Mask, Volume};

use crate::error::{Error, Result};
use crate::manifest::Entry;
use crate::vol::{
    load_mask, load_volume_with_sidecar, save_mask, save_volume_with_crop, CropOrigin,
};

#[derive(Clone, Debug, Serialize)]
pub struct PatientResult {
    pub patient_id: String,
    pub fold: Option<usize>,
    pub metrics: Metrics,
    pub counts: ConfusionCounts,
    pub patches: usize,
    pub time_s: f64,
}

pub const METRICS_HEADER: [&str; 7] = [
    "patient_id",
    "fold",
    "dsc",
    "sensitivity",
    "specificity",
    "precision",
    "time_s",
];

pub fn patch_count(dims: Dims, grid: &GridSpec) -> Result<usize> {
    Ok(grid_patches(padded_dims(dims, grid.patch_size), grid)?.len())
}

/// Predicts and scores one patient on its (preprocessed) grid.
pub fn evaluate_patient<S: Segmenter + ?Sized>(
    model: &S,
    entry: &Entry,
    grid: &GridSpec,
    threshold: f32,
    batch: usize,
) -> Result<(PatientResult, ProbabilityVolume)> {
    let (vol, _) = load_volume_with_sidecar(&entry.volume_path)?;
    let gt = load_mask(&entry.mask_path)?;
    let t = Instant::now();
    let prob = sliding_window_predict(model, &vol, grid, batch)?;
    let time_s = t.elapsed().as_secs_f64();
    let pred = binarize(&prob, threshold);
    let counts = confusion(&pred, &gt)?;
    let m = metrics(&counts);
    log::info!(
        "event=evaluated patient={} dsc={:.4} sensitivity={:.4} specificity={:.4} precision={:.4} time_s={time_s:.3}",
        entry.patient_id,
        m.dsc,
        m.sensitivity,
        m.specificity,
        m.precision
    );
    let r = PatientResult {
        patient_id: entry.patient_id.clone(),
        fold: entry.fold,
        metrics: m,
        counts,
        patches: patch_count(vol.dims(), grid)?,
        time_s,
    };
    Ok((r, prob))
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub patients: usize,
    pub dsc: MeanStd,
    pub sensitivity: MeanStd,
    pub specificity: MeanStd,
    pub precision: MeanStd,
    pub time_s: MeanStd,
}

/// Mean and population standard deviation across patients.
pub fn summarize(results: &[PatientResult]) -> Summary {
    let col = |f: fn(&PatientResult) -> f64| mean_std(&results.iter().map(f).collect::<Vec<_>>());
    Summary {
        patients: results.len(),
        dsc: col(|r| r.metrics.dsc),
        sensitivity: col(|r| r.metrics.sensitivity),
        specificity: col(|r| r.metrics.specificity),
        precision: col(|r| r.metrics.precision),
        time_s: col(|r| r.time_s),
    }
}

/// `metrics.csv` and `summary.json` under `dir`.
pub fn write_report(results: &[PatientResult], dir: &Path) -> Result<Summary> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let path = dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(METRICS_HEADER)?;
    for r in results {
        let m = r.metrics;
        w.write_record([
            r.patient_id.clone(),
            r.fold.map(|f| f.to_string()).unwrap_or_default(),
            m.dsc.to_string(),
            m.sensitivity.to_string(),
            m.specificity.to_string(),
            m.precision.to_string(),
            r.time_s.to_string(),
        ])?;
    }
    w.flush().map_err(Error::io(&path))?;
    let s = summarize(results);
    let sp = dir.join("summary.json");
    fs::write(&sp, serde_json::to_string_pretty(&s)? + "\n").map_err(Error::io(&sp))?;
    Ok(s)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub overlap: f64,
    pub patches: f64,
    pub time_s: f64,
    pub dsc: MeanStd,
    pub sensitivity: MeanStd,
    pub specificity: MeanStd,
    pub precision: MeanStd,
}

/// Scores `entries` at each overlap. `model_for` maps an entry to the model
/// that must evaluate it (its fold's network).
pub fn overlap_sweep<'a, S, F>(
    entries: &[&Entry],
    overlaps: &[f64],
    patch: usize,
    threshold: f32,
    batch: usize,
    model_for: F,
) -> Result<Vec<SweepRow>>
where
    S: Segmenter + ?Sized + 'a,
    F: Fn(&Entry) -> Result<&'a S>,
{
    let mut rows = Vec::new();
    for &ov in overlaps {
        let grid = GridSpec::new(patch, ov).map_err(|e| Error::Config(e.to_string()))?;
        let mut results = Vec::new();
        for e in entries {
            results.push(evaluate_patient(model_for(e)?, e, &grid, threshold, batch)?.0);
        }
        let s = summarize(&results);
        let patches =
            results.iter().map(|r| r.patches as f64).sum::<f64>() / results.len().max(1) as f64;
        log::info!(
            "event=sweep overlap={ov} patches={patches:.1} dsc={:.4} time_s={:.3}",
            s.dsc.mean,
            s.time_s.mean
        );
        rows.push(SweepRow {
            overlap: ov,
            patches,
            time_s: s.time_s.mean,
            dsc: s.dsc,
            sensitivity: s.sensitivity,
            specificity: s.specificity,
            precision: s.precision,
        });
    }
    Ok(rows)
}

pub fn write_sweep(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "overlap",
        "patches",
        "time_s",
        "dsc_mean",
        "dsc_std",
        "sensitivity_mean",
        "sensitivity_std",
        "specificity_mean",
        "specificity_std",
        "precision_mean",
        "precision_std",
    ])?;
    for r in rows {
        let mut rec = vec![
            r.overlap.to_string(),
            r.patches.to_string(),
            r.time_s.to_string(),
        ];
        for m in [r.dsc, r.sensitivity, r.specificity, r.precision] {
            rec.push(m.mean.to_string());
            rec.push(m.std.to_string());
        }
        w.write_record(rec)?;
    }
    w.flush().map_err(Error::io(path))
}

/// Axial slice with the most ground-truth lesion voxels (middle slice when
/// there are none).
pub fn overlay_slice(gt: &Mask) -> usize {
    let [nx, ny, nz] = gt.dims();
    let per: Vec<usize> = (0..nz)
        .map(|z| {
            gt.data()[z * nx * ny..(z + 1) * nx * ny]
                .iter()
                .filter(|v| **v != 0)
                .count()
        })
        .collect();
    match per
        .iter()
        .enumerate()
        .max_by_key(|(z, c)| (**c, std::cmp::Reverse(*z)))
    {
        Some((z, c)) if *c > 0 => z,
        _ => nz / 2,
    }
}

/// Grayscale slice `z` of `vol` with ground truth in red, prediction in
/// green and their overlap in yellow.
pub fn save_overlay(vol: &Volume, pred: &Mask, gt: &Mask, z: usize, path: &Path) -> Result<()> {
    let [nx, ny, _] = vol.dims();
    let data = vol.to_f32();
    let sl: Vec<f32> = (0..nx * ny).map(|i| data[z * nx * ny + i]).collect();
    let (lo, hi) = sl
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| {
            (a.min(*v), b.max(*v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::new(nx as u32, ny as u32);
    for y in 0..ny {
        for x in 0..nx {
            let i = linear_index(vol.dims(), x, y, z);
            let g = (((data[i] - lo) / span) * 255.0).round() as u8;
            let (p, t) = (pred.data()[i] != 0, gt.data()[i] != 0);
            let px = match (t, p) {
                (true, true) => Rgb([255, 255, 0]),
                (true, false) => Rgb([255, g / 2, g / 2]),
                (false, true) => Rgb([g / 2, 255, g / 2]),
                _ => Rgb([g, g, g]),
            };
            img.put_pixel(x as u32, (ny - 1 - y) as u32, px);
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    img.save(path)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub probability: PathBuf,
    pub mask: PathBuf,
    pub lesion_voxels: usize,
}

/// Segments one volume. HU input is preprocessed first and the mask is
/// pasted back into the source grid; normalized input is used as is.
pub fn predict_volume<S: Segmenter + ?Sized>(
    model: &S,
    input: &Path,
    pre: &PreprocessConfig,
    grid: &GridSpec,
    threshold: f32,
    batch: usize,
    out_dir: &Path,
) -> Result<Prediction> {
    let (vol, sc) = load_volume_with_sidecar(input)?;
    let (work, crop) = match vol.kind() {
        IntensityKind::Hu => {
            let (v, _, bbox) = run_pipeline(&vol, &Mask::zeros(vol.dims()), pre)?;
            (v, Some(CropOrigin::new(bbox, vol.dims())))
        }
        IntensityKind::Normalized => (vol.clone(), sc.crop_origin),
    };
    let prob = sliding_window_predict(model, &work, grid, batch)?;
    let mask = binarize(&prob, threshold);
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("volume")
        .to_owned();
    let probability = out_dir.join(format!("{stem}_prob"));
    let pv = Volume::from_f32(
        work.dims(),
        work.spacing(),
        prob.data().to_vec(),
        IntensityKind::Normalized,
    )?;
    save_volume_with_crop(&pv, crop, &probability)?;
    let mask_path = out_dir.join(format!("{stem}_seg"));
    let full = match crop {
        Some(c) if vol.kind() == IntensityKind::Hu => Mask::new(
            c.source_dims,
            c.crop_box().uncrop(mask.data(), c.source_dims),
        )?,
        _ => mask.clone(),
    };
    let saved_crop = if vol.kind() == IntensityKind::Hu {
        None
    } else {
        crop
    };
    save_mask(&full, vol.spacing(), saved_crop, &mask_path)?;
    Ok(Prediction {
        probability,
        mask: mask_path,
        lesion_voxels: full.count_ones(),
    })
}
