//! Batch preprocessing over a manifest.

use std::path::Path;

use strokeseg_core::preprocess::{run_pipeline, PreprocessConfig};

use crate::error::{Error, Result};
use crate::manifest::{Entry, Manifest};
use crate::vol::{load_mask, load_volume, save_mask, save_volume_with_crop, CropOrigin};

#[derive(Clone, Debug)]
pub struct Failure {
    pub patient_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct PrepReport {
    pub manifest: Manifest,
    pub failures: Vec<Failure>,
}

fn one(e: &Entry, cfg: &PreprocessConfig, out_dir: &Path) -> Result<Entry> {
    let vol = load_volume(&e.volume_path)?;
    let mask = load_mask(&e.mask_path)?;
    let (v, m, bbox) = run_pipeline(&vol, &mask, cfg)?;
    let crop = CropOrigin::new(bbox, vol.dims());
    let volume_path = out_dir.join(format!("{}_ct", e.patient_id));
    let mask_path = out_dir.join(format!("{}_mask", e.patient_id));
    save_volume_with_crop(&v, Some(crop), &volume_path)?;
    save_mask(&m, v.spacing(), Some(crop), &mask_path)?;
    log::info!(
        "event=preprocessed patient={} crop_lo={:?} crop_hi={:?} dims={:?}",
        e.patient_id,
        bbox.lo,
        bbox.hi,
        v.dims()
    );
    Ok(Entry {
        patient_id: e.patient_id.clone(),
        volume_path,
        mask_path,
        fold: e.fold,
    })
}

/// Processes every patient, writing `<out_dir>/manifest.csv` for the ones
/// that succeeded. Failures are collected, not fatal.
pub fn preprocess_manifest(
    manifest: &Manifest,
    cfg: &PreprocessConfig,
    out_dir: &Path,
) -> Result<PrepReport> {
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    let mut report = PrepReport::default();
    for e in &manifest.entries {
        match one(e, cfg, out_dir) {
            Ok(entry) => report.manifest.entries.push(entry),
            Err(err) => {
                log::error!(
                    "event=preprocess_failed patient={} error=\"{err}\"",
                    e.patient_id
                );
                report.failures.push(Failure {
                    patient_id: e.patient_id.clone(),
                    reason: err.to_string(),
                });
            }
        }
    }
    report
        .manifest
        .save(&out_dir.join(crate::corpus::MANIFEST_NAME))?;
    Ok(report)
}
