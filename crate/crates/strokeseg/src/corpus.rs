//! Synthetic corpus generation: phantom volumes, masks and a manifest.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use strokeseg_core::folds::kfold_split;
use strokeseg_core::phantom::{generate_phantom, PhantomConfig};

use crate::error::Result;
use crate::manifest::{Entry, Manifest};
use crate::vol::{save_mask, save_volume};

pub const MANIFEST_NAME: &str = "manifest.csv";

pub fn patient_id(index: usize) -> String {
    format!("p{index:03}")
}

/// Writes `n` phantoms to `out_dir` (`<id>_ct`, `<id>_mask`) and a manifest
/// with folds assigned by a seeded `k`-fold split when `n >= k`.
pub fn generate_corpus(
    n: usize,
    cfg: &PhantomConfig,
    k: usize,
    out_dir: &Path,
) -> Result<Manifest> {
    cfg.validate()?;
    let entries = (0..n)
        .into_par_iter()
        .map(|i| -> Result<(Entry, usize)> {
            let id = patient_id(i);
            let ph = generate_phantom(&cfg.for_patient(i as u64))?;
            let volume_path: PathBuf = out_dir.join(format!("{id}_ct"));
            let mask_path: PathBuf = out_dir.join(format!("{id}_mask"));
            save_volume(&ph.volume, &volume_path)?;
            save_mask(&ph.mask, ph.volume.spacing(), None, &mask_path)?;
            let lesion = ph.mask.count_ones();
            log::info!(
                "event=phantom patient={id} lesion_voxels={lesion} brain_voxels={} fraction={:.4}",
                ph.brain.count_ones(),
                lesion as f64 / ph.brain.count_ones().max(1) as f64
            );
            Ok((
                Entry {
                    patient_id: id,
                    volume_path,
                    mask_path,
                    fold: None,
                },
                lesion,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut entries: Vec<Entry> = entries.into_iter().map(|(e, _)| e).collect();
    if n >= k {
        let ids: Vec<String> = entries.iter().map(|e| e.patient_id.clone()).collect();
        let split = kfold_split(&ids, k, cfg.seed)?;
        for e in &mut entries {
            e.fold = split.fold_of(&e.patient_id);
        }
    } else {
        log::warn!("event=folds_skipped patients={n} k={k}");
    }
    let m = Manifest { entries };
    m.save(&out_dir.join(MANIFEST_NAME))?;
    Ok(m)
}
