//! Fold training driver: patch streaming, Adam updates, CSV loss log,
//! checkpoints and exact resume.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use strokeseg_core::autograd::Tape;
use strokeseg_core::loss::{combined_loss, LossConfig};
use strokeseg_core::network::UNet3d;
use strokeseg_core::optim::{adam_step, AdamState};
use strokeseg_core::sampling::{PatchSource, Sampler, SamplerConfig};
use strokeseg_core::Tensor;

use crate::checkpoint::{load_matching, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::manifest::{Entry, Manifest};
use crate::vol::{load_mask, load_volume};

pub const LOG_HEADER: &str = "iteration,lr,loss_bce,loss_dice,loss_total";
pub const LOG_NAME: &str = "train_log.csv";
pub const FINAL_NAME: &str = "model.svck";

pub fn checkpoint_name(iteration: u64) -> String {
    format!("checkpoints/iter_{iteration:06}.svck")
}

/// Background and lesion voxel totals over the training folds of `fold`.
pub fn class_counts(manifest: &Manifest, fold: usize) -> Result<(u64, u64)> {
    let train = manifest.training(fold);
    if train.is_empty() {
        return Err(Error::Config(format!(
            "fold {fold} leaves no training patients"
        )));
    }
    let (mut n0, mut n1) = (0u64, 0u64);
    for e in train {
        let m = load_mask(&e.mask_path)?;
        let ones = m.count_ones() as u64;
        n1 += ones;
        n0 += m.data().len() as u64 - ones;
    }
    Ok((n0, n1))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub iterations: u64,
    /// Total loss of every iteration run by this call, in order.
    pub losses: Vec<f64>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic patch order: epoch `e` draws `patches_per_patient` origins
/// from every patient (patient `i` on stream `i` of an epoch-specific seed)
/// and shuffles the pooled list.
pub struct PatchPlan {
    cfg: SamplerConfig,
    per_epoch: usize,
    epoch: Option<u64>,
    items: Vec<(usize, [usize; 3])>,
}

impl PatchPlan {
    pub fn new(cfg: SamplerConfig, patients: usize) -> Self {
        Self {
            per_epoch: patients * cfg.patches_per_patient,
            cfg,
            epoch: None,
            items: Vec::new(),
        }
    }

    pub fn per_epoch(&self) -> usize {
        self.per_epoch
    }

    /// `(patient, origin)` of global patch index `g`.
    pub fn get(&mut self, sources: &[PatchSource], g: u64) -> Result<(usize, [usize; 3])> {
        let epoch = g / self.per_epoch as u64;
        if self.epoch != Some(epoch) {
            self.fill(sources, epoch)?;
        }
        Ok(self.items[(g % self.per_epoch as u64) as usize])
    }

    fn fill(&mut self, sources: &[PatchSource], epoch: u64) -> Result<()> {
        let seed = splitmix(self.cfg.seed ^ splitmix(epoch));
        let cfg = SamplerConfig {
            seed,
            ..self.cfg.clone()
        };
        self.items.clear();
        for (i, src) in sources.iter().enumerate() {
            let mut s = Sampler::with_stream(cfg.clone(), i as u64)?;
            let origins = s.draw_origins(src, self.cfg.patches_per_patient)?;
            self.items.extend(origins.into_iter().map(|o| (i, o)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        self.items.shuffle(&mut rng);
        self.epoch = Some(epoch);
        Ok(())
    }
}

pub fn load_sources(entries: &[&Entry], patch: usize) -> Result<Vec<PatchSource>> {
    entries
        .iter()
        .map(|e| {
            let v = load_volume(&e.volume_path)?;
            let m = load_mask(&e.mask_path)?;
            Ok(PatchSource::new(&v, &m, patch)?)
        })
        .collect()
}

/// Keeps the header and the first `keep` rows of an existing log.
fn truncate_log(path: &Path, keep: u64) -> Result<String> {
    let f = fs::File::open(path).map_err(Error::io(path))?;
    let mut out = String::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if i == 0 {
            if line != LOG_HEADER {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: "unexpected log header".into(),
                });
            }
        } else if i as u64 > keep {
            break;
        }
        out.push_str(&line);
        out.push('\n');
    }
    let rows = out.lines().count().saturating_sub(1) as u64;
    if rows != keep {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("log has {rows} rows, checkpoint is at iteration {keep}"),
        });
    }
    Ok(out)
}

/// Trains on every fold except `fold` and writes the log, periodic
/// checkpoints and `model.svck` under `out_dir`.
pub fn train_fold(
    manifest: &Manifest,
    fold: usize,
    cfg: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (n0, n1) = class_counts(manifest, fold)?;
    let loss_cfg = LossConfig {
        n0,
        n1,
        ..cfg.loss.clone()
    };
    loss_cfg
        .validate()
        .map_err(|e| Error::Config(e.to_string()))?;
    let entries = manifest.training(fold);
    let sources = load_sources(&entries, cfg.model.patch_size)?;
    log::info!(
        "event=train_start fold={fold} patients={} n0={n0} n1={n1} params={}",
        entries.len(),
        UNet3d::<f32>::new(cfg.model.clone(), cfg.seed)?.param_count()
    );

    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let log_path = out_dir.join(LOG_NAME);
    let (mut model, mut adam, start) = match resume {
        Some(p) => {
            let ck = load_matching(p, &cfg.model)?;
            let adam = ck.adam.ok_or_else(|| Error::Checkpoint {
                path: p.to_path_buf(),
                detail: "no optimizer state; cannot resume".into(),
            })?;
            log::info!(
                "event=resume checkpoint={} iteration={}",
                p.display(),
                ck.iteration
            );
            (ck.model, adam, ck.iteration)
        }
        None => {
            let m = UNet3d::<f32>::new(cfg.model.clone(), cfg.seed)?;
            let a = AdamState::new(m.params().tensors());
            (m, a, 0)
        }
    };
    let head = if start == 0 {
        format!("{LOG_HEADER}\n")
    } else {
        truncate_log(&log_path, start)?
    };
    fs::write(&log_path, head).map_err(Error::io(&log_path))?;
    let mut log_file = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(Error::io(&log_path))?;

    let opt = &cfg.optim;
    let p = cfg.model.patch_size;
    let b = opt.batch_size;
    let vox = p * p * p;
    let mut plan = PatchPlan::new(cfg.sampler.clone(), sources.len());
    let mut x = vec![0f32; b * vox];
    let mut y = vec![0f32; b * vox];
    let mut losses = Vec::new();
    let t0 = std::time::Instant::now();
    for it in start..opt.total_iterations {
        for k in 0..b {
            let (pi, origin) = plan.get(&sources, it * b as u64 + k as u64)?;
            sources[pi].extract_into(
                origin,
                &mut x[k * vox..(k + 1) * vox],
                &mut y[k * vox..(k + 1) * vox],
            );
        }
        let shape = [b, 1, p, p, p];
        let mut tape = Tape::<f32>::new();
        let params = model.bind(&mut tape, true);
        let xv = tape.constant(Tensor::from_vec(&shape, x.clone())?);
        let yv = tape.constant(Tensor::from_vec(&shape, y.clone())?);
        let logits = model.forward(&mut tape, &params, xv)?;
        let terms = combined_loss(&mut tape, logits, yv, &loss_cfg)?;
        let total = terms.total_value(&tape);
        if !total.is_finite() {
            log::error!("event=non_finite iteration={} loss={total}", it + 1);
            return Err(Error::NonFinite {
                iteration: it + 1,
                loss: total,
            });
        }
        tape.backward(terms.total)?;
        let grads: Vec<Vec<f32>> = params
            .iter()
            .zip(model.params().tensors())
            .map(|(v, t)| {
                tape.grad(*v)
                    .map(<[f32]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.len()])
            })
            .collect();
        drop(tape);
        let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        adam_step(
            model.params_mut().tensors_mut(),
            &grad_refs,
            &mut adam,
            opt,
            it,
        )?;
        let done = it + 1;
        writeln!(
            log_file,
            "{done},{},{},{},{total}",
            opt.lr_at(it),
            terms.bce,
            terms.dice
        )
        .map_err(Error::io(&log_path))?;
        losses.push(total);
        if done % 50 == 0 || done == opt.total_iterations {
            log::info!(
                "event=progress fold={fold} iteration={done} loss={total:.5} bce={:.5} dice={:.5} lr={} elapsed_s={:.1}",
                terms.bce,
                terms.dice,
                opt.lr_at(it),
                t0.elapsed().as_secs_f64()
            );
        }
        if done % opt.checkpoint_every == 0 || done == opt.total_iterations {
            log_file.flush().map_err(Error::io(&log_path))?;
            save_checkpoint(
                &model,
                done,
                Some(&adam),
                &out_dir.join(checkpoint_name(done)),
            )?;
        }
    }
    log_file.flush().map_err(Error::io(&log_path))?;
    let checkpoint = out_dir.join(FINAL_NAME);
    save_checkpoint(
        &model,
        opt.total_iterations.max(start),
        Some(&adam),
        &checkpoint,
    )?;
    Ok(TrainOutcome {
        checkpoint,
        log: log_path,
        iterations: opt.total_iterations,
        losses,
    })
}

/// Writes the first epoch's patches for `fold` as VOL pairs plus
/// `origins.csv`.
pub fn dump_patches(
    manifest: &Manifest,
    fold: usize,
    cfg: &RunConfig,
    dir: &Path,
) -> Result<usize> {
    use strokeseg_core::volume::{IntensityKind, Mask, Volume};
    let entries = manifest.training(fold);
    let sources = load_sources(&entries, cfg.model.patch_size)?;
    let mut plan = PatchPlan::new(cfg.sampler.clone(), sources.len());
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut w = csv::Writer::from_path(dir.join("origins.csv"))?;
    w.write_record(["index", "patient_id", "x", "y", "z", "lesion_voxels"])?;
    let p = cfg.model.patch_size;
    for g in 0..plan.per_epoch() {
        let (pi, o) = plan.get(&sources, g as u64)?;
        let patch = sources[pi].extract(o);
        let lesion = patch.mask.iter().filter(|v| **v != 0).count();
        let v = Volume::from_f32([p; 3], [1.0; 3], patch.data, IntensityKind::Normalized)?;
        let m = Mask::new([p; 3], patch.mask)?;
        crate::vol::save_volume(&v, &dir.join(format!("patch_{g:05}")))?;
        crate::vol::save_mask(&m, [1.0; 3], None, &dir.join(format!("patch_{g:05}_mask")))?;
        w.write_record([
            g.to_string(),
            entries[pi].patient_id.clone(),
            o[0].to_string(),
            o[1].to_string(),
            o[2].to_string(),
            lesion.to_string(),
        ])?;
    }
    w.flush().map_err(Error::io(dir))?;
    Ok(plan.per_epoch())
}
