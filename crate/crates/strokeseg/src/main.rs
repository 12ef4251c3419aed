use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use strokeseg::checkpoint::load_checkpoint;
use strokeseg::config::{Preset, RunConfig};
use strokeseg::corpus::{generate_corpus, MANIFEST_NAME};
use strokeseg::error::{Error, Result};
use strokeseg::eval::{
    evaluate_patient, overlap_sweep, overlay_slice, predict_volume, save_overlay, write_report,
    write_sweep, PatientResult,
};
use strokeseg::manifest::{load_manifest, Manifest};
use strokeseg::prep::preprocess_manifest;
use strokeseg::train::{dump_patches, train_fold, FINAL_NAME};
use strokeseg::vol::{load_mask, load_volume};
use strokeseg_core::gradcheck::{run_suite, GradcheckConfig, Precision};
use strokeseg_core::metrics::binarize;
use strokeseg_core::network::UNet3d;
use strokeseg_core::sampling::GridSpec;

#[derive(Parser, Debug)]
#[command(
    name = "strokeseg",
    version,
    about = "3D lesion segmentation on CT volumes"
)]
struct Cli {
    /// JSON run configuration, merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic phantom corpus with a manifest.
    Phantom {
        #[arg(long, default_value_t = 20)]
        n: usize,
    },
    /// Window, skull-strip, normalize and crop every manifest entry.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        /// Skip the brain z-score before min-max normalization.
        #[arg(long)]
        no_standardize: bool,
    },
    /// Train one fold (or all of them).
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        folds: FoldArgs,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<u64>,
        /// Write the first epoch's patches under <out>/patches before training.
        #[arg(long)]
        dump_patches: bool,
    },
    /// Score held-out folds.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        folds: FoldArgs,
        /// Network for a single fold.
        #[arg(long, conflicts_with = "run_dir")]
        checkpoint: Option<PathBuf>,
        /// Training output holding fold<k>/model.svck.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Comma-separated overlap fractions for a sweep, e.g. 0,0.25,0.5,0.75.
        #[arg(long, value_delimiter = ',')]
        overlaps: Option<Vec<f64>>,
        /// Write a PNG overlay per patient.
        #[arg(long)]
        overlay: bool,
    },
    /// Segment a single volume.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of every op.
    Gradcheck {
        /// Double-precision analytic gradients (tolerance 1e-6).
        #[arg(long)]
        f64: bool,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Args, Debug)]
struct FoldArgs {
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long)]
    all_folds: bool,
}

impl FoldArgs {
    fn resolve(&self, m: &Manifest) -> Result<Vec<usize>> {
        let available = m.folds();
        if self.all_folds {
            if available.is_empty() {
                return Err(Error::Config("manifest has no fold assignments".into()));
            }
            return Ok(available);
        }
        if !available.contains(&self.fold) {
            return Err(Error::Config(format!(
                "fold {} not in manifest (has {:?})",
                self.fold, available
            )));
        }
        Ok(vec![self.fold])
    }
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let out = cli
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out is required for this command".into()))?;
    fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    Ok(out)
}

fn write_effective(cfg: &RunConfig, command: &str, out: &Path) -> Result<()> {
    let doc = json!({
        "tool": format!("strokeseg {}", env!("CARGO_PKG_VERSION")),
        "command": command,
        "config": cfg,
    });
    let p = out.join("effective_config.json");
    fs::write(&p, serde_json::to_string_pretty(&doc)? + "\n")
        .map_err(|e| Error::Io { path: p, source: e })
}

fn grid_for(model: &UNet3d<f32>, cfg: &RunConfig) -> Result<GridSpec> {
    GridSpec::new(model.config().patch_size, cfg.grid.overlap)
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), cli.preset)?;
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    match &cli.cmd {
        Cmd::Phantom { n } => {
            let out = out_dir(cli)?;
            write_effective(&cfg, "phantom", &out)?;
            let m = generate_corpus(*n, &cfg.phantom, cfg.folds, &out)?;
            println!(
                "wrote {} phantoms and {}",
                m.len(),
                out.join(MANIFEST_NAME).display()
            );
        }
        Cmd::Preprocess {
            manifest,
            no_standardize,
        } => {
            if *no_standardize {
                cfg.preprocess.standardize_first = false;
            }
            let out = out_dir(cli)?;
            write_effective(&cfg, "preprocess", &out)?;
            let m = load_manifest(manifest)?;
            let report = preprocess_manifest(&m, &cfg.preprocess, &out)?;
            println!(
                "preprocessed {} of {} patients into {}",
                report.manifest.len(),
                m.len(),
                out.display()
            );
            if !report.failures.is_empty() {
                for f in &report.failures {
                    eprintln!("failed: {}: {}", f.patient_id, f.reason);
                }
                return Err(Error::Batch {
                    failed: report.failures.len(),
                    total: m.len(),
                });
            }
        }
        Cmd::Train {
            manifest,
            folds,
            resume,
            iterations,
            dump_patches: dump,
        } => {
            if let Some(n) = iterations {
                cfg.optim.total_iterations = *n;
            }
            cfg.validate()?;
            let out = out_dir(cli)?;
            write_effective(&cfg, "train", &out)?;
            let m = load_manifest(manifest)?;
            let list = folds.resolve(&m)?;
            if resume.is_some() && list.len() > 1 {
                return Err(Error::Config("--resume applies to a single fold".into()));
            }
            for f in list {
                let dir = out.join(format!("fold{f}"));
                if *dump {
                    let n = dump_patches(&m, f, &cfg, &dir.join("patches"))?;
                    println!("fold {f}: dumped {n} patches");
                }
                let o = train_fold(&m, f, &cfg, &dir, resume.as_deref())?;
                let last = o.losses.last().copied().unwrap_or(f64::NAN);
                println!(
                    "fold {f}: {} iterations, final loss {last:.5}, model {}",
                    o.iterations,
                    o.checkpoint.display()
                );
            }
        }
        Cmd::Eval {
            manifest,
            folds,
            checkpoint,
            run_dir,
            overlaps,
            overlay,
        } => {
            let out = out_dir(cli)?;
            write_effective(&cfg, "eval", &out)?;
            let m = load_manifest(manifest)?;
            let list = folds.resolve(&m)?;
            let mut models = Vec::new();
            for &f in &list {
                let path = match (checkpoint, run_dir) {
                    (Some(c), _) if list.len() == 1 => c.clone(),
                    (_, Some(r)) => r.join(format!("fold{f}")).join(FINAL_NAME),
                    _ => {
                        return Err(Error::Config(
                            "give --checkpoint for one fold or --run-dir".into(),
                        ))
                    }
                };
                models.push((f, load_checkpoint(&path)?.model));
            }
            let model_for = |fold: usize| {
                models
                    .iter()
                    .find(|(f, _)| *f == fold)
                    .map(|(_, m)| m)
                    .expect("loaded")
            };
            let mut all: Vec<PatientResult> = Vec::new();
            for &f in &list {
                let model = model_for(f);
                let grid = grid_for(model, &cfg)?;
                let mut results = Vec::new();
                for e in m.fold(f) {
                    let (r, prob) =
                        evaluate_patient(model, e, &grid, cfg.eval.threshold, cfg.eval.batch)?;
                    if *overlay {
                        let vol = load_volume(&e.volume_path)?;
                        let gt = load_mask(&e.mask_path)?;
                        let pred = binarize(&prob, cfg.eval.threshold);
                        let z = overlay_slice(&gt);
                        save_overlay(
                            &vol,
                            &pred,
                            &gt,
                            z,
                            &out.join("overlays").join(format!("{}.png", e.patient_id)),
                        )?;
                    }
                    results.push(r);
                }
                let s = write_report(&results, &out.join(format!("fold{f}")))?;
                println!(
                    "fold {f}: dsc {:.4} ± {:.4} over {} patients",
                    s.dsc.mean, s.dsc.std, s.patients
                );
                all.extend(results);
            }
            let s = write_report(&all, &out)?;
            println!(
                "all: dsc {:.4} ± {:.4}, sensitivity {:.4} ± {:.4}, specificity {:.4} ± {:.4}, precision {:.4} ± {:.4}",
                s.dsc.mean, s.dsc.std, s.sensitivity.mean, s.sensitivity.std, s.specificity.mean,
                s.specificity.std, s.precision.mean, s.precision.std
            );
            if let Some(ovs) = overlaps {
                let entries: Vec<_> = list.iter().flat_map(|f| m.fold(*f)).collect();
                let patch = models[0].1.config().patch_size;
                let rows = overlap_sweep(
                    &entries,
                    ovs,
                    patch,
                    cfg.eval.threshold,
                    cfg.eval.batch,
                    |e| Ok(model_for(e.fold.expect("fold entries carry a fold"))),
                )?;
                write_sweep(&rows, &out.join("overlap_sweep.csv"))?;
                println!("overlap  patches  time_s   dsc");
                for r in &rows {
                    println!(
                        "{:7.2}  {:7.1}  {:6.3}  {:.4} ± {:.4}",
                        r.overlap, r.patches, r.time_s, r.dsc.mean, r.dsc.std
                    );
                }
            }
        }
        Cmd::Predict { checkpoint, input } => {
            let out = out_dir(cli)?;
            write_effective(&cfg, "predict", &out)?;
            let model = load_checkpoint(checkpoint)?.model;
            let grid = grid_for(&model, &cfg)?;
            let p = predict_volume(
                &model,
                input,
                &cfg.preprocess,
                &grid,
                cfg.eval.threshold,
                cfg.eval.batch,
                &out,
            )?;
            println!(
                "{} lesion voxels; mask {}",
                p.lesion_voxels,
                p.mask.display()
            );
        }
        Cmd::Gradcheck {
            f64,
            seeds,
            inject_fault,
        } => {
            let gc = GradcheckConfig {
                precision: if *f64 { Precision::F64 } else { Precision::F32 },
                seeds: seeds.unwrap_or(5),
                base_seed: cfg.seed,
                inject_fault: *inject_fault,
                ..GradcheckConfig::default()
            };
            let report = run_suite(&gc)?;
            println!("{:<28} {:>12}  {:>9}", "case", "max_rel_err", "tolerance");
            for (name, err) in report.worst() {
                let mark = if err < gc.precision.tolerance() {
                    "ok"
                } else {
                    "FAIL"
                };
                println!(
                    "{name:<28} {err:>12.3e}  {:>9.0e}  {mark}",
                    gc.precision.tolerance()
                );
            }
            if let Some(out) = &cli.out {
                fs::create_dir_all(out).map_err(|e| Error::Io {
                    path: out.clone(),
                    source: e,
                })?;
                let p = out.join("gradcheck.json");
                fs::write(&p, serde_json::to_string_pretty(&report)? + "\n")
                    .map_err(|e| Error::Io { path: p, source: e })?;
            }
            if !report.passed() {
                return Err(Error::Batch {
                    failed: report.results.iter().filter(|r| !r.passed()).count(),
                    total: report.results.len(),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    strokeseg::logging::init(cli.verbose);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
