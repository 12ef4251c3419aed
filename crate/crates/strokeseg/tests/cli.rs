use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_strokeseg"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const SMALL: &str = r#"{
  "phantom": {"dims": [32, 32, 32], "lesion_radius": [2.5, 5.0]},
  "model": {"levels": 2, "base_channels": 4, "patch_size": 8, "se_reduction": 2},
  "sampler": {"patch_size": 8, "patches_per_patient": 4},
  "grid": {"patch_size": 8, "overlap": 0.25},
  "optim": {"total_iterations": 6, "checkpoint_every": 3}
}"#;

fn corpus(dir: &Path) -> String {
    let cfg = dir.join("small.json");
    fs::write(&cfg, SMALL).unwrap();
    let cfg = cfg.to_str().unwrap().to_owned();
    let raw = dir.join("raw");
    let o = run(&[
        "phantom",
        "--n",
        "6",
        "--seed",
        "4",
        "--config",
        &cfg,
        "--out",
        raw.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let prep = dir.join("prep");
    let o = run(&[
        "preprocess",
        "--config",
        &cfg,
        "--manifest",
        raw.join("manifest.csv").to_str().unwrap(),
        "--out",
        prep.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(prep.join("effective_config.json").exists());
    cfg
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&run(&[])), 2);
    assert_eq!(code(&run(&["train"])), 2);
    assert_eq!(code(&run(&["phantom", "--n", "2"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"optim": {"learning_rate": 1}}"#).unwrap();
    let out = dir.path().join("o");
    let o = run(&[
        "phantom",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    fs::write(&bad, r#"{"sampler": {"patch_size": 12}}"#).unwrap();
    assert_eq!(
        code(&run(&[
            "phantom",
            "--config",
            bad.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ])),
        2
    );
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = run(&[
        "preprocess",
        "--manifest",
        "/nonexistent/m.csv",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
    let ck = dir.path().join("x.svck");
    fs::write(&ck, b"nope").unwrap();
    let vol = dir.path().join("v");
    let o = run(&[
        "predict",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--input",
        vol.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn preprocess_records_failures_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = corpus(d);
    let raw = d.join("raw");
    fs::write(raw.join("p001_ct.raw"), [0u8; 10]).unwrap();
    let out = d.join("prep2");
    let o = run(&[
        "preprocess",
        "--config",
        &cfg,
        "--manifest",
        raw.join("manifest.csv").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
    let m = fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(m.lines().count(), 1 + 5);
    assert!(!m.contains("p001"));
}

#[test]
fn train_resume_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = corpus(d);
    let manifest = d.join("prep/manifest.csv");
    let m = manifest.to_str().unwrap();
    let train = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "train",
            "--config",
            &cfg,
            "--seed",
            "2",
            "--manifest",
            m,
            "--out",
            out.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    let a = d.join("a");
    let b = d.join("b");
    train(&a, &[]);
    train(&b, &[]);
    let log_a = fs::read(a.join("fold0/train_log.csv")).unwrap();
    assert_eq!(log_a, fs::read(b.join("fold0/train_log.csv")).unwrap());
    let text = String::from_utf8(log_a.clone()).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "iteration,lr,loss_bce,loss_dice,loss_total"
    );
    assert_eq!(text.lines().count(), 7);
    assert!(text.lines().nth(1).unwrap().starts_with("1,"));
    assert!(a.join("fold0/checkpoints/iter_000003.svck").exists());

    // Resume from the mid-run checkpoint into b: the log must come out identical.
    let ck = b.join("fold0/checkpoints/iter_000003.svck");
    train(&b, &["--resume", ck.to_str().unwrap()]);
    assert_eq!(fs::read(b.join("fold0/train_log.csv")).unwrap(), log_a);
    assert_eq!(
        fs::read(a.join("fold0/model.svck")).unwrap(),
        fs::read(b.join("fold0/model.svck")).unwrap()
    );

    let ev = d.join("eval");
    let o = run(&[
        "eval",
        "--config",
        &cfg,
        "--manifest",
        m,
        "--checkpoint",
        a.join("fold0/model.svck").to_str().unwrap(),
        "--overlaps",
        "0,0.5",
        "--overlay",
        "--out",
        ev.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("patient_id,fold,dsc,sensitivity,specificity,precision,time_s\n"));
    assert!(ev.join("summary.json").exists());
    let sweep = fs::read_to_string(ev.join("overlap_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
    assert!(fs::read_dir(ev.join("overlays")).unwrap().count() >= 1);

    let pr = d.join("pred");
    let o = run(&[
        "predict",
        "--config",
        &cfg,
        "--checkpoint",
        a.join("fold0/model.svck").to_str().unwrap(),
        "--input",
        d.join("raw/p000_ct").to_str().unwrap(),
        "--out",
        pr.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let seg = strokeseg::vol::load_mask(&pr.join("p000_ct_seg")).unwrap();
    assert_eq!(seg.dims(), [32, 32, 32]);
}

#[test]
fn gradcheck_fault_injection_fails() {
    let o = run(&["gradcheck", "--seeds", "1", "--inject-fault"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}
