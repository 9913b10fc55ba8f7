//! End-to-end subcommand tests against the built binary.

use std::path::Path;
use std::process::{Command, Output};

fn dgms(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgms"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn write_blobs_config(dir: &Path, seed: u64, spread: f64) -> std::path::PathBuf {
    let path = dir.join(format!("blobs_{seed}.cfg"));
    std::fs::write(
        &path,
        format!(
            "# desk-scale run\n\
             model = mlp\n\
             hidden = 8\n\
             dataset = blobs\n\
             classes = 2\n\
             samples = 200\n\
             spread = {spread}\n\
             bits = 4\n\
             epochs = 5\n\
             batch = 32\n\
             seed = {seed}\n\
             lr_max = 0.05\n"
        ),
    )
    .unwrap();
    path
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn quantize_writes_checkpoint_and_gm() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_blobs_config(tmp.path(), 3, 0.1);
    let out = dgms(
        &["quantize", "--config", cfg.to_str().unwrap(), "--bits", "4", "--out", "q"],
        tmp.path(),
    );
    assert_ok(&out, "quantize");
    assert!(tmp.path().join("q/model.ckpt").exists());
    assert!(tmp.path().join("q/model.gm").exists());
    let csv = std::fs::read_to_string(tmp.path().join("q/train.csv")).unwrap();
    assert!(csv.starts_with("epoch,loss,top1,mse,cr\n"));
    assert_eq!(csv.lines().count(), 6); // header + 5 epochs
}

#[test]
fn full_pipeline_train_quantize_eval_export_bench_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_blobs_config(tmp.path(), 5, 0.1);
    let c = cfg.to_str().unwrap();

    assert_ok(&dgms(&["train", "--config", c, "--out", "fp32"], tmp.path()), "train");
    assert_ok(
        &dgms(
            &["quantize", "--config", c, "--from", "fp32/model.ckpt", "--lr-max", "0.01", "--out", "q"],
            tmp.path(),
        ),
        "quantize",
    );
    let eval = dgms(
        &["eval", "--config", c, "--from", "q/model.ckpt", "--gm", "q/model.gm"],
        tmp.path(),
    );
    assert_ok(&eval, "eval");
    let text = String::from_utf8_lossy(&eval.stdout).to_string();
    assert!(text.contains("top1:"), "{text}");
    assert!(text.contains("compression rate:"), "{text}");

    assert_ok(
        &dgms(
            &["export", "--config", c, "--from", "q/model.ckpt", "--gm", "q/model.gm", "--out", "pk"],
            tmp.path(),
        ),
        "export",
    );
    let inspect = dgms(&["inspect", "--model", "pk/model.qsmd"], tmp.path());
    assert_ok(&inspect, "inspect");
    let text = String::from_utf8_lossy(&inspect.stdout).to_string();
    assert!(text.contains("QSMD"), "{text}");
    assert!(text.contains("bits=4"), "{text}");

    let bench = dgms(
        &["bench", "--model", "pk/model.qsmd", "--batch", "2", "--repeats", "5", "--out", "b"],
        tmp.path(),
    );
    assert_ok(&bench, "bench");
    let csv = std::fs::read_to_string(tmp.path().join("b/bench.csv")).unwrap();
    assert!(csv.starts_with("model,layer,path,batch,median_us,iqr_us,weight_bytes\n"));
    assert!(csv.contains(",dense,"));
    assert!(csv.contains(",packed,"));
}

#[test]
fn transfer_zero_epochs_leaves_checkpoint_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_a = write_blobs_config(tmp.path(), 7, 0.1);
    let cfg_b = write_blobs_config(tmp.path(), 8, 0.15);
    let (a, b) = (cfg_a.to_str().unwrap(), cfg_b.to_str().unwrap());

    assert_ok(
        &dgms(&["quantize", "--config", a, "--lr-max", "0.01", "--out", "qa"], tmp.path()),
        "quantize A",
    );
    assert_ok(&dgms(&["train", "--config", b, "--out", "fb"], tmp.path()), "train B");
    assert_ok(
        &dgms(
            &[
                "transfer", "--config", b, "--from", "fb/model.ckpt", "--gm", "qa/model.gm",
                "--epochs", "0", "--out", "t0",
            ],
            tmp.path(),
        ),
        "transfer",
    );
    let src = std::fs::read(tmp.path().join("fb/model.ckpt")).unwrap();
    let out = std::fs::read(tmp.path().join("t0/model.ckpt")).unwrap();
    assert_eq!(src, out, "zero-shot transfer must not update any parameter");

    // One epoch of tuning does change the checkpoint.
    assert_ok(
        &dgms(
            &[
                "transfer", "--config", b, "--from", "fb/model.ckpt", "--gm", "qa/model.gm",
                "--epochs", "1", "--lr-max", "0.01", "--out", "t1",
            ],
            tmp.path(),
        ),
        "transfer E=1",
    );
    let tuned = std::fs::read(tmp.path().join("t1/model.ckpt")).unwrap();
    assert_ne!(src, tuned);
}

#[test]
fn sweep_k_emits_non_increasing_cr() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_blobs_config(tmp.path(), 9, 0.1);
    let out = dgms(
        &[
            "sweep-k", "--config", cfg.to_str().unwrap(), "--list", "4,8,16", "--epochs", "3",
            "--lr-max", "0.01", "--out", "sw",
        ],
        tmp.path(),
    );
    assert_ok(&out, "sweep-k");
    let csv = std::fs::read_to_string(tmp.path().join("sw/sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    let crs: Vec<f64> = rows
        .iter()
        .map(|r| r.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    assert!(crs.windows(2).all(|w| w[1] <= w[0] + 1e-9), "CR not non-increasing: {crs:?}");
}

#[test]
fn identical_seeds_reproduce_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_blobs_config(tmp.path(), 11, 0.1);
    let c = cfg.to_str().unwrap();
    assert_ok(&dgms(&["quantize", "--config", c, "--out", "r1"], tmp.path()), "run 1");
    assert_ok(&dgms(&["quantize", "--config", c, "--out", "r2"], tmp.path()), "run 2");
    let a = std::fs::read(tmp.path().join("r1/model.ckpt")).unwrap();
    let b = std::fs::read(tmp.path().join("r2/model.ckpt")).unwrap();
    assert_eq!(a, b);
    let ga = std::fs::read(tmp.path().join("r1/model.gm")).unwrap();
    let gb = std::fs::read(tmp.path().join("r2/model.gm")).unwrap();
    assert_eq!(ga, gb);
}

#[test]
fn gradcheck_subcommand_reports_groups() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dgms(&["gradcheck", "--seed", "3"], tmp.path());
    assert_ok(&out, "gradcheck");
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    for group in ["w", "b", "mu", "pi", "log_gamma", "log_tau"] {
        assert!(text.contains(group), "missing group {group}: {text}");
    }
    assert!(text.contains("within 1e-4"), "{text}");
}

#[test]
fn exit_codes_distinguish_config_and_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    // Missing config file: exit 1.
    let out = dgms(&["train", "--config", "nope.cfg", "--out", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(1));

    // Unknown key: exit 1.
    std::fs::write(tmp.path().join("bad.cfg"), "modle = mlp\n").unwrap();
    let out = dgms(&["train", "--config", "bad.cfg", "--out", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(1));

    // Missing checkpoint: exit 2.
    let cfg = write_blobs_config(tmp.path(), 13, 0.1);
    let out = dgms(
        &["eval", "--config", cfg.to_str().unwrap(), "--from", "missing.ckpt"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));

    // Corrupt packed file: exit 2.
    std::fs::write(tmp.path().join("bad.qsmd"), b"QSMX").unwrap();
    let out = dgms(&["inspect", "--model", "bad.qsmd"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn activation_quantization_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_blobs_config(tmp.path(), 15, 0.1);
    let c = cfg.to_str().unwrap();
    assert_ok(
        &dgms(&["quantize", "--config", c, "--lr-max", "0.01", "--out", "q"], tmp.path()),
        "quantize",
    );
    // Re-evaluate with 8-bit activations via a config override file.
    let mut text = std::fs::read_to_string(&cfg).unwrap();
    text.push_str("act_bits = 8\n");
    std::fs::write(tmp.path().join("act8.cfg"), text).unwrap();
    let out = dgms(
        &["eval", "--config", "act8.cfg", "--from", "q/model.ckpt", "--gm", "q/model.gm"],
        tmp.path(),
    );
    assert_ok(&out, "eval act8");
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("activations 8"), "{text}");
}
