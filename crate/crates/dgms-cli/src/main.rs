//! Command-line frontend: the full pipeline as subcommands over a flat
//! key=value config file. Exit codes: 1 config error, 2 data error,
//! 3 numeric failure.

mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use config::Config;
use dgms::checkpoint::{load_checkpoint, load_gm, save_checkpoint, save_gm};
use dgms::error::{Error, Result};
use dgms::kernels::{bench, write_bench_csv, BenchConfig};
use dgms::metrics::{census_from_model, codebook_overhead, compression_rate, CodebookAccounting};
use dgms::model::{calibrate_activations, ActQuantizer, Model};
use dgms::pack::{export_packed, inspect_packed, read_packed_model, write_packed_model};
use dgms::train::{
    evaluate, evaluate_act, grad_check, train, GradCheckConfig, MetricsReport, TrainState,
    write_metrics_csv,
};

#[derive(Parser)]
#[command(name = "dgms", version, about = "Gaussian-mixture weight sharing: train, quantize, pack, run")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Run configuration file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override: weight bit-width.
    #[arg(long)]
    bits: Option<u8>,
    /// Override: component count K+1.
    #[arg(long)]
    k: Option<usize>,
    /// Override: training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override: RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override: peak learning rate.
    #[arg(long)]
    lr_max: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the FP32 baseline.
    Train(CommonArgs),
    /// Co-tune weights and mixture state (from scratch or from a baseline).
    Quantize {
        #[command(flatten)]
        common: CommonArgs,
        /// Baseline checkpoint to start from.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Accuracy and compression metrics of a checkpoint.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        from: PathBuf,
        /// Mixture state file; enables hard-quantized evaluation.
        #[arg(long)]
        gm: Option<PathBuf>,
    },
    /// Export a packed model file from a quantized checkpoint.
    Export {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        gm: PathBuf,
    },
    /// Time dense vs packed kernels over a packed model.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        /// Packed model file.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        /// Kernel threads (only 1 is implemented).
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Apply mixture state from another domain, optionally fine-tune.
    Transfer {
        #[command(flatten)]
        common: CommonArgs,
        /// Target-domain checkpoint.
        #[arg(long)]
        from: PathBuf,
        /// Source-domain mixture state.
        #[arg(long)]
        gm: PathBuf,
    },
    /// Quantize across a list of component counts; emit accuracy/CR table.
    SweepK {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated K+1 values, e.g. 4,8,16.
        #[arg(long)]
        list: String,
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient group.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 4)]
        gm_components: usize,
        #[arg(long, default_value_t = 0.05)]
        tau: f64,
        #[arg(long, default_value_t = 0.05)]
        gamma: f64,
    },
    /// Dump packed model headers.
    Inspect {
        /// Packed model file.
        #[arg(long)]
        model: PathBuf,
    },
}

fn load_config(common: &CommonArgs) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(b) = common.bits {
        cfg.set("bits", b.to_string());
    }
    if let Some(k) = common.k {
        cfg.set("k", k.to_string());
    }
    if let Some(e) = common.epochs {
        cfg.set("epochs", e.to_string());
    }
    if let Some(s) = common.seed {
        cfg.set("seed", s.to_string());
    }
    if let Some(lr) = common.lr_max {
        cfg.set("lr_max", format!("{lr}"));
    }
    Ok(cfg)
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cli: cannot create output directory {}: {e}", dir.display())))
}

fn print_reports(reports: &[MetricsReport]) {
    for r in reports {
        println!(
            "epoch {:>3}  loss {:<10.6} top1 {:<7.4} mse {:<12.6e} cr {:.3}",
            r.epoch, r.loss, r.top1, r.mse, r.cr
        );
    }
}

fn state_from_config(cfg: &Config, from: Option<&Path>) -> Result<TrainState> {
    let spec = cfg.model_spec()?;
    let seed = cfg.seed()?;
    let model = Model::init(spec, seed)?;
    match from {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            TrainState::from_checkpoint(model, &ckpt)
        }
        None => Ok(TrainState::new_fp32(model, seed)),
    }
}

fn cmd_train(common: &CommonArgs) -> Result<()> {
    let cfg = load_config(common)?;
    ensure_out(&common.out)?;
    let (train_ds, test_ds) = cfg.load_dataset()?;
    let mut state = state_from_config(&cfg, None)?;
    let tc = cfg.train_config(train_ds.len(), cfg.epochs()?)?;
    let reports = train(&mut state, &train_ds, &test_ds, &tc)?;
    print_reports(&reports);
    save_checkpoint(&common.out.join("model.ckpt"), &state.to_checkpoint())?;
    write_metrics_csv(&common.out.join("train.csv"), &reports)?;
    println!("wrote {}", common.out.join("model.ckpt").display());
    Ok(())
}

fn cmd_quantize(common: &CommonArgs, from: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    ensure_out(&common.out)?;
    let (train_ds, test_ds) = cfg.load_dataset()?;
    let mut state = state_from_config(&cfg, from)?;
    let spec = state.model.spec.clone();
    let policy = cfg.policy(&spec)?;
    state.quantize_kmeans(policy, &cfg.gm_init_options()?)?;
    if cfg.tau_learned()? {
        if let Some(q) = &mut state.quant {
            for gm in q.gms.values_mut() {
                gm.train_tau = true;
            }
        }
    }
    let tc = cfg.train_config(train_ds.len(), cfg.epochs()?)?;
    let reports = train(&mut state, &train_ds, &test_ds, &tc)?;
    print_reports(&reports);
    save_checkpoint(&common.out.join("model.ckpt"), &state.to_checkpoint())?;
    let gms = &state.quant.as_ref().expect("quant state").gms;
    save_gm(&common.out.join("model.gm"), gms)?;
    write_metrics_csv(&common.out.join("train.csv"), &reports)?;
    println!(
        "wrote {} and {}",
        common.out.join("model.ckpt").display(),
        common.out.join("model.gm").display()
    );
    Ok(())
}

fn cmd_eval(common: &CommonArgs, from: &Path, gm_path: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let (train_ds, test_ds) = cfg.load_dataset()?;
    let mut state = state_from_config(&cfg, Some(from))?;
    let spec = state.model.spec.clone();
    if let Some(p) = gm_path {
        let gms = load_gm(p)?;
        state.apply_gm(cfg.policy(&spec)?, gms)?;
    }

    let act_bits = cfg.act_bits()?;
    let act = if act_bits < 32 {
        let over = state.hard_weight_override();
        let over_ref = if over.is_empty() { None } else { Some(&over) };
        let idx: Vec<usize> = (0..train_ds.len().min(256)).collect();
        let batches: Vec<_> = idx.chunks(64).map(|c| train_ds.batch(c).0).collect();
        let calib = calibrate_activations(&state.model, over_ref, &batches)?;
        Some(ActQuantizer { bits: act_bits, calib })
    } else {
        None
    };

    let (top1, loss) = evaluate_act(&state, &test_ds, act.as_ref())?;
    println!("test examples: {}", test_ds.len());
    println!("top1: {top1:.4}");
    println!("loss: {loss:.6}");
    match &state.quant {
        Some(q) => {
            let census = census_from_model(&state.model, &q.gms, &q.policy)?;
            let cr = compression_rate(&census, q.policy.bits, CodebookAccounting::Included);
            let nz = dgms::metrics::nonzero_params(&census);
            println!("bits: {} (activations {})", q.policy.bits, act_bits);
            println!("nonzero params: {nz} / {}", census.total_params());
            println!("compression rate: {cr:.3}");
            println!("codebook overhead: {:.6}%", codebook_overhead(&census, q.policy.bits) * 100.0);
        }
        None => println!("fp32 evaluation (no mixture state applied)"),
    }
    Ok(())
}

fn cmd_export(common: &CommonArgs, from: &Path, gm_path: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    ensure_out(&common.out)?;
    let mut state = state_from_config(&cfg, Some(from))?;
    let spec = state.model.spec.clone();
    let gms = load_gm(gm_path)?;
    state.apply_gm(cfg.policy(&spec)?, gms)?;
    let packed = export_packed(&state)?;
    let path = common.out.join("model.qsmd");
    write_packed_model(&path, &packed)?;
    println!("wrote {} ({} layers)", path.display(), packed.layers.len());
    Ok(())
}

fn cmd_bench(common: &CommonArgs, model_path: &Path, batch: usize, repeats: usize, threads: usize) -> Result<()> {
    ensure_out(&common.out)?;
    let packed = read_packed_model(model_path)?;
    let name = model_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model")
        .to_string();
    let report = bench(
        &name,
        &packed,
        &BenchConfig { batch, repeats, threads, ..Default::default() },
    )?;
    for row in &report.rows {
        println!(
            "{:<10} {:<12} {:<7} batch {:<3} median {:>10.2} us  iqr {:>8.2} us  weight bytes {}",
            row.model, row.layer, row.path, row.batch, row.median_us, row.iqr_us, row.weight_bytes
        );
    }
    if report.low_confidence {
        println!("note: low-confidence timings (increase --repeats)");
    }
    let csv = common.out.join("bench.csv");
    write_bench_csv(&csv, &report)?;
    println!("wrote {}", csv.display());
    Ok(())
}

fn cmd_transfer(common: &CommonArgs, from: &Path, gm_path: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    ensure_out(&common.out)?;
    let (train_ds, test_ds) = cfg.load_dataset()?;
    let mut state = state_from_config(&cfg, Some(from))?;
    let spec = state.model.spec.clone();
    let gms = load_gm(gm_path)?;
    state.apply_gm(cfg.policy(&spec)?, gms)?;

    let epochs = cfg.epochs()?;
    let reports = if epochs == 0 {
        let (top1, loss) = evaluate(&state, &test_ds)?;
        println!("zero-shot top1 {top1:.4} loss {loss:.6}");
        vec![]
    } else {
        let tc = cfg.train_config(train_ds.len(), epochs)?;
        let reports = train(&mut state, &train_ds, &test_ds, &tc)?;
        print_reports(&reports);
        reports
    };
    save_checkpoint(&common.out.join("model.ckpt"), &state.to_checkpoint())?;
    save_gm(&common.out.join("model.gm"), &state.quant.as_ref().expect("quant state").gms)?;
    if !reports.is_empty() {
        write_metrics_csv(&common.out.join("train.csv"), &reports)?;
    }
    Ok(())
}

fn storage_bits(k_plus_one: usize) -> u8 {
    let mut b = 1u8;
    while (1usize << b) < k_plus_one {
        b += 1;
    }
    b
}

fn cmd_sweep_k(common: &CommonArgs, list: &str, from: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    ensure_out(&common.out)?;
    let ks: Vec<usize> = list
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("sweep-k: bad list {list:?}")))?;
    let (train_ds, test_ds) = cfg.load_dataset()?;
    let base = state_from_config(&cfg, from)?;

    let mut rows = Vec::new();
    println!("{:<6} {:<6} {:<8} {:<8}", "k+1", "bits", "top1", "cr");
    for &kp1 in &ks {
        let mut state = base.clone();
        let spec = state.model.spec.clone();
        let mut c = cfg.clone();
        c.set("k", kp1.to_string());
        let policy = c.policy(&spec)?;
        state.quantize_kmeans(policy, &c.gm_init_options()?)?;
        let tc = c.train_config(train_ds.len(), c.epochs()?)?;
        train(&mut state, &train_ds, &test_ds, &tc)?;
        let (top1, _) = evaluate(&state, &test_ds)?;
        let q = state.quant.as_ref().expect("quant state");
        let census = census_from_model(&state.model, &q.gms, &q.policy)?;
        // Accounting uses the smallest bit-width that can index K+1
        // centroids; fewer components store smaller.
        let sbits = storage_bits(kp1);
        let cr = compression_rate(&census, sbits, CodebookAccounting::Included);
        println!("{kp1:<6} {sbits:<6} {top1:<8.4} {cr:<8.3}");
        rows.push((kp1, sbits, top1, cr));
    }
    let mut out = String::from("k_plus_one,bits,top1,cr\n");
    for (k, b, t, c) in &rows {
        out.push_str(&format!("{k},{b},{t:.4},{c:.4}\n"));
    }
    std::fs::write(common.out.join("sweep.csv"), out)?;
    println!("wrote {}", common.out.join("sweep.csv").display());
    Ok(())
}

fn cmd_gradcheck(common: &CommonArgs, gm_components: usize, tau: f64, gamma: f64) -> Result<()> {
    let cfg = load_config(common)?;
    let gc = GradCheckConfig {
        k_plus_one: gm_components,
        tau,
        gamma,
        ..Default::default()
    };
    let report = grad_check(&gc, cfg.seed()?)?;
    for (group, err) in &report.groups {
        println!("{group:<12} max rel err {err:.3e}");
    }
    if report.ill_conditioned {
        println!("note: temperature is in the saturated regime; finite differences unreliable");
        return Ok(());
    }
    if report.max_error() > 1e-4 {
        return Err(Error::Numeric(format!(
            "gradcheck: max relative error {:.3e} exceeds 1e-4",
            report.max_error()
        )));
    }
    println!("all groups within 1e-4");
    Ok(())
}

fn cmd_inspect(model_path: &Path) -> Result<()> {
    let packed = read_packed_model(model_path)?;
    print!("{}", inspect_packed(&packed));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Train(common) => cmd_train(common),
        Cmd::Quantize { common, from } => cmd_quantize(common, from.as_deref()),
        Cmd::Eval { common, from, gm } => cmd_eval(common, from, gm.as_deref()),
        Cmd::Export { common, from, gm } => cmd_export(common, from, gm),
        Cmd::Bench { common, model, batch, repeats, threads } => {
            cmd_bench(common, model, *batch, *repeats, *threads)
        }
        Cmd::Transfer { common, from, gm } => cmd_transfer(common, from, gm),
        Cmd::SweepK { common, list, from } => cmd_sweep_k(common, list, from.as_deref()),
        Cmd::Gradcheck { common, gm_components, tau, gamma } => {
            cmd_gradcheck(common, *gm_components, *tau, *gamma)
        }
        Cmd::Inspect { model } => cmd_inspect(model),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
