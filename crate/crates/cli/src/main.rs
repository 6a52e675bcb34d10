mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use vpflow_core::eval::{evaluate_baseline, evaluate_flow, histograms, train_baseline, EvalReport, InitialSource};
use vpflow_core::flow::{flow_forward, FlowConfig};
use vpflow_core::io;
use vpflow_core::nn::FlowModel;
use vpflow_core::phase::NORMAL_METHOD;
use vpflow_core::pic::generate_dataset;
use vpflow_core::train::{init_model, train, AdamState, EpochMetrics};
use vpflow_core::{sample_initial, GaussianInitSpec, RngState};

use config::{LoadedConfig, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "vpflow", version, about = "Vlasov-Poisson PIC data and Hamiltonian flow surrogate")]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Debug)]
struct Schedule {
    /// Leapfrog steps L; defaults to the config's flow.steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Leapfrog step size; defaults to the config's flow.dt.
    #[arg(long)]
    dt: Option<f64>,
}

impl Schedule {
    fn resolve(&self, cfg: &RunConfig) -> anyhow::Result<FlowConfig> {
        let flow = match (self.steps, self.dt) {
            (None, None) => cfg.flow_config(),
            (Some(steps), Some(dt)) => FlowConfig { steps, dt },
            _ => bail!("--steps and --dt must be given together"),
        };
        flow.check_horizon(cfg.horizon())?;
        Ok(flow)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the train, validation and test splits.
    Generate(ConfigArg),
    /// Train the flow; writes the best checkpoint and the metrics CSV.
    Train(ConfigArg),
    /// Mean W1 at the final time.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        schedule: Schedule,
        /// Defaults to the config's checkpoint path.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean W1 at intermediate times, without intermediate supervision.
    Interpolate {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        schedule: Schedule,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated; defaults to the config's eval.times.
        #[arg(long, value_delimiter = ',')]
        times: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flow a fresh Gaussian draw and write every leapfrog state.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sigma_q: f64,
        #[arg(long)]
        sigma_p: f64,
        #[arg(long, default_value_t = 64.0)]
        mu_q: f64,
        #[arg(long, default_value_t = 0.0)]
        mu_p: f64,
        #[arg(long, default_value_t = 256)]
        n_particles: usize,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        #[arg(long, default_value_t = 0.04)]
        dt: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the sorted-input MLP baseline.
    Baseline {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sorted truth and model samples of one test example.
    Histogram {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        example: usize,
        #[arg(long, value_delimiter = ',')]
        times: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Writes `<artifact>.meta.json` describing how the artifact was produced.
fn write_meta(artifact: &Path, command: &str, seed: u64, config_sha256: Option<&str>, extra: serde_json::Value) -> anyhow::Result<()> {
    let mut meta = json!({
        "command": command,
        "seed": seed,
        "config_sha256": config_sha256,
        "version": env!("CARGO_PKG_VERSION"),
        "normal_method": NORMAL_METHOD,
    });
    if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
        m.extend(e);
    }
    let text = serde_json::to_string_pretty(&meta)? + "\n";
    io::write_atomic(&with_suffix(artifact, ".meta.json"), text.as_bytes())?;
    Ok(())
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    ensure_parent(path)?;
    io::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn source_name(source: InitialSource) -> &'static str {
    match source {
        InitialSource::Snapshot => "snapshot",
        InitialSource::Fresh { .. } => "fresh",
    }
}

fn cmd_generate(args: &ConfigArg) -> anyhow::Result<()> {
    let loaded = LoadedConfig::load(&args.config)?;
    let cfg = &loaded.config;
    let spec = cfg.dataset_spec();
    let d = &cfg.dataset;
    let splits = [
        ("train", 0u64, d.train_count, &cfg.paths.train_data),
        ("val", 1, d.val_count, &cfg.paths.val_data),
        ("test", 2, d.test_count, &cfg.paths.test_data),
    ];
    for (name, stream, count, path) in splits {
        log::info!("generating {count} {name} examples");
        let data = generate_dataset(&spec, count, cfg.seed, stream)?;
        ensure_parent(path)?;
        io::write_dataset(path, &data)?;
        write_meta(
            path,
            "generate",
            cfg.seed,
            Some(&loaded.sha256),
            json!({
                "split": name,
                "stream": stream,
                "examples": count,
                "n_particles": d.n_particles,
                "grid": cfg.grid,
                "physics": cfg.physics,
                "snapshot_times": data[0].times,
            }),
        )?;
        println!("wrote {} ({count} examples)", path.display());
    }
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_train(args: &ConfigArg) -> anyhow::Result<()> {
    let loaded = LoadedConfig::load(&args.config)?;
    let cfg = &loaded.config;
    let train_set = io::read_dataset(&cfg.paths.train_data)?;
    let val_set = io::read_dataset(&cfg.paths.val_data)?;
    let init = init_model(&cfg.arch(), cfg.model.init_a, cfg.seed)?;
    let tcfg = cfg.train_config();
    let ckpt = &cfg.paths.checkpoint;
    let latest = with_suffix(ckpt, ".last");
    ensure_parent(ckpt)?;
    ensure_parent(&cfg.paths.metrics)?;

    let mut rows: Vec<EpochMetrics> = Vec::new();
    let mut observer = |m: &EpochMetrics, model: &FlowModel, adam: &AdamState, due: bool| -> vpflow_core::Result<()> {
        rows.push(m.clone());
        if due {
            io::save_checkpoint(&latest, model, Some(adam))?;
            io::write_atomic(&cfg.paths.metrics, io::metrics_csv(&rows).as_bytes())?;
        }
        Ok(())
    };
    let out = train(&train_set, &val_set, init, &tcfg, &mut observer)?;
    io::save_checkpoint(ckpt, &out.best, None)?;
    io::save_checkpoint(&latest, &out.last, Some(&out.adam))?;
    io::write_atomic(&cfg.paths.metrics, io::metrics_csv(&out.metrics).as_bytes())?;
    let extra = json!({
        "best_epoch": out.best_epoch,
        "learned_a": out.best.kinetic.a(),
        "skipped_examples": out.skipped.len(),
        "clip_norm": tcfg.clip_norm,
        "train": cfg.train,
        "model": cfg.model,
    });
    write_meta(ckpt, "train", cfg.seed, Some(&loaded.sha256), extra.clone())?;
    write_meta(&cfg.paths.metrics, "train", cfg.seed, Some(&loaded.sha256), extra)?;
    println!(
        "best epoch {} val loss {:.6} learned a {:.4}",
        out.best_epoch,
        out.metrics[out.best_epoch].val_loss,
        out.best.kinetic.a()
    );
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: &Option<PathBuf>) -> anyhow::Result<(FlowModel, PathBuf)> {
    let path = checkpoint.clone().unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let (model, _) = io::load_checkpoint(&path, Some(&cfg.arch()))?;
    Ok((model, path))
}

fn print_report(report: &EvalReport) {
    for r in &report.rows {
        println!("t={} w1_q={:.6} w1_p={:.6} n={}", r.time, r.w1_q, r.w1_p, r.n_examples);
    }
}

fn finish_report(
    report: &EvalReport,
    out: &Path,
    command: &str,
    loaded: &LoadedConfig,
    extra: serde_json::Value,
) -> anyhow::Result<()> {
    write_text(out, &io::report_csv(report))?;
    write_meta(out, command, loaded.config.seed, Some(&loaded.sha256), extra)?;
    print_report(report);
    Ok(())
}

fn cmd_evaluate(args: &ConfigArg, schedule: &Schedule, checkpoint: &Option<PathBuf>, out: &Path) -> anyhow::Result<()> {
    let loaded = LoadedConfig::load(&args.config)?;
    let cfg = &loaded.config;
    let flow = schedule.resolve(cfg)?;
    let (model, ckpt) = load_model(cfg, checkpoint)?;
    let test = io::read_dataset(&cfg.paths.test_data)?;
    let source = cfg.initial_source();
    let report = evaluate_flow(&model, &ckpt.display().to_string(), &test, &flow, &[cfg.horizon()], source)?;
    let extra = json!({ "L": flow.steps, "dt": flow.dt, "initial": source_name(source) });
    finish_report(&report, out, "evaluate", &loaded, extra)
}

fn cmd_interpolate(
    args: &ConfigArg,
    schedule: &Schedule,
    checkpoint: &Option<PathBuf>,
    times: &Option<Vec<f64>>,
    out: &Path,
) -> anyhow::Result<()> {
    let loaded = LoadedConfig::load(&args.config)?;
    let cfg = &loaded.config;
    let flow = schedule.resolve(cfg)?;
    let times = times.clone().unwrap_or_else(|| cfg.eval.times.clone());
    for &t in &times {
        flow.step_index(t)?;
    }
    let (model, ckpt) = load_model(cfg, checkpoint)?;
    let test = io::read_dataset(&cfg.paths.test_data)?;
    let source = cfg.initial_source();
    let report = evaluate_flow(&model, &ckpt.display().to_string(), &test, &flow, &times, source)?;
    let extra = json!({ "L": flow.steps, "dt": flow.dt, "initial": source_name(source) });
    finish_report(&report, out, "interpolate", &loaded, extra)
}

fn cmd_baseline(args: &ConfigArg, out: &Path) -> anyhow::Result<()> {
    let loaded = LoadedConfig::load(&args.config)?;
    let cfg = &loaded.config;
    let train_set = io::read_dataset(&cfg.paths.train_data)?;
    let test = io::read_dataset(&cfg.paths.test_data)?;
    let (model, history) = train_baseline(&train_set, &cfg.baseline_config())?;
    ensure_parent(&cfg.paths.baseline_checkpoint)?;
    io::save_baseline(&cfg.paths.baseline_checkpoint, &model)?;
    let source = cfg.initial_source();
    let report = evaluate_baseline(&model, &test, source)?;
    let extra = json!({
        "params": model.param_count(),
        "final_train_mse": history.last(),
        "baseline": cfg.baseline,
        "initial": source_name(source),
    });
    write_meta(&cfg.paths.baseline_checkpoint, "baseline", cfg.seed, Some(&loaded.sha256), extra.clone())?;
    finish_report(&report, out, "baseline", &loaded, extra)
}

fn cmd_histogram(
    args: &ConfigArg,
    checkpoint: &Option<PathBuf>,
    example: usize,
    times: &Option<Vec<f64>>,
    out: &Path,
) -> anyhow::Result<()> {
    let loaded = LoadedConfig::load(&args.config)?;
    let cfg = &loaded.config;
    let flow = cfg.flow_config();
    let times = times.clone().unwrap_or_else(|| cfg.eval.times.clone());
    let (model, _) = load_model(cfg, checkpoint)?;
    let test = io::read_dataset(&cfg.paths.test_data)?;
    let ex = test
        .get(example)
        .with_context(|| format!("example {example} out of range (test split has {})", test.len()))?;
    let h = histograms(&model, ex, example, &flow, &times, cfg.initial_source())?;
    write_text(out, &io::histograms_csv(&h))?;
    write_meta(out, "histogram", cfg.seed, Some(&loaded.sha256), json!({ "example": example, "times": times }))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_sample(
    checkpoint: &Path,
    spec: GaussianInitSpec,
    n_particles: usize,
    flow: FlowConfig,
    seed: u64,
    out: &Path,
) -> anyhow::Result<()> {
    flow.validate()?;
    let (model, _) = io::load_checkpoint(checkpoint, None)?;
    let mut rng = RngState::new(seed);
    let start = sample_initial(&spec, n_particles, &mut rng)?;
    let traj = flow_forward(&start, &model, &flow)?;
    write_text(out, &io::trajectory_csv(&traj))?;
    let extra = json!({
        "checkpoint": checkpoint.display().to_string(),
        "L": flow.steps,
        "dt": flow.dt,
        "n_particles": n_particles,
        "spec": { "mu_q": spec.mu_q, "sigma_q": spec.sigma_q, "mu_p": spec.mu_p, "sigma_p": spec.sigma_p },
    });
    write_meta(out, "sample", seed, None, extra)?;
    println!("wrote {} ({} states)", out.display(), traj.states.len());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Generate(c) => cmd_generate(c),
        Command::Train(c) => cmd_train(c),
        Command::Evaluate {
            config,
            schedule,
            checkpoint,
            out,
        } => cmd_evaluate(config, schedule, checkpoint, out),
        Command::Interpolate {
            config,
            schedule,
            checkpoint,
            times,
            out,
        } => cmd_interpolate(config, schedule, checkpoint, times, out),
        Command::Sample {
            checkpoint,
            sigma_q,
            sigma_p,
            mu_q,
            mu_p,
            n_particles,
            steps,
            dt,
            seed,
            out,
        } => {
            let spec = GaussianInitSpec::new(*mu_q, *sigma_q, *mu_p, *sigma_p)?;
            cmd_sample(checkpoint, spec, *n_particles, FlowConfig { steps: *steps, dt: *dt }, *seed, out)
        }
        Command::Baseline { config, out } => cmd_baseline(config, out),
        Command::Histogram {
            config,
            checkpoint,
            example,
            times,
            out,
        } => cmd_histogram(config, checkpoint, *example, times, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
