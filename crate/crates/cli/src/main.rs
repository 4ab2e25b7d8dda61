use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adamixt_core::config::{parse_override, DataSource, ExperimentConfig};
use adamixt_core::experiments::{self as exp, RunResult};
use adamixt_core::training::save_checkpoint;
use adamixt_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "adamixt", version, about = "Mixture of multi-scale transformer experts for time-series forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat key=value configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory for reports and checkpoints.
    #[arg(long, default_value = "out", global = true)]
    out: PathBuf,
    /// Base seed; repeats use seed, seed+1, ...
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of seeds to train and report.
    #[arg(long, global = true)]
    repeats: Option<usize>,
    /// Also write gnuplot-ready .dat files next to each CSV.
    #[arg(long, global = true)]
    dat: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate; writes metrics, history, gates and checkpoints.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Forecast the K steps after the end of every channel.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Full model against the no_gpm, no_dsm and no_awgn variants.
    Ablate,
    /// One trained model per configured scale-factor set.
    Scalestudy,
    /// Per-window inference latency at each configured batch size.
    Bench {
        /// Benchmark this checkpoint instead of a freshly initialized model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write the configured synthetic series as CSV.
    Synth,
    /// Print the fully resolved configuration.
    DumpConfig,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli.common, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut overrides = c.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    if let Some(seed) = c.seed {
        overrides.push(("train.seed".into(), seed.to_string()));
    }
    if let Some(r) = c.repeats {
        overrides.push(("run.repeats".into(), r.to_string()));
    }
    match &c.config {
        Some(path) => ExperimentConfig::load(path, &overrides),
        None => ExperimentConfig::from_kv(overrides.into_iter().collect()),
    }
}

struct Reports<'a> {
    dir: &'a Path,
    dat: bool,
}

impl Reports<'_> {
    fn new(c: &Common) -> Result<Reports<'_>> {
        std::fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
        Ok(Reports { dir: &c.out, dat: c.dat })
    }

    fn table(&self, stem: &str, header: &[&str], rows: &[(String, Vec<f64>)]) -> Result<()> {
        exp::write_table(&self.dir.join(format!("{stem}.csv")), header, rows)?;
        if self.dat {
            exp::write_dat(&self.dir.join(format!("{stem}.dat")), header, rows)?;
        }
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn run(c: &Common, cmd: &Command) -> Result<()> {
    if let Command::DumpConfig = cmd {
        print!("{}", load_config(c)?.dump());
        return Ok(());
    }
    match cmd {
        Command::Train => train(c),
        Command::Eval { checkpoint } => eval(c, checkpoint),
        Command::Predict { checkpoint } => predict(c, checkpoint),
        Command::Ablate => ablate(c),
        Command::Scalestudy => scalestudy(c),
        Command::Bench { checkpoint } => bench(c, checkpoint.as_deref()),
        Command::Synth => synth(c),
        Command::DumpConfig => unreachable!(),
    }
}

fn train(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let ds = exp::load_dataset(&cfg)?;
    let splits = exp::windows(&cfg, &ds)?;
    let runs = exp::run_repeats(&cfg, &splits)?;
    let out = Reports::new(c)?;
    std::fs::write(out.path("config.txt"), cfg.dump()).map_err(|e| Error::io(out.path("config.txt"), e))?;
    write_run_reports(&out, &runs)?;
    for r in &runs {
        let name = if r.seed == cfg.train.seed {
            "checkpoint.admx".to_string()
        } else {
            format!("checkpoint_seed{}.admx", r.seed)
        };
        save_checkpoint(out.path(&name), &r.checkpoint(&cfg))?;
    }
    let mean_mse = runs.iter().map(|r| r.test.mse).sum::<f64>() / runs.len() as f64;
    let mean_base = runs.iter().map(|r| r.baseline.0).sum::<f64>() / runs.len() as f64;
    println!(
        "trained {} run(s); mean test mse {mean_mse:.6}, last-value baseline {mean_base:.6}; reports in {}",
        runs.len(),
        c.out.display()
    );
    Ok(())
}

fn write_run_reports(out: &Reports<'_>, runs: &[RunResult]) -> Result<()> {
    out.table("metrics", &exp::METRICS_COLUMNS, &exp::metrics_rows(runs))?;
    out.table("history", &exp::HISTORY_COLUMNS, &exp::history_rows(runs))?;
    out.table("gates", &exp::GATES_COLUMNS, &exp::gate_rows(&runs[0].outcome.model, runs)?)?;
    let horizon: Vec<(String, Vec<f64>)> = runs
        .iter()
        .map(|r| (format!("seed{}", r.seed), r.test.horizon_mse.clone()))
        .collect();
    let k = horizon[0].1.len();
    let names: Vec<String> = (1..=k).map(|h| format!("h{h}")).collect();
    let mut header = vec!["label"];
    header.extend(names.iter().map(String::as_str));
    out.table("horizon_mse", &header, &horizon)
}

/// The configuration stored in the checkpoint unless `--config` is given, in
/// which case the two must describe the same model.
fn trained(c: &Common, checkpoint: &Path) -> Result<(adamixt_core::AdaMixT, ExperimentConfig)> {
    if c.config.is_some() {
        let cfg = load_config(c)?;
        let (model, _) = exp::load_trained(checkpoint, Some(&cfg))?;
        Ok((model, cfg))
    } else {
        let (model, mut cfg) = exp::load_trained(checkpoint, None)?;
        if !c.set.is_empty() {
            let mut kv = cfg.to_kv();
            for s in &c.set {
                let (k, v) = parse_override(s)?;
                kv.insert(k, v);
            }
            cfg = ExperimentConfig::from_kv(kv)?;
        }
        Ok((model, cfg))
    }
}

fn eval(c: &Common, checkpoint: &Path) -> Result<()> {
    let (model, cfg) = trained(c, checkpoint)?;
    let ds = exp::load_dataset(&cfg)?;
    let splits = exp::windows(&cfg, &ds)?;
    let idx = exp::subsample(splits.test.len(), cfg.max_eval_windows);
    let report = exp::evaluate(&model, &splits.test, idx.as_deref(), cfg.eval_batch, cfg.raw_metrics)?;
    let base = exp::naive_baseline(&splits.test, idx.as_deref(), cfg.model.norm_eps, cfg.raw_metrics)?;
    let out = Reports::new(c)?;
    out.table(
        "metrics",
        &["label", "mse", "mae"],
        &[
            ("model".into(), vec![report.mse, report.mae]),
            ("last_value".into(), vec![base.0, base.1]),
        ],
    )?;
    let gates = report.gate_summary()?;
    let rows: Vec<(String, Vec<f64>)> = model
        .expert_kinds()
        .iter()
        .enumerate()
        .map(|(j, k)| (format!("expert{j}_{k}"), vec![gates.mean[j], gates.std[j]]))
        .collect();
    out.table("gates", &exp::GATES_COLUMNS, &rows)?;
    println!("test mse {:.6} mae {:.6}; last-value mse {:.6} mae {:.6}", report.mse, report.mae, base.0, base.1);
    Ok(())
}

fn predict(c: &Common, checkpoint: &Path) -> Result<()> {
    let (model, cfg) = trained(c, checkpoint)?;
    let ds = exp::load_dataset(&cfg)?;
    let l = model.config().seq_len;
    if ds.len() < l {
        return Err(Error::Data(format!("series of length {} is shorter than L = {l}", ds.len())));
    }
    let inputs: Vec<&[f64]> = (0..ds.channel_count()).map(|ch| &ds.channel(ch)[ds.len() - l..]).collect();
    let forecasts = model.forecast(&inputs)?;
    let k = model.config().pred_len;
    let names: Vec<String> = (1..=k).map(|h| format!("step{h}")).collect();
    let mut header = vec!["label"];
    header.extend(names.iter().map(String::as_str));
    let rows: Vec<(String, Vec<f64>)> = ds.column_names.iter().cloned().zip(forecasts).collect();
    let out = Reports::new(c)?;
    out.table("predictions", &header, &rows)?;
    println!("forecast {k} steps for {} channel(s) into {}", rows.len(), out.path("predictions.csv").display());
    Ok(())
}

fn ablate(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let ds = exp::load_dataset(&cfg)?;
    let splits = exp::windows(&cfg, &ds)?;
    let report = exp::run_ablation(&cfg, &splits)?;
    let out = Reports::new(c)?;
    out.table("ablation", &exp::SUMMARY_COLUMNS, &exp::summary_rows(&report.rows))?;
    for r in &report.rows {
        println!("{:<8} val mse {:.6}", r.label, r.mean_val());
    }
    if let Some(d) = report.awgn_effect_size() {
        println!("effect size of removing the gate (Cohen's d on val mse): {d:.3}");
    }
    Ok(())
}

fn scalestudy(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let ds = exp::load_dataset(&cfg)?;
    let splits = exp::windows(&cfg, &ds)?;
    let rows = exp::run_scalestudy(&cfg, &splits)?;
    let out = Reports::new(c)?;
    out.table("scalestudy", &exp::SUMMARY_COLUMNS, &exp::summary_rows(&rows))?;
    for r in &rows {
        println!("factors {:<10} val mse {:.6}", r.label, r.mean_val());
    }
    Ok(())
}

fn bench(c: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let (model, cfg) = match checkpoint {
        Some(p) => trained(c, p)?,
        None => {
            let cfg = load_config(c)?;
            (exp::build_model(&cfg, cfg.train.seed)?, cfg)
        }
    };
    let ds = exp::load_dataset(&cfg)?;
    let splits = exp::windows(&cfg, &ds)?;
    let rows = exp::bench_inference(&model, &splits.test, &cfg.bench.batches, cfg.bench.warmup, cfg.bench.iters)?;
    let out = Reports::new(c)?;
    out.table("latency", &exp::LATENCY_COLUMNS, &exp::latency_rows(&rows))?;
    for r in &rows {
        println!(
            "batch {:>4}: {:.3} ms/window (p50 {:.3}, p95 {:.3})",
            r.batch,
            r.stats.mean * 1e3,
            r.stats.p50 * 1e3,
            r.stats.p95 * 1e3
        );
    }
    Ok(())
}

fn synth(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    if !matches!(cfg.data, DataSource::Synth(_)) {
        return Err(Error::Config("synth needs data.source=synth".into()));
    }
    let ds = exp::load_dataset(&cfg)?;
    let out = Reports::new(c)?;
    let path = out.path("synthetic.csv");
    ds.write_csv(&path)?;
    println!("wrote {} steps x {} channel(s) to {}", ds.len(), ds.channel_count(), path.display());
    Ok(())
}
