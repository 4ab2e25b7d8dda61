//! End-to-end runs: training with repeats, evaluation against the last-value
//! baseline, ablation and scale-factor studies, inference benchmarks, and the
//! CSV reports they emit.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::config::{Ablation, DataSource, ExperimentConfig};
use crate::data::{load_csv, make_windows, synth_multiperiodic, RawDataset, Splits, WindowSet};
use crate::error::{Error, Result};
use crate::experts::import_backbone;
use crate::metrics::{cohens_d, mean, sample_std, ErrorAccumulator, GateSummary, LatencyStats};
use crate::model::{AdaMixT, ModelConfig};
use crate::numerics::ParamStore;
use crate::preprocess::instance_normalize;
use crate::training::{load_checkpoint, train_on, Checkpoint, TrainOutcome};

pub const THREADS_ENV: &str = "ADAMIXT_THREADS";

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<RawDataset> {
    match &cfg.data {
        DataSource::Synth(spec) => synth_multiperiodic(spec),
        DataSource::Csv { path, schema } => load_csv(path, schema).map(|(ds, _)| ds),
    }
}

pub fn windows<'a>(cfg: &ExperimentConfig, ds: &'a RawDataset) -> Result<Splits<'a>> {
    make_windows(
        ds,
        &cfg.split_spec(),
        cfg.model.seq_len,
        cfg.model.pred_len,
        cfg.train.window_stride,
    )
}

/// `max` evenly spaced indices out of `len`, or `None` when no cap applies.
pub fn subsample(len: usize, max: usize) -> Option<Vec<usize>> {
    (max > 0 && len > max).then(|| (0..max).map(|i| i * len / max).collect())
}

/// Fresh model for `cfg` (ablations applied) with any configured backbone
/// imports.
pub fn build_model(cfg: &ExperimentConfig, seed: u64) -> Result<AdaMixT> {
    let mut model = AdaMixT::new(cfg.resolved_model()?, seed)?;
    let kept = cfg.kept_experts();
    for (&j, import) in &cfg.backbones {
        let Some(dst) = kept.iter().position(|&k| k == j) else {
            continue;
        };
        let ckpt = load_checkpoint(&import.checkpoint)?;
        let mut source = ParamStore::new();
        for (name, t) in &ckpt.tensors {
            source.insert(name.clone(), t.clone(), false);
        }
        let depth = cfg.model.experts[j].depth;
        import_backbone(model.params_mut(), dst, &source, import.from, depth)?;
    }
    Ok(model)
}

/// Error metrics, per-horizon MSE and gate weights of a model on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mse: f64,
    pub mae: f64,
    pub horizon_mse: Vec<f64>,
    /// One gate vector per evaluated window.
    pub gates: Vec<Vec<f64>>,
}

impl EvalReport {
    pub fn gate_summary(&self) -> Result<GateSummary> {
        GateSummary::from_rows(&self.gates)
    }
}

fn index_list(set: &WindowSet<'_>, indices: Option<&[usize]>) -> Vec<usize> {
    indices.map_or_else(|| (0..set.len()).collect(), <[usize]>::to_vec)
}

/// Evaluates `model`; metrics are in normalized space unless `raw`.
pub fn evaluate(
    model: &AdaMixT,
    set: &WindowSet<'_>,
    indices: Option<&[usize]>,
    batch_size: usize,
    raw: bool,
) -> Result<EvalReport> {
    let k = model.config().pred_len;
    let mut total = ErrorAccumulator::default();
    let mut horizon = vec![0.0; k];
    let mut gates = Vec::new();
    for chunk in index_list(set, indices).chunks(batch_size.max(1)) {
        let ws: Vec<_> = chunk.iter().map(|&i| set.get(i)).collect();
        let batch = model.batch(&ws)?;
        let pred = model.predict(&batch)?;
        let n = model.expert_count();
        gates.extend(pred.gates.data().chunks(n).map(|r| r.iter().map(|&g| g as f64).collect::<Vec<f64>>()));
        let targets = batch.targets.as_ref().expect("windows carry targets");
        let rows: Vec<Vec<f64>> = if raw {
            pred.denormalized(&batch.stats)
        } else {
            pred.normalized.data().chunks(k).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
        };
        for (b, row) in rows.iter().enumerate() {
            for (h, &p) in row.iter().enumerate() {
                let t = if raw { ws[b].target[h] } else { targets.data()[b * k + h] as f64 };
                if !p.is_finite() {
                    return Err(Error::Numeric(format!("non-finite forecast for window {}", chunk[b])));
                }
                total.push(p, t);
                horizon[h] += (p - t) * (p - t);
            }
        }
    }
    let (mse, mae) = total.finish()?;
    let count = (total.count() / k) as f64;
    horizon.iter_mut().for_each(|h| *h /= count);
    Ok(EvalReport {
        mse,
        mae,
        horizon_mse: horizon,
        gates,
    })
}

/// MSE and MAE of repeating each window's last observation.
pub fn naive_baseline(set: &WindowSet<'_>, indices: Option<&[usize]>, eps: f64, raw: bool) -> Result<(f64, f64)> {
    let mut acc = ErrorAccumulator::default();
    for i in index_list(set, indices) {
        let w = set.get(i);
        let last = *w.input.last().expect("nonempty window");
        let (_, stats) = instance_normalize(w.input, eps);
        for &t in w.target {
            if raw {
                acc.push(last, t);
            } else {
                acc.push(stats.normalize_value(last), stats.normalize_value(t));
            }
        }
    }
    acc.finish()
}

/// One training run and its test-split evaluation.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub test: EvalReport,
    pub baseline: (f64, f64),
    pub train_seconds: f64,
}

impl RunResult {
    pub fn val_mse(&self) -> f64 {
        self.outcome.best_val
    }

    pub fn checkpoint(&self, cfg: &ExperimentConfig) -> Checkpoint {
        let mut cfg = cfg.clone();
        cfg.train.seed = self.seed;
        let o = &self.outcome;
        Checkpoint::new(
            cfg.dump(),
            &o.model,
            o.adam.clone(),
            o.rng,
            o.best_epoch as u64,
            o.best_val,
        )
    }
}

/// Trains with `seed` and evaluates on the test split.
pub fn run_training(cfg: &ExperimentConfig, splits: &Splits<'_>, seed: u64) -> Result<RunResult> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let model = build_model(cfg, seed)?;
    let train_idx = subsample(splits.train.len(), cfg.max_train_windows);
    let val_idx = subsample(splits.val.len(), cfg.max_eval_windows);
    let test_idx = subsample(splits.test.len(), cfg.max_eval_windows);
    let start = Instant::now();
    let outcome = train_on(
        model,
        &train_cfg,
        &splits.train,
        train_idx.as_deref(),
        &splits.val,
        val_idx.as_deref(),
    )?;
    let train_seconds = start.elapsed().as_secs_f64();
    let test = evaluate(&outcome.model, &splits.test, test_idx.as_deref(), cfg.eval_batch, cfg.raw_metrics)?;
    let baseline = naive_baseline(&splits.test, test_idx.as_deref(), cfg.model.norm_eps, cfg.raw_metrics)?;
    log::info!(
        "seed {seed}: best val {:.5} (epoch {}), test mse {:.5}, baseline {:.5}",
        outcome.best_val,
        outcome.best_epoch,
        test.mse,
        baseline.0
    );
    Ok(RunResult {
        seed,
        outcome,
        test,
        baseline,
        train_seconds,
    })
}

/// Worker count from `ADAMIXT_THREADS`; `None` leaves the choice to rayon.
pub fn thread_limit() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV}=`{v}` must be a positive integer"))),
        },
    }
}

/// Runs `f` for seeds `base..base + repeats` concurrently; results come back
/// in seed order.
pub fn run_seeds<T: Send>(base: u64, repeats: usize, f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_limit()? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| (0..repeats as u64).into_par_iter().map(|r| f(base + r)).collect())
}

pub fn run_repeats(cfg: &ExperimentConfig, splits: &Splits<'_>) -> Result<Vec<RunResult>> {
    run_seeds(cfg.train.seed, cfg.repeats, |seed| run_training(cfg, splits, seed))
}

/// Mean and spread of one configuration over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedSummary {
    pub label: String,
    pub experts: usize,
    pub val_mse: Vec<f64>,
    pub test_mse: Vec<f64>,
    pub test_mae: Vec<f64>,
}

impl SeedSummary {
    fn from_runs(label: String, experts: usize, runs: &[RunResult]) -> Self {
        Self {
            label,
            experts,
            val_mse: runs.iter().map(RunResult::val_mse).collect(),
            test_mse: runs.iter().map(|r| r.test.mse).collect(),
            test_mae: runs.iter().map(|r| r.test.mae).collect(),
        }
    }

    pub fn mean_val(&self) -> f64 {
        mean(&self.val_mse)
    }

    fn row(&self) -> (String, Vec<f64>) {
        (
            self.label.clone(),
            vec![
                self.experts as f64,
                self.mean_val(),
                sample_std(&self.val_mse),
                mean(&self.test_mse),
                mean(&self.test_mae),
            ],
        )
    }
}

pub const SUMMARY_COLUMNS: [&str; 6] = ["label", "experts", "val_mse_mean", "val_mse_std", "test_mse_mean", "test_mae_mean"];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<SeedSummary>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&SeedSummary> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Cohen's d of no_awgn val MSE relative to full; positive means removing
    /// the gate hurt.
    pub fn awgn_effect_size(&self) -> Option<f64> {
        Some(cohens_d(&self.row("full")?.val_mse, &self.row("no_awgn")?.val_mse))
    }
}

/// Trains the full model and each single-switch ablation on the same seeds.
/// Variants that would remove every expert are skipped.
pub fn run_ablation(cfg: &ExperimentConfig, splits: &Splits<'_>) -> Result<AblationReport> {
    let variants = [
        ("full", Ablation::default()),
        (
            "no_gpm",
            Ablation {
                no_gpm: true,
                ..Default::default()
            },
        ),
        (
            "no_dsm",
            Ablation {
                no_dsm: true,
                ..Default::default()
            },
        ),
        (
            "no_awgn",
            Ablation {
                no_awgn: true,
                ..Default::default()
            },
        ),
    ];
    let mut rows = Vec::new();
    for (label, ablation) in variants {
        let mut v = cfg.clone();
        v.ablation = ablation;
        if v.kept_experts().is_empty() {
            log::info!("skipping {label}: no experts would remain");
            continue;
        }
        if ablation != Ablation::default() && v.kept_experts().len() == cfg.model.experts.len() && !ablation.no_awgn {
            log::info!("skipping {label}: no expert of that kind is configured");
            continue;
        }
        let runs = run_repeats(&v, splits)?;
        rows.push(SeedSummary::from_runs(label.into(), v.kept_experts().len(), &runs));
    }
    Ok(AblationReport { rows })
}

/// One trained configuration per scale set, each over the same seeds.
pub fn run_scalestudy(cfg: &ExperimentConfig, splits: &Splits<'_>) -> Result<Vec<SeedSummary>> {
    let mut variants = Vec::with_capacity(cfg.scale_sets.len());
    for set in &cfg.scale_sets {
        let mut v = cfg.clone();
        for (e, &f) in v.model.experts.iter_mut().zip(set) {
            e.scale = f;
        }
        let label = set.iter().map(ToString::to_string).collect::<Vec<_>>().join("|");
        v.validate()
            .map_err(|e| Error::Config(format!("scale set {label}: {e}")))?;
        variants.push((label, v));
    }
    variants
        .into_iter()
        .map(|(label, v)| {
            let runs = run_repeats(&v, splits)?;
            Ok(SeedSummary::from_runs(label, v.kept_experts().len(), &runs))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyRow {
    pub batch: usize,
    pub stats: LatencyStats,
}

/// Per-window forward latency at each batch size. Warmup iterations are not
/// timed.
pub fn bench_inference(
    model: &AdaMixT,
    set: &WindowSet<'_>,
    batches: &[usize],
    warmup: usize,
    iters: usize,
) -> Result<Vec<LatencyRow>> {
    if set.is_empty() {
        return Err(Error::Data("no windows to benchmark".into()));
    }
    batches
        .iter()
        .map(|&b| {
            let ws: Vec<_> = (0..b).map(|i| set.get(i % set.len())).collect();
            let inputs: Vec<&[f64]> = ws.iter().map(|w| w.input).collect();
            let mut samples = Vec::with_capacity(iters);
            for it in 0..warmup + iters {
                let start = Instant::now();
                let out = model.forecast(&inputs)?;
                let secs = start.elapsed().as_secs_f64();
                std::hint::black_box(out);
                if it >= warmup {
                    samples.push(secs / b as f64);
                }
            }
            Ok(LatencyRow {
                batch: b,
                stats: LatencyStats::from_samples(&samples)?,
            })
        })
        .collect()
}

/// Restores a trained model. When `expect` is given its resolved model must
/// equal the one stored in the checkpoint.
pub fn load_trained(path: &Path, expect: Option<&ExperimentConfig>) -> Result<(AdaMixT, ExperimentConfig)> {
    let ckpt = load_checkpoint(path)?;
    let stored = ExperimentConfig::from_text(&ckpt.config)
        .map_err(|e| Error::Format(format!("checkpoint config echo is unreadable: {e}")))?;
    let model_cfg = stored.resolved_model()?;
    if let Some(cfg) = expect {
        if let Some(diff) = model_difference(&model_cfg, &cfg.resolved_model()?) {
            return Err(Error::ConfigMismatch(format!("{}: {diff}", path.display())));
        }
    }
    Ok((ckpt.restore_model(&model_cfg)?, stored))
}

/// First architectural difference between a stored and a requested model.
/// Dropout is ignored since it has no effect at inference.
fn model_difference(stored: &ModelConfig, want: &ModelConfig) -> Option<String> {
    let strip = |m: &ModelConfig| {
        let mut m = m.clone();
        m.experts.iter_mut().for_each(|e| e.dropout = 0.0);
        m
    };
    let (a, b) = (strip(stored), strip(want));
    if a == b {
        return None;
    }
    let fields = [
        ("experts", a.experts.len().to_string(), b.experts.len().to_string()),
        ("seq_len", a.seq_len.to_string(), b.seq_len.to_string()),
        ("pred_len", a.pred_len.to_string(), b.pred_len.to_string()),
        ("patch_len", a.patch_len.to_string(), b.patch_len.to_string()),
        ("stride", a.stride.to_string(), b.stride.to_string()),
        ("gate_hidden", a.gate_hidden.to_string(), b.gate_hidden.to_string()),
        ("fusion_dim", a.fusion_dim.to_string(), b.fusion_dim.to_string()),
        ("gating", a.gating.to_string(), b.gating.to_string()),
        ("norm_eps", a.norm_eps.to_string(), b.norm_eps.to_string()),
    ];
    if let Some((name, x, y)) = fields.iter().find(|(_, x, y)| x != y) {
        return Some(format!("checkpoint has {name}={x}, configuration asks for {name}={y}"));
    }
    let j = a.experts.iter().zip(&b.experts).position(|(x, y)| x != y)?;
    Some(format!(
        "expert {j} differs: checkpoint {:?}, configuration {:?}",
        a.experts[j], b.experts[j]
    ))
}

/// Writes a CSV whose first column is a text label and the rest numbers.
pub fn write_table(path: &Path, header: &[&str], rows: &[(String, Vec<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for (label, values) in rows {
        let mut rec = vec![label.clone()];
        rec.extend(values.iter().map(ToString::to_string));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Same table as gnuplot-ready whitespace-separated columns.
pub fn write_dat(path: &Path, header: &[&str], rows: &[(String, Vec<f64>)]) -> Result<()> {
    let mut out = format!("# {}\n", header.join(" "));
    for (label, values) in rows {
        out.push_str(&label.replace(char::is_whitespace, "_"));
        for v in values {
            out.push_str(&format!(" {v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

pub const METRICS_COLUMNS: [&str; 8] = [
    "label",
    "seed",
    "test_mse",
    "test_mae",
    "val_mse",
    "baseline_mse",
    "baseline_mae",
    "train_seconds",
];

/// Per-seed rows plus a `mean` row.
pub fn metrics_rows(runs: &[RunResult]) -> Vec<(String, Vec<f64>)> {
    let mut rows: Vec<(String, Vec<f64>)> = runs
        .iter()
        .map(|r| {
            (
                format!("seed{}", r.seed),
                vec![
                    r.seed as f64,
                    r.test.mse,
                    r.test.mae,
                    r.val_mse(),
                    r.baseline.0,
                    r.baseline.1,
                    r.train_seconds,
                ],
            )
        })
        .collect();
    let width = rows.first().map_or(0, |r| r.1.len());
    let means = (0..width)
        .map(|c| mean(&rows.iter().map(|r| r.1[c]).collect::<Vec<_>>()))
        .collect();
    rows.push(("mean".into(), means));
    rows
}

pub const HISTORY_COLUMNS: [&str; 7] = ["label", "seed", "epoch", "steps", "train_loss", "val_mse", "improved"];

pub fn history_rows(runs: &[RunResult]) -> Vec<(String, Vec<f64>)> {
    runs.iter()
        .flat_map(|r| {
            r.outcome.history.iter().map(move |h| {
                (
                    format!("seed{}", r.seed),
                    vec![
                        r.seed as f64,
                        h.epoch as f64,
                        h.steps as f64,
                        h.train_loss,
                        h.val_mse,
                        f64::from(u8::from(h.improved)),
                    ],
                )
            })
        })
        .collect()
}

pub const GATES_COLUMNS: [&str; 3] = ["label", "mean", "std"];

/// Per-expert gate statistics pooled over every run's test windows.
pub fn gate_rows(model: &AdaMixT, runs: &[RunResult]) -> Result<Vec<(String, Vec<f64>)>> {
    let all: Vec<Vec<f64>> = runs.iter().flat_map(|r| r.test.gates.iter().cloned()).collect();
    let s = GateSummary::from_rows(&all)?;
    Ok(model
        .expert_kinds()
        .iter()
        .enumerate()
        .map(|(j, kind)| (format!("expert{j}_{kind}"), vec![s.mean[j], s.std[j]]))
        .collect())
}

pub const LATENCY_COLUMNS: [&str; 6] = ["label", "batch", "mean_s", "p50_s", "p95_s", "windows_per_s"];

pub fn latency_rows(rows: &[LatencyRow]) -> Vec<(String, Vec<f64>)> {
    rows.iter()
        .map(|r| {
            (
                format!("batch{}", r.batch),
                vec![r.batch as f64, r.stats.mean, r.stats.p50, r.stats.p95, r.stats.throughput],
            )
        })
        .collect()
}

pub fn summary_rows(rows: &[SeedSummary]) -> Vec<(String, Vec<f64>)> {
    rows.iter().map(SeedSummary::row).collect()
}
