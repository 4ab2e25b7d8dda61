//! Flat `key=value` experiment configuration with dotted sections.
//!
//! ```text
//! # comment
//! model.seq_len = 96
//! expert.0.kind = gpm_frozen
//! expert.1.scale = 1/2
//! ```
//!
//! Every key has a default; unknown keys are errors. [`ExperimentConfig::dump`]
//! prints the fully resolved configuration in canonical (sorted) form.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{CsvSchema, RowPolicy, SplitSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::experts::{ExpertKind, ExpertProfile};
use crate::fusion::Gating;
use crate::model::ModelConfig;
use crate::preprocess::ScaleFactor;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synth(SynthSpec),
    Csv { path: PathBuf, schema: CsvSchema },
}

#[derive(Clone, Debug, PartialEq)]
pub enum SplitChoice {
    Ratio([f64; 3]),
    /// ETT month borders; 1 step per hour for ETTh, 4 for ETTm.
    Ett { steps_per_hour: usize },
    Borders([(usize, usize); 3]),
}

impl SplitChoice {
    pub fn spec(&self, seq_len: usize) -> SplitSpec {
        match self {
            SplitChoice::Ratio(r) => SplitSpec::Ratio(*r),
            SplitChoice::Ett { steps_per_hour } => SplitSpec::ett(*steps_per_hour, seq_len),
            SplitChoice::Borders(b) => SplitSpec::Borders(*b),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Drop every frozen-backbone expert.
    pub no_gpm: bool,
    /// Drop every fully trainable expert.
    pub no_dsm: bool,
    /// Replace the gate with fixed uniform weights.
    pub no_awgn: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub batches: Vec<usize>,
    pub warmup: usize,
    pub iters: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batches: vec![1, 32],
            warmup: 3,
            iters: 20,
        }
    }
}

/// Source of a pretrained backbone for one expert.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneImport {
    pub checkpoint: PathBuf,
    /// Expert index inside the source checkpoint.
    pub from: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub split: SplitChoice,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub repeats: usize,
    /// Report metrics in the original data scale instead of normalized space.
    pub raw_metrics: bool,
    pub eval_batch: usize,
    /// Cap on training windows per run (evenly strided); 0 keeps all.
    pub max_train_windows: usize,
    /// Cap on validation and test windows per run; 0 keeps all.
    pub max_eval_windows: usize,
    /// Scale-factor sets compared by the scale study, one factor per expert.
    pub scale_sets: Vec<Vec<ScaleFactor>>,
    pub bench: BenchConfig,
    pub backbones: BTreeMap<usize, BackboneImport>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::from_kv(BTreeMap::new()).expect("defaults are valid")
    }
}

struct Fields {
    map: BTreeMap<String, String>,
}

impl Fields {
    fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.map.remove(key) {
            None => Ok(default),
            Some(raw) => raw
                .trim()
                .parse()
                .map_err(|e| Error::Config(format!("`{key}` = `{raw}`: {e}"))),
        }
    }

    fn take_list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        match self.map.remove(key) {
            None => Ok(default),
            Some(raw) => parse_list(&raw).map_err(|e| Error::Config(format!("`{key}`: {e}"))),
        }
    }

    fn take_raw(&mut self, key: &str) -> Option<String> {
        self.map.remove(key).map(|v| v.trim().to_owned())
    }
}

fn parse_list<T: FromStr>(raw: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| format!("`{s}`: {e}")))
        .collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Parses `key = value` lines. `#` starts a comment line; repeated keys are
/// rejected.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if map.insert(k.to_owned(), v.trim().to_owned()).is_some() {
            return Err(Error::Config(format!("line {}: key `{k}` set twice", i + 1)));
        }
    }
    Ok(map)
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_owned(), v.trim().to_owned()))
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_kv(parse_kv(text)?)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut map = parse_kv(&text)?;
        for (k, v) in overrides {
            map.insert(k.clone(), v.clone());
        }
        Self::from_kv(map)
    }

    pub fn from_kv(map: BTreeMap<String, String>) -> Result<Self> {
        let mut f = Fields { map };
        let data = match f.take_raw("data.source").as_deref().unwrap_or("synth") {
            "synth" => {
                let d = SynthSpec::default();
                let periods = f.take_list("synth.periods", d.periods)?;
                let amplitudes = f.take_list("synth.amplitudes", vec![1.0; periods.len()])?;
                let snr: f64 = f.take("synth.snr", 0.0)?;
                let mut noise_std = f.take("synth.noise_std", d.noise_std)?;
                if snr > 0.0 {
                    noise_std = SynthSpec::noise_for_snr(&amplitudes, snr);
                }
                DataSource::Synth(SynthSpec {
                    length: f.take("synth.length", d.length)?,
                    periods,
                    amplitudes,
                    trend_slope: f.take("synth.trend", d.trend_slope)?,
                    noise_std,
                    channels: f.take("synth.channels", d.channels)?,
                    seed: f.take("synth.seed", d.seed)?,
                })
            }
            "csv" => {
                let path = f
                    .take_raw("data.path")
                    .ok_or_else(|| Error::Config("data.source=csv needs data.path".into()))?;
                let rows = match f.take_raw("data.rows").as_deref().unwrap_or("strict") {
                    "strict" => RowPolicy::Strict,
                    "skip" => RowPolicy::Skip,
                    other => return Err(Error::Config(format!("`data.rows` = `{other}`: expected strict or skip"))),
                };
                DataSource::Csv {
                    path: PathBuf::from(path),
                    schema: CsvSchema {
                        rows,
                        frequency: f.take_raw("data.frequency").unwrap_or_default(),
                    },
                }
            }
            other => return Err(Error::Config(format!("`data.source` = `{other}`: expected synth or csv"))),
        };

        let split = match f.take_raw("data.split").as_deref().unwrap_or("ratio") {
            "ratio" => {
                let r: Vec<f64> = f.take_list("data.split_ratio", vec![0.7, 0.1, 0.2])?;
                let r: [f64; 3] = r
                    .try_into()
                    .map_err(|_| Error::Config("`data.split_ratio` needs three values".into()))?;
                SplitChoice::Ratio(r)
            }
            "ett_hour" => SplitChoice::Ett { steps_per_hour: 1 },
            "ett_minute" => SplitChoice::Ett { steps_per_hour: 4 },
            "borders" => {
                let raw = f
                    .take_raw("data.split_borders")
                    .ok_or_else(|| Error::Config("data.split=borders needs data.split_borders".into()))?;
                SplitChoice::Borders(parse_borders(&raw)?)
            }
            other => {
                return Err(Error::Config(format!(
                    "`data.split` = `{other}`: expected ratio, ett_hour, ett_minute or borders"
                )))
            }
        };

        let dm = ModelConfig::default();
        let n: usize = f.take("model.experts", dm.experts.len())?;
        let mut experts = Vec::with_capacity(n);
        let mut backbones = BTreeMap::new();
        for j in 0..n {
            let p = format!("expert.{j}");
            let (kind_default, scale_default) = dm
                .experts
                .get(j)
                .map(|e| (e.kind, e.scale))
                .unwrap_or((ExpertKind::DsmTrainable, ScaleFactor::ONE));
            let kind: ExpertKind = f.take(&format!("{p}.kind"), kind_default)?;
            let scale: ScaleFactor = f.take(&format!("{p}.scale"), scale_default)?;
            let d = match kind {
                ExpertKind::GpmFrozen => ExpertProfile::gpm(scale),
                ExpertKind::DsmTrainable => ExpertProfile::dsm(scale),
            };
            experts.push(ExpertProfile {
                depth: f.take(&format!("{p}.depth"), d.depth)?,
                d_model: f.take(&format!("{p}.d_model"), d.d_model)?,
                heads: f.take(&format!("{p}.heads"), d.heads)?,
                d_k: f.take(&format!("{p}.d_k"), d.d_k)?,
                ffn_mult: f.take(&format!("{p}.ffn_mult"), d.ffn_mult)?,
                dropout: f.take(&format!("{p}.dropout"), d.dropout)?,
                ..d
            });
            if let Some(path) = f.take_raw(&format!("{p}.backbone")) {
                let from = f.take(&format!("{p}.backbone_from"), j)?;
                backbones.insert(
                    j,
                    BackboneImport {
                        checkpoint: PathBuf::from(path),
                        from,
                    },
                );
            }
        }
        let model = ModelConfig {
            seq_len: f.take("model.seq_len", dm.seq_len)?,
            pred_len: f.take("model.pred_len", dm.pred_len)?,
            patch_len: f.take("model.patch_len", dm.patch_len)?,
            stride: f.take("model.stride", dm.stride)?,
            experts,
            gate_hidden: f.take("model.gate_hidden", dm.gate_hidden)?,
            fusion_dim: f.take("model.fusion_dim", dm.fusion_dim)?,
            norm_eps: f.take("model.norm_eps", dm.norm_eps)?,
            gating: f.take("model.gating", dm.gating)?,
        };

        let dt = TrainConfig::default();
        let train = TrainConfig {
            lr: f.take("train.lr", dt.lr)?,
            batch_size: f.take("train.batch_size", dt.batch_size)?,
            epochs: f.take("train.epochs", dt.epochs)?,
            patience: f.take("train.patience", dt.patience)?,
            min_delta: f.take("train.min_delta", dt.min_delta)?,
            seed: f.take("train.seed", dt.seed)?,
            max_steps: f.take("train.max_steps", dt.max_steps)?,
            grad_clip: f.take("train.grad_clip", dt.grad_clip)?,
            window_stride: f.take("train.window_stride", dt.window_stride)?,
        };

        let ablation = Ablation {
            no_gpm: f.take("ablation.no_gpm", false)?,
            no_dsm: f.take("ablation.no_dsm", false)?,
            no_awgn: f.take("ablation.no_awgn", false)?,
        };

        let scale_sets = match f.take_raw("scalestudy.sets") {
            // Trainable experts sweep 1/2, 1, 2; frozen ones keep their factor.
            None => [(1, 2), (1, 1), (2, 1)]
                .iter()
                .map(|&(num, den)| {
                    model
                        .experts
                        .iter()
                        .map(|e| match e.kind {
                            ExpertKind::GpmFrozen => e.scale,
                            ExpertKind::DsmTrainable => ScaleFactor { num, den },
                        })
                        .collect()
                })
                .collect(),
            Some(raw) => raw
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| parse_list(s).map_err(|e| Error::Config(format!("`scalestudy.sets`: {e}"))))
                .collect::<Result<_>>()?,
        };

        let db = BenchConfig::default();
        let cfg = Self {
            data,
            split,
            model,
            train,
            ablation,
            repeats: f.take("run.repeats", 1)?,
            raw_metrics: f.take("eval.raw_metrics", false)?,
            eval_batch: f.take("eval.batch_size", 256)?,
            max_train_windows: f.take("train.max_windows", 0)?,
            max_eval_windows: f.take("eval.max_windows", 0)?,
            scale_sets,
            bench: BenchConfig {
                batches: f.take_list("bench.batches", db.batches)?,
                warmup: f.take("bench.warmup", db.warmup)?,
                iters: f.take("bench.iters", db.iters)?,
            },
            backbones,
        };
        if let Some(key) = f.map.keys().next() {
            return Err(Error::Config(format!("unknown configuration key `{key}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ablation.no_gpm && self.ablation.no_dsm {
            return Err(Error::Config("no_gpm and no_dsm together leave no experts".into()));
        }
        if self.repeats == 0 || self.eval_batch == 0 {
            return Err(Error::Config("run.repeats and eval.batch_size must be ≥ 1".into()));
        }
        if self.bench.batches.is_empty() || self.bench.batches.contains(&0) || self.bench.iters == 0 {
            return Err(Error::Config("bench needs nonzero batch sizes and iterations".into()));
        }
        let n = self.model.experts.len();
        if let Some(set) = self.scale_sets.iter().find(|s| s.len() != n) {
            return Err(Error::Config(format!(
                "scale set {} has {} factors for {n} experts",
                join(set),
                set.len()
            )));
        }
        if let Some(&j) = self.backbones.keys().find(|&&j| self.model.experts[j].kind != ExpertKind::GpmFrozen) {
            return Err(Error::Config(format!("expert {j} imports a backbone but is not gpm_frozen")));
        }
        self.train.validate()?;
        self.resolved_model()?.validate()?;
        Ok(())
    }

    /// Model configuration after ablation switches are applied.
    pub fn resolved_model(&self) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        let a = self.ablation;
        m.experts.retain(|e| match e.kind {
            ExpertKind::GpmFrozen => !a.no_gpm,
            ExpertKind::DsmTrainable => !a.no_dsm,
        });
        if m.experts.is_empty() {
            return Err(Error::Config("ablation switches removed every expert".into()));
        }
        if a.no_awgn {
            m.gating = Gating::Uniform;
        }
        Ok(m)
    }

    /// Indices (into the configured experts) that survive the ablation.
    pub fn kept_experts(&self) -> Vec<usize> {
        let a = self.ablation;
        self.model
            .experts
            .iter()
            .enumerate()
            .filter(|(_, e)| match e.kind {
                ExpertKind::GpmFrozen => !a.no_gpm,
                ExpertKind::DsmTrainable => !a.no_dsm,
            })
            .map(|(j, _)| j)
            .collect()
    }

    pub fn split_spec(&self) -> SplitSpec {
        self.split.spec(self.model.seq_len)
    }

    /// Every key with its resolved value.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_owned(), v);
        };
        match &self.data {
            DataSource::Synth(s) => {
                put("data.source", "synth".into());
                put("synth.length", s.length.to_string());
                put("synth.periods", join(&s.periods));
                put("synth.amplitudes", join(&s.amplitudes));
                put("synth.trend", s.trend_slope.to_string());
                put("synth.noise_std", s.noise_std.to_string());
                put("synth.channels", s.channels.to_string());
                put("synth.seed", s.seed.to_string());
            }
            DataSource::Csv { path, schema } => {
                put("data.source", "csv".into());
                put("data.path", path.display().to_string());
                let rows = match schema.rows {
                    RowPolicy::Strict => "strict",
                    RowPolicy::Skip => "skip",
                };
                put("data.rows", rows.into());
                put("data.frequency", schema.frequency.clone());
            }
        }
        match &self.split {
            SplitChoice::Ratio(r) => {
                put("data.split", "ratio".into());
                put("data.split_ratio", join(r));
            }
            SplitChoice::Ett { steps_per_hour } => {
                let name = if *steps_per_hour == 1 { "ett_hour" } else { "ett_minute" };
                put("data.split", name.into());
            }
            SplitChoice::Borders(b) => {
                put("data.split", "borders".into());
                let s: Vec<String> = b.iter().map(|(s, e)| format!("{s}:{e}")).collect();
                put("data.split_borders", s.join(","));
            }
        }
        let md = &self.model;
        put("model.seq_len", md.seq_len.to_string());
        put("model.pred_len", md.pred_len.to_string());
        put("model.patch_len", md.patch_len.to_string());
        put("model.stride", md.stride.to_string());
        put("model.gate_hidden", md.gate_hidden.to_string());
        put("model.fusion_dim", md.fusion_dim.to_string());
        put("model.norm_eps", md.norm_eps.to_string());
        put("model.gating", md.gating.to_string());
        put("model.experts", md.experts.len().to_string());
        for (j, e) in md.experts.iter().enumerate() {
            let p = format!("expert.{j}");
            put(&format!("{p}.kind"), e.kind.to_string());
            put(&format!("{p}.scale"), e.scale.to_string());
            put(&format!("{p}.depth"), e.depth.to_string());
            put(&format!("{p}.d_model"), e.d_model.to_string());
            put(&format!("{p}.heads"), e.heads.to_string());
            put(&format!("{p}.d_k"), e.d_k.to_string());
            put(&format!("{p}.ffn_mult"), e.ffn_mult.to_string());
            put(&format!("{p}.dropout"), e.dropout.to_string());
            if let Some(b) = self.backbones.get(&j) {
                put(&format!("{p}.backbone"), b.checkpoint.display().to_string());
                put(&format!("{p}.backbone_from"), b.from.to_string());
            }
        }
        let t = &self.train;
        put("train.lr", t.lr.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.epochs", t.epochs.to_string());
        put("train.patience", t.patience.to_string());
        put("train.min_delta", t.min_delta.to_string());
        put("train.seed", t.seed.to_string());
        put("train.max_steps", t.max_steps.to_string());
        put("train.grad_clip", t.grad_clip.to_string());
        put("train.window_stride", t.window_stride.to_string());
        put("train.max_windows", self.max_train_windows.to_string());
        put("ablation.no_gpm", self.ablation.no_gpm.to_string());
        put("ablation.no_dsm", self.ablation.no_dsm.to_string());
        put("ablation.no_awgn", self.ablation.no_awgn.to_string());
        put("run.repeats", self.repeats.to_string());
        put("eval.raw_metrics", self.raw_metrics.to_string());
        put("eval.batch_size", self.eval_batch.to_string());
        put("eval.max_windows", self.max_eval_windows.to_string());
        let sets: Vec<String> = self.scale_sets.iter().map(|s| join(s)).collect();
        put("scalestudy.sets", sets.join(";"));
        put("bench.batches", join(&self.bench.batches));
        put("bench.warmup", self.bench.warmup.to_string());
        put("bench.iters", self.bench.iters.to_string());
        m
    }

    /// Canonical text form; parsing it yields an equal configuration.
    pub fn dump(&self) -> String {
        self.to_kv().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

fn parse_borders(raw: &str) -> Result<[(usize, usize); 3]> {
    let bad = || Error::Config(format!("`data.split_borders` = `{raw}`: expected s:e,s:e,s:e"));
    let pairs: Vec<(usize, usize)> = raw
        .split(',')
        .map(|p| {
            let (s, e) = p.trim().split_once(':').ok_or_else(bad)?;
            Ok((s.trim().parse().map_err(|_| bad())?, e.trim().parse().map_err(|_| bad())?))
        })
        .collect::<Result<_>>()?;
    pairs.try_into().map_err(|_| bad())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_dump() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_text(&c.dump()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.dump(), c.dump());
    }

    #[test]
    fn overrides_and_expert_defaults() {
        let text = "model.experts = 3\nexpert.2.kind = gpm\nexpert.2.scale=2\n# note\n\ntrain.lr=0.01";
        let c = ExperimentConfig::from_text(text).unwrap();
        assert_eq!(c.model.experts.len(), 3);
        assert_eq!(c.model.experts[2].kind, ExpertKind::GpmFrozen);
        assert_eq!(c.model.experts[2].depth, 3);
        assert_eq!(c.model.experts[2].scale, ScaleFactor::new(2, 1).unwrap());
        assert_eq!(c.train.lr, 0.01);
    }

    #[test]
    fn csv_and_borders_round_trip() {
        let text = "data.source=csv\ndata.path=/tmp/x.csv\ndata.rows=skip\ndata.split=borders\n\
                    data.split_borders=0:100,90:150,140:200\nexpert.0.backbone=/tmp/b.ckpt";
        let c = ExperimentConfig::from_text(text).unwrap();
        assert_eq!(c.split, SplitChoice::Borders([(0, 100), (90, 150), (140, 200)]));
        assert_eq!(c.backbones[&0].from, 0);
        assert_eq!(ExperimentConfig::from_text(&c.dump()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "model.seq_lenn=3",
            "no equals sign",
            "a=1\na=2",
            "ablation.no_gpm=true\nablation.no_dsm=true",
            "model.patch_len=200",
            "expert.1.kind=wizard",
            "expert.1.backbone=/tmp/x",
            "scalestudy.sets=1",
            "synth.periods=abc",
        ] {
            let err = ExperimentConfig::from_text(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn ablations_resolve() {
        let mut c = ExperimentConfig::default();
        c.ablation.no_gpm = true;
        let m = c.resolved_model().unwrap();
        assert_eq!(m.experts.len(), 1);
        assert_eq!(m.experts[0].kind, ExpertKind::DsmTrainable);
        assert_eq!(c.kept_experts(), vec![1]);
        c.ablation = Ablation {
            no_awgn: true,
            ..Default::default()
        };
        assert_eq!(c.resolved_model().unwrap().gating, Gating::Uniform);
    }

    #[test]
    fn snr_sets_noise() {
        let c = ExperimentConfig::from_text("synth.periods=16,96\nsynth.snr=10").unwrap();
        let DataSource::Synth(s) = &c.data else { panic!() };
        assert!((s.noise_std - (1.0f64 / 10.0).sqrt()).abs() < 1e-12);
    }
}
