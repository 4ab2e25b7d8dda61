//! Dataset ingestion, synthetic series, splits and channel-independent
//! sliding windows.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// A multivariate series of `T` timesteps over `M` channels.
///
/// Values are kept channel-major so that a window of one channel is a
/// contiguous slice.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub name: String,
    pub column_names: Vec<String>,
    pub frequency: String,
    timestamps: Vec<String>,
    channels: Vec<Vec<f64>>,
}

impl RawDataset {
    /// Builds a dataset from `[T × M]` rows.
    pub fn from_rows(name: impl Into<String>, column_names: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let m = column_names.len();
        if m == 0 {
            return Err(Error::Data("dataset has no value columns".into()));
        }
        let mut channels = vec![Vec::with_capacity(rows.len()); m];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(Error::Ingest {
                    row: i + 1,
                    message: format!("expected {m} values, found {}", row.len()),
                });
            }
            for (c, &v) in row.iter().enumerate() {
                channels[c].push(v);
            }
        }
        let timestamps = (0..rows.len()).map(|t| t.to_string()).collect();
        Ok(Self {
            name: name.into(),
            column_names,
            frequency: String::new(),
            timestamps,
            channels,
        })
    }

    pub fn from_channels(name: impl Into<String>, column_names: Vec<String>, channels: Vec<Vec<f64>>) -> Result<Self> {
        if channels.is_empty() || channels.len() != column_names.len() {
            return Err(Error::Data("channel and column name counts differ".into()));
        }
        let t = channels[0].len();
        if channels.iter().any(|c| c.len() != t) {
            return Err(Error::Data("channels have different lengths".into()));
        }
        Ok(Self {
            name: name.into(),
            column_names,
            frequency: String::new(),
            timestamps: (0..t).map(|i| i.to_string()).collect(),
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    pub fn value(&self, t: usize, c: usize) -> f64 {
        self.channels[c][t]
    }

    pub fn timestamps(&self) -> &[String] {
        &self.timestamps
    }

    /// Same data with the channels reordered: new channel `i` is old `order[i]`.
    pub fn permute_channels(&self, order: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            column_names: order.iter().map(|&i| self.column_names[i].clone()).collect(),
            frequency: self.frequency.clone(),
            timestamps: self.timestamps.clone(),
            channels: order.iter().map(|&i| self.channels[i].clone()).collect(),
        }
    }

    /// Refuses series too short to hold even one `(L, K)` sample.
    pub fn validate(&self, seq_len: usize, pred_len: usize) -> Result<()> {
        if self.len() <= seq_len + pred_len {
            return Err(Error::Data(format!(
                "dataset `{}` has {} timesteps; need more than L + K = {}",
                self.name,
                self.len(),
                seq_len + pred_len
            )));
        }
        Ok(())
    }

    /// Writes the dataset as a `date,<columns...>` CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let mut header = vec!["date".to_string()];
        header.extend(self.column_names.iter().cloned());
        w.write_record(&header).map_err(|e| csv_io(path, e))?;
        for t in 0..self.len() {
            let mut rec = vec![self.timestamps[t].clone()];
            rec.extend(self.channels.iter().map(|c| format!("{}", c[t])));
            w.write_record(&rec).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// How malformed rows are treated during ingestion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RowPolicy {
    /// First malformed row aborts ingestion.
    #[default]
    Strict,
    /// Malformed rows are dropped and counted.
    Skip,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CsvSchema {
    pub rows: RowPolicy,
    pub frequency: String,
}

/// Loads a `date,<value columns...>` CSV. Returns the dataset and the number
/// of rejected rows (always zero under [`RowPolicy::Strict`]).
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<(RawDataset, usize)> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let headers = reader.headers().map_err(|e| csv_io(path, e))?.clone();
    if headers.len() < 2 {
        return Err(Error::Ingest {
            row: 1,
            message: "need a timestamp column and at least one value column".into(),
        });
    }
    let m = headers.len() - 1;
    let column_names: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
    let mut channels = vec![Vec::new(); m];
    let mut timestamps = Vec::new();
    let mut rejected = 0;
    for (i, record) in reader.records().enumerate() {
        // Header is line 1.
        let line = i + 2;
        let parsed = record
            .map_err(|e| format!("{e}"))
            .and_then(|rec| parse_row(&rec, m).map(|vals| (rec.get(0).unwrap_or("").to_owned(), vals)));
        match parsed {
            Ok((ts, vals)) => {
                timestamps.push(ts);
                for (c, v) in vals.into_iter().enumerate() {
                    channels[c].push(v);
                }
            }
            Err(message) => match schema.rows {
                RowPolicy::Strict => return Err(Error::Ingest { row: line, message }),
                RowPolicy::Skip => rejected += 1,
            },
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Data(format!("{} holds no data rows", path.display())));
    }
    if rejected > 0 {
        log::warn!("{}: rejected {rejected} malformed rows", path.display());
    }
    let name = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    Ok((
        RawDataset {
            name,
            column_names,
            frequency: schema.frequency.clone(),
            timestamps,
            channels,
        },
        rejected,
    ))
}

fn parse_row(rec: &csv::StringRecord, m: usize) -> std::result::Result<Vec<f64>, String> {
    if rec.len() != m + 1 {
        return Err(format!("expected {} fields, found {}", m + 1, rec.len()));
    }
    rec.iter()
        .skip(1)
        .enumerate()
        .map(|(c, cell)| {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| format!("column {} holds non-numeric `{cell}`", c + 2))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("column {} holds non-finite `{cell}`", c + 2))
            }
        })
        .collect()
}

/// Parameters of a sum-of-sinusoids series with trend and gaussian noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub length: usize,
    pub periods: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub trend_slope: f64,
    pub noise_std: f64,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            length: 2000,
            periods: vec![24.0],
            amplitudes: vec![1.0],
            trend_slope: 0.0,
            noise_std: 0.0,
            channels: 1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Noise level giving the requested signal-to-noise power ratio for the
    /// configured sinusoids.
    pub fn noise_for_snr(amplitudes: &[f64], snr: f64) -> f64 {
        let power: f64 = amplitudes.iter().map(|a| a * a / 2.0).sum();
        (power / snr).sqrt()
    }
}

/// Channel `c` carries `Σ_k a_k sin(2π t / p_k + c/2) + slope·t + noise`.
pub fn synth_multiperiodic(spec: &SynthSpec) -> Result<RawDataset> {
    if spec.periods.is_empty() || spec.periods.len() != spec.amplitudes.len() {
        return Err(Error::Config("synthetic periods and amplitudes must be nonempty and paired".into()));
    }
    let max_period = spec.periods.iter().copied().fold(0.0, f64::max);
    if spec.periods.iter().any(|&p| p <= 0.0) || (spec.length as f64) <= 2.0 * max_period {
        return Err(Error::Config(format!(
            "synthetic length {} must exceed twice the longest period {max_period}",
            spec.length
        )));
    }
    if spec.channels == 0 || spec.noise_std < 0.0 {
        return Err(Error::Config("synthetic series need ≥ 1 channel and nonnegative noise".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid normal");
    let tau = std::f64::consts::TAU;
    let channels = (0..spec.channels)
        .map(|c| {
            let phase = c as f64 * 0.5;
            (0..spec.length)
                .map(|t| {
                    let t_f = t as f64;
                    let periodic: f64 = spec
                        .periods
                        .iter()
                        .zip(&spec.amplitudes)
                        .map(|(p, a)| a * (tau * t_f / p + phase).sin())
                        .sum();
                    let eps = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    periodic + spec.trend_slope * t_f + eps
                })
                .collect()
        })
        .collect();
    let names = (0..spec.channels).map(|c| format!("ch{c}")).collect();
    let mut ds = RawDataset::from_channels("synthetic", names, channels)?;
    ds.frequency = "synthetic".into();
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Contiguous train/val/test partition of the time axis.
#[derive(Clone, Debug, PartialEq)]
pub enum SplitSpec {
    /// Fractions of `T` assigned to train, val and test in order.
    Ratio([f64; 3]),
    /// Explicit `[start, end)` timestep ranges for train, val and test.
    Borders([(usize, usize); 3]),
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Ratio([0.7, 0.1, 0.2])
    }
}

impl SplitSpec {
    /// Fixed 12/4/4-month borders of the ETT benchmarks. `steps_per_hour` is 1
    /// for the hourly files and 4 for the 15-minute ones. Val and test ranges
    /// start `seq_len` early so their first target follows the previous split.
    pub fn ett(steps_per_hour: usize, seq_len: usize) -> Self {
        let month = 30 * 24 * steps_per_hour;
        let b = [0, 12 * month, 16 * month, 20 * month];
        SplitSpec::Borders([
            (b[0], b[1]),
            (b[1].saturating_sub(seq_len), b[2]),
            (b[2].saturating_sub(seq_len), b[3]),
        ])
    }

    /// Resolves to `[start, end)` ranges on a series of length `total`.
    pub fn ranges(&self, total: usize) -> Result<[(usize, usize); 3]> {
        match self {
            SplitSpec::Ratio(r) => {
                if r.iter().any(|&v| v < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!("split ratios {r:?} must be nonnegative and sum to 1")));
                }
                let train = (total as f64 * r[0]).floor() as usize;
                let test = (total as f64 * r[2]).floor() as usize;
                let val = total - train - test;
                Ok([(0, train), (train, train + val), (train + val, total)])
            }
            SplitSpec::Borders(b) => {
                for (i, &(s, e)) in b.iter().enumerate() {
                    if s > e || e > total {
                        return Err(Error::Config(format!(
                            "split border {i} = [{s}, {e}) does not fit a series of length {total}"
                        )));
                    }
                }
                if b[0].1 > b[1].1 || b[1].1 > b[2].1 || b[0].0 > b[1].0 || b[1].0 > b[2].0 {
                    return Err(Error::Config(format!("split borders {b:?} are not ordered in time")));
                }
                Ok(*b)
            }
        }
    }
}

/// One channel-independent sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeriesWindow<'a> {
    pub channel: usize,
    pub origin: usize,
    pub input: &'a [f64],
    pub target: &'a [f64],
}

/// Closed-form window count for a split of length `len`.
pub fn window_count(len: usize, seq_len: usize, pred_len: usize, stride: usize) -> usize {
    match len.checked_sub(seq_len + pred_len) {
        Some(room) => room / stride + 1,
        None => 0,
    }
}

/// Lazily materialized windows of one split.
///
/// Index `i` maps to channel `i / per_channel` and origin
/// `start + (i % per_channel) * stride`.
#[derive(Clone, Debug)]
pub struct WindowSet<'a> {
    ds: &'a RawDataset,
    pub split: SplitName,
    pub start: usize,
    pub end: usize,
    pub seq_len: usize,
    pub pred_len: usize,
    pub stride: usize,
    per_channel: usize,
}

impl<'a> WindowSet<'a> {
    pub fn dataset(&self) -> &'a RawDataset {
        self.ds
    }

    pub fn per_channel(&self) -> usize {
        self.per_channel
    }

    pub fn len(&self) -> usize {
        self.per_channel * self.ds.channel_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> SeriesWindow<'a> {
        assert!(i < self.len(), "window {i} out of range ({})", self.len());
        let channel = i / self.per_channel;
        let origin = self.start + (i % self.per_channel) * self.stride;
        let series = self.ds.channel(channel);
        SeriesWindow {
            channel,
            origin,
            input: &series[origin..origin + self.seq_len],
            target: &series[origin + self.seq_len..origin + self.seq_len + self.pred_len],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = SeriesWindow<'a>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    /// Seeded permutation of window indices for one epoch.
    pub fn shuffled_indices(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx
    }

    /// Indices of the first `n` windows of every channel.
    pub fn truncated(&self, n: usize) -> Vec<usize> {
        let n = n.min(self.per_channel);
        (0..self.ds.channel_count())
            .flat_map(|c| (0..n).map(move |k| c * self.per_channel + k))
            .collect()
    }
}

/// Windows of all three splits.
#[derive(Clone, Debug)]
pub struct Splits<'a> {
    pub train: WindowSet<'a>,
    pub val: WindowSet<'a>,
    pub test: WindowSet<'a>,
}

impl<'a> Splits<'a> {
    pub fn get(&self, name: SplitName) -> &WindowSet<'a> {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

pub fn make_windows<'a>(
    ds: &'a RawDataset,
    split: &SplitSpec,
    seq_len: usize,
    pred_len: usize,
    stride: usize,
) -> Result<Splits<'a>> {
    if seq_len == 0 || pred_len == 0 || stride == 0 {
        return Err(Error::Config("L, K and window stride must all be ≥ 1".into()));
    }
    ds.validate(seq_len, pred_len)?;
    let ranges = split.ranges(ds.len())?;
    let build = |name: SplitName, (start, end): (usize, usize)| -> Result<WindowSet<'a>> {
        let per_channel = window_count(end - start, seq_len, pred_len, stride);
        if per_channel == 0 {
            return Err(Error::EmptySplit {
                split: name.as_str(),
                len: end - start,
                need: seq_len + pred_len,
            });
        }
        Ok(WindowSet {
            ds,
            split: name,
            start,
            end,
            seq_len,
            pred_len,
            stride,
            per_channel,
        })
    };
    Ok(Splits {
        train: build(SplitName::Train, ranges[0])?,
        val: build(SplitName::Val, ranges[1])?,
        test: build(SplitName::Test, ranges[2])?,
    })
}
