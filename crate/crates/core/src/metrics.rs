//! Forecast error metrics and summary statistics for reports.

use crate::error::{Error, Result};

/// Mean squared and mean absolute error over all elements.
pub fn metric_mse_mae(preds: &[f64], targets: &[f64]) -> Result<(f64, f64)> {
    if preds.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Contract("metrics of an empty forecast".into()));
    }
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in preds.iter().zip(targets) {
        let d = p - t;
        se += d * d;
        ae += d.abs();
    }
    let n = preds.len() as f64;
    Ok((se / n, ae / n))
}

/// Running sums for metrics over many batches.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorAccumulator {
    se: f64,
    ae: f64,
    n: usize,
}

impl ErrorAccumulator {
    pub fn push(&mut self, pred: f64, target: f64) {
        let d = pred - target;
        self.se += d * d;
        self.ae += d.abs();
        self.n += 1;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn finish(&self) -> Result<(f64, f64)> {
        if self.n == 0 {
            return Err(Error::Contract("metrics of an empty forecast".into()));
        }
        Ok((self.se / self.n as f64, self.ae / self.n as f64))
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1); zero for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Cohen's d of `b` relative to `a` with pooled sample deviation; positive
/// when `b` is larger. Zero when both samples are constant and equal.
pub fn cohens_d(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = (((na - 1.0) * sample_std(a).powi(2) + (nb - 1.0) * sample_std(b).powi(2)) / (na + nb - 2.0)).sqrt();
    let diff = mean(b) - mean(a);
    if pooled > 0.0 {
        diff / pooled
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

/// Per-expert mean and population std of gate weights over windows.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSummary {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GateSummary {
    /// `rows` holds one gate vector per window.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Contract("no gate rows".into()))?;
        let count = rows.len() as f64;
        let mut mean = vec![0.0; n];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / count;
            }
        }
        let mut std = vec![0.0; n];
        for r in rows {
            for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / count;
            }
        }
        std.iter_mut().for_each(|s| *s = s.sqrt());
        Ok(Self { mean, std })
    }
}

/// Per-window forward latency in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyStats {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    /// Windows per second at the mean latency.
    pub throughput: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("no latency samples".into()));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let m = mean(&sorted);
        Ok(Self {
            mean: m,
            p50: percentile(&sorted, 0.50),
            p95: percentile(&sorted, 0.95),
            throughput: if m > 0.0 { 1.0 / m } else { f64::INFINITY },
        })
    }
}

/// Linear-interpolated percentile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn closed_forms() {
        assert_eq!(metric_mse_mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
        assert_eq!(metric_mse_mae(&[2.0], &[0.0]).unwrap(), (4.0, 2.0));
        assert!(metric_mse_mae(&[], &[]).is_err());
        assert!(metric_mse_mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn matches_separate_loops() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let p: Vec<f64> = (0..300).map(|_| r.random_range(-5.0..5.0)).collect();
        let t: Vec<f64> = (0..300).map(|_| r.random_range(-5.0..5.0)).collect();
        let mut mse = 0.0;
        for i in 0..p.len() {
            mse += (p[i] - t[i]).powi(2);
        }
        mse /= p.len() as f64;
        let mut mae = 0.0;
        for i in 0..p.len() {
            mae += (p[i] - t[i]).abs();
        }
        mae /= p.len() as f64;
        let (a, b) = metric_mse_mae(&p, &t).unwrap();
        assert!((a - mse).abs() < 1e-12 && (b - mae).abs() < 1e-12);
        let mut acc = ErrorAccumulator::default();
        p.iter().zip(&t).for_each(|(&x, &y)| acc.push(x, y));
        let (c, d) = acc.finish().unwrap();
        assert!((c - mse).abs() < 1e-12 && (d - mae).abs() < 1e-12);
    }

    #[test]
    fn gate_summary_means_sum_to_one() {
        let rows = vec![vec![0.2, 0.8], vec![0.6, 0.4]];
        let s = GateSummary::from_rows(&rows).unwrap();
        assert!((s.mean.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((s.mean[0] - 0.4).abs() < 1e-12);
        assert!((s.std[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn latency_percentiles() {
        let s: Vec<f64> = (1..=101).map(f64::from).collect();
        let l = LatencyStats::from_samples(&s).unwrap();
        assert_eq!(l.p50, 51.0);
        assert_eq!(l.p95, 96.0);
        assert_eq!(l.mean, 51.0);
    }

    #[test]
    fn effect_size_sign() {
        assert!(cohens_d(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]) > 0.0);
        assert_eq!(cohens_d(&[1.0, 1.0], &[1.0, 1.0]), 0.0);
    }
}
