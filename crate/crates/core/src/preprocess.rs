//! Per-window instance normalization and multi-scale patch extraction.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const DEFAULT_NORM_EPS: f64 = 1e-5;

/// Statistics of one input window, kept to undo the normalization on the
/// forecast.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    /// Population standard deviation, before flooring.
    pub std: f64,
    pub eps: f64,
}

impl NormStats {
    /// Divisor applied to the centred window: the std floored at `eps`.
    pub fn divisor(&self) -> f64 {
        self.std.max(self.eps)
    }

    pub fn normalize_value(&self, v: f64) -> f64 {
        (v - self.mean) / self.divisor()
    }

    pub fn denormalize_value(&self, v: f64) -> f64 {
        v * self.divisor() + self.mean
    }
}

/// Z-scores `x` with its own mean and population std.
pub fn instance_normalize(x: &[f64], eps: f64) -> (Vec<f64>, NormStats) {
    assert!(!x.is_empty(), "cannot normalize an empty window");
    assert!(eps > 0.0, "eps must be positive");
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let stats = NormStats {
        mean,
        std: var.sqrt(),
        eps,
    };
    let div = stats.divisor();
    (x.iter().map(|v| (v - mean) / div).collect(), stats)
}

pub fn denormalize(y: &[f64], stats: &NormStats) -> Vec<f64> {
    y.iter().map(|&v| stats.denormalize_value(v)).collect()
}

/// Positive rational multiplier of the base patch length and stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ScaleFactor {
    pub num: u32,
    pub den: u32,
}

impl ScaleFactor {
    pub const ONE: ScaleFactor = ScaleFactor { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Config(format!("scale factor {num}/{den} must be positive")));
        }
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `round(base · F)`, at least 1. The flag reports whether rounding occurred.
    pub fn apply(self, base: usize) -> (usize, bool) {
        let exact = base as u64 * self.num as u64;
        let den = self.den as u64;
        let rounded = (exact * 2 + den) / (2 * den);
        ((rounded as usize).max(1), !exact.is_multiple_of(den) || rounded == 0)
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl fmt::Display for ScaleFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for ScaleFactor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("invalid scale factor `{s}`"));
        if let Some((n, d)) = s.split_once('/') {
            return ScaleFactor::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?);
        }
        if let Ok(n) = s.parse::<u32>() {
            return ScaleFactor::new(n, 1);
        }
        // Decimal literal: scale to an integer numerator.
        let (int, frac) = s.split_once('.').ok_or_else(bad)?;
        if frac.len() > 6 || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let den = 10u32.pow(frac.len() as u32);
        let int: u32 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac_v: u32 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        ScaleFactor::new(int * den + frac_v, den)
    }
}

/// Patch length, stride and count of one scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleGeometry {
    pub patch_len: usize,
    pub stride: usize,
    pub count: usize,
}

impl ScaleGeometry {
    /// `P_j`, `S_j` resolved against a look-back window of `seq_len`.
    pub fn new(patch_len: usize, stride: usize, seq_len: usize) -> Result<Self> {
        if patch_len == 0 || stride == 0 {
            return Err(Error::Config("patch length and stride must be ≥ 1".into()));
        }
        if patch_len > seq_len {
            return Err(Error::Config(format!(
                "patch length {patch_len} exceeds the look-back window {seq_len}"
            )));
        }
        Ok(Self {
            patch_len,
            stride,
            count: (seq_len - patch_len) / stride + 2,
        })
    }

    /// Length of the end-padded sequence.
    pub fn padded_len(&self, seq_len: usize) -> usize {
        seq_len + self.stride
    }
}

/// Base patch length and stride plus one scale factor per expert.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSpec {
    pub patch_len: usize,
    pub stride: usize,
    pub scale_factors: Vec<ScaleFactor>,
}

impl PatchSpec {
    /// Per-scale geometry for a look-back window of `seq_len`.
    pub fn resolve(&self, seq_len: usize) -> Result<Vec<ScaleGeometry>> {
        if self.scale_factors.is_empty() {
            return Err(Error::Config("at least one scale factor is required".into()));
        }
        self.scale_factors
            .iter()
            .enumerate()
            .map(|(j, &f)| resolve_scale(self.patch_len, self.stride, f, seq_len).map_err(|e| name_scale(j, f, e)))
            .collect()
    }
}

/// Geometry of one scale factor.
pub fn resolve_scale(patch_len: usize, stride: usize, factor: ScaleFactor, seq_len: usize) -> Result<ScaleGeometry> {
    let (p, p_rounded) = factor.apply(patch_len);
    let (s, s_rounded) = factor.apply(stride);
    if p_rounded || s_rounded {
        log::warn!("scale factor {factor} rounds patch {patch_len}→{p}, stride {stride}→{s}");
    }
    if s > p {
        return Err(Error::Config(format!(
            "stride {s} exceeds patch length {p}; timesteps between patches would be skipped"
        )));
    }
    ScaleGeometry::new(p, s, seq_len)
}

fn name_scale(j: usize, f: ScaleFactor, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("scale {j} (factor {f}): {m}")),
        other => other,
    }
}

/// Patches of one scale, stored patch-major: patch `k` is row `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBranch {
    pub geometry: ScaleGeometry,
    data: Vec<f64>,
}

impl PatchBranch {
    pub fn patch(&self, k: usize) -> &[f64] {
        let p = self.geometry.patch_len;
        &self.data[k * p..(k + 1) * p]
    }

    pub fn count(&self) -> usize {
        self.geometry.count
    }

    /// `[N_j × P_j]` row-major values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// All scales of one window.
pub type PatchSet = Vec<PatchBranch>;

/// Pads `x` with `stride` copies of its last value and cuts `count` patches.
pub fn extract_branch(x: &[f64], geometry: ScaleGeometry) -> Result<PatchBranch> {
    let ScaleGeometry { patch_len, stride, count } = geometry;
    if patch_len > x.len() {
        return Err(Error::Config(format!(
            "patch length {patch_len} exceeds the window length {}",
            x.len()
        )));
    }
    let last = *x.last().expect("nonempty window");
    let padded: Vec<f64> = x.iter().copied().chain(std::iter::repeat_n(last, stride)).collect();
    let mut data = Vec::with_capacity(count * patch_len);
    for k in 0..count {
        data.extend_from_slice(&padded[k * stride..k * stride + patch_len]);
    }
    Ok(PatchBranch { geometry, data })
}

pub fn extract_patches(x_norm: &[f64], geometries: &[ScaleGeometry]) -> Result<PatchSet> {
    geometries
        .iter()
        .enumerate()
        .map(|(j, &g)| {
            extract_branch(x_norm, g).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("scale {j}: {m}")),
                other => other,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sf(s: &str) -> ScaleFactor {
        s.parse().unwrap()
    }

    #[test]
    fn constant_window_normalizes_to_zero() {
        let (y, stats) = instance_normalize(&[5.0; 4], DEFAULT_NORM_EPS);
        assert_eq!(y, vec![0.0; 4]);
        assert_eq!((stats.mean, stats.std), (5.0, 0.0));
        assert_eq!(denormalize(&y, &stats), vec![5.0; 4]);
    }

    #[test]
    fn three_point_window() {
        let (y, _) = instance_normalize(&[1.0, 2.0, 3.0], DEFAULT_NORM_EPS);
        // mean 2, population std sqrt(2/3)
        let s = (2.0f64 / 3.0).sqrt();
        let expect = [-1.0 / s, 0.0, 1.0 / s];
        for (a, b) in y.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((y[0] + 1.2247).abs() < 1e-4);
    }

    #[test]
    fn zero_output_denormalizes_to_mean() {
        let stats = NormStats {
            mean: 3.5,
            std: 2.0,
            eps: DEFAULT_NORM_EPS,
        };
        assert_eq!(denormalize(&[0.0; 3], &stats), vec![3.5; 3]);
        let unit = NormStats {
            mean: 0.0,
            std: 1.0,
            eps: DEFAULT_NORM_EPS,
        };
        assert_eq!(denormalize(&[0.25, -4.0], &unit), vec![0.25, -4.0]);
    }

    #[test]
    fn scale_factor_parsing_and_rounding() {
        assert_eq!(sf("1/2"), ScaleFactor { num: 1, den: 2 });
        assert_eq!(sf("0.5"), ScaleFactor { num: 1, den: 2 });
        assert_eq!(sf("2"), ScaleFactor { num: 2, den: 1 });
        assert_eq!(sf("4/2").to_string(), "2");
        assert!("0".parse::<ScaleFactor>().is_err());
        assert!("x".parse::<ScaleFactor>().is_err());
        assert_eq!(sf("1/2").apply(7), (4, true));
        assert_eq!(sf("1/3").apply(1), (1, true));
        assert_eq!(sf("2").apply(8), (16, false));
    }

    #[test]
    fn formula_examples() {
        assert_eq!(ScaleGeometry::new(16, 8, 96).unwrap().count, 12);
        let spec = PatchSpec {
            patch_len: 8,
            stride: 4,
            scale_factors: vec![sf("1"), sf("2")],
        };
        let g = spec.resolve(96).unwrap();
        assert_eq!((g[0].patch_len, g[0].stride, g[0].count), (8, 4, 24));
        assert_eq!((g[1].patch_len, g[1].stride, g[1].count), (16, 8, 12));
    }

    #[test]
    fn small_enumeration_case() {
        let x: Vec<f64> = (0..10).map(|v| v as f64).collect();
        let g = ScaleGeometry::new(4, 2, 10).unwrap();
        assert_eq!(g.count, 5);
        assert_eq!(g.padded_len(10), 12);
        let b = extract_branch(&x, g).unwrap();
        assert_eq!(b.patch(0), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(b.patch(4), &[8.0, 9.0, 9.0, 9.0]);
    }

    #[test]
    fn oversized_patch_names_scale() {
        let spec = PatchSpec {
            patch_len: 16,
            stride: 8,
            scale_factors: vec![sf("1"), sf("4")],
        };
        let err = spec.resolve(48).unwrap_err().to_string();
        assert!(err.contains("scale 1"), "{err}");
        let gaps = PatchSpec {
            patch_len: 4,
            stride: 8,
            scale_factors: vec![sf("1")],
        };
        assert!(gaps.resolve(48).is_err());
    }
}
