//! Summary statistics over seeds: rolling averages, Student-t bands,
//! A/B differences and ratio factors.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("series are not aligned: {0}")]
    Misaligned(&'static str),
    #[error("window must be at least 1")]
    EmptyWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    #[serde(rename = "0.95")]
    P95,
    #[serde(rename = "0.99")]
    P99,
}

impl Level {
    pub fn value(self) -> f64 {
        match self {
            Level::P95 => 0.95,
            Level::P99 => 0.99,
        }
    }
}

const TABLE_DF: [f64; 39] = [
    1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0, 17.0, 18.0, 19.0, 20.0,
    21.0, 22.0, 23.0, 24.0, 25.0, 26.0, 27.0, 28.0, 29.0, 30.0, 40.0, 50.0, 60.0, 80.0, 100.0, 120.0, 200.0, 500.0,
    1000.0,
];

// two-sided quantiles t_{1 - (1 - level)/2, df}
const T95: [f64; 39] = [
    12.7062, 4.3027, 3.1824, 2.7764, 2.5706, 2.4469, 2.3646, 2.3060, 2.2622, 2.2281, 2.2010, 2.1788, 2.1604, 2.1448,
    2.1314, 2.1199, 2.1098, 2.1009, 2.0930, 2.0860, 2.0796, 2.0739, 2.0687, 2.0639, 2.0595, 2.0555, 2.0518, 2.0484,
    2.0452, 2.0423, 2.0211, 2.0086, 2.0003, 1.9901, 1.9840, 1.9799, 1.9719, 1.9647, 1.9623,
];
const T99: [f64; 39] = [
    63.6567, 9.9248, 5.8409, 4.6041, 4.0321, 3.7074, 3.4995, 3.3554, 3.2498, 3.1693, 3.1058, 3.0545, 3.0123, 2.9768,
    2.9467, 2.9208, 2.8982, 2.8784, 2.8609, 2.8453, 2.8314, 2.8188, 2.8073, 2.7969, 2.7874, 2.7787, 2.7707, 2.7633,
    2.7564, 2.7500, 2.7045, 2.6778, 2.6603, 2.6387, 2.6259, 2.6174, 2.6006, 2.5857, 2.5808,
];
const Z95: f64 = 1.9600;
const Z99: f64 = 2.5758;

/// Two-sided Student-t quantile. Table lookup, linear in `1/df` between
/// entries and towards the normal quantile past the last one. `df < 1` is
/// clamped to 1.
pub fn t_quantile(level: Level, df: f64) -> f64 {
    let (table, z) = match level {
        Level::P95 => (&T95, Z95),
        Level::P99 => (&T99, Z99),
    };
    let df = if df.is_nan() { 1.0 } else { df.max(1.0) };
    let last = TABLE_DF.len() - 1;
    if df >= TABLE_DF[last] {
        let w = TABLE_DF[last] / df;
        return z + (table[last] - z) * w;
    }
    let i = TABLE_DF.partition_point(|&d| d <= df) - 1;
    if TABLE_DF[i] == df {
        return table[i];
    }
    let (lo, hi) = (1.0 / TABLE_DF[i], 1.0 / TABLE_DF[i + 1]);
    let w = (1.0 / df - hi) / (lo - hi);
    table[i + 1] + (table[i] - table[i + 1]) * w
}

/// Trailing mean over `min(window, available)` points.
pub fn rolling_average(series: &[f64], window: usize) -> Result<Vec<f64>, StatsError> {
    if window == 0 {
        return Err(StatsError::EmptyWindow);
    }
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for i in 0..series.len() {
        sum += series[i];
        if i >= window {
            sum -= series[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    Ok(out)
}

/// Per-seed series over a shared epoch axis: `values[seed][k]` belongs to
/// `epochs[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSeries {
    pub epochs: Vec<u32>,
    pub values: Vec<Vec<f64>>,
}

impl SampleSeries {
    pub fn new(epochs: Vec<u32>, values: Vec<Vec<f64>>) -> Result<SampleSeries, StatsError> {
        if values.iter().any(|v| v.len() != epochs.len()) {
            return Err(StatsError::Misaligned("seed length differs from epoch axis"));
        }
        Ok(SampleSeries { epochs, values })
    }

    pub fn seeds(&self) -> usize {
        self.values.len()
    }

    pub fn rolling(&self, window: usize) -> Result<SampleSeries, StatsError> {
        let values = self.values.iter().map(|v| rolling_average(v, window)).collect::<Result<_, _>>()?;
        Ok(SampleSeries { epochs: self.epochs.clone(), values })
    }

    /// Keeps the last `ceil(fraction * len)` epochs (at least one).
    pub fn final_fraction(&self, fraction: f64) -> SampleSeries {
        let n = self.epochs.len();
        let keep = ((fraction * n as f64).ceil() as usize).clamp(1.min(n), n);
        SampleSeries {
            epochs: self.epochs[n - keep..].to_vec(),
            values: self.values.iter().map(|v| v[n - keep..].to_vec()).collect(),
        }
    }

    /// Mean over epochs for each seed.
    pub fn seed_means(&self) -> Vec<f64> {
        self.values.iter().map(|v| mean(v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub half_width: f64,
    pub level: Level,
    pub n: usize,
}

impl Interval {
    pub fn lower(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.half_width
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.lower() <= other.upper() && other.lower() <= self.upper()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBand {
    pub epochs: Vec<u32>,
    pub mean: Vec<f64>,
    pub half_width: Vec<f64>,
    pub level: Level,
    pub n: usize,
}

impl ConfidenceBand {
    pub fn at(&self, k: usize) -> Interval {
        Interval { mean: self.mean[k], half_width: self.half_width[k], level: self.level, n: self.n }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// `mean ± t_{level, n-1} sd / sqrt(n)`.
pub fn t_interval(samples: &[f64], level: Level) -> Result<Interval, StatsError> {
    let n = samples.len();
    if n < 2 {
        return Err(StatsError::TooFewSamples(n));
    }
    let sd = libm::sqrt(variance(samples));
    Ok(Interval {
        mean: mean(samples),
        half_width: t_quantile(level, (n - 1) as f64) * sd / libm::sqrt(n as f64),
        level,
        n,
    })
}

/// Per-epoch interval across seeds.
pub fn t_confidence_band(series: &SampleSeries, level: Level) -> Result<ConfidenceBand, StatsError> {
    let n = series.seeds();
    if n < 2 {
        return Err(StatsError::TooFewSamples(n));
    }
    let mut band = ConfidenceBand { epochs: series.epochs.clone(), mean: Vec::new(), half_width: Vec::new(), level, n };
    let mut column = Vec::with_capacity(n);
    for k in 0..series.epochs.len() {
        column.clear();
        column.extend(series.values.iter().map(|v| v[k]));
        let i = t_interval(&column, level)?;
        band.mean.push(i.mean);
        band.half_width.push(i.half_width);
    }
    Ok(band)
}

/// `a - b` seed by seed; seeds and epochs must match.
pub fn paired_difference(a: &SampleSeries, b: &SampleSeries) -> Result<SampleSeries, StatsError> {
    if a.epochs != b.epochs {
        return Err(StatsError::Misaligned("epoch axes differ"));
    }
    if a.seeds() != b.seeds() {
        return Err(StatsError::Misaligned("paired arms need the same seeds"));
    }
    let values = a.values.iter().zip(&b.values).map(|(x, y)| x.iter().zip(y).map(|(x, y)| x - y).collect()).collect();
    Ok(SampleSeries { epochs: a.epochs.clone(), values })
}

/// Difference of independent sample means with the Welch interval.
pub fn welch_interval(a: &[f64], b: &[f64], level: Level) -> Result<Interval, StatsError> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(StatsError::TooFewSamples(s.len()));
        }
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (variance(a) / na, variance(b) / nb);
    let se2 = sa + sb;
    let df = if se2 > 0.0 { se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0)) } else { na + nb - 2.0 };
    Ok(Interval {
        mean: mean(a) - mean(b),
        half_width: t_quantile(level, df) * libm::sqrt(se2),
        level,
        n: a.len().min(b.len()),
    })
}

/// Per-epoch `mean(a) - mean(b)` for independently trained arms.
pub fn unpaired_difference(a: &SampleSeries, b: &SampleSeries, level: Level) -> Result<ConfidenceBand, StatsError> {
    if a.epochs != b.epochs {
        return Err(StatsError::Misaligned("epoch axes differ"));
    }
    let mut band =
        ConfidenceBand { epochs: a.epochs.clone(), mean: Vec::new(), half_width: Vec::new(), level, n: a.seeds().min(b.seeds()) };
    for k in 0..a.epochs.len() {
        let ca: Vec<f64> = a.values.iter().map(|v| v[k]).collect();
        let cb: Vec<f64> = b.values.iter().map(|v| v[k]).collect();
        let i = welch_interval(&ca, &cb, level)?;
        band.mean.push(i.mean);
        band.half_width.push(i.half_width);
    }
    Ok(band)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub factor: f64,
    pub uncertainty: f64,
    /// set when the denominator interval reaches 0: `factor` is then the
    /// smallest ratio compatible with both intervals
    pub lower_bound_only: bool,
}

/// `a / b` with first-order propagation of the two half-widths.
pub fn improvement_factor(a: &Interval, b: &Interval) -> Factor {
    if b.lower() <= 0.0 {
        let factor = if b.upper() > 0.0 { a.lower().max(0.0) / b.upper() } else { f64::INFINITY };
        return Factor { factor, uncertainty: f64::NAN, lower_bound_only: true };
    }
    let factor = a.mean / b.mean;
    let ra = if a.mean != 0.0 { a.half_width / a.mean } else { 0.0 };
    let rb = b.half_width / b.mean;
    Factor { factor, uncertainty: libm::fabs(factor) * libm::sqrt(ra * ra + rb * rb), lower_bound_only: false }
}
