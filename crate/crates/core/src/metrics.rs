//! Depth error metrics, sparsification curves, AUSE/AURG and normalised UCE.
//!
//! Everything here works in `f64` on flattened per-pixel records.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::ValidMask;

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BINS: usize = 100;
/// Largest removal fraction on the sparsification grid, in percent.
const MAX_REMOVAL_PERCENT: usize = 98;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelRecord {
    pub gt: f64,
    pub pred: f64,
    pub uncertainty: f64,
}

/// Flattens the valid pixels of one image. Pixels with non-positive or
/// non-finite ground truth are dropped.
pub fn records(gt: &[f32], pred: &[f32], uncertainty: &[f32], mask: &ValidMask) -> Result<Vec<PixelRecord>> {
    let n = mask.bits().len();
    if gt.len() != n || pred.len() != n || uncertainty.len() != n {
        return Err(Error::invalid(format!(
            "record inputs disagree in length: gt {}, pred {}, uncertainty {}, mask {n}",
            gt.len(),
            pred.len(),
            uncertainty.len()
        )));
    }
    Ok((0..n)
        .filter(|&i| mask.bits()[i])
        .map(|i| PixelRecord {
            gt: gt[i] as f64,
            pred: pred[i] as f64,
            uncertainty: uncertainty[i] as f64,
        })
        .filter(|r| r.gt > 0.0 && r.gt.is_finite() && r.pred.is_finite() && r.uncertainty.is_finite())
        .collect())
}

/// Mean absolute relative error over pixels with positive ground truth.
pub fn abs_rel(pred: &[f32], gt: &[f32]) -> f64 {
    let (sum, n) = pred
        .iter()
        .zip(gt)
        .filter(|(_, &g)| g > 0.0)
        .fold((0.0, 0usize), |(s, n), (&p, &g)| {
            (s + ((p as f64 - g as f64) / g as f64).abs(), n + 1)
        });
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    AbsRel,
    Rmse,
    DeltaGe125,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::AbsRel, MetricKind::Rmse, MetricKind::DeltaGe125];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::AbsRel => "abs_rel",
            MetricKind::Rmse => "rmse",
            MetricKind::DeltaGe125 => "delta_1.25",
        }
    }

    /// Error of a single pixel: relative error, squared error or the δ flag.
    pub fn pixel_error(self, r: &PixelRecord) -> f64 {
        match self {
            MetricKind::AbsRel => (r.pred - r.gt).abs() / r.gt,
            MetricKind::Rmse => (r.pred - r.gt).powi(2),
            MetricKind::DeltaGe125 => {
                let ratio = (r.pred / r.gt).max(r.gt / r.pred);
                if ratio >= 1.25 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Metric value from the sum of per-pixel errors over `n` pixels.
    fn metric_from_sum(self, sum: f64, n: usize) -> f64 {
        let mean = sum / n as f64;
        match self {
            MetricKind::Rmse => mean.max(0.0).sqrt(),
            _ => mean,
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::parse(s, "expected abs_rel, rmse or delta_1.25"))
    }
}

pub fn pixel_errors(records: &[PixelRecord], kind: MetricKind) -> Vec<f64> {
    records.iter().map(|r| kind.pixel_error(r)).collect()
}

pub fn subset_metric(errors: &[f64], kind: MetricKind) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::invalid("metric of an empty pixel subset"));
    }
    Ok(kind.metric_from_sum(errors.iter().sum(), errors.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsificationResult {
    pub metric: MetricKind,
    pub fractions: Vec<f64>,
    pub oracle: Vec<f64>,
    pub actual: Vec<f64>,
    pub random: Vec<f64>,
    pub ause: f64,
    pub aurg: f64,
}

impl SparsificationResult {
    fn from_curves(metric: MetricKind, fractions: Vec<f64>, oracle: Vec<f64>, actual: Vec<f64>, random: Vec<f64>) -> Self {
        let n = fractions.len() as f64;
        let ause = actual.iter().zip(&oracle).map(|(a, o)| a - o).sum::<f64>() / n;
        let aurg = random.iter().zip(&actual).map(|(r, a)| r - a).sum::<f64>() / n;
        SparsificationResult {
            metric,
            fractions,
            oracle,
            actual,
            random,
            ause,
            aurg,
        }
    }
}

/// Number of pixels removed at grid point `t` of `steps`: `⌊t·0.98/steps·n⌋`,
/// evaluated in integers.
pub fn removal_count(t: usize, steps: usize, n: usize) -> usize {
    t * MAX_REMOVAL_PERCENT * n / (100 * steps)
}

/// Indices sorted by descending key; equal keys keep ascending index order.
fn descending_order(keys: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    idx
}

/// Metric over the remainder after removing each prefix of `order`, at every
/// grid point.
fn curve(errors: &[f64], order: &[usize], kind: MetricKind, steps: usize) -> Vec<f64> {
    let n = errors.len();
    let mut suffix = vec![0.0; n + 1];
    for k in (0..n).rev() {
        suffix[k] = suffix[k + 1] + errors[order[k]];
    }
    (0..=steps)
        .map(|t| {
            let k = removal_count(t, steps, n);
            kind.metric_from_sum(suffix[k], n - k)
        })
        .collect()
}

/// Oracle, actual and random sparsification curves of one image.
///
/// The grid has `steps + 1` points `t·0.98/steps`, `t = 0..=steps`; `steps` is
/// clamped to the pixel count. AUSE and AURG are means over all grid points.
pub fn sparsification(records: &[PixelRecord], kind: MetricKind, steps: usize) -> Result<SparsificationResult> {
    if steps < 2 {
        return Err(Error::invalid(format!("sparsification needs at least 2 steps, got {steps}")));
    }
    if records.is_empty() {
        return Err(Error::invalid("sparsification of an image without valid pixels"));
    }
    let steps = steps.min(records.len());
    let errors = pixel_errors(records, kind);
    let uncert: Vec<f64> = records.iter().map(|r| r.uncertainty).collect();
    let oracle = curve(&errors, &descending_order(&errors), kind, steps);
    let actual = curve(&errors, &descending_order(&uncert), kind, steps);
    let full = subset_metric(&errors, kind)?;
    let fractions = (0..=steps)
        .map(|t| t as f64 * (MAX_REMOVAL_PERCENT as f64 / 100.0) / steps as f64)
        .collect();
    Ok(SparsificationResult::from_curves(kind, fractions, oracle, actual, vec![full; steps + 1]))
}

/// Pointwise mean of per-image curves, with AUSE/AURG recomputed.
pub fn aggregate_sparsification(per_image: &[SparsificationResult]) -> Result<SparsificationResult> {
    let first = per_image
        .first()
        .ok_or_else(|| Error::invalid("no sparsification results to aggregate"))?;
    for r in per_image {
        if r.metric != first.metric || r.fractions != first.fractions {
            return Err(Error::invalid(format!(
                "cannot aggregate sparsification results with different grids or metrics ({} vs {})",
                r.metric, first.metric
            )));
        }
    }
    let n = per_image.len() as f64;
    let mean = |pick: fn(&SparsificationResult) -> &Vec<f64>| -> Vec<f64> {
        (0..first.fractions.len())
            .map(|i| per_image.iter().map(|r| pick(r)[i]).sum::<f64>() / n)
            .collect()
    };
    Ok(SparsificationResult::from_curves(
        first.metric,
        first.fractions.clone(),
        mean(|r| &r.oracle),
        mean(|r| &r.actual),
        mean(|r| &r.random),
    ))
}

/// Min-max normalisation; a constant or non-finite range gives all zeros.
pub fn min_max_normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / range).collect()
}

/// Normalised UCE of squared errors against uncertainties, binned over the
/// normalised error range.
pub fn nuce(records: &[PixelRecord], bins: usize) -> Result<f64> {
    let errors: Vec<f64> = records.iter().map(|r| (r.pred - r.gt).powi(2)).collect();
    let uncert: Vec<f64> = records.iter().map(|r| r.uncertainty).collect();
    nuce_from_values(&errors, &uncert, bins)
}

pub fn nuce_from_values(errors: &[f64], uncertainties: &[f64], bins: usize) -> Result<f64> {
    if errors.is_empty() || bins == 0 {
        return Err(Error::invalid("nUCE needs at least one pixel and one bin"));
    }
    if errors.len() != uncertainties.len() {
        return Err(Error::invalid("nUCE inputs differ in length"));
    }
    let e = min_max_normalize(errors);
    let u = min_max_normalize(uncertainties);
    let mut count = vec![0usize; bins];
    let mut e_sum = vec![0.0; bins];
    let mut u_sum = vec![0.0; bins];
    for (ev, uv) in e.iter().zip(&u) {
        let b = ((ev * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        e_sum[b] += ev;
        u_sum[b] += uv;
    }
    let n = e.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * (e_sum[b] / c - u_sum[b] / c).abs()
        })
        .sum())
}

/// Ranks starting at 1, ties sharing their average rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Spearman rank correlation; `None` when either input is constant or the
/// lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// `%.6g`-style formatting: six significant digits, trailing zeros dropped.
pub fn fmt_g6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        trim(&format!("{:.*}", (5 - exp) as usize, x))
    }
}
