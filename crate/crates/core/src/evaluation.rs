//! Threshold-filtered error metrics, contextual atypical-sample selection and two
//! reference forecasters.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DayType, DayTypeScheme, DemandTensor, TemporalKey};

/// Ground-truth values below this are excluded from the metrics by default.
pub const DEFAULT_K: f64 = 11.0;

/// Tolerance when turning `q * n` into a rank, so `0.95 * 100` is rank 95.
const RANK_EPS: f64 = 1e-9;

fn kept<'a>(preds: &'a [f64], truths: &'a [f64], k: f64) -> Result<impl Iterator<Item = (f64, f64)> + Clone + 'a> {
    if preds.len() != truths.len() {
        return Err(Error::Data(format!("{} predictions for {} truths", preds.len(), truths.len())));
    }
    let it = preds.iter().zip(truths).filter(move |(_, &t)| t >= k).map(|(&p, &t)| (p, t));
    if it.clone().next().is_none() {
        return Err(Error::EmptyEvaluation { k });
    }
    Ok(it)
}

/// Root mean squared error over pairs whose truth is at least `k`.
pub fn rmse(preds: &[f64], truths: &[f64], k: f64) -> Result<f64> {
    let it = kept(preds, truths, k)?;
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), (p, t)| (s + (p - t) * (p - t), n + 1));
    Ok((sum / n as f64).sqrt())
}

/// Mean absolute percentage error, in percent, over pairs whose truth is at least `k`.
pub fn mape(preds: &[f64], truths: &[f64], k: f64) -> Result<f64> {
    let it = kept(preds, truths, k)?;
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), (p, t)| (s + ((p - t) / t).abs(), n + 1));
    Ok(100.0 * sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mape: f64,
    pub n_evaluated: usize,
    pub n_filtered_out: usize,
    pub k: f64,
}

impl Metrics {
    pub fn compute(preds: &[f64], truths: &[f64], k: f64) -> Result<Self> {
        let n_evaluated = truths.iter().filter(|&&t| t >= k).count();
        Ok(Self {
            rmse: rmse(preds, truths, k)?,
            mape: mape(preds, truths, k)?,
            n_evaluated,
            n_filtered_out: truths.len() - n_evaluated,
            k,
        })
    }
}

/// Metrics restricted to samples above a contextual quantile threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtypicalSlice {
    pub quantile: f64,
    pub n_selected: usize,
    /// `None` when no selected sample survives the `k` filter.
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub overall: Metrics,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub atypical: Vec<AtypicalSlice>,
}

impl MetricsReport {
    /// Overall metrics plus one slice per `(quantile, mask)`.
    pub fn build(preds: &[f64], truths: &[f64], k: f64, slices: &[(f64, Vec<bool>)]) -> Result<Self> {
        let overall = Metrics::compute(preds, truths, k)?;
        let mut atypical = Vec::with_capacity(slices.len());
        for (q, mask) in slices {
            if mask.len() != truths.len() {
                return Err(Error::Data(format!("mask of {} for {} samples", mask.len(), truths.len())));
            }
            let (p, t): (Vec<f64>, Vec<f64>) = mask
                .iter()
                .zip(preds.iter().zip(truths))
                .filter(|(&m, _)| m)
                .map(|(_, (&p, &t))| (p, t))
                .unzip();
            let metrics = match Metrics::compute(&p, &t, k) {
                Ok(m) => Some(m),
                Err(Error::EmptyEvaluation { .. }) => None,
                Err(e) => return Err(e),
            };
            atypical.push(AtypicalSlice {
                quantile: *q,
                n_selected: p.len(),
                metrics,
            });
        }
        Ok(Self { overall, atypical })
    }
}

/// The `q`-quantile as the `ceil(q * n)`-th smallest value. `values` need not be sorted.
pub fn nearest_rank(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let rank = ((q * values.len() as f64) - RANK_EPS).ceil().max(1.0) as usize;
    Some(values[rank.min(values.len()) - 1])
}

fn day_index(key: &TemporalKey, scheme: DayTypeScheme) -> usize {
    match key.day_type(scheme) {
        DayType::Workday => 0,
        DayType::Weekend => 1,
        DayType::Holiday => 2,
    }
}

/// Per-(region, time-of-day slot, day type) demand thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtypicalThresholds {
    pub quantile: f64,
    pub scheme: DayTypeScheme,
    pub n_nodes: usize,
    pub slots_per_day: usize,
    /// `[node][slot][day type]`, flattened, using 3 day-type columns whatever the scheme.
    pub thresholds: Vec<f64>,
    /// Whether each bucket fell back to its region's all-context quantile.
    pub fallback: Vec<bool>,
}

impl AtypicalThresholds {
    fn index(&self, node: usize, key: &TemporalKey) -> usize {
        (node * self.slots_per_day + key.slot) * 3 + day_index(key, self.scheme)
    }

    pub fn threshold(&self, node: usize, key: &TemporalKey) -> f64 {
        self.thresholds[self.index(node, key)]
    }

    /// Whether a true demand at `(node, key)` is atypical: strictly above its threshold.
    pub fn is_atypical(&self, node: usize, key: &TemporalKey, truth: f64) -> bool {
        truth > self.threshold(node, key)
    }

    /// Mask over `targets.len() * N` samples (target-major), true where the truth exceeds
    /// the threshold of its bucket. `keys[t]` is the key of interval `t`.
    pub fn select(&self, tensor: &DemandTensor, targets: &[usize], keys: &[TemporalKey]) -> Vec<bool> {
        targets
            .iter()
            .flat_map(|&t| {
                let key = keys[t];
                tensor
                    .row(t)
                    .iter()
                    .enumerate()
                    .map(move |(i, &x)| self.is_atypical(i, &key, x as f64))
            })
            .collect()
    }
}

/// Fits thresholds from the intervals in `train` only. Buckets with fewer than `min_bucket`
/// samples use the region's quantile over all training intervals.
pub fn fit_atypical_thresholds(
    tensor: &DemandTensor,
    keys: &[TemporalKey],
    train: Range<usize>,
    q: f64,
    min_bucket: usize,
    scheme: DayTypeScheme,
) -> Result<AtypicalThresholds> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Config(format!("quantile {q} outside [0, 1]")));
    }
    let end = train.end.min(tensor.periods()).min(keys.len());
    if train.start >= end {
        return Err(Error::Data("no training intervals to fit thresholds on".into()));
    }
    let n = tensor.nodes();
    let slots = keys[train.start].slots_per_day;
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); n * slots * 3];
    let mut per_region: Vec<Vec<f64>> = vec![Vec::new(); n];
    for t in train.start..end {
        let key = &keys[t];
        for (i, &x) in tensor.row(t).iter().enumerate() {
            buckets[(i * slots + key.slot) * 3 + day_index(key, scheme)].push(x as f64);
            per_region[i].push(x as f64);
        }
    }
    let region_q: Vec<f64> = per_region
        .iter_mut()
        .map(|v| nearest_rank(v, q).unwrap_or(0.0))
        .collect();
    let mut thresholds = Vec::with_capacity(buckets.len());
    let mut fallback = Vec::with_capacity(buckets.len());
    for (b, values) in buckets.iter_mut().enumerate() {
        let node = b / (slots * 3);
        if values.len() < min_bucket.max(1) {
            thresholds.push(region_q[node]);
            fallback.push(true);
        } else {
            thresholds.push(nearest_rank(values, q).expect("bucket is non-empty"));
            fallback.push(false);
        }
    }
    Ok(AtypicalThresholds {
        quantile: q,
        scheme,
        n_nodes: n,
        slots_per_day: slots,
        thresholds,
        fallback,
    })
}

/// Last observed value as the forecast: `x_hat(t + 1) = x(t)`.
pub fn baseline_persistence(tensor: &DemandTensor, targets: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(targets.len() * tensor.nodes());
    for &t in targets {
        if t == 0 || t >= tensor.periods() {
            return Err(Error::Data(format!("persistence needs interval {} before target {t}", t as i64 - 1)));
        }
        out.extend(tensor.row(t - 1).iter().map(|&x| x as f64));
    }
    Ok(out)
}

/// Mean training demand per (region, time-of-day slot, day type).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoricalAverage {
    pub scheme: DayTypeScheme,
    pub n_nodes: usize,
    pub slots_per_day: usize,
    /// `[node][slot][day type]`, flattened with 3 day-type columns. Empty buckets hold the
    /// region's overall training mean.
    pub means: Vec<f64>,
}

impl HistoricalAverage {
    pub fn fit(tensor: &DemandTensor, keys: &[TemporalKey], train: Range<usize>, scheme: DayTypeScheme) -> Result<Self> {
        let end = train.end.min(tensor.periods()).min(keys.len());
        if train.start >= end {
            return Err(Error::Data("no training intervals for the historical average".into()));
        }
        let n = tensor.nodes();
        let slots = keys[train.start].slots_per_day;
        let mut sums = vec![(0.0, 0usize); n * slots * 3];
        let mut region = vec![(0.0, 0usize); n];
        for t in train.start..end {
            let key = &keys[t];
            for (i, &x) in tensor.row(t).iter().enumerate() {
                let b = &mut sums[(i * slots + key.slot) * 3 + day_index(key, scheme)];
                b.0 += x as f64;
                b.1 += 1;
                region[i].0 += x as f64;
                region[i].1 += 1;
            }
        }
        let means = sums
            .iter()
            .enumerate()
            .map(|(b, &(s, c))| {
                if c > 0 {
                    s / c as f64
                } else {
                    let (rs, rc) = region[b / (slots * 3)];
                    rs / rc as f64
                }
            })
            .collect();
        Ok(Self {
            scheme,
            n_nodes: n,
            slots_per_day: slots,
            means,
        })
    }

    pub fn predict_one(&self, node: usize, key: &TemporalKey) -> f64 {
        self.means[(node * self.slots_per_day + key.slot) * 3 + day_index(key, self.scheme)]
    }

    /// Forecasts for every node of every target interval, target-major.
    pub fn predict(&self, targets: &[usize], keys: &[TemporalKey]) -> Vec<f64> {
        targets
            .iter()
            .flat_map(|&t| (0..self.n_nodes).map(move |i| self.predict_one(i, &keys[t])))
            .collect()
    }
}
