//! Displacement, miss and off-road metrics over a dataset of predictions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::net::Prediction;
use crate::raster::Mask;

pub const MISS_THRESHOLD_M: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    /// Divide the final displacement by T as in the literal formula.
    pub fde_divide_by_horizon: bool,
    /// Count a sample as missed when any (not all) of its top-k modes miss.
    pub miss_if_any: bool,
    pub miss_threshold_m: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            fde_divide_by_horizon: false,
            miss_if_any: false,
            miss_threshold_m: MISS_THRESHOLD_M,
        }
    }
}

fn check_len(traj: &[Vec2], gt: &[Vec2]) -> Result<()> {
    if traj.len() != gt.len() || gt.is_empty() {
        return Err(Error::Argument(format!(
            "trajectory has {} points, ground truth {}",
            traj.len(),
            gt.len()
        )));
    }
    Ok(())
}

pub fn ade(traj: &[Vec2], gt: &[Vec2]) -> Result<f64> {
    check_len(traj, gt)?;
    Ok(traj.iter().zip(gt).map(|(p, q)| p.distance(*q)).sum::<f64>() / gt.len() as f64)
}

pub fn fde(traj: &[Vec2], gt: &[Vec2]) -> Result<f64> {
    fde_with(traj, gt, &MetricOptions::default())
}

fn fde_with(traj: &[Vec2], gt: &[Vec2], opts: &MetricOptions) -> Result<f64> {
    check_len(traj, gt)?;
    let d = traj[traj.len() - 1].distance(gt[gt.len() - 1]);
    Ok(if opts.fde_divide_by_horizon {
        d / gt.len() as f64
    } else {
        d
    })
}

/// Indices of the `k` most confident modes, most confident first, ties to the lower index.
pub fn top_k(pred: &Prediction, k: usize) -> Result<Vec<usize>> {
    let m = pred.modes();
    if k == 0 || k > m {
        return Err(Error::Argument(format!("k = {k} outside 1..={m}")));
    }
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| pred.confidences[b].total_cmp(&pred.confidences[a]));
    idx.truncate(k);
    Ok(idx)
}

pub fn min_ade_k(pred: &Prediction, gt: &[Vec2], k: usize) -> Result<f64> {
    min_over_top_k(pred, k, |t| ade(t, gt))
}

pub fn min_fde_k(pred: &Prediction, gt: &[Vec2], k: usize) -> Result<f64> {
    min_over_top_k(pred, k, |t| fde(t, gt))
}

fn min_over_top_k(pred: &Prediction, k: usize, f: impl Fn(&[Vec2]) -> Result<f64>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for i in top_k(pred, k)? {
        best = best.min(f(&pred.trajectories[i])?);
    }
    Ok(best)
}

pub fn max_deviation(traj: &[Vec2], gt: &[Vec2]) -> Result<f64> {
    check_len(traj, gt)?;
    Ok(traj.iter().zip(gt).map(|(p, q)| p.distance(*q)).fold(0.0, f64::max))
}

/// True when some point lies strictly more than 2 m from the ground truth.
pub fn is_miss(traj: &[Vec2], gt: &[Vec2]) -> Result<bool> {
    Ok(max_deviation(traj, gt)? > MISS_THRESHOLD_M)
}

fn sample_missed(pred: &Prediction, gt: &[Vec2], k: usize, opts: &MetricOptions) -> Result<bool> {
    let mut misses = Vec::with_capacity(k);
    for i in top_k(pred, k)? {
        misses.push(max_deviation(&pred.trajectories[i], gt)? > opts.miss_threshold_m);
    }
    Ok(if opts.miss_if_any {
        misses.iter().any(|&m| m)
    } else {
        misses.iter().all(|&m| m)
    })
}

fn check_dataset(preds: &[Prediction], gts: &[Vec<Vec2>]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Argument("empty dataset".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    Ok(())
}

/// Fraction of samples whose top-k modes all miss.
pub fn miss_rate_2m(preds: &[Prediction], gts: &[Vec<Vec2>], k: usize) -> Result<f64> {
    miss_rate_with(preds, gts, k, &MetricOptions::default())
}

fn miss_rate_with(preds: &[Prediction], gts: &[Vec<Vec2>], k: usize, opts: &MetricOptions) -> Result<f64> {
    check_dataset(preds, gts)?;
    let mut missed = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        missed += sample_missed(p, g, k, opts)? as usize;
    }
    Ok(missed as f64 / preds.len() as f64)
}

/// Fraction of one sample's modes with at least one point off the mask.
pub fn sample_off_road(pred: &Prediction, mask: &Mask) -> f64 {
    let off = pred
        .trajectories
        .iter()
        .filter(|t| t.iter().any(|&p| !mask.contains(p)))
        .count();
    off as f64 / pred.modes() as f64
}

/// Mean over samples of the per-sample off-road fraction.
pub fn off_road_rate(preds: &[Prediction], masks: &[Mask]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Argument("empty dataset".into()));
    }
    if masks.len() != preds.len() {
        return Err(Error::Argument(format!(
            "{} masks for {} predictions",
            masks.len(),
            preds.len()
        )));
    }
    let sum: f64 = preds.iter().zip(masks).map(|(p, m)| sample_off_road(p, m)).sum();
    Ok(sum / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub min_ade: BTreeMap<usize, f64>,
    pub min_fde: BTreeMap<usize, f64>,
    pub miss_rate_2m: BTreeMap<usize, f64>,
    pub off_road_rate: f64,
    pub sample_count: usize,
    /// The k values of the report's table columns, in request order.
    pub k_list: Vec<usize>,
}

/// Metrics for every k in `k_list`, plus minFDE at k = 1.
///
/// A k larger than the number of modes is evaluated with all modes.
pub fn aggregate(
    preds: &[Prediction],
    gts: &[Vec<Vec2>],
    masks: &[Mask],
    k_list: &[usize],
    opts: &MetricOptions,
) -> Result<MetricsReport> {
    check_dataset(preds, gts)?;
    if k_list.is_empty() || k_list.contains(&0) {
        return Err(Error::Argument(format!("invalid k list {k_list:?}")));
    }
    let mut min_ade = BTreeMap::new();
    let mut min_fde = BTreeMap::new();
    let mut miss_rate = BTreeMap::new();
    let n = preds.len() as f64;
    let mut fde_ks: Vec<usize> = k_list.to_vec();
    fde_ks.push(1);
    for &k in k_list {
        let mut ade_sum = 0.0;
        let mut missed = 0usize;
        for (p, g) in preds.iter().zip(gts) {
            let kk = k.min(p.modes());
            ade_sum += min_ade_k(p, g, kk)?;
            missed += sample_missed(p, g, kk, opts)? as usize;
        }
        min_ade.insert(k, ade_sum / n);
        miss_rate.insert(k, missed as f64 / n);
    }
    for &k in &fde_ks {
        let mut sum = 0.0;
        for (p, g) in preds.iter().zip(gts) {
            sum += min_over_top_k(p, k.min(p.modes()), |t| fde_with(t, g, opts))?;
        }
        min_fde.insert(k, sum / n);
    }
    Ok(MetricsReport {
        min_ade,
        min_fde,
        miss_rate_2m: miss_rate,
        off_road_rate: off_road_rate(preds, masks)?,
        sample_count: preds.len(),
        k_list: k_list.to_vec(),
    })
}

impl MetricsReport {
    /// Column names in table order: minADE per k, MissRateTop per k, minFDE1, offRoadRate.
    pub fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = self.k_list.iter().map(|k| format!("minADE{k}")).collect();
        cols.extend(self.k_list.iter().map(|k| format!("MissRateTop{k}")));
        cols.push("minFDE1".into());
        cols.push("offRoadRate".into());
        cols
    }

    pub fn values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.k_list.iter().map(|k| self.min_ade[k]).collect();
        v.extend(self.k_list.iter().map(|k| self.miss_rate_2m[k]));
        v.push(self.min_fde[&1]);
        v.push(self.off_road_rate);
        v
    }

    pub fn csv_header(&self) -> String {
        self.columns().join(",")
    }

    pub fn csv_row(&self) -> String {
        self.values()
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
