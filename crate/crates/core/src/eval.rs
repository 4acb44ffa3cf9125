//! Pose metrics: root-aligned MPJPE, 3DPCK, AUC and the error histogram.
//!
//! Poses are `[B, N, 3]` tensors in millimeters.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PCK_THRESHOLD_MM: f64 = 150.0;
/// AUC thresholds: 0, 5, …, 150 mm.
pub const AUC_STEP_MM: f64 = 5.0;
pub const AUC_POINTS: usize = 31;

/// Euclidean error of every joint after moving both roots to the origin,
/// laid out sample-major.
pub fn joint_errors(pred: &Tensor, gt: &Tensor, root: usize) -> Result<Vec<f64>> {
    let s = gt.shape();
    if pred.shape() != s || s.len() != 3 || s[2] != 3 {
        return Err(Error::shape("mpjpe", pred.shape(), s));
    }
    if root >= s[1] {
        return Err(Error::Param(format!("root {root} outside {} joints", s[1])));
    }
    if s[0] == 0 || s[1] == 0 {
        return Err(Error::Empty("no poses to evaluate".into()));
    }
    let n = s[1];
    let (p, g) = (pred.data(), gt.data());
    let mut out = Vec::with_capacity(s[0] * n);
    for b in 0..s[0] {
        let r = (b * n + root) * 3;
        for j in 0..n {
            let i = (b * n + j) * 3;
            let sq: f64 = (0..3)
                .map(|c| {
                    let d = (p[i + c] - p[r + c]) - (g[i + c] - g[r + c]);
                    d * d
                })
                .sum();
            out.push(sq.sqrt());
        }
    }
    Ok(out)
}

pub fn mpjpe(pred: &Tensor, gt: &Tensor, root: usize) -> Result<f64> {
    let e = joint_errors(pred, gt, root)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Percentage of errors strictly below `threshold`; an exact joint counts
/// at every threshold, including 0.
pub fn pck_from_errors(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    let hit = errors.iter().filter(|e| **e < threshold || **e == 0.0).count();
    100.0 * hit as f64 / errors.len() as f64
}

pub fn pck3d(pred: &Tensor, gt: &Tensor, root: usize, threshold: f64) -> Result<f64> {
    Ok(pck_from_errors(&joint_errors(pred, gt, root)?, threshold))
}

pub fn auc_from_errors(errors: &[f64]) -> f64 {
    let total: f64 = (0..AUC_POINTS).map(|i| pck_from_errors(errors, i as f64 * AUC_STEP_MM)).sum();
    total / AUC_POINTS as f64 / 100.0
}

pub fn auc(pred: &Tensor, gt: &Tensor, root: usize) -> Result<f64> {
    Ok(auc_from_errors(&joint_errors(pred, gt, root)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bucket_mm: f64,
    /// `counts[i]` covers `[i·bucket, (i+1)·bucket)`.
    pub counts: Vec<usize>,
    pub mean: f64,
    pub variance: f64,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Mean of bucket midpoints weighted by count.
    pub fn midpoint_mean(&self) -> f64 {
        let total = self.total().max(1) as f64;
        self.counts.iter().enumerate().map(|(i, c)| (i as f64 + 0.5) * self.bucket_mm * *c as f64).sum::<f64>() / total
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lower_mm,upper_mm,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let lo = i as f64 * self.bucket_mm;
            let _ = writeln!(out, "{lo},{},{c}", lo + self.bucket_mm);
        }
        out
    }
}

pub fn error_histogram(errors: &[f64], bucket_mm: f64) -> Result<Histogram> {
    if !(bucket_mm > 0.0) {
        return Err(Error::Param(format!("bucket width {bucket_mm} must be positive")));
    }
    if let Some(e) = errors.iter().find(|e| !e.is_finite() || **e < 0.0) {
        return Err(Error::Numeric(format!("error value {e} is not a finite distance")));
    }
    let slot = |e: f64| (e / bucket_mm).floor() as usize;
    let n_buckets = errors.iter().map(|e| slot(*e) + 1).max().unwrap_or(1);
    let mut counts = vec![0; n_buckets];
    for e in errors {
        counts[slot(*e)] += 1;
    }
    let n = errors.len().max(1) as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let variance = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Ok(Histogram { bucket_mm, counts, mean, variance })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpjpe_mm: f64,
    pub pck_percent: f64,
    pub auc: f64,
    pub histogram: Histogram,
    /// Mean joint error of each sample.
    pub per_sample_mm: Vec<f64>,
    /// MPJPE per action tag, when tags are given.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_action_mm: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn compute(pred: &Tensor, gt: &Tensor, root: usize, tags: Option<&[String]>) -> Result<Self> {
        let errors = joint_errors(pred, gt, root)?;
        let n = gt.shape()[1];
        let per_sample_mm: Vec<f64> = errors.chunks(n).map(|c| c.iter().sum::<f64>() / n as f64).collect();
        let mut per_action_mm = BTreeMap::new();
        if let Some(tags) = tags {
            if tags.len() != per_sample_mm.len() {
                return Err(Error::Contract(format!("{} action tags for {} samples", tags.len(), per_sample_mm.len())));
            }
            let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
            for (t, e) in tags.iter().zip(&per_sample_mm) {
                let a = acc.entry(t).or_default();
                a.0 += e;
                a.1 += 1;
            }
            per_action_mm = acc.into_iter().map(|(k, (s, c))| (k.to_string(), s / c as f64)).collect();
        }
        Ok(Self {
            mpjpe_mm: errors.iter().sum::<f64>() / errors.len() as f64,
            pck_percent: pck_from_errors(&errors, PCK_THRESHOLD_MM),
            auc: auc_from_errors(&errors),
            histogram: error_histogram(&errors, 5.0)?,
            per_sample_mm,
            per_action_mm,
        })
    }
}
