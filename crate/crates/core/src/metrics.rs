//! Depth evaluation: nine standard error/accuracy metrics with multiplicative
//! mean alignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-image (or aggregated) metrics; field order is the reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub valid_pixels: usize,
}

impl MetricsReport {
    pub const COLUMNS: [&'static str; 9] = ["mae", "abs_rel", "sq_rel", "rmse", "rmse_log", "log10", "delta1", "delta2", "delta3"];

    pub fn values(&self) -> [f64; 9] {
        [self.mae, self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.log10, self.delta1, self.delta2, self.delta3]
    }

    fn from_values(v: [f64; 9], valid_pixels: usize) -> Self {
        Self {
            mae: v[0],
            abs_rel: v[1],
            sq_rel: v[2],
            rmse: v[3],
            rmse_log: v[4],
            log10: v[5],
            delta1: v[6],
            delta2: v[7],
            delta3: v[8],
            valid_pixels,
        }
    }

    /// Unweighted mean over images; `valid_pixels` is summed.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport> {
        if reports.is_empty() {
            return Err(Error::Invalid("no reports to aggregate".into()));
        }
        let mut acc = [0.0; 9];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        let n = reports.len() as f64;
        Ok(Self::from_values(acc.map(|a| a / n), reports.iter().map(|r| r.valid_pixels).sum()))
    }
}

/// Pixels where both depths are finite and positive, intersected with `mask`.
pub fn valid_mask(pred: &[f64], gt: &[f64], mask: Option<&[bool]>) -> Result<Vec<bool>> {
    if pred.len() != gt.len() || mask.is_some_and(|m| m.len() != gt.len()) {
        return Err(Error::Shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
    }
    Ok((0..gt.len())
        .map(|i| {
            let ok = |v: f64| v.is_finite() && v > 0.0;
            ok(pred[i]) && ok(gt[i]) && mask.is_none_or(|m| m[i])
        })
        .collect())
}

fn masked_mean(x: &[f64], mask: &[bool]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (v, &m) in x.iter().zip(mask) {
        if m {
            s += v;
            n += 1;
        }
    }
    s / n as f64
}

/// Scale factor `mean(gt) / mean(pred)` over `mask`.
pub fn alignment_scale(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<f64> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Domain("no valid pixels to align".into()));
    }
    let (mp, mg) = (masked_mean(pred, mask), masked_mean(gt, mask));
    if !(mp > 0.0 && mg > 0.0) {
        return Err(Error::Domain(format!("non-positive masked means: pred {mp}, gt {mg}")));
    }
    Ok(mg / mp)
}

/// `pred * mean(gt) / mean(pred)`, means over the valid mask.
pub fn align_mean(pred: &[f64], gt: &[f64]) -> Result<Vec<f64>> {
    let mask = valid_mask(pred, gt, None)?;
    let s = alignment_scale(pred, gt, &mask)?;
    Ok(pred.iter().map(|p| p * s).collect())
}

pub fn depth_metrics(pred: &[f64], gt: &[f64], mask: Option<&[bool]>, align: bool) -> Result<MetricsReport> {
    let mask = valid_mask(pred, gt, mask)?;
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::Domain("no valid pixels".into()));
    }
    let s = if align { alignment_scale(pred, gt, &mask)? } else { 1.0 };
    let mut acc = [0.0; 9];
    for i in (0..gt.len()).filter(|&i| mask[i]) {
        let (d, p) = (gt[i], pred[i] * s);
        let diff = p - d;
        let ratio = (p / d).max(d / p);
        let lg = p.ln() - d.ln();
        acc[0] += diff.abs();
        acc[1] += diff.abs() / d;
        acc[2] += diff * diff / d;
        acc[3] += diff * diff;
        acc[4] += lg * lg;
        acc[5] += (p.log10() - d.log10()).abs();
        acc[6] += f64::from(u8::from(ratio < 1.25));
        acc[7] += f64::from(u8::from(ratio < 1.25 * 1.25));
        acc[8] += f64::from(u8::from(ratio < 1.25 * 1.25 * 1.25));
    }
    let nf = n as f64;
    let mut v = acc.map(|a| a / nf);
    v[3] = v[3].sqrt();
    v[4] = v[4].sqrt();
    Ok(MetricsReport::from_values(v, n))
}
