//! Regression loss and correlation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Correlation summary between predictions and ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub srcc: f64,
    pub plcc: f64,
    pub main_score: f64,
    pub n: usize,
}

impl MetricReport {
    pub fn compute(pred: &[f64], gt: &[f64]) -> Result<Self> {
        let s = srcc(pred, gt)?;
        let p = plcc(pred, gt)?;
        Ok(MetricReport {
            srcc: s,
            plcc: p,
            main_score: main_score(s, p),
            n: pred.len(),
        })
    }
}

/// Smooth-L1 with threshold `beta`, averaged over elements:
/// `0.5 d^2` when `|d| < beta`, else `|d| - 0.5 beta`.
pub fn smooth_l1(pred: &[f64], gt: &[f64], beta: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "smooth_l1: {} predictions vs {} targets",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("smooth_l1: empty input".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("smooth_l1: beta {beta} must be > 0")));
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let d = (p - g).abs();
            if d < beta {
                0.5 * d * d
            } else {
                d - 0.5 * beta
            }
        })
        .sum();
    Ok(total / pred.len() as f64)
}

fn check_pair(x: &[f64], y: &[f64], what: &str) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "{what}: lengths {} and {} differ",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "{what} needs at least 2 samples, got {}",
            x.len()
        )));
    }
    Ok(())
}

/// 1-based ranks; tied values share the average of their positions.
/// Returns the ranks and whether any tie occurred.
pub fn average_ranks(x: &[f64]) -> (Vec<f64>, bool) {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_unstable_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut ties = false;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        if end - start > 1 {
            ties = true;
        }
        // positions start+1 ..= end, averaged
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    (ranks, ties)
}

/// Spearman rank-order correlation. Uses `1 - 6 sum d^2 / (n (n^2 - 1))`
/// when all ranks are distinct and Pearson correlation of average ranks
/// otherwise.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, "srcc")?;
    let (rx, tx) = average_ranks(x);
    let (ry, ty) = average_ranks(y);
    if !tx && !ty {
        let n = x.len() as f64;
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
        return Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)));
    }
    pearson(&rx, &ry).map_err(|_| Error::UndefinedMetric("srcc: all values tied in one input".into()))
}

/// Pearson linear correlation with population moments.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, "plcc")?;
    pearson(x, y)
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("plcc: zero variance input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn main_score(srcc: f64, plcc: f64) -> f64 {
    (srcc + plcc) / 2.0
}
