//! Multi-label AUC, interval-coverage calibration, and uncertainty/error
//! decile analysis.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::pfin::ImputationOutput;
use crate::special::normal_quantile;
use crate::tensor::Tensor;

/// Nominal coverage levels 0.1, 0.2, …, 0.9.
pub fn default_levels() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Mann–Whitney AUC of `scores` against binary `labels`; `None` when one
/// class is absent.
pub fn binary_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AucReport {
    pub mean: f64,
    /// Per-class AUC; `None` for classes lacking positives or negatives.
    pub per_class: Vec<Option<f64>>,
}

impl AucReport {
    pub fn skipped(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_class.iter().enumerate().filter(|(_, a)| a.is_none()).map(|(i, _)| i)
    }
}

/// Mean per-class AUC over `n × C` scores; classes without both outcomes are skipped.
pub fn mean_auc(scores: &Tensor, labels: &[Vec<bool>]) -> Result<AucReport> {
    let (n, c) = (scores.rows(), scores.cols());
    if labels.len() != n || labels.iter().any(|l| l.len() != c) {
        return Err(Error::dim("mean_auc", scores.shape(), &[labels.len(), labels.first().map_or(0, Vec::len)]));
    }
    let mut col = vec![0.0; n];
    let mut lab = vec![false; n];
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|j| {
            for i in 0..n {
                col[i] = scores.row(i)[j];
                lab[i] = labels[i][j];
            }
            binary_auc(&col, &lab)
        })
        .collect();
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::UndefinedMetric("no class has both positive and negative samples".into()));
    }
    Ok(AucReport {
        mean: valid.iter().sum::<f64>() / valid.len() as f64,
        per_class,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityCurve {
    pub nominal_levels: Vec<f64>,
    pub observed_coverage: Vec<f64>,
    /// Unweighted mean of `|observed − nominal|` over the levels.
    pub ece: f64,
}

/// Coverage of central Gaussian intervals `μ ± z_{(1+p)/2}·σ`, counted per
/// (sample, dimension) pair.
pub fn reliability(out: &ImputationOutput, target: &Tensor, levels: &[f64]) -> Result<ReliabilityCurve> {
    if out.mu.shape() != target.shape() || out.log_var.shape() != target.shape() {
        return Err(Error::dim("reliability", out.mu.shape(), target.shape()));
    }
    // Standardized residuals |t − μ|/σ, compared against each quantile.
    let residuals: Vec<f64> = out
        .mu
        .data()
        .iter()
        .zip(out.log_var.data())
        .zip(target.data())
        .map(|((&m, &lv), &t)| {
            let dev = libm::fabs(t - m);
            if dev == 0.0 {
                0.0
            } else {
                dev / libm::exp(0.5 * lv)
            }
        })
        .collect();
    let total = residuals.len() as f64;
    let observed: Vec<f64> = levels
        .iter()
        .map(|&p| {
            let z = normal_quantile(0.5 * (1.0 + p));
            residuals.iter().filter(|&&r| r <= z).count() as f64 / total
        })
        .collect();
    let ece = observed.iter().zip(levels).map(|(o, p)| libm::fabs(o - p)).sum::<f64>() / levels.len() as f64;
    Ok(ReliabilityCurve {
        nominal_levels: levels.to_vec(),
        observed_coverage: observed,
        ece,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecileBin {
    pub mean_sigma_sq: f64,
    pub mean_sq_error: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecileReport {
    pub bins: Vec<DecileBin>,
}

impl DecileReport {
    /// Rank correlation between bin mean uncertainty and bin mean error.
    pub fn spearman(&self) -> Result<f64> {
        let s: Vec<f64> = self.bins.iter().map(|b| b.mean_sigma_sq).collect();
        let e: Vec<f64> = self.bins.iter().map(|b| b.mean_sq_error).collect();
        spearman(&s, &e)
    }
}

/// Ten equal-count bins by ascending per-sample mean `σ²` (ties keep input
/// order), each reporting mean `σ²` and mean `‖z − μ‖²/d`.
pub fn decile_analysis(out: &ImputationOutput, target: &Tensor) -> Result<DecileReport> {
    if out.mu.shape() != target.shape() || out.log_var.shape() != target.shape() {
        return Err(Error::dim("decile_analysis", out.mu.shape(), target.shape()));
    }
    let (n, d) = (target.rows(), target.cols());
    if n < 10 {
        return Err(Error::InsufficientData { needed: 10, got: n });
    }
    let sigma: Vec<f64> = (0..n)
        .map(|i| out.log_var.row(i).iter().map(|&v| libm::exp(v)).sum::<f64>() / d as f64)
        .collect();
    let err: Vec<f64> = (0..n)
        .map(|i| {
            out.mu.row(i).iter().zip(target.row(i)).map(|(m, t)| (t - m) * (t - m)).sum::<f64>() / d as f64
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[a].total_cmp(&sigma[b]));

    let (base, extra) = (n / 10, n % 10);
    let mut bins = Vec::with_capacity(10);
    let mut start = 0;
    for b in 0..10 {
        let size = base + usize::from(b < extra);
        let idx = &order[start..start + size];
        start += size;
        let k = size as f64;
        bins.push(DecileBin {
            mean_sigma_sq: idx.iter().map(|&i| sigma[i]).sum::<f64>() / k,
            mean_sq_error: idx.iter().map(|&i| err[i]).sum::<f64>() / k,
            count: size,
        });
    }
    Ok(DecileReport { bins })
}

/// Spearman rank correlation with average-rank ties. Constant inputs have
/// no defined correlation and are reported as an error.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::dim("spearman", &[xs.len()], &[ys.len()]));
    }
    if xs.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: xs.len() });
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("Spearman correlation of a constant sequence".into()));
    }
    Ok(sxy / libm::sqrt(sxx * syy))
}
