//! Training loss (minimum-over-N reconstruction plus KL divergence) and
//! displacement metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cvae::{GaussianParams, PredictionSet};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    L1,
    L2,
    /// `λ·(L1 + L2)`.
    Blend,
}

impl DistanceKind {
    pub const ALL: [DistanceKind; 3] = [DistanceKind::L1, DistanceKind::L2, DistanceKind::Blend];

    pub fn label(self) -> &'static str {
        match self {
            DistanceKind::L1 => "L1",
            DistanceKind::L2 => "L2",
            DistanceKind::Blend => "lambda(L1+L2)",
        }
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceKind::L1 => "l1",
            DistanceKind::L2 => "l2",
            DistanceKind::Blend => "blend",
        })
    }
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(DistanceKind::L1),
            "l2" => Ok(DistanceKind::L2),
            "blend" | "lambda(l1+l2)" => Ok(DistanceKind::Blend),
            other => Err(Error::parse("distance", format!("unknown distance `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub distance: DistanceKind,
    pub lambda: f64,
    /// Latent draws per example for the minimum-over-N term.
    pub n_train: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1e-2,
            distance: DistanceKind::L2,
            lambda: 0.5,
            n_train: 32,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::parse("loss.alpha", "alpha and beta must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::parse("loss.lambda", "lambda must lie in [0, 1]"));
        }
        if self.n_train < 1 {
            return Err(Error::parse("loss.n_train", "n_train must be at least 1"));
        }
        Ok(())
    }
}

/// `KL(N(μ, σ²) ‖ N(0, I)) = −½ Σ (1 + log σ² − μ² − σ²)`.
pub fn kl_divergence(p: &GaussianParams) -> Result<f64> {
    if p.mu.len() != p.sigma.len() {
        return Err(Error::contract("mu and sigma lengths differ"));
    }
    if let Some(s) = p.sigma.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::contract(format!("sigma must be positive, got {s}")));
    }
    Ok(-0.5
        * p.mu
            .iter()
            .zip(&p.sigma)
            .map(|(m, s)| {
                let var = s * s;
                1.0 + var.ln() - m * m - var
            })
            .sum::<f64>())
}

pub fn distance(y: &[[f64; 2]], y_hat: &[[f64; 2]], kind: DistanceKind, lambda: f64) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::contract(format!(
            "trajectory lengths {} and {} differ",
            y.len(),
            y_hat.len()
        )));
    }
    let (mut l1, mut l2) = (0.0, 0.0);
    for (a, b) in y.iter().zip(y_hat) {
        let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
        l1 += dx.abs() + dy.abs();
        l2 += dx * dx + dy * dy;
    }
    Ok(match kind {
        DistanceKind::L1 => l1,
        DistanceKind::L2 => l2,
        DistanceKind::Blend => lambda * (l1 + l2),
    })
}

/// Minimum distance over the samples; ties go to the lowest index, which is
/// returned alongside.
pub fn mon_loss(y: &[[f64; 2]], samples: &PredictionSet, kind: DistanceKind, lambda: f64) -> Result<(f64, usize)> {
    if samples.points.is_empty() {
        return Err(Error::contract("minimum over an empty sample set"));
    }
    let mut best = (f64::INFINITY, 0);
    for i in 0..samples.k() {
        let d = distance(y, samples.trajectory(i), kind, lambda)?;
        if d < best.0 {
            best = (d, i);
        }
    }
    Ok(best)
}

/// Per-row distance between `pred: [N, 2T]` and `target: [N, 2T]`, shape `[N]`.
pub fn distance_graph<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    kind: DistanceKind,
    lambda: f64,
) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let l2 = |g: &mut Graph<T>| {
        let sq = g.square(diff);
        g.sum_axis(sq, 1)
    };
    let l1 = |g: &mut Graph<T>| {
        let ab = g.abs(diff);
        g.sum_axis(ab, 1)
    };
    match kind {
        DistanceKind::L2 => l2(g),
        DistanceKind::L1 => l1(g),
        DistanceKind::Blend => {
            let (a, b) = (l1(g)?, l2(g)?);
            let s = g.add(a, b)?;
            Ok(g.scale(s, T::lit(lambda)))
        }
    }
}

/// Sum over examples of the minimum distance across `n` samples.
/// `pred: [B·n, 2T]` holds example `b`'s samples in rows `b·n..(b+1)·n`;
/// `target: [B, 2T]`.
pub fn mon_graph<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    n: usize,
    kind: DistanceKind,
    lambda: f64,
) -> Result<Var> {
    let b = g.shape(target)[0];
    if n == 0 || g.shape(pred)[0] != b * n {
        return Err(Error::contract(format!(
            "{} predictions for {b} examples × {n} samples",
            g.shape(pred)[0]
        )));
    }
    let idx: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, n)).collect();
    let rep = g.gather(target, &idx)?;
    let d = distance_graph(g, pred, rep, kind, lambda)?;
    let d = g.reshape(d, &[b, n])?;
    let m = g.min_axis(d, 1)?;
    Ok(g.sum(m))
}

/// Batch-summed KL divergence of a diagonal Gaussian from the standard
/// normal, given `μ` and `log σ²` of equal shape.
pub fn kl_graph<T: Real>(g: &mut Graph<T>, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = g.square(mu);
    let var = g.exp(logvar);
    let a = g.add_scalar(logvar, T::one());
    let b = g.sub(a, mu2)?;
    let c = g.sub(b, var)?;
    let s = g.sum(c);
    Ok(g.scale(s, T::lit(-0.5)))
}

/// Handles of the loss terms in a training graph.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub mon: Var,
    pub kl: Var,
}

/// `α·MoN + β·KL`, the KL term entering with a positive sign so that
/// minimizing the total pulls the posterior toward the prior.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    mu: Var,
    logvar: Var,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let mon = mon_graph(g, pred, target, cfg.n_train, cfg.distance, cfg.lambda)?;
    let kl = kl_graph(g, mu, logvar)?;
    let a = g.scale(mon, T::lit(cfg.alpha));
    let b = g.scale(kl, T::lit(cfg.beta));
    let total = g.add(a, b)?;
    Ok(LossTerms { total, mon, kl })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricMode {
    /// Mean pointwise Euclidean error per sample, minimum over samples,
    /// mean over examples.
    #[default]
    Standard,
    /// `(1/n)·√(Σᵢ minₖ ‖yᵢ − ŷᵢᵏ‖²)` with the norm taken over the whole
    /// trajectory (or the endpoint for FDE).
    Literal,
}

fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn check_k(truth: &[Vec<[f64; 2]>], preds: &[PredictionSet], k: usize) -> Result<()> {
    if truth.len() != preds.len() || truth.is_empty() {
        return Err(Error::contract(format!(
            "{} ground truths for {} prediction sets",
            truth.len(),
            preds.len()
        )));
    }
    if k < 1 {
        return Err(Error::contract("k must be at least 1"));
    }
    if let Some(p) = preds.iter().find(|p| p.k() < k) {
        return Err(Error::contract(format!("only {} samples stored, k = {k}", p.k())));
    }
    Ok(())
}

fn min_over<F>(truth: &[Vec<[f64; 2]>], preds: &[PredictionSet], k: usize, mode: MetricMode, per_sample: F) -> Result<f64>
where
    F: Fn(&[[f64; 2]], &[[f64; 2]]) -> (f64, f64),
{
    check_k(truth, preds, k)?;
    let mut acc = 0.0;
    for (y, p) in truth.iter().zip(preds) {
        let best = (0..k)
            .map(|i| {
                let (standard, squared) = per_sample(y, p.trajectory(i));
                match mode {
                    MetricMode::Standard => standard,
                    MetricMode::Literal => squared,
                }
            })
            .fold(f64::INFINITY, f64::min);
        acc += best;
    }
    let n = truth.len() as f64;
    Ok(match mode {
        MetricMode::Standard => acc / n,
        MetricMode::Literal => acc.sqrt() / n,
    })
}

pub fn min_ade(truth: &[Vec<[f64; 2]>], preds: &[PredictionSet], k: usize, mode: MetricMode) -> Result<f64> {
    min_over(truth, preds, k, mode, |y, s| {
        let mean = y.iter().zip(s).map(|(a, b)| euclid(*a, *b)).sum::<f64>() / y.len() as f64;
        let sq = y.iter().zip(s).map(|(a, b)| euclid(*a, *b).powi(2)).sum::<f64>();
        (mean, sq)
    })
}

pub fn min_fde(truth: &[Vec<[f64; 2]>], preds: &[PredictionSet], k: usize, mode: MetricMode) -> Result<f64> {
    min_over(truth, preds, k, mode, |y, s| {
        let d = euclid(y[y.len() - 1], s[s.len() - 1]);
        (d, d * d)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub k: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub n_examples: usize,
}

/// One row per `k`, all from the same stored samples.
pub fn metric_table(
    truth: &[Vec<[f64; 2]>],
    preds: &[PredictionSet],
    ks: &[usize],
    mode: MetricMode,
) -> Result<Vec<MetricRow>> {
    ks.iter()
        .map(|&k| {
            Ok(MetricRow {
                k,
                min_ade: min_ade(truth, preds, k, mode)?,
                min_fde: min_fde(truth, preds, k, mode)?,
                n_examples: truth.len(),
            })
        })
        .collect()
}
