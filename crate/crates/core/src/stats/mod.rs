//! Rank correlation with bootstrap intervals, one-sided non-inferiority
//! tests and paired effect deltas.
//!
//! Bootstrap resamples draw from per-index random substreams and are reduced
//! in index order, so results do not depend on the thread count.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fidelity::{percentile, FidelityRecord};
use crate::numerics::Rng;

/// The `[stats]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    pub bootstrap_resamples: usize,
    pub seed: u64,
    pub alpha: f64,
    pub ni_margin_steering: f64,
    pub ni_margin_segmentation: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            bootstrap_resamples: 2000,
            seed: 11,
            alpha: 0.05,
            ni_margin_steering: -0.005,
            ni_margin_segmentation: -0.010,
        }
    }
}

impl StatsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bootstrap_resamples < 100 {
            return Err(Error::config("stats.bootstrap_resamples must be at least 100"));
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(Error::config("stats.alpha must lie in (0, 0.5)"));
        }
        if !(self.ni_margin_steering.is_finite() && self.ni_margin_segmentation.is_finite()) {
            return Err(Error::config("stats NI margins must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub rho: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NiResult {
    pub delta_mean: f64,
    pub ci_low_one_sided: f64,
    pub margin: f64,
    pub pass: bool,
}

/// Ranks starting at 1, with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
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

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Option<f64> {
    pearson(&average_ranks(xs), &average_ranks(ys))
}

fn resample_indices(tag: &str, seed: u64, b: usize, n: usize) -> Vec<usize> {
    let mut r = Rng::stream(tag, seed, b as u64);
    (0..n).map(|_| r.index(n)).collect()
}

/// Spearman's ρ with a percentile-bootstrap interval over resampled pairs.
/// Resamples without rank variance are skipped; the interval always
/// contains the point estimate.
pub fn spearman(xs: &[f64], ys: &[f64], cfg: &StatsConfig) -> Result<CorrelationResult> {
    if xs.len() != ys.len() {
        return Err(Error::validation(format!("spearman: {} vs {} values", xs.len(), ys.len())));
    }
    if xs.len() < 5 {
        return Err(Error::validation("spearman needs at least 5 pairs"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::validation("spearman of non-finite values"));
    }
    let rho = spearman_rho(xs, ys).ok_or_else(|| Error::validation("spearman of a constant sample"))?;
    let n = xs.len();
    let boot: Vec<f64> = (0..cfg.bootstrap_resamples)
        .into_par_iter()
        .map(|b| {
            let idx = resample_indices("bootstrap-rho", cfg.seed, b, n);
            let bx: Vec<f64> = idx.iter().map(|&i| xs[i]).collect();
            let by: Vec<f64> = idx.iter().map(|&i| ys[i]).collect();
            spearman_rho(&bx, &by)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let (lo, hi) = if boot.is_empty() {
        (rho, rho)
    } else {
        let half = cfg.alpha / 2.0 * 100.0;
        (percentile(&boot, half)?, percentile(&boot, 100.0 - half)?)
    };
    Ok(CorrelationResult { rho, ci_low: lo.min(rho), ci_high: hi.max(rho), n })
}

/// One-sided test that the mean delta exceeds `margin`: the lower bound is the
/// `alpha` quantile of bootstrap means.
pub fn non_inferiority(deltas: &[f64], margin: f64, cfg: &StatsConfig) -> Result<NiResult> {
    if deltas.len() < 10 {
        return Err(Error::validation(format!("non-inferiority needs at least 10 deltas, got {}", deltas.len())));
    }
    if deltas.iter().any(|v| !v.is_finite()) || !margin.is_finite() {
        return Err(Error::validation("non-inferiority of non-finite values"));
    }
    let n = deltas.len();
    let mean = deltas.iter().sum::<f64>() / n as f64;
    let means: Vec<f64> = (0..cfg.bootstrap_resamples)
        .into_par_iter()
        .map(|b| resample_indices("bootstrap-mean", cfg.seed, b, n).iter().map(|&i| deltas[i]).sum::<f64>() / n as f64)
        .collect();
    let low = percentile(&means, cfg.alpha * 100.0)?;
    Ok(NiResult { delta_mean: mean, ci_low_one_sided: low, margin, pass: low > margin })
}

/// Signed per-pair differences, calibrated minus baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDeltas {
    pub pair_ids: Vec<String>,
    pub iv: Vec<f64>,
    pub ov: Vec<f64>,
    pub dff: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub n: usize,
    pub delta_iv: f64,
    pub delta_ov: f64,
    pub delta_dff: f64,
}

/// Pairs records by id (baseline order) and differences the IV score,
/// OV score and DFF distance.
pub fn paired_deltas(baseline: &[FidelityRecord], calibrated: &[FidelityRecord]) -> Result<PairDeltas> {
    if baseline.len() != calibrated.len() {
        return Err(Error::validation(format!(
            "{} baseline vs {} calibrated records",
            baseline.len(),
            calibrated.len()
        )));
    }
    let by_id: HashMap<&str, &FidelityRecord> = calibrated.iter().map(|r| (r.pair_id.as_str(), r)).collect();
    if by_id.len() != calibrated.len() {
        return Err(Error::validation("duplicate pair ids among calibrated records"));
    }
    let mut d = PairDeltas { pair_ids: vec![], iv: vec![], ov: vec![], dff: vec![] };
    for b in baseline {
        let c = by_id
            .get(b.pair_id.as_str())
            .ok_or_else(|| Error::validation(format!("pair {} has no calibrated record", b.pair_id)))?;
        d.pair_ids.push(b.pair_id.clone());
        d.iv.push(c.iv_score - b.iv_score);
        d.ov.push(c.ov_score - b.ov_score);
        d.dff.push(c.dff - b.dff);
    }
    Ok(d)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn effect_table(baseline: &[FidelityRecord], calibrated: &[FidelityRecord]) -> Result<EffectRow> {
    let d = paired_deltas(baseline, calibrated)?;
    Ok(EffectRow { n: d.pair_ids.len(), delta_iv: mean(&d.iv), delta_ov: mean(&d.ov), delta_dff: mean(&d.dff) })
}
