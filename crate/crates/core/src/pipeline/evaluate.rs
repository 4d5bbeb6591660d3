use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, ThresholdMode, Variant};
use crate::calibration::{apply_calibrator, CalibratorParams};
use crate::error::{Error, Result};
use crate::explain::{dff_distance, MapCache};
use crate::fidelity::{
    calibrate_at, iv_check, lf_check, ov_distance_and_score, pass_rate, FidelityRecord, Measurements, Provenance,
    Thresholds,
};
use crate::numerics::Image;
use crate::scene::{real_candidates, PairedSample, Split};
use crate::stats::{spearman, CorrelationResult};
use crate::sut::ReferenceSut;

/// Synthetic image of a pair under a variant: the initial render, or the
/// calibrator's render when parameters are given.
pub fn synthetic_image(pair: &PairedSample, calibrator: Option<&CalibratorParams>) -> Result<Image> {
    match calibrator {
        None => Ok(pair.x_s_init.clone()),
        Some(p) => Ok(apply_calibrator(p, &pair.synthetic_context())?.1),
    }
}

/// Every fidelity distance of one pair.
pub fn measure_pair(
    sut: &ReferenceSut,
    pair: &PairedSample,
    x_s: &Image,
    cfg: &RunConfig,
    cache: &MapCache,
) -> Result<Measurements> {
    let rw = real_candidates(pair, cfg.scene.rw_candidates)?;
    let iv = iv_check(x_s, &rw, cfg.fidelity.eps_in)?;
    let (out_s, acts_s) = sut.forward_with_taps(x_s)?;
    let (out_r, acts_r) = sut.forward_with_taps(&pair.x_r)?;
    let (ov_loss, ov_score) = ov_distance_and_score(&out_s, &out_r)?;
    let (lf, _) = lf_check(&acts_s, &acts_r, f64::INFINITY)?;
    let map_r = cache.get_or_compute(sut, &pair.x_r, &cfg.cf)?;
    let map_s = cache.get_or_compute(sut, x_s, &cfg.cf)?;
    let dff = dff_distance(&map_r, &map_s)?;
    Ok(Measurements { iv_distance: iv.distance, ov_loss, ov_score, lf, dff })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileRow {
    pub p: f64,
    pub eps_dff: f64,
    /// DFF pass-rate per split at this threshold.
    pub pass_rates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassRates {
    pub n: usize,
    pub iv: f64,
    pub ov: f64,
    pub dff: f64,
    pub lf: Option<f64>,
    pub overall: f64,
}

impl PassRates {
    fn of(records: &[&FidelityRecord]) -> Option<Self> {
        if records.is_empty() {
            return None;
        }
        let n = records.len();
        let rate = |f: &dyn Fn(&FidelityRecord) -> bool| records.iter().filter(|r| f(r)).count() as f64 / n as f64;
        let lf = records.iter().all(|r| r.verdict.lf.is_some()).then(|| rate(&|r| r.verdict.lf == Some(true)));
        Some(PassRates {
            n,
            iv: rate(&|r| r.verdict.iv),
            ov: rate(&|r| r.verdict.ov),
            dff: rate(&|r| r.verdict.dff),
            lf,
            overall: rate(&|r| r.verdict.overall),
        })
    }
}

/// The aggregate JSON of an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub toolkit_version: String,
    pub config_hash: String,
    pub manifest_config_hash: String,
    pub sut: String,
    pub sut_checksum: String,
    pub variant: Variant,
    pub thresholds: Thresholds,
    pub percentile_thresholds: Vec<PercentileRow>,
    /// Pair ids per split.
    pub splits: BTreeMap<String, Vec<String>>,
    pub pass_rates: BTreeMap<String, PassRates>,
    /// Rank correlations on the held-out split, keyed `"a~b"`.
    pub spearman: BTreeMap<String, CorrelationResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// One record per pair, in input order.
    pub records: Vec<FidelityRecord>,
    pub splits: Vec<Split>,
    pub aggregate: Aggregate,
}

impl Evaluation {
    pub fn split_records(&self, split: Split) -> Vec<&FidelityRecord> {
        self.records.iter().zip(&self.splits).filter(|(_, s)| **s == split).map(|(r, _)| r).collect()
    }
}

/// Thresholds for a run. In percentile mode the DFF thresholds come from
/// the calibration-split distances in `measured`; the other thresholds stay
/// at their configured values.
pub fn resolve_thresholds(
    cfg: &RunConfig,
    measured: &[(Split, Measurements)],
) -> Result<(Thresholds, Vec<(f64, f64)>)> {
    let user = cfg.fidelity.user_thresholds();
    match cfg.fidelity.thresholds {
        ThresholdMode::User => Ok((user, vec![])),
        ThresholdMode::Percentile(p1, p2) => {
            let cal: Vec<f64> = measured.iter().filter(|(s, _)| *s == Split::Calibration).map(|(_, m)| m.dff).collect();
            let (e1, e2) = calibrate_at(&cal, p1, p2)?;
            let th = Thresholds {
                eps_dff: e2,
                provenance: Provenance::Percentile { p: p2, split: Split::Calibration.as_str().to_string() },
                ..user
            };
            Ok((th, vec![(p1, e1), (p2, e2)]))
        }
    }
}

const CORRELATED: [(&str, &str); 3] = [("ov_score", "dff"), ("iv_score", "dff"), ("iv_score", "ov_score")];

fn metric(r: &FidelityRecord, name: &str) -> f64 {
    match name {
        "ov_score" => r.ov_score,
        "iv_score" => r.iv_score,
        "dff" => r.dff,
        _ => unreachable!("unknown metric {name}"),
    }
}

/// Measures every pair in parallel and judges them against the resolved
/// thresholds. Records keep the input order.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    pairs: &[PairedSample],
    manifest_config_hash: &str,
    sut: &ReferenceSut,
    cfg: &RunConfig,
    variant: Variant,
    calibrator: Option<&CalibratorParams>,
    cache: &MapCache,
) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(Error::validation("nothing to evaluate"));
    }
    if (variant == Variant::Baseline) != calibrator.is_none() {
        return Err(Error::config("calibrated variants need calibrator parameters; the baseline takes none"));
    }
    cfg.validate()?;
    let measured: Vec<(Split, Measurements)> = pairs
        .par_iter()
        .map(|p| {
            let x_s = synthetic_image(p, calibrator)?;
            Ok((p.split, measure_pair(sut, p, &x_s, cfg, cache)?))
        })
        .collect::<Result<_>>()?;
    let (thresholds, percentiles) = resolve_thresholds(cfg, &measured)?;
    let records: Vec<FidelityRecord> = pairs
        .iter()
        .zip(&measured)
        .map(|(p, (_, m))| FidelityRecord::new(p.id.clone(), m.clone(), p.sd.decoy_sign_present, &thresholds))
        .collect::<Result<_>>()?;
    let splits: Vec<Split> = pairs.iter().map(|p| p.split).collect();

    let mut split_ids = BTreeMap::new();
    let mut pass_rates = BTreeMap::new();
    let mut by_split = BTreeMap::new();
    for s in [Split::Calibration, Split::Heldout] {
        let recs: Vec<&FidelityRecord> =
            records.iter().zip(&splits).filter(|(_, x)| **x == s).map(|(r, _)| r).collect();
        split_ids.insert(s.as_str().to_string(), recs.iter().map(|r| r.pair_id.clone()).collect());
        if let Some(pr) = PassRates::of(&recs) {
            pass_rates.insert(s.as_str().to_string(), pr);
        }
        by_split.insert(s, recs);
    }

    let mut percentile_thresholds = vec![];
    for (p, eps) in percentiles {
        let mut rates = BTreeMap::new();
        for (s, recs) in &by_split {
            if !recs.is_empty() {
                let owned: Vec<FidelityRecord> = recs.iter().map(|r| (*r).clone()).collect();
                rates.insert(s.as_str().to_string(), pass_rate(&owned, eps)?);
            }
        }
        percentile_thresholds.push(PercentileRow { p, eps_dff: eps, pass_rates: rates });
    }

    let heldout = &by_split[&Split::Heldout];
    let mut correlations = BTreeMap::new();
    for (a, b) in CORRELATED {
        let xs: Vec<f64> = heldout.iter().map(|r| metric(r, a)).collect();
        let ys: Vec<f64> = heldout.iter().map(|r| metric(r, b)).collect();
        match spearman(&xs, &ys, &cfg.stats) {
            Ok(c) => {
                correlations.insert(format!("{a}~{b}"), c);
            }
            Err(e) => warn!("no held-out correlation {a}~{b}: {e}"),
        }
    }

    let aggregate = Aggregate {
        toolkit_version: crate::VERSION.to_string(),
        config_hash: cfg.hash(),
        manifest_config_hash: manifest_config_hash.to_string(),
        sut: sut.name().to_string(),
        sut_checksum: format!("{:016x}", sut.checksum()),
        variant,
        thresholds,
        percentile_thresholds,
        splits: split_ids,
        pass_rates,
        spearman: correlations,
    };
    Ok(Evaluation { records, splits, aggregate })
}

impl Aggregate {
    pub fn to_json(&self) -> Result<String> {
        super::to_json(self)
    }
}
