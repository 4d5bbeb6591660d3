use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Variant};
use super::evaluate::{measure_pair, synthetic_image};
use crate::calibration::{
    log_csv, parse_log_csv, read_checkpoint, train_from, write_checkpoint, CalibrationConfig, CalibratorParams,
    TrainLogEntry, TrainState,
};
use crate::error::{Error, Result};
use crate::explain::{hash_json, MapCache};
use crate::fidelity::FidelityRecord;
use crate::numerics::io::{read_file, write_atomic};
use crate::numerics::Rng;
use crate::scene::{PairedSample, Split};
use crate::stats::{effect_table, non_inferiority, paired_deltas, EffectRow, NiResult};
use crate::sut::{ReferenceSut, SutKind};

pub const CHECKPOINT_FILE: &str = "checkpoint.mfck";
pub const LOG_FILE: &str = "train_log.csv";

/// Hash guarding a checkpoint: the sections that shape training, the
/// variant and the SUT weights.
pub fn checkpoint_hash(cfg: &RunConfig, variant: Variant, sut: &ReferenceSut) -> u64 {
    hash_json(&(&cfg.scene, &cfg.cf, &cfg.calibration, variant, sut.checksum()))
}

/// Mean held-out DFF distance over pairs with or without the decoy sign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoySummary {
    pub n: usize,
    pub baseline_dff: f64,
    pub calibrated_dff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub toolkit_version: String,
    pub config_hash: String,
    pub manifest_config_hash: String,
    pub sut: String,
    pub variant: Variant,
    /// The calibration section actually used; OVF runs have `lambda_dff = 0`.
    pub effective: CalibrationConfig,
    pub steps: usize,
    pub render_seed: u64,
    pub first_total: f64,
    pub final_total: f64,
    pub heldout: EffectRow,
    /// Absent when the held-out split is too small for the test.
    pub ni_ov: Option<NiResult>,
    pub decoy: Option<DecoySummary>,
    pub plain: Option<DecoySummary>,
    pub calibrated_mean_dff: f64,
}

impl CalibrationSummary {
    pub fn to_json(&self) -> Result<String> {
        super::to_json(self)
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationRun {
    pub params: CalibratorParams,
    pub log: Vec<TrainLogEntry>,
    pub baseline: Vec<FidelityRecord>,
    pub calibrated: Vec<FidelityRecord>,
    pub summary: CalibrationSummary,
}

fn mean(v: impl Iterator<Item = f64>) -> (usize, f64) {
    let (n, s) = v.fold((0, 0.0), |(n, s), x| (n + 1, s + x));
    (n, if n == 0 { 0.0 } else { s / n as f64 })
}

fn decoy_summary(baseline: &[FidelityRecord], calibrated: &[FidelityRecord], decoy: bool) -> Option<DecoySummary> {
    let (n, b) = mean(baseline.iter().filter(|r| r.decoy == decoy).map(|r| r.dff));
    let (_, c) = mean(calibrated.iter().filter(|r| r.decoy == decoy).map(|r| r.dff));
    (n > 0).then_some(DecoySummary { n, baseline_dff: b, calibrated_dff: c })
}

/// Trains the calibrator on the calibration split, then measures the
/// held-out split before and after calibration. With `out_dir` set the run
/// checkpoints there and resumes from an existing checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn calibrate(
    pairs: &[PairedSample],
    manifest_config_hash: &str,
    sut: &ReferenceSut,
    cfg: &RunConfig,
    variant: Variant,
    cache: &MapCache,
    out_dir: Option<&Path>,
) -> Result<CalibrationRun> {
    cfg.validate()?;
    let effective = match variant {
        Variant::Baseline => return Err(Error::config("the baseline variant is not trained")),
        Variant::Ovf => CalibrationConfig { lambda_dff: 0.0, ..cfg.calibration.clone() },
        Variant::Dff => cfg.calibration.clone(),
    };
    let train: Vec<PairedSample> = pairs.iter().filter(|p| p.split == Split::Calibration).cloned().collect();
    let heldout: Vec<&PairedSample> = pairs.iter().filter(|p| p.split == Split::Heldout).collect();
    if train.is_empty() {
        return Err(Error::validation("calibration split is empty"));
    }
    if heldout.is_empty() {
        return Err(Error::validation("held-out split is empty"));
    }
    let hash = checkpoint_hash(cfg, variant, sut);
    let ck_path = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    let log_path = out_dir.map(|d| d.join(LOG_FILE));

    let (mut state, mut log) = match (&ck_path, &log_path) {
        (Some(ck), Some(lp)) if ck.exists() => {
            let state = read_checkpoint(ck, hash)?;
            let text = String::from_utf8(read_file(lp)?).map_err(|_| Error::format("training log is not UTF-8"))?;
            let mut log = parse_log_csv(&text)?;
            log.retain(|e| e.step < state.step);
            if log.len() != state.step {
                return Err(Error::format(format!("training log has {} entries for step {}", log.len(), state.step)));
            }
            info!("resuming calibration at step {}", state.step);
            (state, log)
        }
        _ => (TrainState::new(&effective, &train, Rng::new(effective.seed))?, vec![]),
    };
    while state.step < effective.total_steps {
        let stop = (state.step + effective.checkpoint_every).min(effective.total_steps);
        let (next, part) = train_from(state, &train, sut, &effective, &cfg.cf, cache, None, Some(stop))?;
        state = next;
        log.extend(part);
        if let (Some(ck), Some(lp)) = (&ck_path, &log_path) {
            write_atomic(lp, log_csv(&log).as_bytes())?;
            write_checkpoint(ck, hash, &state)?;
        }
    }
    if let Some(lp) = &log_path {
        write_atomic(lp, log_csv(&log).as_bytes())?;
    }

    let thresholds = cfg.fidelity.user_thresholds();
    let measured = heldout
        .par_iter()
        .map(|p| {
            let base = measure_pair(sut, p, &p.x_s_init, cfg, cache)?;
            let cal = measure_pair(sut, p, &synthetic_image(p, Some(&state.params))?, cfg, cache)?;
            let decoy = p.sd.decoy_sign_present;
            Ok((
                FidelityRecord::new(p.id.clone(), base, decoy, &thresholds)?,
                FidelityRecord::new(p.id.clone(), cal, decoy, &thresholds)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (baseline, calibrated): (Vec<_>, Vec<_>) = measured.into_iter().unzip();
    let margin = match sut.kind() {
        SutKind::Steering => cfg.stats.ni_margin_steering,
        SutKind::Segmentation => cfg.stats.ni_margin_segmentation,
    };
    let deltas = paired_deltas(&baseline, &calibrated)?;
    let ni_ov = match non_inferiority(&deltas.ov, margin, &cfg.stats) {
        Ok(r) => Some(r),
        Err(Error::Validation(m)) => {
            warn!("no non-inferiority verdict: {m}");
            None
        }
        Err(e) => return Err(e),
    };
    let summary = CalibrationSummary {
        toolkit_version: crate::VERSION.to_string(),
        config_hash: cfg.hash(),
        manifest_config_hash: manifest_config_hash.to_string(),
        sut: sut.name().to_string(),
        variant,
        effective,
        steps: state.step,
        render_seed: state.params.seed,
        first_total: log.first().map_or(f64::NAN, |e| e.l_total),
        final_total: log.last().map_or(f64::NAN, |e| e.l_total),
        heldout: effect_table(&baseline, &calibrated)?,
        ni_ov,
        decoy: decoy_summary(&baseline, &calibrated, true),
        plain: decoy_summary(&baseline, &calibrated, false),
        calibrated_mean_dff: mean(calibrated.iter().map(|r| r.dff)).1,
    };
    Ok(CalibrationRun { params: state.params, log, baseline, calibrated, summary })
}
