//! The calibration training loop.
//!
//! Each step draws one pair from a per-step random substream, renders it
//! with the calibrator's current knobs and takes one gradient step. The
//! reconstruction and OV gradients are central differences per knob. On
//! DFF steps the DFF gradient is a two-sided simultaneous-perturbation
//! estimate along a random sign direction, since every evaluation costs a
//! decisive map. With `lambda_dff = 0` the DFF term is never computed.

use std::path::Path;

use log::{debug, info};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::calibrator::CalibratorParams;
use super::checkpoint::write_checkpoint;
use super::{dff_term, es_step, knob_gradient, recon_and_ov, CalibrationConfig};
use crate::error::{Error, Result};
use crate::explain::{CfConfig, MapCache};
use crate::numerics::Rng;
use crate::scene::{render_synthetic, GeneratorKnobs, PairedSample, KNOB_BOUNDS};
use crate::sut::{ReferenceSut, SutOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub l_recon: f64,
    pub l_ov: f64,
    pub l_dff: Option<f64>,
    pub l_total: f64,
    pub knob_hash: u64,
}

/// Everything needed to continue training from a step boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub params: CalibratorParams,
    pub held_dff: f64,
    pub rng: Rng,
}

impl TrainState {
    pub fn new(cfg: &CalibrationConfig, dataset: &[PairedSample], rng: Rng) -> Result<Self> {
        let mut init = rng.substream("calibrator-init", 0);
        Ok(TrainState { step: 0, params: CalibratorParams::init(cfg, dataset, &mut init)?, held_dff: 0.0, rng })
    }
}

fn knob_hash(k: &GeneratorKnobs) -> u64 {
    let mut h = Sha256::new();
    h.update(k.seed.to_le_bytes());
    for v in k.continuous() {
        h.update(v.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Training log as CSV: `step,l_recon,l_ov,l_dff,l_total,knob_hash`, with
/// `l_dff` empty on steps that held the previous value.
pub fn log_csv(log: &[TrainLogEntry]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for e in log {
        let dff = e.l_dff.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{},{},{:016x}\n", e.step, e.l_recon, e.l_ov, dff, e.l_total, e.knob_hash));
    }
    s
}

const LOG_HEADER: &str = "step,l_recon,l_ov,l_dff,l_total,knob_hash";

/// Inverse of [`log_csv`].
pub fn parse_log_csv(text: &str) -> Result<Vec<TrainLogEntry>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::format("training log has an unexpected header"));
    }
    lines
        .map(|line| {
            let bad = || Error::format(format!("bad training log line {line:?}"));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(TrainLogEntry {
                step: f[0].parse().map_err(|_| bad())?,
                l_recon: num(f[1])?,
                l_ov: num(f[2])?,
                l_dff: if f[3].is_empty() { None } else { Some(num(f[3])?) },
                l_total: num(f[4])?,
                knob_hash: u64::from_str_radix(f[5], 16).map_err(|_| bad())?,
            })
        })
        .collect()
}

struct Prepared<'a> {
    pairs: &'a [PairedSample],
    inputs: Vec<Vec<f64>>,
    outs_r: Vec<SutOutput>,
}

/// Trains from scratch and returns the final parameters and the full log.
pub fn train_calibrator(
    dataset: &[PairedSample],
    sut: &ReferenceSut,
    cfg: &CalibrationConfig,
    cf: &CfConfig,
    cache: &MapCache,
    rng: Rng,
) -> Result<(CalibratorParams, Vec<TrainLogEntry>)> {
    let state = TrainState::new(cfg, dataset, rng)?;
    let (state, log) = train_from(state, dataset, sut, cfg, cf, cache, None, None)?;
    Ok((state.params, log))
}

/// Continues training from `state` up to `cfg.total_steps`, or until
/// `stop_at` if given. Writes a checkpoint every `checkpoint_every` steps
/// and at the end when `checkpoint` is set.
#[allow(clippy::too_many_arguments)]
pub fn train_from(
    mut state: TrainState,
    dataset: &[PairedSample],
    sut: &ReferenceSut,
    cfg: &CalibrationConfig,
    cf: &CfConfig,
    cache: &MapCache,
    checkpoint: Option<(&Path, u64)>,
    stop_at: Option<usize>,
) -> Result<(TrainState, Vec<TrainLogEntry>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::validation("calibration dataset is empty"));
    }
    let checksum = sut.checksum();
    let dff_cf = cfg.dff_profile(cf);
    let prep = Prepared {
        pairs: dataset,
        inputs: dataset.iter().map(|p| CalibratorParams::input(&p.synthetic_context())).collect(),
        outs_r: dataset.iter().map(|p| sut.forward(&p.x_r)).collect::<Result<_>>()?,
    };
    let end = stop_at.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    let mut log = Vec::with_capacity(end.saturating_sub(state.step));
    while state.step < end {
        let t = state.step;
        if t.is_multiple_of(cfg.es_every) {
            seed_search(&mut state, &prep, sut, cfg)?;
        }
        log.push(train_step(&mut state, &prep, sut, cfg, &dff_cf, cache)?);
        state.step += 1;
        if t.is_multiple_of(100) {
            let e = log.last().expect("just pushed");
            info!("calibration step {t}: total {:.6} recon {:.6} ov {:.6}", e.l_total, e.l_recon, e.l_ov);
        }
        if let Some((path, hash)) = checkpoint {
            if state.step.is_multiple_of(cfg.checkpoint_every) || state.step == end {
                write_checkpoint(path, hash, &state)?;
            }
        }
    }
    if sut.checksum() != checksum {
        return Err(Error::Contract("SUT weights changed during calibration".into()));
    }
    Ok((state, log))
}

fn train_step(
    state: &mut TrainState,
    prep: &Prepared<'_>,
    sut: &ReferenceSut,
    cfg: &CalibrationConfig,
    dff_cf: &CfConfig,
    cache: &MapCache,
) -> Result<TrainLogEntry> {
    let t = state.step;
    let mut r = state.rng.substream("step", t as u64);
    let i = r.index(prep.pairs.len());
    let pair = &prep.pairs[i];
    let out_r = &prep.outs_r[i];
    let (knobs, fwd) = state.params.forward(prep.inputs[i].clone(), &pair.knobs_init);

    let task = |k: &GeneratorKnobs| -> Result<(f64, f64)> {
        let x = render_synthetic(&pair.sd, k)?;
        recon_and_ov(sut, &x, &pair.x_r, out_r)
    };
    let (recon, ov) = task(&knobs)?;
    let mut grad = knob_gradient(&knobs, cfg.fd_step, |k| task(k).map(|(a, b)| a + cfg.beta * b))?;

    let mut fresh = None;
    if cfg.lambda_dff > 0.0 && t.is_multiple_of(cfg.dff_every) {
        let dff_at = |k: &GeneratorKnobs| -> Result<f64> {
            dff_term(sut, &render_synthetic(&pair.sd, k)?, &pair.x_r, dff_cf, cache)
        };
        let sign: [f64; 5] = std::array::from_fn(|_| if r.bernoulli(0.5) { 1.0 } else { -1.0 });
        let base = knobs.continuous();
        let shift = |dir: f64| -> GeneratorKnobs {
            let v: [f64; 5] = std::array::from_fn(|j| {
                base[j] + dir * cfg.spsa_step * (KNOB_BOUNDS[j].1 - KNOB_BOUNDS[j].0) * sign[j]
            });
            GeneratorKnobs::from_continuous(knobs.seed, v)
        };
        let (kp, km) = (shift(1.0), shift(-1.0));
        let (value, (dp, dm)) = rayon::join(|| dff_at(&knobs), || rayon::join(|| dff_at(&kp), || dff_at(&km)));
        let (value, dp, dm) = (value?, dp?, dm?);
        for j in 0..5 {
            let span = kp.continuous()[j] - km.continuous()[j];
            if span != 0.0 {
                grad[j] += cfg.lambda_dff * (dp - dm) / span;
            }
        }
        state.held_dff = value;
        fresh = Some(value);
        debug!("step {t}: dff {value:.6} (+{dp:.6} / -{dm:.6})");
    }
    let total = recon + cfg.beta * ov + cfg.lambda_dff * state.held_dff;
    state.params.backward(&fwd, &grad, cfg)?;
    Ok(TrainLogEntry { step: t, l_recon: recon, l_ov: ov, l_dff: fresh, l_total: total, knob_hash: knob_hash(&knobs) })
}

/// Re-chooses the shared render seed on a small batch of pairs.
fn seed_search(state: &mut TrainState, prep: &Prepared<'_>, sut: &ReferenceSut, cfg: &CalibrationConfig) -> Result<()> {
    let mut r = state.rng.substream("es", state.step as u64);
    let batch: Vec<usize> = (0..cfg.es_batch).map(|_| r.index(prep.pairs.len())).collect();
    let predicted: Vec<GeneratorKnobs> =
        batch.iter().map(|&i| state.params.forward(prep.inputs[i].clone(), &prep.pairs[i].knobs_init).0).collect();
    let held = cfg.lambda_dff * state.held_dff;
    let fitness = |seed: u64, jitter: &[f64; 5]| -> Result<f64> {
        let mut total = 0.0;
        for (&i, k) in batch.iter().zip(&predicted) {
            let base = k.continuous();
            let v: [f64; 5] = std::array::from_fn(|j| base[j] + jitter[j]);
            let x = render_synthetic(&prep.pairs[i].sd, &GeneratorKnobs::from_continuous(seed, v))?;
            let (recon, ov) = recon_and_ov(sut, &x, &prep.pairs[i].x_r, &prep.outs_r[i])?;
            total += recon + cfg.beta * ov + held;
        }
        Ok(total / batch.len() as f64)
    };
    let res = es_step(state.params.seed, fitness, &mut r, cfg.es_population, cfg.es_sigma)?;
    if res.seed != state.params.seed {
        debug!(
            "step {}: seed {} -> {} (fitness {:.6} -> {:.6})",
            state.step, state.params.seed, res.seed, res.incumbent_fitness, res.fitness
        );
    }
    state.params.seed = res.seed;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_pairs, SceneConfig};
    use crate::sut::SutId;

    fn small() -> CalibrationConfig {
        CalibrationConfig {
            total_steps: 12,
            es_every: 5,
            es_population: 4,
            es_batch: 2,
            dff_k_cf: 1,
            dff_cf_steps: 3,
            checkpoint_every: 4,
            ..CalibrationConfig::default()
        }
    }

    #[test]
    fn dff_is_recomputed_on_schedule_and_held_otherwise() {
        let sut = ReferenceSut::builtin(SutId::Steer).unwrap();
        let pairs = generate_pairs(&SceneConfig { pairs: 4, decoy_rate: 0.5, ..SceneConfig::default() }).unwrap();
        let cfg = small();
        let (_, log) =
            train_calibrator(&pairs, &sut, &cfg, &CfConfig::reduced(), &MapCache::in_memory(), Rng::new(1)).unwrap();
        assert_eq!(log.len(), 12);
        assert_eq!(parse_log_csv(&log_csv(&log)).unwrap(), log);
        let mut held = 0.0;
        for e in &log {
            assert_eq!(e.l_dff.is_some(), e.step % 3 == 0, "step {}", e.step);
            if let Some(d) = e.l_dff {
                held = d;
            }
            let want = e.l_recon + cfg.beta * e.l_ov + cfg.lambda_dff * held;
            assert!((e.l_total - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weights_log_reconstruction_only() {
        let sut = ReferenceSut::builtin(SutId::Steer).unwrap();
        let pairs = generate_pairs(&SceneConfig { pairs: 3, ..SceneConfig::default() }).unwrap();
        let cfg = CalibrationConfig { beta: 0.0, lambda_dff: 0.0, ..small() };
        let (_, log) =
            train_calibrator(&pairs, &sut, &cfg, &CfConfig::reduced(), &MapCache::in_memory(), Rng::new(2)).unwrap();
        assert!(log.iter().all(|e| e.l_total == e.l_recon && e.l_dff.is_none()));
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let sut = ReferenceSut::builtin(SutId::Steer).unwrap();
        let pairs = generate_pairs(&SceneConfig { pairs: 4, decoy_rate: 0.5, ..SceneConfig::default() }).unwrap();
        let cfg = small();
        let cf = CfConfig::reduced();
        let cache = MapCache::in_memory();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.mfck");

        let full = TrainState::new(&cfg, &pairs, Rng::new(5)).unwrap();
        let (full, full_log) = train_from(full, &pairs, &sut, &cfg, &cf, &cache, None, None).unwrap();

        let first = TrainState::new(&cfg, &pairs, Rng::new(5)).unwrap();
        let (_, mut log) = train_from(first, &pairs, &sut, &cfg, &cf, &cache, Some((&path, 9)), Some(7)).unwrap();
        let resumed = super::super::read_checkpoint(&path, 9).unwrap();
        assert_eq!(resumed.step, 7);
        let (done, rest) = train_from(resumed, &pairs, &sut, &cfg, &cf, &cache, None, None).unwrap();
        log.extend(rest);
        assert_eq!(done.params, full.params);
        assert_eq!(log, full_log);
    }
}
