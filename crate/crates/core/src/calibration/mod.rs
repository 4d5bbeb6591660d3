//! DFF-guided generator calibration.
//!
//! A small calibrator network predicts refined generator knobs from the
//! synthetic context of a pair. It is trained on the combined loss
//! `L_recon + β·L_ov + λ_dff·L_dff`, where the DFF term is recomputed every
//! `dff_every` steps and held in between. The discrete render seed is chosen
//! by a population search; the continuous knobs follow finite-difference
//! gradients through the renderer, never through the SUT weights.

mod calibrator;
mod checkpoint;
mod train;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use calibrator::{apply_calibrator, image_features, CalibratorParams, SyntheticContext, FEATURE_DIM};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use train::{log_csv, parse_log_csv, train_calibrator, train_from, TrainLogEntry, TrainState};

use crate::error::{Error, Result};
use crate::explain::{decisive_map, dff_distance, CfConfig, MapCache};
use crate::fidelity::ov_distance_and_score;
use crate::numerics::{mse, Image, Rng};
use crate::scene::{GeneratorKnobs, KNOB_BOUNDS};
use crate::sut::{ReferenceSut, SutOutput};

/// Step budget of the full-scale schedule; the desk default is smaller.
pub const FULL_SCALE_STEPS: usize = 22000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    /// Train the calibrator network (knobs predicted per pair).
    Calibrator,
    /// Optimise one shared knob vector directly.
    Direct,
}

/// The `[calibration]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub total_steps: usize,
    pub beta: f64,
    pub lambda_dff: f64,
    pub dff_every: usize,
    pub es_population: usize,
    pub es_sigma: f64,
    /// Steps between seed searches.
    pub es_every: usize,
    /// Pairs averaged by each seed-search fitness evaluation.
    pub es_batch: usize,
    /// Learning rate of style_strength.
    pub lr_primary: f64,
    /// Learning rate of the post-processing knobs.
    pub lr_post: f64,
    /// Central-difference step for the reconstruction and OV knob gradients.
    pub fd_step: f64,
    /// Simultaneous-perturbation step for the DFF gradient, as a fraction of
    /// each knob's range.
    pub spsa_step: f64,
    pub hidden: usize,
    pub mode: CalibrationMode,
    pub seed: u64,
    /// Explainer budget of the DFF term.
    pub dff_k_cf: usize,
    pub dff_cf_steps: usize,
    pub checkpoint_every: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            total_steps: 2000,
            beta: 0.3,
            lambda_dff: 0.08,
            dff_every: 3,
            es_population: 32,
            es_sigma: 0.1,
            es_every: 50,
            es_batch: 4,
            lr_primary: 5e-3,
            lr_post: 1e-3,
            fd_step: 1e-3,
            spsa_step: 0.05,
            hidden: 16,
            mode: CalibrationMode::Calibrator,
            seed: 3,
            dff_k_cf: 8,
            dff_cf_steps: 30,
            checkpoint_every: 250,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("total_steps", self.total_steps),
            ("dff_every", self.dff_every),
            ("es_population", self.es_population),
            ("es_every", self.es_every),
            ("es_batch", self.es_batch),
            ("hidden", self.hidden),
            ("dff_k_cf", self.dff_k_cf),
            ("dff_cf_steps", self.dff_cf_steps),
            ("checkpoint_every", self.checkpoint_every),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("calibration.{name} must be at least 1")));
            }
        }
        for (name, v) in [("beta", self.beta), ("lambda_dff", self.lambda_dff), ("es_sigma", self.es_sigma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("calibration.{name} must be finite and non-negative")));
            }
        }
        for (name, v) in [
            ("lr_primary", self.lr_primary),
            ("lr_post", self.lr_post),
            ("fd_step", self.fd_step),
            ("spsa_step", self.spsa_step),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("calibration.{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Per-knob learning rates in [`GeneratorKnobs::continuous`] order.
    pub fn learning_rates(&self) -> [f64; 5] {
        [self.lr_primary, self.lr_post, self.lr_post, self.lr_post, self.lr_post]
    }

    /// Explainer settings of the DFF term: `cf` with the calibration budget.
    pub fn dff_profile(&self, cf: &CfConfig) -> CfConfig {
        CfConfig { k_cf: self.dff_k_cf, steps: self.dff_cf_steps, ..cf.clone() }
    }

    pub fn hash(&self) -> u64 {
        crate::explain::hash_json(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub recon: f64,
    pub ov: f64,
    /// Present only when the DFF term was recomputed.
    pub dff: Option<f64>,
    pub total: f64,
}

/// How the DFF term of [`combined_loss`] is obtained.
#[derive(Debug, Clone, Copy)]
pub enum DffTerm<'a> {
    /// Recompute from decisive maps; the real-side map comes from `cache`.
    Compute { cf: &'a CfConfig, cache: &'a MapCache },
    /// Reuse a previously computed value.
    Held(f64),
}

/// Reconstruction and OV loss of a synthetic render against its pair.
pub fn recon_and_ov(sut: &ReferenceSut, x_s: &Image, x_r: &Image, out_r: &SutOutput) -> Result<(f64, f64)> {
    x_s.same_shape(x_r)?;
    let recon = mse(x_s, x_r)?;
    let (ov, _) = ov_distance_and_score(&sut.forward(x_s)?, out_r)?;
    Ok((recon, ov))
}

/// DFF distance of `x_s` against the cached decisive map of `x_r`.
pub fn dff_term(sut: &ReferenceSut, x_s: &Image, x_r: &Image, cf: &CfConfig, cache: &MapCache) -> Result<f64> {
    let map_r = cache.get_or_compute(sut, x_r, cf)?;
    let map_s = decisive_map(sut, x_s, cf)?;
    dff_distance(&map_r, &map_s)
}

pub fn combined_loss(
    x_s: &Image,
    x_r: &Image,
    sut: &ReferenceSut,
    cfg: &CalibrationConfig,
    dff: DffTerm<'_>,
) -> Result<LossParts> {
    let out_r = sut.forward(x_r)?;
    let (recon, ov) = recon_and_ov(sut, x_s, x_r, &out_r)?;
    let (fresh, value) = match dff {
        DffTerm::Compute { cf, cache } => {
            let d = dff_term(sut, x_s, x_r, cf, cache)?;
            (Some(d), d)
        }
        DffTerm::Held(v) => (None, v),
    };
    Ok(LossParts { recon, ov, dff: fresh, total: recon + cfg.beta * ov + cfg.lambda_dff * value })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsResult {
    pub seed: u64,
    pub fitness: f64,
    pub incumbent_fitness: f64,
}

/// Population argmin over render seeds. The incumbent and `population - 1`
/// fresh seeds are scored under one shared jitter of the continuous knobs
/// (`sigma` times each knob's range, per unit normal draw); the incumbent
/// wins ties.
pub fn es_step<F>(incumbent: u64, fitness: F, rng: &mut Rng, population: usize, sigma: f64) -> Result<EsResult>
where
    F: Fn(u64, &[f64; 5]) -> Result<f64> + Sync,
{
    if population == 0 {
        return Err(Error::config("ES population must be at least 1"));
    }
    let mut jitter = [0.0; 5];
    for (j, (lo, hi)) in jitter.iter_mut().zip(KNOB_BOUNDS) {
        *j = sigma * (hi - lo) * rng.normal();
    }
    let seeds: Vec<u64> = std::iter::once(incumbent).chain((1..population).map(|_| rng.next())).collect();
    let scores = seeds.par_iter().map(|&s| fitness(s, &jitter)).collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, &f) in scores.iter().enumerate() {
        if !f.is_finite() {
            return Err(Error::numeric(0, format!("non-finite ES fitness for seed {}", seeds[i])));
        }
        if f < scores[best] {
            best = i;
        }
    }
    Ok(EsResult { seed: seeds[best], fitness: scores[best], incumbent_fitness: scores[0] })
}

/// One projected gradient step in knob space.
pub fn sgd_step(knobs: &GeneratorKnobs, grad: &[f64; 5], cfg: &CalibrationConfig) -> Result<GeneratorKnobs> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric(0, "non-finite knob gradient"));
    }
    let lr = cfg.learning_rates();
    let mut v = knobs.continuous();
    for i in 0..5 {
        v[i] -= lr[i] * grad[i];
    }
    Ok(GeneratorKnobs::from_continuous(knobs.seed, v))
}

/// Central-difference gradient of `f` in knob space; steps are clipped at
/// the knob bounds and the quotient uses the realised step.
pub fn knob_gradient<F>(knobs: &GeneratorKnobs, h: f64, f: F) -> Result<[f64; 5]>
where
    F: Fn(&GeneratorKnobs) -> Result<f64> + Sync,
{
    let base = knobs.continuous();
    let parts = (0..5)
        .into_par_iter()
        .map(|i| {
            let (mut a, mut b) = (base, base);
            a[i] += h;
            b[i] -= h;
            let ka = GeneratorKnobs::from_continuous(knobs.seed, a);
            let kb = GeneratorKnobs::from_continuous(knobs.seed, b);
            let span = ka.continuous()[i] - kb.continuous()[i];
            if span == 0.0 {
                return Ok(0.0);
            }
            Ok((f(&ka)? - f(&kb)?) / span)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(parts.try_into().expect("five knobs"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_pairs, SceneConfig};
    use crate::sut::SutId;

    #[test]
    fn identical_images_have_zero_loss() {
        let sut = ReferenceSut::builtin(SutId::Steer).unwrap();
        let p = generate_pairs(&SceneConfig { pairs: 1, ..SceneConfig::default() }).unwrap().remove(0);
        let cache = MapCache::in_memory();
        let cf = CfConfig { k_cf: 2, steps: 4, ..CfConfig::default() };
        let l = combined_loss(
            &p.x_r,
            &p.x_r,
            &sut,
            &CalibrationConfig::default(),
            DffTerm::Compute { cf: &cf, cache: &cache },
        )
        .unwrap();
        assert_eq!((l.recon, l.ov, l.dff, l.total), (0.0, 0.0, Some(0.0), 0.0));
    }

    #[test]
    fn zero_weights_leave_reconstruction_only() {
        let sut = ReferenceSut::builtin(SutId::Steer).unwrap();
        let p = generate_pairs(&SceneConfig { pairs: 1, ..SceneConfig::default() }).unwrap().remove(0);
        let cfg = CalibrationConfig { beta: 0.0, lambda_dff: 0.0, ..CalibrationConfig::default() };
        let l = combined_loss(&p.x_s_init, &p.x_r, &sut, &cfg, DffTerm::Held(0.7)).unwrap();
        assert_eq!(l.total, l.recon);
        assert!(l.recon > 0.0 && l.dff.is_none());
    }

    #[test]
    fn doubling_lambda_doubles_the_dff_contribution() {
        let sut = ReferenceSut::builtin(SutId::Steer).unwrap();
        let p = generate_pairs(&SceneConfig { pairs: 1, ..SceneConfig::default() }).unwrap().remove(0);
        let c1 = CalibrationConfig::default();
        let c2 = CalibrationConfig { lambda_dff: 2.0 * c1.lambda_dff, ..c1.clone() };
        let a = combined_loss(&p.x_s_init, &p.x_r, &sut, &c1, DffTerm::Held(0.25)).unwrap();
        let b = combined_loss(&p.x_s_init, &p.x_r, &sut, &c2, DffTerm::Held(0.25)).unwrap();
        let contrib = |l: &LossParts| l.total - l.recon - c1.beta * l.ov;
        assert!((contrib(&b) - 2.0 * contrib(&a)).abs() < 1e-15);
        assert!((b.total - a.total - c1.lambda_dff * 0.25).abs() < 1e-15);
    }

    #[test]
    fn es_keeps_incumbent_on_ties() {
        let mut rng = Rng::new(1);
        let r = es_step(42, |_, _| Ok(1.0), &mut rng, 32, 0.1).unwrap();
        assert_eq!(r.seed, 42);
    }

    #[test]
    fn es_adopts_planted_optimum() {
        let mut probe = Rng::new(5);
        for _ in 0..5 {
            probe.normal();
        }
        let target: Vec<u64> = (0..31).map(|_| probe.next()).collect();
        let planted = target[17];
        let mut rng = Rng::new(5);
        let r = es_step(1, |s, _| Ok(if s == planted { 0.0 } else { 1.0 }), &mut rng, 32, 0.1).unwrap();
        assert_eq!((r.seed, r.fitness), (planted, 0.0));
    }

    #[test]
    fn zero_gradient_is_a_fixed_point_and_bounds_hold() {
        let cfg = CalibrationConfig::default();
        let k = GeneratorKnobs::new(3, 0.5, 1.0, 0.29, 1.0, 0.5);
        assert_eq!(sgd_step(&k, &[0.0; 5], &cfg).unwrap(), k);
        let pushed = sgd_step(&k, &[0.0, 0.0, -1e3, 0.0, 0.0], &cfg).unwrap();
        assert_eq!(pushed.brightness, 0.3);
        assert!(sgd_step(&k, &[f64::NAN, 0.0, 0.0, 0.0, 0.0], &cfg).is_err());
    }

    #[test]
    fn quadratic_brightness_converges() {
        let cfg = CalibrationConfig { lr_post: 0.5, ..CalibrationConfig::default() };
        let mut k = GeneratorKnobs::new(0, 0.5, 1.0, -0.2, 0.0, 0.5);
        for _ in 0..200 {
            let g = knob_gradient(&k, cfg.fd_step, |k| Ok((k.brightness - 0.1).powi(2))).unwrap();
            k = sgd_step(&k, &g, &cfg).unwrap();
        }
        assert!((k.brightness - 0.1).abs() < 1e-3, "brightness {}", k.brightness);
    }
}
