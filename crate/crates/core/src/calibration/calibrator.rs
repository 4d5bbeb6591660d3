//! The calibrator network and its inputs.
//!
//! Input: 16 pooled-luma and 16 pooled-gradient statistics of the initial
//! synthetic render, then the scenario encoding. Output: per-knob offsets in
//! an unbounded pre-image space; `tanh` maps them back into the knob ranges,
//! so predictions are in bounds by construction. The output layer starts at
//! zero, which reproduces the initial knobs exactly.

use super::{CalibrationConfig, CalibrationMode};
use crate::error::{Error, Result};
use crate::numerics::{bin_edges, Image, Rng};
use crate::scene::{render_synthetic, GeneratorKnobs, PairedSample, ScenarioDescription, KNOB_BOUNDS};

pub const FEATURE_DIM: usize = 32;
const SD_DIM: usize = 6;
const FEATURE_SIDE: usize = 4;
const UNSQUASH_LIMIT: f64 = 1.0 - 1e-9;

/// What the calibrator may see of a pair: no real-style data.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticContext<'a> {
    pub sd: &'a ScenarioDescription,
    pub x_s_init: &'a Image,
    pub knobs_init: &'a GeneratorKnobs,
}

impl PairedSample {
    pub fn synthetic_context(&self) -> SyntheticContext<'_> {
        SyntheticContext { sd: &self.sd, x_s_init: &self.x_s_init, knobs_init: &self.knobs_init }
    }
}

/// Pooled intensity and gradient-magnitude statistics on a 4×4 grid,
/// scaled to roughly unit range.
pub fn image_features(x: &Image) -> [f64; FEATURE_DIM] {
    let luma = x.luma();
    let (h, w) = luma.shape();
    let rows = bin_edges(h, FEATURE_SIDE);
    let cols = bin_edges(w, FEATURE_SIDE);
    let mut f = [0.0; FEATURE_DIM];
    for (bi, &(r0, r1)) in rows.iter().enumerate() {
        for (bj, &(c0, c1)) in cols.iter().enumerate() {
            let (mut s, mut g) = (0.0, 0.0);
            for y in r0..r1 {
                for xx in c0..c1 {
                    let v = luma.get(y, xx);
                    s += v;
                    let dx = if xx + 1 < w { luma.get(y, xx + 1) - v } else { 0.0 };
                    let dy = if y + 1 < h { luma.get(y + 1, xx) - v } else { 0.0 };
                    g += dx.abs() + dy.abs();
                }
            }
            let n = ((r1 - r0) * (c1 - c0)) as f64;
            let k = bi * FEATURE_SIDE + bj;
            f[k] = 2.0 * s / n - 1.0;
            f[16 + k] = 10.0 * g / n;
        }
    }
    f
}

fn squash(i: usize, u: f64) -> f64 {
    let (lo, hi) = KNOB_BOUNDS[i];
    lo + (hi - lo) * 0.5 * (1.0 + u.tanh())
}

fn unsquash(i: usize, v: f64) -> f64 {
    let (lo, hi) = KNOB_BOUNDS[i];
    (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-UNSQUASH_LIMIT, UNSQUASH_LIMIT).atanh()
}

/// Trained calibrator state `η` plus the searched render seed.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratorParams {
    pub mode: CalibrationMode,
    pub hidden: usize,
    /// `hidden × input_dim`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `5 × hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// Shared knob vector of the direct mode.
    pub theta: [f64; 5],
    pub seed: u64,
}

/// Activations kept for the backward pass.
pub(crate) struct Forward {
    input: Vec<f64>,
    hidden: Vec<f64>,
    pre: [f64; 5],
}

impl CalibratorParams {
    pub const INPUT_DIM: usize = FEATURE_DIM + SD_DIM;

    /// Seeded initialisation; `theta` starts at the mean initial knobs.
    pub fn init(cfg: &CalibrationConfig, dataset: &[PairedSample], rng: &mut Rng) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::validation("calibration dataset is empty"));
        }
        let n_in = Self::INPUT_DIM;
        let scale = (1.0 / n_in as f64).sqrt();
        let w1 = (0..cfg.hidden * n_in).map(|_| round(scale * rng.normal())).collect();
        let mut theta = [0.0; 5];
        for p in dataset {
            for (t, v) in theta.iter_mut().zip(p.knobs_init.continuous()) {
                *t += v / dataset.len() as f64;
            }
        }
        Ok(CalibratorParams {
            mode: cfg.mode,
            hidden: cfg.hidden,
            w1,
            b1: vec![0.0; cfg.hidden],
            w2: vec![0.0; 5 * cfg.hidden],
            b2: vec![0.0; 5],
            theta: theta.map(round),
            seed: rng.next(),
        })
    }

    pub fn input(ctx: &SyntheticContext<'_>) -> Vec<f64> {
        let mut v = image_features(ctx.x_s_init).to_vec();
        v.extend_from_slice(&ctx.sd.encode());
        v
    }

    pub(crate) fn forward(&self, input: Vec<f64>, init: &GeneratorKnobs) -> (GeneratorKnobs, Forward) {
        if self.mode == CalibrationMode::Direct {
            let k = GeneratorKnobs::from_continuous(self.seed, self.theta);
            return (k, Forward { input, hidden: vec![], pre: [0.0; 5] });
        }
        let n_in = input.len();
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &self.w1[j * n_in..(j + 1) * n_in];
                (row.iter().zip(&input).map(|(w, x)| w * x).sum::<f64>() + self.b1[j]).tanh()
            })
            .collect();
        let start = init.continuous();
        let mut pre = [0.0; 5];
        let mut knobs = [0.0; 5];
        for i in 0..5 {
            let z =
                self.w2[i * self.hidden..(i + 1) * self.hidden].iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>()
                    + self.b2[i];
            pre[i] = unsquash(i, start[i]) + z;
            knobs[i] = squash(i, pre[i]);
        }
        (GeneratorKnobs::from_continuous(self.seed, knobs), Forward { input, hidden, pre })
    }

    pub fn predict(&self, ctx: &SyntheticContext<'_>) -> GeneratorKnobs {
        self.forward(Self::input(ctx), ctx.knobs_init).0
    }

    /// Gradient step given the loss gradient with respect to the predicted
    /// knobs; each knob's signal is scaled by its own learning rate.
    pub(crate) fn backward(&mut self, fwd: &Forward, dknobs: &[f64; 5], cfg: &CalibrationConfig) -> Result<()> {
        if dknobs.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric(0, "non-finite knob gradient"));
        }
        let lr = cfg.learning_rates();
        if self.mode == CalibrationMode::Direct {
            let k = super::sgd_step(&GeneratorKnobs::from_continuous(self.seed, self.theta), dknobs, cfg)?;
            self.theta = k.continuous().map(round);
            return Ok(());
        }
        let nh = self.hidden;
        let n_in = fwd.input.len();
        let mut s = [0.0; 5];
        for i in 0..5 {
            let (lo, hi) = KNOB_BOUNDS[i];
            let t = fwd.pre[i].tanh();
            s[i] = lr[i] * dknobs[i] * (hi - lo) * 0.5 * (1.0 - t * t);
        }
        let mut dh = vec![0.0; nh];
        for (j, d) in dh.iter_mut().enumerate() {
            *d = (0..5).map(|i| self.w2[i * nh + j] * s[i]).sum::<f64>() * (1.0 - fwd.hidden[j] * fwd.hidden[j]);
        }
        for i in 0..5 {
            for j in 0..nh {
                self.w2[i * nh + j] = round(self.w2[i * nh + j] - s[i] * fwd.hidden[j]);
            }
            self.b2[i] = round(self.b2[i] - s[i]);
        }
        for j in 0..nh {
            for k in 0..n_in {
                self.w1[j * n_in + k] = round(self.w1[j * n_in + k] - dh[j] * fwd.input[k]);
            }
            self.b1[j] = round(self.b1[j] - dh[j]);
        }
        Ok(())
    }

    /// Every trainable value in a fixed order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.w1.len() + self.w2.len() + self.hidden + 10);
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.extend_from_slice(&self.b2);
        v.extend_from_slice(&self.theta);
        v
    }

    pub fn unflatten(mode: CalibrationMode, hidden: usize, seed: u64, v: &[f64]) -> Result<Self> {
        let n_in = Self::INPUT_DIM;
        let want = hidden * n_in + hidden + 5 * hidden + 5 + 5;
        if v.len() != want {
            return Err(Error::format(format!("calibrator with {} values, expected {want}", v.len())));
        }
        let (w1, rest) = v.split_at(hidden * n_in);
        let (b1, rest) = rest.split_at(hidden);
        let (w2, rest) = rest.split_at(5 * hidden);
        let (b2, theta) = rest.split_at(5);
        Ok(CalibratorParams {
            mode,
            hidden,
            w1: w1.to_vec(),
            b1: b1.to_vec(),
            w2: w2.to_vec(),
            b2: b2.to_vec(),
            theta: theta.try_into().expect("five knobs"),
            seed,
        })
    }
}

/// Parameters live at float32 precision so checkpoints are exact.
fn round(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Calibrated knobs and render for one pair, from its synthetic context only.
pub fn apply_calibrator(params: &CalibratorParams, ctx: &SyntheticContext<'_>) -> Result<(GeneratorKnobs, Image)> {
    let knobs = params.predict(ctx);
    Ok((knobs, render_synthetic(ctx.sd, &knobs)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_pairs, SceneConfig};

    #[test]
    fn zero_output_layer_reproduces_initial_knobs() {
        let pairs = generate_pairs(&SceneConfig { pairs: 3, ..SceneConfig::default() }).unwrap();
        let params = CalibratorParams::init(&CalibrationConfig::default(), &pairs, &mut Rng::new(1)).unwrap();
        for p in &pairs {
            let k = params.predict(&p.synthetic_context());
            for (a, b) in k.continuous().iter().zip(p.knobs_init.continuous()) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_on_a_linear_loss() {
        let pairs = generate_pairs(&SceneConfig { pairs: 1, ..SceneConfig::default() }).unwrap();
        let cfg = CalibrationConfig { lr_primary: 1.0, lr_post: 1.0, ..CalibrationConfig::default() };
        let mut params = CalibratorParams::init(&cfg, &pairs, &mut Rng::new(4)).unwrap();
        let mut r = Rng::new(9);
        for w in params.w2.iter_mut() {
            *w = 0.3 * r.normal();
        }
        let ctx = pairs[0].synthetic_context();
        let c = [0.7, -0.2, 1.1, 0.4, -0.9];
        let loss = |p: &CalibratorParams| p.predict(&ctx).continuous().iter().zip(c).map(|(k, ci)| k * ci).sum::<f64>();
        // one step with lr 1 moves each parameter by minus its gradient
        let before = params.flatten();
        let mut stepped = params.clone();
        let (_, fwd) = stepped.forward(CalibratorParams::input(&ctx), ctx.knobs_init);
        stepped.backward(&fwd, &c, &cfg).unwrap();
        let after = stepped.flatten();
        for idx in [0, 7, params.w1.len() + 2, params.w1.len() + params.hidden + 5, before.len() - 7] {
            let h = 1e-5;
            let (mut a, mut b) = (before.clone(), before.clone());
            a[idx] += h;
            b[idx] -= h;
            let pa = CalibratorParams::unflatten(params.mode, params.hidden, params.seed, &a).unwrap();
            let pb = CalibratorParams::unflatten(params.mode, params.hidden, params.seed, &b).unwrap();
            let fd = (loss(&pa) - loss(&pb)) / (2.0 * h);
            let analytic = before[idx] - after[idx];
            assert!((fd - analytic).abs() < 1e-5 * (1.0 + fd.abs()), "param {idx}: fd {fd} vs {analytic}");
        }
        params = stepped;
        assert!(params.predict(&ctx).validate().is_ok());
    }

    #[test]
    fn predictions_stay_in_bounds() {
        let pairs = generate_pairs(&SceneConfig { pairs: 2, ..SceneConfig::default() }).unwrap();
        let mut params = CalibratorParams::init(&CalibrationConfig::default(), &pairs, &mut Rng::new(2)).unwrap();
        let mut r = Rng::new(3);
        for _ in 0..1000 {
            for w in params.w2.iter_mut().chain(params.b2.iter_mut()) {
                *w = 50.0 * r.normal();
            }
            let p = &pairs[r.index(pairs.len())];
            assert!(params.predict(&p.synthetic_context()).validate().is_ok());
        }
    }

    #[test]
    fn application_is_deterministic() {
        let pairs = generate_pairs(&SceneConfig { pairs: 1, ..SceneConfig::default() }).unwrap();
        let params = CalibratorParams::init(&CalibrationConfig::default(), &pairs, &mut Rng::new(2)).unwrap();
        let ctx = pairs[0].synthetic_context();
        assert_eq!(apply_calibrator(&params, &ctx).unwrap(), apply_calibrator(&params, &ctx).unwrap());
    }
}
