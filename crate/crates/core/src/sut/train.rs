//! One-time reference training on real-style renders.

use log::info;
use serde::{Deserialize, Serialize};

use super::layers::Tensor;
use super::{ReferenceSut, SutId, SutKind};
use crate::error::{Error, Result};
use crate::numerics::{blur_image, Image, Rng};
use crate::scene::{
    render, render_masks, sample_scenario_grid, GeneratorKnobs, GridOptions, ScenarioDescription, DECOY_RECT,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub samples: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub obstacle_rate: f64,
    pub decoy_rate: f64,
    /// Positive-class weight of the lane-line loss (lane pixels are rare).
    pub lane_pos_weight: f64,
    pub heldout: usize,
    /// Photometric augmentation half-ranges (contrast, brightness) and blur
    /// maximum applied to training renders; style is never augmented.
    pub aug_contrast: f64,
    pub aug_brightness: f64,
    pub aug_blur: f64,
    /// Probability that a decoy-sign training render has everything except
    /// the sign blurred with `cue_dropout_sigma`, so the sign alone must
    /// carry the label.
    pub cue_dropout: f64,
    pub cue_dropout_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch: 16,
            lr: 1e-3,
            samples: 2000,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            obstacle_rate: 0.5,
            decoy_rate: 0.5,
            lane_pos_weight: 5.0,
            heldout: 200,
            aug_contrast: 0.15,
            aug_brightness: 0.08,
            aug_blur: 1.0,
            cue_dropout: 0.0,
            cue_dropout_sigma: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub sut: SutId,
    pub first_loss: f64,
    pub final_loss: f64,
    /// Mean absolute angle error (steering) or mean IoU (segmentation) on
    /// renders disjoint from the training set.
    pub heldout_metric: f64,
}

struct Example {
    input: Tensor,
    target: Vec<f64>,
}

fn target(id: SutId, sd: &ScenarioDescription) -> Result<Vec<f64>> {
    let gt = render_masks(sd)?;
    Ok(match id {
        SutId::Steer => vec![gt.steering],
        SutId::Da => gt.drivable.into_vec(),
        SutId::Ll => gt.lane.into_vec(),
    })
}

fn examples(cfg: &TrainConfig, tag: &str, n: usize, augment: bool) -> Result<Vec<(Image, ScenarioDescription)>> {
    let opts = GridOptions { obstacle_rate: cfg.obstacle_rate, decoy_rate: cfg.decoy_rate };
    let sds = sample_scenario_grid(n, &Rng::stream(tag, cfg.seed, 0), opts);
    sds.into_iter()
        .enumerate()
        .map(|(i, sd)| {
            let mut r = Rng::stream(tag, cfg.seed, i as u64 + 1);
            let seed = r.next();
            let knobs = if augment {
                let contrast = 1.0 + cfg.aug_contrast * r.uniform_in(-1.0, 1.0);
                let brightness = cfg.aug_brightness * r.uniform_in(-1.0, 1.0);
                let blur = cfg.aug_blur * r.uniform();
                GeneratorKnobs::from_continuous(seed, [1.0, contrast, brightness, blur, 1.0])
            } else {
                GeneratorKnobs::perfect(seed)
            };
            let img = render(&sd, &knobs)?;
            if augment && sd.decoy_sign_present && r.bernoulli(cfg.cue_dropout) {
                return Ok((keep_only_decoy(&img, cfg.cue_dropout_sigma), sd));
            }
            Ok((img, sd))
        })
        .collect()
}

fn keep_only_decoy(img: &Image, sigma: f64) -> Image {
    let blurred = blur_image(img, sigma);
    let (h, w, c) = img.shape();
    let data = (0..h * w * c)
        .map(|i| {
            let (y, x) = (i / c / w, i / c % w);
            if DECOY_RECT.contains(y, x) {
                img.data()[i]
            } else {
                blurred.data()[i]
            }
        })
        .collect();
    Image::new(h, w, c, data).expect("shape preserved")
}

/// Loss and output gradient for one example.
fn loss_grad(id: SutId, cfg: &TrainConfig, out: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    match id.kind() {
        SutKind::Steering => {
            let d = out[0] - target[0];
            (d * d, vec![2.0 * d])
        }
        SutKind::Segmentation => {
            let pw = if id == SutId::Ll { cfg.lane_pos_weight } else { 1.0 };
            let n = out.len() as f64;
            let mut loss = 0.0;
            let grad = out
                .iter()
                .zip(target)
                .map(|(&z, &t)| {
                    // softplus(-z) = -log sigmoid(z), computed stably
                    let sp_neg = (-z).max(0.0) + (-z.abs()).exp().ln_1p();
                    let sp_pos = sp_neg + z;
                    loss += pw * t * sp_neg + (1.0 - t) * sp_pos;
                    let s = 1.0 / (1.0 + (-z).exp());
                    (pw * t * (s - 1.0) + (1.0 - t) * s) / n
                })
                .collect();
            (loss / n, grad)
        }
    }
}

pub fn iou(pred_logits: &[f64], truth: &[f64]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&z, &t) in pred_logits.iter().zip(truth) {
        let p = z > 0.0;
        let t = t > 0.5;
        inter += usize::from(p && t);
        union += usize::from(p || t);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Held-out quality of `sut`: mean absolute error or mean IoU.
pub fn heldout_metric(id: SutId, sut: &ReferenceSut, cfg: &TrainConfig) -> Result<f64> {
    let set = examples(cfg, "sut-heldout", cfg.heldout, false)?;
    let mut total = 0.0;
    for (img, sd) in &set {
        let out = sut.forward(img)?;
        let t = target(id, sd)?;
        total += match id.kind() {
            SutKind::Steering => (out.values[0] - t[0]).abs(),
            SutKind::Segmentation => iou(&out.values, &t),
        };
    }
    Ok(total / set.len() as f64)
}

/// Minibatch training with Adam from a seeded He initialisation; the result
/// is frozen at float32 precision.
pub fn train_reference(id: SutId, cfg: &TrainConfig) -> Result<(ReferenceSut, TrainReport)> {
    if cfg.steps == 0 || cfg.batch == 0 || cfg.samples == 0 || cfg.lr <= 0.0 {
        return Err(Error::config("training steps, batch, samples and lr must be positive"));
    }
    let mut rng = Rng::stream("sut-train", cfg.seed, id as u64);
    let mut sut = ReferenceSut::initialise(id, &mut rng.substream("init", 0))?;
    let data: Vec<Example> = examples(cfg, "sut-train", cfg.samples, true)?
        .into_iter()
        .map(|(img, sd)| Ok(Example { input: sut.input_from_hwc(&img.to_f64())?, target: target(id, &sd)? }))
        .collect::<Result<_>>()?;
    info!("training {id} on {} renders", data.len());

    let mut m = sut.network().zero_grads();
    let mut v = sut.network().zero_grads();
    let mut first = None;
    let mut recent = Vec::new();
    for step in 0..cfg.steps {
        let mut grads = sut.network().zero_grads();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch {
            let ex = &data[rng.index(data.len())];
            let acts = sut.network().forward_trace(ex.input.clone())?;
            let out = acts.last().expect("non-empty");
            let (loss, dout) = loss_grad(id, cfg, &out.data, &ex.target);
            batch_loss += loss / cfg.batch as f64;
            let dout = Tensor { data: dout, ..out.clone() };
            sut.network().backward(&acts, dout, Some(&mut grads))?;
        }
        first.get_or_insert(batch_loss);
        recent.push(batch_loss);
        if recent.len() > 50 {
            recent.remove(0);
        }
        let t = (step + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let scale = 1.0 / cfg.batch as f64;
        for (li, params) in sut.network_mut().params_mut().enumerate() {
            for (j, p) in params.iter_mut().enumerate() {
                let g = grads[li][j] * scale;
                m[li][j] = cfg.beta1 * m[li][j] + (1.0 - cfg.beta1) * g;
                v[li][j] = cfg.beta2 * v[li][j] + (1.0 - cfg.beta2) * g * g;
                *p -= cfg.lr * (m[li][j] / bc1) / ((v[li][j] / bc2).sqrt() + 1e-8);
            }
        }
        if step % 200 == 0 || step + 1 == cfg.steps {
            info!("{id} step {step}: loss {batch_loss:.6}");
        }
    }
    sut.freeze();
    let final_loss = recent.iter().sum::<f64>() / recent.len() as f64;
    let metric = heldout_metric(id, &sut, cfg)?;
    let report = TrainReport { sut: id, first_loss: first.unwrap_or(0.0), final_loss, heldout_metric: metric };
    Ok((sut, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_edge_cases() {
        assert_eq!(iou(&[1.0, -1.0], &[1.0, 0.0]), 1.0);
        assert_eq!(iou(&[1.0, -1.0], &[0.0, 1.0]), 0.0);
        assert_eq!(iou(&[-1.0, -1.0], &[0.0, 0.0]), 1.0);
    }

    #[test]
    fn segmentation_loss_gradient_matches_finite_differences() {
        let cfg = TrainConfig::default();
        let out = [0.3, -1.2, 2.0];
        let t = [1.0, 0.0, 1.0];
        let (_, g) = loss_grad(SutId::Ll, &cfg, &out, &t);
        for i in 0..3 {
            let mut p = out;
            let mut q = out;
            p[i] += 1e-6;
            q[i] -= 1e-6;
            let fd = (loss_grad(SutId::Ll, &cfg, &p, &t).0 - loss_grad(SutId::Ll, &cfg, &q, &t).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }
}
