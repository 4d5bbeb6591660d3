//! Mask-and-infill counterfactual explanations and decisive maps.
//!
//! A coarse mask is optimised so that blending the image toward an infill
//! moves the SUT decision by at least the flip margin while staying sparse
//! and smooth. Seed-averaged masks form the decisive map.

mod cache;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::{decode_map, encode_map, MapCache, MapKey, MAP_MAGIC};

use crate::error::{Error, Result};
use crate::numerics::{
    blur_interleaved, pool_to_16x16, smooth_total_variation_grad, total_variation, upsample_bilinear,
    upsample_bilinear_adjoint, Grid, Image, PooledMap, Rng,
};
use crate::sut::{ReferenceSut, SutKind, SutOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Infill {
    Blur,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfConfig {
    pub k_cf: usize,
    pub steps: usize,
    pub mask_resolution: usize,
    pub lambda_sparsity: f64,
    pub lambda_tv: f64,
    /// Decision-change threshold per SUT kind.
    pub flip_margin_steering: f64,
    pub flip_margin_segmentation: f64,
    pub infill: Infill,
    pub infill_radius: f64,
    pub step_size: f64,
    /// Steps without sparsity improvement, after the first flip, before stopping.
    pub patience: usize,
    /// Upper bound of the uniform mask initialisation.
    pub init_max: f64,
    /// Huber width of the TV gradient; 0 uses the plain subgradient.
    pub tv_smoothing: f64,
    pub seed: u64,
}

impl Default for CfConfig {
    fn default() -> Self {
        CfConfig {
            k_cf: 80,
            steps: 80,
            mask_resolution: 32,
            lambda_sparsity: 0.3,
            lambda_tv: 0.05,
            flip_margin_steering: 0.1,
            flip_margin_segmentation: 0.5,
            infill: Infill::Blur,
            infill_radius: 5.0,
            step_size: 0.1,
            patience: 10,
            init_max: 0.5,
            tv_smoothing: 0.05,
            seed: 0,
        }
    }
}

impl CfConfig {
    /// Cheaper profile used inside calibration and quick evaluations.
    pub fn reduced() -> Self {
        CfConfig { k_cf: 8, steps: 30, ..CfConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_cf == 0 || self.steps == 0 || self.mask_resolution == 0 {
            return Err(Error::config("cf.k_cf, cf.steps and cf.mask_resolution must be at least 1"));
        }
        for (name, v) in [
            ("lambda_sparsity", self.lambda_sparsity),
            ("lambda_tv", self.lambda_tv),
            ("infill_radius", self.infill_radius),
            ("init_max", self.init_max),
            ("tv_smoothing", self.tv_smoothing),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("cf.{name} must be finite and non-negative")));
            }
        }
        for (name, v) in [
            ("flip_margin_steering", self.flip_margin_steering),
            ("flip_margin_segmentation", self.flip_margin_segmentation),
            ("step_size", self.step_size),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("cf.{name} must be positive")));
            }
        }
        if self.init_max > 1.0 {
            return Err(Error::config("cf.init_max must not exceed 1"));
        }
        Ok(())
    }

    pub fn flip_margin(&self, kind: SutKind) -> f64 {
        match kind {
            SutKind::Steering => self.flip_margin_steering,
            SutKind::Segmentation => self.flip_margin_segmentation,
        }
    }

    /// Stable 64-bit hash of every field.
    pub fn hash(&self) -> u64 {
        hash_json(self)
    }

    /// Seeds `ζ_1..ζ_K` shared by every image under this config.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.k_cf as u64).map(|k| Rng::stream("cf-seed", self.seed, k).next()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSource {
    pub sut: u64,
    pub image: u64,
    pub config: u64,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisiveMap {
    pub full: Grid,
    pub pooled: PooledMap,
    pub source: MapSource,
}

fn hash64(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// First 8 bytes of the SHA-256 of a value's JSON form.
pub fn hash_json<T: Serialize>(v: &T) -> u64 {
    let json = serde_json::to_vec(v).expect("value serialises");
    let d = Sha256::digest(&json);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn sut_hash(sut: &ReferenceSut) -> u64 {
    hash64(sut.cache_id().as_bytes())
}

/// Content hash of an image (shape and every intensity bit).
pub fn image_hash(x: &Image) -> u64 {
    let mut bytes = Vec::with_capacity(12 + x.data().len() * 4);
    let (h, w, c) = x.shape();
    for d in [h, w, c] {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in x.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    hash64(&bytes)
}

fn round_f32(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Per-channel infill image in interleaved layout.
fn infill(x: &Image, cfg: &CfConfig) -> Vec<f64> {
    let (h, w, c) = x.shape();
    let data = x.to_f64();
    match cfg.infill {
        Infill::Blur => blur_interleaved(&data, h, w, c, cfg.infill_radius),
        Infill::Mean => {
            let mut means = vec![0.0; c];
            for (i, v) in data.iter().enumerate() {
                means[i % c] += v;
            }
            let n = (h * w) as f64;
            (0..data.len()).map(|i| means[i % c] / n).collect()
        }
    }
}

/// Decision change between a perturbed and the original output, and its
/// gradient with respect to the perturbed output.
fn flip_distance(kind: SutKind, out: &SutOutput, base: &SutOutput) -> (f64, Vec<f64>) {
    match kind {
        SutKind::Steering => {
            let d = out.values[0] - base.values[0];
            (d.abs(), vec![if d >= 0.0 { 1.0 } else { -1.0 }])
        }
        SutKind::Segmentation => {
            let n = out.values.len() as f64;
            let mut total = 0.0;
            let grad = out
                .values
                .iter()
                .zip(&base.values)
                .map(|(a, b)| {
                    let d = a - b;
                    total += d.abs();
                    if d >= 0.0 {
                        1.0 / n
                    } else {
                        -1.0 / n
                    }
                })
                .collect();
            (total / n, grad)
        }
    }
}

/// Optimised per-pixel mask for one seed, at float32 precision.
pub fn optimize_mask(sut: &ReferenceSut, x: &Image, cfg: &CfConfig, seed: u64) -> Result<Grid> {
    cfg.validate()?;
    let base = sut.forward(x)?;
    optimize_with_base(sut, x, &infill(x, cfg), &base, cfg, seed)
}

fn optimize_with_base(
    sut: &ReferenceSut,
    x: &Image,
    fill: &[f64],
    base: &SutOutput,
    cfg: &CfConfig,
    seed: u64,
) -> Result<Grid> {
    let (h, w, c) = x.shape();
    let r = cfg.mask_resolution;
    let tau = cfg.flip_margin(sut.kind());
    let xs = x.to_f64();
    let delta: Vec<f64> = fill.iter().zip(&xs).map(|(f, v)| f - v).collect();
    let mut rng = Rng::stream("cf-init", seed, 0);
    let mut coarse = Grid::from_fn(r, r, |_, _| rng.uniform() * cfg.init_max);
    let n_coarse = (r * r) as f64;

    let mut best: Option<(f64, Grid)> = None;
    let mut since_improved = 0usize;
    for step in 0..cfg.steps {
        let m = upsample_bilinear(&coarse, h, w);
        let phi: Vec<f64> = (0..xs.len()).map(|i| xs[i] + m.data()[i / c] * delta[i]).collect();
        let (_, d, dphi) =
            sut.value_and_gradient(sut.input_from_hwc(&phi)?, &|o: &SutOutput| flip_distance(sut.kind(), o, base))?;
        let sparsity = coarse.mean();
        let tv = total_variation(&coarse)?;
        let loss = -d.min(tau) / tau + cfg.lambda_sparsity * sparsity + cfg.lambda_tv * tv;
        if !loss.is_finite() {
            return Err(Error::numeric(sut.network().layers().len(), format!("non-finite mask loss at step {step}")));
        }
        if d >= tau {
            match &best {
                Some((s, _)) if sparsity >= *s => since_improved += 1,
                _ => {
                    best = Some((sparsity, coarse.clone()));
                    since_improved = 0;
                }
            }
            if since_improved >= cfg.patience {
                break;
            }
        } else if best.is_some() {
            since_improved += 1;
            if since_improved >= cfg.patience {
                break;
            }
        }
        // flip gradient scaled to unit max-norm; penalties act per cell in mask units
        let mut dm = Grid::zeros(h, w);
        if d < tau {
            for (p, g) in dm.data_mut().iter_mut().enumerate() {
                let mut s = 0.0;
                for ch in 0..c {
                    s += dphi[p * c + ch] * delta[p * c + ch];
                }
                *g = -s;
            }
        }
        let mut grad = upsample_bilinear_adjoint(&dm, r, r);
        let gmax = grad.data().iter().fold(0.0f64, |a, g| a.max(g.abs()));
        let tvg = smooth_total_variation_grad(&coarse, cfg.tv_smoothing);
        for (g, t) in grad.data_mut().iter_mut().zip(tvg.data()) {
            let flip = if gmax > 0.0 { *g / gmax } else { 0.0 };
            *g = flip + cfg.lambda_sparsity + cfg.lambda_tv * n_coarse * t;
        }
        for (v, g) in coarse.data_mut().iter_mut().zip(grad.data()) {
            *v = (*v - cfg.step_size * g).clamp(0.0, 1.0);
        }
    }
    let chosen = best.map(|(_, g)| g).unwrap_or(coarse);
    Ok(upsample_bilinear(&chosen, h, w).map(|v| round_f32(v.clamp(0.0, 1.0))))
}

/// Seed-averaged decisive map, computed without the cache.
pub fn decisive_map(sut: &ReferenceSut, x: &Image, cfg: &CfConfig) -> Result<DecisiveMap> {
    cfg.validate()?;
    let base = sut.forward(x)?;
    let fill = infill(x, cfg);
    let seeds = cfg.seeds();
    let (h, w, _) = x.shape();
    let mut sum = Grid::zeros(h, w);
    for &s in &seeds {
        let m = optimize_with_base(sut, x, &fill, &base, cfg, s)?;
        for (a, b) in sum.data_mut().iter_mut().zip(m.data()) {
            *a += b;
        }
    }
    let k = seeds.len() as f64;
    let full = sum.map(|v| round_f32(v / k));
    let pooled = pool_to_16x16(&full)?;
    Ok(DecisiveMap {
        full,
        pooled,
        source: MapSource { sut: sut_hash(sut), image: image_hash(x), config: cfg.hash(), seeds },
    })
}

/// Pooled-map MSE between two decisive maps from the same SUT and config.
pub fn dff_distance(map_r: &DecisiveMap, map_s: &DecisiveMap) -> Result<f64> {
    if map_r.source.sut != map_s.source.sut {
        return Err(Error::config("decisive maps come from different SUTs"));
    }
    if map_r.source.config != map_s.source.config || map_r.source.seeds != map_s.source.seeds {
        return Err(Error::config("decisive maps come from different explainer configs"));
    }
    crate::numerics::mse(&map_r.pooled, &map_s.pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{render_real, ScenarioDescription};
    use crate::sut::SutId;

    fn fixture() -> (ReferenceSut, Image) {
        let sut = ReferenceSut::builtin(SutId::Steer).unwrap();
        let sd = ScenarioDescription { road_curvature: 0.012, ..ScenarioDescription::straight() };
        (sut, render_real(&sd, &Rng::new(3)).unwrap())
    }

    fn small() -> CfConfig {
        CfConfig { k_cf: 2, steps: 6, ..CfConfig::default() }
    }

    #[test]
    fn masks_are_deterministic_and_boxed() {
        let (sut, x) = fixture();
        let a = optimize_mask(&sut, &x, &small(), 5).unwrap();
        let b = optimize_mask(&sut, &x, &small(), 5).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn huge_sparsity_weight_empties_the_mask() {
        let (sut, x) = fixture();
        let cfg = CfConfig { lambda_sparsity: 1e6, steps: 20, ..CfConfig::default() };
        let m = optimize_mask(&sut, &x, &cfg, 1).unwrap();
        assert!(m.mean() < 1e-3, "mask mean {}", m.mean());
    }

    #[test]
    fn single_seed_map_equals_its_mask() {
        let (sut, x) = fixture();
        let cfg = CfConfig { k_cf: 1, ..small() };
        let map = decisive_map(&sut, &x, &cfg).unwrap();
        let m = optimize_mask(&sut, &x, &cfg, cfg.seeds()[0]).unwrap();
        assert_eq!(map.full, m);
        assert_eq!(map.pooled, pool_to_16x16(&m).unwrap());
    }

    #[test]
    fn map_is_rounded_seed_mean() {
        let (sut, x) = fixture();
        let cfg = CfConfig { k_cf: 3, ..small() };
        let map = decisive_map(&sut, &x, &cfg).unwrap();
        let masks: Vec<Grid> = cfg.seeds().iter().map(|&s| optimize_mask(&sut, &x, &cfg, s).unwrap()).collect();
        for i in 0..map.full.data().len() {
            let mean = masks.iter().map(|m| m.data()[i]).sum::<f64>() / 3.0;
            assert_eq!(map.full.data()[i], round_f32(mean));
        }
    }

    #[test]
    fn dff_of_identical_pipeline_is_zero() {
        let (sut, x) = fixture();
        let a = decisive_map(&sut, &x, &small()).unwrap();
        let b = decisive_map(&sut, &x.clone(), &small()).unwrap();
        assert_eq!(dff_distance(&a, &b).unwrap(), 0.0);
        let other = CfConfig { seed: 1, ..small() };
        let c = decisive_map(&sut, &x, &other).unwrap();
        assert!(matches!(dff_distance(&a, &c), Err(Error::Config(_))));
    }

    #[test]
    fn constant_pooled_shift_gives_squared_shift() {
        let source = MapSource { sut: 1, image: 2, config: 3, seeds: vec![4] };
        let map = |v: f64| {
            let full = Grid::filled(32, 32, v);
            DecisiveMap { pooled: pool_to_16x16(&full).unwrap(), full, source: source.clone() }
        };
        let d = dff_distance(&map(0.2), &map(0.3)).unwrap();
        assert!((d - 0.01).abs() < 1e-12);
        assert_eq!(dff_distance(&map(0.2), &map(0.2)).unwrap(), 0.0);
    }
}
