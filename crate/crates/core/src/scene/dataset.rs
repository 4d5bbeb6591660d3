//! Paired real/synthetic datasets and their JSON manifest.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::render::{render_real, render_synthetic, GeneratorKnobs};
use super::scenario::{calibration_count, sample_scenario_grid, GridOptions, ScenarioDescription};
use crate::error::{Error, Result};
use crate::numerics::io::{read_file, read_raw, write_atomic, write_png, write_raw};
use crate::numerics::{Image, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Calibration,
    Heldout,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Calibration => "calibration",
            Split::Heldout => "heldout",
        }
    }
}

/// Dataset generation settings (the `[scene]` config section).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub pairs: usize,
    pub seed: u64,
    pub split_ratio: f64,
    pub obstacle_rate: f64,
    pub decoy_rate: f64,
    /// Real-style candidates per scenario for the IV minimum.
    pub rw_candidates: usize,
    pub init_style_strength: f64,
    pub init_contrast: f64,
    pub init_brightness: f64,
    pub init_blur_radius: f64,
    pub init_texture_gain: f64,
    /// Half-width of the per-pair uniform jitter applied to the initial knobs, as
    /// a fraction of each knob's range.
    pub init_jitter: f64,
    pub write_png: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            pairs: 200,
            seed: 7,
            split_ratio: 0.8,
            obstacle_rate: 0.5,
            decoy_rate: 0.02,
            rw_candidates: 1,
            init_style_strength: 0.4,
            init_contrast: 0.9,
            init_brightness: 0.04,
            init_blur_radius: 0.35,
            init_texture_gain: 0.3,
            init_jitter: 0.04,
            write_png: false,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs == 0 {
            return Err(Error::config("scene.pairs must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.split_ratio) {
            return Err(Error::config("scene.split_ratio must lie in [0, 1]"));
        }
        for (name, v) in [("obstacle_rate", self.obstacle_rate), ("decoy_rate", self.decoy_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("scene.{name} must lie in [0, 1]")));
            }
        }
        if self.rw_candidates == 0 {
            return Err(Error::config("scene.rw_candidates must be at least 1"));
        }
        if !(0.0..=0.5).contains(&self.init_jitter) {
            return Err(Error::config("scene.init_jitter must lie in [0, 0.5]"));
        }
        Ok(())
    }

    pub fn grid_options(&self) -> GridOptions {
        GridOptions { obstacle_rate: self.obstacle_rate, decoy_rate: self.decoy_rate }
    }
}

/// One matched real/synthetic pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub sd: ScenarioDescription,
    pub real_seed: u64,
    pub x_r: Image,
    pub x_s_init: Image,
    pub knobs_init: GeneratorKnobs,
    pub split: Split,
}

pub fn pair_id(index: usize) -> String {
    format!("pair-{index:05}")
}

/// Canonical real-style render seed of pair `index`.
pub fn real_seed(base_seed: u64, index: usize) -> u64 {
    Rng::stream("real-seed", base_seed, index as u64).next()
}

/// Seeds of the `k` real-style candidates for one scenario; the first is
/// the canonical render.
pub fn candidate_seeds(real_seed: u64, k: usize) -> Vec<u64> {
    let mut r = Rng::stream("rw-candidate", real_seed, 0);
    std::iter::once(real_seed).chain((1..k).map(|_| r.next())).collect()
}

pub fn initial_knobs(cfg: &SceneConfig, index: usize) -> GeneratorKnobs {
    let mut r = Rng::stream("initial-knobs", cfg.seed, index as u64);
    let seed = r.next();
    let base =
        [cfg.init_style_strength, cfg.init_contrast, cfg.init_brightness, cfg.init_blur_radius, cfg.init_texture_gain];
    let mut v = [0.0; 5];
    for (i, b) in base.iter().enumerate() {
        let (lo, hi) = super::render::KNOB_BOUNDS[i];
        v[i] = b + cfg.init_jitter * (hi - lo) * r.uniform_in(-1.0, 1.0);
    }
    GeneratorKnobs::from_continuous(seed, v)
}

/// Renders one pair given its scenario.
pub fn make_pair(cfg: &SceneConfig, index: usize, sd: ScenarioDescription, split: Split) -> Result<PairedSample> {
    let rs = real_seed(cfg.seed, index);
    let knobs = initial_knobs(cfg, index);
    Ok(PairedSample {
        id: pair_id(index),
        x_r: render_real(&sd, &Rng::new(rs))?,
        x_s_init: render_synthetic(&sd, &knobs)?,
        sd,
        real_seed: rs,
        knobs_init: knobs,
        split,
    })
}

/// Samples scenarios and renders every pair; the first `split_ratio` share
/// of the sequence forms the calibration split.
pub fn generate_pairs(cfg: &SceneConfig) -> Result<Vec<PairedSample>> {
    cfg.validate()?;
    let sds = sample_scenario_grid(cfg.pairs, &Rng::new(cfg.seed), cfg.grid_options());
    let n_cal = calibration_count(cfg.pairs, cfg.split_ratio);
    sds.into_par_iter()
        .enumerate()
        .map(|(i, sd)| {
            let split = if i < n_cal { Split::Calibration } else { Split::Heldout };
            make_pair(cfg, i, sd, split)
        })
        .collect()
}

/// Real-style candidate set for a pair.
pub fn real_candidates(sample: &PairedSample, k: usize) -> Result<Vec<Image>> {
    candidate_seeds(sample.real_seed, k)
        .into_iter()
        .map(|s| if s == sample.real_seed { Ok(sample.x_r.clone()) } else { render_real(&sample.sd, &Rng::new(s)) })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub sd: ScenarioDescription,
    pub real_seed: u64,
    pub real: String,
    pub synthetic: String,
    pub knobs: GeneratorKnobs,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub toolkit_version: String,
    pub config_hash: String,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::format(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let bytes = read_file(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }
}

/// Writes images under `out_dir/images` and the manifest at
/// `out_dir/manifest.json`; returns the manifest path.
pub fn write_dataset(out_dir: &Path, pairs: &[PairedSample], config_hash: &str, png: bool) -> Result<PathBuf> {
    let mut records = Vec::with_capacity(pairs.len());
    for p in pairs {
        let real = format!("images/{}_real.mfid", p.id);
        let synthetic = format!("images/{}_synth.mfid", p.id);
        write_raw(&out_dir.join(&real), &p.x_r)?;
        write_raw(&out_dir.join(&synthetic), &p.x_s_init)?;
        if png {
            write_png(&out_dir.join(format!("png/{}_real.png", p.id)), &p.x_r)?;
            write_png(&out_dir.join(format!("png/{}_synth.png", p.id)), &p.x_s_init)?;
        }
        records.push(ManifestRecord {
            id: p.id.clone(),
            sd: p.sd.clone(),
            real_seed: p.real_seed,
            real,
            synthetic,
            knobs: p.knobs_init,
            split: p.split,
        });
    }
    let manifest =
        Manifest { toolkit_version: crate::VERSION.to_string(), config_hash: config_hash.to_string(), records };
    let path = out_dir.join("manifest.json");
    write_atomic(&path, manifest.to_json()?.as_bytes())?;
    Ok(path)
}

/// Loads every pair of a manifest; image paths resolve against its directory.
pub fn load_dataset(manifest_path: &Path) -> Result<(Manifest, Vec<PairedSample>)> {
    let manifest = Manifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let pairs = manifest
        .records
        .iter()
        .map(|r| {
            r.sd.validate()?;
            r.knobs.validate()?;
            let x_r = read_raw(&dir.join(&r.real))?;
            let x_s = read_raw(&dir.join(&r.synthetic))?;
            x_r.same_shape(&x_s)?;
            Ok(PairedSample {
                id: r.id.clone(),
                sd: r.sd.clone(),
                real_seed: r.real_seed,
                x_r,
                x_s_init: x_s,
                knobs_init: r.knobs,
                split: r.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, pairs))
}
