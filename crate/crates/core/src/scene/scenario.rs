use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const CURVATURE_RANGE: (f64, f64) = (-0.02, 0.02);
pub const LANE_RANGE: (u32, u32) = (2, 4);
pub const SUN_RANGE: (f64, f64) = (5.0, 85.0);
pub const OFFSET_RANGE: (f64, f64) = (-3.0, 3.0);

/// Attribute value: a scalar or a boolean token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Flag(bool),
    Scalar(f64),
}

/// Semantic description of a road scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDescription {
    /// 1/m; positive bends right.
    pub road_curvature: f64,
    pub lane_count: u32,
    /// Degrees above the horizon.
    pub sun_elevation: f64,
    /// Metres from the road centre; positive is right.
    pub obstacle_lateral_offset: f64,
    pub obstacle_present: bool,
    pub decoy_sign_present: bool,
}

pub const ATTRIBUTE_NAMES: [&str; 6] = [
    "road_curvature",
    "lane_count",
    "sun_elevation",
    "obstacle_lateral_offset",
    "obstacle_present",
    "decoy_sign_present",
];

impl ScenarioDescription {
    pub fn straight() -> Self {
        ScenarioDescription {
            road_curvature: 0.0,
            lane_count: 3,
            sun_elevation: 45.0,
            obstacle_lateral_offset: 0.0,
            obstacle_present: false,
            decoy_sign_present: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let within = |name: &str, v: f64, (lo, hi): (f64, f64)| {
            if v.is_finite() && (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(Error::validation(format!("{name}={v} outside [{lo}, {hi}]")))
            }
        };
        within("road_curvature", self.road_curvature, CURVATURE_RANGE)?;
        within("sun_elevation", self.sun_elevation, SUN_RANGE)?;
        within("obstacle_lateral_offset", self.obstacle_lateral_offset, OFFSET_RANGE)?;
        if !(LANE_RANGE.0..=LANE_RANGE.1).contains(&self.lane_count) {
            return Err(Error::validation(format!("lane_count={} outside 2..=4", self.lane_count)));
        }
        Ok(())
    }

    /// Left/right mirror image of the scene.
    pub fn mirrored(&self) -> Self {
        ScenarioDescription {
            road_curvature: -self.road_curvature,
            obstacle_lateral_offset: -self.obstacle_lateral_offset,
            ..self.clone()
        }
    }

    pub fn attributes(&self) -> Vec<(String, AttrValue)> {
        vec![
            (ATTRIBUTE_NAMES[0].into(), AttrValue::Scalar(self.road_curvature)),
            (ATTRIBUTE_NAMES[1].into(), AttrValue::Scalar(f64::from(self.lane_count))),
            (ATTRIBUTE_NAMES[2].into(), AttrValue::Scalar(self.sun_elevation)),
            (ATTRIBUTE_NAMES[3].into(), AttrValue::Scalar(self.obstacle_lateral_offset)),
            (ATTRIBUTE_NAMES[4].into(), AttrValue::Flag(self.obstacle_present)),
            (ATTRIBUTE_NAMES[5].into(), AttrValue::Flag(self.decoy_sign_present)),
        ]
    }

    pub fn from_attributes(attrs: &[(String, AttrValue)]) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for (name, _) in attrs {
            if !seen.insert(name.as_str()) {
                return Err(Error::validation(format!("duplicate attribute {name}")));
            }
            if !ATTRIBUTE_NAMES.contains(&name.as_str()) {
                return Err(Error::validation(format!("unknown attribute {name}")));
            }
        }
        let find = |name: &str| {
            attrs
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::validation(format!("missing attribute {name}")))
        };
        let scalar = |name: &str| match find(name)? {
            AttrValue::Scalar(v) => Ok(v),
            AttrValue::Flag(_) => Err(Error::validation(format!("{name} must be a scalar"))),
        };
        let flag = |name: &str| match find(name)? {
            AttrValue::Flag(b) => Ok(b),
            AttrValue::Scalar(_) => Err(Error::validation(format!("{name} must be a boolean"))),
        };
        let lanes = scalar("lane_count")?;
        if lanes.fract() != 0.0 || lanes < 0.0 {
            return Err(Error::validation(format!("lane_count={lanes} is not a count")));
        }
        let sd = ScenarioDescription {
            road_curvature: scalar("road_curvature")?,
            lane_count: lanes as u32,
            sun_elevation: scalar("sun_elevation")?,
            obstacle_lateral_offset: scalar("obstacle_lateral_offset")?,
            obstacle_present: flag("obstacle_present")?,
            decoy_sign_present: flag("decoy_sign_present")?,
        };
        sd.validate()?;
        Ok(sd)
    }

    /// Numeric encoding with every component roughly in `[-1, 1]`.
    pub fn encode(&self) -> [f64; 6] {
        let flag = |b: bool| if b { 1.0 } else { -1.0 };
        [
            self.road_curvature / CURVATURE_RANGE.1,
            f64::from(self.lane_count) - 3.0,
            (self.sun_elevation - 45.0) / 40.0,
            self.obstacle_lateral_offset / OFFSET_RANGE.1,
            flag(self.obstacle_present),
            flag(self.decoy_sign_present),
        ]
    }
}

/// Probabilities for the boolean attributes of the scenario sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    pub obstacle_rate: f64,
    pub decoy_rate: f64,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions { obstacle_rate: 0.5, decoy_rate: 0.02 }
    }
}

const R6_PHI: f64 = 1.112_653_959_812_726_8; // root of x^7 = x + 1

/// Low-discrepancy coverage of the attribute ranges: the additive R6 sequence
/// with a seeded Cranley-Patterson rotation.
pub fn sample_scenario_grid(n: usize, rng: &Rng, opts: GridOptions) -> Vec<ScenarioDescription> {
    let mut shift_rng = rng.substream("scenario-grid", 0);
    let shift: Vec<f64> = (0..6).map(|_| shift_rng.uniform()).collect();
    let alpha: Vec<f64> = (1..=6).map(|i| 1.0 / R6_PHI.powi(i)).collect();
    (0..n)
        .map(|i| {
            let u: Vec<f64> = (0..6).map(|d| (shift[d] + alpha[d] * (i + 1) as f64).fract()).collect();
            let lerp = |(lo, hi): (f64, f64), t: f64| (lo + (hi - lo) * t).clamp(lo, hi);
            ScenarioDescription {
                road_curvature: lerp(CURVATURE_RANGE, u[0]),
                lane_count: (LANE_RANGE.0 + (u[1] * 3.0).floor() as u32).min(LANE_RANGE.1),
                sun_elevation: lerp(SUN_RANGE, u[2]),
                obstacle_lateral_offset: lerp(OFFSET_RANGE, u[3]),
                obstacle_present: u[4] < opts.obstacle_rate,
                decoy_sign_present: u[5] < opts.decoy_rate,
            }
        })
        .collect()
}

/// Number of calibration items for a split ratio.
pub fn calibration_count(n: usize, ratio: f64) -> usize {
    ((n as f64 * ratio).round() as usize).min(n)
}

/// Splits sampled items into disjoint calibration and held-out parts.
pub fn split<T: Clone>(items: &[T], ratio: f64) -> (Vec<T>, Vec<T>) {
    let k = calibration_count(items.len(), ratio);
    (items[..k].to_vec(), items[k..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_deterministic_and_in_range() {
        let rng = Rng::new(17);
        let a = sample_scenario_grid(10, &rng, GridOptions::default());
        let b = sample_scenario_grid(10, &rng, GridOptions::default());
        assert_eq!(a, b);
        for sd in sample_scenario_grid(500, &rng, GridOptions { obstacle_rate: 0.5, decoy_rate: 0.5 }) {
            sd.validate().unwrap();
        }
    }

    #[test]
    fn split_sizes_match_reported_dataset() {
        assert_eq!(calibration_count(2126, 0.8), 1701);
        let items: Vec<usize> = (0..2126).collect();
        let (cal, held) = split(&items, 0.8);
        assert_eq!((cal.len(), held.len()), (1701, 425));
        assert!(cal.iter().all(|i| !held.contains(i)));
    }

    #[test]
    fn grid_covers_every_lane_count() {
        let sds = sample_scenario_grid(30, &Rng::new(1), GridOptions::default());
        for lanes in 2..=4 {
            assert!(sds.iter().any(|s| s.lane_count == lanes));
        }
        let mean_curv: f64 = sds.iter().map(|s| s.road_curvature).sum::<f64>() / 30.0;
        assert!(mean_curv.abs() < 0.004);
    }

    #[test]
    fn attribute_roundtrip_and_validation() {
        let sd =
            ScenarioDescription { road_curvature: 0.01, decoy_sign_present: true, ..ScenarioDescription::straight() };
        assert_eq!(ScenarioDescription::from_attributes(&sd.attributes()).unwrap(), sd);
        let mut dup = sd.attributes();
        dup.push(dup[0].clone());
        assert!(ScenarioDescription::from_attributes(&dup).is_err());
        let bad = ScenarioDescription { lane_count: 5, ..sd.clone() };
        assert!(bad.validate().is_err());
        let bad = ScenarioDescription { sun_elevation: 90.0, ..sd };
        assert!(bad.validate().is_err());
    }
}
