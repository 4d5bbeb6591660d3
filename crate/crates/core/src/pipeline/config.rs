use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::calibration::CalibrationConfig;
use crate::error::{Error, Result};
use crate::explain::{hash_json, CfConfig};
use crate::fidelity::{Provenance, Thresholds};
use crate::numerics::io::read_file;
use crate::scene::SceneConfig;
use crate::stats::StatsConfig;

/// How thresholds are chosen for a run.
#[derive(Debug, Clone, PartialEq)]
pub enum ThresholdMode {
    /// Fixed thresholds from the `[fidelity]` section.
    User,
    /// DFF thresholds at two percentiles of the calibration split; the
    /// second is used for verdicts.
    Percentile(f64, f64),
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdMode::User => f.write_str("user"),
            ThresholdMode::Percentile(a, b) => write!(f, "percentile:{a},{b}"),
        }
    }
}

impl FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "user" {
            return Ok(ThresholdMode::User);
        }
        let bad = || Error::config(format!("thresholds must be 'user' or 'percentile:P1,P2', got {s:?}"));
        let (a, b) = s.strip_prefix("percentile:").and_then(|r| r.split_once(',')).ok_or_else(bad)?;
        let a: f64 = a.trim().parse().map_err(|_| bad())?;
        let b: f64 = b.trim().parse().map_err(|_| bad())?;
        if !((0.0..=100.0).contains(&a) && (0.0..=100.0).contains(&b)) {
            return Err(Error::config(format!("percentiles must lie in [0, 100], got {a} and {b}")));
        }
        Ok(ThresholdMode::Percentile(a, b))
    }
}

impl Serialize for ThresholdMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ThresholdMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// The `[fidelity]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FidelityConfig {
    pub eps_in: f64,
    /// Bound on `1 - ov_score`.
    pub eps_out: f64,
    pub eps_dff: f64,
    pub eps_lf: Option<f64>,
    pub thresholds: ThresholdMode,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        let t = Thresholds::default();
        FidelityConfig {
            eps_in: t.eps_in,
            eps_out: t.eps_out,
            eps_dff: t.eps_dff,
            eps_lf: t.eps_lf,
            thresholds: ThresholdMode::User,
        }
    }
}

impl FidelityConfig {
    pub fn user_thresholds(&self) -> Thresholds {
        Thresholds {
            eps_in: self.eps_in,
            eps_out: self.eps_out,
            eps_dff: self.eps_dff,
            eps_lf: self.eps_lf,
            provenance: Provenance::User,
        }
    }
}

/// Which synthetic images a run evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// The uncalibrated initial renders.
    Baseline,
    /// Calibrated on reconstruction and OV loss only.
    Ovf,
    /// Calibrated on the full objective.
    Dff,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Ovf => "ovf",
            Variant::Dff => "dff",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "ovf" => Ok(Variant::Ovf),
            "dff" => Ok(Variant::Dff),
            other => Err(Error::config(format!("unknown variant '{other}' (expected baseline, ovf or dff)"))),
        }
    }
}

/// The whole run configuration, one TOML table per module.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub cf: CfConfig,
    pub fidelity: FidelityConfig,
    pub calibration: CalibrationConfig,
    pub stats: StatsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::config(format!("{} is not UTF-8", path.display())))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.cf.validate()?;
        self.fidelity.user_thresholds().validate()?;
        self.calibration.validate()?;
        self.stats.validate()
    }

    /// Overrides every seed of the run with values derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scene.seed = seed;
        self.cf.seed = seed;
        self.calibration.seed = seed;
        self.stats.seed = seed;
        self
    }

    /// Hex digest recorded in every artifact of the run.
    pub fn hash(&self) -> String {
        format!("{:016x}", hash_json(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_parse_and_change_the_hash() {
        let text = "[scene]\npairs = 20\n[cf]\nk_cf = 8\nsteps = 30\n[fidelity]\nthresholds = \"percentile:90,95\"\n";
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!((cfg.scene.pairs, cfg.cf.k_cf), (20, 8));
        assert_eq!(cfg.fidelity.thresholds, ThresholdMode::Percentile(90.0, 95.0));
        assert_ne!(cfg.hash(), RunConfig::default().hash());
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for text in [
            "[scene]\npairz = 3\n",
            "[bogus]\n",
            "colour = 1\n",
            "[cf]\nk_cf = 0\n",
            "[fidelity]\nthresholds = \"p90\"\n",
        ] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text:?}");
        }
    }

    #[test]
    fn threshold_modes_roundtrip() {
        for s in ["user", "percentile:90,95", "percentile:50,99.5"] {
            assert_eq!(s.parse::<ThresholdMode>().unwrap().to_string(), s);
        }
        assert!("percentile:90,190".parse::<ThresholdMode>().is_err());
    }
}
