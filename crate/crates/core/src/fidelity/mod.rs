//! Fidelity distances, scores, thresholds and the acceptance predicate.
//!
//! Every distance is "lower is better" and passes when it does not exceed
//! its threshold. The OV threshold is stated on the score scale as
//! `1 - ov_score`, so raising any threshold can only turn fails into passes.

mod report;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use report::{read_records_csv, records_csv, write_records_csv, CsvRow, CSV_HEADER};

use crate::error::{Error, Result};
use crate::numerics::{mse, perceptual_distance, Image};
use crate::sut::{iou, LayerActivations, SutKind, SutOutput};

/// Decay rate of the steering similarity `exp(-k |Δθ|)`.
pub const STEERING_SCORE_RATE: f64 = 5.0;

/// Where a threshold set came from.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    User,
    Percentile { p: f64, split: String },
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::User => f.write_str("user"),
            Provenance::Percentile { p, split } => write!(f, "percentile({p}, {split})"),
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "user" {
            return Ok(Provenance::User);
        }
        let inner = s
            .strip_prefix("percentile(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| Error::format(format!("unknown threshold provenance {s:?}")))?;
        let (p, split) = inner.split_once(',').ok_or_else(|| Error::format(format!("bad provenance {s:?}")))?;
        let p = p.trim().parse().map_err(|_| Error::format(format!("bad percentile in {s:?}")))?;
        Ok(Provenance::Percentile { p, split: split.trim().to_string() })
    }
}

impl Serialize for Provenance {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Provenance {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub eps_in: f64,
    /// Bound on `1 - ov_score`.
    pub eps_out: f64,
    pub eps_dff: f64,
    pub eps_lf: Option<f64>,
    pub provenance: Provenance,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { eps_in: 0.15, eps_out: 0.3, eps_dff: 0.3, eps_lf: None, provenance: Provenance::User }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let lf = self.eps_lf.map(|v| ("eps_lf", v));
        for (name, v) in
            [("eps_in", self.eps_in), ("eps_out", self.eps_out), ("eps_dff", self.eps_dff)].into_iter().chain(lf)
        {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("threshold {name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IvResult {
    pub distance: f64,
    pub index: usize,
    pub pass: bool,
}

/// Nearest real-style candidate to `x_s` under the perceptual distance.
pub fn iv_check(x_s: &Image, rw: &[Image], eps_in: f64) -> Result<IvResult> {
    if rw.is_empty() {
        return Err(Error::validation("IV check needs at least one real-style candidate"));
    }
    let mut best = (f64::INFINITY, 0);
    for (i, x) in rw.iter().enumerate() {
        let d = perceptual_distance(x_s, x)?;
        if d < best.0 {
            best = (d, i);
        }
    }
    Ok(IvResult { distance: best.0, index: best.1, pass: best.0 <= eps_in })
}

pub fn iv_score(iv_distance: f64) -> f64 {
    1.0 - iv_distance.clamp(0.0, 1.0)
}

/// Task loss and similarity score between synthetic and real outputs:
/// squared angle difference and `exp(-5 |Δθ|)` for steering, `1 - IoU` and
/// IoU of the logit-thresholded masks for segmentation.
pub fn ov_distance_and_score(out_s: &SutOutput, out_r: &SutOutput) -> Result<(f64, f64)> {
    if out_s.kind != out_r.kind || out_s.values.len() != out_r.values.len() {
        return Err(Error::validation("OV comparison between outputs of different SUT kinds"));
    }
    Ok(match out_s.kind {
        SutKind::Steering => {
            let d = out_s.values[0] - out_r.values[0];
            (d * d, (-STEERING_SCORE_RATE * d.abs()).exp())
        }
        SutKind::Segmentation => {
            let truth: Vec<f64> = out_r.values.iter().map(|&z| if z > 0.0 { 1.0 } else { 0.0 }).collect();
            let j = iou(&out_s.values, &truth);
            (1.0 - j, j)
        }
    })
}

/// Per-layer activation MSE; passes only if every layer is within `eps_lf`.
pub fn lf_check(
    acts_s: &LayerActivations,
    acts_r: &LayerActivations,
    eps_lf: f64,
) -> Result<(BTreeMap<usize, f64>, bool)> {
    if acts_s.len() != acts_r.len() || acts_s.keys().zip(acts_r.keys()).any(|(a, b)| a != b) {
        return Err(Error::validation("LF comparison over different tap sets"));
    }
    let mut out = BTreeMap::new();
    for (layer, a) in acts_s {
        let b = &acts_r[layer];
        if a.shape() != b.shape() {
            return Err(Error::dimension(format!("tap {layer}: shapes {:?} and {:?}", a.shape(), b.shape())));
        }
        out.insert(*layer, mse(&a.data, &b.data)?);
    }
    let pass = out.values().all(|&d| d <= eps_lf);
    Ok((out, pass))
}

/// Empirical percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::validation("percentile of an empty sample"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::validation(format!("percentile {p} outside [0, 100]")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("percentile of non-finite values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

pub const MIN_CALIBRATION_SAMPLES: usize = 20;

/// `(ε90, ε95)` of a calibration-split distance sample.
pub fn calibrate_thresholds(distances: &[f64]) -> Result<(f64, f64)> {
    calibrate_at(distances, 90.0, 95.0)
}

pub fn calibrate_at(distances: &[f64], p1: f64, p2: f64) -> Result<(f64, f64)> {
    if distances.len() < MIN_CALIBRATION_SAMPLES {
        return Err(Error::validation(format!(
            "threshold calibration needs at least {MIN_CALIBRATION_SAMPLES} distances, got {}",
            distances.len()
        )));
    }
    Ok((percentile(distances, p1)?, percentile(distances, p2)?))
}

/// Raw per-pair measurements, before any threshold is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurements {
    pub iv_distance: f64,
    pub ov_loss: f64,
    pub ov_score: f64,
    pub lf: BTreeMap<usize, f64>,
    pub dff: f64,
}

impl Measurements {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.iv_distance, self.ov_loss, self.ov_score, self.dff]
            .iter()
            .chain(self.lf.values())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::validation("fidelity record has non-finite fields"));
        }
        if self.iv_distance < 0.0 || self.ov_loss < 0.0 || self.dff < 0.0 || !(0.0..=1.0).contains(&self.ov_score) {
            return Err(Error::validation("fidelity record has out-of-range fields"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub iv: bool,
    pub ov: bool,
    pub dff: bool,
    /// Reported, never gating.
    pub lf: Option<bool>,
    pub overall: bool,
}

/// IV ∧ OV ∧ DFF; LF is reported alongside.
pub fn judge(m: &Measurements, th: &Thresholds) -> Result<Verdict> {
    m.validate()?;
    th.validate()?;
    let iv = m.iv_distance <= th.eps_in;
    let ov = 1.0 - m.ov_score <= th.eps_out;
    let dff = m.dff <= th.eps_dff;
    let lf = th.eps_lf.map(|e| m.lf.values().all(|&d| d <= e));
    Ok(Verdict { iv, ov, dff, lf, overall: iv && ov && dff })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRecord {
    pub pair_id: String,
    pub iv_distance: f64,
    pub iv_score: f64,
    pub ov_loss: f64,
    pub ov_score: f64,
    pub lf: BTreeMap<usize, f64>,
    pub dff: f64,
    pub decoy: bool,
    pub verdict: Verdict,
}

impl FidelityRecord {
    pub fn new(pair_id: impl Into<String>, m: Measurements, decoy: bool, th: &Thresholds) -> Result<Self> {
        let verdict = judge(&m, th)?;
        Ok(FidelityRecord {
            pair_id: pair_id.into(),
            iv_distance: m.iv_distance,
            iv_score: iv_score(m.iv_distance),
            ov_loss: m.ov_loss,
            ov_score: m.ov_score,
            lf: m.lf,
            dff: m.dff,
            decoy,
            verdict,
        })
    }

    pub fn measurements(&self) -> Measurements {
        Measurements {
            iv_distance: self.iv_distance,
            ov_loss: self.ov_loss,
            ov_score: self.ov_score,
            lf: self.lf.clone(),
            dff: self.dff,
        }
    }

    pub fn lf_max(&self) -> f64 {
        self.lf.values().copied().fold(0.0, f64::max)
    }

    /// Re-applies a threshold set to the stored distances.
    pub fn rejudge(&mut self, th: &Thresholds) -> Result<()> {
        self.verdict = judge(&self.measurements(), th)?;
        Ok(())
    }
}

/// Full verdict for a record under `th`.
pub fn acceptability(record: &FidelityRecord, th: &Thresholds) -> Result<Verdict> {
    judge(&record.measurements(), th)
}

/// Fraction of records with `dff <= eps_dff`.
pub fn pass_rate(records: &[FidelityRecord], eps_dff: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::validation("pass rate of an empty record set"));
    }
    Ok(records.iter().filter(|r| r.dff <= eps_dff).count() as f64 / records.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn output(kind: SutKind, values: Vec<f64>) -> SutOutput {
        SutOutput { kind, values }
    }

    fn measurements(dff: f64) -> Measurements {
        Measurements { iv_distance: 0.01, ov_loss: 0.0, ov_score: 0.95, lf: BTreeMap::from([(1, 0.5)]), dff }
    }

    #[test]
    fn iv_check_finds_self() {
        let mut rng = Rng::new(2);
        let imgs: Vec<Image> =
            (0..3).map(|_| Image::new(16, 16, 1, (0..256).map(|_| rng.uniform() as f32).collect()).unwrap()).collect();
        let r = iv_check(&imgs[1], &imgs, 1e-9).unwrap();
        assert_eq!((r.distance, r.index, r.pass), (0.0, 1, true));
        let strict = iv_check(&imgs[1], &[imgs[0].clone(), imgs[2].clone()], 0.0).unwrap();
        assert!(!strict.pass);
        assert!(matches!(iv_check(&imgs[0], &[], 0.1), Err(Error::Validation(_))));
    }

    #[test]
    fn steering_score_values() {
        let r = output(SutKind::Steering, vec![0.1]);
        assert_eq!(ov_distance_and_score(&r, &r).unwrap(), (0.0, 1.0));
        let (loss, score) = ov_distance_and_score(&output(SutKind::Steering, vec![0.3]), &r).unwrap();
        assert!((loss - 0.04).abs() < 1e-15);
        assert!((score - (-1.0f64).exp()).abs() < 1e-12);
        assert!((score - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let a = output(SutKind::Segmentation, vec![1.0, 1.0, -1.0, -1.0]);
        let b = output(SutKind::Segmentation, vec![-1.0, -1.0, 1.0, 1.0]);
        assert_eq!(ov_distance_and_score(&a, &b).unwrap(), (1.0, 0.0));
        assert!(ov_distance_and_score(&a, &output(SutKind::Steering, vec![0.0])).is_err());
    }

    #[test]
    fn lf_uses_universal_quantifier() {
        use crate::sut::Tensor;
        let t = |v: f64| Tensor { c: 1, h: 1, w: 2, data: vec![v, v] };
        let a = LayerActivations::from([(0, t(0.0)), (3, t(0.0))]);
        let b = LayerActivations::from([(0, t(0.1)), (3, t(1.0))]);
        let (d, pass) = lf_check(&a, &a, 1e-9).unwrap();
        assert!(pass && d.values().all(|&v| v == 0.0));
        let (d, pass) = lf_check(&a, &b, 0.5).unwrap();
        assert!(!pass);
        assert!((d[&0] - 0.01).abs() < 1e-12 && d[&3] == 1.0);
        let short = LayerActivations::from([(0, t(0.0))]);
        assert!(lf_check(&a, &short, 1.0).is_err());
    }

    #[test]
    fn type7_percentiles() {
        let d: Vec<f64> = (1..=100).map(f64::from).collect();
        let (e90, e95) = calibrate_thresholds(&d).unwrap();
        assert!((e90 - 90.1).abs() < 1e-9 && (e95 - 95.05).abs() < 1e-9);
        assert_eq!(calibrate_thresholds(&[0.2; 25]).unwrap(), (0.2, 0.2));
        assert!(calibrate_thresholds(&[0.1; 19]).is_err());
    }

    #[test]
    fn pass_rate_bounds() {
        let th = Thresholds::default();
        let recs: Vec<FidelityRecord> = (0..10)
            .map(|i| FidelityRecord::new(format!("p{i}"), measurements(0.01 * (i + 1) as f64), false, &th).unwrap())
            .collect();
        assert_eq!(pass_rate(&recs, 0.1).unwrap(), 1.0);
        assert_eq!(pass_rate(&recs, 0.005).unwrap(), 0.0);
        assert!(pass_rate(&[], 0.1).is_err());
    }

    #[test]
    fn dissociation_case_fails_only_on_dff() {
        let th = Thresholds { eps_dff: 0.05, ..Thresholds::default() };
        let v = judge(&measurements(0.2), &th).unwrap();
        assert!(v.iv && v.ov && !v.dff && !v.overall);
        let zero = Measurements { iv_distance: 0.0, ov_loss: 0.0, ov_score: 1.0, lf: BTreeMap::new(), dff: 0.0 };
        assert!(judge(&zero, &th).unwrap().overall);
    }

    #[test]
    fn lf_never_gates() {
        let m = measurements(0.01);
        let a = judge(&m, &Thresholds { eps_lf: Some(1e-6), ..Thresholds::default() }).unwrap();
        let b = judge(&m, &Thresholds { eps_lf: None, ..Thresholds::default() }).unwrap();
        assert_eq!(a.lf, Some(false));
        assert_eq!(a.overall, b.overall);
    }

    #[test]
    fn provenance_roundtrip() {
        let p = Provenance::Percentile { p: 95.0, split: "calibration".into() };
        assert_eq!(p.to_string(), "percentile(95, calibration)");
        assert_eq!(p.to_string().parse::<Provenance>().unwrap(), p);
        assert_eq!("user".parse::<Provenance>().unwrap(), Provenance::User);
    }

    #[test]
    fn incomplete_records_are_rejected() {
        let mut m = measurements(0.01);
        m.dff = f64::NAN;
        assert!(matches!(judge(&m, &Thresholds::default()), Err(Error::Validation(_))));
    }
}
