//! Per-pair CSV reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FidelityRecord;
use crate::error::{Error, Result};
use crate::numerics::io::{read_file, write_atomic};

pub const CSV_HEADER: [&str; 11] = [
    "pair_id",
    "iv_distance",
    "iv_score",
    "ov_loss",
    "ov_score",
    "dff",
    "lf_max",
    "pass_iv",
    "pass_ov",
    "pass_dff",
    "pass_all",
];

/// One CSV row; floats are written in shortest round-trip form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub pair_id: String,
    pub iv_distance: f64,
    pub iv_score: f64,
    pub ov_loss: f64,
    pub ov_score: f64,
    pub dff: f64,
    pub lf_max: f64,
    pub pass_iv: bool,
    pub pass_ov: bool,
    pub pass_dff: bool,
    pub pass_all: bool,
}

impl From<&FidelityRecord> for CsvRow {
    fn from(r: &FidelityRecord) -> Self {
        CsvRow {
            pair_id: r.pair_id.clone(),
            iv_distance: r.iv_distance,
            iv_score: r.iv_score,
            ov_loss: r.ov_loss,
            ov_score: r.ov_score,
            dff: r.dff,
            lf_max: r.lf_max(),
            pass_iv: r.verdict.iv,
            pass_ov: r.verdict.ov,
            pass_dff: r.verdict.dff,
            pass_all: r.verdict.overall,
        }
    }
}

pub fn records_csv(records: &[FidelityRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(CsvRow::from(r)).map_err(|e| Error::format(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::format(e.to_string()))
}

pub fn write_records_csv(path: &Path, records: &[FidelityRecord]) -> Result<()> {
    write_atomic(path, &records_csv(records)?)
}

pub fn read_records_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let bytes = read_file(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    let header: Vec<String> =
        r.headers().map_err(|e| Error::format(format!("{}: {e}", path.display())))?.iter().map(String::from).collect();
    if header != CSV_HEADER {
        return Err(Error::format(format!("{}: unexpected CSV header {header:?}", path.display())));
    }
    r.deserialize().map(|row| row.map_err(|e| Error::format(format!("{}: {e}", path.display())))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fidelity::{Measurements, Thresholds};
    use std::collections::BTreeMap;

    #[test]
    fn csv_roundtrip_keeps_every_bit() {
        let m = Measurements {
            iv_distance: 0.1 + 0.2,
            ov_loss: 1e-17,
            ov_score: 0.9,
            lf: BTreeMap::from([(2, 0.25)]),
            dff: 1.0 / 3.0,
        };
        let rec = FidelityRecord::new("pair-00000", m, true, &Thresholds::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_records_csv(&path, std::slice::from_ref(&rec)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(&CSV_HEADER.join(",")));
        let rows = read_records_csv(&path).unwrap();
        assert_eq!(rows, vec![CsvRow::from(&rec)]);
    }
}
