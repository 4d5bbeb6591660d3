//! End-to-end runs: configuration, evaluation, calibration and reports.
//!
//! Every artifact written here embeds the toolkit version and the hash of
//! the run configuration that produced it.

mod calibrate;
mod config;
mod evaluate;
mod report;

pub use calibrate::{
    calibrate, checkpoint_hash, CalibrationRun, CalibrationSummary, DecoySummary, CHECKPOINT_FILE, LOG_FILE,
};
pub use config::{FidelityConfig, RunConfig, ThresholdMode, Variant};
pub use evaluate::{
    evaluate, measure_pair, resolve_thresholds, synthetic_image, Aggregate, Evaluation, PassRates, PercentileRow,
};
pub use report::{
    cdf_points, render_report, CdfPoint, Report, ReportInput, AGGREGATE_FILE, RECORDS_FILE, SUMMARY_FILE,
};

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::explain::MapCache;
use crate::fidelity::write_records_csv;
use crate::numerics::io::write_atomic;
use crate::scene::{generate_pairs, write_dataset};

/// Environment variable naming the decisive-map cache directory.
pub const CACHE_DIR_ENV: &str = "MFID_CACHE_DIR";

/// Cache directory: `MFID_CACHE_DIR` if set, else `default`.
pub fn cache_dir(default: &Path) -> PathBuf {
    std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| default.to_path_buf())
}

pub fn open_cache(default: &Path) -> Result<MapCache> {
    MapCache::on_disk(cache_dir(default))
}

/// Pretty JSON with a trailing newline.
pub(crate) fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| crate::Error::format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Renders the dataset of `cfg.scene` into `out_dir`; returns the manifest path.
pub fn generate(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let pairs = generate_pairs(&cfg.scene)?;
    write_dataset(out_dir, &pairs, &cfg.hash(), cfg.scene.write_png)
}

/// Writes `records.csv` and `aggregate.json`.
pub fn write_evaluation(out_dir: &Path, eval: &Evaluation) -> Result<()> {
    write_records_csv(&out_dir.join(RECORDS_FILE), &eval.records)?;
    write_atomic(&out_dir.join(AGGREGATE_FILE), eval.aggregate.to_json()?.as_bytes())
}

/// Writes the calibration summary and the held-out records before and after.
/// The checkpoint and training log are written during training.
pub fn write_calibration(out_dir: &Path, run: &CalibrationRun) -> Result<()> {
    write_records_csv(&out_dir.join("heldout_baseline.csv"), &run.baseline)?;
    write_records_csv(&out_dir.join("heldout_calibrated.csv"), &run.calibrated)?;
    write_atomic(&out_dir.join(SUMMARY_FILE), run.summary.to_json()?.as_bytes())
}
