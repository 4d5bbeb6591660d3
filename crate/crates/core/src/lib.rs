//! Decisive-feature fidelity toolkit.
//!
//! Measures whether a frozen system-under-test relies on the same evidence
//! for paired real-style and synthetic-style inputs, and calibrates a
//! procedural generator to close the gaps it finds.

pub mod calibration;
pub mod error;
pub mod explain;
pub mod fidelity;
pub mod numerics;
pub mod pipeline;
pub mod scene;
pub mod stats;
pub mod sut;

/// Toolkit version embedded in every output artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use calibration::{CalibrationConfig, CalibratorParams};
pub use error::{Error, Result};
pub use explain::{CfConfig, DecisiveMap, MapCache};
pub use fidelity::{FidelityRecord, Thresholds};
pub use numerics::{Grid, Image, PooledMap, Rng};
pub use pipeline::{RunConfig, Variant};
pub use scene::{GeneratorKnobs, PairedSample, ScenarioDescription, SceneConfig};
pub use stats::StatsConfig;
pub use sut::{ReferenceSut, SutId, SutKind};
