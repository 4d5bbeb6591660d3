//! Procedural paired-domain scene synthesis.

mod dataset;
mod render;
mod scenario;

pub use dataset::{
    candidate_seeds, generate_pairs, initial_knobs, load_dataset, make_pair, pair_id, real_candidates, real_seed,
    write_dataset, Manifest, ManifestRecord, PairedSample, SceneConfig, Split,
};
pub use render::{
    decoy_region, render, render_masks, render_real, render_synthetic, steering_label, GeneratorKnobs, GroundTruth,
    Rect, CHANNELS, DECOY_RECT, IMAGE_SIZE, KNOB_BOUNDS, KNOB_NAMES,
};
pub use scenario::{
    calibration_count, sample_scenario_grid, split, AttrValue, GridOptions, ScenarioDescription, ATTRIBUTE_NAMES,
    CURVATURE_RANGE, LANE_RANGE, OFFSET_RANGE, SUN_RANGE,
};
