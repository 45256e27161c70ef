//! Synthetic labelled profile pairs with exact ground truth.

mod dataset;
mod degrade;
mod shapes;

pub use dataset::{
    apportion, generate_dataset, generate_sample, generate_samples, plan_dataset, sample_placement, sample_seed,
    DatasetManifest, DatasetPlan, GenConfig, GeneratedSample, KindMix, ManifestHeader, ManifestRecord, Placement,
    Sample, Split, SplitFractions, DEFAULT_L_NORM_MM, MANIFEST_FILE,
};
pub use degrade::{add_sensor_noise, apply_wear, truncate_below_waist};
pub use shapes::{make_design_profile, ShapeParams, ShapeRanges};
