//! Shared inputs for the benchmarks.

use gaitfuse_core::features::FeatureConfig;
use gaitfuse_core::pose::SplitConfig;
use gaitfuse_core::pose::{
    normalize_coords, slide_windows, synth_generate, ClipWindow, SyntheticSpec, WINDOW,
    WINDOW_STRIDE,
};
use gaitfuse_core::train::PreparedSplit;

/// First window of each synthetic walker, `per_class` walkers per level.
pub fn synthetic_windows(per_class: usize, seed: u64) -> Vec<ClipWindow> {
    let spec = SyntheticSpec {
        clips_per_class: per_class,
        ..Default::default()
    };
    synth_generate(&spec, seed)
        .unwrap()
        .iter()
        .map(|c| {
            let seq = normalize_coords(&c.sequence).unwrap();
            slide_windows(&seq, WINDOW, WINDOW_STRIDE)
                .unwrap()
                .remove(0)
        })
        .collect()
}

pub fn synthetic_split(per_class: usize, seed: u64) -> PreparedSplit {
    let spec = SyntheticSpec {
        clips_per_class: per_class,
        ..Default::default()
    };
    PreparedSplit::synthetic(
        &spec,
        &SplitConfig::default(),
        &FeatureConfig::default(),
        seed,
    )
    .unwrap()
}
