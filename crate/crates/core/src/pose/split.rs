use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{quality_filter, slide_windows, ClipWindow, PoseSequence, MIN_CONF, MIN_FRAC, NUM_CLASSES, WINDOW, WINDOW_STRIDE};
use crate::error::{contract, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// `(train, val, test)` patient fractions.
    pub fractions: [f64; 3],
    pub window: usize,
    pub stride: usize,
    pub min_conf: f64,
    pub min_frac: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            fractions: [0.6, 0.2, 0.2],
            window: WINDOW,
            stride: WINDOW_STRIDE,
            min_conf: MIN_CONF,
            min_frac: MIN_FRAC,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplit {
    pub train: Vec<ClipWindow>,
    pub val: Vec<ClipWindow>,
    pub test: Vec<ClipWindow>,
    pub seed: u64,
    /// Patient ids per split, sorted.
    pub patients: [Vec<String>; 3],
    pub warnings: Vec<String>,
    /// Windows dropped by the quality filter.
    pub rejected: usize,
}

/// Assign whole patients to train/val/test, stratified by each patient's
/// majority label, then window and quality-filter their sequences.
///
/// Per class with `n >= 3` patients, val and test each receive
/// `max(1, round(n * fraction))` patients and train keeps the rest. Classes
/// with fewer than three patients go entirely to train.
pub fn patient_stratified_split(seqs: &[PoseSequence], cfg: &SplitConfig, seed: u64) -> Result<DatasetSplit> {
    let f = cfg.fractions;
    contract!(f.iter().all(|&x| x > 0.0), "split fractions must be positive, got {f:?}");
    contract!((f.iter().sum::<f64>() - 1.0).abs() <= 1e-9, "split fractions must sum to 1, got {f:?}");

    // patient -> label counts
    let mut counts: BTreeMap<&str, [usize; NUM_CLASSES]> = BTreeMap::new();
    for s in seqs {
        counts.entry(&s.patient_id).or_default()[s.label as usize - 1] += 1;
    }
    let mut by_class: [Vec<&str>; NUM_CLASSES] = Default::default();
    for (&pid, c) in &counts {
        // lowest level wins ties
        let major = (0..NUM_CLASSES).fold(0, |best, k| if c[k] > c[best] { k } else { best });
        by_class[major].push(pid);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assign: BTreeMap<&str, usize> = BTreeMap::new();
    let mut warnings = Vec::new();
    for (k, pids) in by_class.iter_mut().enumerate() {
        let n = pids.len();
        if n == 0 {
            continue;
        }
        pids.shuffle(&mut rng);
        if n < 3 {
            warnings.push(format!(
                "GMFCS level {} has only {n} patient(s); all assigned to train",
                k + 1
            ));
            for &p in pids.iter() {
                assign.insert(p, 0);
            }
            continue;
        }
        let n_val = ((n as f64 * f[1]).round() as usize).clamp(1, n - 2);
        let n_test = ((n as f64 * f[2]).round() as usize).max(1).min(n - 1 - n_val);
        for (i, &p) in pids.iter().enumerate() {
            let split = if i < n_val {
                1
            } else if i < n_val + n_test {
                2
            } else {
                0
            };
            assign.insert(p, split);
        }
    }

    let mut out = DatasetSplit {
        seed,
        warnings,
        ..Default::default()
    };
    for (&p, &s) in &assign {
        out.patients[s].push(p.to_string());
    }
    for s in seqs {
        let split = assign[s.patient_id.as_str()];
        for w in slide_windows(s, cfg.window, cfg.stride)? {
            if !quality_filter(&w, cfg.min_conf, cfg.min_frac) {
                out.rejected += 1;
                continue;
            }
            match split {
                0 => out.train.push(w),
                1 => out.val.push(w),
                _ => out.test.push(w),
            }
        }
    }
    Ok(out)
}
