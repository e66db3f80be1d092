//! Clinical gait features from a pose window.

mod angles;
mod csv_io;
mod events;
pub mod harmonic;
mod standardize;

pub use angles::{angle_deg, joint_angle_series, rom, symmetry_index};
pub use csv_io::{read_feature_csv, write_feature_csv, FeatureRow};
pub use events::{detect_gait_events, moving_average, GaitEvents};
pub use standardize::Standardizer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{interpolate_gaps, kp, ClipWindow, COCO_KEYPOINTS, MIN_CONF};
use angles::{mean, std_dev};

pub const NUM_FEATURES: usize = 24;

pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "hip_rom_l",
    "hip_rom_r",
    "hip_rom_sym",
    "knee_rom_l",
    "knee_rom_r",
    "knee_rom_sym",
    "hip_mean_l",
    "hip_mean_r",
    "knee_mean_l",
    "knee_mean_r",
    "neck_angle_mean",
    "arm_body_angle_mean",
    "arm_swing_amp_l",
    "arm_swing_amp_r",
    "trunk_incl_mean",
    "lateral_sway",
    "cadence_spm",
    "gait_cycle_dur_s",
    "stance_swing_ratio",
    "step_len_norm",
    "stride_len_norm",
    "walking_speed_norm",
    "step_len_sym",
    "timing_sym",
];

pub const SELECTED_14: [&str; 14] = [
    "hip_rom_l",
    "hip_rom_r",
    "hip_rom_sym",
    "knee_rom_l",
    "knee_rom_r",
    "knee_rom_sym",
    "trunk_incl_mean",
    "step_len_norm",
    "stride_len_norm",
    "walking_speed_norm",
    "cadence_spm",
    "gait_cycle_dur_s",
    "step_len_sym",
    "timing_sym",
];

/// `(left, right)` feature index pairs that swap under a mirror flip.
pub const LR_PAIRS: [(usize, usize); 5] = [(0, 1), (3, 4), (6, 7), (8, 9), (12, 13)];

/// Body region of a feature as grouped in the curated table.
pub fn feature_region(name: &str) -> Option<&'static str> {
    Some(match name {
        "hip_rom_l" | "hip_rom_r" | "hip_rom_sym" | "hip_mean_l" | "hip_mean_r" => "hip",
        "knee_rom_l" | "knee_rom_r" | "knee_rom_sym" | "knee_mean_l" | "knee_mean_r" => "knee",
        "trunk_incl_mean" | "lateral_sway" => "trunk",
        "neck_angle_mean" => "head",
        "arm_body_angle_mean" | "arm_swing_amp_l" | "arm_swing_amp_r" => "arm",
        "step_len_norm" | "stride_len_norm" | "walking_speed_norm" => "spatial",
        "cadence_spm" | "gait_cycle_dur_s" | "stance_swing_ratio" => "temporal",
        "step_len_sym" | "timing_sym" => "symmetry",
        _ => return None,
    })
}

pub fn feature_index(name: &str) -> Option<usize> {
    FEATURE_NAMES.iter().position(|&n| n == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSet {
    All24,
    #[default]
    Selected14,
}

impl FeatureSet {
    pub fn names(self) -> Vec<String> {
        match self {
            FeatureSet::All24 => FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            FeatureSet::Selected14 => SELECTED_14.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn len(self) -> usize {
        match self {
            FeatureSet::All24 => NUM_FEATURES,
            FeatureSet::Selected14 => SELECTED_14.len(),
        }
    }

    pub fn is_empty(self) -> bool {
        false
    }
}

impl std::str::FromStr for FeatureSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all24" => Ok(FeatureSet::All24),
            "selected14" => Ok(FeatureSet::Selected14),
            _ => Err(Error::Config(format!("unknown feature set {s:?} (all24 | selected14)"))),
        }
    }
}

/// The 24 features in canonical order plus a validity bit per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitFeatureVector {
    pub values: [f64; NUM_FEATURES],
    /// Bit `i` set when feature `i` could be computed.
    pub valid: u32,
}

impl GaitFeatureVector {
    pub fn get(&self, name: &str) -> Option<f64> {
        feature_index(name).map(|i| self.values[i])
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid & (1 << i) != 0
    }

    pub fn all_valid(&self) -> bool {
        self.valid == (1u32 << NUM_FEATURES) - 1
    }
}

/// Project onto the named features, in the given order.
pub fn select_subset(v: &GaitFeatureVector, names: &[String]) -> Result<Vec<f64>> {
    names
        .iter()
        .map(|n| {
            feature_index(n)
                .map(|i| v.values[i])
                .ok_or_else(|| Error::Config(format!("unknown feature name {n:?}")))
        })
        .collect()
}

/// Tunables of the extractor. Defaults are the documented pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub min_conf: f64,
    /// Stance is ankle speed below this fraction of its clip maximum.
    pub stance_threshold: f64,
    /// Measure hip/knee ROM as the peak-to-peak of a periodic fit at the
    /// stride period (falls back to raw max - min without valid events).
    pub periodic_rom: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            min_conf: MIN_CONF,
            stance_threshold: 0.25,
            periodic_rom: true,
        }
    }
}

struct Track<'a> {
    pos: &'a [[f64; 2]],
    t: usize,
}

impl Track<'_> {
    fn series(&self, v: usize) -> Vec<[f64; 2]> {
        (0..self.t).map(|t| self.pos[t * COCO_KEYPOINTS + v]).collect()
    }

    fn mid(&self, a: usize, b: usize) -> Vec<[f64; 2]> {
        (0..self.t)
            .map(|t| {
                let (p, q) = (self.pos[t * COCO_KEYPOINTS + a], self.pos[t * COCO_KEYPOINTS + b]);
                [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])]
            })
            .collect()
    }
}

/// Per-clip result of `extract_all` with the intermediate event record.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub features: GaitFeatureVector,
    pub events: GaitEvents,
}

pub fn extract_all(clip: &ClipWindow) -> Result<GaitFeatureVector> {
    extract_with(clip, &FeatureConfig::default()).map(|e| e.features)
}

pub fn extract_with(clip: &ClipWindow, cfg: &FeatureConfig) -> Result<Extraction> {
    let t_len = clip.num_frames();
    if t_len == 0 {
        return Err(Error::Contract("feature extraction needs at least one frame".into()));
    }
    let fps = clip.fps;
    let (pos, present) = interpolate_gaps(clip, cfg.min_conf);
    let tr = Track { pos: &pos, t: t_len };

    // lengths in torso units: already so for normalized clips
    let unit = if clip.normalization.is_some() {
        1.0
    } else {
        let s = tr.mid(kp::L_SHOULDER, kp::R_SHOULDER);
        let h = tr.mid(kp::L_HIP, kp::R_HIP);
        let mut d: Vec<f64> = s.iter().zip(&h).map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1])).collect();
        d.sort_by(f64::total_cmp);
        let m = d[d.len() / 2];
        if m < 1e-9 {
            return Err(Error::Degenerate(format!("torso length vanishes in {}", clip.video_id)));
        }
        m
    };
    let world_x = |v: usize| -> Vec<f64> {
        (0..t_len)
            .map(|t| {
                let x = pos[t * COCO_KEYPOINTS + v][0];
                match &clip.normalization {
                    Some(n) => n.origin[t][0] / n.scale + x,
                    None => x / unit,
                }
            })
            .collect()
    };
    let have = |ks: &[usize]| ks.iter().all(|&k| present[k]);

    let mut values = [0.0; NUM_FEATURES];
    let mut valid = 0u32;
    let mut set = |name: &str, v: Option<f64>| {
        let i = feature_index(name).expect("canonical name");
        if let Some(x) = v.filter(|x| x.is_finite()) {
            values[i] = x;
            valid |= 1 << i;
        }
    };

    // events
    let la = tr.series(kp::L_ANKLE);
    let ra = tr.series(kp::R_ANKLE);
    let sep: Vec<f64> = la.iter().zip(&ra).map(|(l, r)| (l[0] - r[0]) / unit).collect();
    let events = if have(&[kp::L_ANKLE, kp::R_ANKLE]) {
        detect_gait_events(&sep, fps)
    } else {
        GaitEvents::default()
    };
    let period = if events.is_valid() { events.mean_interval() } else { None };

    let angle = |c: usize, a: usize, b: usize| -> Option<Vec<f64>> {
        if !have(&[c, a, b]) {
            return None;
        }
        joint_angle_series(&tr.series(c), &tr.series(a), &tr.series(b)).ok().flatten()
    };
    let range = |s: &[f64]| -> f64 {
        match period {
            Some(p) if cfg.periodic_rom => harmonic::harmonic_rom(s, p).unwrap_or_else(|| rom(s)),
            _ => rom(s),
        }
    };

    // hip: trunk vs thigh, knee: thigh vs shank
    let hip = [
        angle(kp::L_HIP, kp::L_SHOULDER, kp::L_KNEE),
        angle(kp::R_HIP, kp::R_SHOULDER, kp::R_KNEE),
    ];
    let knee = [
        angle(kp::L_KNEE, kp::L_HIP, kp::L_ANKLE),
        angle(kp::R_KNEE, kp::R_HIP, kp::R_ANKLE),
    ];
    let hip_rom = [hip[0].as_deref().map(range), hip[1].as_deref().map(range)];
    let knee_rom = [knee[0].as_deref().map(range), knee[1].as_deref().map(range)];
    set("hip_rom_l", hip_rom[0]);
    set("hip_rom_r", hip_rom[1]);
    set("hip_rom_sym", hip_rom[0].zip(hip_rom[1]).and_then(|(l, r)| symmetry_index(l, r).ok()));
    set("knee_rom_l", knee_rom[0]);
    set("knee_rom_r", knee_rom[1]);
    set("knee_rom_sym", knee_rom[0].zip(knee_rom[1]).and_then(|(l, r)| symmetry_index(l, r).ok()));
    set("hip_mean_l", hip[0].as_deref().map(mean));
    set("hip_mean_r", hip[1].as_deref().map(mean));
    set("knee_mean_l", knee[0].as_deref().map(mean));
    set("knee_mean_r", knee[1].as_deref().map(mean));

    // head, arms, trunk
    let sh_mid = tr.mid(kp::L_SHOULDER, kp::R_SHOULDER);
    let hip_mid = tr.mid(kp::L_HIP, kp::R_HIP);
    let torso_ok = have(&[kp::L_SHOULDER, kp::R_SHOULDER, kp::L_HIP, kp::R_HIP]);
    let neck = if torso_ok && have(&[kp::L_EAR, kp::R_EAR]) {
        joint_angle_series(&sh_mid, &tr.mid(kp::L_EAR, kp::R_EAR), &hip_mid)?.map(|s| mean(&s))
    } else {
        None
    };
    set("neck_angle_mean", neck);

    let arm_body = {
        let l = angle(kp::L_SHOULDER, kp::L_ELBOW, kp::L_HIP);
        let r = angle(kp::R_SHOULDER, kp::R_ELBOW, kp::R_HIP);
        l.zip(r).map(|(l, r)| 0.5 * (mean(&l) + mean(&r)))
    };
    set("arm_body_angle_mean", arm_body);

    for (name, wrist) in [("arm_swing_amp_l", kp::L_WRIST), ("arm_swing_amp_r", kp::R_WRIST)] {
        let v = (present[wrist] && torso_ok).then(|| {
            let rel: Vec<f64> = tr
                .series(wrist)
                .iter()
                .zip(&hip_mid)
                .map(|(w, h)| (w[0] - h[0]) / unit)
                .collect();
            rom(&rel)
        });
        set(name, v);
    }

    let trunk = torso_ok
        .then(|| {
            let incl: Option<Vec<f64>> = sh_mid
                .iter()
                .zip(&hip_mid)
                .map(|(s, h)| {
                    // image y points down, so "up" is (0, -1)
                    angle_deg([0.0, 0.0], [s[0] - h[0], s[1] - h[1]], [0.0, -1.0])
                })
                .collect();
            incl.map(|v| mean(&v))
        })
        .flatten();
    set("trunk_incl_mean", trunk);

    let sway = (torso_ok && have(&[kp::L_ANKLE, kp::R_ANKLE])).then(|| {
        let d: Vec<f64> = (0..t_len)
            .map(|t| (sh_mid[t][0] - 0.5 * (la[t][0] + ra[t][0])) / unit)
            .collect();
        std_dev(&d)
    });
    set("lateral_sway", sway);

    // temporal
    let temporal_ok = events.is_valid();
    let cycle = period.map(|p| p / fps);
    set("gait_cycle_dur_s", cycle);
    set("cadence_spm", cycle.map(|c| 120.0 / c));
    let stance = temporal_ok.then(|| stance_swing_ratio(&world_x(kp::L_ANKLE), &world_x(kp::R_ANKLE), cfg.stance_threshold)).flatten();
    set("stance_swing_ratio", stance);
    let timing = temporal_ok
        .then(|| {
            let l = mean(&events.left_intervals().iter().map(|&d| d as f64).collect::<Vec<_>>());
            let r = mean(&events.right_intervals().iter().map(|&d| d as f64).collect::<Vec<_>>());
            symmetry_index(l, r).ok()
        })
        .flatten();
    set("timing_sym", timing);

    // spatial
    if temporal_ok {
        let step_l = mean(&events.left.iter().map(|&t| sep[t].abs()).collect::<Vec<_>>());
        let step_r = mean(&events.right.iter().map(|&t| sep[t].abs()).collect::<Vec<_>>());
        set("step_len_norm", Some(0.5 * (step_l + step_r)));
        set("step_len_sym", symmetry_index(step_l, step_r).ok());
        let wl = world_x(kp::L_ANKLE);
        let wr = world_x(kp::R_ANKLE);
        let mid: Vec<f64> = wl.iter().zip(&wr).map(|(a, b)| 0.5 * (a + b)).collect();
        let disp: Vec<f64> = [&events.left, &events.right]
            .iter()
            .flat_map(|ev| ev.windows(2).map(|w| (mid[w[1]] - mid[w[0]]).abs()).collect::<Vec<_>>())
            .collect();
        set("stride_len_norm", Some(mean(&disp)));
    }
    let speed = torso_ok.then(|| {
        let hx: Vec<f64> = {
            let (l, r) = (world_x(kp::L_HIP), world_x(kp::R_HIP));
            l.iter().zip(&r).map(|(a, b)| 0.5 * (a + b)).collect()
        };
        if t_len < 2 {
            0.0
        } else {
            (hx[t_len - 1] - hx[0]).abs() / ((t_len - 1) as f64 / fps)
        }
    });
    set("walking_speed_norm", speed);

    Ok(Extraction {
        features: GaitFeatureVector { values, valid },
        events,
    })
}

/// Stance frames (ankle speed below `threshold` of its clip maximum) over
/// swing frames, averaged over the two sides. `None` when a side never
/// moves or never swings.
fn stance_swing_ratio(left_x: &[f64], right_x: &[f64], threshold: f64) -> Option<f64> {
    let side = |x: &[f64]| -> Option<f64> {
        if x.len() < 3 {
            return None;
        }
        let xs = moving_average(x, 5);
        let speed: Vec<f64> = (1..xs.len() - 1).map(|t| 0.5 * (xs[t + 1] - xs[t - 1]).abs()).collect();
        let max = speed.iter().copied().fold(0.0, f64::max);
        if max <= 0.0 {
            return None;
        }
        let stance = speed.iter().filter(|&&v| v < threshold * max).count();
        let swing = speed.len() - stance;
        (swing > 0).then(|| stance as f64 / swing as f64)
    };
    Some(0.5 * (side(left_x)? + side(right_x)?))
}
