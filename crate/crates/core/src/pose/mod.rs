//! Pose sequences, model-input windows and everything that happens to them
//! before feature extraction or the network sees them.

mod augment;
mod convert;
mod io;
mod split;
pub mod synth;
mod window;

pub use augment::{augment_flip, augment_noise, FLIP_PAIRS};
pub use convert::{body25_to_coco17, normalize_coords, BODY25_TO_COCO17};
pub use io::{
    load_pose_jsonl, load_pose_records, parse_pose_jsonl, parse_pose_records, write_pose_jsonl, PoseRecord,
};
pub use split::{patient_stratified_split, DatasetSplit, SplitConfig};
pub use synth::{synth_generate, GroundTruth, SyntheticClip, SyntheticSpec};
pub use window::{interpolate_gaps, quality_filter, slide_windows};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COCO_KEYPOINTS: usize = 17;
pub const BODY25_KEYPOINTS: usize = 25;
pub const WINDOW: usize = 124;
pub const WINDOW_STRIDE: usize = 12;
pub const DEFAULT_FPS: f64 = 30.0;
pub const MIN_CONF: f64 = 0.2;
pub const MIN_FRAC: f64 = 0.8;
pub const NUM_CLASSES: usize = 4;

pub const COCO_NAMES: [&str; COCO_KEYPOINTS] = [
    "nose",
    "l_eye",
    "r_eye",
    "l_ear",
    "r_ear",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hip",
    "r_hip",
    "l_knee",
    "r_knee",
    "l_ankle",
    "r_ankle",
];

/// COCO-17 indices by name.
pub mod kp {
    pub const NOSE: usize = 0;
    pub const L_EYE: usize = 1;
    pub const R_EYE: usize = 2;
    pub const L_EAR: usize = 3;
    pub const R_EAR: usize = 4;
    pub const L_SHOULDER: usize = 5;
    pub const R_SHOULDER: usize = 6;
    pub const L_ELBOW: usize = 7;
    pub const R_ELBOW: usize = 8;
    pub const L_WRIST: usize = 9;
    pub const R_WRIST: usize = 10;
    pub const L_HIP: usize = 11;
    pub const R_HIP: usize = 12;
    pub const L_KNEE: usize = 13;
    pub const R_KNEE: usize = 14;
    pub const L_ANKLE: usize = 15;
    pub const R_ANKLE: usize = 16;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeypointFormat {
    #[serde(rename = "BODY25")]
    Body25,
    #[serde(rename = "COCO17")]
    Coco17,
}

impl KeypointFormat {
    pub fn num_keypoints(self) -> usize {
        match self {
            KeypointFormat::Body25 => BODY25_KEYPOINTS,
            KeypointFormat::Coco17 => COCO_KEYPOINTS,
        }
    }
}

/// `(x, y, confidence)` of one keypoint in one frame.
pub type Keypoint = [f64; 3];

/// What `normalize_coords` removed: the per-frame hip-midpoint and the
/// sequence torso length, both in pixels. Raw coordinates are
/// `origin + scale * normalized`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f64,
    pub origin: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub patient_id: String,
    pub video_id: String,
    /// GMFCS level, 1..=4.
    pub label: u8,
    pub fps: f64,
    pub format: KeypointFormat,
    /// Row-major `T x V`.
    pub frames: Vec<Keypoint>,
    pub normalization: Option<Normalization>,
}

impl PoseSequence {
    pub fn num_keypoints(&self) -> usize {
        self.format.num_keypoints()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len() / self.num_keypoints()
    }

    pub fn frame(&self, t: usize) -> &[Keypoint] {
        let v = self.num_keypoints();
        &self.frames[t * v..(t + 1) * v]
    }

    pub fn validate(&self) -> Result<()> {
        validate_label(self.label)?;
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Validation(format!("fps must be positive, got {}", self.fps)));
        }
        let v = self.num_keypoints();
        if self.frames.is_empty() || self.frames.len() % v != 0 {
            return Err(Error::Validation(format!(
                "expected a nonempty T x {v} frame array, got {} keypoints",
                self.frames.len()
            )));
        }
        validate_cells(&self.frames)?;
        if let Some(n) = &self.normalization {
            if n.origin.len() != self.num_frames() || !(n.scale > 0.0) {
                return Err(Error::Validation("normalization does not match the sequence".into()));
            }
        }
        Ok(())
    }
}

pub(crate) fn validate_label(label: u8) -> Result<()> {
    if !(1..=NUM_CLASSES as u8).contains(&label) {
        return Err(Error::Validation(format!("GMFCS level must be in 1..=4, got {label}")));
    }
    Ok(())
}

fn validate_cells(cells: &[Keypoint]) -> Result<()> {
    for (i, k) in cells.iter().enumerate() {
        if !(k[0].is_finite() && k[1].is_finite()) {
            return Err(Error::Validation(format!("non-finite coordinate at cell {i}")));
        }
        if !(0.0..=1.0).contains(&k[2]) {
            return Err(Error::Validation(format!("confidence {} outside [0, 1] at cell {i}", k[2])));
        }
    }
    Ok(())
}

/// Fixed-length COCO-17 model input cut from a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipWindow {
    /// Row-major `T x 17`.
    pub x: Vec<Keypoint>,
    pub patient_id: String,
    pub video_id: String,
    pub label: u8,
    pub start_frame: usize,
    pub fps: f64,
    /// Slice of the source sequence's normalization, when it was normalized.
    pub normalization: Option<Normalization>,
}

impl ClipWindow {
    pub fn num_frames(&self) -> usize {
        self.x.len() / COCO_KEYPOINTS
    }

    #[inline]
    pub fn get(&self, t: usize, v: usize) -> Keypoint {
        self.x[t * COCO_KEYPOINTS + v]
    }

    pub fn frame(&self, t: usize) -> &[Keypoint] {
        &self.x[t * COCO_KEYPOINTS..(t + 1) * COCO_KEYPOINTS]
    }

    /// Zero-based class index.
    pub fn class(&self) -> usize {
        self.label as usize - 1
    }

    /// Pixels per coordinate unit (1 for unnormalized clips).
    pub fn scale(&self) -> f64 {
        self.normalization.as_ref().map_or(1.0, |n| n.scale)
    }

    /// Horizontal position of keypoint `v` at frame `t` in the un-centered
    /// frame, in units of the clip scale (torso lengths when normalized).
    pub fn world_x(&self, t: usize, v: usize) -> f64 {
        let x = self.get(t, v)[0];
        match &self.normalization {
            Some(n) => n.origin[t][0] / n.scale + x,
            None => x,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_label(self.label)?;
        if self.x.len() != WINDOW * COCO_KEYPOINTS {
            return Err(Error::Validation(format!(
                "clip must be {WINDOW} x {COCO_KEYPOINTS}, got {} cells",
                self.x.len()
            )));
        }
        validate_cells(&self.x)
    }

    /// Clip as a `3 x T x 17` channels-first array (x, y, confidence).
    pub fn channels_first(&self) -> Vec<f32> {
        let t = self.num_frames();
        let plane = t * COCO_KEYPOINTS;
        let mut out = vec![0.0f32; 3 * plane];
        for (i, k) in self.x.iter().enumerate() {
            for c in 0..3 {
                out[c * plane + i] = k[c] as f32;
            }
        }
        out
    }
}
