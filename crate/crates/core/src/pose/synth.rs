//! Kinematic walker used as a ground-truth oracle.
//!
//! The walker is seen side-on in image coordinates (y down) and walks
//! towards +x. Left and right hips, shoulders, eyes and ears coincide in
//! this view. Hip flexion, knee flexion and arm swing are sinusoids at the
//! stride frequency; the right side is shifted by half a cycle and its
//! amplitudes are scaled by `1 - asymmetry`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{kp, Keypoint, KeypointFormat, PoseSequence, COCO_KEYPOINTS, NUM_CLASSES, WINDOW};
use crate::error::{contract, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub clips_per_class: usize,
    pub stride_freq_hz: [f64; NUM_CLASSES],
    /// Peak-to-peak knee flexion.
    pub knee_rom_deg: [f64; NUM_CLASSES],
    /// Peak-to-peak hip flexion.
    pub hip_rom_deg: [f64; NUM_CLASSES],
    pub asymmetry: [f64; NUM_CLASSES],
    pub trunk_lean_deg: [f64; NUM_CLASSES],
    pub noise_sigma_px: f64,
    pub fps: f64,
    pub frames: usize,
    /// Torso length in pixels.
    pub body_scale_px: f64,
    /// Relative per-clip spread of frequency, ROM, asymmetry and body size.
    pub jitter: f64,
    /// Keypoint pinned to the hip midpoint with zero confidence, so it is
    /// `(0, 0, 0)` after normalization in every frame of every clip.
    pub constant_keypoint: Option<usize>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            clips_per_class: 200,
            stride_freq_hz: [1.1, 1.0, 0.9, 0.8],
            knee_rom_deg: [60.0, 52.0, 44.0, 36.0],
            hip_rom_deg: [44.0, 39.0, 34.0, 29.0],
            asymmetry: [0.0, 0.08, 0.16, 0.24],
            trunk_lean_deg: [4.0, 7.0, 10.0, 13.0],
            noise_sigma_px: 2.0,
            fps: 30.0,
            frames: WINDOW,
            body_scale_px: 500.0,
            jitter: 0.05,
            constant_keypoint: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: &[f64]| v.iter().all(|&x| x > 0.0 && x.is_finite());
        contract!(positive(&self.stride_freq_hz), "stride frequencies must be positive");
        contract!(positive(&self.knee_rom_deg), "knee ROM must be positive");
        contract!(positive(&self.hip_rom_deg), "hip ROM must be positive");
        contract!(
            self.asymmetry.iter().all(|&a| (0.0..1.0).contains(&a)),
            "asymmetry must be in [0, 1)"
        );
        contract!(
            self.trunk_lean_deg.iter().all(|&l| (0.0..45.0).contains(&l)),
            "trunk lean must be in [0, 45) degrees"
        );
        contract!(self.noise_sigma_px >= 0.0, "noise sigma must be nonnegative");
        contract!(self.fps > 0.0 && self.body_scale_px > 0.0, "fps and body scale must be positive");
        contract!(self.frames >= 1, "frames must be positive");
        contract!((0.0..0.5).contains(&self.jitter), "jitter must be in [0, 0.5)");
        contract!(
            self.constant_keypoint.is_none_or(|k| k < COCO_KEYPOINTS),
            "constant keypoint out of range"
        );
        Ok(())
    }
}

/// Closed-form quantities of the noise-free walker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub cadence_spm: f64,
    pub knee_rom_deg_l: f64,
    pub knee_rom_deg_r: f64,
    pub step_len_norm: f64,
    pub hip_rom_deg_l: f64,
    pub hip_rom_deg_r: f64,
    pub stride_freq_hz: f64,
    pub asymmetry: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClip {
    pub sequence: PoseSequence,
    pub truth: GroundTruth,
}

/// Per-clip walker parameters.
#[derive(Debug, Clone, Copy)]
struct Walker {
    freq: f64,
    phase: f64,
    knee_amp: f64,
    hip_amp: f64,
    hip_offset: f64,
    asym: f64,
    lean: f64,
    torso: f64,
    thigh: f64,
    shank: f64,
    speed: f64,
    origin: [f64; 2],
}

const DEG: f64 = PI / 180.0;

impl Walker {
    fn sample(spec: &SyntheticSpec, class: usize, rng: &mut ChaCha8Rng) -> Walker {
        let j = spec.jitter;
        let mut wobble = || 1.0 + j * rng.random_range(-1.0..1.0);
        let freq = spec.stride_freq_hz[class] * wobble();
        let knee_amp = 0.5 * spec.knee_rom_deg[class] * wobble();
        let hip_amp = 0.5 * spec.hip_rom_deg[class] * wobble();
        let asym = (spec.asymmetry[class] * wobble()).min(0.95);
        let torso = spec.body_scale_px * wobble();
        let lean = spec.trunk_lean_deg[class] + 10.0 * j * rng.random_range(-1.0..1.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        let thigh = 0.93 * torso;
        Walker {
            freq,
            phase,
            knee_amp,
            hip_amp,
            // keeps the hip angle away from 180 degrees at full extension
            hip_offset: hip_amp - lean.max(0.0) + 5.0,
            asym,
            lean,
            torso,
            thigh,
            shank: thigh,
            speed: 1.2 * torso * freq,
            origin: [200.0, 700.0],
        }
    }

    /// Noise-free keypoints at time `t` seconds.
    fn pose(&self, t: f64) -> [[f64; 2]; COCO_KEYPOINTS] {
        let th = 2.0 * PI * self.freq * t + self.phase;
        let hip = [
            self.origin[0] + self.speed * t,
            self.origin[1] - 0.02 * self.torso * (2.0 * th).cos(),
        ];
        let lean = self.lean * DEG;
        let shoulder = [hip[0] + self.torso * lean.sin(), hip[1] - self.torso * lean.cos()];

        let mut p = [[0.0; 2]; COCO_KEYPOINTS];
        for (side, scale, shift) in [(0usize, 1.0, 0.0), (1, 1.0 - self.asym, PI)] {
            let phi = (self.hip_offset + scale * self.hip_amp * (th + shift).sin()) * DEG;
            let kappa = (scale * self.knee_amp + 5.0 + scale * self.knee_amp * (th + shift + 1.0).sin()) * DEG;
            let knee = [hip[0] + self.thigh * phi.sin(), hip[1] + self.thigh * phi.cos()];
            let ankle = [
                knee[0] + self.shank * (phi - kappa).sin(),
                knee[1] + self.shank * (phi - kappa).cos(),
            ];
            let psi = -0.6 * scale * self.hip_amp * (th + shift).sin() * DEG;
            let elbow = [shoulder[0] + 0.6 * self.torso * psi.sin(), shoulder[1] + 0.6 * self.torso * psi.cos()];
            let fore = psi + 20.0 * DEG;
            let wrist = [elbow[0] + 0.55 * self.torso * fore.sin(), elbow[1] + 0.55 * self.torso * fore.cos()];
            p[kp::L_SHOULDER + side] = shoulder;
            p[kp::L_HIP + side] = hip;
            p[kp::L_KNEE + side] = knee;
            p[kp::L_ANKLE + side] = ankle;
            p[kp::L_ELBOW + side] = elbow;
            p[kp::L_WRIST + side] = wrist;
        }
        let nod = lean + 3.0 * DEG * (2.0 * th).sin();
        let head = [
            shoulder[0] + 0.35 * self.torso * nod.sin(),
            shoulder[1] - 0.35 * self.torso * nod.cos(),
        ];
        p[kp::NOSE] = [head[0] + 0.1 * self.torso, head[1]];
        for side in 0..2 {
            p[kp::L_EYE + side] = [head[0] + 0.08 * self.torso, head[1] - 0.03 * self.torso];
            p[kp::L_EAR + side] = [head[0] - 0.03 * self.torso, head[1] - 0.01 * self.torso];
        }
        p
    }

    /// Dense sampling of one noise-free cycle.
    fn truth(&self) -> GroundTruth {
        const N: usize = 4000;
        let period = 1.0 / self.freq;
        let mut knee = [Vec::with_capacity(N), Vec::with_capacity(N)];
        let mut hip = [Vec::with_capacity(N), Vec::with_capacity(N)];
        let mut sep = Vec::with_capacity(N);
        for i in 0..N {
            let p = self.pose(period * i as f64 / N as f64);
            for side in 0..2 {
                let (h, k, a) = (p[kp::L_HIP + side], p[kp::L_KNEE + side], p[kp::L_ANKLE + side]);
                knee[side].push(angle_deg(k, h, a));
                hip[side].push(angle_deg(h, p[kp::L_SHOULDER + side], k));
            }
            sep.push(p[kp::L_ANKLE][0] - p[kp::R_ANKLE][0]);
        }
        let range = |v: &[f64]| {
            v.iter().copied().fold(f64::MIN, f64::max) - v.iter().copied().fold(f64::MAX, f64::min)
        };
        GroundTruth {
            cadence_spm: 120.0 * self.freq,
            knee_rom_deg_l: range(&knee[0]),
            knee_rom_deg_r: range(&knee[1]),
            step_len_norm: 0.5 * range(&sep) / self.torso,
            hip_rom_deg_l: range(&hip[0]),
            hip_rom_deg_r: range(&hip[1]),
            stride_freq_hz: self.freq,
            asymmetry: self.asym,
        }
    }
}

fn angle_deg(center: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (ax, ay) = (a[0] - center[0], a[1] - center[1]);
    let (bx, by) = (b[0] - center[0], b[1] - center[1]);
    let c = (ax * bx + ay * by) / (ax.hypot(ay) * bx.hypot(by));
    c.clamp(-1.0, 1.0).acos() / DEG
}

/// Generate `clips_per_class` sequences for each of the four levels. Every
/// clip is its own patient and draws from its own random stream, so a clip
/// does not depend on how many others are generated.
pub fn synth_generate(spec: &SyntheticSpec, seed: u64) -> Result<Vec<SyntheticClip>> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.noise_sigma_px).expect("validated sigma");
    let mut out = Vec::with_capacity(NUM_CLASSES * spec.clips_per_class);
    for class in 0..NUM_CLASSES {
        for i in 0..spec.clips_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((class * spec.clips_per_class.max(1) + i) as u64);
            let w = Walker::sample(spec, class, &mut rng);
            let mut frames: Vec<Keypoint> = Vec::with_capacity(spec.frames * COCO_KEYPOINTS);
            for f in 0..spec.frames {
                let p = w.pose(f as f64 / spec.fps);
                let start = frames.len();
                for xy in p {
                    let conf = 0.85 + 0.1 * rng.random::<f64>();
                    frames.push([xy[0] + noise.sample(&mut rng), xy[1] + noise.sample(&mut rng), conf]);
                }
                if let Some(k) = spec.constant_keypoint {
                    let (l, r) = (frames[start + kp::L_HIP], frames[start + kp::R_HIP]);
                    frames[start + k] = [0.5 * (l[0] + r[0]), 0.5 * (l[1] + r[1]), 0.0];
                }
            }
            let id = format!("synth_l{}_{i:04}", class + 1);
            out.push(SyntheticClip {
                sequence: PoseSequence {
                    patient_id: id.clone(),
                    video_id: format!("{id}_v0"),
                    label: class as u8 + 1,
                    fps: spec.fps,
                    format: KeypointFormat::Coco17,
                    frames,
                    normalization: None,
                },
                truth: w.truth(),
            });
        }
    }
    Ok(out)
}
