use gaitfuse_core::features::*;
use gaitfuse_core::pose::*;

fn windows(spec: &SyntheticSpec, seed: u64) -> Vec<(ClipWindow, GroundTruth)> {
    synth_generate(spec, seed)
        .unwrap()
        .into_iter()
        .map(|c| {
            let n = normalize_coords(&c.sequence).unwrap();
            let w = slide_windows(&n, WINDOW, WINDOW_STRIDE).unwrap();
            (w.into_iter().next().unwrap(), c.truth)
        })
        .collect()
}

fn one_per_class() -> SyntheticSpec {
    SyntheticSpec {
        clips_per_class: 1,
        ..Default::default()
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn synthetic_oracle_small() {
    for seed in 0..5 {
        for (clip, t) in windows(&one_per_class(), seed) {
            let f = extract_all(&clip).unwrap();
            assert!(f.all_valid(), "{:b}", f.valid);
            let g = |n: &str| f.get(n).unwrap();
            for (name, truth) in [
                ("knee_rom_l", t.knee_rom_deg_l),
                ("knee_rom_r", t.knee_rom_deg_r),
                ("hip_rom_l", t.hip_rom_deg_l),
                ("hip_rom_r", t.hip_rom_deg_r),
            ] {
                assert!(rel(g(name), truth) < 0.02, "{name} {} vs {truth}", g(name));
            }
            assert!(rel(g("cadence_spm"), t.cadence_spm) < 0.05);
            assert!(rel(g("step_len_norm"), t.step_len_norm) < 0.05);
            assert!(rel(g("gait_cycle_dur_s"), 1.0 / t.stride_freq_hz) < 0.05);
            if t.asymmetry == 0.0 {
                for n in ["hip_rom_sym", "knee_rom_sym", "step_len_sym", "timing_sym"] {
                    assert!(g(n) < 5.0, "{n} = {}", g(n));
                }
            }
        }
    }
}

#[test]
fn asymmetry_shows_in_rom_symmetry() {
    let spec = SyntheticSpec {
        clips_per_class: 3,
        noise_sigma_px: 0.0,
        ..Default::default()
    };
    let mean_sym = |class: u8| {
        let v: Vec<f64> = windows(&spec, 1)
            .iter()
            .filter(|(c, _)| c.label == class)
            .map(|(c, _)| extract_all(c).unwrap().get("knee_rom_sym").unwrap())
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let s: Vec<f64> = (1..=4).map(mean_sym).collect();
    assert!(s[0] < 1.0 && s.windows(2).all(|w| w[1] > w[0]), "{s:?}");
}

#[test]
fn flip_swaps_sides_and_keeps_magnitudes() {
    for (clip, _) in windows(&one_per_class(), 3) {
        let a = extract_all(&clip).unwrap();
        let b = extract_all(&augment_flip(&clip)).unwrap();
        let mut expect = a.values;
        for (l, r) in LR_PAIRS {
            expect.swap(l, r);
        }
        for i in 0..NUM_FEATURES {
            assert!(
                (expect[i] - b.values[i]).abs() < 1e-6,
                "{}: {} vs {}",
                FEATURE_NAMES[i],
                expect[i],
                b.values[i]
            );
        }
        assert_eq!(a.valid, b.valid);
    }
}

fn transform(clip: &ClipWindow, s: f64, dx: f64, dy: f64) -> ClipWindow {
    let mut c = clip.clone();
    for k in c.x.iter_mut() {
        k[0] = s * k[0] + dx;
        k[1] = s * k[1] + dy;
    }
    c
}

#[test]
fn angle_features_ignore_translation_and_scale() {
    let angle_features = [
        "hip_rom_l",
        "hip_rom_r",
        "knee_rom_l",
        "knee_rom_r",
        "hip_mean_l",
        "hip_mean_r",
        "knee_mean_l",
        "knee_mean_r",
        "neck_angle_mean",
        "arm_body_angle_mean",
        "trunk_incl_mean",
        "hip_rom_sym",
        "knee_rom_sym",
    ];
    // raw pixel clips, so the transform is applied before any normalization
    let seqs = synth_generate(&one_per_class(), 9).unwrap();
    for c in seqs {
        let clip = slide_windows(&c.sequence, WINDOW, WINDOW_STRIDE).unwrap().remove(0);
        let a = extract_all(&clip).unwrap();
        for (s, dx, dy) in [(1.0, 137.0, -42.5), (0.37, 0.0, 0.0), (2.5, -900.0, 310.0)] {
            let b = extract_all(&transform(&clip, s, dx, dy)).unwrap();
            for n in angle_features {
                let (x, y) = (a.get(n).unwrap(), b.get(n).unwrap());
                assert!((x - y).abs() < 1e-6, "{n} under ({s},{dx},{dy}): {x} vs {y}");
            }
        }
    }
}

#[test]
fn normalized_and_raw_lengths_agree() {
    let c = &synth_generate(&one_per_class(), 4).unwrap()[1];
    let raw = slide_windows(&c.sequence, WINDOW, WINDOW_STRIDE).unwrap().remove(0);
    let norm = slide_windows(&normalize_coords(&c.sequence).unwrap(), WINDOW, WINDOW_STRIDE)
        .unwrap()
        .remove(0);
    let (a, b) = (extract_all(&raw).unwrap(), extract_all(&norm).unwrap());
    for n in ["step_len_norm", "stride_len_norm", "walking_speed_norm", "cadence_spm"] {
        let (x, y) = (a.get(n).unwrap(), b.get(n).unwrap());
        assert!(rel(x, y) < 0.02, "{n}: raw {x} normalized {y}");
    }
}

fn still_clip() -> ClipWindow {
    // upright, arms hanging, legs straight
    let mut pose = [[0.0, 0.0, 1.0]; COCO_KEYPOINTS];
    let set = |p: &mut [[f64; 3]; COCO_KEYPOINTS], k: usize, x: f64, y: f64| p[k] = [x, y, 1.0];
    for (l, r) in [(kp::L_SHOULDER, kp::R_SHOULDER), (kp::L_HIP, kp::R_HIP)] {
        let y = if l == kp::L_HIP { 0.0 } else { -1.0 };
        set(&mut pose, l, -0.2, y);
        set(&mut pose, r, 0.2, y);
    }
    for (side, x) in [(0, -0.2), (1, 0.2)] {
        set(&mut pose, kp::L_KNEE + side, x, 0.9);
        set(&mut pose, kp::L_ANKLE + side, x, 1.8);
        set(&mut pose, kp::L_ELBOW + side, x * 1.5, -0.4);
        set(&mut pose, kp::L_WRIST + side, x * 1.5, 0.1);
        set(&mut pose, kp::L_EAR + side, x * 0.5, -1.3);
        set(&mut pose, kp::L_EYE + side, x * 0.3, -1.35);
    }
    set(&mut pose, kp::NOSE, 0.0, -1.3);
    ClipWindow {
        x: std::iter::repeat_n(pose, WINDOW).flatten().collect(),
        patient_id: "p".into(),
        video_id: "v".into(),
        label: 1,
        start_frame: 0,
        fps: 30.0,
        normalization: None,
    }
}

#[test]
fn standing_still() {
    let f = extract_all(&still_clip()).unwrap();
    let g = |n: &str| f.get(n).unwrap();
    assert_eq!(g("trunk_incl_mean"), 0.0);
    assert_eq!(g("lateral_sway"), 0.0);
    assert_eq!(g("arm_swing_amp_l"), 0.0);
    assert_eq!(g("arm_swing_amp_r"), 0.0);
    assert_eq!(g("walking_speed_norm"), 0.0);
    assert!((g("knee_mean_l") - 180.0).abs() < 1e-9);
    assert!((g("hip_mean_r") - 180.0).abs() < 1e-9);
    // no events: temporal and event-based spatial features zeroed and flagged
    for n in [
        "cadence_spm",
        "gait_cycle_dur_s",
        "stance_swing_ratio",
        "timing_sym",
        "step_len_norm",
        "stride_len_norm",
        "step_len_sym",
    ] {
        let i = feature_index(n).unwrap();
        assert!(!f.is_valid(i), "{n} should be invalid");
        assert_eq!(f.values[i], 0.0);
    }
    assert!(f.is_valid(feature_index("knee_rom_l").unwrap()));
}

#[test]
fn missing_keypoint_flags_dependent_features() {
    let mut c = still_clip();
    for t in 0..WINDOW {
        c.x[t * COCO_KEYPOINTS + kp::L_EAR][2] = 0.0;
    }
    let f = extract_all(&c).unwrap();
    assert!(!f.is_valid(feature_index("neck_angle_mean").unwrap()));
    assert!(f.is_valid(feature_index("trunk_incl_mean").unwrap()));
}

#[test]
fn extraction_is_deterministic() {
    let (clip, _) = windows(&one_per_class(), 2).remove(2);
    assert_eq!(extract_all(&clip).unwrap(), extract_all(&clip).unwrap());
}

#[test]
fn standardizer_on_extracted_features() {
    let rows: Vec<Vec<f64>> = windows(&one_per_class(), 6)
        .into_iter()
        .chain(windows(&one_per_class(), 7))
        .map(|(c, _)| {
            let f = extract_all(&c).unwrap();
            select_subset(&f, &FeatureSet::Selected14.names()).unwrap()
        })
        .collect();
    let s = Standardizer::fit(&rows).unwrap();
    let z: Vec<Vec<f64>> = rows.iter().map(|r| s.apply(r).unwrap()).collect();
    for j in 0..14 {
        let m = z.iter().map(|r| r[j]).sum::<f64>() / z.len() as f64;
        assert!(m.abs() < 1e-6);
    }
}
