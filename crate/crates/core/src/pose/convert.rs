use super::window::fill_series;
use super::{kp, KeypointFormat, Normalization, PoseSequence, COCO_KEYPOINTS, MIN_CONF};
use crate::error::{contract, Error, Result};

/// BODY25 source index for each COCO-17 keypoint. Neck (1), mid-hip (8) and
/// the six foot points (19..=24) have no COCO counterpart.
pub const BODY25_TO_COCO17: [usize; COCO_KEYPOINTS] = [0, 16, 15, 18, 17, 5, 2, 6, 3, 7, 4, 12, 9, 13, 10, 14, 11];

pub fn body25_to_coco17(seq: &PoseSequence) -> Result<PoseSequence> {
    contract!(
        seq.format == KeypointFormat::Body25,
        "body25_to_coco17 needs a BODY25 sequence, got {:?}",
        seq.format
    );
    let frames = (0..seq.num_frames())
        .flat_map(|t| {
            let f = seq.frame(t);
            BODY25_TO_COCO17.iter().map(move |&src| f[src])
        })
        .collect();
    Ok(PoseSequence {
        format: KeypointFormat::Coco17,
        frames,
        ..seq.clone()
    })
}

fn midpoint(a: [f64; 3], b: [f64; 3]) -> [f64; 2] {
    [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Hip-center every frame and divide x, y by the sequence-median torso
/// length. Frames whose hips are below the confidence floor take their
/// center from the nearest confident frames.
pub fn normalize_coords(seq: &PoseSequence) -> Result<PoseSequence> {
    contract!(seq.format == KeypointFormat::Coco17, "normalize_coords needs COCO17 input");
    contract!(seq.normalization.is_none(), "sequence {} is already normalized", seq.video_id);
    let t_len = seq.num_frames();

    let hips_ok: Vec<bool> = (0..t_len)
        .map(|t| {
            let f = seq.frame(t);
            f[kp::L_HIP][2] >= MIN_CONF && f[kp::R_HIP][2] >= MIN_CONF
        })
        .collect();
    let mut ox: Vec<f64> = (0..t_len).map(|t| midpoint(seq.frame(t)[kp::L_HIP], seq.frame(t)[kp::R_HIP])[0]).collect();
    let mut oy: Vec<f64> = (0..t_len).map(|t| midpoint(seq.frame(t)[kp::L_HIP], seq.frame(t)[kp::R_HIP])[1]).collect();
    fill_series(&mut ox, &hips_ok);
    fill_series(&mut oy, &hips_ok);

    let torso = |t: usize| {
        let f = seq.frame(t);
        let s = midpoint(f[kp::L_SHOULDER], f[kp::R_SHOULDER]);
        let h = midpoint(f[kp::L_HIP], f[kp::R_HIP]);
        (s[0] - h[0]).hypot(s[1] - h[1])
    };
    let confident: Vec<f64> = (0..t_len)
        .filter(|&t| {
            let f = seq.frame(t);
            [kp::L_SHOULDER, kp::R_SHOULDER, kp::L_HIP, kp::R_HIP]
                .iter()
                .all(|&k| f[k][2] >= MIN_CONF)
        })
        .map(torso)
        .collect();
    let scale = if confident.is_empty() {
        median((0..t_len).map(torso).collect())
    } else {
        median(confident)
    };
    if !(scale >= 1e-6) {
        return Err(Error::Degenerate(format!(
            "median torso length {scale:e} in {} is below 1e-6",
            seq.video_id
        )));
    }

    let v = COCO_KEYPOINTS;
    let frames = seq
        .frames
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let t = i / v;
            [(k[0] - ox[t]) / scale, (k[1] - oy[t]) / scale, k[2]]
        })
        .collect();
    Ok(PoseSequence {
        frames,
        normalization: Some(Normalization {
            scale,
            origin: ox.into_iter().zip(oy).map(|(x, y)| [x, y]).collect(),
        }),
        ..seq.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::Keypoint;

    fn seq(format: KeypointFormat, frames: Vec<Keypoint>) -> PoseSequence {
        PoseSequence {
            patient_id: "p".into(),
            video_id: "v".into(),
            label: 2,
            fps: 30.0,
            format,
            frames,
            normalization: None,
        }
    }

    #[test]
    fn body25_mapping() {
        let frame: Vec<Keypoint> = (0..25).map(|i| [i as f64, 100.0 + i as f64, i as f64 / 25.0]).collect();
        let out = body25_to_coco17(&seq(KeypointFormat::Body25, frame.clone())).unwrap();
        assert_eq!(out.format, KeypointFormat::Coco17);
        assert_eq!(out.frame(0)[0], frame[0]);
        assert_eq!(out.frame(0)[16], frame[11]);
        for (c, &b) in BODY25_TO_COCO17.iter().enumerate() {
            assert_eq!(out.frame(0)[c], frame[b]);
        }
        for dropped in [1, 8, 19, 20, 21, 22, 23, 24] {
            assert!(!BODY25_TO_COCO17.contains(&dropped));
        }
        assert!(body25_to_coco17(&out).is_err());
    }

    fn standing(hip: [f64; 2], torso: f64) -> Vec<Keypoint> {
        let mut f = vec![[hip[0], hip[1], 1.0]; COCO_KEYPOINTS];
        f[kp::L_SHOULDER] = [hip[0] - 10.0, hip[1] - torso, 1.0];
        f[kp::R_SHOULDER] = [hip[0] + 10.0, hip[1] - torso, 1.0];
        f[kp::L_HIP] = [hip[0] - 8.0, hip[1], 1.0];
        f[kp::R_HIP] = [hip[0] + 8.0, hip[1], 1.0];
        f[kp::NOSE] = [hip[0] + 3.0, hip[1] - 70.0, 0.5];
        f
    }

    #[test]
    fn hip_centering_and_torso_scaling() {
        let frames: Vec<Keypoint> = (0..4).flat_map(|_| standing([100.0, 200.0], 50.0)).collect();
        let out = normalize_coords(&seq(KeypointFormat::Coco17, frames)).unwrap();
        let n = out.normalization.as_ref().unwrap();
        assert_eq!(n.scale, 50.0);
        assert_eq!(n.origin[2], [100.0, 200.0]);
        let f = out.frame(3);
        let sy = 0.5 * (f[kp::L_SHOULDER][1] + f[kp::R_SHOULDER][1]);
        assert!((sy.abs() - 1.0).abs() < 1e-12);
        assert_eq!(f[kp::NOSE], [3.0 / 50.0, -70.0 / 50.0, 0.5]);
    }

    #[test]
    fn collapsed_sequence_is_degenerate() {
        let frames = vec![[5.0, 5.0, 1.0]; 3 * COCO_KEYPOINTS];
        let err = normalize_coords(&seq(KeypointFormat::Coco17, frames)).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn undetected_hips_take_neighbouring_centers() {
        let mut frames: Vec<Keypoint> = Vec::new();
        for t in 0..3 {
            frames.extend(standing([100.0 + 10.0 * t as f64, 200.0], 50.0));
        }
        frames[COCO_KEYPOINTS + kp::L_HIP] = [0.0, 0.0, 0.0];
        let out = normalize_coords(&seq(KeypointFormat::Coco17, frames)).unwrap();
        assert_eq!(out.normalization.unwrap().origin[1], [110.0, 200.0]);
    }
}
