use super::{ClipWindow, KeypointFormat, Normalization, PoseSequence, COCO_KEYPOINTS};
use crate::error::{contract, Result};

/// Linearly interpolate the entries of `values` not flagged valid from the
/// nearest valid neighbours; leading and trailing gaps hold the nearest
/// valid value. Returns false (and leaves `values` alone) when nothing is
/// valid.
pub fn fill_series(values: &mut [f64], valid: &[bool]) -> bool {
    debug_assert_eq!(values.len(), valid.len());
    let idx: Vec<usize> = (0..values.len()).filter(|&i| valid[i]).collect();
    let (Some(&first), Some(&last)) = (idx.first(), idx.last()) else {
        return false;
    };
    for i in 0..first {
        values[i] = values[first];
    }
    for i in last + 1..values.len() {
        values[i] = values[last];
    }
    for w in idx.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b - a > 1 {
            let (va, vb) = (values[a], values[b]);
            for i in a + 1..b {
                let f = (i - a) as f64 / (b - a) as f64;
                values[i] = va + f * (vb - va);
            }
        }
    }
    true
}

/// Gap-free `(x, y)` series for every keypoint of a clip, row-major `T x 17`.
/// Cells below `min_conf` are interpolated per keypoint over time. The
/// second value flags keypoints with no confident frame at all (their
/// series are left as recorded).
pub fn interpolate_gaps(clip: &ClipWindow, min_conf: f64) -> (Vec<[f64; 2]>, [bool; COCO_KEYPOINTS]) {
    let t_len = clip.num_frames();
    let mut out = vec![[0.0; 2]; t_len * COCO_KEYPOINTS];
    let mut present = [true; COCO_KEYPOINTS];
    let mut xs = vec![0.0; t_len];
    let mut ys = vec![0.0; t_len];
    let mut ok = vec![false; t_len];
    for v in 0..COCO_KEYPOINTS {
        for t in 0..t_len {
            let k = clip.get(t, v);
            xs[t] = k[0];
            ys[t] = k[1];
            ok[t] = k[2] >= min_conf;
        }
        if fill_series(&mut xs, &ok) {
            fill_series(&mut ys, &ok);
        } else {
            present[v] = false;
        }
        for t in 0..t_len {
            out[t * COCO_KEYPOINTS + v] = [xs[t], ys[t]];
        }
    }
    (out, present)
}

/// Cut fixed-length windows at `0, stride, 2*stride, ...`; sequences shorter
/// than `window` yield none.
pub fn slide_windows(seq: &PoseSequence, window: usize, stride: usize) -> Result<Vec<ClipWindow>> {
    contract!(window >= 1 && stride >= 1, "window and stride must be positive");
    contract!(seq.format == KeypointFormat::Coco17, "windows are cut from COCO17 sequences");
    let t_len = seq.num_frames();
    if t_len < window {
        return Ok(Vec::new());
    }
    let v = COCO_KEYPOINTS;
    Ok((0..=(t_len - window) / stride)
        .map(|i| {
            let start = i * stride;
            ClipWindow {
                x: seq.frames[start * v..(start + window) * v].to_vec(),
                patient_id: seq.patient_id.clone(),
                video_id: seq.video_id.clone(),
                label: seq.label,
                start_frame: start,
                fps: seq.fps,
                normalization: seq.normalization.as_ref().map(|n| Normalization {
                    scale: n.scale,
                    origin: n.origin[start..start + window].to_vec(),
                }),
            }
        })
        .collect())
}

/// True iff at least `min_frac` of all (frame, keypoint) cells have
/// confidence at least `min_conf`.
pub fn quality_filter(clip: &ClipWindow, min_conf: f64, min_frac: f64) -> bool {
    if clip.x.is_empty() {
        return false;
    }
    let good = clip.x.iter().filter(|k| k[2] >= min_conf).count();
    // The slack absorbs rounding in min_frac * n so exact boundaries stay inclusive.
    (good as f64) >= min_frac * clip.x.len() as f64 - 1e-9
}
