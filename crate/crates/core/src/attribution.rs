//! Per-keypoint attribution: Grad-CAM over the last backbone block and an
//! occlusion oracle to validate it.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::features::GaitFeatureVector;
use crate::metrics::average_ranks;
use crate::model::{softmax, Prediction};
use crate::nn::{self, Forward};
use crate::pose::{ClipWindow, COCO_KEYPOINTS, COCO_NAMES};
use crate::tensor::Tape;
use crate::train::Classifier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    Head,
    Arm,
    Trunk,
    Hip,
    Knee,
    Ankle,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::Head => "Head",
            Region::Arm => "Arm",
            Region::Trunk => "Trunk",
            Region::Hip => "Hip",
            Region::Knee => "Knee",
            Region::Ankle => "Ankle",
        }
    }
}

/// Body regions as keypoint index sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionTable {
    pub regions: Vec<(Region, Vec<usize>)>,
}

impl Default for RegionTable {
    fn default() -> Self {
        RegionTable {
            regions: vec![
                (Region::Head, vec![0, 1, 2, 3, 4]),
                (Region::Arm, vec![7, 8, 9, 10]),
                (Region::Trunk, vec![5, 6]),
                (Region::Hip, vec![11, 12]),
                (Region::Knee, vec![13, 14]),
                (Region::Ankle, vec![15, 16]),
            ],
        }
    }
}

impl RegionTable {
    /// Every keypoint must belong to exactly one region.
    pub fn validate(&self) -> Result<()> {
        let mut seen = [0usize; COCO_KEYPOINTS];
        for (r, ks) in &self.regions {
            contract!(!ks.is_empty(), "region {} is empty", r.name());
            for &k in ks {
                contract!(k < COCO_KEYPOINTS, "keypoint {k} out of range");
                seen[k] += 1;
            }
        }
        contract!(seen.iter().all(|&c| c == 1), "regions must partition the keypoints");
        Ok(())
    }

    pub fn region_of(&self, k: usize) -> Option<Region> {
        self.regions.iter().find(|(_, ks)| ks.contains(&k)).map(|(r, _)| *r)
    }
}

/// Mean member score per region.
pub fn aggregate_regions(scores: &[f64; COCO_KEYPOINTS], table: &RegionTable) -> Vec<(Region, f64)> {
    table
        .regions
        .iter()
        .map(|(r, ks)| (*r, ks.iter().map(|&k| scores[k]).sum::<f64>() / ks.len() as f64))
        .collect()
}

/// How the per-frame CAM collapses to one score per keypoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeAggregation {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    /// In `[0, 1]`, max-normalized.
    pub scores: [f64; COCO_KEYPOINTS],
    pub regions: Vec<(Region, f64)>,
    pub target_class: usize,
    pub predicted_class: usize,
    pub video_id: String,
    pub start_frame: usize,
}

/// Divide by the maximum; an all-zero vector stays zero.
pub fn max_normalize(s: &mut [f64]) {
    let m = s.iter().copied().fold(0.0, f64::max);
    if m > 0.0 {
        for v in s {
            *v /= m;
        }
    }
}

/// Grad-CAM on one `C x T x V` activation map `a` with gradient `g`:
/// channel weights are the mean gradient over `(t, v)`, the map is
/// `relu(sum_c w_c a[c])`, collapsed over time and max-normalized.
pub fn cam_scores(a: &[f64], g: &[f64], c: usize, t: usize, v: usize, agg: TimeAggregation) -> Result<Vec<f64>> {
    contract!(
        a.len() == c * t * v && g.len() == a.len(),
        "activation and gradient must both be {c}x{t}x{v}"
    );
    let plane = t * v;
    let weights: Vec<f64> = (0..c)
        .map(|ch| g[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect();
    let mut cam = vec![0.0; plane];
    for (ch, &w) in weights.iter().enumerate() {
        for (m, &x) in cam.iter_mut().zip(&a[ch * plane..(ch + 1) * plane]) {
            *m += w * x;
        }
    }
    let mut s = vec![0.0; v];
    for (j, sj) in s.iter_mut().enumerate() {
        let col = (0..t).map(|ti| cam[ti * v + j].max(0.0));
        *sj = match agg {
            TimeAggregation::Mean => col.sum::<f64>() / t as f64,
            TimeAggregation::Max => col.fold(0.0, f64::max),
        };
    }
    max_normalize(&mut s);
    Ok(s)
}

/// Grad-CAM keypoint scores of one clip. `target` defaults to the predicted
/// class.
pub fn grad_cam_keypoints(
    clf: &Classifier,
    clip: &ClipWindow,
    features: &GaitFeatureVector,
    target: Option<usize>,
    agg: TimeAggregation,
) -> Result<AttributionMap> {
    let model = clf.model.cast::<f64>();
    contract!(
        model.config.variant.uses_skeleton(),
        "Grad-CAM needs a model with a skeleton stream"
    );
    let input = clf.input(&[clip], &[features])?;
    let input = crate::model::ModelInput {
        skeleton: input.skeleton.map(|t| t.cast()),
        clinical: input.clinical.map(|t| t.cast()),
    };
    let mut tape = Tape::tracking_all();
    let vars = nn::register_params(&mut tape, &model.params);
    let mut f = Forward::new(&mut tape, &vars, &model.buffers, false, None);
    let out = model.forward(&mut f, &input)?;
    let logits: Vec<f64> = tape.value(out.logits).row(0).to_vec();
    let predicted = Prediction::from_logits(&logits).class;
    let target = target.unwrap_or(predicted);
    contract!(target < logits.len(), "target class {target} out of range");
    let score = tape.select_sum(out.logits, &[target])?;
    let grads = tape.backward(score)?;
    let last = out.last_block.ok_or_else(|| Error::Contract("no backbone activations".into()))?;
    let a = tape.value(last);
    let (_, c, t, v) = a.dims4()?;
    let g = grads
        .get(last)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; a.numel()]);
    let s = cam_scores(a.data(), &g, c, t, v, agg)?;
    let scores: [f64; COCO_KEYPOINTS] = s
        .try_into()
        .map_err(|_| Error::Contract("expected 17 keypoints".into()))?;
    Ok(AttributionMap {
        regions: aggregate_regions(&scores, &RegionTable::default()),
        scores,
        target_class: target,
        predicted_class: predicted,
        video_id: clip.video_id.clone(),
        start_frame: clip.start_frame,
    })
}

/// Drop in target-class probability when one keypoint's `(x, y, conf)` is
/// zeroed in every frame, floored at 0 and max-normalized. The clinical
/// input, if any, keeps the features of the intact clip.
pub fn occlusion_importance(
    clf: &Classifier,
    clip: &ClipWindow,
    features: &GaitFeatureVector,
    target: usize,
) -> Result<[f64; COCO_KEYPOINTS]> {
    contract!(
        clf.model.config.variant.uses_skeleton(),
        "occlusion needs a model with a skeleton stream"
    );
    let prob = |c: &ClipWindow| -> Result<f64> {
        let logits = clf.model.logits(&clf.input(&[c], &[features])?)?;
        let row: Vec<f64> = logits.row(0).iter().map(|&v| v as f64).collect();
        let p = softmax(&row);
        contract!(target < p.len(), "target class {target} out of range");
        Ok(p[target])
    };
    let base = prob(clip)?;
    let mut scores = [0.0; COCO_KEYPOINTS];
    for (k, s) in scores.iter_mut().enumerate() {
        let mut occluded = clip.clone();
        for frame in occluded.x.chunks_exact_mut(COCO_KEYPOINTS) {
            frame[k] = [0.0; 3];
        }
        *s = (base - prob(&occluded)?).max(0.0);
    }
    max_normalize(&mut scores);
    Ok(scores)
}

/// Spearman correlation with average ranks for ties; 0 when either side
/// has no rank variance.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    contract!(a.len() == b.len() && !a.is_empty(), "rank correlation needs equal nonempty inputs");
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Keypoint-wise mean of several maps, re-normalized.
pub fn mean_scores(maps: &[[f64; COCO_KEYPOINTS]]) -> [f64; COCO_KEYPOINTS] {
    let mut out = [0.0; COCO_KEYPOINTS];
    for m in maps {
        for (o, v) in out.iter_mut().zip(m) {
            *o += v / maps.len() as f64;
        }
    }
    max_normalize(&mut out);
    out
}

/// CSV rows: keypoint, score, region.
pub fn attribution_csv(map: &AttributionMap, table: &RegionTable) -> String {
    let mut out = format!(
        "# video_id={} start_frame={} target_class={} predicted_class={}\nkeypoint,score,region\n",
        map.video_id,
        map.start_frame,
        map.target_class + 1,
        map.predicted_class + 1
    );
    for (k, s) in map.scores.iter().enumerate() {
        let region = table.region_of(k).map_or("", Region::name);
        out.push_str(&format!("{},{:?},{}\n", COCO_NAMES[k], s, region));
    }
    out.push_str("\nregion,score\n");
    for (r, s) in &map.regions {
        out.push_str(&format!("{},{:?}\n", r.name(), s));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_partitions() {
        RegionTable::default().validate().unwrap();
        let mut bad = RegionTable::default();
        bad.regions[0].1.push(5);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn region_means() {
        let t = RegionTable::default();
        let ones = [1.0; COCO_KEYPOINTS];
        assert!(aggregate_regions(&ones, &t).iter().all(|(_, s)| *s == 1.0));
        let mut nose = [0.0; COCO_KEYPOINTS];
        nose[0] = 1.0;
        let r = aggregate_regions(&nose, &t);
        assert_eq!(r[0], (Region::Head, 0.2));
        assert!(r[1..].iter().all(|(_, s)| *s == 0.0));
    }

    #[test]
    fn uniform_cam_is_all_ones() {
        let (c, t, v) = (3, 4, 17);
        let a = vec![0.7; c * t * v];
        let g = vec![0.2; c * t * v];
        let s = cam_scores(&a, &g, c, t, v, TimeAggregation::Mean).unwrap();
        assert!(s.iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_column_scores_zero() {
        let (c, t, v) = (2, 3, 5);
        let mut a: Vec<f64> = (0..c * t * v).map(|i| 1.0 + i as f64 * 0.01).collect();
        for ch in 0..c {
            for ti in 0..t {
                a[ch * t * v + ti * v + 2] = 0.0;
            }
        }
        let g = vec![1.0; c * t * v];
        let s = cam_scores(&a, &g, c, t, v, TimeAggregation::Max).unwrap();
        assert_eq!(s[2], 0.0);
        assert_eq!(s.iter().copied().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn negative_map_stays_zero() {
        let s = cam_scores(&[1.0, 2.0], &[-1.0, -1.0], 1, 1, 2, TimeAggregation::Mean).unwrap();
        assert_eq!(s, vec![0.0, 0.0]);
    }

    #[test]
    fn spearman_cases() {
        let a: Vec<f64> = (0..17).map(|i| i as f64).collect();
        let rev: Vec<f64> = a.iter().rev().copied().collect();
        assert_eq!(rank_correlation(&a, &a).unwrap(), 1.0);
        assert_eq!(rank_correlation(&a, &rev).unwrap(), -1.0);
        let r = rank_correlation(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 4.0, 3.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
        assert_eq!(rank_correlation(&[1.0; 4], &[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.0);
    }
}
