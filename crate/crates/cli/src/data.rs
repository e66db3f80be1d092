use std::path::Path;

use anyhow::{Context, Result};
use gaitfuse_core::pose::{
    body25_to_coco17, load_pose_records, normalize_coords, KeypointFormat, PoseRecord, PoseSequence,
};
use gaitfuse_core::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Default)]
pub struct LoadStats {
    pub records: usize,
    pub converted: usize,
    pub normalized: usize,
}

/// Read pose JSONL and bring every sequence to normalized COCO-17.
pub fn load_sequences(path: &Path, fps: f64) -> Result<(Vec<PoseSequence>, Vec<PoseRecord>, LoadStats)> {
    let records = load_pose_records(path).with_context(|| format!("loading {}", path.display()))?;
    let mut stats = LoadStats {
        records: records.len(),
        ..Default::default()
    };
    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let mut rec = rec.clone();
        rec.truth = None;
        rec.fps = rec.fps.or(Some(fps));
        let seq = rec.into_sequence().map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{} record {}: {m}", path.display(), i + 1)),
            other => other,
        })?;
        let seq = if seq.format == KeypointFormat::Body25 {
            stats.converted += 1;
            body25_to_coco17(&seq)?
        } else {
            seq
        };
        let seq = if seq.normalization.is_none() {
            stats.normalized += 1;
            normalize_coords(&seq)?
        } else {
            seq
        };
        out.push(seq);
    }
    Ok((out, records, stats))
}

/// One window per JSONL line.
#[derive(Debug, Serialize, Deserialize)]
pub struct WindowRecord {
    pub patient_id: String,
    pub video_id: String,
    pub gmfcs: u8,
    pub fps: f64,
    pub start_frame: usize,
    pub frames: Vec<Vec<[f64; 3]>>,
}
