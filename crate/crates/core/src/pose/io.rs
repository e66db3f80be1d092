use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::GroundTruth;
use super::{Keypoint, KeypointFormat, Normalization, PoseSequence, DEFAULT_FPS};
use crate::error::{Error, Result};

/// One JSONL line. `truth` is only present in synthetic sidecars.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseRecord {
    pub patient_id: String,
    pub video_id: String,
    pub gmfcs: i64,
    #[serde(default)]
    pub fps: Option<f64>,
    pub format: KeypointFormat,
    pub frames: Vec<Vec<Keypoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<GroundTruth>,
}

impl PoseRecord {
    pub fn from_sequence(seq: &PoseSequence, truth: Option<GroundTruth>) -> Self {
        let v = seq.num_keypoints();
        PoseRecord {
            patient_id: seq.patient_id.clone(),
            video_id: seq.video_id.clone(),
            gmfcs: seq.label as i64,
            fps: Some(seq.fps),
            format: seq.format,
            frames: seq.frames.chunks(v).map(<[Keypoint]>::to_vec).collect(),
            normalization: seq.normalization.clone(),
            truth,
        }
    }

    pub fn into_sequence(self) -> Result<PoseSequence> {
        if !(1..=4).contains(&self.gmfcs) {
            return Err(Error::Validation(format!("GMFCS level must be in 1..=4, got {}", self.gmfcs)));
        }
        let v = self.format.num_keypoints();
        if let Some((t, f)) = self.frames.iter().enumerate().find(|(_, f)| f.len() != v) {
            return Err(Error::Validation(format!(
                "frame {t} has {} keypoints, {:?} needs {v}",
                f.len(),
                self.format
            )));
        }
        let seq = PoseSequence {
            patient_id: self.patient_id,
            video_id: self.video_id,
            label: self.gmfcs as u8,
            fps: self.fps.unwrap_or(DEFAULT_FPS),
            format: self.format,
            frames: self.frames.into_iter().flatten().collect(),
            normalization: self.normalization,
        };
        seq.validate()?;
        Ok(seq)
    }
}

fn records_with_lines(text: &str, path: &Path) -> Result<Vec<(usize, PoseRecord)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoseRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

/// Parse JSONL text without validating. Blank lines are ignored; `path`
/// only labels errors.
pub fn parse_pose_records(text: &str, path: &Path) -> Result<Vec<PoseRecord>> {
    Ok(records_with_lines(text, path)?.into_iter().map(|(_, r)| r).collect())
}

pub fn parse_pose_jsonl(text: &str, path: &Path) -> Result<Vec<PoseSequence>> {
    records_with_lines(text, path)?
        .into_iter()
        .map(|(line, rec)| {
            rec.into_sequence().map_err(|e| match e {
                Error::Validation(m) => Error::Validation(format!("{}:{line}: {m}", path.display())),
                other => other,
            })
        })
        .collect()
}

pub fn load_pose_jsonl(path: &Path) -> Result<Vec<PoseSequence>> {
    let text = fs::read_to_string(path)?;
    parse_pose_jsonl(&text, path)
}

pub fn load_pose_records(path: &Path) -> Result<Vec<PoseRecord>> {
    let text = fs::read_to_string(path)?;
    parse_pose_records(&text, path)
}

pub fn write_pose_jsonl<'a>(path: &Path, records: impl IntoIterator<Item = &'a PoseRecord>) -> Result<()> {
    let mut buf = Vec::new();
    for rec in records {
        serde_json::to_writer(&mut buf, rec)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(gmfcs: i64, conf: f64, v: usize) -> String {
        let frame: Vec<[f64; 3]> = (0..v).map(|i| [i as f64, 2.0 * i as f64, conf]).collect();
        serde_json::json!({
            "patient_id": "p1", "video_id": "v1", "gmfcs": gmfcs, "fps": 25.0,
            "format": "COCO17", "frames": [frame.clone(), frame]
        })
        .to_string()
    }

    #[test]
    fn two_lines_two_sequences() {
        let text = format!("{}\n{}\n", line(1, 0.9, 17), line(4, 0.5, 17));
        let seqs = parse_pose_jsonl(&text, Path::new("x.jsonl")).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[1].label, 4);
        assert_eq!(seqs[0].num_frames(), 2);
        assert_eq!(seqs[0].frame(1)[3], [3.0, 6.0, 0.9]);
    }

    #[test]
    fn empty_file_is_empty_list() {
        assert!(parse_pose_jsonl("", Path::new("x")).unwrap().is_empty());
    }

    #[test]
    fn invariant_violations_are_validation_errors() {
        for bad in [line(1, 1.5, 17), line(5, 0.5, 17), line(2, 0.5, 16)] {
            let err = parse_pose_jsonl(&bad, Path::new("x")).unwrap_err();
            assert!(matches!(err, Error::Validation(_)), "{err}");
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{}\n{{not json\n", line(1, 0.9, 17));
        match parse_pose_jsonl(&text, Path::new("x")).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn fps_defaults_to_30() {
        let text = line(1, 0.9, 17).replace("\"fps\":25.0,", "");
        let seqs = parse_pose_jsonl(&text, Path::new("x")).unwrap();
        assert_eq!(seqs[0].fps, 30.0);
    }

    #[test]
    fn round_trip() {
        let seqs = parse_pose_jsonl(&line(3, 0.7, 17), Path::new("x")).unwrap();
        let rec = PoseRecord::from_sequence(&seqs[0], None);
        let back = rec.into_sequence().unwrap();
        assert_eq!(back, seqs[0]);
    }
}
