use std::path::Path;

use super::{GaitFeatureVector, FEATURE_NAMES, NUM_FEATURES};
use crate::error::{Error, Result};

/// One clip's row in the feature table.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub patient_id: String,
    pub video_id: String,
    pub start_frame: usize,
    /// GMFCS level, 1-based.
    pub label: u8,
    pub features: GaitFeatureVector,
}

const META: [&str; 5] = ["patient_id", "video_id", "start_frame", "label", "valid_mask"];

pub fn write_feature_csv(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<&str> = META.iter().chain(FEATURE_NAMES.iter()).copied().collect();
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        let mut rec = vec![
            r.patient_id.clone(),
            r.video_id.clone(),
            r.start_frame.to_string(),
            r.label.to_string(),
            r.features.valid.to_string(),
        ];
        rec.extend(r.features.values.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_csv(path: &Path) -> Result<Vec<FeatureRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let expect: Vec<&str> = META.iter().chain(FEATURE_NAMES.iter()).copied().collect();
    if header.iter().collect::<Vec<_>>() != expect {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            message: "unexpected feature CSV header".into(),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |message: String| Error::Parse {
            path: path.into(),
            line,
            message,
        };
        let num = |j: usize| -> Result<f64> {
            rec[j].parse::<f64>().map_err(|e| bad(format!("column {}: {e}", expect[j])))
        };
        let mut values = [0.0; NUM_FEATURES];
        for (k, v) in values.iter_mut().enumerate() {
            *v = num(META.len() + k)?;
        }
        out.push(FeatureRow {
            patient_id: rec[0].to_string(),
            video_id: rec[1].to_string(),
            start_frame: rec[2].parse().map_err(|e| bad(format!("start_frame: {e}")))?,
            label: rec[3].parse().map_err(|e| bad(format!("label: {e}")))?,
            features: GaitFeatureVector {
                values,
                valid: rec[4].parse().map_err(|e| bad(format!("valid_mask: {e}")))?,
            },
        });
    }
    Ok(out)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            path: path.into(),
            line,
            message: format!("{kind:?}"),
        },
    }
}
