use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

pub const STD_FLOOR: f64 = 1e-8;

/// Per-feature z-scoring with training-set statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation, unfloored.
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        contract!(!rows.is_empty(), "cannot fit a standardizer on an empty set");
        let d = rows[0].len();
        contract!(rows.iter().all(|r| r.len() == d), "ragged feature rows");
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        contract!(v.len() == self.dim(), "standardizer expects {} features, got {}", self.dim(), v.len());
        Ok(v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s.max(STD_FLOOR))
            .collect())
    }
}
