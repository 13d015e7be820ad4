use sha2::{Digest, Sha256};

use super::{CohortRecord, NormalizedEvent, NormalizedRecord};
use crate::error::{invalid, Error, Result};

/// Standard deviations below this are treated as a constant variable and
/// replaced by 1.
pub const STD_FLOOR: f64 = 1e-6;

/// Normalization statistics fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub var_mean: Vec<f64>,
    pub var_std: Vec<f64>,
    /// Whether the variable's std was floored (constant or unobserved).
    pub var_floored: Vec<bool>,
    pub static_median: Vec<f64>,
    pub time_mean: f64,
    pub time_std: f64,
}

impl NormalizationStats {
    pub fn n_variables(&self) -> usize {
        self.var_mean.len()
    }

    /// Hex SHA-256 over the bit patterns of every statistic.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let all = self
            .var_mean
            .iter()
            .chain(&self.var_std)
            .chain(&self.static_median)
            .chain([&self.time_mean, &self.time_std]);
        for v in all {
            h.update(v.to_bits().to_le_bytes());
        }
        for f in &self.var_floored {
            h.update([*f as u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn mean_std(values: &[f64]) -> (f64, f64, bool) {
    if values.is_empty() {
        return (0.0, 1.0, true);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < STD_FLOOR {
        (mean, 1.0, true)
    } else {
        (mean, std, false)
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Fits per-variable value statistics, timestamp statistics and static
/// feature medians on `train`.
pub fn fit_stats(train: &[CohortRecord], n_variables: usize) -> Result<NormalizationStats> {
    let first = train
        .first()
        .ok_or_else(|| invalid("cannot fit normalization statistics on an empty training split"))?;
    let mut per_var: Vec<Vec<f64>> = vec![Vec::new(); n_variables];
    let mut times = Vec::new();
    for r in train {
        for e in &r.events {
            if e.variable_id >= n_variables {
                return Err(Error::UnknownVariable {
                    id: e.variable_id,
                    n_variables,
                });
            }
            per_var[e.variable_id].push(e.value);
            times.push(e.timestamp);
        }
    }
    let (mut var_mean, mut var_std, mut var_floored) = (Vec::new(), Vec::new(), Vec::new());
    for vals in &per_var {
        let (m, s, f) = mean_std(vals);
        var_mean.push(m);
        var_std.push(s);
        var_floored.push(f);
    }
    let (time_mean, time_std, _) = mean_std(&times);
    let static_dim = first.static_features.len();
    let static_median = (0..static_dim)
        .map(|j| {
            let mut observed: Vec<f64> = train
                .iter()
                .filter_map(|r| r.static_features.get(j).copied().flatten())
                .collect();
            median(&mut observed)
        })
        .collect();
    Ok(NormalizationStats {
        var_mean,
        var_std,
        var_floored,
        static_median,
        time_mean,
        time_std,
    })
}

/// Z-scores event values and timestamps and imputes missing static
/// features. The input record is left untouched.
pub fn apply_stats(record: &CohortRecord, stats: &NormalizationStats) -> Result<NormalizedRecord> {
    let v = stats.n_variables();
    let events = record
        .events
        .iter()
        .map(|e| {
            if e.variable_id >= v {
                return Err(Error::UnknownVariable {
                    id: e.variable_id,
                    n_variables: v,
                });
            }
            Ok(NormalizedEvent {
                variable_id: e.variable_id,
                raw_timestamp: e.timestamp,
                time: (e.timestamp - stats.time_mean) / stats.time_std,
                value: (e.value - stats.var_mean[e.variable_id]) / stats.var_std[e.variable_id],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if record.static_features.len() != stats.static_median.len() {
        return Err(invalid(format!(
            "record {} has {} static features, statistics cover {}",
            record.patient_id,
            record.static_features.len(),
            stats.static_median.len()
        )));
    }
    let static_features = record
        .static_features
        .iter()
        .zip(&stats.static_median)
        .map(|(v, m)| v.unwrap_or(*m))
        .collect();
    Ok(NormalizedRecord {
        patient_id: record.patient_id.clone(),
        static_features,
        events,
        note_chunk_embeddings: record.note_chunk_embeddings.clone(),
        discharge_embedding: record.discharge_embedding.clone(),
        augmented_discharge: record.augmented_discharge.clone(),
        labels: record.labels.clone(),
    })
}
