//! Offline stand-in for LLM-written descriptions of a patient's vital signs.
//!
//! Per-variable descriptor statistics are projected into the discharge
//! embedding space by a fixed random map and added to the discharge
//! embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{CohortRecord, TimeSeriesEvent};

pub const DEFAULT_AUGMENT_LAMBDA: f64 = 0.25;

/// Statistics per variable: log count, min, max, last value, slope sign.
const N_DESCRIPTORS: usize = 5;

const PROJECTION_SEED: u64 = 0x0DE5_C41B;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescriptorAugmenter {
    pub lambda: f64,
}

impl Default for DescriptorAugmenter {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_AUGMENT_LAMBDA,
        }
    }
}

fn signed_log(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

fn slope_sign(events: &[&TimeSeriesEvent]) -> f64 {
    let n = events.len() as f64;
    let mt = events.iter().map(|e| e.timestamp).sum::<f64>() / n;
    let mv = events.iter().map(|e| e.value).sum::<f64>() / n;
    let cov: f64 = events.iter().map(|e| (e.timestamp - mt) * (e.value - mv)).sum();
    if cov > 0.0 {
        1.0
    } else if cov < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projection column for (variable, statistic); independent of how many
/// variables exist.
fn direction(variable: usize, stat: usize, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
    rng.set_stream((variable * N_DESCRIPTORS + stat) as u64);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

impl DescriptorAugmenter {
    pub fn new(lambda: f64) -> Self {
        Self { lambda }
    }

    /// Unit-norm descriptor of the event stream, or all zeros without events.
    /// Depends only on the events, never on patient identity.
    pub fn descriptor(&self, events: &[TimeSeriesEvent], dim: usize) -> Vec<f64> {
        let mut by_var: Vec<Vec<&TimeSeriesEvent>> = Vec::new();
        for e in events {
            if by_var.len() <= e.variable_id {
                by_var.resize_with(e.variable_id + 1, Vec::new);
            }
            by_var[e.variable_id].push(e);
        }
        let mut out = vec![0.0; dim];
        for (v, evs) in by_var.iter().enumerate() {
            if evs.is_empty() {
                continue;
            }
            // Events are time-sorted, so the last entry is the latest value.
            let values = evs.iter().map(|e| e.value);
            let stats = [
                (evs.len() as f64).ln_1p(),
                signed_log(values.clone().fold(f64::INFINITY, f64::min)),
                signed_log(values.fold(f64::NEG_INFINITY, f64::max)),
                signed_log(evs[evs.len() - 1].value),
                slope_sign(evs),
            ];
            for (s, x) in stats.iter().enumerate() {
                for (o, d) in out.iter_mut().zip(direction(v, s, dim)) {
                    *o += x * d;
                }
            }
        }
        normalize(out)
    }

    /// `normalize(discharge + lambda * descriptor)`.
    pub fn augmented(&self, record: &CohortRecord) -> Vec<f64> {
        let dim = record.embed_dim();
        let desc = self.descriptor(&record.events, dim);
        let sum = record
            .discharge_embedding
            .iter()
            .zip(&desc)
            .map(|(d, x)| d + self.lambda * x)
            .collect();
        normalize(sum)
    }

    /// Stores the augmented embedding next to the original one.
    pub fn augment(&self, record: &mut CohortRecord) {
        record.augmented_discharge = Some(self.augmented(record));
    }
}
