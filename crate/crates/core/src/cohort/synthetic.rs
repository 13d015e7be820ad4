//! Desk-scale synthetic cohorts with a tunable amount of information shared
//! between the time-series and note modalities.
//!
//! Each patient has two latent factors. `z_time` drives the vital-sign
//! events, `z_note` drives the note-chunk embeddings, and the discharge
//! embedding and the outcome labels are linear readouts of both. The
//! per-coordinate correlation between the two latents is `shared_info`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{CohortRecord, TimeSeriesEvent};
use crate::error::{Error, Result};

/// Outcome prevalences cycled over when `n_outcomes` exceeds the list.
const PREVALENCES: [f64; 9] = [0.20, 0.12, 0.30, 0.08, 0.15, 0.10, 0.25, 0.06, 0.18];

/// Probability that an event shares the previous event's timestamp.
const TIE_PROBABILITY: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_patients: usize,
    pub n_variables: usize,
    pub mean_seq_len: usize,
    pub n_outcomes: usize,
    pub static_dim: usize,
    pub latent_dim_time: usize,
    pub latent_dim_note: usize,
    pub embed_dim: usize,
    /// Correlation between the two latent factors, in `[0, 1]`.
    pub shared_info: f64,
    pub label_noise: f64,
    pub missing_static_rate: f64,
    pub max_note_chunks: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_patients: 2000,
            n_variables: 6,
            mean_seq_len: 64,
            n_outcomes: 3,
            static_dim: 4,
            latent_dim_time: 4,
            latent_dim_note: 4,
            embed_dim: 16,
            shared_info: 0.2,
            label_noise: 0.02,
            missing_static_rate: 0.1,
            max_note_chunks: 3,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.shared_info) {
            return bad("shared_info must lie in [0, 1]");
        }
        if !(0.0..=0.5).contains(&self.label_noise) {
            return bad("label_noise must lie in [0, 0.5]");
        }
        if !(0.0..=1.0).contains(&self.missing_static_rate) {
            return bad("missing_static_rate must lie in [0, 1]");
        }
        let counts = [
            self.n_patients,
            self.n_variables,
            self.mean_seq_len,
            self.n_outcomes,
            self.latent_dim_time,
            self.latent_dim_note,
            self.embed_dim,
            self.max_note_chunks,
        ];
        if counts.iter().any(|&c| c == 0) {
            return bad("all counts must be positive");
        }
        Ok(())
    }
}

struct Structure {
    centers: Vec<f64>,
    scales: Vec<f64>,
    loadings: Vec<Vec<f64>>,
    note_map: Vec<Vec<f64>>,
    discharge_map: Vec<Vec<f64>>,
    readouts: Vec<Vec<f64>>,
    thresholds: Vec<f64>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

impl Structure {
    fn new(cfg: &SyntheticConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX);
        let (kt, kn) = (cfg.latent_dim_time, cfg.latent_dim_note);
        let centers = (0..cfg.n_variables).map(|_| rng.random_range(60.0..140.0)).collect();
        let scales = (0..cfg.n_variables).map(|_| rng.random_range(2.0..15.0)).collect();
        let loadings = (0..cfg.n_variables).map(|_| unit(normal_vec(&mut rng, kt))).collect();
        let note_map = (0..cfg.embed_dim)
            .map(|_| normal_vec(&mut rng, kn).iter().map(|v| v / (kn as f64).sqrt()).collect())
            .collect();
        let discharge_map = (0..cfg.embed_dim)
            .map(|_| {
                normal_vec(&mut rng, kt + kn)
                    .iter()
                    .map(|v| v / ((kt + kn) as f64).sqrt())
                    .collect()
            })
            .collect();
        let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
        let mut readouts = Vec::new();
        let mut thresholds = Vec::new();
        for o in 0..cfg.n_outcomes {
            let w = normal_vec(&mut rng, kt + kn);
            let norm = dot(&w, &w).sqrt();
            let p = PREVALENCES[o % PREVALENCES.len()];
            thresholds.push(norm * std_normal.inverse_cdf(1.0 - p));
            readouts.push(w);
        }
        Self {
            centers,
            scales,
            loadings,
            note_map,
            discharge_map,
            readouts,
            thresholds,
        }
    }
}

fn draw_latents(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let (kt, kn) = (cfg.latent_dim_time, cfg.latent_dim_note);
    let rho = cfg.shared_info;
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    let shared = normal_vec(rng, kt.max(kn));
    let own_time = normal_vec(rng, kt);
    let own_note = normal_vec(rng, kn);
    let m = kt.min(kn);
    let mix = |own: &[f64]| -> Vec<f64> {
        own.iter()
            .enumerate()
            .map(|(i, o)| if i < m { a * shared[i] + b * o } else { *o })
            .collect()
    };
    (mix(&own_time), mix(&own_note))
}

fn patient_rng(cfg: &SyntheticConfig, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    rng
}

fn patient(cfg: &SyntheticConfig, s: &Structure, index: usize) -> CohortRecord {
    let mut rng = patient_rng(cfg, index);
    let (z_time, z_note) = draw_latents(cfg, &mut rng);

    let static_features = (0..cfg.static_dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            if rng.random::<f64>() < cfg.missing_static_rate {
                None
            } else {
                Some(v)
            }
        })
        .collect();

    let half = cfg.mean_seq_len / 2;
    let n_events = rng.random_range(half.max(1)..=cfg.mean_seq_len + half);
    let gaps = LogNormal::new(60f64.ln(), 1.0).expect("valid log-normal");
    let mut t = 1.6e9 + rng.random_range(0..30_000_000u64) as f64;
    let mut events = Vec::with_capacity(n_events);
    for k in 0..n_events {
        if k > 0 {
            let tie = k == 1 || rng.random::<f64>() < TIE_PROBABILITY;
            if !tie {
                t += gaps.sample(&mut rng).round().max(1.0);
            }
        }
        let v = rng.random_range(0..cfg.n_variables);
        let noise: f64 = StandardNormal.sample(&mut rng);
        let value = s.centers[v] + s.scales[v] * (dot(&s.loadings[v], &z_time) + 0.5 * noise);
        events.push(TimeSeriesEvent {
            variable_id: v,
            timestamp: t,
            value,
        });
    }

    let n_chunks = rng.random_range(1..=cfg.max_note_chunks);
    let note_chunk_embeddings = (0..n_chunks)
        .map(|_| {
            s.note_map
                .iter()
                .map(|row| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    dot(row, &z_note) + 0.5 * noise
                })
                .collect()
        })
        .collect();

    let joint: Vec<f64> = z_time.iter().chain(&z_note).copied().collect();
    let discharge_embedding = s
        .discharge_map
        .iter()
        .map(|row| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            dot(row, &joint) + 0.3 * noise
        })
        .collect();

    let labels = s
        .readouts
        .iter()
        .zip(&s.thresholds)
        .map(|(w, th)| {
            let y = dot(w, &joint) > *th;
            let flip = rng.random::<f64>() < cfg.label_noise;
            (y ^ flip) as u8
        })
        .collect();

    CohortRecord {
        patient_id: format!("P{index:06}"),
        static_features,
        events,
        note_chunk_embeddings,
        discharge_embedding,
        augmented_discharge: None,
        labels,
    }
}

/// Generates a cohort. Each patient draws from its own RNG stream derived
/// from `(seed, patient index)`, so the output is independent of generation
/// order.
pub fn generate_synthetic_cohort(cfg: &SyntheticConfig) -> Result<Vec<CohortRecord>> {
    cfg.validate()?;
    let structure = Structure::new(cfg);
    Ok((0..cfg.n_patients).map(|i| patient(cfg, &structure, i)).collect())
}

/// The latent factors of patient `index`, for tests of the generator.
#[doc(hidden)]
pub fn latent_factors(cfg: &SyntheticConfig, index: usize) -> (Vec<f64>, Vec<f64>) {
    draw_latents(cfg, &mut patient_rng(cfg, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_patients: 50,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_cohort() {
        let a = generate_synthetic_cohort(&small()).unwrap();
        let b = generate_synthetic_cohort(&small()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_sharing_makes_latents_identical() {
        let cfg = SyntheticConfig {
            shared_info: 1.0,
            ..small()
        };
        for i in 0..20 {
            let (zt, zn) = latent_factors(&cfg, i);
            assert_eq!(zt, zn);
        }
    }

    #[test]
    fn events_sorted_with_ties() {
        let cohort = generate_synthetic_cohort(&small()).unwrap();
        let mut ties = 0;
        for r in &cohort {
            assert!(r.events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
            ties += r.events.windows(2).filter(|w| w[0].timestamp == w[1].timestamp).count();
            assert!(!r.note_chunk_embeddings.is_empty());
        }
        assert!(ties > 0);
    }

    #[test]
    fn rejects_invalid_sharing() {
        let cfg = SyntheticConfig {
            shared_info: 1.5,
            ..small()
        };
        assert!(generate_synthetic_cohort(&cfg).is_err());
    }
}
