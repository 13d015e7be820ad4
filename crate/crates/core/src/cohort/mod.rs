//! Patient encounters, their on-disk formats, preprocessing and synthetic
//! cohorts.

mod augment;
mod io;
mod stats;
mod synthetic;

pub use augment::{DescriptorAugmenter, DEFAULT_AUGMENT_LAMBDA};
pub use io::{
    attach_discharge_embeddings, load_cohort, parse_cohort, read_embedding_matrix, save_cohort,
    write_cohort, write_embedding_matrix, CohortSummary, EMBEDDING_MAGIC,
};
pub use stats::{apply_stats, fit_stats, NormalizationStats, STD_FLOOR};
pub use synthetic::{generate_synthetic_cohort, latent_factors, SyntheticConfig};

/// One measurement of a time-varying clinical variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSeriesEvent {
    pub variable_id: usize,
    /// Seconds since the unix epoch.
    pub timestamp: f64,
    /// Measurement in the variable's native units.
    pub value: f64,
}

/// One patient encounter.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortRecord {
    pub patient_id: String,
    /// Static tabular features; `None` marks a missing value.
    pub static_features: Vec<Option<f64>>,
    /// Sorted ascending by timestamp.
    pub events: Vec<TimeSeriesEvent>,
    /// One embedding per clinical-note chunk.
    pub note_chunk_embeddings: Vec<Vec<f64>>,
    pub discharge_embedding: Vec<f64>,
    /// Discharge embedding after descriptor augmentation, kept next to the
    /// original.
    pub augmented_discharge: Option<Vec<f64>>,
    /// Binary outcome labels.
    pub labels: Vec<u8>,
}

impl CohortRecord {
    pub fn sort_events(&mut self) {
        self.events
            .sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    }

    pub fn embed_dim(&self) -> usize {
        self.discharge_embedding.len()
    }
}

/// Event after normalization. The raw timestamp is retained because
/// positional indices are defined by raw-timestamp equality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedEvent {
    pub variable_id: usize,
    pub raw_timestamp: f64,
    /// z-scored timestamp.
    pub time: f64,
    /// z-scored value.
    pub value: f64,
}

/// A record after imputation and normalization with training-split
/// statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedRecord {
    pub patient_id: String,
    pub static_features: Vec<f64>,
    pub events: Vec<NormalizedEvent>,
    pub note_chunk_embeddings: Vec<Vec<f64>>,
    pub discharge_embedding: Vec<f64>,
    pub augmented_discharge: Option<Vec<f64>>,
    pub labels: Vec<u8>,
}
