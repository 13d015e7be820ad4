use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CohortRecord, TimeSeriesEvent};
use crate::error::{invalid, Error, Result};

/// Magic prefix of the binary embedding-matrix format.
pub const EMBEDDING_MAGIC: &[u8; 8] = b"EHREMB1\0";

/// Counts reported after loading a cohort.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CohortSummary {
    pub n_records: usize,
    pub n_events: usize,
    /// One past the largest variable id seen.
    pub n_variables: usize,
    pub n_outcomes: usize,
    pub static_dim: usize,
    pub embed_dim: usize,
}

impl CohortSummary {
    pub fn of(records: &[CohortRecord]) -> Self {
        let first = records.first();
        Self {
            n_records: records.len(),
            n_events: records.iter().map(|r| r.events.len()).sum(),
            n_variables: records
                .iter()
                .flat_map(|r| r.events.iter().map(|e| e.variable_id + 1))
                .max()
                .unwrap_or(0),
            n_outcomes: first.map_or(0, |r| r.labels.len()),
            static_dim: first.map_or(0, |r| r.static_features.len()),
            embed_dim: first.map_or(0, |r| r.embed_dim()),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    patient_id: String,
    #[serde(rename = "static")]
    static_features: Vec<Option<f64>>,
    events: Vec<(usize, f64, f64)>,
    note_chunks: Vec<Vec<f64>>,
    discharge: Vec<f64>,
    labels: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    discharge_augmented: Option<Vec<f64>>,
}

impl From<&CohortRecord> for RecordLine {
    fn from(r: &CohortRecord) -> Self {
        Self {
            patient_id: r.patient_id.clone(),
            static_features: r.static_features.clone(),
            events: r
                .events
                .iter()
                .map(|e| (e.variable_id, e.timestamp, e.value))
                .collect(),
            note_chunks: r.note_chunk_embeddings.clone(),
            discharge: r.discharge_embedding.clone(),
            labels: r.labels.iter().map(|&l| l as i64).collect(),
            discharge_augmented: r.augmented_discharge.clone(),
        }
    }
}

struct Shape {
    embed_dim: usize,
    static_dim: usize,
    n_outcomes: usize,
}

fn convert(line: RecordLine, shape: &mut Option<Shape>) -> std::result::Result<CohortRecord, String> {
    let labels = line
        .labels
        .iter()
        .map(|&l| match l {
            0 | 1 => Ok(l as u8),
            other => Err(format!("label {other} is not 0 or 1")),
        })
        .collect::<std::result::Result<Vec<u8>, String>>()?;
    if line.events.iter().any(|e| !e.1.is_finite()) {
        return Err("non-finite event timestamp".into());
    }
    let e = line.discharge.len();
    if e == 0 {
        return Err("empty discharge embedding".into());
    }
    if let Some(c) = line.note_chunks.iter().find(|c| c.len() != e) {
        return Err(format!(
            "note chunk dimension {} disagrees with discharge dimension {e}",
            c.len()
        ));
    }
    if let Some(a) = &line.discharge_augmented {
        if a.len() != e {
            return Err(format!("augmented discharge dimension {} disagrees with {e}", a.len()));
        }
    }
    match shape {
        None => {
            *shape = Some(Shape {
                embed_dim: e,
                static_dim: line.static_features.len(),
                n_outcomes: labels.len(),
            })
        }
        Some(s) => {
            if s.embed_dim != e {
                return Err(format!("embedding dimension {e} disagrees with earlier records ({})", s.embed_dim));
            }
            if s.static_dim != line.static_features.len() {
                return Err(format!(
                    "static feature count {} disagrees with earlier records ({})",
                    line.static_features.len(),
                    s.static_dim
                ));
            }
            if s.n_outcomes != labels.len() {
                return Err(format!(
                    "label count {} disagrees with earlier records ({})",
                    labels.len(),
                    s.n_outcomes
                ));
            }
        }
    }
    let mut record = CohortRecord {
        patient_id: line.patient_id,
        static_features: line.static_features,
        events: line
            .events
            .into_iter()
            .map(|(variable_id, timestamp, value)| TimeSeriesEvent {
                variable_id,
                timestamp,
                value,
            })
            .collect(),
        note_chunk_embeddings: line.note_chunks,
        discharge_embedding: line.discharge,
        augmented_discharge: line.discharge_augmented,
        labels,
    };
    record.sort_events();
    Ok(record)
}

/// Parses a cohort from JSON lines. `origin` is only used in error messages.
pub fn parse_cohort(reader: impl BufRead, origin: &Path) -> Result<(Vec<CohortRecord>, CohortSummary)> {
    let mut records = Vec::new();
    let mut shape = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: origin.to_path_buf(),
            line: idx + 1,
            reason,
        };
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        records.push(convert(parsed, &mut shape).map_err(err)?);
    }
    let summary = CohortSummary::of(&records);
    Ok((records, summary))
}

/// Loads a cohort file: one JSON object per line.
pub fn load_cohort(path: impl AsRef<Path>) -> Result<(Vec<CohortRecord>, CohortSummary)> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let (records, summary) = parse_cohort(BufReader::new(file), path)?;
    log::info!(
        "loaded {} records ({} events) from {}",
        summary.n_records,
        summary.n_events,
        path.display()
    );
    Ok((records, summary))
}

pub fn write_cohort(mut writer: impl Write, records: &[CohortRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(&RecordLine::from(r)).map_err(|e| invalid(e.to_string()))?;
        writer.write_all(line.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn save_cohort(path: impl AsRef<Path>, records: &[CohortRecord]) -> Result<()> {
    let file = File::create(path)?;
    write_cohort(BufWriter::new(file), records)
}

/// Writes rows of 32-bit floats after the `EHREMB1\0` header.
pub fn write_embedding_matrix(mut writer: impl Write, rows: &[Vec<f32>]) -> Result<()> {
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(invalid("embedding rows have different dimensions"));
    }
    writer.write_all(EMBEDDING_MAGIC)?;
    writer.write_all(&(rows.len() as u32).to_le_bytes())?;
    writer.write_all(&(dim as u32).to_le_bytes())?;
    for row in rows {
        for v in row {
            writer.write_all(&v.to_le_bytes())?;
        }
    }
    writer.flush()?;
    Ok(())
}

pub fn read_embedding_matrix(mut reader: impl Read) -> Result<Vec<Vec<f32>>> {
    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic)?;
    if &magic != EMBEDDING_MAGIC {
        return Err(invalid("not an embedding matrix file (bad magic)"));
    }
    let mut word = [0u8; 4];
    reader.read_exact(&mut word)?;
    let n = u32::from_le_bytes(word) as usize;
    reader.read_exact(&mut word)?;
    let dim = u32::from_le_bytes(word) as usize;
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = Vec::with_capacity(dim);
        for _ in 0..dim {
            reader.read_exact(&mut word)?;
            row.push(f32::from_le_bytes(word));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Replaces each record's discharge embedding with the matching matrix row.
pub fn attach_discharge_embeddings(records: &mut [CohortRecord], rows: &[Vec<f32>]) -> Result<()> {
    if rows.len() != records.len() {
        return Err(invalid(format!(
            "embedding matrix has {} rows for {} records",
            rows.len(),
            records.len()
        )));
    }
    for (r, row) in records.iter_mut().zip(rows) {
        r.discharge_embedding = row.iter().map(|&v| v as f64).collect();
        r.augmented_discharge = None;
    }
    Ok(())
}
