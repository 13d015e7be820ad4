//! Patient-level splitting and train-only normalization.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cohort::{apply_stats, fit_stats, CohortRecord, NormalizationStats, NormalizedRecord};
use crate::error::{invalid, Error, Result};

/// RNG stream reserved for the split shuffle.
const SPLIT_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Shuffles `0..n` with `seed` and cuts it by `fractions`; the test split
/// takes the remainder.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<SplitIndices> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must sum to 1")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    idx.shuffle(&mut rng);
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(SplitIndices { train: idx, val, test })
}

/// Normalized splits with statistics fitted on the training split only.
#[derive(Debug, Clone)]
pub struct PreparedSplits {
    pub indices: SplitIndices,
    pub stats: NormalizationStats,
    pub train: Vec<NormalizedRecord>,
    pub val: Vec<NormalizedRecord>,
    pub test: Vec<NormalizedRecord>,
    /// Outcomes without a positive training example.
    pub flagged_outcomes: Vec<usize>,
}

impl PreparedSplits {
    pub fn get(&self, split: Split) -> &[NormalizedRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn split_cohort(
    cohort: &[CohortRecord],
    fractions: [f64; 3],
    seed: u64,
    n_variables: usize,
) -> Result<PreparedSplits> {
    let indices = split_indices(cohort.len(), fractions, seed)?;
    if indices.train.is_empty() {
        return Err(invalid("training split is empty"));
    }
    let pick = |ix: &[usize]| ix.iter().map(|&i| cohort[i].clone()).collect::<Vec<_>>();
    let train_raw = pick(&indices.train);
    let stats = fit_stats(&train_raw, n_variables)?;
    let norm = |ix: &[usize]| ix.iter().map(|&i| apply_stats(&cohort[i], &stats)).collect::<Result<Vec<_>>>();
    let n_outcomes = train_raw[0].labels.len();
    let flagged_outcomes: Vec<usize> = (0..n_outcomes)
        .filter(|&o| train_raw.iter().all(|r| r.labels[o] == 0))
        .collect();
    for o in &flagged_outcomes {
        log::warn!("outcome {o} has no positive example in the training split");
    }
    Ok(PreparedSplits {
        train: norm(&indices.train)?,
        val: norm(&indices.val)?,
        test: norm(&indices.test)?,
        indices,
        stats,
        flagged_outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_of_all_records() {
        let s = split_indices(101, [0.7, 0.15, 0.15], 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (71, 15, 15));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert_eq!(split_indices(101, [0.7, 0.15, 0.15], 3).unwrap(), s);
        assert_ne!(split_indices(101, [0.7, 0.15, 0.15], 4).unwrap(), s);
    }

    #[test]
    fn everything_in_train() {
        let s = split_indices(10, [1.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(s.train.len(), 10);
        assert!(s.val.is_empty() && s.test.is_empty());
    }

    #[test]
    fn bad_fractions_rejected() {
        assert!(split_indices(10, [0.5, 0.2, 0.2], 0).is_err());
    }
}
