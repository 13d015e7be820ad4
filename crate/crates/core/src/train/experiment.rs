//! Regime comparisons over several seeds.

use std::fmt::Write as _;

use super::config::{Regime, TrainConfig};
use super::trainer::{prepare, train_prepared, EvalReport};
use crate::cohort::CohortRecord;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub regime: Regime,
    pub seed: u64,
    pub best_epoch: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeSummary {
    pub regime: Regime,
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std: f64,
    pub n_seeds: usize,
}

/// `mean(a) - mean(b)` for one pair of regimes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub a: Regime,
    pub b: Regime,
    pub difference: f64,
}

impl Verdict {
    pub fn symbol(&self) -> &'static str {
        if self.difference > 0.0 {
            ">"
        } else if self.difference < 0.0 {
            "<"
        } else {
            "="
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ExperimentRow>,
    pub summaries: Vec<RegimeSummary>,
    pub verdicts: Vec<Verdict>,
}

impl ExperimentReport {
    pub fn summary(&self, regime: Regime) -> Option<&RegimeSummary> {
        self.summaries.iter().find(|s| s.regime == regime)
    }

    pub fn mean(&self, regime: Regime) -> Option<f64> {
        self.summary(regime).map(|s| s.mean)
    }

    /// One row per (regime, seed) followed by one aggregate row per regime.
    pub fn to_csv(&self) -> String {
        let n_out = self.rows.first().map_or(0, |r| r.report.per_outcome.len());
        let mut out = String::from("kind,regime,seed,best_epoch,mean_auroc,std_auroc");
        for o in 0..n_out {
            let _ = write!(out, ",auroc_{o}");
        }
        out.push('\n');
        let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        for r in &self.rows {
            let _ = write!(
                out,
                "run,{},{},{},{},",
                r.regime,
                r.seed,
                r.best_epoch,
                fmt(r.report.mean_auroc)
            );
            for a in &r.report.per_outcome {
                let _ = write!(out, ",{}", fmt(*a));
            }
            out.push('\n');
        }
        for s in &self.summaries {
            let _ = write!(out, "mean,{},,,{:.6},{:.6}", s.regime, s.mean, s.std);
            out.push_str(&",".repeat(n_out));
            out.push('\n');
        }
        out
    }

    pub fn verdicts_csv(&self) -> String {
        let mut out = String::from("regime_a,regime_b,difference,verdict\n");
        for v in &self.verdicts {
            let _ = writeln!(out, "{},{},{:.6},{}", v.a, v.b, v.difference, v.symbol());
        }
        out
    }
}

/// Trains and test-evaluates every regime with seeds `base.seed ..
/// base.seed + n_seeds`. A given seed yields the same split and the same
/// initialization for every regime.
pub fn run_experiment(
    base: &TrainConfig,
    regimes: &[Regime],
    n_seeds: usize,
    cohort: &[CohortRecord],
) -> Result<ExperimentReport> {
    if regimes.is_empty() || n_seeds == 0 {
        return Err(invalid("an experiment needs at least one regime and one seed"));
    }
    let mut rows = Vec::new();
    for &regime in regimes {
        for s in 0..n_seeds as u64 {
            let cfg = TrainConfig {
                regime,
                seed: base.seed + s,
                ..base.clone()
            };
            let data = prepare(&cfg, cohort)?;
            let outcome = train_prepared(&cfg, &data)?;
            let report = outcome
                .test_report
                .ok_or_else(|| invalid("experiment needs a non-empty test split"))?;
            log::info!("{regime} seed {}: test mean auroc {:?}", cfg.seed, report.mean_auroc);
            rows.push(ExperimentRow {
                regime,
                seed: cfg.seed,
                best_epoch: outcome.best_epoch,
                report,
            });
        }
    }
    let summaries: Vec<RegimeSummary> = regimes
        .iter()
        .map(|&regime| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.regime == regime)
                .filter_map(|r| r.report.mean_auroc)
                .collect();
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n.max(1) as f64;
            let std = if n > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            RegimeSummary {
                regime,
                mean,
                std,
                n_seeds: n,
            }
        })
        .collect();
    let mut verdicts = Vec::new();
    for (i, a) in summaries.iter().enumerate() {
        for b in &summaries[i + 1..] {
            verdicts.push(Verdict {
                a: a.regime,
                b: b.regime,
                difference: a.mean - b.mean,
            });
        }
    }
    Ok(ExperimentReport {
        rows,
        summaries,
        verdicts,
    })
}
