//! The training loop, prediction and evaluation.
//!
//! A batch is differentiated in two stages. Every record gets its own tape
//! for the forward pass. The batch losses are then built on a small tape
//! whose leaves hold the stacked per-record outputs, and the gradients with
//! respect to those leaves are pushed back through each record's tape.
//! Record gradients are summed in batch order, so results do not depend on
//! how the per-record work is scheduled.

use std::collections::BTreeMap;

use medfuse_tensor::{Adam, Moments, ParamId, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{Checkpoint, RngState};
use super::config::{DataShape, Regime, TrainConfig};
use super::metrics::auroc;
use super::split::{split_cohort, PreparedSplits, Split};
use crate::cohort::{CohortRecord, CohortSummary, DescriptorAugmenter, NormalizedRecord};
use crate::error::{invalid, Error, Result};
use crate::model::{ModelInput, MultimodalModel, Outputs, RecordOutputs};
use crate::nn::Graph;
use crate::objectives::{alignment_loss, multilabel_ce, total_loss, LossReport};

/// RNG stream of the trainer's master generator.
const TRAIN_STREAM: u64 = 2;

/// Per-outcome test metrics of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub regime: Regime,
    pub seed: u64,
    pub n_records: usize,
    /// `None` for outcomes with a single class in the split.
    pub per_outcome: Vec<Option<f64>>,
    pub positives: Vec<usize>,
    /// Mean over outcomes with both classes present.
    pub mean_auroc: Option<f64>,
    /// Outcomes excluded from the mean.
    pub flagged: Vec<usize>,
}

impl EvalReport {
    pub fn from_scores(regime: Regime, seed: u64, scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Self {
        let n_out = labels.first().map_or(0, Vec::len);
        let mut per_outcome = Vec::with_capacity(n_out);
        let mut positives = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let s: Vec<f64> = scores.iter().map(|r| r[o]).collect();
            let y: Vec<u8> = labels.iter().map(|r| r[o]).collect();
            positives.push(y.iter().filter(|&&v| v == 1).count());
            per_outcome.push(auroc(&s, &y));
        }
        let valid: Vec<f64> = per_outcome.iter().flatten().copied().collect();
        let mean_auroc = (!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64);
        let flagged = (0..n_out).filter(|&o| per_outcome[o].is_none()).collect();
        Self {
            regime,
            seed,
            n_records: scores.len(),
            per_outcome,
            positives,
            mean_auroc,
            flagged,
        }
    }
}

impl EvalReport {
    /// Header plus one data row; absent AUROCs are empty fields.
    pub fn to_csv(&self) -> String {
        let n = self.per_outcome.len();
        let mut header = vec!["regime".to_string(), "seed".into(), "n_records".into(), "mean_auroc".into()];
        header.extend((0..n).map(|o| format!("auroc_{o}")));
        header.extend((0..n).map(|o| format!("positives_{o}")));
        let fmt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let mut row = vec![
            self.regime.to_string(),
            self.seed.to_string(),
            self.n_records.to_string(),
            fmt(self.mean_auroc),
        ];
        row.extend(self.per_outcome.iter().map(|&a| fmt(a)));
        row.extend(self.positives.iter().map(usize::to_string));
        format!("{}\n{}\n", header.join(","), row.join(","))
    }
}

/// One row per epoch.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,l_total,l_ce,l_alignment,l_md,l_dm,val_mean_auroc\n");
    for h in history {
        let l = &h.loss;
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            h.epoch,
            l.l_total,
            l.l_ce,
            l.l_alignment,
            l.l_md,
            l.l_dm,
            h.val_mean_auroc.map_or(String::new(), |v| format!("{v:.6}"))
        ));
    }
    out
}

/// Batch-averaged losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossReport,
    pub val_mean_auroc: Option<f64>,
}

/// Model inputs for each split.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub shape: DataShape,
    pub splits: PreparedSplits,
    pub train: Vec<ModelInput>,
    pub val: Vec<ModelInput>,
    pub test: Vec<ModelInput>,
}

impl PreparedData {
    pub fn get(&self, split: Split) -> &[ModelInput] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn data_shape(cohort: &[CohortRecord]) -> Result<DataShape> {
    let s = CohortSummary::of(cohort);
    if s.n_records == 0 {
        return Err(invalid("cohort is empty"));
    }
    Ok(DataShape {
        n_variables: s.n_variables.max(1),
        static_dim: s.static_dim,
        embed_dim: s.embed_dim,
        n_outcomes: s.n_outcomes,
    })
}

/// Splits, normalizes and tokenizes a cohort for `config`, augmenting the
/// discharge embeddings first when the regime contrasts against them.
pub fn prepare(config: &TrainConfig, cohort: &[CohortRecord]) -> Result<PreparedData> {
    let shape = data_shape(cohort)?;
    let augmented;
    let records = if config.regime.augmented() {
        let aug = DescriptorAugmenter::new(config.augment_lambda);
        augmented = cohort
            .iter()
            .map(|r| {
                let mut r = r.clone();
                aug.augment(&mut r);
                r
            })
            .collect::<Vec<_>>();
        &augmented[..]
    } else {
        cohort
    };
    let fractions = [config.train_frac, config.val_frac, config.test_frac];
    let splits = split_cohort(records, fractions, config.seed, shape.n_variables)?;
    let model_cfg = config.model_config(shape);
    let use_aug = config.regime.augmented();
    let inputs = |rs: &[NormalizedRecord]| {
        rs.par_iter()
            .map(|r| ModelInput::new(r, &model_cfg, use_aug))
            .collect::<Result<Vec<_>>>()
    };
    Ok(PreparedData {
        shape,
        train: inputs(&splits.train)?,
        val: inputs(&splits.val)?,
        test: inputs(&splits.test)?,
        splits,
    })
}

/// Everything needed to continue training bitwise-identically.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub shape: DataShape,
    pub model: MultimodalModel,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
}

fn stack_rows(tapes: &[(Tape, RecordOutputs)], pick: impl Fn(&RecordOutputs) -> Option<Var>) -> Result<Option<Tensor>> {
    let mut data = Vec::new();
    let mut cols = 0;
    for (tape, out) in tapes {
        match pick(out) {
            Some(v) => {
                let t = tape.value(v);
                cols = t.cols();
                data.extend_from_slice(t.data());
            }
            None => return Ok(None),
        }
    }
    Ok(Some(Tensor::new(vec![tapes.len(), cols], data)?))
}

impl TrainState {
    pub fn new(config: TrainConfig, shape: DataShape) -> Result<Self> {
        config.validate()?;
        let model = MultimodalModel::new(config.model_config(shape), config.seed)?;
        let adam = Adam::new(config.lr, config.weight_decay)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self {
            config,
            shape,
            model,
            adam,
            rng,
            epoch: 0,
        })
    }

    pub fn config_text(&self) -> String {
        format!("{}{}", self.config.to_text(), self.shape.to_text())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let store = &self.model.params;
        let params = store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        let mut optimizer = vec![("adam.step".to_string(), Tensor::scalar(self.adam.steps_taken() as f64))];
        for (id, m) in self.adam.state() {
            optimizer.push((format!("m.{}", store.name(*id)), m.first.clone()));
            optimizer.push((format!("v.{}", store.name(*id)), m.second.clone()));
        }
        Checkpoint {
            config_text: self.config_text(),
            epoch: self.epoch as u32,
            params,
            optimizer,
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (shape, text) = DataShape::split_from(&ckpt.config_text)?;
        let config = TrainConfig::parse(&text)?;
        let mut state = Self::new(config, shape)?;
        let store = &mut state.model.params;
        if ckpt.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                ckpt.params.len(),
                store.len()
            )));
        }
        for (name, t) in &ckpt.params {
            let id = store.id(name)?;
            store.set(id, t.clone())?;
        }
        let mut step = None;
        let mut moments: BTreeMap<ParamId, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
        for (name, t) in &ckpt.optimizer {
            if name == "adam.step" {
                step = Some(t.item() as u64);
            } else if let Some(p) = name.strip_prefix("m.") {
                moments.entry(store.id(p)?).or_default().0 = Some(t.clone());
            } else if let Some(p) = name.strip_prefix("v.") {
                moments.entry(store.id(p)?).or_default().1 = Some(t.clone());
            } else {
                return Err(Error::Checkpoint(format!("unknown optimizer entry {name}")));
            }
        }
        let moments = moments
            .into_iter()
            .map(|(id, pair)| match pair {
                (Some(first), Some(second)) => Ok((id, Moments { first, second })),
                _ => Err(Error::Checkpoint(format!("incomplete moments for {}", store.name(id)))),
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        let step = step.ok_or_else(|| Error::Checkpoint("missing adam.step".into()))?;
        state.adam.restore(step, moments);
        state.rng = ckpt.rng.restore();
        state.epoch = ckpt.epoch as usize;
        Ok(state)
    }

    /// One optimizer step on `batch`. `batch_seed` drives dropout.
    pub fn train_step(&mut self, batch: &[&ModelInput], batch_seed: u64, batch_index: usize) -> Result<LossReport> {
        let (grads, report) = self.batch_gradients(batch, batch_seed, batch_index)?;
        self.adam.step(&mut self.model.params, &grads)?;
        Ok(report)
    }

    /// Parameter gradients of the batch objective, summed over records in
    /// batch order. Parameters off every tape are absent.
    pub fn batch_gradients(
        &self,
        batch: &[&ModelInput],
        batch_seed: u64,
        batch_index: usize,
    ) -> Result<(BTreeMap<ParamId, Tensor>, LossReport)> {
        let k = batch.len();
        if k < 2 {
            return Err(invalid("a batch needs at least two records"));
        }
        let regime = self.config.regime;
        let want = regime.outputs();
        let weights = self.config.effective_weights()?;
        let model = &self.model;
        let dropout = self.config.dropout;

        let tapes = batch
            .par_iter()
            .enumerate()
            .map(|(i, input)| {
                let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
                rng.set_stream(i as u64);
                let mut g = Graph::new(Tape::new(), &model.params, rng, dropout);
                let out = model.forward(&mut g, input, want)?;
                Ok((g.tape, out))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut bt = Tape::new();
        let leaf = |pick: fn(&RecordOutputs) -> Option<Var>, bt: &mut Tape| -> Result<Option<Var>> {
            Ok(stack_rows(&tapes, pick)?.map(|t| bt.leaf(t)))
        };
        let logits = leaf(|o| o.logits, &mut bt)?;
        let h_m = leaf(|o| o.h_m, &mut bt)?;
        let h_d = leaf(|o| o.h_d, &mut bt)?;
        let h_time = leaf(|o| o.h_time, &mut bt)?;
        let h_note = leaf(|o| o.h_note, &mut bt)?;
        let leaves = [logits, h_m, h_d, h_time, h_note];

        let labels: Vec<u8> = batch.iter().flat_map(|r| r.labels.iter().copied()).collect();
        let ce = match logits {
            Some(z) => Some(multilabel_ce(&mut bt, z, &labels)?),
            None => None,
        };
        let (tau, mode) = (self.config.tau, self.config.denominator_mode);
        let alignment = match (h_m, h_d, h_time, h_note) {
            (Some(m), Some(d), _, _) => Some(alignment_loss(&mut bt, m, d, tau, mode)?),
            (_, _, Some(t), Some(n)) => Some(alignment_loss(&mut bt, t, n, tau, mode)?),
            _ => None,
        };
        let (total, report) = total_loss(&mut bt, alignment, ce, weights)?;
        let objective = match (regime.probe_heads(), ce) {
            (true, Some(ce)) => bt.add(total, ce)?,
            _ => total,
        };
        if !bt.value(objective).item().is_finite() || !report.l_total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                batch: batch_index,
            });
        }
        let batch_grads = bt.backward(objective)?;
        let leaf_grads: Vec<Option<Tensor>> = leaves
            .iter()
            .map(|l| l.and_then(|v| batch_grads.wrt(v).cloned()))
            .collect();

        let per_record = tapes
            .into_par_iter()
            .enumerate()
            .map(|(i, (mut tape, out))| {
                let mut seeds = Vec::new();
                for (var, grad) in out.vars().iter().zip(&leaf_grads) {
                    if let (Some(v), Some(gr)) = (var, grad) {
                        let row = Tensor::new(vec![1, gr.cols()], gr.row(i).to_vec())?;
                        seeds.push((*v, row));
                    }
                }
                Ok(tape.backward_seeded(&seeds)?.into_params())
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        for g in per_record {
            for (id, t) in g {
                match grads.get_mut(&id) {
                    Some(acc) => acc.add_assign(&t)?,
                    None => {
                        grads.insert(id, t);
                    }
                }
            }
        }
        Ok((grads, report))
    }

    /// One pass over `train` in a shuffled order. A trailing batch with a
    /// single record is skipped.
    pub fn run_epoch(&mut self, train: &[ModelInput]) -> Result<LossReport> {
        if train.is_empty() {
            return Err(invalid("training split is empty"));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = LossReport::default();
        let mut n = 0;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let seed = self.rng.random::<u64>();
            let batch: Vec<&ModelInput> = chunk.iter().map(|&i| &train[i]).collect();
            let r = self.train_step(&batch, seed, b)?;
            sum.l_md += r.l_md;
            sum.l_dm += r.l_dm;
            sum.l_alignment += r.l_alignment;
            sum.l_ce += r.l_ce;
            sum.l_total += r.l_total;
            n += 1;
        }
        self.epoch += 1;
        let n = n.max(1) as f64;
        Ok(LossReport {
            l_md: sum.l_md / n,
            l_dm: sum.l_dm / n,
            l_alignment: sum.l_alignment / n,
            l_ce: sum.l_ce / n,
            l_total: sum.l_total / n,
        })
    }

    pub fn evaluate(&self, inputs: &[ModelInput]) -> Result<EvalReport> {
        evaluate_model(&self.model, inputs, self.config.regime, self.config.seed)
    }
}

/// Outcome logits for each input, in eval mode.
pub fn predict(model: &MultimodalModel, inputs: &[ModelInput]) -> Result<Vec<Vec<f64>>> {
    let want = Outputs {
        logits: true,
        ..Default::default()
    };
    inputs
        .par_iter()
        .map(|input| {
            let mut g = Graph::new(Tape::inference(), &model.params, ChaCha8Rng::seed_from_u64(0), 0.0);
            let out = model.forward(&mut g, input, want)?;
            let z = out.logits.ok_or_else(|| invalid("no logits"))?;
            Ok(g.tape.value(z).data().to_vec())
        })
        .collect()
}

pub fn evaluate_model(model: &MultimodalModel, inputs: &[ModelInput], regime: Regime, seed: u64) -> Result<EvalReport> {
    if inputs.is_empty() {
        return Err(invalid("cannot evaluate on an empty split"));
    }
    let scores = predict(model, inputs)?;
    let labels: Vec<Vec<u8>> = inputs.iter().map(|i| i.labels.clone()).collect();
    Ok(EvalReport::from_scores(regime, seed, &scores, &labels))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State after the epoch with the best validation mean AUROC.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub test_report: Option<EvalReport>,
}

/// Trains from scratch, keeping the best-validation checkpoint. Without a
/// validation split the last epoch is kept.
pub fn train(config: &TrainConfig, cohort: &[CohortRecord]) -> Result<TrainOutcome> {
    let data = prepare(config, cohort)?;
    train_prepared(config, &data)
}

pub fn train_prepared(config: &TrainConfig, data: &PreparedData) -> Result<TrainOutcome> {
    let mut state = TrainState::new(config.clone(), data.shape)?;
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    for _ in 0..config.epochs {
        let loss = state.run_epoch(&data.train)?;
        let val = if data.val.is_empty() {
            None
        } else {
            state.evaluate(&data.val)?.mean_auroc
        };
        log::info!(
            "{} epoch {}: loss {:.5} (ce {:.5}, align {:.5}), val auroc {}",
            config.regime,
            state.epoch,
            loss.l_total,
            loss.l_ce,
            loss.l_alignment,
            val.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
        history.push(EpochRecord {
            epoch: state.epoch,
            loss,
            val_mean_auroc: val,
        });
        let score = val.unwrap_or(f64::NEG_INFINITY);
        let improved = match &best {
            None => true,
            Some((b, _, _)) => score > *b || (data.val.is_empty() && score >= *b),
        };
        if improved {
            best = Some((score, state.epoch, state.checkpoint()));
        }
    }
    let (_, best_epoch, best) = best.ok_or_else(|| invalid("no epochs were run"))?;
    let test_report = if data.test.is_empty() {
        None
    } else {
        let model = TrainState::from_checkpoint(&best)?.model;
        Some(evaluate_model(&model, &data.test, config.regime, config.seed)?)
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
        test_report,
    })
}

/// Rebuilds the checkpoint's model, re-derives its splits from the stored
/// config, and evaluates on `split`.
pub fn evaluate(ckpt: &Checkpoint, cohort: &[CohortRecord], split: Split) -> Result<EvalReport> {
    let state = TrainState::from_checkpoint(ckpt)?;
    let shape = data_shape(cohort)?;
    if shape.n_outcomes != state.shape.n_outcomes || shape.embed_dim != state.shape.embed_dim {
        return Err(invalid("cohort shape does not match the checkpoint"));
    }
    let cfg = &state.config;
    let fractions = [cfg.train_frac, cfg.val_frac, cfg.test_frac];
    let splits = split_cohort(cohort, fractions, cfg.seed, state.shape.n_variables)?;
    let model_cfg = cfg.model_config(state.shape);
    let inputs = splits
        .get(split)
        .par_iter()
        .map(|r| ModelInput::new(r, &model_cfg, false))
        .collect::<Result<Vec<_>>>()?;
    evaluate_model(&state.model, &inputs, cfg.regime, cfg.seed)
}
