//! Dynamic tokenization of irregular event streams.
//!
//! Every event becomes one token. Tokens recorded at the same raw timestamp
//! share an absolute positional index, and one global token per outcome is
//! prepended to the sequence.

use std::cmp::Ordering;

use medfuse_tensor::{ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::cohort::{NormalizedEvent, NormalizedRecord};
use crate::encoders::VariableEncoderBank;
use crate::error::{invalid, Error, Result};
use crate::nn::{embedding_init, Graph, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenizerConfig {
    pub n_global: usize,
    /// Maximum sequence length, global tokens included.
    pub max_len: usize,
    /// Rows of the absolute-position table.
    pub max_positions: usize,
    /// Also the sentinel variable id of global tokens.
    pub n_variables: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub n_global: usize,
    pub variable_ids: Vec<usize>,
    pub values: Vec<f64>,
    pub times: Vec<f64>,
    pub raw_times: Vec<f64>,
    pub abs_pos: Vec<usize>,
    pub attention_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.variable_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variable_ids.is_empty()
    }

    pub fn n_real(&self) -> usize {
        self.len() - self.n_global
    }

    /// The events behind the real tokens, in token order.
    pub fn events(&self) -> Vec<NormalizedEvent> {
        (self.n_global..self.len())
            .map(|i| NormalizedEvent {
                variable_id: self.variable_ids[i],
                raw_timestamp: self.raw_times[i],
                time: self.times[i],
                value: self.values[i],
            })
            .collect()
    }
}

/// Total order used to place events recorded at the same instant.
fn canonical(a: &NormalizedEvent, b: &NormalizedEvent) -> Ordering {
    a.raw_timestamp
        .total_cmp(&b.raw_timestamp)
        .then(a.variable_id.cmp(&b.variable_id))
        .then(a.value.total_cmp(&b.value))
}

/// Builds the token sequence for one record, keeping the latest events when
/// the record is longer than the configured maximum.
pub fn tokenize(events: &[NormalizedEvent], cfg: &TokenizerConfig) -> Result<TokenSequence> {
    if cfg.max_len < cfg.n_global {
        return Err(invalid(format!(
            "max_len {} cannot hold {} global tokens",
            cfg.max_len, cfg.n_global
        )));
    }
    let mut sorted = events.to_vec();
    sorted.sort_by(canonical);
    let keep = cfg.max_len - cfg.n_global;
    let kept = &sorted[sorted.len().saturating_sub(keep)..];

    let g = cfg.n_global;
    let n = g + kept.len();
    let mut seq = TokenSequence {
        n_global: g,
        variable_ids: vec![cfg.n_variables; g],
        values: vec![0.0; g],
        times: vec![0.0; g],
        raw_times: vec![0.0; g],
        abs_pos: vec![0; g],
        attention_mask: vec![true; n],
    };
    let mut pos = 0;
    for (k, e) in kept.iter().enumerate() {
        if e.variable_id >= cfg.n_variables {
            return Err(Error::UnknownVariable {
                id: e.variable_id,
                n_variables: cfg.n_variables,
            });
        }
        if k > 0 && e.raw_timestamp != kept[k - 1].raw_timestamp {
            pos += 1;
        }
        seq.variable_ids.push(e.variable_id);
        seq.values.push(e.value);
        seq.times.push(e.time);
        seq.raw_times.push(e.raw_timestamp);
        seq.abs_pos.push(pos);
    }
    if !kept.is_empty() && pos >= cfg.max_positions {
        return Err(Error::PositionOverflow {
            needed: pos + 1,
            limit: cfg.max_positions,
        });
    }
    Ok(seq)
}

/// Tokenizes a normalized record.
pub fn tokenize_record(record: &NormalizedRecord, cfg: &TokenizerConfig) -> Result<TokenSequence> {
    tokenize(&record.events, cfg)
}

/// Relative-position bucket `clip(pos_j - pos_i, -k, k) + k`, in `[0, 2k]`.
pub fn relative_bucket(pos_i: usize, pos_j: usize, k: usize) -> usize {
    let off = pos_j as i64 - pos_i as i64;
    (off.clamp(-(k as i64), k as i64) + k as i64) as usize
}

/// Plain-value Time2Vec parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Time2VecParams {
    pub w_np: f64,
    pub b_np: f64,
    pub w_p: Vec<f64>,
    pub b_p: Vec<f64>,
}

impl Time2VecParams {
    pub fn dim(&self) -> usize {
        self.w_p.len() + 1
    }

    /// `[w_np t + b_np, sin(w_p[j] t + b_p[j]) ...]`.
    pub fn evaluate(&self, t: f64) -> Vec<f64> {
        std::iter::once(self.w_np * t + self.b_np)
            .chain(self.w_p.iter().zip(&self.b_p).map(|(w, b)| (w * t + b).sin()))
            .collect()
    }
}

/// Time2Vec with learnable parameters on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Time2Vec {
    pub w_np: ParamId,
    pub b_np: ParamId,
    pub w_p: ParamId,
    pub b_p: ParamId,
    pub dim: usize,
}

impl Time2Vec {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!("time2vec dimension {dim} must be at least 2")));
        }
        let p = dim - 1;
        Ok(Self {
            w_np: store.insert(format!("{name}.w_np"), Tensor::from_fn(&[1, 1], |_| rng.random_range(-1.0..1.0))),
            b_np: store.insert(format!("{name}.b_np"), Tensor::zeros(&[1, 1])),
            w_p: store.insert(format!("{name}.w_p"), Tensor::from_fn(&[1, p], |_| rng.random_range(-1.0..1.0))),
            b_p: store.insert(format!("{name}.b_p"), Tensor::from_fn(&[1, p], |_| rng.random_range(-1.0..1.0))),
            dim,
        })
    }

    pub fn params(&self, store: &ParamStore) -> Time2VecParams {
        Time2VecParams {
            w_np: store.get(self.w_np).item(),
            b_np: store.get(self.b_np).item(),
            w_p: store.get(self.w_p).data().to_vec(),
            b_p: store.get(self.b_p).data().to_vec(),
        }
    }

    /// Maps an `n x 1` column of times to `n x dim`.
    pub fn forward(&self, g: &mut Graph, t: Var) -> Result<Var> {
        let (w_np, b_np) = (g.param(self.w_np), g.param(self.b_np));
        let (w_p, b_p) = (g.param(self.w_p), g.param(self.b_p));
        let lin = g.tape.matmul(t, w_np)?;
        let lin = g.tape.add(lin, b_np)?;
        let per = g.tape.matmul(t, w_p)?;
        let per = g.tape.add(per, b_p)?;
        let per = g.tape.sin(per);
        Ok(g.tape.concat_last(&[lin, per])?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedderDims {
    pub d_model: usize,
    pub d_time: usize,
    pub n_variables: usize,
    pub n_global: usize,
    pub max_positions: usize,
    pub static_dim: usize,
}

/// Sums the per-token embedding ingredients.
///
/// Real token: value encoding + variable embedding + position embedding +
/// projected Time2Vec + projected statics. Global token: its own embedding +
/// sentinel variable embedding + projected statics.
#[derive(Debug, Clone)]
pub struct TokenEmbedder {
    pub dims: EmbedderDims,
    pub values: VariableEncoderBank,
    pub variable_table: ParamId,
    pub position_table: ParamId,
    pub global_table: ParamId,
    pub time2vec: Time2Vec,
    pub time_proj: Linear,
    pub static_proj: Option<Linear>,
}

impl TokenEmbedder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        dims: EmbedderDims,
        values: VariableEncoderBank,
    ) -> Result<Self> {
        let d = dims.d_model;
        if dims.n_global == 0 {
            return Err(Error::Config("at least one global token is required".into()));
        }
        Ok(Self {
            dims,
            values,
            variable_table: store.insert("embed.variable", embedding_init(rng, dims.n_variables + 1, d)),
            position_table: store.insert("embed.position", embedding_init(rng, dims.max_positions, d)),
            global_table: store.insert("embed.global", embedding_init(rng, dims.n_global, d)),
            time2vec: Time2Vec::new(store, rng, "embed.time2vec", dims.d_time)?,
            time_proj: Linear::new(store, rng, "embed.time_proj", dims.d_time, d, false),
            static_proj: (dims.static_dim > 0)
                .then(|| Linear::new(store, rng, "embed.static_proj", dims.static_dim, d, true)),
        })
    }

    /// Returns the `L x d` embedding matrix, global tokens first.
    pub fn forward(&self, g: &mut Graph, seq: &TokenSequence, statics: &[f64]) -> Result<Var> {
        if seq.n_global != self.dims.n_global {
            return Err(invalid(format!(
                "sequence has {} global tokens, embedder expects {}",
                seq.n_global, self.dims.n_global
            )));
        }
        if statics.len() != self.dims.static_dim {
            return Err(invalid(format!(
                "{} static features, embedder expects {}",
                statics.len(),
                self.dims.static_dim
            )));
        }
        let ng = seq.n_global;
        let var_table = g.param(self.variable_table);
        let sentinel = g.tape.gather_rows(var_table, &[self.dims.n_variables])?;
        let globals = g.param(self.global_table);
        let globals = g.tape.add(globals, sentinel)?;

        let mut x = if seq.n_real() > 0 {
            let ids = &seq.variable_ids[ng..];
            let values = self.values.encode_many(g, ids, &seq.values[ng..])?;
            let var_emb = g.tape.gather_rows(var_table, ids)?;
            let pos_table = g.param(self.position_table);
            if let Some(&p) = seq.abs_pos[ng..].iter().find(|&&p| p >= self.dims.max_positions) {
                return Err(Error::PositionOverflow {
                    needed: p + 1,
                    limit: self.dims.max_positions,
                });
            }
            let pos_emb = g.tape.gather_rows(pos_table, &seq.abs_pos[ng..])?;
            let t = g.tape.constant(Tensor::column(&seq.times[ng..])?);
            let t2v = self.time2vec.forward(g, t)?;
            let time_emb = self.time_proj.forward(g, t2v)?;
            let real = g.tape.add(values, var_emb)?;
            let real = g.tape.add(real, pos_emb)?;
            let real = g.tape.add(real, time_emb)?;
            g.tape.concat_rows(&[globals, real])?
        } else {
            globals
        };
        if let Some(proj) = &self.static_proj {
            let s = g.tape.constant(Tensor::row_vector(statics)?);
            let s = proj.forward(g, s)?;
            x = g.tape.add(x, s)?;
        }
        g.dropout(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: f64, v: usize) -> NormalizedEvent {
        NormalizedEvent {
            variable_id: v,
            raw_timestamp: t,
            time: t,
            value: v as f64,
        }
    }

    fn cfg(n_global: usize) -> TokenizerConfig {
        TokenizerConfig {
            n_global,
            max_len: 512,
            max_positions: 512,
            n_variables: 4,
        }
    }

    #[test]
    fn shared_timestamps_share_position() {
        let s = tokenize(&[ev(10.0, 0), ev(10.0, 1), ev(20.0, 2)], &cfg(0)).unwrap();
        assert_eq!(s.abs_pos, vec![0, 0, 1]);
        let s = tokenize(&[ev(1.0, 0), ev(2.0, 1), ev(2.0, 2), ev(5.0, 0)], &cfg(0)).unwrap();
        assert_eq!(s.abs_pos, vec![0, 1, 1, 2]);
    }

    #[test]
    fn empty_record_gives_only_globals() {
        let s = tokenize(&[], &cfg(9)).unwrap();
        assert_eq!(s.len(), 9);
        assert!(s.variable_ids.iter().all(|&v| v == 4));
        assert!(s.values.iter().chain(&s.times).all(|&x| x == 0.0));
    }

    #[test]
    fn truncation_keeps_latest() {
        let events: Vec<_> = (0..20).map(|i| ev(i as f64, i % 4)).collect();
        let c = TokenizerConfig {
            max_len: 8,
            ..cfg(3)
        };
        let s = tokenize(&events, &c).unwrap();
        assert_eq!(s.len(), 8);
        assert_eq!(s.raw_times[3..], [15.0, 16.0, 17.0, 18.0, 19.0]);
        assert_eq!(s.abs_pos[3..], [0, 1, 2, 3, 4]);
    }

    #[test]
    fn position_overflow_reports_limit() {
        let events: Vec<_> = (0..10).map(|i| ev(i as f64, 0)).collect();
        let c = TokenizerConfig {
            max_positions: 4,
            ..cfg(1)
        };
        assert!(matches!(
            tokenize(&events, &c),
            Err(Error::PositionOverflow { needed: 10, limit: 4 })
        ));
    }

    #[test]
    fn buckets_clip() {
        let k = 2;
        let got: Vec<usize> = (-3i64..=3).map(|o| relative_bucket(5, (5 + o) as usize, k)).collect();
        assert_eq!(got, vec![0, 0, 1, 2, 3, 4, 4]);
        assert_eq!(relative_bucket(7, 7, 4), 4);
        assert_eq!(relative_bucket(0, 9, 4), 8);
    }

    #[test]
    fn time2vec_formula() {
        let p = Time2VecParams {
            w_np: 2.0,
            b_np: 1.0,
            w_p: vec![0.5, 3.0],
            b_p: vec![0.1, -0.2],
        };
        let out = p.evaluate(3.0);
        assert_eq!(out[0], 7.0);
        assert_eq!(out[1], (1.5f64 + 0.1).sin());
        let zero = Time2VecParams {
            w_np: 0.0,
            b_np: 0.0,
            w_p: vec![0.0; 3],
            b_p: vec![0.0; 3],
        };
        assert!(zero.evaluate(42.0).iter().all(|&x| x == 0.0));
        let period = 2.0 * std::f64::consts::PI / p.w_p[1];
        let (a, b) = (p.evaluate(0.7), p.evaluate(0.7 + period));
        assert!((a[2] - b[2]).abs() < 1e-12);
    }
}
