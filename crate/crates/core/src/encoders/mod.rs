//! Value encoders, the time-series transformer and the note projector.

mod attention;

use std::sync::Arc;

use medfuse_tensor::{ParamId, ParamStore, Tensor, Var};
use rand::Rng;

pub use attention::{windowed_attention, AttentionProbs, WindowPattern};

use crate::error::{invalid, Error, Result};
use crate::nn::{Graph, LayerNorm, Linear};
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderMode {
    /// One affine map per variable.
    Linear,
    /// One affine map for all variables.
    Shared,
}

impl EncoderMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Shared => "shared",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "shared" | "shared-linear" => Ok(Self::Shared),
            other => Err(Error::Config(format!("unknown encoder mode {other:?}"))),
        }
    }
}

/// Affine maps from a scalar measurement to a `d`-vector.
#[derive(Debug, Clone)]
pub struct VariableEncoderBank {
    pub mode: EncoderMode,
    pub n_variables: usize,
    pub d_model: usize,
    /// `n_encoders x d`.
    pub weight: ParamId,
    /// `n_encoders x d`.
    pub bias: ParamId,
}

impl VariableEncoderBank {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        mode: EncoderMode,
        n_variables: usize,
        d_model: usize,
    ) -> Self {
        let n = match mode {
            EncoderMode::Linear => n_variables,
            EncoderMode::Shared => 1,
        };
        Self {
            mode,
            n_variables,
            d_model,
            weight: store.insert("values.weight", Tensor::from_fn(&[n, d_model], |_| rng.random_range(-1.0..1.0))),
            bias: store.insert("values.bias", Tensor::zeros(&[n, d_model])),
        }
    }

    pub fn n_encoders(&self) -> usize {
        match self.mode {
            EncoderMode::Linear => self.n_variables,
            EncoderMode::Shared => 1,
        }
    }

    fn rows(&self, ids: &[usize]) -> Result<Vec<usize>> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.n_variables) {
            return Err(Error::UnknownVariable {
                id,
                n_variables: self.n_variables,
            });
        }
        Ok(match self.mode {
            EncoderMode::Linear => ids.to_vec(),
            EncoderMode::Shared => vec![0; ids.len()],
        })
    }

    /// Encodes `values[i]` with the encoder of `ids[i]`; returns `n x d`.
    pub fn encode_many(&self, g: &mut Graph, ids: &[usize], values: &[f64]) -> Result<Var> {
        if ids.len() != values.len() {
            return Err(invalid("variable ids and values differ in length"));
        }
        let rows = self.rows(ids)?;
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let w = g.tape.gather_rows(w, &rows)?;
        let b = g.tape.gather_rows(b, &rows)?;
        let x = g.tape.constant(Tensor::column(values)?);
        let scaled = g.tape.mul(w, x)?;
        Ok(g.tape.add(scaled, b)?)
    }

    /// Plain-value encoding of one measurement.
    pub fn encode_value(&self, store: &ParamStore, value: f64, variable_id: usize) -> Result<Vec<f64>> {
        let row = self.rows(&[variable_id])?[0];
        let w = store.get(self.weight).row(row);
        let b = store.get(self.bias).row(row);
        Ok(w.iter().zip(b).map(|(w, b)| w * value + b).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    /// One-sided window over sorted token positions.
    pub window: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub rel_clip: usize,
}

/// Encoder output. `global_outputs` is present on the time-series side only.
#[derive(Debug, Clone, Copy)]
pub struct EncodedModality {
    /// `L x d`.
    pub sequence: Var,
    /// `n_global x d`.
    pub global_outputs: Option<Var>,
    /// `1 x d` mean over the sequence.
    pub pooled: Var,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm_attn: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    rel: ParamId,
    norm_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Pre-norm transformer over the token sequence with windowed attention.
#[derive(Debug, Clone)]
pub struct TimeSeriesEncoder {
    pub cfg: AttentionConfig,
    pub d_model: usize,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
}

impl TimeSeriesEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: AttentionConfig, d_model: usize) -> Result<Self> {
        if cfg.window == 0 || cfg.n_layers == 0 || cfg.rel_clip == 0 {
            return Err(Error::Config("window, layer count and relative clip must be positive".into()));
        }
        if cfg.n_heads == 0 || d_model % cfg.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {} heads",
                cfg.n_heads
            )));
        }
        let d_head = d_model / cfg.n_heads;
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let n = |s: &str| format!("encoder.{l}.{s}");
                EncoderLayer {
                    norm_attn: LayerNorm::new(store, &n("norm_attn"), d_model),
                    wq: Linear::new(store, rng, &n("wq"), d_model, d_model, true),
                    wk: Linear::new(store, rng, &n("wk"), d_model, d_model, true),
                    wv: Linear::new(store, rng, &n("wv"), d_model, d_model, true),
                    wo: Linear::new(store, rng, &n("wo"), d_model, d_model, true),
                    rel: store.insert(
                        n("relative"),
                        Tensor::from_fn(&[2 * cfg.rel_clip + 1, d_head], |_| rng.random_range(-0.1..0.1)),
                    ),
                    norm_ff: LayerNorm::new(store, &n("norm_ff"), d_model),
                    ff_in: Linear::new(store, rng, &n("ff_in"), d_model, 4 * d_model, true),
                    ff_out: Linear::new(store, rng, &n("ff_out"), 4 * d_model, d_model, true),
                }
            })
            .collect();
        Ok(Self {
            cfg,
            d_model,
            layers,
            final_norm: LayerNorm::new(store, "encoder.final_norm", d_model),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, seq: &TokenSequence) -> Result<EncodedModality> {
        let shape = g.tape.shape(x).to_vec();
        if shape != [seq.len(), self.d_model] {
            return Err(invalid(format!(
                "embeddings have shape {shape:?}, expected [{}, {}]",
                seq.len(),
                self.d_model
            )));
        }
        let pattern = Arc::new(WindowPattern::new(seq, self.cfg.window, self.cfg.rel_clip)?);
        let mut h = x;
        for layer in &self.layers {
            let a = layer.norm_attn.forward(g, h)?;
            let q = layer.wq.forward(g, a)?;
            let k = layer.wk.forward(g, a)?;
            let v = layer.wv.forward(g, a)?;
            let rel = g.param(layer.rel);
            let (att, _) = windowed_attention(&mut g.tape, q, k, v, rel, Arc::clone(&pattern), self.cfg.n_heads)?;
            let att = layer.wo.forward(g, att)?;
            let att = g.dropout(att)?;
            h = g.tape.add(h, att)?;

            let f = layer.norm_ff.forward(g, h)?;
            let f = layer.ff_in.forward(g, f)?;
            let f = g.tape.relu(f);
            let f = layer.ff_out.forward(g, f)?;
            let f = g.dropout(f)?;
            h = g.tape.add(h, f)?;
        }
        let sequence = self.final_norm.forward(g, h)?;
        let global_outputs = match seq.n_global {
            0 => None,
            n => Some(g.tape.slice_rows(sequence, 0, n)?),
        };
        let pooled = g.tape.mean_axis(sequence, 0)?;
        Ok(EncodedModality {
            sequence,
            global_outputs,
            pooled,
        })
    }
}

/// Linear projection of note-chunk embeddings into the model width.
#[derive(Debug, Clone)]
pub struct NoteProjector {
    pub proj: Linear,
}

impl NoteProjector {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, embed_dim: usize, d_model: usize) -> Self {
        Self {
            proj: Linear::new(store, rng, "notes.proj", embed_dim, d_model, true),
        }
    }

    /// Projects `m x e` chunks to `m x d`; `pooled` is the mean projection,
    /// which equals the projection of the mean chunk.
    pub fn forward(&self, g: &mut Graph, chunks: &[Vec<f64>]) -> Result<EncodedModality> {
        if chunks.is_empty() {
            return Err(invalid("a record needs at least one note chunk"));
        }
        if let Some(c) = chunks.iter().find(|c| c.len() != self.proj.in_dim) {
            return Err(invalid(format!(
                "note chunk dimension {} disagrees with projector input {}",
                c.len(),
                self.proj.in_dim
            )));
        }
        let x = g.tape.constant(Tensor::from_rows(chunks)?);
        let sequence = self.proj.forward(g, x)?;
        let pooled = g.tape.mean_axis(sequence, 0)?;
        Ok(EncodedModality {
            sequence,
            global_outputs: None,
            pooled,
        })
    }
}
