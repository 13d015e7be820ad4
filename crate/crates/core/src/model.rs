//! The full model: token embedding, time-series encoder, note projector,
//! fusion, contrast heads and per-outcome classification heads.

use medfuse_tensor::{ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cohort::NormalizedRecord;
use crate::encoders::{AttentionConfig, EncoderMode, NoteProjector, TimeSeriesEncoder, VariableEncoderBank};
use crate::error::{invalid, Result};
use crate::fusion::FusionModule;
use crate::nn::{xavier, Graph, Linear};
use crate::tokenizer::{tokenize_record, EmbedderDims, TokenEmbedder, TokenSequence, TokenizerConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub n_variables: usize,
    pub static_dim: usize,
    pub embed_dim: usize,
    /// Also the number of global tokens.
    pub n_outcomes: usize,
    pub d_model: usize,
    pub d_time: usize,
    pub d_fused: usize,
    pub d_contrast: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub window: usize,
    pub rel_clip: usize,
    pub max_len: usize,
    pub max_positions: usize,
    pub encoder_mode: EncoderMode,
}

impl ModelConfig {
    pub fn tokenizer(&self) -> TokenizerConfig {
        TokenizerConfig {
            n_global: self.n_outcomes,
            max_len: self.max_len,
            max_positions: self.max_positions,
            n_variables: self.n_variables,
        }
    }
}

/// One record prepared for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub seq: TokenSequence,
    pub statics: Vec<f64>,
    pub chunks: Vec<Vec<f64>>,
    /// The contrast target: the discharge embedding, possibly augmented.
    pub discharge: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ModelInput {
    pub fn new(record: &NormalizedRecord, cfg: &ModelConfig, use_augmented: bool) -> Result<Self> {
        let discharge = match (&record.augmented_discharge, use_augmented) {
            (Some(a), true) => a.clone(),
            (None, true) => {
                return Err(invalid(format!(
                    "record {} has no augmented discharge embedding",
                    record.patient_id
                )))
            }
            (_, false) => record.discharge_embedding.clone(),
        };
        Ok(Self {
            seq: tokenize_record(record, &cfg.tokenizer())?,
            statics: record.static_features.clone(),
            chunks: record.note_chunk_embeddings.clone(),
            discharge,
            labels: record.labels.clone(),
        })
    }
}

/// Which outputs a forward pass must produce.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Outputs {
    pub logits: bool,
    /// Fused projection and discharge projection.
    pub global_contrast: bool,
    /// Unimodal time and note projections.
    pub intermodal: bool,
    /// Classification heads read detached features.
    pub detach_heads: bool,
}

/// Per-record outputs, each a single row.
#[derive(Debug, Clone, Copy, Default)]
pub struct RecordOutputs {
    pub logits: Option<Var>,
    pub h_m: Option<Var>,
    pub h_d: Option<Var>,
    pub h_time: Option<Var>,
    pub h_note: Option<Var>,
}

impl RecordOutputs {
    pub fn vars(&self) -> [Option<Var>; 5] {
        [self.logits, self.h_m, self.h_d, self.h_time, self.h_note]
    }
}

#[derive(Debug, Clone)]
pub struct MultimodalModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub embedder: TokenEmbedder,
    pub encoder: TimeSeriesEncoder,
    pub notes: NoteProjector,
    pub fusion: FusionModule,
    pub discharge_proj: Linear,
    pub time_contrast: Linear,
    pub note_contrast: Linear,
    /// `n_outcomes x (d_model + d_fused)`; row `o` is outcome `o`'s head.
    pub head_weight: ParamId,
    /// `1 x n_outcomes`.
    pub head_bias: ParamId,
}

impl MultimodalModel {
    /// Initializes every parameter from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let values = VariableEncoderBank::new(s, &mut rng, cfg.encoder_mode, cfg.n_variables, cfg.d_model);
        let dims = EmbedderDims {
            d_model: cfg.d_model,
            d_time: cfg.d_time,
            n_variables: cfg.n_variables,
            n_global: cfg.n_outcomes,
            max_positions: cfg.max_positions,
            static_dim: cfg.static_dim,
        };
        let embedder = TokenEmbedder::new(s, &mut rng, dims, values)?;
        let att = AttentionConfig {
            window: cfg.window,
            n_heads: cfg.n_heads,
            n_layers: cfg.n_layers,
            rel_clip: cfg.rel_clip,
        };
        let encoder = TimeSeriesEncoder::new(s, &mut rng, att, cfg.d_model)?;
        let notes = NoteProjector::new(s, &mut rng, cfg.embed_dim, cfg.d_model);
        let fusion = FusionModule::new(s, &mut rng, cfg.d_model, cfg.d_fused, cfg.d_contrast);
        let discharge_proj = Linear::new(s, &mut rng, "contrast.discharge", cfg.embed_dim, cfg.d_contrast, true);
        let time_contrast = Linear::new(s, &mut rng, "contrast.time", cfg.d_model, cfg.d_contrast, true);
        let note_contrast = Linear::new(s, &mut rng, "contrast.note", cfg.d_model, cfg.d_contrast, true);
        let head_weight = s.insert(
            "heads.weight",
            xavier(&mut rng, cfg.n_outcomes, cfg.d_model + cfg.d_fused),
        );
        let head_bias = s.insert("heads.bias", Tensor::zeros(&[1, cfg.n_outcomes]));
        Ok(Self {
            cfg,
            params: store,
            embedder,
            encoder,
            notes,
            fusion,
            discharge_proj,
            time_contrast,
            note_contrast,
            head_weight,
            head_bias,
        })
    }

    /// Parameters of the three contrast projections and the fusion contrast
    /// head.
    pub fn contrast_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in [&self.discharge_proj, &self.time_contrast, &self.note_contrast, &self.fusion.contrast] {
            ids.push(l.weight);
            ids.extend(l.bias);
        }
        ids
    }

    fn unit_projection(&self, g: &mut Graph, proj: &Linear, x: Var) -> Result<Var> {
        let y = proj.forward(g, x)?;
        Ok(g.tape.l2_normalize_rows(y)?)
    }

    pub fn forward(&self, g: &mut Graph, input: &ModelInput, want: Outputs) -> Result<RecordOutputs> {
        let x = self.embedder.forward(g, &input.seq, &input.statics)?;
        let time = self.encoder.forward(g, x, &input.seq)?;
        let note = self.notes.forward(g, &input.chunks)?;
        let mut out = RecordOutputs::default();
        if want.intermodal {
            out.h_time = Some(self.unit_projection(g, &self.time_contrast, time.pooled)?);
            out.h_note = Some(self.unit_projection(g, &self.note_contrast, note.pooled)?);
        }
        if !(want.logits || want.global_contrast) {
            return Ok(out);
        }
        let fused = self.fusion.forward(g, &time, &note)?;
        if want.global_contrast {
            out.h_m = Some(fused.projection_m);
            let d = g.tape.constant(Tensor::row_vector(&input.discharge)?);
            out.h_d = Some(self.unit_projection(g, &self.discharge_proj, d)?);
        }
        if want.logits {
            let mut globals = time.global_outputs.ok_or_else(|| invalid("no global tokens"))?;
            let mut h = fused.h;
            if want.detach_heads {
                globals = g.tape.detach(globals);
                h = g.tape.detach(h);
            }
            let n = self.cfg.n_outcomes;
            let ones = g.tape.constant(Tensor::filled(&[n, 1], 1.0));
            let h_rows = g.tape.matmul(ones, h)?;
            let features = g.tape.concat_last(&[globals, h_rows])?;
            let w = g.param(self.head_weight);
            let prod = g.tape.mul(features, w)?;
            let z = g.tape.sum_axis(prod, 1)?;
            let z = g.tape.transpose(z)?;
            let b = g.param(self.head_bias);
            out.logits = Some(g.tape.add(z, b)?);
        }
        Ok(out)
    }
}
