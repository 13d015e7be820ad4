//! Cross-attention enrichment of each modality by the other, followed by
//! pooling, concatenation and projection to the fused representation.

use medfuse_tensor::{ParamStore, Var};
use rand::Rng;

use crate::encoders::EncodedModality;
use crate::error::{invalid, Result};
use crate::nn::{Graph, Linear};

/// Single-head cross-attention: queries from the target, keys and values
/// from the source. The projections carry no bias.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub d_k: usize,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_model: usize, d_k: usize) -> Self {
        Self {
            wq: Linear::new(store, rng, &format!("{name}.wq"), d_model, d_k, false),
            wk: Linear::new(store, rng, &format!("{name}.wk"), d_model, d_k, false),
            wv: Linear::new(store, rng, &format!("{name}.wv"), d_model, d_model, false),
            d_k,
        }
    }

    /// Returns `(softmax(Q Kᵀ / sqrt(d_k)) V, weights)` with the weights
    /// `L_target x L_source`.
    pub fn forward(&self, g: &mut Graph, target: Var, source: Var) -> Result<(Var, Var)> {
        if g.tape.shape(source).first() == Some(&0) || g.tape.shape(source).len() != 2 {
            return Err(invalid("cross-attention source must be a non-empty sequence"));
        }
        let q = self.wq.forward(g, target)?;
        let k = self.wk.forward(g, source)?;
        let v = self.wv.forward(g, source)?;
        let kt = g.tape.transpose(k)?;
        let s = g.tape.matmul(q, kt)?;
        let s = g.tape.scale(s, 1.0 / (self.d_k as f64).sqrt());
        let w = g.tape.softmax(s)?;
        Ok((g.tape.matmul(w, v)?, w))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusedRepresentation {
    /// `1 x d_f`.
    pub h: Var,
    /// `L_time x d`.
    pub enriched_time: Var,
    /// `L_note x d`.
    pub enriched_note: Var,
    /// `1 x d_c`, unit norm.
    pub projection_m: Var,
}

#[derive(Debug, Clone)]
pub struct FusionModule {
    pub time_from_note: CrossAttention,
    pub note_from_time: CrossAttention,
    pub project: Linear,
    pub contrast: Linear,
}

impl FusionModule {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        d_model: usize,
        d_fused: usize,
        d_contrast: usize,
    ) -> Self {
        Self {
            time_from_note: CrossAttention::new(store, rng, "fusion.time_from_note", d_model, d_model),
            note_from_time: CrossAttention::new(store, rng, "fusion.note_from_time", d_model, d_model),
            project: Linear::new(store, rng, "fusion.project", 2 * d_model, d_fused, true),
            contrast: Linear::new(store, rng, "fusion.contrast", d_fused, d_contrast, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, time: &EncodedModality, note: &EncodedModality) -> Result<FusedRepresentation> {
        let (enriched_time, _) = self.time_from_note.forward(g, time.sequence, note.sequence)?;
        let (enriched_note, _) = self.note_from_time.forward(g, note.sequence, time.sequence)?;
        let pt = g.tape.mean_axis(enriched_time, 0)?;
        let pn = g.tape.mean_axis(enriched_note, 0)?;
        let cat = g.tape.concat_last(&[pt, pn])?;
        let h = self.project.forward(g, cat)?;
        let m = self.contrast.forward(g, h)?;
        let projection_m = g.tape.l2_normalize_rows(m)?;
        Ok(FusedRepresentation {
            h,
            enriched_time,
            enriched_note,
            projection_m,
        })
    }
}
