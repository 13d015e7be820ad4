//! Sliding-window self-attention with global tokens and relative-position
//! terms.
//!
//! A real token sees the real tokens within `window` positions of itself in
//! sorted order plus every global token. A global token sees every token.
//! Scores follow `q_i . (k_j + r_b) / sqrt(d_head)` where `r_b` is the row of
//! the relative-position table for the clipped offset between the two
//! tokens' absolute positions. Pairs involving a global token use the centre
//! bucket.

use std::sync::Arc;

use medfuse_tensor::{CustomOp, Tape, Tensor, TensorError, Var};

use crate::error::{invalid, Error, Result};
use crate::tokenizer::{relative_bucket, TokenSequence};

/// Which keys each query may attend to.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPattern {
    pub n_global: usize,
    pub window: usize,
    pub rel_clip: usize,
    pub abs_pos: Vec<usize>,
    /// `false` marks padding; padded keys are never attended to.
    pub key_mask: Vec<bool>,
}

impl WindowPattern {
    pub fn new(seq: &TokenSequence, window: usize, rel_clip: usize) -> Result<Self> {
        Self::from_parts(seq.n_global, window, rel_clip, seq.abs_pos.clone(), seq.attention_mask.clone())
    }

    pub fn from_parts(
        n_global: usize,
        window: usize,
        rel_clip: usize,
        abs_pos: Vec<usize>,
        key_mask: Vec<bool>,
    ) -> Result<Self> {
        if window == 0 || rel_clip == 0 {
            return Err(Error::Config("window and relative clip distance must be at least 1".into()));
        }
        if abs_pos.len() != key_mask.len() || n_global > abs_pos.len() || abs_pos.is_empty() {
            return Err(invalid("attention pattern lengths disagree"));
        }
        Ok(Self {
            n_global,
            window,
            rel_clip,
            abs_pos,
            key_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.abs_pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.abs_pos.is_empty()
    }

    /// Score slots per real query: the window plus the global keys.
    pub fn local_slots(&self) -> usize {
        2 * self.window + 1 + self.n_global
    }

    /// Size of the score buffer for real-token queries:
    /// `L * (2w + 1 + n_global) * heads`.
    pub fn score_buffer_len(&self, heads: usize) -> usize {
        self.len() * self.local_slots() * heads
    }

    /// Size of the score buffer for global queries: `n_global * L * heads`.
    pub fn global_buffer_len(&self, heads: usize) -> usize {
        self.n_global * self.len() * heads
    }

    /// Visible `(slot, key)` pairs of query `i`, in a fixed order.
    pub fn keys(&self, i: usize) -> Vec<(usize, usize)> {
        let (g, l, w) = (self.n_global, self.len(), self.window);
        let mut out = Vec::new();
        if i < g {
            out.extend((0..l).map(|j| (j, j)));
        } else {
            out.extend((0..g).map(|j| (2 * w + 1 + j, j)));
            let lo = i.saturating_sub(w).max(g);
            let hi = (i + w).min(l - 1);
            out.extend((lo..=hi).map(|j| (j + w - i, j)));
        }
        out.retain(|&(_, j)| self.key_mask[j]);
        out
    }

    pub fn visible(&self, i: usize, j: usize) -> bool {
        self.keys(i).iter().any(|&(_, k)| k == j)
    }

    pub fn bucket(&self, i: usize, j: usize) -> usize {
        if i < self.n_global || j < self.n_global {
            self.rel_clip
        } else {
            relative_bucket(self.abs_pos[i], self.abs_pos[j], self.rel_clip)
        }
    }
}

/// Attention probabilities kept for the backward pass and for inspection.
#[derive(Debug)]
pub struct AttentionProbs {
    pattern: Arc<WindowPattern>,
    heads: usize,
    /// `[head][query][slot]` for real queries (rows of global queries unused).
    local: Vec<f64>,
    /// `[head][global query][key]`.
    global: Vec<f64>,
}

impl AttentionProbs {
    fn index(&self, h: usize, i: usize, slot: usize) -> (bool, usize) {
        let l = self.pattern.len();
        if i < self.pattern.n_global {
            (true, (h * self.pattern.n_global + i) * l + slot)
        } else {
            (false, (h * l + i) * self.pattern.local_slots() + slot)
        }
    }

    fn get(&self, h: usize, i: usize, slot: usize) -> f64 {
        match self.index(h, i, slot) {
            (true, k) => self.global[k],
            (false, k) => self.local[k],
        }
    }

    fn set(&mut self, h: usize, i: usize, slot: usize, p: f64) {
        match self.index(h, i, slot) {
            (true, k) => self.global[k] = p,
            (false, k) => self.local[k] = p,
        }
    }

    /// Allocated score entries (both buffers).
    pub fn allocated(&self) -> usize {
        self.local.len() + self.global.len()
    }

    /// Dense `L x L` weights of one head; invisible pairs are exactly zero.
    pub fn dense(&self, h: usize) -> Vec<Vec<f64>> {
        let l = self.pattern.len();
        let mut out = vec![vec![0.0; l]; l];
        for (i, row) in out.iter_mut().enumerate() {
            for (slot, j) in self.pattern.keys(i) {
                row[j] = self.get(h, i, slot);
            }
        }
        out
    }
}

#[derive(Debug)]
struct WindowedAttentionOp {
    probs: Arc<AttentionProbs>,
    d_head: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

impl CustomOp for WindowedAttentionOp {
    fn name(&self) -> &'static str {
        "windowed_attention"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &Tensor,
    ) -> std::result::Result<Vec<Option<Tensor>>, TensorError> {
        let (q, k, v, rel) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let pat = &self.probs.pattern;
        let (l, dh) = (pat.len(), self.d_head);
        let big_d = q.cols();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(q.shape());
        let mut dk = Tensor::zeros(k.shape());
        let mut dv = Tensor::zeros(v.shape());
        let mut drel = Tensor::zeros(rel.shape());
        let mut dp = Vec::new();
        for h in 0..self.probs.heads {
            let c = h * dh..(h + 1) * dh;
            for i in 0..l {
                let keys = pat.keys(i);
                let go = &grad_output.row(i)[c.clone()];
                dp.clear();
                let mut weighted = 0.0;
                for &(slot, j) in &keys {
                    let p = self.probs.get(h, i, slot);
                    let d = dot(go, &v.row(j)[c.clone()]);
                    weighted += p * d;
                    dp.push(d);
                    axpy(&mut dv.data_mut()[j * big_d..][c.clone()], p, go);
                }
                let qi = &q.row(i)[c.clone()];
                for (n, &(slot, j)) in keys.iter().enumerate() {
                    let p = self.probs.get(h, i, slot);
                    let ds = scale * p * (dp[n] - weighted);
                    if ds == 0.0 {
                        continue;
                    }
                    let b = pat.bucket(i, j);
                    let kj = &k.row(j)[c.clone()];
                    let rb = rel.row(b);
                    let dqi = &mut dq.data_mut()[i * big_d..][c.clone()];
                    axpy(dqi, ds, kj);
                    axpy(dqi, ds, rb);
                    axpy(&mut dk.data_mut()[j * big_d..][c.clone()], ds, qi);
                    axpy(&mut drel.data_mut()[b * dh..(b + 1) * dh], ds, qi);
                }
            }
        }
        Ok(vec![Some(dq), Some(dk), Some(dv), Some(drel)])
    }
}

/// Windowed multi-head attention. `q`, `k`, `v` are `L x (heads * d_head)`
/// and `rel` is the `(2 * rel_clip + 1) x d_head` table shared by all heads.
pub fn windowed_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    rel: Var,
    pattern: Arc<WindowPattern>,
    heads: usize,
) -> Result<(Var, Arc<AttentionProbs>)> {
    let (qt, kt, vt, rt) = (tape.value(q), tape.value(k), tape.value(v), tape.value(rel));
    let l = pattern.len();
    let big_d = qt.cols();
    if heads == 0 || big_d % heads != 0 {
        return Err(Error::Config(format!("model width {big_d} is not divisible by {heads} heads")));
    }
    let dh = big_d / heads;
    for (name, t) in [("query", qt), ("key", kt), ("value", vt)] {
        if t.shape() != [l, big_d] {
            return Err(invalid(format!(
                "attention {name} has shape {:?}, expected [{l}, {big_d}]",
                t.shape()
            )));
        }
    }
    if rt.shape() != [2 * pattern.rel_clip + 1, dh] {
        return Err(invalid(format!(
            "relative table has shape {:?}, expected [{}, {dh}]",
            rt.shape(),
            2 * pattern.rel_clip + 1
        )));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = AttentionProbs {
        pattern: Arc::clone(&pattern),
        heads,
        local: vec![0.0; pattern.score_buffer_len(heads)],
        global: vec![0.0; pattern.global_buffer_len(heads)],
    };
    let mut out = vec![0.0; l * big_d];
    let mut scores = Vec::new();
    for h in 0..heads {
        let c = h * dh..(h + 1) * dh;
        for i in 0..l {
            let keys = pattern.keys(i);
            if keys.is_empty() {
                return Err(Error::EmptyAttentionRow { row: i });
            }
            let qi = &qt.row(i)[c.clone()];
            scores.clear();
            for &(_, j) in &keys {
                let s = dot(qi, &kt.row(j)[c.clone()]) + dot(qi, rt.row(pattern.bucket(i, j)));
                scores.push(scale * s);
            }
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !m.is_finite() {
                return Err(Error::Tensor(TensorError::NonFinite { op: "windowed_attention" }));
            }
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - m).exp();
                z += *s;
            }
            let oi = &mut out[i * big_d..][c.clone()];
            for (&(slot, j), s) in keys.iter().zip(&scores) {
                let p = s / z;
                probs.set(h, i, slot, p);
                axpy(oi, p, &vt.row(j)[c.clone()]);
            }
        }
    }
    let value = Tensor::new(vec![l, big_d], out)?;
    let probs = Arc::new(probs);
    let op = WindowedAttentionOp {
        probs: Arc::clone(&probs),
        d_head: dh,
    };
    let var = tape.custom(Box::new(op), &[q, k, v, rel], value);
    Ok((var, probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(l: usize, g: usize, w: usize) -> WindowPattern {
        let abs_pos = (0..l).map(|i| i.saturating_sub(g)).collect();
        WindowPattern::from_parts(g, w, 2, abs_pos, vec![true; l]).unwrap()
    }

    #[test]
    fn window_and_global_visibility() {
        let p = pattern(10, 2, 1);
        let keys: Vec<usize> = p.keys(5).iter().map(|&(_, j)| j).collect();
        assert_eq!(keys, vec![0, 1, 4, 5, 6]);
        assert_eq!(p.keys(0).len(), 10);
        let first_real: Vec<usize> = p.keys(2).iter().map(|&(_, j)| j).collect();
        assert_eq!(first_real, vec![0, 1, 2, 3]);
        assert!(!p.visible(5, 8));
        assert!(p.visible(1, 9));
    }

    #[test]
    fn slots_are_distinct_and_in_range() {
        let p = pattern(12, 3, 2);
        for i in 0..12 {
            let keys = p.keys(i);
            let mut slots: Vec<usize> = keys.iter().map(|k| k.0).collect();
            slots.sort();
            slots.dedup();
            assert_eq!(slots.len(), keys.len());
            let limit = if i < 3 { 12 } else { p.local_slots() };
            assert!(slots.iter().all(|&s| s < limit));
        }
    }

    #[test]
    fn global_pairs_use_centre_bucket() {
        let p = pattern(6, 2, 4);
        assert_eq!(p.bucket(0, 5), 2);
        assert_eq!(p.bucket(5, 1), 2);
        assert_eq!(p.bucket(2, 5), 4);
        assert_eq!(p.bucket(5, 2), 0);
    }

    #[test]
    fn masked_row_rejected() {
        let p = WindowPattern::from_parts(0, 1, 1, vec![0, 1, 2, 3], vec![true, true, false, false]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[4, 2]));
        let rel = tape.leaf(Tensor::zeros(&[3, 2]));
        let err = windowed_attention(&mut tape, x, x, x, rel, Arc::new(p), 1).unwrap_err();
        assert!(matches!(err, Error::EmptyAttentionRow { row: 3 }));
    }

    #[test]
    fn zero_queries_give_uniform_weights() {
        let p = Arc::new(pattern(9, 2, 2));
        let mut tape = Tape::new();
        let zeros = tape.leaf(Tensor::zeros(&[9, 4]));
        let v = tape.leaf(Tensor::from_fn(&[9, 4], |i| i as f64));
        let rel = tape.leaf(Tensor::zeros(&[5, 2]));
        let (_, probs) = windowed_attention(&mut tape, zeros, zeros, v, rel, Arc::clone(&p), 2).unwrap();
        for h in 0..2 {
            for (i, row) in probs.dense(h).iter().enumerate() {
                let n = p.keys(i).len() as f64;
                for (j, &w) in row.iter().enumerate() {
                    let want = if p.visible(i, j) { 1.0 / n } else { 0.0 };
                    assert!((w - want).abs() < 1e-15);
                }
            }
        }
    }
}
