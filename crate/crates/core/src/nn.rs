//! Small building blocks shared by the model components.

use medfuse_tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// One forward pass: the tape, read-only parameters, and the dropout RNG.
pub struct Graph<'s> {
    pub tape: Tape,
    pub store: &'s ParamStore,
    pub rng: ChaCha8Rng,
    pub dropout: f64,
}

impl<'s> Graph<'s> {
    pub fn new(tape: Tape, store: &'s ParamStore, rng: ChaCha8Rng, dropout: f64) -> Self {
        Self {
            tape,
            store,
            rng,
            dropout,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    /// Inverted dropout at the configured rate; identity in eval mode.
    pub fn dropout(&mut self, v: Var) -> Result<Var> {
        Ok(self.tape.dropout(v, self.dropout, &mut self.rng)?)
    }
}

/// Uniform Xavier initialization for an `rows x cols` weight.
pub fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(&[rows, cols], |_| rng.random_range(-a..a))
}

/// Small normal-ish initialization for embedding tables.
pub fn embedding_init(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(&[rows, cols], |_| rng.random_range(-0.1..0.1))
}

/// `x W + b` with `W` stored as `in x out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.insert(format!("{name}.weight"), xavier(rng, in_dim, out_dim));
        let bias = bias.then(|| store.insert(format!("{name}.bias"), Tensor::zeros(&[1, out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                Ok(g.tape.add(y, b)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::filled(&[1, dim], 1.0)),
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[1, dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        Ok(g.tape.layer_norm(x, gamma, beta, LAYER_NORM_EPS)?)
    }
}
