#![allow(dead_code)]

use medfuse_core::cohort::NormalizedEvent;
use medfuse_core::encoders::WindowPattern;
use medfuse_core::nn::Graph;
use medfuse_tensor::gradcheck::{compare, numerical_gradient, GradCheck};
use medfuse_tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-5;
/// Entries whose gradient magnitude is below this are compared absolutely.
pub const FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn unit_rows(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Tensor {
    let mut t = random(rng, &[k, d]);
    for r in 0..k {
        let n = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        for c in 0..d {
            t.data_mut()[r * d + c] /= n;
        }
    }
    t
}

fn weighted_sum(tape: &mut Tape, y: Var, w: &Tensor) -> Var {
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv).unwrap();
    tape.sum(p)
}

fn eval_graph<'s>(store: &'s ParamStore, training_tape: bool) -> Graph<'s> {
    let tape = if training_tape {
        Tape::new().with_training(false)
    } else {
        Tape::inference()
    };
    Graph::new(tape, store, ChaCha8Rng::seed_from_u64(0), 0.0)
}

/// Finite-difference check of `d sum(w ⊙ f)/d param` for a randomly
/// weighted output of `forward`.
pub fn check_param(
    store: &ParamStore,
    id: ParamId,
    probe_seed: u64,
    forward: impl Fn(&mut Graph) -> Var,
) -> GradCheck {
    let mut g = eval_graph(store, true);
    let y = forward(&mut g);
    let w = random(&mut rng(probe_seed), g.tape.value(y).shape());
    let loss = weighted_sum(&mut g.tape, y, &w);
    let grads = g.tape.backward(loss).unwrap();
    let analytic = grads
        .param(id)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
    let numeric = numerical_gradient(store.get(id), H, |x| {
        let mut s = store.clone();
        s.set(id, x.clone()).unwrap();
        let mut g = eval_graph(&s, false);
        let y = forward(&mut g);
        let l = weighted_sum(&mut g.tape, y, &w);
        g.tape.value(l).item()
    });
    compare(&analytic, &numeric, FLOOR)
}

/// Finite-difference check with respect to the inputs of `f`.
pub fn check_inputs(inputs: &[Tensor], probe_seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Var) -> GradCheck {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = f(&mut tape, &vars);
    let w = random(&mut rng(probe_seed), tape.value(y).shape());
    let loss = weighted_sum(&mut tape, y, &w);
    let grads = tape.backward(loss).unwrap();
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let numeric = numerical_gradient(x, H, |probe| {
            let mut t = Tape::inference();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, v)| t.constant(if j == k { probe.clone() } else { v.clone() }))
                .collect();
            let y = f(&mut t, &vs);
            let l = weighted_sum(&mut t, y, &w);
            t.value(l).item()
        });
        let c = compare(&analytic, &numeric, FLOOR);
        worst.max_rel_error = worst.max_rel_error.max(c.max_rel_error);
        worst.max_abs_error = worst.max_abs_error.max(c.max_abs_error);
    }
    worst
}

/// Events with timestamps drawn from a few distinct values so ties are
/// common.
pub fn tied_events(rng: &mut ChaCha8Rng, n: usize, n_variables: usize) -> Vec<NormalizedEvent> {
    let distinct = (n / 3).max(1);
    let mut ev: Vec<NormalizedEvent> = (0..n)
        .map(|_| {
            let t = rng.random_range(0..distinct) as f64 * 60.0;
            NormalizedEvent {
                variable_id: rng.random_range(0..n_variables),
                raw_timestamp: t,
                time: t / 600.0,
                value: rng.random_range(-2.0..2.0),
            }
        })
        .collect();
    ev.sort_by(|a, b| a.raw_timestamp.total_cmp(&b.raw_timestamp));
    ev
}

/// Random attention layout: up to three global tokens, tied positions among
/// real tokens and, when globals exist, trailing padding.
pub fn random_pattern(rng: &mut ChaCha8Rng, len: usize, window: usize, rel_clip: usize) -> WindowPattern {
    let g = rng.random_range(0..=3.min(len - 1));
    let mut abs_pos = vec![0; len];
    let mut p = 0;
    for slot in abs_pos.iter_mut().skip(g + 1) {
        if rng.random_bool(0.6) {
            p += 1;
        }
        *slot = p;
    }
    let mut key_mask = vec![true; len];
    if g > 0 {
        let pad = rng.random_range(0..=(len - g) / 3);
        for m in key_mask.iter_mut().rev().take(pad) {
            *m = false;
        }
    }
    WindowPattern::from_parts(g, window, rel_clip, abs_pos, key_mask).unwrap()
}

/// Direct evaluation of windowed attention: returns the output and the
/// per-head dense weights `[head][query][key]`.
pub fn attention_oracle(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    rel: &Tensor,
    p: &WindowPattern,
    heads: usize,
) -> (Tensor, Vec<Vec<Vec<f64>>>) {
    let (l, big_d) = (q.rows(), q.cols());
    let dh = big_d / heads;
    let g = p.n_global;
    let kk = p.rel_clip as i64;
    let visible = |i: usize, j: usize| p.key_mask[j] && (i < g || j < g || i.abs_diff(j) <= p.window);
    let bucket = |i: usize, j: usize| {
        if i < g || j < g {
            p.rel_clip
        } else {
            ((p.abs_pos[j] as i64 - p.abs_pos[i] as i64).clamp(-kk, kk) + kk) as usize
        }
    };
    let mut out = Tensor::zeros(&[l, big_d]);
    let mut weights = vec![vec![vec![0.0; l]; l]; heads];
    for h in 0..heads {
        let c = h * dh;
        for i in 0..l {
            let mut scores = vec![f64::NEG_INFINITY; l];
            for (j, s) in scores.iter_mut().enumerate() {
                if visible(i, j) {
                    let b = bucket(i, j);
                    *s = (0..dh)
                        .map(|e| q.at(i, c + e) * (k.at(j, c + e) + rel.at(b, e)))
                        .sum::<f64>()
                        / (dh as f64).sqrt();
                }
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for j in 0..l {
                let w = (scores[j] - m).exp() / z;
                weights[h][i][j] = w;
                for e in 0..dh {
                    out.data_mut()[i * big_d + c + e] += w * v.at(j, c + e);
                }
            }
        }
    }
    (out, weights)
}

/// Contrastive loss by direct summation over rows: `(L_MD, L_DM)`.
pub fn alignment_oracle(hm: &Tensor, hd: &Tensor, tau: f64, include_positive: bool) -> (f64, f64) {
    let k = hm.rows();
    let sim = |a: &Tensor, i: usize, b: &Tensor, j: usize| -> f64 {
        a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum::<f64>() / tau
    };
    let direction = |a: &Tensor, b: &Tensor| -> f64 {
        let mut total = 0.0;
        for i in 0..k {
            let pos = sim(a, i, b, i);
            let denom: f64 = (0..k)
                .filter(|&j| include_positive || j != i)
                .map(|j| sim(a, i, b, j).exp())
                .sum();
            total += (pos.exp() / denom).ln();
        }
        -total / (2.0 * k as f64)
    };
    (direction(hm, hd), direction(hd, hm))
}

/// AUROC by counting concordant pairs, ties counted as half.
pub fn auroc_oracle(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut good = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                good += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0.0).then(|| good / pairs)
}
