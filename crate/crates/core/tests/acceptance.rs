//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.
//!
//! `ACCEPTANCE_ONLY=1,3,5` restricts the run to the listed criteria.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{
    alignment_oracle, attention_oracle, auroc_oracle, check_inputs, check_param, random, random_pattern, rng,
    tied_events, unit_rows, FLOOR, H,
};
use medfuse_core::cohort::{
    apply_stats, fit_stats, generate_synthetic_cohort, load_cohort, read_embedding_matrix, save_cohort,
    write_embedding_matrix, CohortRecord, SyntheticConfig,
};
use medfuse_core::encoders::{windowed_attention, EncoderMode, VariableEncoderBank, WindowPattern};
use medfuse_core::fusion::CrossAttention;
use medfuse_core::nn::Graph;
use medfuse_core::objectives::{
    alignment_loss, alignment_values, intermodal_loss, multilabel_ce, total_loss, DenominatorMode, LossWeights,
};
use medfuse_core::tokenizer::{tokenize, EmbedderDims, TokenEmbedder, TokenizerConfig};
use medfuse_core::train::{
    auroc, prepare, run_experiment, train, Checkpoint, DataShape, Regime, TrainConfig, TrainState,
};
use medfuse_tensor::gradcheck::{compare, numerical_gradient, GradCheck};
use medfuse_tensor::{ParamStore, Tape, Tensor};
use rand::Rng;

const GRAD_REL_TOL: f64 = 1e-5;
const ORDERING_SEEDS: usize = 5;
const ORDERING_RHO: f64 = 0.1;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Worst-case relative error over a family of gradient checks.
#[derive(Default)]
struct Tally {
    instances: usize,
    worst: f64,
    failures: Vec<String>,
}

impl Tally {
    fn add(&mut self, what: &str, c: GradCheck) {
        self.instances += 1;
        self.worst = self.worst.max(c.max_rel_error);
        if !c.passes(GRAD_REL_TOL) {
            self.failures.push(format!("{what}: {c:?}"));
        }
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut t = Tally::default();
    let mut r = rng(1000);

    for case in 0..20u64 {
        let mut store = ParamStore::new();
        let mut init = rng(case);
        let bank = VariableEncoderBank::new(&mut store, &mut init, EncoderMode::Linear, 5, 8);
        let dims = EmbedderDims {
            d_model: 8,
            d_time: 4,
            n_variables: 5,
            n_global: 2,
            max_positions: 64,
            static_dim: 2,
        };
        let e = TokenEmbedder::new(&mut store, &mut init, dims, bank).unwrap();
        let n = r.random_range(1..12);
        let cfg = TokenizerConfig {
            n_global: 2,
            max_len: 64,
            max_positions: 64,
            n_variables: 5,
        };
        let seq = tokenize(&tied_events(&mut r, n, 5), &cfg).unwrap();
        let statics = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let mut worst = GradCheck {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for id in store.ids() {
            let c = check_param(&store, id, case, |g| e.forward(g, &seq, &statics).unwrap());
            worst.max_rel_error = worst.max_rel_error.max(c.max_rel_error);
            worst.max_abs_error = worst.max_abs_error.max(c.max_abs_error);
        }
        t.add(&format!("token embedding {case}"), worst);
    }

    for case in 0..20u64 {
        let l = r.random_range(2..=16);
        let heads = r.random_range(1..=2);
        let w = r.random_range(1..=4);
        let pattern = Arc::new(random_pattern(&mut r, l, w, 3));
        let inputs = [
            random(&mut r, &[l, 2 * heads]),
            random(&mut r, &[l, 2 * heads]),
            random(&mut r, &[l, 2 * heads]),
            random(&mut r, &[7, 2]),
        ];
        let c = check_inputs(&inputs, case, |tape, v| {
            windowed_attention(tape, v[0], v[1], v[2], v[3], Arc::clone(&pattern), heads).unwrap().0
        });
        t.add(&format!("windowed attention {case}"), c);
    }

    for case in 0..15u64 {
        let mut store = ParamStore::new();
        let ca = CrossAttention::new(&mut store, &mut rng(case), "x", 4, 3);
        let (lt, ls) = (r.random_range(1..6), r.random_range(1..6));
        let target = random(&mut r, &[lt, 4]);
        let source = random(&mut r, &[ls, 4]);
        let forward = |g: &mut Graph| {
            let a = g.tape.constant(target.clone());
            let b = g.tape.constant(source.clone());
            ca.forward(g, a, b).unwrap().0
        };
        for id in [ca.wq.weight, ca.wk.weight, ca.wv.weight] {
            t.add(&format!("cross-attention {case}"), check_param(&store, id, case, forward));
        }
        let c = check_inputs(&[target.clone(), source.clone()], case, |tape, v| {
            let mut g = Graph::new(std::mem::take(tape), &store, rng(0), 0.0);
            let out = ca.forward(&mut g, v[0], v[1]).unwrap().0;
            *tape = g.tape;
            out
        });
        t.add(&format!("cross-attention inputs {case}"), c);
    }

    for mode in [DenominatorMode::IncludePositive, DenominatorMode::NegativesOnly] {
        for case in 0..15u64 {
            let k = r.random_range(2..=8);
            let tau = r.random_range(0.1..1.0);
            let hm = unit_rows(&mut r, k, 4);
            let hd = unit_rows(&mut r, k, 4);
            let mut tape = Tape::new();
            let a = tape.leaf(hm.clone());
            let b = tape.leaf(hd.clone());
            let loss = alignment_loss(&mut tape, a, b, tau, mode).unwrap().l_alignment;
            let grads = tape.backward(loss).unwrap();
            let include = mode == DenominatorMode::IncludePositive;
            let f = |m: &Tensor, d: &Tensor| {
                let (x, y) = alignment_oracle(m, d, tau, include);
                x + y
            };
            let cm = compare(grads.wrt(a).unwrap(), &numerical_gradient(&hm, H, |x| f(x, &hd)), FLOOR);
            let cd = compare(grads.wrt(b).unwrap(), &numerical_gradient(&hd, H, |x| f(&hm, x)), FLOOR);
            t.add(&format!("alignment {mode:?} {case} H_M"), cm);
            t.add(&format!("alignment {mode:?} {case} H_D"), cd);
        }
    }

    for case in 0..10u64 {
        let k = r.random_range(2..=8);
        let raw = [random(&mut r, &[k, 5]), random(&mut r, &[k, 5])];
        let c = check_inputs(&raw, case, |tape, v| {
            let a = tape.l2_normalize_rows(v[0]).unwrap();
            let b = tape.l2_normalize_rows(v[1]).unwrap();
            intermodal_loss(tape, a, b, 0.07, DenominatorMode::IncludePositive).unwrap()
        });
        t.add(&format!("intermodal {case}"), c);
    }

    for case in 0..10u64 {
        let logits = random(&mut r, &[4, 3]).map(|x| 4.0 * x);
        let labels: Vec<u8> = (0..12).map(|_| r.random_range(0..2)).collect();
        let c = check_inputs(&[logits], case, |tape, v| multilabel_ce(tape, v[0], &labels).unwrap());
        t.add(&format!("cross-entropy {case}"), c);
    }

    for case in 0..10u64 {
        let k = r.random_range(2..=6);
        let inputs = [random(&mut r, &[k, 3]), random(&mut r, &[k, 3]), random(&mut r, &[k, 2])];
        let labels: Vec<u8> = (0..2 * k).map(|_| r.random_range(0..2)).collect();
        let weights = LossWeights::new(r.random_range(0.0..1.0), r.random_range(0.1..1.0)).unwrap();
        let c = check_inputs(&inputs, case, |tape, v| {
            let a = tape.l2_normalize_rows(v[0]).unwrap();
            let b = tape.l2_normalize_rows(v[1]).unwrap();
            let al = alignment_loss(tape, a, b, 0.2, DenominatorMode::IncludePositive).unwrap();
            let ce = multilabel_ce(tape, v[2], &labels).unwrap();
            total_loss(tape, Some(al), Some(ce), weights).unwrap().0
        });
        t.add(&format!("total loss {case}"), c);
    }

    let elapsed = start.elapsed();
    let pass = t.failures.is_empty() && t.instances >= 100 && elapsed < Duration::from_secs(120);
    let mut detail = format!(
        "{} instances, max rel error {:.2e} (limit {GRAD_REL_TOL:.0e}), {:.1} s",
        t.instances,
        t.worst,
        elapsed.as_secs_f64()
    );
    for f in t.failures.iter().take(3) {
        detail.push_str(&format!("; {f}"));
    }
    outcome(pass, detail)
}

fn attention_oracle_check() -> Outcome {
    let mut r = rng(2000);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let l = r.random_range(2..=32);
        let heads = r.random_range(1..=2);
        let w = l + r.random_range(0..4);
        let pattern = random_pattern(&mut r, l, w, 4);
        let d = 2 * heads;
        let (q, k, v, rel) = (
            random(&mut r, &[l, d]),
            random(&mut r, &[l, d]),
            random(&mut r, &[l, d]),
            random(&mut r, &[9, 2]),
        );
        let mut tape = Tape::inference();
        let vars: Vec<_> = [&q, &k, &v, &rel].iter().map(|t| tape.constant((*t).clone())).collect();
        let (out, _) =
            windowed_attention(&mut tape, vars[0], vars[1], vars[2], vars[3], Arc::new(pattern.clone()), heads)
                .unwrap();
        let (expect, _) = attention_oracle(&q, &k, &v, &rel, &pattern, heads);
        worst = worst.max(tape.value(out).max_abs_diff(&expect));
    }
    let (w, g, heads) = (4, 3, 1);
    let sizes: Vec<usize> = [32, 64, 128, 256]
        .iter()
        .map(|&l| {
            WindowPattern::from_parts(g, w, 4, (0..l).collect(), vec![true; l])
                .unwrap()
                .score_buffer_len(heads)
        })
        .collect();
    let linear = sizes.windows(2).all(|p| p[1] == 2 * p[0]) && sizes[0] == 32 * (2 * w + 1 + g) * heads;
    outcome(
        worst < 1e-9 && linear,
        format!("50 instances, max abs diff {worst:.2e} (limit 1e-9); score buffer sizes {sizes:?} for L = 32..256"),
    )
}

fn contrastive_oracle_check() -> Outcome {
    let mut r = rng(3000);
    let mut worst: f64 = 0.0;
    for mode in [DenominatorMode::IncludePositive, DenominatorMode::NegativesOnly] {
        for _ in 0..100 {
            let k = r.random_range(2..=8);
            let d = r.random_range(2..=8);
            let tau = r.random_range(0.05..2.0);
            let hm = unit_rows(&mut r, k, d);
            let hd = unit_rows(&mut r, k, d);
            let (md, dm, _) = alignment_values(&hm, &hd, tau, mode).unwrap();
            let (omd, odm) = alignment_oracle(&hm, &hd, tau, mode == DenominatorMode::IncludePositive);
            worst = worst.max((md - omd).abs()).max((dm - odm).abs());
        }
    }
    let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let (_, _, inc) = alignment_values(&eye, &eye, 1.0, DenominatorMode::IncludePositive).unwrap();
    let (md, _, neg) = alignment_values(&eye, &eye, 1.0, DenominatorMode::NegativesOnly).unwrap();
    let hand = (inc - 0.3133).abs() < 5e-5 && (md + 0.5).abs() < 1e-12 && (neg + 1.0).abs() < 1e-12;
    outcome(
        worst < 1e-10 && hand,
        format!("200 batches, max abs diff {worst:.2e} (limit 1e-10); hand cases {inc:.4} and {neg:.4}"),
    )
}

fn tokenizer_properties() -> Outcome {
    let mut r = rng(4000);
    let mut violations = 0;
    let mut tied_cases = 0;
    for _ in 0..10_000 {
        let n = r.random_range(1..48);
        let events = tied_events(&mut r, n, 6);
        let cfg = TokenizerConfig {
            n_global: 9,
            max_len: 512,
            max_positions: 512,
            n_variables: 6,
        };
        let seq = tokenize(&events, &cfg).unwrap();
        let distinct: BTreeSet<u64> = events.iter().map(|e| e.raw_timestamp.to_bits()).collect();
        if distinct.len() < n {
            tied_cases += 1;
        }
        let globals_ok = seq.len() == n + 9 && seq.variable_ids[..9].iter().all(|&v| v == 6);
        let mut rule_ok = true;
        for i in 9..seq.len() {
            for j in 9..seq.len() {
                rule_ok &= (seq.abs_pos[i] == seq.abs_pos[j]) == (seq.raw_times[i] == seq.raw_times[j]);
            }
        }
        if !(globals_ok && rule_ok) {
            violations += 1;
        }
    }
    outcome(
        violations == 0 && tied_cases > 9_000,
        format!("10000 fuzzed streams ({tied_cases} with ties), {violations} violations, 9 global tokens prepended"),
    )
}

fn auroc_oracle_check() -> Outcome {
    let mut r = rng(5000);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = r.random_range(2..60);
        let levels = r.random_range(1..8);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / 3.0).collect();
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        if auroc(&scores, &labels) != auroc_oracle(&scores, &labels) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("1000 fuzzed sets, {mismatches} inexact"))
}

fn learnability() -> Outcome {
    let cfg = TrainConfig::default();
    let start = Instant::now();
    let cohort = generate_synthetic_cohort(&cfg.synthetic).unwrap();
    let out = train(&cfg, &cohort).unwrap();
    let elapsed = start.elapsed();
    let report = out.test_report.unwrap();
    let mean = report.mean_auroc.unwrap_or(0.0);
    outcome(
        mean > 0.85 && elapsed < Duration::from_secs(15 * 60),
        format!(
            "regime ce, n=2000, rho=0.2, 30 epochs: test mean AUROC {mean:.4} (need > 0.85), per outcome {:?}, {:.0} s",
            report.per_outcome.iter().map(|a| a.map(|v| (v * 1e4).round() / 1e4)).collect::<Vec<_>>(),
            elapsed.as_secs_f64()
        ),
    )
}

fn ordering_config() -> TrainConfig {
    TrainConfig {
        synthetic: SyntheticConfig {
            shared_info: ORDERING_RHO,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Seed-averaged test mean AUROC per regime on the ordering cohort.
fn ordering_means() -> Vec<(Regime, f64)> {
    let cfg = ordering_config();
    let cohort = generate_synthetic_cohort(&cfg.synthetic).unwrap();
    let report = run_experiment(&cfg, &Regime::ALL, ORDERING_SEEDS, &cohort).unwrap();
    Regime::ALL.iter().map(|&r| (r, report.mean(r).unwrap())).collect()
}

fn lookup(means: &[(Regime, f64)], r: Regime) -> f64 {
    means.iter().find(|(x, _)| *x == r).unwrap().1
}

fn regime_ordering(means: &[(Regime, f64)]) -> Outcome {
    let cfg = ordering_config();
    let m = |r| lookup(means, r);
    let a = m(Regime::Global) > m(Regime::Intermodal);
    let b = m(Regime::CeGlobal) >= m(Regime::Ce);
    let c = m(Regime::Ce) >= m(Regime::CeIntermodal) - 0.01;
    let mark = |ok: bool| if ok { "ok" } else { "violated" };
    outcome(
        a && b && c,
        format!(
            "{ORDERING_SEEDS} seeds, n={}, rho={ORDERING_RHO}, {} epochs: \
             (a) global {:.4} > intermodal {:.4} {}; (b) ce+global {:.4} >= ce {:.4} {}; \
             (c) ce {:.4} >= ce+intermodal {:.4} - 0.01 {}",
            cfg.synthetic.n_patients,
            cfg.epochs,
            m(Regime::Global),
            m(Regime::Intermodal),
            mark(a),
            m(Regime::CeGlobal),
            m(Regime::Ce),
            mark(b),
            m(Regime::Ce),
            m(Regime::CeIntermodal),
            mark(c)
        ),
    )
}

fn augmentation(means: &[(Regime, f64)]) -> Outcome {
    let aug = lookup(means, Regime::CeGlobalAugmented);
    let plain = lookup(means, Regime::CeGlobal);
    outcome(
        aug >= plain - 0.01,
        format!("ce+global-augmented {aug:.4} vs ce+global {plain:.4} (need >= plain - 0.01)"),
    )
}

fn small_run_config(regime: Regime) -> TrainConfig {
    TrainConfig {
        regime,
        epochs: 3,
        batch_size: 16,
        synthetic: SyntheticConfig {
            n_patients: 200,
            mean_seq_len: 24,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn determinism() -> Outcome {
    let mut identical = 0;
    let regimes = [Regime::Ce, Regime::CeGlobal, Regime::Intermodal, Regime::CeGlobalAugmented];
    for regime in regimes {
        let cfg = small_run_config(regime);
        let cohort = generate_synthetic_cohort(&cfg.synthetic).unwrap();
        let a = train(&cfg, &cohort).unwrap();
        let b = train(&cfg, &cohort).unwrap();
        let same_ckpt = a.best.to_bytes().unwrap() == b.best.to_bytes().unwrap();
        let same_report = a.test_report.as_ref().map(|r| r.to_csv()) == b.test_report.as_ref().map(|r| r.to_csv());
        if same_ckpt && same_report && a.history == b.history {
            identical += 1;
        }
    }
    outcome(
        identical == regimes.len(),
        format!("{identical}/{} regimes gave bitwise-identical checkpoints and reports", regimes.len()),
    )
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();

    let cfg = small_run_config(Regime::CeGlobal);
    let cohort = generate_synthetic_cohort(&cfg.synthetic).unwrap();
    let path = dir.path().join("cohort.jsonl");
    save_cohort(&path, &cohort).unwrap();
    let (loaded, _) = load_cohort(&path).unwrap();
    let cohort_ok = loaded == cohort;
    notes.push(format!("cohort file {}", if cohort_ok { "exact" } else { "differs" }));

    let rows: Vec<Vec<f32>> = cohort.iter().map(|r| r.discharge_embedding.iter().map(|&v| v as f32).collect()).collect();
    let mut buf = Vec::new();
    write_embedding_matrix(&mut buf, &rows).unwrap();
    let emb_ok = read_embedding_matrix(buf.as_slice()).unwrap() == rows;
    notes.push(format!("embedding matrix {}", if emb_ok { "exact" } else { "differs" }));

    let text = cfg.to_text();
    let config_ok = TrainConfig::parse(&text).unwrap() == cfg && TrainConfig::parse(&text).unwrap().to_text() == text;
    notes.push(format!("config text {}", if config_ok { "exact" } else { "differs" }));

    let train_part: Vec<CohortRecord> = cohort[..140].to_vec();
    let stats = fit_stats(&train_part, 6).unwrap();
    let mut stats_err: f64 = 0.0;
    for v in 0..6 {
        let vals: Vec<f64> = train_part
            .iter()
            .flat_map(|r| apply_stats(r, &stats).unwrap().events)
            .filter(|e| e.variable_id == v)
            .map(|e| e.value)
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        stats_err = stats_err.max(mean.abs());
    }
    let stats_ok = stats_err < 1e-12;
    notes.push(format!("normalized train means within {stats_err:.1e}"));

    let data = prepare(&cfg, &cohort).unwrap();
    let mut state = TrainState::new(cfg.clone(), data.shape).unwrap();
    state.run_epoch(&data.train).unwrap();
    let ckpt_path = dir.path().join("state.ckpt");
    state.checkpoint().save(&ckpt_path).unwrap();
    let loaded = Checkpoint::load(&ckpt_path).unwrap();
    let ckpt_ok = loaded == state.checkpoint();
    let mut resumed = TrainState::from_checkpoint(&loaded).unwrap();
    let batch: Vec<_> = data.train.iter().take(16).collect();
    state.train_step(&batch, 11, 0).unwrap();
    resumed.train_step(&batch, 11, 0).unwrap();
    let step_ok = state.checkpoint().to_bytes().unwrap() == resumed.checkpoint().to_bytes().unwrap();
    notes.push(format!(
        "checkpoint {} and resumed step {}",
        if ckpt_ok { "exact" } else { "differs" },
        if step_ok { "bitwise equal" } else { "differs" }
    ));
    let shape_ok = DataShape::split_from(&loaded.config_text).unwrap().0 == data.shape;

    outcome(
        cohort_ok && emb_ok && config_ok && stats_ok && ckpt_ok && step_ok && shape_ok,
        notes.join(", "),
    )
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let run = |f: &dyn Fn() -> Outcome| -> Outcome {
        match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                outcome(false, format!("panicked: {msg}"))
            }
        }
    };

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    let simple: [(usize, &str, fn() -> Outcome); 5] = [
        (1, "gradient suite", gradient_suite),
        (2, "attention oracle", attention_oracle_check),
        (3, "contrastive oracle", contrastive_oracle_check),
        (4, "tokenizer properties", tokenizer_properties),
        (5, "AUROC oracle", auroc_oracle_check),
    ];
    for (n, name, f) in simple {
        if wanted(n) {
            report(n, name, run(&f));
        }
    }
    if wanted(6) {
        report(6, "learnability", run(&learnability));
    }
    if wanted(7) || wanted(8) {
        match catch_unwind(ordering_means) {
            Ok(means) => {
                if wanted(7) {
                    report(7, "regime ordering", regime_ordering(&means));
                }
                if wanted(8) {
                    report(8, "augmentation sanity", augmentation(&means));
                }
            }
            Err(_) => {
                for (n, name) in [(7, "regime ordering"), (8, "augmentation sanity")] {
                    if wanted(n) {
                        report(n, name, outcome(false, "experiment panicked"));
                    }
                }
            }
        }
    }
    if wanted(9) {
        report(9, "determinism", run(&determinism));
    }
    if wanted(10) {
        report(10, "round trips", run(&round_trips));
    }

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
