//! Training objectives: bidirectional contrastive alignment, the
//! inter-modality baseline, multilabel cross-entropy and their weighted sum.

use medfuse_tensor::{Tape, Tensor, Var};

use crate::error::{invalid, Error, Result};

/// Tolerance on the unit-norm precondition of contrastive inputs.
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum DenominatorMode {
    /// The denominator sums over the other rows only.
    NegativesOnly,
    /// The denominator also contains the positive pair (standard InfoNCE).
    #[default]
    IncludePositive,
}

impl DenominatorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::NegativesOnly => "negatives-only",
            Self::IncludePositive => "include-positive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "negatives-only" => Ok(Self::NegativesOnly),
            "include-positive" => Ok(Self::IncludePositive),
            other => Err(Error::Config(format!("unknown denominator mode {other:?}"))),
        }
    }
}

/// The two directional terms and their sum, as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentTerms {
    pub l_md: Var,
    pub l_dm: Var,
    pub l_alignment: Var,
}

fn check_batch(tape: &Tape, a: Var, b: Var, tau: f64, mode: DenominatorMode) -> Result<usize> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    let (ta, tb) = (tape.value(a), tape.value(b));
    if ta.rank() != 2 || ta.shape() != tb.shape() {
        return Err(invalid(format!(
            "contrastive inputs have shapes {:?} and {:?}",
            ta.shape(),
            tb.shape()
        )));
    }
    let k = ta.rows();
    if k < 2 && mode == DenominatorMode::NegativesOnly {
        return Err(invalid("negatives-only contrast needs a batch of at least 2"));
    }
    for t in [ta, tb] {
        for r in 0..k {
            let n = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(invalid(format!("contrastive input row {r} has norm {n}, expected 1")));
            }
        }
    }
    Ok(k)
}

/// `(Σ_i logsumexp_{denom(i)} S_i − Σ_i S_ii) / (2K)` over the rows of `s`.
fn directional(tape: &mut Tape, s: Var, k: usize, mode: DenominatorMode) -> Result<Var> {
    let eye = Tensor::from_fn(&[k, k], |i| if i / k == i % k { 1.0 } else { 0.0 });
    let denom = match mode {
        DenominatorMode::IncludePositive => s,
        DenominatorMode::NegativesOnly => {
            let mask: Vec<bool> = eye.data().iter().map(|&x| x == 1.0).collect();
            tape.masked_fill(s, &mask, f64::NEG_INFINITY)?
        }
    };
    let lse = tape.logsumexp(denom)?;
    let lse = tape.sum(lse);
    let eye = tape.constant(eye);
    let diag = tape.mul(s, eye)?;
    let diag = tape.sum(diag);
    let diff = tape.sub(lse, diag)?;
    Ok(tape.scale(diff, 1.0 / (2.0 * k as f64)))
}

/// Contrasts `h_m` against `h_d` in both directions. Rows must be unit norm;
/// row `i` of each is the same patient.
pub fn alignment_loss(tape: &mut Tape, h_m: Var, h_d: Var, tau: f64, mode: DenominatorMode) -> Result<AlignmentTerms> {
    let k = check_batch(tape, h_m, h_d, tau, mode)?;
    let dt = tape.transpose(h_d)?;
    let s = tape.matmul(h_m, dt)?;
    let s = tape.scale(s, 1.0 / tau);
    let l_md = directional(tape, s, k, mode)?;
    let st = tape.transpose(s)?;
    let l_dm = directional(tape, st, k, mode)?;
    let l_alignment = tape.add(l_md, l_dm)?;
    Ok(AlignmentTerms {
        l_md,
        l_dm,
        l_alignment,
    })
}

/// Baseline that contrasts the two unimodal representations directly.
pub fn intermodal_loss(tape: &mut Tape, h_time: Var, h_note: Var, tau: f64, mode: DenominatorMode) -> Result<Var> {
    Ok(alignment_loss(tape, h_time, h_note, tau, mode)?.l_alignment)
}

/// `(L_MD, L_DM, L_alignment)` for plain matrices.
pub fn alignment_values(h_m: &Tensor, h_d: &Tensor, tau: f64, mode: DenominatorMode) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::inference();
    let a = tape.constant(h_m.clone());
    let b = tape.constant(h_d.clone());
    let t = alignment_loss(&mut tape, a, b, tau, mode)?;
    Ok((
        tape.value(t.l_md).item(),
        tape.value(t.l_dm).item(),
        tape.value(t.l_alignment).item(),
    ))
}

/// Mean binary cross-entropy over all entries, in the stable form
/// `softplus(z) − y z`. `labels` is row-major like `logits`.
pub fn multilabel_ce(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    let t = tape.value(logits);
    if labels.len() != t.numel() {
        return Err(invalid(format!(
            "{} labels for logits of shape {:?}",
            labels.len(),
            t.shape()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(invalid(format!("label {bad} is not 0 or 1")));
    }
    let y = Tensor::new(t.shape().to_vec(), labels.iter().map(|&y| y as f64).collect())?;
    let y = tape.constant(y);
    let sp = tape.softplus(logits);
    let yz = tape.mul(y, logits)?;
    let per = tape.sub(sp, yz)?;
    Ok(tape.mean(per))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) || !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::Config(format!("loss weights must be non-negative, got {alpha}, {beta}")));
        }
        if alpha == 0.0 && beta == 0.0 {
            return Err(Error::Config("alpha and beta cannot both be zero".into()));
        }
        Ok(Self { alpha, beta })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub l_md: f64,
    pub l_dm: f64,
    pub l_alignment: f64,
    pub l_ce: f64,
    pub l_total: f64,
}

/// `alpha * L_alignment + beta * L_ce` on the tape. Absent terms count as 0.
pub fn total_loss(
    tape: &mut Tape,
    alignment: Option<AlignmentTerms>,
    ce: Option<Var>,
    weights: LossWeights,
) -> Result<(Var, LossReport)> {
    let mut report = LossReport::default();
    let mut parts = Vec::new();
    if let Some(a) = alignment {
        report.l_md = tape.value(a.l_md).item();
        report.l_dm = tape.value(a.l_dm).item();
        report.l_alignment = tape.value(a.l_alignment).item();
        parts.push(tape.scale(a.l_alignment, weights.alpha));
    }
    if let Some(c) = ce {
        report.l_ce = tape.value(c).item();
        parts.push(tape.scale(c, weights.beta));
    }
    let total = match parts[..] {
        [] => return Err(invalid("no loss terms to combine")),
        [one] => one,
        [a, b] => tape.add(a, b)?,
        _ => unreachable!(),
    };
    report.l_total = tape.value(total).item();
    Ok((total, report))
}
