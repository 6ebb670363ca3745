//! Training losses evaluated in f64.
//!
//! These are the reference definitions; the trainer builds the same
//! quantities on the tape so they can be differentiated.

use irag_tensor::{Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    SelfDistill,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::SelfDistill => "self_distill",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub j_gen: f64,
    pub j_ret: f64,
    pub lambda: f64,
    pub j_total: f64,
    pub stage: Stage,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillationTemperatures {
    pub tau_t: f64,
    pub tau_r: f64,
}

impl DistillationTemperatures {
    pub fn new(tau_t: f64, tau_r: f64) -> Result<Self> {
        for (name, v) in [("tau_t", tau_t), ("tau_r", tau_r)] {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(Self { tau_t, tau_r })
    }
}

impl Default for DistillationTemperatures {
    fn default() -> Self {
        Self { tau_t: 1.0, tau_r: 1.0 }
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mean token negative log-likelihood over masked rows of `[rows, vocab]` logits.
pub fn generation_loss(logits: &[f64], vocab: usize, targets: &[u32], mask: &[bool]) -> Result<f64> {
    let rows = targets.len();
    if vocab == 0 || logits.len() != rows * vocab || mask.len() != rows {
        return invalid(format!("logits {} do not match {rows} rows of {vocab}", logits.len()));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = &logits[r * vocab..(r + 1) * vocab];
        let t = t as usize;
        if t >= vocab {
            return invalid(format!("target {t} outside vocabulary of {vocab}"));
        }
        total += logsumexp(row) - row[t];
        n += 1;
    }
    if n == 0 {
        return invalid("no response tokens");
    }
    Ok(total / n as f64)
}

/// Multi-label NCE: each positive competes against all negatives only.
pub fn nce_loss(scores: &[f64], positives: &[usize], negatives: &[usize]) -> Result<f64> {
    if positives.is_empty() {
        return invalid("nce needs at least one positive");
    }
    if let Some(i) = positives.iter().chain(negatives).find(|&&i| i >= scores.len()) {
        return invalid(format!("candidate {i} has no score"));
    }
    if positives.iter().any(|p| negatives.contains(p)) {
        return invalid("positives and negatives overlap");
    }
    let mut buf: Vec<f64> = Vec::with_capacity(1 + negatives.len());
    let mut loss = 0.0;
    for &p in positives {
        buf.clear();
        buf.push(scores[p]);
        buf.extend(negatives.iter().map(|&n| scores[n]));
        loss += logsumexp(&buf) - scores[p];
    }
    Ok(loss)
}

fn softmax_scaled(xs: &[f64], tau: f64) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return invalid("empty candidate set");
    }
    if !(tau > 0.0) {
        return invalid(format!("temperature must be positive, got {tau}"));
    }
    let scaled: Vec<f64> = xs.iter().map(|x| x / tau).collect();
    let lse = logsumexp(&scaled);
    Ok(scaled.iter().map(|x| (x - lse).exp()).collect())
}

/// Soft target over candidates from response log-likelihoods.
pub fn target_distribution(logliks: &[f64], tau_t: f64) -> Result<Vec<f64>> {
    softmax_scaled(logliks, tau_t)
}

/// Retriever's predicted distribution over candidates.
pub fn retrieval_distribution(scores: &[f64], tau_r: f64) -> Result<Vec<f64>> {
    softmax_scaled(scores, tau_r)
}

/// KL(P_T ‖ P_R) with `0·ln 0 = 0`.
pub fn distill_loss(p_t: &[f64], p_r: &[f64]) -> Result<f64> {
    if p_t.len() != p_r.len() || p_t.is_empty() {
        return invalid(format!("distributions differ in support: {} vs {}", p_t.len(), p_r.len()));
    }
    for (name, p) in [("target", p_t), ("predicted", p_r)] {
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-5 || p.iter().any(|&x| !(0.0..=1.0 + 1e-12).contains(&x)) {
            return invalid(format!("{name} distribution is not normalized (sum {s})"));
        }
    }
    let mut kl = 0.0;
    for (&t, &r) in p_t.iter().zip(p_r) {
        if t == 0.0 {
            continue;
        }
        if r == 0.0 {
            return invalid("predicted distribution is zero where the target is not");
        }
        kl += t * (t.ln() - r.ln());
    }
    Ok(kl)
}

pub fn joint_loss(j_gen: f64, j_ret: f64, lambda: f64, stage: Stage) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return invalid(format!("lambda must be non-negative, got {lambda}"));
    }
    Ok(LossBreakdown { j_gen, j_ret, lambda, j_total: j_gen + lambda * j_ret, stage })
}

/// [`nce_loss`] on the tape. `positives` and `negatives` index flat
/// elements of `scores`.
pub fn nce_loss_var<T: Scalar>(
    tape: &mut Tape<'_, T>,
    scores: Var,
    positives: &[usize],
    negatives: &[usize],
) -> Result<Var> {
    if positives.is_empty() {
        return invalid("nce needs at least one positive");
    }
    if positives.iter().any(|p| negatives.contains(p)) {
        return invalid("positives and negatives overlap");
    }
    let np = positives.len();
    let mut idx = Vec::with_capacity(np * (1 + negatives.len()));
    for &p in positives {
        idx.push(p);
        idx.extend_from_slice(negatives);
    }
    let g = tape.gather_elems(scores, idx, vec![np, 1 + negatives.len()])?;
    let ce = tape.cross_entropy(g, &vec![0; np], &vec![true; np])?;
    Ok(tape.scale(ce, np as f64)?)
}

/// KL(P_T ‖ softmax(s/τ_r)) on the tape; `p_t` is a constant, so no
/// gradient reaches whatever produced it.
pub fn distill_loss_var<T: Scalar>(
    tape: &mut Tape<'_, T>,
    scores: Var,
    candidates: &[usize],
    p_t: &[f64],
    tau_r: f64,
) -> Result<Var> {
    if candidates.is_empty() || p_t.len() != candidates.len() {
        return invalid(format!("{} target probabilities for {} candidates", p_t.len(), candidates.len()));
    }
    if !(tau_r > 0.0) {
        return invalid(format!("temperature must be positive, got {tau_r}"));
    }
    let g = tape.gather_elems(scores, candidates.to_vec(), vec![1, candidates.len()])?;
    let g = tape.scale(g, 1.0 / tau_r)?;
    let log_r = tape.log_softmax_rows(g)?;
    let cross = tape.dot_const(log_r, p_t.iter().map(|&p| T::from_f64(-p)).collect())?;
    let neg_entropy: f64 = p_t.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();
    Ok(tape.offset(cross, neg_entropy)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn closed_forms() {
        assert!((nce_loss(&[0.3, 0.3], &[0], &[1]).unwrap() - LN2).abs() < 1e-12);
        assert!((nce_loss(&[1.0, 1.0, 1.0], &[0, 1], &[2]).unwrap() - 2.0 * LN2).abs() < 1e-12);
        let pt = target_distribution(&[0.0, -(3f64.ln())], 1.0).unwrap();
        assert!((pt[0] - 0.75).abs() < 1e-12 && (pt[1] - 0.25).abs() < 1e-12);
        let flat = target_distribution(&[0.0, -(3f64.ln())], 1000.0).unwrap();
        assert!(flat.iter().all(|p| (p - 0.5).abs() < 1e-3));
        let pr = retrieval_distribution(&[LN2, 0.0], 1.0).unwrap();
        assert!((pr[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((distill_loss(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - LN2).abs() < 1e-12);
        assert_eq!(distill_loss(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert_eq!(joint_loss(2.0, 0.5, 2.0, Stage::Warmup).unwrap().j_total, 3.0);
        assert_eq!(joint_loss(1.0, 0.5, 0.0, Stage::Warmup).unwrap().j_total, 1.0);
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let l = generation_loss(&[0.5; 12], 4, &[0, 3, 1], &[true, false, true]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(generation_loss(&[0.0; 4], 2, &[0, 1], &[false, false]).unwrap_err().to_string().contains("no response tokens"));
        assert!(nce_loss(&[0.0, 1.0], &[], &[1]).is_err());
        assert!(nce_loss(&[0.0, 1.0], &[0], &[0, 1]).is_err());
        assert!(distill_loss(&[0.5, 0.5], &[1.0, 0.0]).is_err());
        assert!(distill_loss(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(joint_loss(1.0, 1.0, -0.1, Stage::Warmup).is_err());
        assert!(DistillationTemperatures::new(0.0, 1.0).is_err());
    }
}
