//! Stateless numeric kernels shared by the tape and by callers that do not
//! need gradients.

use crate::error::{shape_err, Result, TensorError};
use crate::{Scalar, Tensor};

/// Default rotary base.
pub const ROPE_THETA: f64 = 10_000.0;

/// Row-wise softmax with max subtraction; masked (`false`) entries are 0.
///
/// The denominator is accumulated in `f64`.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>, mask: Option<&[bool]>) -> Result<Tensor<T>> {
    let cols = x.cols();
    if cols == 0 {
        return shape_err("softmax_rows", "zero columns");
    }
    if let Some(m) = mask {
        if m.len() != x.numel() {
            return shape_err("softmax_rows", format!("mask len {} vs {}", m.len(), x.numel()));
        }
    }
    let mut out = vec![T::zero(); x.numel()];
    for r in 0..x.rows() {
        let row = x.row(r);
        let mrow = mask.map(|m| &m[r * cols..(r + 1) * cols]);
        softmax_row_into(row, mrow, &mut out[r * cols..(r + 1) * cols])?;
    }
    let t = Tensor::new(x.shape().to_vec(), out)?;
    t.ensure_finite("softmax_rows")?;
    Ok(t)
}

pub(crate) fn softmax_row_into<T: Scalar>(
    row: &[T],
    mask: Option<&[bool]>,
    out: &mut [T],
) -> Result<()> {
    let allowed = |j: usize| mask.map_or(true, |m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, v) in row.iter().enumerate() {
        if allowed(j) {
            max = max.max(v.as_f64());
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(TensorError::EmptyRow);
    }
    let mut denom = 0.0f64;
    let mut exps = Vec::with_capacity(row.len());
    for (j, v) in row.iter().enumerate() {
        let e = if allowed(j) { (v.as_f64() - max).exp() } else { 0.0 };
        denom += e;
        exps.push(e);
    }
    for (o, e) in out.iter_mut().zip(exps) {
        *o = T::from_f64(e / denom);
    }
    Ok(())
}

/// Rotation angle for pair `i` of a head of width `head_dim` at `position`.
pub(crate) fn rope_angle(position: usize, pair: usize, head_dim: usize, theta: f64) -> f64 {
    position as f64 / theta.powf(2.0 * pair as f64 / head_dim as f64)
}

/// Rotate interleaved `(even, odd)` pairs of every head in place.
/// `inverse` applies the transpose rotation (used by backward).
pub(crate) fn rope_in_place<T: Scalar>(
    data: &mut [T],
    positions: &[usize],
    heads: usize,
    head_dim: usize,
    theta: f64,
    inverse: bool,
) {
    let width = heads * head_dim;
    let half = head_dim / 2;
    let mut cs = vec![(0.0f64, 0.0f64); half];
    for (r, &pos) in positions.iter().enumerate() {
        for (i, slot) in cs.iter_mut().enumerate() {
            let a = rope_angle(pos, i, head_dim, theta);
            *slot = (a.cos(), if inverse { -a.sin() } else { a.sin() });
        }
        let row = &mut data[r * width..(r + 1) * width];
        for h in 0..heads {
            for (i, &(c, s)) in cs.iter().enumerate() {
                let j = h * head_dim + 2 * i;
                let x0 = row[j].as_f64();
                let x1 = row[j + 1].as_f64();
                row[j] = T::from_f64(x0 * c - x1 * s);
                row[j + 1] = T::from_f64(x0 * s + x1 * c);
            }
        }
    }
}

/// Apply rotary position embedding to `states` of shape `[tokens, heads, head_dim]`.
pub fn apply_rope<T: Scalar>(
    states: &Tensor<T>,
    positions: &[usize],
    theta: f64,
) -> Result<Tensor<T>> {
    let [tokens, heads, head_dim] = match states.shape() {
        &[a, b, c] => [a, b, c],
        s => return shape_err("apply_rope", format!("expected 3 axes, got {s:?}")),
    };
    if head_dim % 2 != 0 {
        return Err(TensorError::OddHeadDim(head_dim));
    }
    if positions.len() != tokens {
        return shape_err("apply_rope", format!("{} positions for {tokens} tokens", positions.len()));
    }
    let mut data = states.data().to_vec();
    rope_in_place(&mut data, positions, heads, head_dim, theta, false);
    Tensor::new(states.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let y = softmax_rows(&t(vec![1, 3], vec![0.0; 3]), None).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form_ln2() {
        let y = softmax_rows(&t(vec![1, 2], vec![2f64.ln(), 0.0]), None).unwrap();
        assert!((y.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((y.data()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_logit_does_not_overflow() {
        let x = Tensor::<f32>::new(vec![1, 2], vec![1000.0, 0.0]).unwrap();
        let y = softmax_rows(&x, None).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!(y.data()[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_masked_entries_are_exact_zero() {
        let x = t(vec![2, 3], vec![1.0, 2.0, 3.0, 0.5, 0.5, 9.0]);
        let mask = [true, false, true, true, true, false];
        let y = softmax_rows(&x, Some(&mask)).unwrap();
        assert_eq!(y.data()[1], 0.0);
        assert_eq!(y.data()[5], 0.0);
        for r in 0..2 {
            let s: f64 = y.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let x = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let err = softmax_rows(&x, Some(&[true, true, false, false])).unwrap_err();
        assert_eq!(err, TensorError::EmptyRow);
        assert_eq!(err.to_string(), "empty attention row");
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let x = t(vec![1, 2, 4], (0..8).map(|i| i as f64 - 3.5).collect());
        let y = apply_rope(&x, &[0], ROPE_THETA).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn rope_rejects_odd_head_dim() {
        let x = t(vec![1, 1, 3], vec![1.0, 2.0, 3.0]);
        assert_eq!(apply_rope(&x, &[1], ROPE_THETA).unwrap_err(), TensorError::OddHeadDim(3));
    }

    #[test]
    fn rope_inverse_undoes_rotation() {
        let mut d: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let orig = d.clone();
        rope_in_place(&mut d, &[3, 17], 2, 4, ROPE_THETA, false);
        rope_in_place(&mut d, &[3, 17], 2, 4, ROPE_THETA, true);
        for (a, b) in d.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
