use crate::error::{IndexError, Result};

/// Token positions to keep after heavy-hitter pruning.
///
/// Keeps the `⌈L·keep_ratio⌉` tokens with the largest accumulated attention
/// mass. Ties go to the more recent token. The result is in ascending order.
pub fn heavy_hitter_keep(masses: &[f64], keep_ratio: f64) -> Result<Vec<usize>> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(IndexError::Invalid(format!("keep_ratio must be in (0, 1], got {keep_ratio}")));
    }
    if let Some(m) = masses.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
        return Err(IndexError::Invalid(format!("attention mass must be finite and >= 0, got {m}")));
    }
    let len = masses.len();
    let keep = ((len as f64 * keep_ratio).ceil() as usize).min(len);
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| masses[b].total_cmp(&masses[a]).then(b.cmp(&a)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Storage ratio of 16-bit values against PQ codes: `dim·2 / (m·bits/8)`.
pub fn pq_compression_ratio(dim: usize, m: usize, bits: u32) -> f64 {
    (dim * 2) as f64 / (m as f64 * bits as f64 / 8.0)
}
