use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{IndexError, Result};

pub type PassageId = u64;

/// One search result.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: PassageId,
    pub score: f32,
}

/// Descending score, then ascending id.
pub(crate) fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

/// Keep the best `k` hits in rank order.
pub(crate) fn top_k(mut hits: Vec<Hit>, k: usize) -> Vec<Hit> {
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, rank_order);
        hits.truncate(k);
    }
    hits.sort_by(rank_order);
    hits
}

/// Dot product accumulated in `f64`, reported as `f32`. Starts from +0.0 so
/// an all-zero product never yields -0.0 (which would sort below +0.0).
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0f64, |acc, (x, y)| acc + *x as f64 * *y as f64) as f32
}

pub(crate) fn check_query(q: &[f32]) -> Result<()> {
    if q.iter().any(|x| !x.is_finite()) {
        return Err(IndexError::Invalid("query has non-finite values".into()));
    }
    Ok(())
}

/// Exact inner-product index.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatIndex {
    dim: usize,
    ids: Vec<PassageId>,
    vectors: Vec<f32>,
    seen: HashSet<PassageId>,
}

impl FlatIndex {
    pub fn new(dim: usize) -> Self {
        Self { dim, ids: Vec::new(), vectors: Vec::new(), seen: HashSet::new() }
    }

    /// Build from `ids.len()` row-major vectors.
    pub fn from_rows(dim: usize, ids: Vec<PassageId>, vectors: Vec<f32>) -> Result<Self> {
        if vectors.len() != ids.len() * dim {
            return Err(IndexError::Invalid(format!(
                "{} ids but {} values for dim {dim}",
                ids.len(),
                vectors.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in &ids {
            if !seen.insert(id) {
                return Err(IndexError::DuplicateId(id));
            }
        }
        Ok(Self { dim, ids, vectors, seen })
    }

    pub fn add(&mut self, id: PassageId, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(IndexError::DimMismatch { expected: self.dim, got: vector.len() });
        }
        check_query(vector)?;
        if !self.seen.insert(id) {
            return Err(IndexError::DuplicateId(id));
        }
        self.ids.push(id);
        self.vectors.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[PassageId] {
        &self.ids
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn vector(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    /// Exact top-`k` by dot product; ties go to the smaller id.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if self.is_empty() {
            return Err(IndexError::Empty);
        }
        if query.len() != self.dim {
            return Err(IndexError::DimMismatch { expected: self.dim, got: query.len() });
        }
        check_query(query)?;
        let hits = self
            .ids
            .iter()
            .enumerate()
            .map(|(row, &id)| Hit { id, score: dot(query, self.vector(row)) })
            .collect();
        Ok(top_k(hits, k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_match_ranks_first_among_unit_vectors() {
        let rows: Vec<Vec<f32>> = vec![vec![1.0, 0.0, 0.0], vec![0.6, 0.8, 0.0], vec![0.0, 0.0, 1.0]];
        let idx = FlatIndex::from_rows(3, vec![10, 11, 12], rows.concat()).unwrap();
        let hits = idx.search(&rows[1], 3).unwrap();
        assert_eq!(hits[0].id, 11);
    }

    #[test]
    fn ties_break_toward_lower_id() {
        let idx = FlatIndex::from_rows(2, vec![9, 4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let hits = idx.search(&[0.5, 0.5], 1).unwrap();
        assert_eq!(hits, vec![Hit { id: 4, score: 1.0 }]);
    }

    #[test]
    fn k_larger_than_index_returns_everything() {
        let idx = FlatIndex::from_rows(1, vec![1, 2], vec![1.0, 2.0]).unwrap();
        let hits = idx.search(&[1.0], 10).unwrap();
        assert_eq!(hits.iter().map(|h| h.id).collect::<Vec<_>>(), vec![2, 1]);
    }

    #[test]
    fn empty_index_and_bad_queries_error() {
        let idx = FlatIndex::new(4);
        assert!(matches!(idx.search(&[0.0; 4], 1), Err(IndexError::Empty)));
        let idx = FlatIndex::from_rows(2, vec![1], vec![1.0, 0.0]).unwrap();
        assert!(matches!(idx.search(&[0.0; 3], 1), Err(IndexError::DimMismatch { .. })));
        assert!(matches!(idx.search(&[0.0; 2], 0), Err(IndexError::ZeroK)));
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(matches!(
            FlatIndex::from_rows(1, vec![3, 3], vec![1.0, 2.0]),
            Err(IndexError::DuplicateId(3))
        ));
    }
}
