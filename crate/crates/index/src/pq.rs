use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{IndexError, Result};
use crate::flat::{check_query, dot, top_k, Hit, PassageId};

/// Stop a subspace once no centroid moves further than this.
const SHIFT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PqTrainOptions {
    pub m: usize,
    pub bits: u32,
    pub iterations: usize,
    pub seed: u64,
    pub rotate: bool,
}

impl PqTrainOptions {
    pub fn new(m: usize, bits: u32) -> Self {
        Self { m, bits, iterations: 25, seed: 0, rotate: false }
    }
}

/// Mean squared reconstruction error (per value) after each assignment step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PqTrainLog {
    pub mse_per_sweep: Vec<f64>,
}

/// Product quantizer: `m` sub-codebooks of `2^bits` centroids each.
#[derive(Clone, Debug, PartialEq)]
pub struct PqCodebook {
    dim: usize,
    m: usize,
    bits: u32,
    /// `[m, 2^bits, sub_dim]`
    centroids: Vec<f32>,
    /// Row-major `[dim, dim]`; vectors are rotated as `R v` before coding.
    rotation: Option<Vec<f32>>,
}

fn check_geometry(dim: usize, m: usize, bits: u32) -> Result<()> {
    if m == 0 || dim == 0 || dim % m != 0 {
        return Err(IndexError::Invalid(format!("dim {dim} is not divisible by m {m}")));
    }
    if !(1..=8).contains(&bits) {
        return Err(IndexError::Invalid(format!("bits must be in 1..=8, got {bits}")));
    }
    Ok(())
}

impl PqCodebook {
    pub fn from_parts(
        dim: usize,
        m: usize,
        bits: u32,
        centroids: Vec<f32>,
        rotation: Option<Vec<f32>>,
    ) -> Result<Self> {
        check_geometry(dim, m, bits)?;
        if centroids.len() != dim << bits {
            return Err(IndexError::Invalid(format!(
                "expected {} centroid values, got {}",
                dim << bits,
                centroids.len()
            )));
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(IndexError::Invalid("non-finite centroid".into()));
        }
        if let Some(r) = &rotation {
            if r.len() != dim * dim {
                return Err(IndexError::Invalid("rotation must be dim x dim".into()));
            }
            let err = orthonormality_error(r, dim);
            if err > 1e-5 {
                return Err(IndexError::Invalid(format!("rotation not orthonormal (error {err:e})")));
            }
        }
        Ok(Self { dim, m, bits, centroids, rotation })
    }

    /// Train with per-subspace k-means (k-means++ seeding, Lloyd sweeps).
    pub fn train(vectors: &[f32], dim: usize, opts: PqTrainOptions) -> Result<(Self, PqTrainLog)> {
        check_geometry(dim, opts.m, opts.bits)?;
        if vectors.len() % dim != 0 {
            return Err(IndexError::Invalid("training data is not a whole number of rows".into()));
        }
        let n = vectors.len() / dim;
        let k = 1usize << opts.bits;
        if n < k {
            return Err(IndexError::TooFewVectors { needed: k, got: n });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let rotation = opts.rotate.then(|| random_rotation(dim, &mut rng));
        let data: Vec<f32> = match &rotation {
            Some(r) => (0..n).flat_map(|i| rotate(r, &vectors[i * dim..(i + 1) * dim])).collect(),
            None => vectors.to_vec(),
        };

        let m = opts.m;
        let sub = dim / m;
        let mut subspaces: Vec<KMeans> = (0..m)
            .map(|j| {
                let points: Vec<f32> =
                    (0..n).flat_map(|i| data[i * dim + j * sub..i * dim + (j + 1) * sub].iter().copied()).collect();
                KMeans::seeded(points, sub, k, &mut rng)
            })
            .collect();

        let mut log = PqTrainLog::default();
        for sweep in 0..=opts.iterations {
            let sse: f64 = subspaces.iter_mut().map(|s| s.assign()).sum();
            log.mse_per_sweep.push(sse / (n * dim) as f64);
            if sweep == opts.iterations || subspaces.iter().all(|s| s.converged) {
                break;
            }
            for s in subspaces.iter_mut().filter(|s| !s.converged) {
                s.update();
            }
        }

        let centroids = subspaces.into_iter().flat_map(|s| s.centroids).collect();
        let codebook = Self { dim, m, bits: opts.bits, centroids, rotation };
        Ok((codebook, log))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn sub_dim(&self) -> usize {
        self.dim / self.m
    }

    pub fn codes_per_subspace(&self) -> usize {
        1 << self.bits
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn rotation(&self) -> Option<&[f32]> {
        self.rotation.as_deref()
    }

    pub fn centroid(&self, sub: usize, code: usize) -> &[f32] {
        let s = self.sub_dim();
        let start = (sub * self.codes_per_subspace() + code) * s;
        &self.centroids[start..start + s]
    }

    fn to_code_space<'a>(&self, v: &'a [f32]) -> std::borrow::Cow<'a, [f32]> {
        match &self.rotation {
            Some(r) => rotate(r, v).into(),
            None => v.into(),
        }
    }

    fn check_dim(&self, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(IndexError::DimMismatch { expected: self.dim, got: v.len() });
        }
        check_query(v)
    }

    /// Nearest centroid (L2) in every subspace; ties go to the lower code.
    pub fn encode(&self, v: &[f32]) -> Result<Vec<u8>> {
        self.check_dim(v)?;
        let v = self.to_code_space(v);
        let s = self.sub_dim();
        Ok((0..self.m)
            .map(|j| {
                let x = &v[j * s..(j + 1) * s];
                let mut best = (f64::INFINITY, 0usize);
                for c in 0..self.codes_per_subspace() {
                    let d = sq_dist(x, self.centroid(j, c));
                    if d < best.0 {
                        best = (d, c);
                    }
                }
                best.1 as u8
            })
            .collect())
    }

    pub fn decode(&self, codes: &[u8]) -> Result<Vec<f32>> {
        if codes.len() != self.m {
            return Err(IndexError::Invalid(format!("expected {} codes, got {}", self.m, codes.len())));
        }
        if let Some(&c) = codes.iter().find(|&&c| c as usize >= self.codes_per_subspace()) {
            return Err(IndexError::Invalid(format!("code {c} out of range for {} bits", self.bits)));
        }
        let out: Vec<f32> =
            codes.iter().enumerate().flat_map(|(j, &c)| self.centroid(j, c as usize).iter().copied()).collect();
        Ok(match &self.rotation {
            Some(r) => rotate_back(r, &out),
            None => out,
        })
    }

    /// ADC lookup table `[m, 2^bits]` of `dot(q_sub, centroid)`.
    pub fn adc_table(&self, query: &[f32]) -> Result<Vec<f32>> {
        self.check_dim(query)?;
        let q = self.to_code_space(query);
        let s = self.sub_dim();
        let k = self.codes_per_subspace();
        let mut table = Vec::with_capacity(self.m * k);
        for j in 0..self.m {
            let qs = &q[j * s..(j + 1) * s];
            table.extend((0..k).map(|c| dot(qs, self.centroid(j, c))));
        }
        Ok(table)
    }
}

/// PQ-coded passage vectors searched by ADC.
#[derive(Clone, Debug, PartialEq)]
pub struct PqIndex {
    codebook: PqCodebook,
    ids: Vec<PassageId>,
    /// `[n, m]`
    codes: Vec<u8>,
    seen: HashSet<PassageId>,
}

impl PqIndex {
    pub fn new(codebook: PqCodebook) -> Self {
        Self { codebook, ids: Vec::new(), codes: Vec::new(), seen: HashSet::new() }
    }

    pub fn from_codes(codebook: PqCodebook, ids: Vec<PassageId>, codes: Vec<u8>) -> Result<Self> {
        if codes.len() != ids.len() * codebook.m {
            return Err(IndexError::Invalid("codes do not match ids".into()));
        }
        if codes.iter().any(|&c| c as usize >= codebook.codes_per_subspace()) {
            return Err(IndexError::Invalid("code out of range".into()));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in &ids {
            if !seen.insert(id) {
                return Err(IndexError::DuplicateId(id));
            }
        }
        Ok(Self { codebook, ids, codes, seen })
    }

    /// Encode and index every row of `vectors`.
    pub fn build(codebook: PqCodebook, ids: Vec<PassageId>, vectors: &[f32]) -> Result<Self> {
        let dim = codebook.dim;
        if vectors.len() != ids.len() * dim {
            return Err(IndexError::Invalid("vectors do not match ids".into()));
        }
        let mut index = Self::new(codebook);
        for (i, id) in ids.into_iter().enumerate() {
            index.add(id, &vectors[i * dim..(i + 1) * dim])?;
        }
        Ok(index)
    }

    pub fn add(&mut self, id: PassageId, vector: &[f32]) -> Result<()> {
        let codes = self.codebook.encode(vector)?;
        if !self.seen.insert(id) {
            return Err(IndexError::DuplicateId(id));
        }
        self.ids.push(id);
        self.codes.extend(codes);
        Ok(())
    }

    pub fn codebook(&self) -> &PqCodebook {
        &self.codebook
    }

    pub fn ids(&self) -> &[PassageId] {
        &self.ids
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn row_codes(&self, row: usize) -> &[u8] {
        let m = self.codebook.m;
        &self.codes[row * m..(row + 1) * m]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Approximate top-`k`: score is the sum of per-subspace table lookups.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if self.is_empty() {
            return Err(IndexError::Empty);
        }
        let table = self.codebook.adc_table(query)?;
        let kc = self.codebook.codes_per_subspace();
        let hits = self
            .ids
            .iter()
            .enumerate()
            .map(|(row, &id)| {
                let score = self
                    .row_codes(row)
                    .iter()
                    .enumerate()
                    .fold(0.0f64, |acc, (j, &c)| acc + table[j * kc + c as usize] as f64)
                    as f32;
                Hit { id, score }
            })
            .collect();
        Ok(top_k(hits, k))
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

fn rotate(r: &[f32], v: &[f32]) -> Vec<f32> {
    let d = v.len();
    (0..d).map(|i| dot(&r[i * d..(i + 1) * d], v)).collect()
}

fn rotate_back(r: &[f32], v: &[f32]) -> Vec<f32> {
    let d = v.len();
    (0..d).map(|j| (0..d).map(|i| r[i * d + j] as f64 * v[i] as f64).sum::<f64>() as f32).collect()
}

/// Orthonormal `[dim, dim]` matrix from Gram-Schmidt on a Gaussian matrix.
pub(crate) fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    loop {
        let mut rows: Vec<Vec<f64>> =
            (0..dim).map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
        let mut ok = true;
        for i in 0..dim {
            // Two passes keep the basis orthogonal to working precision.
            for _ in 0..2 {
                for j in 0..i {
                    let p: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                    let (head, tail) = rows.split_at_mut(i);
                    for (x, y) in tail[0].iter_mut().zip(&head[j]) {
                        *x -= p * y;
                    }
                }
            }
            let norm = rows[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            rows[i].iter_mut().for_each(|x| *x /= norm);
        }
        if ok {
            return rows.into_iter().flatten().map(|x| x as f32).collect();
        }
    }
}

/// Largest entry of `|R Rᵀ − I|`.
pub(crate) fn orthonormality_error(r: &[f32], dim: usize) -> f64 {
    let mut worst = 0f64;
    for i in 0..dim {
        for j in 0..dim {
            let p: f64 = (0..dim).map(|c| r[i * dim + c] as f64 * r[j * dim + c] as f64).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((p - target).abs());
        }
    }
    worst
}

struct KMeans {
    points: Vec<f32>,
    dim: usize,
    centroids: Vec<f32>,
    assignment: Vec<usize>,
    distance: Vec<f64>,
    converged: bool,
}

impl KMeans {
    fn seeded(points: Vec<f32>, dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let n = points.len() / dim;
        let point = |i: usize| &points[i * dim..(i + 1) * dim];
        let mut chosen = vec![false; n];
        let first = rng.gen_range(0..n);
        chosen[first] = true;
        let mut centroids = point(first).to_vec();
        let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(first))).collect();
        for _ in 1..k {
            let total: f64 = d2.iter().sum();
            let pick = if total > 0.0 {
                let mut target = rng.gen::<f64>() * total;
                let mut pick = n - 1;
                for (i, &d) in d2.iter().enumerate() {
                    if d > 0.0 && target < d {
                        pick = i;
                        break;
                    }
                    target -= d;
                }
                if d2[pick] == 0.0 {
                    pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
                }
                pick
            } else {
                // Every point already coincides with a centroid.
                let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
                free[rng.gen_range(0..free.len())]
            };
            chosen[pick] = true;
            let c = point(pick).to_vec();
            for (i, d) in d2.iter_mut().enumerate() {
                *d = d.min(sq_dist(point(i), &c));
            }
            centroids.extend(c);
        }
        Self { assignment: vec![0; n], distance: vec![0.0; n], points, dim, centroids, converged: false }
    }

    fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    /// Assign every point to its nearest centroid; returns the summed squared error.
    fn assign(&mut self) -> f64 {
        let d = self.dim;
        let k = self.k();
        let mut sse = 0.0;
        for (i, x) in self.points.chunks_exact(d).enumerate() {
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..k {
                let dist = sq_dist(x, &self.centroids[c * d..(c + 1) * d]);
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            self.assignment[i] = best.1;
            self.distance[i] = best.0;
            sse += best.0;
        }
        sse
    }

    /// Move centroids to their cluster means and reseed empty clusters at the
    /// worst-served points.
    fn update(&mut self) {
        let d = self.dim;
        let k = self.k();
        let mut sums = vec![0f64; k * d];
        let mut counts = vec![0usize; k];
        for (i, x) in self.points.chunks_exact(d).enumerate() {
            let c = self.assignment[i];
            counts[c] += 1;
            for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(x) {
                *s += *v as f64;
            }
        }
        let mut shift = 0f64;
        let mut far = self.distance.clone();
        for c in 0..k {
            let new: Vec<f32> = if counts[c] > 0 {
                sums[c * d..(c + 1) * d].iter().map(|s| (s / counts[c] as f64) as f32).collect()
            } else {
                let (i, _) = far
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
                far[i] = f64::NEG_INFINITY;
                self.points[i * d..(i + 1) * d].to_vec()
            };
            let old = &mut self.centroids[c * d..(c + 1) * d];
            shift = shift.max(sq_dist(old, &new).sqrt());
            old.copy_from_slice(&new);
        }
        self.converged = shift < SHIFT_TOL;
    }
}
