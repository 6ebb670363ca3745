use irag_index::{FlatIndex, Hit};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Full sort of every score, computed one coordinate at a time.
fn brute_force(ids: &[u64], vectors: &[f32], dim: usize, q: &[f32], k: usize) -> Vec<Hit> {
    let mut all = Vec::new();
    for (row, &id) in ids.iter().enumerate() {
        let mut acc = 0f64;
        for c in 0..dim {
            acc += vectors[row * dim + c] as f64 * q[c] as f64;
        }
        all.push(Hit { id, score: acc as f32 });
    }
    all.sort_by(|a, b| {
        if a.score > b.score {
            std::cmp::Ordering::Less
        } else if a.score < b.score {
            std::cmp::Ordering::Greater
        } else {
            a.id.cmp(&b.id)
        }
    });
    all.truncate(k);
    all
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[test]
fn matches_brute_force_on_random_256x32() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, dim) = (256, 32);
    let ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + 3).collect();
    let vectors = gaussian(n * dim, &mut rng);
    let index = FlatIndex::from_rows(dim, ids.clone(), vectors.clone()).unwrap();
    for _ in 0..20 {
        let q = gaussian(dim, &mut rng);
        assert_eq!(index.search(&q, 10).unwrap(), brute_force(&ids, &vectors, dim, &q, 10));
    }
}

#[test]
fn matches_brute_force_at_ten_thousand_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, dim) = (10_000, 16);
    let ids: Vec<u64> = (0..n as u64).rev().collect();
    let vectors = gaussian(n * dim, &mut rng);
    let index = FlatIndex::from_rows(dim, ids.clone(), vectors.clone()).unwrap();
    let q = gaussian(dim, &mut rng);
    assert_eq!(index.search(&q, 50).unwrap(), brute_force(&ids, &vectors, dim, &q, 50));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn flat_search_equals_oracle(
        n in 1usize..400,
        dim in 1usize..12,
        k in 1usize..30,
        // Coarse values force plenty of exact score ties.
        quantized in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| -> f32 {
            let x: f32 = rng.sample(StandardNormal);
            if quantized { x.round() } else { x }
        };
        let vectors: Vec<f32> = (0..n * dim).map(|_| draw(&mut rng)).collect();
        let q: Vec<f32> = (0..dim).map(|_| draw(&mut rng)).collect();
        let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 13 % 1009 + i * 1009).collect();
        ids.reverse();
        let index = FlatIndex::from_rows(dim, ids.clone(), vectors.clone()).unwrap();
        let got = index.search(&q, k).unwrap();
        prop_assert_eq!(got.len(), k.min(n));
        prop_assert_eq!(got, brute_force(&ids, &vectors, dim, &q, k));
    }
}
