use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: usize = 1000;

pub fn direct_softmax(xs: &[f64], tau: f64) -> Vec<f64> {
    let e: Vec<f64> = xs.iter().map(|x| (x / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

pub fn direct_nce(s: &[f64], pos: &[usize], neg: &[usize]) -> f64 {
    let negs: f64 = neg.iter().map(|&n| s[n].exp()).sum();
    -pos.iter().map(|&p| (s[p].exp() / (s[p].exp() + negs)).ln()).sum::<f64>()
}

pub fn direct_kl(t: &[f64], r: &[f64]) -> f64 {
    t.iter().zip(r).map(|(&a, &b)| if a == 0.0 { 0.0 } else { a * (a / b).ln() }).sum()
}

pub struct Instance {
    pub scores: Vec<f64>,
    pub logliks: Vec<f64>,
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
    pub tau_t: f64,
    pub tau_r: f64,
}

pub fn instances() -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    (0..INSTANCES)
        .map(|_| {
            let n = rng.gen_range(2..30);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let logliks: Vec<f64> = (0..n).map(|_| rng.gen_range(-25.0..0.0)).collect();
            let n_pos = rng.gen_range(1..n);
            let mut idx: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                idx.swap(i, rng.gen_range(0..=i));
            }
            let pos = idx[..n_pos].to_vec();
            let neg = idx[n_pos..].iter().copied().filter(|_| rng.gen_bool(0.8)).collect();
            Instance { scores, logliks, pos, neg, tau_t: rng.gen_range(0.2..3.0), tau_r: rng.gen_range(0.2..3.0) }
        })
        .collect()
}
