use irag_core::data::{encode_example, synth_data, Corpus, OverlapRetriever, TaskMix};
use irag_core::trainer::{build_candidates, candidate_logliks, positives_of, step_loss, LoglikRequest, LossSettings, StepExample};
use irag_core::{target_distribution, DistillationTemperatures, Model, ModelConfig, Params, Stage};
use irag_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
pub const MAX_REL: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely; central differences
/// in f64 resolve them only to about this level.
const ABS_FLOOR: f64 = 1e-7;
const COORDS_PER_TENSOR: usize = 12;
const DIRECTIONS: usize = 4;

struct Fixture {
    cfg: ModelConfig,
    corpus: Corpus,
    params: Params<f64>,
    prompts: Vec<(Vec<u32>, Vec<u32>)>,
    candidates: Vec<irag_core::trainer::CandidateSet>,
    targets: Vec<Vec<f64>>,
}

fn fixture() -> Fixture {
    let d = synth_data(3, 16, 8, 4, &TaskMix::default()).unwrap();
    let tok = d.tokenizer();
    let mut cfg = ModelConfig::tiny(tok.vocab_size());
    cfg.retrieval_fanin = 3;
    let corpus = Corpus::new(d.corpus.clone(), &tok, cfg.max_passage_len).unwrap();
    let model = Model::new(cfg.clone(), tok.clone(), 21).unwrap();
    let retriever = OverlapRetriever::new(&corpus.records);
    let examples = &d.train[..2];
    let rankings: Vec<Vec<u64>> = examples.iter().map(|e| retriever.rank(&e.query)).collect();
    let prompts: Vec<_> = examples.iter().map(|e| encode_example(&tok, e)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let candidates: Vec<_> = (0..2)
        .map(|i| {
            let peers = positives_of(&rankings[1 - i]).unwrap().to_vec();
            build_candidates(&rankings[i], &peers, 9, &mut rng).unwrap()
        })
        .collect();
    let requests: Vec<LoglikRequest> = prompts
        .iter()
        .zip(&candidates)
        .map(|((p, r), c)| LoglikRequest { prompt: p, response: r, candidates: &c.all })
        .collect();
    let targets = candidate_logliks(&model, &requests, &corpus)
        .unwrap()
        .iter()
        .map(|ll| target_distribution(ll, 1.0).unwrap())
        .collect();
    // Larger weights than the initialiser so every path carries signal.
    let mut params = model.params.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    Fixture { cfg, corpus, params, prompts, candidates, targets }
}

fn batch<'a>(f: &'a Fixture, stage: Stage, generation: Option<&[Vec<usize>]>) -> Vec<StepExample<'a>> {
    (0..2)
        .map(|i| StepExample {
            prompt: &f.prompts[i].0,
            response: &f.prompts[i].1,
            candidates: f.candidates[i].clone(),
            target: (stage == Stage::SelfDistill).then(|| f.targets[i].clone()),
            generation: generation.map(|g| g[i].clone()),
        })
        .collect()
}

/// Worst relative error between autograd and central differences, and where.
pub fn worst_error(stage: Stage) -> (f64, String) {
    let f = fixture();
    let settings = LossSettings { stage, lambda: 1.0, temperatures: DistillationTemperatures::default() };
    let first = step_loss(&f.cfg, &f.params, None, &f.corpus, &batch(&f, stage, None), &settings, true).unwrap();
    let generation = first.generation.clone();
    let fixed = batch(&f, stage, Some(&generation));
    let out = step_loss(&f.cfg, &f.params, None, &f.corpus, &fixed, &settings, true).unwrap();
    assert!(out.breakdown.j_ret > 0.0 && out.breakdown.j_gen > 0.0);
    let grads: Vec<Tensor<f64>> = out.grads.unwrap();
    let loss = |p: &Params<f64>| step_loss(&f.cfg, p, None, &f.corpus, &fixed, &settings, false).unwrap().breakdown.j_total;

    let names: Vec<String> = f.params.named().into_iter().map(|(n, _)| n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = (0.0f64, String::new());
    let mut work = f.params.clone();
    for (ti, name) in names.iter().enumerate() {
        let g = grads[ti].data();
        let mut coords: Vec<usize> = (0..COORDS_PER_TENSOR).map(|_| rng.gen_range(0..g.len())).collect();
        let largest = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap();
        coords.push(largest);
        for j in coords {
            let orig = work.tensors()[ti].data()[j];
            work.tensors_mut()[ti].data_mut()[j] = orig + H;
            let up = loss(&work);
            work.tensors_mut()[ti].data_mut()[j] = orig - H;
            let down = loss(&work);
            work.tensors_mut()[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * H);
            let rel = (g[j] - numeric).abs() / g[j].abs().max(numeric.abs()).max(ABS_FLOOR);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{j}]: autograd {} numeric {numeric}", g[j]));
            }
        }
    }

    // Unit-length directional derivatives move every parameter at once.
    for _ in 0..DIRECTIONS {
        let total: usize = grads.iter().map(|g| g.numel()).sum();
        let unit = 1.0 / (total as f64).sqrt();
        let dirs: Vec<Vec<f64>> =
            grads.iter().map(|g| (0..g.numel()).map(|_| if rng.gen_bool(0.5) { unit } else { -unit }).collect()).collect();
        let analytic: f64 = grads.iter().zip(&dirs).flat_map(|(g, d)| g.data().iter().zip(d).map(|(a, b)| a * b)).sum();
        let shifted = |sign: f64| {
            let mut p = f.params.clone();
            for (t, d) in p.tensors_mut().into_iter().zip(&dirs) {
                t.data_mut().iter_mut().zip(d).for_each(|(v, s)| *v += sign * H * s);
            }
            loss(&p)
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * H);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
        if rel > worst.0 {
            worst = (rel, format!("direction: autograd {analytic} numeric {numeric}"));
        }
    }
    worst
}
