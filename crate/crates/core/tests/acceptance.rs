//! One pass/fail line per acceptance criterion. Criteria 5 and 6 are
//! reported but do not fail the run; see the README for why.

mod support;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use irag_core::ablate::{run_grid, AblationInput, Grid};
use irag_core::checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
use irag_core::data::{synth_data, Corpus, SynthData, Task, TaskMix};
use irag_core::eval::{predict, EvalReport};
use irag_core::trainer::{build_flat_index, train, TrainConfig, TrainData, TrainSchedule};
use irag_core::{
    argmax, distill_loss, nce_loss, retrieval_distribution, target_distribution, EncodingStrategy, FrozenMode,
    KvCompression, Model, ModelConfig, Stage, Tokenizer,
};
use irag_index::persist::{load_index, read_index, save_index, write_index};
use irag_index::server::{BackgroundServer, ServiceState};
use irag_index::{
    pq_compression_ratio, AnnIndex, ClientOptions, FlatIndex, Hit, IndexClient, PqCodebook, PqIndex, PqTrainOptions,
    SearchBackend,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn require(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, started: Instant, detail: String) -> Outcome {
    let secs = started.elapsed().as_secs_f64();
    require(secs <= limit.as_secs_f64(), format!("{detail}; {secs:.1}s (limit {}s)", limit.as_secs()))
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn gradients() -> Outcome {
    let started = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for stage in [Stage::Warmup, Stage::SelfDistill] {
        let (rel, at) = support::gradcheck::worst_error(stage);
        ok &= rel < support::gradcheck::MAX_REL;
        parts.push(format!("{} max rel err {rel:.2e} ({at})", stage.name()));
    }
    let timed = within(Duration::from_secs(120), started, parts.join("; "));
    if ok {
        timed
    } else {
        Err(timed.unwrap_or_else(|e| e))
    }
}

fn loss_oracles() -> Outcome {
    use support::oracles::{direct_kl, direct_nce, direct_softmax, instances};
    let mut worst = 0f64;
    let n = instances().len();
    for inst in instances() {
        let nce = nce_loss(&inst.scores, &inst.pos, &inst.neg).unwrap();
        worst = worst.max((nce - direct_nce(&inst.scores, &inst.pos, &inst.neg)).abs());
        let pt = target_distribution(&inst.logliks, inst.tau_t).unwrap();
        let pr = retrieval_distribution(&inst.scores, inst.tau_r).unwrap();
        for (a, b) in pt.iter().zip(direct_softmax(&inst.logliks, inst.tau_t)) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in pr.iter().zip(direct_softmax(&inst.scores, inst.tau_r)) {
            worst = worst.max((a - b).abs());
        }
        worst = worst.max((distill_loss(&pt, &pr).unwrap() - direct_kl(&pt, &pr)).abs());
    }
    let ln2 = std::f64::consts::LN_2;
    let p = [0.2, 0.5, 0.3];
    let closed = [
        (nce_loss(&[1.5, 1.5], &[0], &[1]).unwrap(), ln2),
        (target_distribution(&[-2.0; 4], 0.7).unwrap()[2], 0.25),
        (retrieval_distribution(&[3.0; 5], 1.3).unwrap()[4], 0.2),
        (distill_loss(&p, &p).unwrap(), 0.0),
    ];
    let closed_err = closed.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    require(
        worst < 1e-6 && closed_err < 1e-9,
        format!("{n} instances, max |err| {worst:.2e}; closed forms max |err| {closed_err:.2e}"),
    )
}

fn toy_model(seed: u64) -> Model {
    let words = ["the", "secret", "code", "of", "is", "what", "q", "a", "zo", "##ki", "##ra", "mel", "##on"];
    let tok = Tokenizer::new(words);
    Model::new(ModelConfig::tiny(tok.vocab_size()), tok, seed).unwrap()
}

fn architecture() -> Outcome {
    let started = Instant::now();
    let m = toy_model(3);
    let cfg = m.config.clone();
    let ids = |s: &str| m.tokenizer.encode(s);
    let p1 = ids("the secret code of mel is zoki");
    let long: Vec<u32> = p1.iter().cycle().take(cfg.max_passage_len).copied().collect();
    let prompt = ids("what is the secret code of mel");
    let mut failed = Vec::new();

    let full: Vec<&[u32]> = vec![&long; cfg.retrieval_fanin];
    for s in EncodingStrategy::ALL {
        let kv = m.encode_passages(&full, s, FrozenMode::None).unwrap();
        if *kv.layers().end() != cfg.boundary_t || kv.layer(cfg.boundary_t + 1).is_some() {
            failed.push(format!("(a) {} has KV above t", s.name()));
        }
        let state = m.forward_prompt(&prompt).unwrap();
        let min_query = state.offset;
        let max_passage = *kv.positions.iter().max().unwrap();
        if min_query != cfg.retrieval_fanin * cfg.max_passage_len || max_passage >= min_query {
            failed.push(format!("(b) {}: query starts at {min_query}, passages reach {max_passage}", s.name()));
        }
    }

    let before = m.forward_prompt(&prompt).unwrap().query;
    let mut above = m.clone();
    for l in cfg.boundary_b + 1..cfg.n_layers {
        for t in above.params.layers[l].tensors_mut() {
            t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 0.01 * (i % 5) as f32);
        }
    }
    above.params.final_norm.data_mut().iter_mut().for_each(|v| *v *= 1.5);
    if above.forward_prompt(&prompt).unwrap().query != before {
        failed.push("(c) query embedding moved".into());
    }

    let (sib_a, sib_b) = (ids("what is melon"), ids("code zo zo zo"));
    let x = m.encode_passages(&[&p1, &sib_a], EncodingStrategy::ConcatSegmented, FrozenMode::None).unwrap();
    let y = m.encode_passages(&[&p1, &sib_b], EncodingStrategy::ConcatSegmented, FrozenMode::None).unwrap();
    let own = p1.len() * cfg.kv_width();
    let same = x.keys.iter().zip(&y.keys).chain(x.values.iter().zip(&y.values)).all(|(a, b)| {
        a.data()[..own].iter().zip(&b.data()[..own]).all(|(p, q)| p.to_bits() == q.to_bits())
    });
    if !same {
        failed.push("(d) segmented passage saw its sibling".into());
    }

    let index = FlatIndex::new(cfg.embedding_dim());
    let lookup = std::collections::HashMap::<u64, Vec<u32>>::new();
    let out = m.decode(&prompt, &AnnIndex::Flat(index), &lookup, 6, 0, &KvCompression::None).unwrap();
    let mut seq = prompt.clone();
    let mut plain = Vec::new();
    for _ in 0..6 {
        let logits = m.forward_plain(&seq).unwrap();
        let next = argmax(logits.row(logits.rows() - 1));
        if next == irag_core::tokenizer::EOS {
            break;
        }
        plain.push(next);
        seq.push(next);
    }
    if out.tokens != plain {
        failed.push("(e) k=0 decode differs from the plain decoder".into());
    }
    let detail = if failed.is_empty() { "(a)-(e) hold".to_string() } else { failed.join("; ") };
    if failed.is_empty() {
        within(Duration::from_secs(60), started, detail)
    } else {
        Err(detail)
    }
}

fn brute_force(ids: &[u64], vectors: &[f32], dim: usize, q: &[f32], k: usize) -> Vec<Hit> {
    let mut all: Vec<Hit> = ids
        .iter()
        .enumerate()
        .map(|(row, &id)| {
            let s: f64 = (0..dim).map(|c| vectors[row * dim + c] as f64 * q[c] as f64).sum();
            Hit { id, score: s as f32 }
        })
        .collect();
    all.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.id.cmp(&b.id)));
    all.truncate(k);
    all
}

fn search_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut mismatches = 0;
    for inst in 0..200 {
        let n = if inst % 20 == 0 { 10_000 } else { rng.gen_range(1..=2_000) };
        let dim = rng.gen_range(1..=32);
        let ids: Vec<u64> = (0..n as u64).map(|i| i * 3 + 1).collect();
        let vectors = gaussian(n * dim, &mut rng);
        let index = FlatIndex::from_rows(dim, ids.clone(), vectors.clone()).unwrap();
        let q = gaussian(dim, &mut rng);
        let k = rng.gen_range(1..=20);
        mismatches += (index.search(&q, k).unwrap() != brute_force(&ids, &vectors, dim, &q, k)) as usize;
    }

    let (n, dim) = (4096, 32);
    let data = gaussian(n * dim, &mut ChaCha8Rng::seed_from_u64(5));
    let mut opts = PqTrainOptions::new(8, 8);
    opts.seed = 5;
    let (cb, _) = PqCodebook::train(&data, dim, opts).unwrap();
    let ids: Vec<u64> = (0..n as u64).collect();
    let pq = PqIndex::build(cb, ids.clone(), &data).unwrap();
    let flat = FlatIndex::from_rows(dim, ids, data).unwrap();
    let queries = gaussian(100 * dim, &mut ChaCha8Rng::seed_from_u64(10));
    let (mut nn_found, mut overlap) = (0, 0);
    for q in queries.chunks_exact(dim) {
        let approx = pq.search(q, 10).unwrap();
        let exact = flat.search(q, 10).unwrap();
        nn_found += approx.iter().any(|h| h.id == exact[0].id) as usize;
        overlap += approx.iter().filter(|h| exact.iter().any(|e| e.id == h.id)).count();
    }
    let recall = nn_found as f64 / 100.0;
    let overlap = overlap as f64 / 1000.0;
    let ratio = pq_compression_ratio(128, 32, 8);
    require(
        mismatches == 0 && recall >= 0.8 && ratio == 8.0,
        format!(
            "flat vs brute force: {mismatches}/200 mismatches; pq 1-recall@10 {recall:.2} (top-10 overlap {overlap:.2}); \
             compression ratio {ratio}"
        ),
    )
}

fn train_quick(d: &SynthData, corpus: &Corpus, epochs: usize, seed: u64) -> Model {
    let mut m = Model::new(ModelConfig::tiny(d.tokenizer().vocab_size()), d.tokenizer(), seed).unwrap();
    let tc = TrainConfig {
        schedule: TrainSchedule { total_epochs: epochs, warmup_epochs: 1, ..TrainSchedule::default() },
        dev_size: 0,
        ..TrainConfig::default()
    };
    let td = TrainData { corpus, train: &d.train, dev: &[], filler: &d.filler };
    train(&mut m, &td, &tc, None, |_| {}).unwrap();
    m
}

fn end_to_end() -> Outcome {
    let started = Instant::now();
    let d = synth_data(1, 256, 2048, 512, &TaskMix::default()).unwrap();
    let tok = d.tokenizer();
    let cfg = ModelConfig::tiny(tok.vocab_size());
    let corpus = Corpus::new(d.corpus.clone(), &tok, cfg.max_passage_len).unwrap();
    let dev: Vec<_> = d.eval.iter().filter(|e| e.task == Task::Lookup.name()).cloned().collect();
    let tc = TrainConfig { dev_size: 0, ..TrainConfig::default() };
    let mut m = Model::new(cfg, tok, 1).unwrap();
    let td = TrainData { corpus: &corpus, train: &d.train, dev: &[], filler: &d.filler };
    train(&mut m, &td, &tc, None, |e| {
        eprintln!("  epoch {} {}: j_gen {:.3} j_ret {:.3} ({:.0}s)", e.epoch, e.stage.name(), e.j_gen, e.j_ret, e.seconds)
    })
    .unwrap();
    let index = AnnIndex::Flat(build_flat_index(&m, &corpus).unwrap());
    let k = m.config.retrieval_fanin;
    let preds = predict(&m, &corpus, &dev, &index, k, &KvCompression::None).unwrap();
    let r = EvalReport::from_predictions(&preds, k);
    let secs = started.elapsed().as_secs_f64();
    require(
        r.recall_at_k >= 0.9 && r.exact_match >= 0.85 && secs <= 900.0,
        format!(
            "held-in-format split ({} examples): recall@{k} {:.3} (need 0.9), EM {:.3} (need 0.85); {secs:.0}s",
            r.n, r.recall_at_k, r.exact_match
        ),
    )
}

fn ablation() -> Outcome {
    let data = synth_data(1, 32, 128, 32, &TaskMix::default()).unwrap();
    let base = ModelConfig::tiny(data.tokenizer().vocab_size());
    let train = TrainConfig {
        schedule: TrainSchedule { total_epochs: 4, warmup_epochs: 2, ..TrainSchedule::default() },
        dev_size: 0,
        ..TrainConfig::default()
    };
    let input = AblationInput { data: &data, base, train, seeds: vec![1, 2, 3], n_eval: None };
    let objectives = run_grid(&input, Grid::Objectives, |_| {}).unwrap();
    let shifted = |arm: &str| objectives.mean(arm, Task::Shifted.name()).unwrap().1;
    let (both, warm, distill) = (shifted("warmup+self-distillation"), shifted("warmup only"), shifted("self-distillation only"));
    let encoding = run_grid(&input, Grid::Encoding, |_| {}).unwrap();
    let full = encoding.mean_dev_em(EncodingStrategy::ConcatFull.name()).unwrap();
    let seg = encoding.mean_dev_em(EncodingStrategy::ConcatSegmented.name()).unwrap();
    require(
        both >= warm && warm >= distill && full >= seg,
        format!(
            "shifted recall@4: both {both:.3}, warmup only {warm:.3} ({:+.3}), distill only {distill:.3} ({:+.3}); \
             dev EM full {full:.3} vs segmented {seg:.3} ({:+.3})",
            both - warm,
            warm - distill,
            full - seg
        ),
    )
}

fn service() -> Outcome {
    let started = Instant::now();
    let dim = 16;
    let n = 2000;
    let ids: Vec<u64> = (0..n as u64).collect();
    let index = AnnIndex::Flat(
        FlatIndex::from_rows(dim, ids, gaussian(n * dim, &mut ChaCha8Rng::seed_from_u64(70))).unwrap(),
    );
    let server = BackgroundServer::start("127.0.0.1:0", Arc::new(ServiceState::frozen(index.clone())), 32).unwrap();
    let addr = server.addr().to_string();
    let index = Arc::new(index);
    let workers: Vec<_> = (0..16u64)
        .map(|t| {
            let (addr, index) = (addr.clone(), index.clone());
            std::thread::spawn(move || {
                let client = IndexClient::connect(addr, ClientOptions::default());
                let queries = gaussian(1000 * dim, &mut ChaCha8Rng::seed_from_u64(100 + t));
                let (mut differ, mut errors) = (0, 0);
                for (i, q) in queries.chunks_exact(dim).enumerate() {
                    let k = 1 + i % 10;
                    match SearchBackend::search(&client, q, k) {
                        Ok(hits) => differ += (hits != index.search(q, k).unwrap()) as usize,
                        Err(_) => errors += 1,
                    }
                }
                (differ, errors)
            })
        })
        .collect();
    let (mut differ, mut errors) = (0, 0);
    for w in workers {
        let (d, e) = w.join().unwrap();
        differ += d;
        errors += e;
    }
    server.shutdown().unwrap();
    let detail = format!("16 clients x 1000 searches: {differ} differing responses, {errors} errors");
    if differ == 0 && errors == 0 {
        within(Duration::from_secs(120), started, detail)
    } else {
        Err(detail)
    }
}

fn persistence() -> Outcome {
    let d = synth_data(5, 32, 48, 16, &TaskMix::default()).unwrap();
    let tok = d.tokenizer();
    let corpus = Corpus::new(d.corpus.clone(), &tok, ModelConfig::tiny(tok.vocab_size()).max_passage_len).unwrap();
    let model = train_quick(&d, &corpus, 2, 4);
    let dir = tempfile::tempdir().unwrap();

    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &model).unwrap();
    let back = read_checkpoint(bytes.as_slice()).unwrap();
    let mut again = Vec::new();
    write_checkpoint(&mut again, &back).unwrap();
    let params_equal = model.params.named().into_iter().zip(back.params.named()).all(|((_, a), (_, b))| {
        a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let ckpt_ok = bytes == again && params_equal && back.config == model.config;

    let flat = AnnIndex::Flat(build_flat_index(&model, &corpus).unwrap());
    let (dim, vectors) = match &flat {
        AnnIndex::Flat(f) => (f.dim(), f.vectors().to_vec()),
        _ => unreachable!(),
    };
    let mut opts = PqTrainOptions::new(4, 4);
    opts.seed = 2;
    let (cb, _) = PqCodebook::train(&vectors, dim, opts).unwrap();
    let pq = AnnIndex::Pq(PqIndex::build(cb, (0..corpus.len() as u64).collect(), &vectors).unwrap());
    let index_ok = [&flat, &pq].iter().all(|idx| {
        let mut a = Vec::new();
        write_index(&mut a, idx).unwrap();
        let re = read_index(&mut a.as_slice()).unwrap();
        let mut b = Vec::new();
        write_index(&mut b, &re).unwrap();
        a == b && &&re == idx
    });

    let (ckpt, idx) = (dir.path().join("model.impr"), dir.path().join("flat.idx"));
    save_checkpoint(&ckpt, &model).unwrap();
    save_index(&idx, &flat).unwrap();
    let k = model.config.retrieval_fanin;
    let before = predict(&model, &corpus, &d.eval, &flat, k, &KvCompression::None).unwrap();
    let (m2, i2) = (load_checkpoint(&ckpt).unwrap(), load_index(&idx).unwrap());
    let after = predict(&m2, &corpus, &d.eval, &i2, k, &KvCompression::None).unwrap();
    let eval_ok = before == after;
    require(
        ckpt_ok && index_ok && eval_ok,
        format!(
            "checkpoint bit-exact {ckpt_ok}; flat+pq index bit-exact {index_ok}; {} predictions identical after reload {eval_ok}",
            before.len()
        ),
    )
}

struct Criterion {
    id: u8,
    name: &'static str,
    gating: bool,
    check: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "gradient oracle", gating: true, check: gradients },
        Criterion { id: 2, name: "loss oracles", gating: true, check: loss_oracles },
        Criterion { id: 3, name: "architecture invariants", gating: true, check: architecture },
        Criterion { id: 4, name: "search oracle", gating: true, check: search_oracle },
        Criterion { id: 5, name: "end-to-end desk-scale run", gating: false, check: end_to_end },
        Criterion { id: 6, name: "ablation directionality", gating: false, check: ablation },
        Criterion { id: 7, name: "service differential", gating: true, check: service },
        Criterion { id: 8, name: "persistence", gating: true, check: persistence },
    ];
    // IRAG_ACCEPTANCE=1,3,8 runs a subset.
    let only: Option<Vec<u8>> =
        std::env::var("IRAG_ACCEPTANCE").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut gating_failures = 0;
    for c in criteria.iter().filter(|c| only.as_ref().map_or(true, |o| o.contains(&c.id))) {
        let outcome = catch_unwind(AssertUnwindSafe(c.check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let (verdict, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        let note = if outcome.is_err() && !c.gating { " [reported, not gating]" } else { "" };
        println!("criterion {} {verdict}{note}: {}: {detail}", c.id, c.name);
        std::io::stdout().flush().unwrap();
        gating_failures += (outcome.is_err() && c.gating) as usize;
    }
    if gating_failures > 0 {
        std::process::exit(1);
    }
}
