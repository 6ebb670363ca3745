use irag_core::data::{encode_example, synth_data, Corpus, OverlapRetriever, SynthData, TaskMix};
use irag_core::trainer::{
    build_candidates, candidate_logliks, positives_of, rank_windows, stage_for_epoch, step_loss, train, Adam,
    LoglikRequest, LossSettings, StepExample, TrainConfig, TrainSchedule, METRICS_FILE,
};
use irag_core::{CoreError, DistillationTemperatures, FrozenMode, Model, ModelConfig, Stage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> (SynthData, Corpus, ModelConfig) {
    let d = synth_data(2, 24, 20, 4, &TaskMix::default()).unwrap();
    let tok = d.tokenizer();
    let cfg = ModelConfig::tiny(tok.vocab_size());
    let corpus = Corpus::new(d.corpus.clone(), &tok, cfg.max_passage_len).unwrap();
    (d, corpus, cfg)
}

fn short_run(epochs: usize, warmup: usize) -> TrainConfig {
    TrainConfig {
        schedule: TrainSchedule { total_epochs: epochs, warmup_epochs: warmup, batch_size: 4, learning_rate: 1e-3, seed: 5 },
        dev_size: 0,
        ..TrainConfig::default()
    }
}

fn data<'a>(d: &'a SynthData, corpus: &'a Corpus) -> irag_core::trainer::TrainData<'a> {
    irag_core::trainer::TrainData { corpus, train: &d.train, dev: &[], filler: &d.filler }
}

#[test]
fn stage_schedule() {
    let s = TrainSchedule::default();
    assert_eq!(stage_for_epoch(0, &s).unwrap(), Stage::Warmup);
    assert_eq!(stage_for_epoch(2, &s).unwrap(), Stage::Warmup);
    assert_eq!(stage_for_epoch(3, &s).unwrap(), Stage::SelfDistill);
    assert_eq!(stage_for_epoch(9, &s).unwrap(), Stage::SelfDistill);
    assert!(stage_for_epoch(10, &s).is_err());
    let warm_only = TrainSchedule { warmup_epochs: 10, ..s.clone() };
    assert!((0..10).all(|e| stage_for_epoch(e, &warm_only).unwrap() == Stage::Warmup));
    let distill_only = TrainSchedule { warmup_epochs: 0, ..s.clone() };
    assert_eq!(stage_for_epoch(0, &distill_only).unwrap(), Stage::SelfDistill);
    assert!(TrainSchedule { warmup_epochs: 11, ..s }.validate().is_err());
}

#[test]
fn candidate_windows_on_fifty() {
    let ranking: Vec<u64> = (100..150).collect();
    let peers = [100, 103, 170, 171, 170];
    let a = build_candidates(&ranking, &peers, 9, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = build_candidates(&ranking, &peers, 9, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.positives, vec![100, 101, 102, 103, 104]);
    assert_eq!(a.hard_negatives.len(), 9);
    assert!(a.hard_negatives.iter().all(|id| ranking[9..].contains(id)));
    assert_eq!(a.random_negatives, vec![170, 171]);
    let expected: Vec<u64> =
        a.positives.iter().chain(&a.hard_negatives).chain(&a.random_negatives).copied().collect();
    assert_eq!(a.all, expected);

    let alone = build_candidates(&ranking, &[], 9, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(alone.random_negatives.is_empty());
}

#[test]
fn candidate_windows_shrink_with_corpus() {
    let w = rank_windows(20).unwrap();
    assert_eq!(w.positives, 2);
    assert_eq!(w.hard, 3..20);
    let w = rank_windows(6).unwrap();
    assert!(w.positives >= 1 && w.hard.start >= w.positives && w.hard.end == 6);
    let err = rank_windows(5).unwrap_err().to_string();
    assert!(err.contains("corpus too small for candidate construction"), "{err}");
    assert!(positives_of(&[1, 2, 3]).is_err());
}

#[test]
fn gold_passage_is_first_positive() {
    let (d, corpus, _) = small();
    let retriever = OverlapRetriever::new(&corpus.records);
    for qa in &d.train {
        let top = retriever.rank(&qa.query)[0];
        assert!(corpus.text(top).unwrap().ends_with(&qa.answer), "{qa:?}");
    }
}

#[test]
fn five_steps_are_bit_identical() {
    let (d, corpus, cfg) = small();
    let tc = TrainConfig { filler_prob: 0.5, ..short_run(1, 1) };
    let run = || {
        let mut m = Model::new(cfg.clone(), d.tokenizer(), 3).unwrap();
        let report = train(&mut m, &data(&d, &corpus), &tc, None, |_| {}).unwrap();
        assert_eq!(report.epochs[0].steps, 5);
        m.params
    };
    let (a, b) = (run(), run());
    for ((name, x), (_, y)) in a.named().into_iter().zip(b.named()) {
        let same = x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits());
        assert!(same, "{name} differs between identical runs");
    }
}

#[test]
fn overfit_loss_decreases() {
    let d = synth_data(4, 32, 32, 4, &TaskMix::default()).unwrap();
    let tok = d.tokenizer();
    let cfg = ModelConfig::tiny(tok.vocab_size());
    let corpus = Corpus::new(d.corpus.clone(), &tok, cfg.max_passage_len).unwrap();
    let mut model = Model::new(cfg.clone(), tok.clone(), 8).unwrap();
    let retriever = OverlapRetriever::new(&corpus.records);
    let encoded: Vec<_> = d.train.iter().map(|q| encode_example(&tok, q)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cands: Vec<_> = d
        .train
        .iter()
        .map(|q| build_candidates(&retriever.rank(&q.query), &[], 9, &mut rng).unwrap())
        .collect();
    let settings = LossSettings { stage: Stage::Warmup, lambda: 1.0, temperatures: DistillationTemperatures::default() };
    let batch = |range: std::ops::Range<usize>| -> Vec<StepExample> {
        range
            .map(|i| StepExample {
                prompt: &encoded[i].0,
                response: &encoded[i].1,
                candidates: cands[i].clone(),
                target: None,
                generation: Some(vec![0, 1, 2, 3]),
            })
            .collect()
    };
    let mut adam = Adam::new(&model.params);
    let mut first = None;
    let mut last = 0.0;
    for step in 0..50 {
        let lo = (step % 8) * 4;
        let out = step_loss(&cfg, &model.params, None, &corpus, &batch(lo..lo + 4), &settings, true).unwrap();
        if step == 0 {
            let full = step_loss(&cfg, &model.params, None, &corpus, &batch(0..32), &settings, false).unwrap();
            first = Some(full.breakdown.j_total);
        }
        adam.step(&mut model.params, &out.grads.unwrap(), 1e-3);
        last = step_loss(&cfg, &model.params, None, &corpus, &batch(0..32), &settings, false).unwrap().breakdown.j_total;
    }
    let first = first.unwrap();
    assert!(last < first, "j_total {first} -> {last}");
}

#[test]
fn lambda_zero_is_plain_generation_loss() {
    let (d, corpus, cfg) = small();
    let tok = d.tokenizer();
    let model = Model::new(cfg.clone(), tok.clone(), 1).unwrap();
    let retriever = OverlapRetriever::new(&corpus.records);
    let (p, r) = encode_example(&tok, &d.train[0]);
    let c = build_candidates(&retriever.rank(&d.train[0].query), &[], 9, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ex = StepExample { prompt: &p, response: &r, candidates: c, target: None, generation: None };
    let settings = LossSettings { stage: Stage::Warmup, lambda: 0.0, temperatures: DistillationTemperatures::default() };
    let out = step_loss(&cfg, &model.params, None, &corpus, &[ex], &settings, false).unwrap();
    assert_eq!(out.breakdown.j_total, out.breakdown.j_gen);
    assert!(out.breakdown.j_ret > 0.0);
    assert_eq!(out.generation[0].len(), cfg.retrieval_fanin);
}

#[test]
fn stages_use_disjoint_machinery() {
    let (d, corpus, cfg) = small();
    let mut m = Model::new(cfg, d.tokenizer(), 3).unwrap();
    let report = train(&mut m, &data(&d, &corpus), &short_run(2, 1), None, |_| {}).unwrap();
    let warm = report.calls[&Stage::Warmup];
    let distill = report.calls[&Stage::SelfDistill];
    assert_eq!((warm.steps, warm.nce_batches, warm.distill_batches, warm.loglik_batches), (5, 5, 0, 0));
    assert_eq!((distill.steps, distill.nce_batches, distill.distill_batches, distill.loglik_batches), (5, 0, 5, 5));
    assert_eq!(report.epochs[0].stage, Stage::Warmup);
    assert_eq!(report.epochs[1].stage, Stage::SelfDistill);
}

#[test]
fn frozen_kv_passages_never_change() {
    let (d, corpus, mut cfg) = small();
    cfg.frozen = FrozenMode::FrozenKv;
    let mut m = Model::new(cfg.clone(), d.tokenizer(), 3).unwrap();
    let passages = &corpus.passages()[..3];
    let before = m.encode_passages(passages, cfg.encoding, cfg.frozen).unwrap();
    let initial = m.params.clone();
    train(&mut m, &data(&d, &corpus), &short_run(2, 1), None, |_| {}).unwrap();
    assert_ne!(m.params, initial, "training did not move the live weights");
    let after = m.encode_passages(passages, cfg.encoding, cfg.frozen).unwrap();
    assert_eq!(before, after);
}

#[test]
fn candidate_loglik_properties() {
    let (d, corpus, cfg) = small();
    let tok = d.tokenizer();
    let model = Model::new(cfg, tok.clone(), 2).unwrap();
    let (p, r) = encode_example(&tok, &d.train[0]);
    let cands = [3u64, 3, 7, 1, 7];
    let ll = candidate_logliks(&model, &[LoglikRequest { prompt: &p, response: &r, candidates: &cands }], &corpus).unwrap();
    assert_eq!(ll.len(), 1);
    assert_eq!(ll[0].len(), cands.len());
    assert_eq!(ll[0][0].to_bits(), ll[0][1].to_bits());
    assert_eq!(ll[0][2].to_bits(), ll[0][4].to_bits());
    assert!(ll[0].iter().all(|v| v.is_finite() && *v < 0.0));
}

#[test]
fn metrics_and_checkpoints_written() {
    let (d, corpus, cfg) = small();
    let dir = tempfile::tempdir().unwrap();
    let dev = &d.eval[..2];
    let td = irag_core::trainer::TrainData { corpus: &corpus, train: &d.train, dev, filler: &d.filler };
    let mut m = Model::new(cfg, d.tokenizer(), 3).unwrap();
    let tc = TrainConfig { dev_size: 2, ..short_run(2, 1) };
    let mut seen = Vec::new();
    train(&mut m, &td, &tc, Some(dir.path()), |e| seen.push(e.epoch)).unwrap();
    assert_eq!(seen, vec![0, 1]);
    let text = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for key in ["epoch", "stage", "j_gen", "j_ret", "dev_em", "dev_recall_at_k"] {
        assert!(lines.iter().all(|l| l.get(key).is_some()), "missing {key}");
    }
    assert_eq!(lines[1]["stage"], "self_distill");
    for f in ["epoch-00.impr", "epoch-01.impr", "model.impr"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn non_finite_loss_reports_batch() {
    let (d, corpus, cfg) = small();
    let mut m = Model::new(cfg, d.tokenizer(), 3).unwrap();
    m.params.tensors_mut()[0].data_mut().fill(f32::NAN);
    let tc = TrainConfig { filler_prob: 0.0, ..short_run(1, 1) };
    match train(&mut m, &data(&d, &corpus), &tc, None, |_| {}) {
        Err(CoreError::NonFiniteLoss { step, ids, .. }) => {
            assert_eq!(step, 0);
            assert_eq!(ids.len(), 4);
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn training_generation_loss_matches_decoder() {
    let (d, corpus, cfg) = small();
    let tok = d.tokenizer();
    let model = Model::new(cfg.clone(), tok.clone(), 4).unwrap();
    let retriever = OverlapRetriever::new(&corpus.records);
    let (p, r) = encode_example(&tok, &d.train[1]);
    let c = build_candidates(&retriever.rank(&d.train[1].query), &[], 9, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let pick = vec![3, 0, 5, 1];
    let ids: Vec<u64> = pick.iter().map(|&i| c.all[i]).collect();
    let ex = StepExample { prompt: &p, response: &r, candidates: c, target: None, generation: Some(pick) };
    let settings = LossSettings { stage: Stage::Warmup, lambda: 0.0, temperatures: DistillationTemperatures::default() };
    let j_gen = step_loss(&cfg, &model.params, None, &corpus, &[ex], &settings, false).unwrap().breakdown.j_gen;

    let state = model.forward_prompt(&p).unwrap();
    let passages: Vec<&[u32]> = ids.iter().map(|&i| corpus.tokens[i as usize].as_slice()).collect();
    let kv = model.encode_passages(&passages, cfg.encoding, cfg.frozen).unwrap();
    let logits = model.continue_with_passages(&state, &kv, &r[..r.len() - 1]).unwrap();
    let v = cfg.vocab_size;
    let nll: f64 = r
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row: Vec<f64> = logits.data()[i * v..(i + 1) * v].iter().map(|&x| x as f64).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            lse - row[t as usize]
        })
        .sum::<f64>()
        / r.len() as f64;
    assert!((j_gen - nll).abs() < 1e-4, "training {j_gen} vs decoder {nll}");
}
