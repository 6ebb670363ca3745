//! Candidate sets, the warmup → self-distillation schedule and the
//! optimisation loop.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use irag_index::{AnnIndex, FlatIndex};
use irag_tensor::{Scalar, Tape, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::compress::KvCompression;
use crate::config::{shift_positions, ModelConfig};
use crate::data::{encode_example, encode_prompt, Corpus, OverlapRetriever, QaRecord, TextRecord};
use crate::error::{invalid, CoreError, Result};
use crate::eval::evaluate;
use crate::forward::{bind, embed, finish, logits, project, run_plain, Ctx, Layout, ParamVars};
use crate::model::{Model, PassageLookup};
use crate::objectives::{
    distill_loss_var, joint_loss, nce_loss_var, target_distribution, DistillationTemperatures, LossBreakdown, Stage,
};
use crate::params::Params;
use crate::passages::{bottom_pass, encode_groups, passage_embeddings};
use crate::tokenizer::BOS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self { total_epochs: 10, warmup_epochs: 3, batch_size: 4, learning_rate: 1e-3, seed: 0 }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.total_epochs {
            return Err(CoreError::Config(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(CoreError::Config("batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }
}

pub fn stage_for_epoch(epoch: usize, schedule: &TrainSchedule) -> Result<Stage> {
    if epoch >= schedule.total_epochs {
        return invalid(format!("epoch {epoch} outside 0..{}", schedule.total_epochs));
    }
    Ok(if epoch < schedule.warmup_epochs { Stage::Warmup } else { Stage::SelfDistill })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: TrainSchedule,
    pub lambda: f64,
    pub temperatures: DistillationTemperatures,
    pub n_hard: usize,
    /// Chance of inserting a plain-text batch before each retrieval batch.
    pub filler_prob: f64,
    /// Global gradient-norm limit.
    pub grad_clip: Option<f64>,
    /// Eval examples scored after every epoch.
    pub dev_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: TrainSchedule::default(),
            lambda: 1.0,
            temperatures: DistillationTemperatures::default(),
            n_hard: 9,
            filler_prob: 0.1,
            grad_clip: Some(1.0),
            dev_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub positives: Vec<u64>,
    pub hard_negatives: Vec<u64>,
    pub random_negatives: Vec<u64>,
    /// Positives, then hard negatives, then random negatives.
    pub all: Vec<u64>,
}

/// Rank windows for a ranking of `len` passages: positives are the first
/// `positives` ids and hard negatives come from `hard`. Windows shrink in
/// proportion below 50 passages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankWindows {
    pub positives: usize,
    pub hard: Range<usize>,
}

pub fn rank_windows(len: usize) -> Result<RankWindows> {
    if len < 6 {
        return invalid(format!("corpus too small for candidate construction ({len} passages)"));
    }
    let scale = len.min(50) as f64 / 50.0;
    let positives = ((5.0 * scale).round() as usize).max(1);
    let lo = ((9.0 * scale).floor() as usize).max(positives);
    Ok(RankWindows { positives, hard: lo..len.min(50) })
}

/// Positives of a reference ranking.
pub fn positives_of(ranking: &[u64]) -> Result<&[u64]> {
    Ok(&ranking[..rank_windows(ranking.len())?.positives])
}

pub fn build_candidates(
    ranking: &[u64],
    peer_positives: &[u64],
    n_hard: usize,
    rng: &mut impl Rng,
) -> Result<CandidateSet> {
    let w = rank_windows(ranking.len())?;
    let positives = ranking[..w.positives].to_vec();
    let window = &ranking[w.hard.clone()];
    let mut picks = rand::seq::index::sample(rng, window.len(), n_hard.min(window.len())).into_vec();
    picks.sort_unstable();
    let hard_negatives: Vec<u64> = picks.into_iter().map(|i| window[i]).filter(|id| !positives.contains(id)).collect();
    let mut random_negatives = Vec::new();
    for &p in peer_positives {
        if !positives.contains(&p) && !hard_negatives.contains(&p) && !random_negatives.contains(&p) {
            random_negatives.push(p);
        }
    }
    let all = positives.iter().chain(&hard_negatives).chain(&random_negatives).copied().collect();
    Ok(CandidateSet { positives, hard_negatives, random_negatives, all })
}

/// One example of a training step.
#[derive(Clone, Debug)]
pub struct StepExample<'a> {
    pub prompt: &'a [u32],
    pub response: &'a [u32],
    pub candidates: CandidateSet,
    /// Target distribution over `candidates.all` (self-distillation).
    pub target: Option<Vec<f64>>,
    /// Indices into `candidates.all` to condition generation on; by default
    /// the top `retrieval_fanin` by current score.
    pub generation: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub stage: Stage,
    pub lambda: f64,
    pub temperatures: DistillationTemperatures,
}

pub struct StepOutput<T: Scalar> {
    pub breakdown: LossBreakdown,
    /// Gradients in `Params::named` order.
    pub grads: Option<Vec<Tensor<T>>>,
    pub generation: Vec<Vec<usize>>,
    pub scores: Vec<Vec<f64>>,
}

struct Built {
    total: Var,
    j_gen: Var,
    j_ret: Var,
    generation: Vec<Vec<usize>>,
    scores: Vec<Vec<f64>>,
}

fn top_by_score(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn passage<'l>(lookup: &'l dyn PassageLookup, id: u64) -> Result<&'l [u32]> {
    lookup.passage_tokens(id).ok_or_else(|| CoreError::Invalid(format!("unknown passage id {id}")))
}

fn sum_vars<T: Scalar>(tape: &mut Tape<'_, T>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

#[allow(clippy::too_many_arguments)]
fn build<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &ModelConfig,
    pv: &ParamVars,
    snap: Option<&ParamVars>,
    lookup: &dyn PassageLookup,
    batch: &[StepExample],
    s: &LossSettings,
) -> Result<Built> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let b = cfg.boundary_b;
    let offset = shift_positions(cfg.retrieval_fanin, cfg.max_passage_len);

    let mut layout = Layout::default();
    let mut ids = Vec::new();
    let mut last = Vec::with_capacity(batch.len());
    for ex in batch {
        if ex.prompt.is_empty() || ex.response.is_empty() {
            return invalid("training examples need a prompt and a response");
        }
        if ex.candidates.all.is_empty() || ex.candidates.positives.is_empty() {
            return invalid("candidate set without positives");
        }
        layout.push(ex.prompt.len() + ex.response.len(), offset);
        ids.extend_from_slice(ex.prompt);
        ids.extend_from_slice(ex.response);
        last.push(ex.prompt.len() - 1);
    }
    let bp = bottom_pass(tape, cfg, pv, &ids, &layout, &last)?;

    let mut uniq: Vec<u64> = Vec::new();
    let mut col: HashMap<u64, usize> = HashMap::new();
    for ex in batch {
        for &c in &ex.candidates.all {
            col.entry(c).or_insert_with(|| {
                uniq.push(c);
                uniq.len() - 1
            });
        }
    }
    let toks = uniq.iter().map(|&id| passage(lookup, id)).collect::<Result<Vec<_>>>()?;
    let e_p = passage_embeddings(tape, cfg, pv, &toks)?;
    let scores_var = tape.matmul_nt(bp.query, e_p)?;
    let u = uniq.len();
    let flat = |i: usize, c: u64| i * u + col[&c];
    let sv = tape.value(scores_var);
    let scores: Vec<Vec<f64>> = batch
        .iter()
        .enumerate()
        .map(|(i, ex)| ex.candidates.all.iter().map(|&c| sv[flat(i, c)].as_f64()).collect())
        .collect();

    let mut terms = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        let all = &ex.candidates.all;
        let np = ex.candidates.positives.len();
        if all[..np] != ex.candidates.positives[..] {
            return invalid("candidate list must start with the positives");
        }
        let term = match s.stage {
            Stage::Warmup => {
                let pos: Vec<usize> = all[..np].iter().map(|&c| flat(i, c)).collect();
                let neg: Vec<usize> = all[np..].iter().map(|&c| flat(i, c)).collect();
                nce_loss_var(tape, scores_var, &pos, &neg)?
            }
            Stage::SelfDistill => {
                let Some(p_t) = &ex.target else {
                    return invalid("self-distillation needs a target distribution");
                };
                let idx: Vec<usize> = all.iter().map(|&c| flat(i, c)).collect();
                distill_loss_var(tape, scores_var, &idx, p_t, s.temperatures.tau_r)?
            }
        };
        terms.push(term);
    }
    let j_ret = sum_vars(tape, &terms)?;
    let j_ret = tape.scale(j_ret, 1.0 / batch.len() as f64)?;

    let generation: Vec<Vec<usize>> = batch
        .iter()
        .zip(&scores)
        .map(|(ex, sc)| match &ex.generation {
            Some(g) => g.clone(),
            None => top_by_score(sc, cfg.retrieval_fanin),
        })
        .collect();
    let mut groups = Vec::with_capacity(batch.len());
    for (ex, g) in batch.iter().zip(&generation) {
        if g.len() > cfg.retrieval_fanin || g.iter().any(|&j| j >= ex.candidates.all.len()) {
            return invalid("generation selection outside the candidate set");
        }
        groups.push(g.iter().map(|&j| passage(lookup, ex.candidates.all[j])).collect::<Result<Vec<_>>>()?);
    }
    let enc = encode_groups(tape, cfg, pv, snap, &groups, cfg.encoding, cfg.frozen)?;

    let mut x = bp.x_b;
    let mut proj_b = Some(bp.proj_b);
    for l in b..cfg.n_layers {
        let lv = &pv.layers[l];
        let proj = match proj_b.take() {
            Some(p) => p,
            None => project(tape, cfg, lv, x)?,
        };
        let ctx: Vec<Option<Ctx>> = batch
            .iter()
            .enumerate()
            .map(|(i, ex)| {
                let kv = enc.kv[i].as_ref().filter(|_| cfg.is_cross_layer(l))?;
                let (k, v) = kv[l - b];
                Some(Ctx { k, v, rows: enc.rows[i], visible_from: if l == b { ex.prompt.len() } else { 0 } })
            })
            .collect();
        x = finish(tape, cfg, lv, x, &proj, &layout, Some(&ctx))?.x;
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (seg, ex) in layout.segments.iter().zip(batch) {
        let first = seg.start + ex.prompt.len() - 1;
        rows.extend(first..first + ex.response.len());
        targets.extend(ex.response.iter().map(|&t| t as usize));
    }
    let picked = tape.gather_rows(x, &rows)?;
    let lg = logits(tape, cfg, pv, picked)?;
    let j_gen = tape.cross_entropy(lg, &targets, &vec![true; targets.len()])?;
    let weighted = tape.scale(j_ret, s.lambda)?;
    let total = tape.add(j_gen, weighted)?;
    Ok(Built { total, j_gen, j_ret, generation, scores })
}

fn collect_grads<T: Scalar>(tape: &Tape<'_, T>, pv: &ParamVars) -> Vec<Tensor<T>> {
    pv.all()
        .into_iter()
        .map(|v| tape.grad_tensor(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec())))
        .collect()
}

/// Joint loss of one batch, with parameter gradients when requested.
pub fn step_loss<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    snapshot: Option<&Params<T>>,
    lookup: &dyn PassageLookup,
    batch: &[StepExample],
    settings: &LossSettings,
    with_grads: bool,
) -> Result<StepOutput<T>> {
    let mut tape = if with_grads { Tape::new() } else { Tape::inference() };
    let pv = bind(&mut tape, params);
    let sv = snapshot.map(|s| bind(&mut tape, s));
    let built = build(&mut tape, cfg, &pv, sv.as_ref(), lookup, batch, settings)?;
    let breakdown = joint_loss(
        tape.scalar_value(built.j_gen).as_f64(),
        tape.scalar_value(built.j_ret).as_f64(),
        settings.lambda,
        settings.stage,
    )?;
    let grads = if with_grads {
        tape.backward(built.total)?;
        Some(collect_grads(&tape, &pv))
    } else {
        None
    };
    Ok(StepOutput { breakdown, grads, generation: built.generation, scores: built.scores })
}

/// Plain next-token loss over sequences with no retrieval.
pub fn lm_loss<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    seqs: &[&[u32]],
    with_grads: bool,
) -> Result<(f64, Option<Vec<Tensor<T>>>)> {
    let mut tape = if with_grads { Tape::new() } else { Tape::inference() };
    let pv = bind(&mut tape, params);
    let mut layout = Layout::default();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for s in seqs.iter().filter(|s| s.len() >= 2) {
        let seg = layout.push(s.len(), 0);
        let start = layout.segments[seg].start;
        rows.extend(start..start + s.len() - 1);
        targets.extend(s[1..].iter().map(|&t| t as usize));
        ids.extend_from_slice(s);
    }
    if rows.is_empty() {
        return invalid("no sequence has a next token");
    }
    let x = embed(&mut tape, &pv, &ids)?;
    let (x, _) = run_plain(&mut tape, cfg, &pv, x, &layout, 0..cfg.n_layers)?;
    let picked = tape.gather_rows(x, &rows)?;
    let lg = logits(&mut tape, cfg, &pv, picked)?;
    let loss = tape.cross_entropy(lg, &targets, &vec![true; targets.len()])?;
    let value = tape.scalar_value(loss).as_f64();
    let grads = if with_grads {
        tape.backward(loss)?;
        Some(collect_grads(&tape, &pv))
    } else {
        None
    };
    Ok((value, grads))
}

/// One conditioning request: prompt, response and candidate passages.
pub struct LoglikRequest<'a> {
    pub prompt: &'a [u32],
    pub response: &'a [u32],
    pub candidates: &'a [u64],
}

/// `log P(response | passage, prompt)` summed over response tokens, each
/// candidate conditioned on alone.
pub fn candidate_logliks(model: &Model, requests: &[LoglikRequest], lookup: &dyn PassageLookup) -> Result<Vec<Vec<f64>>> {
    let cfg = &model.config;
    let b = cfg.boundary_b;
    let offset = shift_positions(1, cfg.max_passage_len);
    let mut tape = Tape::inference();
    let pv = bind(&mut tape, &model.params);
    let snap = model.snapshot.as_ref().map(|s| bind(&mut tape, s));

    let mut uniq: Vec<u64> = Vec::new();
    let mut group: HashMap<u64, usize> = HashMap::new();
    for r in requests {
        for &c in r.candidates {
            group.entry(c).or_insert_with(|| {
                uniq.push(c);
                uniq.len() - 1
            });
        }
    }
    if uniq.is_empty() {
        return Ok(requests.iter().map(|_| Vec::new()).collect());
    }
    let groups = uniq.iter().map(|&id| Ok(vec![passage(lookup, id)?])).collect::<Result<Vec<_>>>()?;
    let enc = encode_groups(&mut tape, cfg, &pv, snap.as_ref(), &groups, cfg.encoding, cfg.frozen)?;

    let mut base = Layout::default();
    let mut ids = Vec::new();
    for r in requests {
        if r.prompt.is_empty() || r.response.is_empty() {
            return invalid("loglik requests need a prompt and a response");
        }
        base.push(r.prompt.len() + r.response.len(), offset);
        ids.extend_from_slice(r.prompt);
        ids.extend_from_slice(r.response);
    }
    let x = embed(&mut tape, &pv, &ids)?;
    let (x_b, _) = run_plain(&mut tape, cfg, &pv, x, &base, 0..b)?;

    // One copy of each request per candidate.
    let mut layout = Layout::default();
    let mut rep = Vec::new();
    let mut seg_group = Vec::new();
    let mut seg_prompt = Vec::new();
    for (r, seg) in requests.iter().zip(&base.segments) {
        for &c in r.candidates {
            layout.push(seg.len, offset);
            rep.extend(seg.start..seg.start + seg.len);
            seg_group.push(group[&c]);
            seg_prompt.push(r.prompt.len());
        }
    }
    let mut x = tape.gather_rows(x_b, &rep)?;
    for l in b..cfg.n_layers {
        let lv = &pv.layers[l];
        let proj = project(&mut tape, cfg, lv, x)?;
        let ctx: Vec<Option<Ctx>> = seg_group
            .iter()
            .zip(&seg_prompt)
            .map(|(&g, &q)| {
                let kv = enc.kv[g].as_ref().filter(|_| cfg.is_cross_layer(l))?;
                let (k, v) = kv[l - b];
                Some(Ctx { k, v, rows: enc.rows[g], visible_from: if l == b { q } else { 0 } })
            })
            .collect();
        x = finish(&mut tape, cfg, lv, x, &proj, &layout, Some(&ctx))?.x;
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut seg = 0;
    for r in requests {
        for _ in r.candidates {
            let first = layout.segments[seg].start + r.prompt.len() - 1;
            rows.extend(first..first + r.response.len());
            targets.extend(r.response.iter().map(|&t| t as usize));
            seg += 1;
        }
    }
    let picked = tape.gather_rows(x, &rows)?;
    let lg = logits(&mut tape, cfg, &pv, picked)?;
    let v = tape.value(lg);
    let vocab = cfg.vocab_size;
    let logprob = |row: usize, t: usize| {
        let r = &v[row * vocab..(row + 1) * vocab];
        let m = r.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let z: f64 = r.iter().map(|&x| (x as f64 - m).exp()).sum();
        r[t] as f64 - m - z.ln()
    };
    let mut out = Vec::with_capacity(requests.len());
    let mut row = 0;
    for r in requests {
        let mut lls = Vec::with_capacity(r.candidates.len());
        for _ in r.candidates {
            let mut ll = 0.0;
            for j in 0..r.response.len() {
                ll += logprob(row + j, targets[row + j]);
            }
            row += r.response.len();
            lls.push(ll);
        }
        out.push(lls);
    }
    Ok(out)
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut Params, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }
}

/// Scale gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grads(grads: &mut [Tensor], max_norm: Option<f64>) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if let Some(max) = max_norm {
        if norm > max {
            let s = (max / norm) as f32;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCalls {
    pub steps: usize,
    pub nce_batches: usize,
    pub distill_batches: usize,
    pub loglik_batches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: Stage,
    pub j_gen: f64,
    pub j_ret: f64,
    pub j_total: f64,
    pub dev_em: f64,
    pub dev_recall_at_k: f64,
    pub steps: usize,
    pub filler_steps: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub calls: BTreeMap<Stage, StageCalls>,
}

pub struct TrainData<'a> {
    pub corpus: &'a Corpus,
    pub train: &'a [QaRecord],
    pub dev: &'a [QaRecord],
    pub filler: &'a [TextRecord],
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.impr";

/// Flat index over every corpus passage's embedding under `model`.
pub fn build_flat_index(model: &Model, corpus: &Corpus) -> Result<FlatIndex> {
    let embeddings = model.embed_passages(&corpus.passages())?;
    let mut index = FlatIndex::new(model.config.embedding_dim());
    for (i, e) in embeddings.iter().enumerate() {
        index.add(i as u64, e)?;
    }
    Ok(index)
}

/// Train `model` in place. With `out_dir`, metrics and per-epoch
/// checkpoints are written there.
pub fn train(
    model: &mut Model,
    data: &TrainData,
    tc: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    let sched = &tc.schedule;
    sched.validate()?;
    if data.train.is_empty() {
        return invalid("no training examples");
    }
    rank_windows(data.corpus.len())?;
    let cfg = model.config.clone();
    let tok = model.tokenizer.clone();
    let encoded: Vec<(Vec<u32>, Vec<u32>)> = data.train.iter().map(|qa| encode_example(&tok, qa)).collect();
    let retriever = OverlapRetriever::new(&data.corpus.records);
    let rankings: Vec<Vec<u64>> = data
        .train
        .iter()
        .map(|qa| {
            let mut r = retriever.rank(&qa.query);
            r.truncate(50);
            r
        })
        .collect();
    let filler: Vec<Vec<u32>> = data
        .filler
        .iter()
        .map(|f| {
            let mut s = vec![BOS];
            s.extend(tok.encode(&f.text));
            s
        })
        .collect();
    let dev = &data.dev[..tc.dev_size.min(data.dev.len())];

    if model.snapshot.is_none() {
        let mut s = model.params.clone();
        s.set_requires_grad(false);
        model.snapshot = Some(s);
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(METRICS_FILE), b"")?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut adam = Adam::new(&model.params);
    let per_epoch = data.train.len().div_ceil(sched.batch_size);
    let total_steps = (per_epoch * sched.total_epochs).max(1);
    let mut step = 0usize;
    let mut report = TrainReport { epochs: Vec::new(), calls: BTreeMap::new() };

    for epoch in 0..sched.total_epochs {
        let stage = stage_for_epoch(epoch, sched)?;
        let started = Instant::now();
        let settings = LossSettings { stage, lambda: tc.lambda, temperatures: tc.temperatures };
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum_gen, mut sum_ret, mut sum_total) = (0.0, 0.0, 0.0);
        let (mut steps, mut filler_steps) = (0usize, 0usize);

        for chunk in order.chunks(sched.batch_size) {
            let lr = sched.learning_rate * (1.0 - step as f64 / total_steps as f64);
            if !filler.is_empty() && rng.gen_bool(tc.filler_prob) {
                let seqs: Vec<&[u32]> =
                    (0..sched.batch_size).map(|_| filler[rng.gen_range(0..filler.len())].as_slice()).collect();
                let (loss, grads) = lm_loss(&cfg, &model.params, &seqs, true).map_err(|e| non_finite(e, step, &[]))?;
                if !loss.is_finite() {
                    return Err(CoreError::NonFiniteLoss { step, ids: Vec::new(), detail: "plain-text batch".into() });
                }
                let mut grads = grads.expect("requested");
                clip_grads(&mut grads, tc.grad_clip);
                adam.step(&mut model.params, &grads, lr);
                filler_steps += 1;
            }

            let positives: Vec<&[u64]> =
                chunk.iter().map(|&i| positives_of(&rankings[i])).collect::<Result<_>>()?;
            let mut batch = Vec::with_capacity(chunk.len());
            for (j, &i) in chunk.iter().enumerate() {
                let peers: Vec<u64> =
                    positives.iter().enumerate().filter(|&(k, _)| k != j).flat_map(|(_, p)| p.iter().copied()).collect();
                let candidates = build_candidates(&rankings[i], &peers, tc.n_hard, &mut rng)?;
                // Warmup conditions on the reference top positives in random
                // order; self-distillation uses the current scores.
                let generation = (stage == Stage::Warmup).then(|| {
                    let mut g: Vec<usize> = (0..candidates.positives.len().min(cfg.retrieval_fanin)).collect();
                    g.shuffle(&mut rng);
                    g
                });
                batch.push(StepExample {
                    prompt: &encoded[i].0,
                    response: &encoded[i].1,
                    candidates,
                    target: None,
                    generation,
                });
            }
            let calls = report.calls.entry(stage).or_default();
            calls.steps += 1;
            match stage {
                Stage::Warmup => calls.nce_batches += 1,
                Stage::SelfDistill => {
                    calls.distill_batches += 1;
                    calls.loglik_batches += 1;
                    let requests: Vec<LoglikRequest> = batch
                        .iter()
                        .map(|ex| LoglikRequest { prompt: ex.prompt, response: ex.response, candidates: &ex.candidates.all })
                        .collect();
                    let lls = candidate_logliks(model, &requests, data.corpus)?;
                    for (ex, ll) in batch.iter_mut().zip(lls) {
                        ex.target = Some(target_distribution(&ll, tc.temperatures.tau_t)?);
                    }
                }
            }
            let out = step_loss(&cfg, &model.params, model.snapshot.as_ref(), data.corpus, &batch, &settings, true)
                .map_err(|e| non_finite(e, step, chunk))?;
            let bd = out.breakdown;
            let mut grads = out.grads.expect("requested");
            let grads_finite = grads.iter().all(|g| g.is_finite());
            if !(bd.j_total.is_finite() && grads_finite) {
                return Err(CoreError::NonFiniteLoss {
                    step,
                    ids: chunk.to_vec(),
                    detail: format!("j_gen={} j_ret={} grads_finite={grads_finite}", bd.j_gen, bd.j_ret),
                });
            }
            clip_grads(&mut grads, tc.grad_clip);
            adam.step(&mut model.params, &grads, lr);
            sum_gen += bd.j_gen;
            sum_ret += bd.j_ret;
            sum_total += bd.j_total;
            steps += 1;
            step += 1;
        }

        let (dev_em, dev_recall_at_k) = if dev.is_empty() {
            (0.0, 0.0)
        } else {
            let index = AnnIndex::Flat(build_flat_index(model, data.corpus)?);
            let r = evaluate(model, data.corpus, dev, &index, cfg.retrieval_fanin, &KvCompression::None)?;
            (r.exact_match, r.recall_at_k)
        };
        let n = steps.max(1) as f64;
        let m = EpochMetrics {
            epoch,
            stage,
            j_gen: sum_gen / n,
            j_ret: sum_ret / n,
            j_total: sum_total / n,
            dev_em,
            dev_recall_at_k,
            steps,
            filler_steps,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(dir) = out_dir {
            let mut f = fs::OpenOptions::new().append(true).open(dir.join(METRICS_FILE))?;
            writeln!(f, "{}", serde_json::to_string(&m).expect("metrics serialize"))?;
            save_checkpoint(&dir.join(format!("epoch-{epoch:02}.impr")), model)?;
        }
        on_epoch(&m);
        report.epochs.push(m);
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join(FINAL_CHECKPOINT), model)?;
    }
    Ok(report)
}

fn non_finite(e: CoreError, step: usize, ids: &[usize]) -> CoreError {
    match e {
        CoreError::Tensor(t @ TensorError::NonFinite { .. }) => {
            CoreError::NonFiniteLoss { step, ids: ids.to_vec(), detail: t.to_string() }
        }
        other => other,
    }
}

/// Prompt tokens of a query as used at inference.
pub fn prompt_tokens(model: &Model, query: &str) -> Vec<u32> {
    encode_prompt(&model.tokenizer, query)
}
