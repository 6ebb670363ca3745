use std::ops::RangeInclusive;

use irag_index::SearchBackend;
use irag_tensor::{Tape, Tensor};

use crate::compress::KvCompression;
use crate::config::{shift_positions, EncodingStrategy, FrozenMode, ModelConfig};
use crate::error::{invalid, CoreError, Result};
use crate::forward::{bind, embed, finish, logits, project, run_plain, Ctx, Layout};
use crate::params::Params;
use crate::passages::{encode_groups, passage_embeddings};
use crate::tokenizer::{Tokenizer, EOS};

#[derive(Clone, Debug, PartialEq)]
pub struct QueryEmbedding {
    /// Mean over each group's query heads, `h_k·d_h` long.
    pub vector: Vec<f32>,
    /// The final token's layer-`b` query state before averaging, `h_q·d_h`.
    pub grouped_raw: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PassageEmbedding {
    pub passage_id: u64,
    pub vector: Vec<f32>,
}

/// Average the final row's query heads within each key-head group.
pub fn pool_query_embedding(cfg: &ModelConfig, states: &Tensor) -> Result<QueryEmbedding> {
    let width = cfg.n_query_heads * cfg.head_dim;
    if states.cols() != width || states.numel() == 0 || cfg.n_query_heads != cfg.n_key_heads * cfg.group_size {
        return invalid(format!("query states {:?} do not match {width} columns", states.shape()));
    }
    let raw = states.row(states.rows() - 1).to_vec();
    let (g, dh) = (cfg.group_size, cfg.head_dim);
    let mut vector = Vec::with_capacity(cfg.embedding_dim());
    for kh in 0..cfg.n_key_heads {
        for d in 0..dh {
            let s: f64 = (0..g).map(|j| raw[(kh * g + j) * dh + d] as f64).sum();
            vector.push((s / g as f64) as f32);
        }
    }
    Ok(QueryEmbedding { vector, grouped_raw: raw })
}

/// The final row's key state, flattened.
pub fn pool_passage_embedding(cfg: &ModelConfig, key_states: &Tensor) -> Result<Vec<f32>> {
    if key_states.cols() != cfg.kv_width() || key_states.numel() == 0 {
        return invalid(format!("key states {:?} do not match {} columns", key_states.shape(), cfg.kv_width()));
    }
    Ok(key_states.row(key_states.rows() - 1).to_vec())
}

/// Dot-product relevance score.
pub fn score(q: &[f32], p: &[f32]) -> Result<f32> {
    if q.len() != p.len() {
        return invalid(format!("embedding lengths differ: {} vs {}", q.len(), p.len()));
    }
    Ok(q.iter().zip(p).fold(0.0f64, |acc, (a, b)| acc + *a as f64 * *b as f64) as f32)
}

/// Key/value states of conditioning passages for layers `b..=t`.
#[derive(Clone, Debug, PartialEq)]
pub struct PassageKv {
    pub first_layer: usize,
    /// Post-RoPE keys per layer, `[tokens, h_k·d_h]`.
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    pub positions: Vec<usize>,
    pub passage_lens: Vec<usize>,
    pub strategy: EncodingStrategy,
    pub frozen: FrozenMode,
    /// Attention mass each token received during passage encoding.
    pub key_mass: Vec<f64>,
}

impl PassageKv {
    pub fn empty(cfg: &ModelConfig) -> Self {
        let n = cfg.boundary_t - cfg.boundary_b + 1;
        let blank = || Tensor::zeros(vec![0, cfg.kv_width()]);
        Self {
            first_layer: cfg.boundary_b,
            keys: (0..n).map(|_| blank()).collect(),
            values: (0..n).map(|_| blank()).collect(),
            positions: Vec::new(),
            passage_lens: Vec::new(),
            strategy: cfg.encoding,
            frozen: cfg.frozen,
            key_mass: Vec::new(),
        }
    }

    pub fn tokens(&self) -> usize {
        self.positions.len()
    }

    pub fn layers(&self) -> RangeInclusive<usize> {
        self.first_layer..=self.first_layer + self.keys.len() - 1
    }

    /// Keys of `layer`, or `None` when no states exist for it.
    pub fn layer(&self, layer: usize) -> Option<(&Tensor, &Tensor)> {
        let i = layer.checked_sub(self.first_layer)?;
        Some((self.keys.get(i)?, self.values.get(i)?))
    }

    /// Keep only `rows` (ascending) in every layer.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let pick = |t: &Tensor| -> Result<Tensor> {
            let w = t.cols();
            let mut data = Vec::with_capacity(rows.len() * w);
            for &r in rows {
                if r >= t.rows() {
                    return invalid(format!("row {r} out of {}", t.rows()));
                }
                data.extend_from_slice(t.row(r));
            }
            Ok(Tensor::new(vec![rows.len(), w], data)?)
        };
        let mut lens = Vec::with_capacity(self.passage_lens.len());
        let mut start = 0;
        for &len in &self.passage_lens {
            lens.push(rows.iter().filter(|&&r| r >= start && r < start + len).count());
            start += len;
        }
        Ok(Self {
            first_layer: self.first_layer,
            keys: self.keys.iter().map(pick).collect::<Result<_>>()?,
            values: self.values.iter().map(pick).collect::<Result<_>>()?,
            positions: rows.iter().map(|&r| self.positions[r]).collect(),
            passage_lens: lens,
            strategy: self.strategy,
            frozen: self.frozen,
            key_mass: rows.iter().map(|&r| self.key_mass[r]).collect(),
        })
    }
}

/// State after running a prompt through the bottom group.
#[derive(Clone, Debug)]
pub struct PromptState {
    pub tokens: Vec<u32>,
    /// Number of passages the positions were shifted for.
    pub k: usize,
    pub offset: usize,
    pub query: QueryEmbedding,
    /// Layer-`b` query projections of every prompt row, `[tokens, h_q·d_h]`.
    pub query_states_b: Tensor,
    /// Hidden states after layer `b`.
    hidden_b: Tensor,
    /// Post-RoPE keys and values of layers `0..=b`.
    cache: Vec<(Vec<f32>, Vec<f32>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    pub passage_ids: Vec<u64>,
}

/// Token ids of corpus passages.
pub trait PassageLookup {
    fn passage_tokens(&self, id: u64) -> Option<&[u32]>;
}

impl PassageLookup for std::collections::HashMap<u64, Vec<u32>> {
    fn passage_tokens(&self, id: u64) -> Option<&[u32]> {
        self.get(&id).map(Vec::as_slice)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub params: Params,
    /// Initial parameters, kept for the frozen passage modes.
    pub snapshot: Option<Params>,
}

impl Model {
    pub fn new(mut config: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.vocab_size = tokenizer.vocab_size();
        config.validate()?;
        let params = Params::init(&config, seed);
        let snapshot = (config.frozen != FrozenMode::None).then(|| {
            let mut s = params.clone();
            s.set_requires_grad(false);
            s
        });
        Ok(Self { config, tokenizer, params, snapshot })
    }

    pub fn forward_prompt(&self, tokens: &[u32]) -> Result<PromptState> {
        self.forward_prompt_k(tokens, self.config.retrieval_fanin)
    }

    /// Bottom group over the prompt with positions shifted for `k` passages.
    pub fn forward_prompt_k(&self, tokens: &[u32], k: usize) -> Result<PromptState> {
        if tokens.is_empty() {
            return invalid("empty prompt");
        }
        let cfg = &self.config;
        let b = cfg.boundary_b;
        let offset = shift_positions(k, cfg.max_passage_len);
        let mut tape = Tape::inference();
        let pv = bind(&mut tape, &self.params);
        let mut layout = Layout::default();
        layout.push(tokens.len(), offset);
        let x = embed(&mut tape, &pv, tokens)?;
        let (x, outs) = run_plain(&mut tape, cfg, &pv, x, &layout, 0..b)?;
        let proj = project(&mut tape, cfg, &pv.layers[b], x)?;
        let out_b = finish(&mut tape, cfg, &pv.layers[b], x, &proj, &layout, None)?;
        let query_states_b = tape.tensor(proj.q_pre);
        let query = pool_query_embedding(cfg, &query_states_b)?;
        let cache = outs
            .iter()
            .chain(std::iter::once(&out_b))
            .map(|o| (tape.value(o.k).to_vec(), tape.value(o.v).to_vec()))
            .collect();
        Ok(PromptState {
            tokens: tokens.to_vec(),
            k,
            offset,
            query,
            query_states_b,
            hidden_b: tape.tensor(out_b.x),
            cache,
        })
    }

    /// Retrieval embeddings for passages, each encoded alone.
    pub fn embed_passages(&self, passages: &[&[u32]]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(passages.len());
        // Bounded batches keep the packed activations small.
        for chunk in passages.chunks(256) {
            let mut tape = Tape::inference();
            let pv = bind(&mut tape, &self.params);
            let e = passage_embeddings(&mut tape, &self.config, &pv, chunk)?;
            let w = tape.cols(e);
            out.extend(tape.value(e).chunks_exact(w).map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    /// Layer-`b` key states (post-RoPE, positions from zero) of one passage
    /// encoded alone, `[tokens, h_k·d_h]`, before and after RoPE.
    pub fn passage_key_states(&self, passage: &[u32]) -> Result<(Tensor, Tensor)> {
        crate::passages::check_passage(&self.config, passage)?;
        let cfg = &self.config;
        let mut tape = Tape::inference();
        let pv = bind(&mut tape, &self.params);
        let mut layout = Layout::default();
        layout.push(passage.len(), 0);
        let x = embed(&mut tape, &pv, passage)?;
        let (x, _) = run_plain(&mut tape, cfg, &pv, x, &layout, 0..cfg.boundary_b)?;
        let proj = project(&mut tape, cfg, &pv.layers[cfg.boundary_b], x)?;
        let k = crate::forward::rope_keys(&mut tape, cfg, proj.k_pre, &layout.positions)?;
        Ok((tape.tensor(proj.k_pre), tape.tensor(k)))
    }

    pub fn encode_passages(
        &self,
        passages: &[&[u32]],
        strategy: EncodingStrategy,
        frozen: FrozenMode,
    ) -> Result<PassageKv> {
        let cfg = &self.config;
        if passages.len() > cfg.retrieval_fanin {
            return invalid(format!("{} passages exceed the fan-in of {}", passages.len(), cfg.retrieval_fanin));
        }
        if passages.is_empty() {
            return Ok(PassageKv { strategy, frozen, ..PassageKv::empty(cfg) });
        }
        let mut tape = Tape::inference();
        let pv = bind(&mut tape, &self.params);
        let snap = self.snapshot.as_ref().map(|s| bind(&mut tape, s));
        let enc =
            encode_groups(&mut tape, cfg, &pv, snap.as_ref(), &[passages.to_vec()], strategy, frozen)?;
        let layers = enc.kv[0].as_ref().expect("nonempty group");
        Ok(PassageKv {
            first_layer: cfg.boundary_b,
            keys: layers.iter().map(|&(k, _)| tape.tensor(k)).collect(),
            values: layers.iter().map(|&(_, v)| tape.tensor(v)).collect(),
            positions: enc.positions[0].clone(),
            passage_lens: passages.iter().map(|p| p.len()).collect(),
            strategy,
            frozen,
            key_mass: enc.key_mass[0].clone(),
        })
    }

    /// Plain causal forward over `tokens` from position zero (no retrieval).
    pub fn forward_plain(&self, tokens: &[u32]) -> Result<Tensor> {
        if tokens.is_empty() {
            return invalid("empty sequence");
        }
        let cfg = &self.config;
        let mut tape = Tape::inference();
        let pv = bind(&mut tape, &self.params);
        let mut layout = Layout::default();
        layout.push(tokens.len(), 0);
        let x = embed(&mut tape, &pv, tokens)?;
        let (x, _) = run_plain(&mut tape, cfg, &pv, x, &layout, 0..cfg.n_layers)?;
        let l = logits(&mut tape, cfg, &pv, x)?;
        Ok(tape.tensor(l))
    }

    /// Logits after the prompt and after each of `step_tokens`, reading
    /// `kv` in the cross-attention layers: `[1 + steps, vocab]`.
    pub fn continue_with_passages(&self, state: &PromptState, kv: &PassageKv, step_tokens: &[u32]) -> Result<Tensor> {
        let (mut dec, first) = Decoder::start(self, state, kv.clone())?;
        let mut data = first;
        for &t in step_tokens {
            data.extend(dec.step(t)?);
        }
        Ok(Tensor::new(vec![1 + step_tokens.len(), self.config.vocab_size], data)?)
    }

    /// Greedy generation with exactly one retrieval call (none when `k == 0`).
    pub fn decode(
        &self,
        prompt: &[u32],
        backend: &dyn SearchBackend,
        lookup: &dyn PassageLookup,
        max_new_tokens: usize,
        k: usize,
        compression: &KvCompression,
    ) -> Result<DecodeOutput> {
        let state = self.forward_prompt_k(prompt, k)?;
        let mut passage_ids = Vec::new();
        let kv = if k == 0 {
            PassageKv::empty(&self.config)
        } else {
            let hits = backend.search(&state.query.vector, k)?;
            passage_ids = hits.iter().map(|h| h.id).collect();
            let passages = passage_ids
                .iter()
                .map(|&id| {
                    lookup.passage_tokens(id).ok_or_else(|| CoreError::Invalid(format!("unknown passage id {id}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let kv = self.encode_passages(&passages, self.config.encoding, self.config.frozen)?;
            compression.apply(&kv)?
        };
        let tokens = self.generate(&state, kv, max_new_tokens)?;
        Ok(DecodeOutput { tokens, passage_ids })
    }

    /// Greedy continuation of a prompt state; stops at end-of-sequence.
    pub fn generate(&self, state: &PromptState, kv: PassageKv, max_new_tokens: usize) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        if max_new_tokens == 0 {
            return Ok(out);
        }
        let (mut dec, mut logits) = Decoder::start(self, state, kv)?;
        loop {
            let next = argmax(&logits);
            if next == EOS {
                break;
            }
            out.push(next);
            if out.len() == max_new_tokens {
                break;
            }
            logits = dec.step(next)?;
        }
        Ok(out)
    }
}

/// Lowest index among the maxima.
pub fn argmax(xs: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best as u32
}

/// Incremental decoding over cached self keys and fixed passage states.
pub struct Decoder<'m> {
    model: &'m Model,
    kv: PassageKv,
    cache: Vec<(Vec<f32>, Vec<f32>)>,
    next_pos: usize,
}

impl<'m> Decoder<'m> {
    /// Finish the prompt above layer `b`; returns the last prompt row's logits.
    pub fn start(model: &'m Model, state: &PromptState, kv: PassageKv) -> Result<(Self, Vec<f32>)> {
        let cfg = &model.config;
        let (b, t) = (cfg.boundary_b, cfg.boundary_t);
        if kv.layers() != (b..=t) {
            return invalid(format!("passage_kv covers layers {:?}, model needs {b}..={t}", kv.layers()));
        }
        if kv.positions.iter().any(|&p| p >= state.offset) {
            return invalid(format!("passage positions reach the prompt offset {}", state.offset));
        }
        let n = state.tokens.len();
        let mut tape = Tape::inference();
        let pv = bind(&mut tape, &model.params);
        let mut layout = Layout::default();
        layout.push(n, state.offset);
        let mut x = tape.constant(state.hidden_b.clone());
        let mut cache = state.cache.clone();
        for l in b + 1..cfg.n_layers {
            let lv = &pv.layers[l];
            let proj = project(&mut tape, cfg, lv, x)?;
            let ctx = match kv.layer(l) {
                Some((k, v)) if cfg.is_cross_layer(l) && k.rows() > 0 => Some(Ctx {
                    k: tape.constant(k.clone()),
                    v: tape.constant(v.clone()),
                    rows: k.rows(),
                    visible_from: 0,
                }),
                _ => None,
            };
            let ctx = [ctx];
            let out = finish(&mut tape, cfg, lv, x, &proj, &layout, Some(&ctx))?;
            cache.push((tape.value(out.k).to_vec(), tape.value(out.v).to_vec()));
            x = out.x;
        }
        let last = tape.slice_rows(x, n - 1, n)?;
        let lg = logits(&mut tape, cfg, &pv, last)?;
        let first = tape.value(lg).to_vec();
        Ok((Self { model, kv, cache, next_pos: state.offset + n }, first))
    }

    /// Feed one token; returns the next-token logits.
    pub fn step(&mut self, token: u32) -> Result<Vec<f32>> {
        let model = self.model;
        let cfg = &model.config;
        let w = cfg.kv_width();
        let mut tape = Tape::inference();
        let pv = bind(&mut tape, &model.params);
        let mut layout = Layout::default();
        layout.push(1, self.next_pos);
        let mut x = embed(&mut tape, &pv, &[token])?;
        for l in 0..cfg.n_layers {
            let lv = &pv.layers[l];
            let proj = project(&mut tape, cfg, lv, x)?;
            let (mut kd, mut vd) = (Vec::new(), Vec::new());
            if cfg.is_cross_layer(l) {
                if let Some((k, v)) = self.kv.layer(l) {
                    kd.extend_from_slice(k.data());
                    vd.extend_from_slice(v.data());
                }
            }
            kd.extend_from_slice(&self.cache[l].0);
            vd.extend_from_slice(&self.cache[l].1);
            let rows = kd.len() / w;
            let ctx = Ctx {
                k: tape.constant(Tensor::new(vec![rows, w], kd)?),
                v: tape.constant(Tensor::new(vec![rows, w], vd)?),
                rows,
                visible_from: 0,
            };
            let out = finish(&mut tape, cfg, lv, x, &proj, &layout, Some(&[Some(ctx)]))?;
            self.cache[l].0.extend_from_slice(tape.value(out.k));
            self.cache[l].1.extend_from_slice(tape.value(out.v));
            x = out.x;
        }
        self.next_pos += 1;
        let lg = logits(&mut tape, cfg, &pv, x)?;
        Ok(tape.value(lg).to_vec())
    }
}
