use std::collections::BTreeMap;

use irag_tensor::{rng, Scalar, Tensor};

use crate::config::ModelConfig;
use crate::error::{invalid, Result};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T: Scalar = f32> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

const LAYER_FIELDS: [&str; 9] = ["attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down"];

impl<T: Scalar> LayerParams<T> {
    pub fn tensors(&self) -> [&Tensor<T>; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// All model weights. Matrices are `[in, out]`; the output projection reuses
/// the token embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T: Scalar = f32> {
    pub embed: Tensor<T>,
    pub final_norm: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
}

fn shapes(cfg: &ModelConfig) -> [Vec<usize>; 9] {
    let d = cfg.d_model;
    let q = cfg.n_query_heads * cfg.head_dim;
    let kv = cfg.kv_width();
    let f = cfg.ffn_dim;
    [vec![d], vec![d, q], vec![d, kv], vec![d, kv], vec![q, d], vec![d], vec![d, f], vec![d, f], vec![f, d]]
}

impl<T: Scalar> Params<T> {
    /// Gaussian matrices (std 0.02, residual outputs scaled by `1/√(2N)`),
    /// unit norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let out_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
        let embed = rng::normal(vec![cfg.vocab_size, cfg.d_model], INIT_STD, &mut rng);
        let layers = (0..cfg.n_layers)
            .map(|_| {
                let [n1, q, k, v, o, n2, g, u, dn] = shapes(cfg);
                LayerParams {
                    attn_norm: Tensor::from_fn(n1, |_| T::one()),
                    wq: rng::normal(q, INIT_STD, &mut rng),
                    wk: rng::normal(k, INIT_STD, &mut rng),
                    wv: rng::normal(v, INIT_STD, &mut rng),
                    wo: rng::normal(o, out_std, &mut rng),
                    ffn_norm: Tensor::from_fn(n2, |_| T::one()),
                    w_gate: rng::normal(g, INIT_STD, &mut rng),
                    w_up: rng::normal(u, INIT_STD, &mut rng),
                    w_down: rng::normal(dn, out_std, &mut rng),
                }
            })
            .collect();
        let final_norm = Tensor::from_fn(vec![cfg.d_model], |_| T::one());
        let mut p = Self { embed, final_norm, layers };
        p.set_requires_grad(true);
        p
    }

    /// Stable `(name, tensor)` list: `embed`, `final_norm`, then
    /// `layers.{i}.{field}`.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed), ("final_norm".to_string(), &self.final_norm)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(l.tensors()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out
    }

    /// Same order as [`named`](Self::named).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embed, &mut self.final_norm];
        for l in self.layers.iter_mut() {
            out.extend(l.tensors_mut());
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for t in self.tensors_mut() {
            t.requires_grad = on;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let c = |t: &Tensor<T>| {
            let mut u = t.cast::<U>();
            u.requires_grad = t.requires_grad;
            u
        };
        Params {
            embed: c(&self.embed),
            final_norm: c(&self.final_norm),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: c(&l.attn_norm),
                    wq: c(&l.wq),
                    wk: c(&l.wk),
                    wv: c(&l.wv),
                    wo: c(&l.wo),
                    ffn_norm: c(&l.ffn_norm),
                    w_gate: c(&l.w_gate),
                    w_up: c(&l.w_up),
                    w_down: c(&l.w_down),
                })
                .collect(),
        }
    }

    /// Rebuild from named tensors, checking every shape against `cfg`.
    pub fn from_named(cfg: &ModelConfig, mut named: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let mut take = |name: String, shape: Vec<usize>| -> Result<Tensor<T>> {
            let t = match named.remove(&name) {
                Some(t) => t,
                None => return invalid(format!("missing tensor {name}")),
            };
            if t.shape() != shape.as_slice() {
                return invalid(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape()));
            }
            Ok(t.with_grad())
        };
        let embed = take("embed".into(), vec![cfg.vocab_size, cfg.d_model])?;
        let final_norm = take("final_norm".into(), vec![cfg.d_model])?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let [n1, q, k, v, o, n2, g, u, dn] = shapes(cfg);
            let mut f = |field: &str, s: Vec<usize>| take(format!("layers.{i}.{field}"), s);
            layers.push(LayerParams {
                attn_norm: f("attn_norm", n1)?,
                wq: f("wq", q)?,
                wk: f("wk", k)?,
                wv: f("wv", v)?,
                wo: f("wo", o)?,
                ffn_norm: f("ffn_norm", n2)?,
                w_gate: f("w_gate", g)?,
                w_up: f("w_up", u)?,
                w_down: f("w_down", dn)?,
            });
        }
        if let Some(extra) = named.keys().next() {
            return invalid(format!("unexpected tensor {extra}"));
        }
        Ok(Self { embed, final_norm, layers })
    }
}
