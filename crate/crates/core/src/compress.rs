//! Compression of passage key/value states before decoding.

use irag_index::{heavy_hitter_keep, pq_compression_ratio, PqCodebook, PqTrainOptions};
use irag_tensor::Tensor;

use crate::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::model::PassageKv;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionKind {
    HeavyHitter,
    Pq,
}

/// PQ codebooks for per-head key and value vectors, one per (layer, K/V).
#[derive(Clone, Debug, PartialEq)]
pub struct KvCodec {
    pub first_layer: usize,
    pub head_dim: usize,
    pub keys: Vec<PqCodebook>,
    pub values: Vec<PqCodebook>,
}

impl KvCodec {
    /// Train on the head vectors of `samples` (all covering the same layers).
    pub fn train(cfg: &ModelConfig, samples: &[PassageKv], m: usize, bits: u32, seed: u64) -> Result<Self> {
        let Some(first) = samples.first() else {
            return invalid("no passage states to train a KV codec on");
        };
        let n_layers = first.keys.len();
        let mut keys = Vec::with_capacity(n_layers);
        let mut values = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            for (which, out) in [(0, &mut keys), (1, &mut values)] {
                let mut data = Vec::new();
                for s in samples {
                    let t = if which == 0 { &s.keys[i] } else { &s.values[i] };
                    data.extend_from_slice(t.data());
                }
                let opts = PqTrainOptions { seed: seed + (2 * i + which) as u64, ..PqTrainOptions::new(m, bits) };
                let (cb, _) = PqCodebook::train(&data, cfg.head_dim, opts)?;
                out.push(cb);
            }
        }
        Ok(Self { first_layer: first.first_layer, head_dim: cfg.head_dim, keys, values })
    }

    /// Storage ratio against 2-byte floats per head vector.
    pub fn ratio(&self) -> f64 {
        let cb = &self.keys[0];
        pq_compression_ratio(cb.dim(), cb.m(), cb.bits())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub enum KvCompression {
    #[default]
    None,
    HeavyHitter {
        keep_ratio: f64,
    },
    Pq(KvCodec),
}

/// Compressed passage states: pruned rows or codes per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedKv {
    pub kind: CompressionKind,
    pub original_token_count: usize,
    /// Kept token rows (heavy hitter).
    pub kept: Vec<usize>,
    /// `codes[l][0|1]` for keys/values: `[tokens · h_k, m]` bytes (PQ).
    pub codes: Vec<[Vec<u8>; 2]>,
}

impl KvCompression {
    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::HeavyHitter { .. } => "heavy_hitter",
            Self::Pq(_) => "pq",
        }
    }

    pub fn compress(&self, kv: &PassageKv) -> Result<Option<CompressedKv>> {
        let original_token_count = kv.tokens();
        match self {
            Self::None => Ok(None),
            Self::HeavyHitter { keep_ratio } => {
                // Each passage keeps its own heaviest share.
                let mut kept = Vec::new();
                let mut start = 0;
                for &len in &kv.passage_lens {
                    let local = heavy_hitter_keep(&kv.key_mass[start..start + len], *keep_ratio)?;
                    kept.extend(local.into_iter().map(|i| start + i));
                    start += len;
                }
                Ok(Some(CompressedKv { kind: CompressionKind::HeavyHitter, original_token_count, kept, codes: Vec::new() }))
            }
            Self::Pq(codec) => {
                if kv.first_layer != codec.first_layer || kv.keys.len() != codec.keys.len() {
                    return invalid("KV codec layer range does not match passage states");
                }
                let enc = |cb: &PqCodebook, t: &Tensor| -> Result<Vec<u8>> {
                    let mut codes = Vec::new();
                    for v in t.data().chunks_exact(codec.head_dim) {
                        codes.extend(cb.encode(v)?);
                    }
                    Ok(codes)
                };
                let codes = (0..kv.keys.len())
                    .map(|i| Ok([enc(&codec.keys[i], &kv.keys[i])?, enc(&codec.values[i], &kv.values[i])?]))
                    .collect::<Result<_>>()?;
                Ok(Some(CompressedKv { kind: CompressionKind::Pq, original_token_count, kept: Vec::new(), codes }))
            }
        }
    }

    /// Passage states as the decoder will see them after compression.
    pub fn apply(&self, kv: &PassageKv) -> Result<PassageKv> {
        let Some(c) = self.compress(kv)? else {
            return Ok(kv.clone());
        };
        match self {
            Self::None => unreachable!(),
            Self::HeavyHitter { .. } => kv.select_rows(&c.kept),
            Self::Pq(codec) => {
                let m = codec.keys[0].m();
                let dec = |cb: &PqCodebook, codes: &[u8], like: &Tensor| -> Result<Tensor> {
                    let mut data = Vec::with_capacity(like.numel());
                    for c in codes.chunks_exact(m) {
                        data.extend(cb.decode(c)?);
                    }
                    Ok(Tensor::new(like.shape().to_vec(), data)?)
                };
                let mut out = kv.clone();
                for (i, [kc, vc]) in c.codes.iter().enumerate() {
                    out.keys[i] = dec(&codec.keys[i], kc, &kv.keys[i])?;
                    out.values[i] = dec(&codec.values[i], vc, &kv.values[i])?;
                }
                Ok(out)
            }
        }
    }
}
