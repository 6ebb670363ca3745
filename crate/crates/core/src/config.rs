use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// How retrieved passages are turned into key/value states.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingStrategy {
    /// Each passage alone, positions from zero; states concatenated afterwards.
    Independent,
    /// One sequence, attention blocked across passage boundaries.
    ConcatSegmented,
    /// One sequence, ordinary causal attention across passages.
    #[default]
    ConcatFull,
}

impl EncodingStrategy {
    pub const ALL: [EncodingStrategy; 3] =
        [EncodingStrategy::Independent, EncodingStrategy::ConcatSegmented, EncodingStrategy::ConcatFull];

    pub fn name(self) -> &'static str {
        match self {
            EncodingStrategy::Independent => "independent",
            EncodingStrategy::ConcatSegmented => "concat_segmented",
            EncodingStrategy::ConcatFull => "concat_full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown encoding strategy {s:?}")))
    }
}

/// Whether passage states come from the initial parameter snapshot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrozenMode {
    #[default]
    None,
    /// Snapshot hidden states through the current key/value projections.
    FrozenHidden,
    /// Snapshot key/value states verbatim.
    FrozenKv,
}

impl FrozenMode {
    pub const ALL: [FrozenMode; 3] = [FrozenMode::None, FrozenMode::FrozenHidden, FrozenMode::FrozenKv];

    pub fn name(self) -> &'static str {
        match self {
            FrozenMode::None => "none",
            FrozenMode::FrozenHidden => "frozen_hidden",
            FrozenMode::FrozenKv => "frozen_kv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown frozen mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub boundary_b: usize,
    pub boundary_t: usize,
    pub d_model: usize,
    pub n_query_heads: usize,
    pub n_key_heads: usize,
    pub group_size: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_passage_len: usize,
    pub retrieval_fanin: usize,
    pub share_layer_b_cross_attention: bool,
    pub encoding: EncodingStrategy,
    pub frozen: FrozenMode,
    pub rope_theta: f64,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// The small test preset (8 layers, width 64).
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            n_layers: 8,
            boundary_b: 2,
            boundary_t: 5,
            d_model: 64,
            n_query_heads: 8,
            n_key_heads: 4,
            group_size: 2,
            head_dim: 8,
            ffn_dim: 128,
            vocab_size,
            max_passage_len: 32,
            retrieval_fanin: 4,
            share_layer_b_cross_attention: false,
            encoding: EncodingStrategy::ConcatFull,
            frozen: FrozenMode::None,
            rope_theta: 10_000.0,
            norm_eps: 1e-5,
        }
    }

    /// Boundaries of the 3B-scale reference setting (28 layers, b=7, t=19,
    /// top-10 retrieval). Shapes only; never instantiated here.
    pub fn reference_3b() -> Self {
        Self {
            n_layers: 28,
            boundary_b: 7,
            boundary_t: 19,
            d_model: 3072,
            n_query_heads: 24,
            n_key_heads: 8,
            group_size: 3,
            head_dim: 128,
            ffn_dim: 8192,
            vocab_size: 128_256,
            max_passage_len: 128,
            retrieval_fanin: 10,
            ..Self::tiny(0)
        }
    }

    /// Boundaries of the 8B-scale reference setting (32 layers, b=7, t=23).
    pub fn reference_8b() -> Self {
        Self {
            n_layers: 32,
            boundary_t: 23,
            d_model: 4096,
            n_query_heads: 32,
            group_size: 4,
            ffn_dim: 14_336,
            ..Self::reference_3b()
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny(vocab_size)),
            "reference_3b" => Ok(Self::reference_3b()),
            "reference_8b" => Ok(Self::reference_8b()),
            other => Err(CoreError::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CoreError::Config(msg));
        if !(self.boundary_b < self.boundary_t && self.boundary_t + 1 < self.n_layers) {
            return fail(format!(
                "need 0 <= b < t < N-1, got b={} t={} N={}",
                self.boundary_b, self.boundary_t, self.n_layers
            ));
        }
        if self.n_key_heads == 0 || self.n_query_heads != self.n_key_heads * self.group_size {
            return fail(format!(
                "query heads {} != key heads {} x group {}",
                self.n_query_heads, self.n_key_heads, self.group_size
            ));
        }
        if self.d_model != self.n_query_heads * self.head_dim {
            return fail(format!(
                "d_model {} != query heads {} x head_dim {}",
                self.d_model, self.n_query_heads, self.head_dim
            ));
        }
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return fail(format!("head_dim must be even and positive, got {}", self.head_dim));
        }
        if self.vocab_size == 0 || self.ffn_dim == 0 || self.max_passage_len == 0 {
            return fail("vocab_size, ffn_dim and max_passage_len must be positive".into());
        }
        if !(self.rope_theta > 0.0 && self.norm_eps > 0.0) {
            return fail("rope_theta and norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn plan(&self) -> LayerGroupPlan {
        LayerGroupPlan {
            bottom: 0..=self.boundary_b,
            middle: self.boundary_b..=self.boundary_t,
            top: self.boundary_t + 1..=self.n_layers - 1,
        }
    }

    /// Width of query and passage embeddings.
    pub fn embedding_dim(&self) -> usize {
        self.n_key_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_key_heads * self.head_dim
    }

    /// First layer where tokens after the prompt read passage states.
    pub fn first_cross_layer(&self) -> usize {
        if self.share_layer_b_cross_attention {
            self.boundary_b
        } else {
            self.boundary_b + 1
        }
    }

    pub fn is_cross_layer(&self, layer: usize) -> bool {
        (self.first_cross_layer()..=self.boundary_t).contains(&layer)
    }
}

/// Bottom, middle and top layer groups. Bottom and middle share layer `b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerGroupPlan {
    pub bottom: RangeInclusive<usize>,
    pub middle: RangeInclusive<usize>,
    pub top: RangeInclusive<usize>,
}

/// Position of the first prompt token when `k` passages of at most `l_max`
/// tokens precede it.
pub fn shift_positions(k: usize, l_max: usize) -> usize {
    k * l_max
}
