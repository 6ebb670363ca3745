//! Packed forward passes.
//!
//! Many sequences ("segments") share one set of rows so every projection is
//! a single matmul. A layer runs in two halves: [`project`] computes the
//! normalised input and the q/k/v projections, and [`finish`] applies RoPE,
//! attention and the feed-forward block. Retrieval embeddings are read from
//! the projections at layer `b`, which lets a caller pick passages between
//! the two halves.

use irag_tensor::{RowSpan, Scalar, Tape, Var};

use crate::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::params::Params;

pub(crate) struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

pub(crate) struct ParamVars {
    pub embed: Var,
    pub final_norm: Var,
    pub layers: Vec<LayerVars>,
}

impl ParamVars {
    /// Same order as `Params::named`.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embed, self.final_norm];
        for l in &self.layers {
            out.extend([l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w_gate, l.w_up, l.w_down]);
        }
        out
    }
}

pub(crate) fn bind<'a, T: Scalar>(tape: &mut Tape<'a, T>, p: &'a Params<T>) -> ParamVars {
    let embed = tape.param(&p.embed);
    let final_norm = tape.param(&p.final_norm);
    let layers = p
        .layers
        .iter()
        .map(|l| LayerVars {
            attn_norm: tape.param(&l.attn_norm),
            wq: tape.param(&l.wq),
            wk: tape.param(&l.wk),
            wv: tape.param(&l.wv),
            wo: tape.param(&l.wo),
            ffn_norm: tape.param(&l.ffn_norm),
            w_gate: tape.param(&l.w_gate),
            w_up: tape.param(&l.w_up),
            w_down: tape.param(&l.w_down),
        })
        .collect();
    ParamVars { embed, final_norm, layers }
}

/// One sequence inside a packed batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Segment {
    pub start: usize,
    pub len: usize,
    /// Local row indices where a new attention block begins. Rows only see
    /// earlier rows of their own block. Always starts with 0.
    pub blocks: Vec<usize>,
}

impl Segment {
    fn block_start(&self, local: usize) -> usize {
        let i = self.blocks.partition_point(|&b| b <= local);
        self.blocks[i - 1]
    }
}

/// Row layout of a packed batch.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub(crate) struct Layout {
    pub segments: Vec<Segment>,
    pub positions: Vec<usize>,
}

impl Layout {
    pub fn rows(&self) -> usize {
        self.positions.len()
    }

    /// Append a causal segment whose positions start at `offset`.
    pub fn push(&mut self, len: usize, offset: usize) -> usize {
        self.push_blocks(len, (offset..offset + len).collect(), vec![0])
    }

    pub fn push_blocks(&mut self, len: usize, positions: Vec<usize>, blocks: Vec<usize>) -> usize {
        debug_assert_eq!(positions.len(), len);
        debug_assert_eq!(blocks.first(), Some(&0));
        let start = self.rows();
        self.positions.extend(positions);
        self.segments.push(Segment { start, len, blocks });
        self.segments.len() - 1
    }
}

/// Extra key/value rows placed before a segment's own keys.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Ctx {
    pub k: Var,
    pub v: Var,
    pub rows: usize,
    /// Local rows below this index do not see these keys.
    pub visible_from: usize,
}

pub(crate) struct Proj {
    pub q_pre: Var,
    pub k_pre: Var,
    pub v: Var,
}

pub(crate) struct LayerOut {
    pub x: Var,
    /// Post-RoPE keys of this layer's own rows.
    pub k: Var,
    pub v: Var,
    pub attn: Var,
}

pub(crate) fn embed<T: Scalar>(tape: &mut Tape<'_, T>, pv: &ParamVars, ids: &[u32]) -> Result<Var> {
    let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    Ok(tape.embedding(pv.embed, &ids)?)
}

pub(crate) fn project<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &ModelConfig,
    lv: &LayerVars,
    x: Var,
) -> Result<Proj> {
    let xn = tape.rms_norm(x, lv.attn_norm, cfg.norm_eps)?;
    Ok(Proj { q_pre: tape.matmul(xn, lv.wq)?, k_pre: tape.matmul(xn, lv.wk)?, v: tape.matmul(xn, lv.wv)? })
}

pub(crate) fn rope_keys<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &ModelConfig,
    k_pre: Var,
    positions: &[usize],
) -> Result<Var> {
    Ok(tape.rope(k_pre, positions, cfg.n_key_heads, cfg.head_dim, cfg.rope_theta)?)
}

/// Attention and feed-forward for one layer. `ctx[s]` (when given) holds the
/// extra keys for segment `s`.
pub(crate) fn finish<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &ModelConfig,
    lv: &LayerVars,
    x: Var,
    proj: &Proj,
    layout: &Layout,
    ctx: Option<&[Option<Ctx>]>,
) -> Result<LayerOut> {
    let q = tape.rope(proj.q_pre, &layout.positions, cfg.n_query_heads, cfg.head_dim, cfg.rope_theta)?;
    let k = rope_keys(tape, cfg, proj.k_pre, &layout.positions)?;
    let v = proj.v;
    let ctx = ctx.filter(|c| c.iter().any(|c| c.is_some_and(|c| c.rows > 0)));
    if let Some(c) = ctx {
        if c.len() != layout.segments.len() {
            return invalid(format!("{} context entries for {} segments", c.len(), layout.segments.len()));
        }
    }

    let mut spans = Vec::with_capacity(layout.rows());
    let (keys, values) = match ctx {
        None => {
            for seg in &layout.segments {
                for j in 0..seg.len {
                    let lo = seg.start + seg.block_start(j);
                    spans.push(RowSpan::new(lo, seg.start + j + 1));
                }
            }
            (k, v)
        }
        Some(ctx) => {
            let mut kparts = Vec::new();
            let mut vparts = Vec::new();
            let mut base = 0;
            for (seg, c) in layout.segments.iter().zip(ctx) {
                let c = c.filter(|c| c.rows > 0);
                let crow = c.map_or(0, |c| c.rows);
                if let Some(c) = c {
                    kparts.push(c.k);
                    vparts.push(c.v);
                }
                if seg.len > 0 {
                    kparts.push(tape.slice_rows(k, seg.start, seg.start + seg.len)?);
                    vparts.push(tape.slice_rows(v, seg.start, seg.start + seg.len)?);
                }
                for j in 0..seg.len {
                    let b0 = seg.block_start(j);
                    let sees_ctx = b0 == 0 && c.is_some_and(|c| j >= c.visible_from);
                    let lo = if sees_ctx { 0 } else { crow + b0 };
                    spans.push(RowSpan::new(base + lo, base + crow + j + 1));
                }
                base += crow + seg.len;
            }
            (tape.concat_rows(&kparts)?, tape.concat_rows(&vparts)?)
        }
    };
    let attn = tape.attention(q, keys, values, spans, cfg.n_query_heads, cfg.n_key_heads, cfg.head_dim)?;
    let o = tape.matmul(attn, lv.wo)?;
    let x1 = tape.add(x, o)?;
    let xn = tape.rms_norm(x1, lv.ffn_norm, cfg.norm_eps)?;
    let g = tape.matmul(xn, lv.w_gate)?;
    let u = tape.matmul(xn, lv.w_up)?;
    let h = tape.silu_mul(g, u)?;
    let d = tape.matmul(h, lv.w_down)?;
    Ok(LayerOut { x: tape.add(x1, d)?, k, v, attn })
}

/// Run `layers` without any context keys.
pub(crate) fn run_plain<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &ModelConfig,
    pv: &ParamVars,
    mut x: Var,
    layout: &Layout,
    layers: std::ops::Range<usize>,
) -> Result<(Var, Vec<LayerOut>)> {
    let mut outs = Vec::with_capacity(layers.len());
    for l in layers {
        let lv = &pv.layers[l];
        let proj = project(tape, cfg, lv, x)?;
        let out = finish(tape, cfg, lv, x, &proj, layout, None)?;
        x = out.x;
        outs.push(out);
    }
    Ok((x, outs))
}

/// Final norm and tied output projection.
pub(crate) fn logits<T: Scalar>(tape: &mut Tape<'_, T>, cfg: &ModelConfig, pv: &ParamVars, x: Var) -> Result<Var> {
    let xn = tape.rms_norm(x, pv.final_norm, cfg.norm_eps)?;
    Ok(tape.matmul_nt(xn, pv.embed)?)
}

/// Grouped query embedding of the given rows: `[rows, h_k·d_h]`.
pub(crate) fn pool_query<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &ModelConfig,
    q_pre: Var,
    rows: &[usize],
) -> Result<Var> {
    let picked = tape.gather_rows(q_pre, rows)?;
    Ok(tape.pool_groups(picked, cfg.n_key_heads, cfg.group_size, cfg.head_dim)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_lookup() {
        let s = Segment { start: 0, len: 9, blocks: vec![0, 3, 7] };
        let got: Vec<_> = (0..9).map(|j| s.block_start(j)).collect();
        assert_eq!(got, [0, 0, 0, 3, 3, 3, 3, 7, 7]);
    }
}
