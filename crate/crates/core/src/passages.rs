//! Passage states shared by training and inference.

use irag_tensor::{Scalar, Tape, Var};

use crate::config::{EncodingStrategy, FrozenMode, ModelConfig};
use crate::error::{invalid, CoreError, Result};
use crate::forward::{embed, finish, pool_query, project, rope_keys, run_plain, Layout, ParamVars};

/// Passage key/value states for several conditioning groups.
pub(crate) struct EncodedGroups {
    /// `kv[g][l - b] = (keys, values)` for layers `b..=t`; `None` for an
    /// empty group.
    pub kv: Vec<Option<Vec<(Var, Var)>>>,
    pub rows: Vec<usize>,
    pub positions: Vec<Vec<usize>>,
    /// Attention mass each passage token received while the passages were
    /// encoded, summed over layers `0..t`, heads and query rows.
    pub key_mass: Vec<Vec<f64>>,
}

pub(crate) fn check_passage(cfg: &ModelConfig, p: &[u32]) -> Result<()> {
    if p.is_empty() {
        return invalid("empty passage");
    }
    if p.len() > cfg.max_passage_len {
        return invalid(format!("passage exceeds l_max ({} > {})", p.len(), cfg.max_passage_len));
    }
    Ok(())
}

/// Encode every group of passages with `strategy`.
///
/// `snapshot` supplies the initial parameters for the frozen modes.
pub(crate) fn encode_groups<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &ModelConfig,
    pv: &ParamVars,
    snapshot: Option<&ParamVars>,
    groups: &[Vec<&[u32]>],
    strategy: EncodingStrategy,
    frozen: FrozenMode,
) -> Result<EncodedGroups> {
    let (b, t) = (cfg.boundary_b, cfg.boundary_t);
    let mut layout = Layout::default();
    let mut ids: Vec<u32> = Vec::new();
    let mut group_rows: Vec<Vec<usize>> = Vec::with_capacity(groups.len());
    let mut group_pos: Vec<Vec<usize>> = Vec::with_capacity(groups.len());
    for g in groups {
        for p in g {
            check_passage(cfg, p)?;
        }
        let total: usize = g.iter().map(|p| p.len()).sum();
        let start = layout.rows();
        match strategy {
            EncodingStrategy::Independent => {
                let mut pos = Vec::with_capacity(total);
                for p in g {
                    layout.push(p.len(), 0);
                    pos.extend(0..p.len());
                }
                group_pos.push(pos);
            }
            EncodingStrategy::ConcatSegmented | EncodingStrategy::ConcatFull if total > 0 => {
                let mut blocks = vec![0];
                if strategy == EncodingStrategy::ConcatSegmented {
                    let mut acc = 0;
                    for p in &g[..g.len() - 1] {
                        acc += p.len();
                        blocks.push(acc);
                    }
                }
                layout.push_blocks(total, (0..total).collect(), blocks);
                group_pos.push((0..total).collect());
            }
            _ => group_pos.push(Vec::new()),
        }
        for p in g {
            ids.extend_from_slice(p);
        }
        group_rows.push((start..start + total).collect());
    }

    if layout.rows() == 0 {
        return Ok(EncodedGroups {
            kv: vec![None; groups.len()],
            rows: vec![0; groups.len()],
            positions: group_pos,
            key_mass: vec![Vec::new(); groups.len()],
        });
    }

    let source = match frozen {
        FrozenMode::None => pv,
        FrozenMode::FrozenHidden | FrozenMode::FrozenKv => {
            snapshot.ok_or_else(|| CoreError::Config("frozen passage states need a parameter snapshot".into()))?
        }
    };

    // Layers 0..t run in full; layer t only needs its keys and values.
    let mut x = embed(tape, source, &ids)?;
    let mut inputs = Vec::with_capacity(t + 1);
    let mut kv_all: Vec<(Var, Var)> = Vec::with_capacity(t - b + 1);
    let mut mass = vec![0.0f64; layout.rows()];
    for l in 0..t {
        inputs.push(x);
        let lv = &source.layers[l];
        let proj = project(tape, cfg, lv, x)?;
        let out = finish(tape, cfg, lv, x, &proj, &layout, None)?;
        if let Some(m) = tape.attention_key_mass(out.attn) {
            mass.iter_mut().zip(m).for_each(|(a, b)| *a += b);
        }
        if l >= b {
            kv_all.push((out.k, out.v));
        }
        x = out.x;
    }
    inputs.push(x);
    let proj_t = project(tape, cfg, &source.layers[t], x)?;
    let k_t = rope_keys(tape, cfg, proj_t.k_pre, &layout.positions)?;
    kv_all.push((k_t, proj_t.v));

    if frozen == FrozenMode::FrozenHidden {
        // Snapshot hidden states through the current projections.
        kv_all.clear();
        for (l, &xl) in inputs.iter().enumerate().take(t + 1).skip(b) {
            let proj = project(tape, cfg, &pv.layers[l], xl)?;
            let k = rope_keys(tape, cfg, proj.k_pre, &layout.positions)?;
            kv_all.push((k, proj.v));
        }
    }

    let mut kv = Vec::with_capacity(groups.len());
    let mut key_mass = Vec::with_capacity(groups.len());
    for rows in &group_rows {
        if rows.is_empty() {
            kv.push(None);
            key_mass.push(Vec::new());
            continue;
        }
        let mut per_layer = Vec::with_capacity(kv_all.len());
        for &(k, v) in &kv_all {
            per_layer.push((tape.gather_rows(k, rows)?, tape.gather_rows(v, rows)?));
        }
        kv.push(Some(per_layer));
        key_mass.push(rows.iter().map(|&r| mass[r]).collect());
    }
    Ok(EncodedGroups { kv, rows: group_rows.iter().map(Vec::len).collect(), positions: group_pos, key_mass })
}

/// Retrieval embeddings of passages encoded alone: the layer-`b` key
/// projection (before RoPE) of each passage's last token. `[n, h_k·d_h]`.
pub(crate) fn passage_embeddings<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &ModelConfig,
    pv: &ParamVars,
    passages: &[&[u32]],
) -> Result<Var> {
    if passages.is_empty() {
        return invalid("no passages to embed");
    }
    let mut layout = Layout::default();
    let mut ids = Vec::new();
    let mut last = Vec::with_capacity(passages.len());
    for p in passages {
        check_passage(cfg, p)?;
        let s = layout.push(p.len(), 0);
        last.push(layout.segments[s].start + p.len() - 1);
        ids.extend_from_slice(p);
    }
    let x = embed(tape, pv, &ids)?;
    let b = cfg.boundary_b;
    let (x, _) = run_plain(tape, cfg, pv, x, &layout, 0..b)?;
    let proj = project(tape, cfg, &pv.layers[b], x)?;
    Ok(tape.gather_rows(proj.k_pre, &last)?)
}

/// Prompt rows through the bottom group.
pub(crate) struct BottomPass {
    /// Input to layer `b` (rows of every segment).
    pub x_b: Var,
    pub proj_b: crate::forward::Proj,
    /// Query embeddings of each segment's last prompt row, `[segments, h_k·d_h]`.
    pub query: Var,
}

/// Layers `0..b` plus the layer-`b` projections for a packed set of
/// sequences; `prompt_last[s]` is the local row whose query state is pooled.
pub(crate) fn bottom_pass<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cfg: &ModelConfig,
    pv: &ParamVars,
    ids: &[u32],
    layout: &Layout,
    prompt_last: &[usize],
) -> Result<BottomPass> {
    let x = embed(tape, pv, ids)?;
    let b = cfg.boundary_b;
    let (x_b, _) = run_plain(tape, cfg, pv, x, layout, 0..b)?;
    let proj_b = project(tape, cfg, &pv.layers[b], x_b)?;
    let rows: Vec<usize> = layout.segments.iter().zip(prompt_last).map(|(s, &j)| s.start + j).collect();
    let query = pool_query(tape, cfg, proj_b.q_pre, &rows)?;
    Ok(BottomPass { x_b, proj_b, query })
}
