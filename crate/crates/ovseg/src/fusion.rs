//! Cross-modal fusion tower.
//!
//! Each block refines a spatial feature map and a set of language queries in
//! five stages: axial attention over row/column tokens built from matched
//! halves of the local feature map and the guidance map, a four-direction
//! linear state-space scan over the guidance map for long-range context,
//! a pointwise projection that fuses the two branches, a four-step channel
//! adapter (pointwise, depthwise, gated linear unit, pointwise — each wrapped
//! in a residual layer norm), and linear-time attention from the learnable
//! queries into the fused map concatenated with the text embeddings.
//!
//! Blocks process one image per graph, so batch items never interact; stacked
//! blocks feed the fused map back through a re-entry projection in place of
//! the encoder's mid-level features.

use std::rc::Rc;

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Depth and width settings for the fusion tower.
#[derive(Debug, Clone)]
pub struct FusionConfig {
    /// Number of stacked fusion blocks.
    pub depth: usize,
    /// Attention heads in the axial stage.
    pub heads: usize,
    /// Number of learnable language queries threaded through the tower.
    pub queries: usize,
    /// State dimension of the linear scan.
    pub d_state: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { depth: 2, heads: 4, queries: 4, d_state: 8 }
    }
}

/// Weights of the axial attention stage. Query/key/value projections are
/// shared between the row and column branches; each branch has its own output
/// projection onto half the fused width.
#[derive(Debug, Clone, Copy)]
pub struct DirectionalParams {
    /// Token projections, each `[E, E]` where `E = C/2 + D/2`.
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    /// Row-branch output projection `[E, D/2]` and bias `[D/2]`.
    pub wo_h: NodeId,
    pub bo_h: NodeId,
    /// Column-branch output projection `[E, D/2]` and bias `[D/2]`.
    pub wo_v: NodeId,
    pub bo_v: NodeId,
}

/// One scan direction of the state-space stage: raw decay (squashed through
/// tanh so the recurrence stays contractive), input gain, and readout, each
/// `[D, S]`.
#[derive(Debug, Clone, Copy)]
pub struct Ss2dDirection {
    pub a_raw: NodeId,
    pub b: NodeId,
    pub c: NodeId,
}

/// Parameters for the four scan orders: row-major, reverse row-major,
/// column-major, reverse column-major.
#[derive(Debug, Clone, Copy)]
pub struct Ss2dParams {
    pub dirs: [Ss2dDirection; 4],
}

/// Channel adapter weights: four sub-blocks, each wrapped as
/// `layernorm(x + sub(x))` with its own gain/bias pair.
#[derive(Debug, Clone, Copy)]
pub struct AdaptParams {
    /// First pointwise projection `[D, D]` + bias `[D]`.
    pub pw1_w: NodeId,
    pub pw1_b: NodeId,
    /// Depthwise 3x3 kernel `[D, 3, 3]` + bias `[D]`.
    pub dw_w: NodeId,
    pub dw_b: NodeId,
    /// Gated linear unit expansion `[D, 2D]` + bias `[2D]`.
    pub glu_w: NodeId,
    pub glu_b: NodeId,
    /// Second pointwise projection `[D, D]` + bias `[D]`.
    pub pw2_w: NodeId,
    pub pw2_b: NodeId,
    /// Layer-norm (gain, bias) pairs for the four sub-blocks, each `[D]`.
    pub ln: [(NodeId, NodeId); 4],
}

/// Query-update weights: the gate consumes `[q || attn_out]`, and a residual
/// two-layer MLP refines the blended queries.
#[derive(Debug, Clone, Copy)]
pub struct QueryAttnParams {
    /// Gate projection `[2D, D]` + bias `[D]`.
    pub gate_w: NodeId,
    pub gate_b: NodeId,
    /// MLP layers `[D, 2D]` + `[2D]`, `[2D, D]` + `[D]`.
    pub mlp_w1: NodeId,
    pub mlp_b1: NodeId,
    pub mlp_w2: NodeId,
    pub mlp_b2: NodeId,
}

/// All weights of one fusion block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    /// Projection `[D, C]` + bias `[C]` mapping the previous block's fused map
    /// back to the local-branch width; `None` for the first block, which
    /// consumes the encoder's mid-level features directly.
    pub reentry: Option<(NodeId, NodeId)>,
    pub attn: DirectionalParams,
    /// Branch fusion `[2D, D]` + bias `[D]`.
    pub fuse_w: NodeId,
    pub fuse_b: NodeId,
    pub ss2d: Ss2dParams,
    pub adapt: AdaptParams,
    pub query: QueryAttnParams,
}

/// Intermediate maps of one block, useful for inspection and tests.
#[derive(Debug, Clone, Copy)]
pub struct BlockTrace {
    /// Axial-attention output `[H, W, D]`.
    pub x_local: NodeId,
    /// State-space context `[H, W, D]`.
    pub y_global: NodeId,
    /// Fused branches before adaptation `[H, W, D]`.
    pub x_fused: NodeId,
    /// Channel-adapted fused map `[H, W, D]`; feeds the next block.
    pub x_adapted: NodeId,
    /// Updated language queries `[T, D]`.
    pub queries: NodeId,
}

/// Multi-head self-attention within each row of `tokens: [R, L, E]`,
/// returning the attended tokens at the same shape. Rows never mix.
fn axial_attention(
    g: &mut Graph,
    tokens: NodeId,
    heads: usize,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
) -> NodeId {
    let shape = g.value(tokens).shape().to_vec();
    let (rows, len, e) = (shape[0], shape[1], shape[2]);
    assert!(heads > 0 && e % heads == 0, "token width {e} not divisible by {heads} heads");
    let hd = e / heads;
    let flat = g.reshape(tokens, &[rows * len, e]);
    let q = g.matmul(flat, wq);
    let k = g.matmul(flat, wk);
    let v = g.matmul(flat, wv);
    let split = |g: &mut Graph, x: NodeId| {
        let x4 = g.reshape(x, &[rows, len, heads, hd]);
        let xp = g.permute(x4, &[0, 2, 1, 3]);
        g.reshape(xp, &[rows * heads, len, hd])
    };
    let qb = split(g, q);
    let kb = split(g, k);
    let vb = split(g, v);
    let kt = g.permute(kb, &[0, 2, 1]);
    let scores = g.bmm(qb, kt);
    let scaled = g.scale(scores, 1.0 / (hd as f64).sqrt());
    let attn = g.softmax_last(scaled, 1.0);
    let ctx = g.bmm(attn, vb);
    let c4 = g.reshape(ctx, &[rows, heads, len, hd]);
    let cp = g.permute(c4, &[0, 2, 1, 3]);
    g.reshape(cp, &[rows, len, e])
}

/// Axial local attention. The channel halves of the local map `f: [H, W, C]`
/// and the guidance map `gd: [H, W, D]` form row tokens (first halves) and
/// column tokens (second halves); attention runs within each row and each
/// column, and the two branch outputs concatenate to `[H, W, D]`.
pub fn directional_attention(
    g: &mut Graph,
    f: NodeId,
    gd: NodeId,
    p: &DirectionalParams,
    heads: usize,
) -> NodeId {
    let fs = g.value(f).shape().to_vec();
    let gs = g.value(gd).shape().to_vec();
    let (h, w, c) = (fs[0], fs[1], fs[2]);
    let d = gs[2];
    assert_eq!(&gs[..2], &[h, w], "local and guidance grids differ");
    assert!(c.is_multiple_of(2) && d.is_multiple_of(2), "channel widths must be even");
    let e = c / 2 + d / 2;

    let f_h = g.slice_last(f, 0, c / 2);
    let g_h = g.slice_last(gd, 0, d / 2);
    let tokens_h = g.concat_last(&[f_h, g_h]);
    let ctx_h = axial_attention(g, tokens_h, heads, p.wq, p.wk, p.wv);
    let ch_flat = g.reshape(ctx_h, &[h * w, e]);
    let oh = g.matmul(ch_flat, p.wo_h);
    let oh = g.add_row_bias(oh, p.bo_h);

    let f_v = g.slice_last(f, c / 2, c);
    let g_v = g.slice_last(gd, d / 2, d);
    let tokens_v = g.concat_last(&[f_v, g_v]);
    let tv = g.permute(tokens_v, &[1, 0, 2]);
    let ctx_v = axial_attention(g, tv, heads, p.wq, p.wk, p.wv);
    let cv = g.permute(ctx_v, &[1, 0, 2]);
    let cv_flat = g.reshape(cv, &[h * w, e]);
    let ov = g.matmul(cv_flat, p.wo_v);
    let ov = g.add_row_bias(ov, p.bo_v);

    let both = g.concat_last(&[oh, ov]);
    g.reshape(both, &[h, w, d])
}

/// Row-gather indices of one scan direction: `fwd[t]` is the row-major
/// position visited at step `t`, and `inv` undoes the gather.
type ScanIndices = (Rc<Vec<usize>>, Rc<Vec<usize>>);

/// Flattening order of scan direction `j` over an `h x w` grid. Direction 0
/// is the identity (row-major) and returns `None`.
fn scan_order(j: usize, h: usize, w: usize) -> Option<ScanIndices> {
    let l = h * w;
    let fwd: Vec<usize> = match j {
        0 => return None,
        1 => (0..l).map(|t| l - 1 - t).collect(),
        2 => (0..l).map(|t| (t % h) * w + t / h).collect(),
        3 => (0..l).map(|t| { let s = l - 1 - t; (s % h) * w + s / h }).collect(),
        _ => unreachable!("four scan directions"),
    };
    let mut inv = vec![0usize; l];
    for (t, &o) in fwd.iter().enumerate() {
        inv[o] = t;
    }
    Some((Rc::new(fwd), Rc::new(inv)))
}

/// Four-direction state-space context over the guidance map `gd: [H, W, D]`.
/// The grid is flattened along row-major, reverse row-major, column-major,
/// and reverse column-major orders; each direction runs an independent
/// per-channel linear recurrence (decay squashed through tanh so its
/// magnitude stays below one) from a zero initial state, and the four
/// contributions are averaged.
pub fn ss2d_context(g: &mut Graph, gd: NodeId, p: &Ss2dParams) -> NodeId {
    let gs = g.value(gd).shape().to_vec();
    let (h, w, d) = (gs[0], gs[1], gs[2]);
    let x = g.reshape(gd, &[h * w, d]);
    let mut acc: Option<NodeId> = None;
    for (j, dir) in p.dirs.iter().enumerate() {
        let order = scan_order(j, h, w);
        let xs = match &order {
            Some((fwd, _)) => g.gather_rows(x, Rc::clone(fwd)),
            None => x,
        };
        let a = g.tanh_act(dir.a_raw);
        let y = g.linear_scan(xs, a, dir.b, dir.c);
        let yo = match &order {
            Some((_, inv)) => g.gather_rows(y, Rc::clone(inv)),
            None => y,
        };
        acc = Some(match acc {
            Some(s) => g.add(s, yo),
            None => yo,
        });
    }
    let sum = acc.expect("four directions");
    let avg = g.scale(sum, 0.25);
    g.reshape(avg, &[h, w, d])
}

/// Fuses the local and global branches with a pointwise projection of their
/// channel concatenation: `[H, W, 2D] -> [H, W, D]`.
pub fn fuse_local_global(
    g: &mut Graph,
    x_local: NodeId,
    y_global: NodeId,
    w: NodeId,
    b: NodeId,
) -> NodeId {
    let ls = g.value(x_local).shape().to_vec();
    let (hh, ww, d) = (ls[0], ls[1], ls[2]);
    let cat = g.concat_last(&[x_local, y_global]);
    let flat = g.reshape(cat, &[hh * ww, 2 * d]);
    let y = g.matmul(flat, w);
    let y = g.add_row_bias(y, b);
    g.reshape(y, &[hh, ww, d])
}

/// Channel adapter: pointwise, depthwise 3x3 (zero-padded), gated linear
/// unit, pointwise — each sub-block applied as `layernorm(x + sub(x))`.
pub fn channel_adapt(g: &mut Graph, x: NodeId, p: &AdaptParams) -> NodeId {
    let xs = g.value(x).shape().to_vec();
    let (h, w, d) = (xs[0], xs[1], xs[2]);

    let flat = g.reshape(x, &[h * w, d]);
    let s1 = g.matmul(flat, p.pw1_w);
    let s1 = g.add_row_bias(s1, p.pw1_b);
    let s1 = g.reshape(s1, &[h, w, d]);
    let r1 = g.add(x, s1);
    let y1 = g.layernorm_last(r1, p.ln[0].0, p.ln[0].1);

    let s2 = g.depthwise3x3(y1, p.dw_w, p.dw_b);
    let r2 = g.add(y1, s2);
    let y2 = g.layernorm_last(r2, p.ln[1].0, p.ln[1].1);

    let flat2 = g.reshape(y2, &[h * w, d]);
    let expanded = g.matmul(flat2, p.glu_w);
    let expanded = g.add_row_bias(expanded, p.glu_b);
    let value = g.slice_last(expanded, 0, d);
    let gate_logits = g.slice_last(expanded, d, 2 * d);
    let gate = g.sigmoid(gate_logits);
    let s3 = g.mul(value, gate);
    let s3 = g.reshape(s3, &[h, w, d]);
    let r3 = g.add(y2, s3);
    let y3 = g.layernorm_last(r3, p.ln[2].0, p.ln[2].1);

    let flat3 = g.reshape(y3, &[h * w, d]);
    let s4 = g.matmul(flat3, p.pw2_w);
    let s4 = g.add_row_bias(s4, p.pw2_b);
    let s4 = g.reshape(s4, &[h, w, d]);
    let r4 = g.add(y3, s4);
    g.layernorm_last(r4, p.ln[3].0, p.ln[3].1)
}

/// Linear-time attention core with feature map `phi(x) = elu(x) + 1`:
/// `out_t = phi(q_t)^T (sum_j phi(k_j) v_j^T) / (phi(q_t)^T sum_j phi(k_j))`
/// where keys and values coincide (`kv: [M, D]`). Since `phi > 0`, every
/// output row is a convex combination of the value rows.
pub fn linear_attention_core(g: &mut Graph, queries: NodeId, kv: NodeId) -> NodeId {
    let qs = g.value(queries).shape().to_vec();
    let (t, d) = (qs[0], qs[1]);
    assert_eq!(g.value(kv).shape()[1], d, "key width differs from query width");
    let phi_q = g.elu1(queries);
    let phi_k = g.elu1(kv);
    let kt = g.permute(phi_k, &[1, 0]);
    let summary = g.matmul(kt, kv);
    let num = g.matmul(phi_q, summary);
    let z = g.sum_first(phi_k);
    let zc = g.reshape(z, &[d, 1]);
    let den = g.matmul(phi_q, zc);
    let den = g.reshape(den, &[t]);
    g.div_col(num, den)
}

/// Updates the language queries `[T, D]` by attending into the fused map
/// concatenated with the text embeddings, gating the attention output against
/// the incoming queries, and refining with a residual two-layer MLP.
pub fn language_query_attention(
    g: &mut Graph,
    queries: NodeId,
    x_fused: NodeId,
    e_text: NodeId,
    p: &QueryAttnParams,
) -> NodeId {
    let xs = g.value(x_fused).shape().to_vec();
    let (h, w, d) = (xs[0], xs[1], xs[2]);
    let qs = g.value(queries).shape().to_vec();
    let (t, dq) = (qs[0], qs[1]);
    assert_eq!(dq, d, "query width differs from map width");

    let flat = g.reshape(x_fused, &[h * w, d]);
    let ft = g.permute(flat, &[1, 0]);
    let et = g.permute(e_text, &[1, 0]);
    let kvt = g.concat_last(&[ft, et]);
    let kv = g.permute(kvt, &[1, 0]);
    let out = linear_attention_core(g, queries, kv);

    let cat = g.concat_last(&[queries, out]);
    let gl = g.matmul(cat, p.gate_w);
    let gl = g.add_row_bias(gl, p.gate_b);
    let gate = g.sigmoid(gl);
    let go = g.mul(gate, out);
    let ones = g.constant(Tensor::full(&[t, d], 1.0));
    let inv = g.sub(ones, gate);
    let gq = g.mul(inv, queries);
    let blended = g.add(go, gq);

    let h1 = g.matmul(blended, p.mlp_w1);
    let h1 = g.add_row_bias(h1, p.mlp_b1);
    let h1 = g.gelu(h1);
    let m = g.matmul(h1, p.mlp_w2);
    let m = g.add_row_bias(m, p.mlp_b2);
    g.add(blended, m)
}

/// One fusion block: re-entry projection (blocks after the first), axial
/// attention, state-space context, branch fusion, channel adaptation, and the
/// query update, in that order.
pub fn fusion_block(
    g: &mut Graph,
    f_in: NodeId,
    gd: NodeId,
    e_text: NodeId,
    queries: NodeId,
    p: &BlockParams,
    heads: usize,
) -> BlockTrace {
    g.counters.fusion_block_calls += 1;
    let f = match p.reentry {
        Some((w, b)) => {
            let fs = g.value(f_in).shape().to_vec();
            let (hh, ww, d) = (fs[0], fs[1], fs[2]);
            let c = g.value(w).shape()[1];
            let flat = g.reshape(f_in, &[hh * ww, d]);
            let y = g.matmul(flat, w);
            let y = g.add_row_bias(y, b);
            g.reshape(y, &[hh, ww, c])
        }
        None => f_in,
    };
    let x_local = directional_attention(g, f, gd, &p.attn, heads);
    let y_global = ss2d_context(g, gd, &p.ss2d);
    let x_fused = fuse_local_global(g, x_local, y_global, p.fuse_w, p.fuse_b);
    let x_adapted = channel_adapt(g, x_fused, &p.adapt);
    let queries = language_query_attention(g, queries, x_adapted, e_text, &p.query);
    BlockTrace { x_local, y_global, x_fused, x_adapted, queries }
}

/// Runs the whole tower: block 0 consumes the encoder's mid-level map, and
/// each later block consumes the previous block's adapted output through its
/// re-entry projection. Returns the per-block traces; the last trace holds
/// the final fused map and queries.
pub fn build_fusion(
    g: &mut Graph,
    f_mid: NodeId,
    gd: NodeId,
    e_text: NodeId,
    q_lrn: NodeId,
    blocks: &[BlockParams],
    heads: usize,
) -> Vec<BlockTrace> {
    assert!(!blocks.is_empty(), "fusion tower needs at least one block");
    assert!(blocks[0].reentry.is_none(), "first block reads the encoder map directly");
    let mut traces = Vec::with_capacity(blocks.len());
    let mut f_in = f_mid;
    let mut queries = q_lrn;
    for (i, p) in blocks.iter().enumerate() {
        if i > 0 {
            assert!(p.reentry.is_some(), "stacked blocks need a re-entry projection");
        }
        let tr = fusion_block(g, f_in, gd, e_text, queries, p, heads);
        f_in = tr.x_adapted;
        queries = tr.queries;
        traces.push(tr);
    }
    traces
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_builder, CheckConfig, Sample};
    use crate::rng::normal_vec;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn leaf(g: &mut Graph, shape: &[usize], data: Vec<f64>) -> NodeId {
        g.leaf(Tensor::from_vec(shape, data))
    }

    fn rand_leaf(g: &mut Graph, shape: &[usize], seed: u64, label: &str) -> NodeId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = normal_vec(seed, label, n).iter().map(|v| 0.3 * v).collect();
        leaf(g, shape, data)
    }

    fn rand_attn(g: &mut Graph, e: usize, half: usize, seed: u64) -> DirectionalParams {
        DirectionalParams {
            wq: rand_leaf(g, &[e, e], seed, "wq"),
            wk: rand_leaf(g, &[e, e], seed, "wk"),
            wv: rand_leaf(g, &[e, e], seed, "wv"),
            wo_h: rand_leaf(g, &[e, half], seed, "wo_h"),
            bo_h: rand_leaf(g, &[half], seed, "bo_h"),
            wo_v: rand_leaf(g, &[e, half], seed, "wo_v"),
            bo_v: rand_leaf(g, &[half], seed, "bo_v"),
        }
    }

    fn rand_ss2d(g: &mut Graph, d: usize, s: usize, seed: u64) -> Ss2dParams {
        let dir = |g: &mut Graph, j: usize| Ss2dDirection {
            a_raw: rand_leaf(g, &[d, s], seed, &format!("a{j}")),
            b: rand_leaf(g, &[d, s], seed, &format!("b{j}")),
            c: rand_leaf(g, &[d, s], seed, &format!("c{j}")),
        };
        Ss2dParams { dirs: [dir(g, 0), dir(g, 1), dir(g, 2), dir(g, 3)] }
    }

    fn rand_adapt(g: &mut Graph, d: usize, seed: u64) -> AdaptParams {
        let unit_ln = |g: &mut Graph| {
            (g.leaf(Tensor::full(&[d], 1.0)), g.leaf(Tensor::full(&[d], 0.0)))
        };
        AdaptParams {
            pw1_w: rand_leaf(g, &[d, d], seed, "pw1_w"),
            pw1_b: rand_leaf(g, &[d], seed, "pw1_b"),
            dw_w: rand_leaf(g, &[d, 3, 3], seed, "dw_w"),
            dw_b: rand_leaf(g, &[d], seed, "dw_b"),
            glu_w: rand_leaf(g, &[d, 2 * d], seed, "glu_w"),
            glu_b: rand_leaf(g, &[2 * d], seed, "glu_b"),
            pw2_w: rand_leaf(g, &[d, d], seed, "pw2_w"),
            pw2_b: rand_leaf(g, &[d], seed, "pw2_b"),
            ln: [unit_ln(g), unit_ln(g), unit_ln(g), unit_ln(g)],
        }
    }

    fn rand_query(g: &mut Graph, d: usize, seed: u64) -> QueryAttnParams {
        QueryAttnParams {
            gate_w: rand_leaf(g, &[2 * d, d], seed, "gate_w"),
            gate_b: rand_leaf(g, &[d], seed, "gate_b"),
            mlp_w1: rand_leaf(g, &[d, 2 * d], seed, "mlp_w1"),
            mlp_b1: rand_leaf(g, &[2 * d], seed, "mlp_b1"),
            mlp_w2: rand_leaf(g, &[2 * d, d], seed, "mlp_w2"),
            mlp_b2: rand_leaf(g, &[d], seed, "mlp_b2"),
        }
    }

    #[test]
    fn single_token_grid_attention_reduces_to_the_value_projection() {
        let mut g = Graph::new();
        let c = 4;
        let d = 4;
        let e = c / 2 + d / 2;
        let f = rand_leaf(&mut g, &[1, 1, c], 7, "f");
        let gd = rand_leaf(&mut g, &[1, 1, d], 7, "gd");
        let p = rand_attn(&mut g, e, d / 2, 7);
        let out = directional_attention(&mut g, f, gd, &p, 1);

        let fv = g.value(f).data().to_vec();
        let gv = g.value(gd).data().to_vec();
        let token_h: Vec<f64> = fv[..c / 2].iter().chain(&gv[..d / 2]).copied().collect();
        let token_v: Vec<f64> = fv[c / 2..].iter().chain(&gv[d / 2..]).copied().collect();
        let mat = |g: &Graph, id: NodeId, x: &[f64]| -> Vec<f64> {
            let wv = g.value(id);
            let cols = wv.shape()[1];
            (0..cols)
                .map(|j| x.iter().enumerate().map(|(i, xi)| xi * wv.data()[i * cols + j]).sum())
                .collect()
        };
        let ctx_h = mat(&g, p.wv, &token_h);
        let ctx_v = mat(&g, p.wv, &token_v);
        let mut expect = mat(&g, p.wo_h, &ctx_h);
        for (y, b) in expect.iter_mut().zip(g.value(p.bo_h).data()) {
            *y += b;
        }
        let mut ev = mat(&g, p.wo_v, &ctx_v);
        for (y, b) in ev.iter_mut().zip(g.value(p.bo_v).data()) {
            *y += b;
        }
        expect.extend(ev);
        for (a, b) in g.value(out).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn rows_of_identical_tokens_attend_to_a_shared_context() {
        let mut g = Graph::new();
        let (c, d, w) = (4, 4, 3);
        let e = c / 2 + d / 2;
        let frow = normal_vec(11, "frow", c);
        let grow = normal_vec(11, "grow", d);
        let f = leaf(&mut g, &[1, w, c], frow.iter().cycle().take(w * c).copied().collect());
        let gd = leaf(&mut g, &[1, w, d], grow.iter().cycle().take(w * d).copied().collect());
        let p = rand_attn(&mut g, e, d / 2, 11);
        let out = directional_attention(&mut g, f, gd, &p, 2);
        let ov = g.value(out);
        assert_eq!(ov.shape(), [1, w, d]);
        for x in 1..w {
            for ch in 0..d {
                let a = ov.data()[ch];
                let b = ov.data()[x * d + ch];
                assert!((a - b).abs() < 1e-12, "position {x} channel {ch}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn two_token_rows_match_a_dense_attention_reference() {
        let mut g = Graph::new();
        let (c, d) = (4, 4);
        let e = c / 2 + d / 2;
        let heads = 2;
        let hd = e / heads;
        let f = rand_leaf(&mut g, &[1, 2, c], 23, "f");
        let gd = rand_leaf(&mut g, &[1, 2, d], 23, "gd");
        let p = rand_attn(&mut g, e, d / 2, 23);
        let out = directional_attention(&mut g, f, gd, &p, heads);

        let fv = g.value(f).data().to_vec();
        let gv = g.value(gd).data().to_vec();
        let tokens: Vec<Vec<f64>> = (0..2)
            .map(|x| {
                fv[x * c..x * c + c / 2]
                    .iter()
                    .chain(&gv[x * d..x * d + d / 2])
                    .copied()
                    .collect()
            })
            .collect();
        let mat = |g: &Graph, id: NodeId, x: &[f64]| -> Vec<f64> {
            let wv = g.value(id);
            let cols = wv.shape()[1];
            (0..cols)
                .map(|j| x.iter().enumerate().map(|(i, xi)| xi * wv.data()[i * cols + j]).sum())
                .collect()
        };
        let q: Vec<Vec<f64>> = tokens.iter().map(|t| mat(&g, p.wq, t)).collect();
        let k: Vec<Vec<f64>> = tokens.iter().map(|t| mat(&g, p.wk, t)).collect();
        let v: Vec<Vec<f64>> = tokens.iter().map(|t| mat(&g, p.wv, t)).collect();
        let mut ctx = vec![vec![0.0; e]; 2];
        for head in 0..heads {
            let lo = head * hd;
            let hi = lo + hd;
            for i in 0..2 {
                let scores: Vec<f64> = (0..2)
                    .map(|j| {
                        q[i][lo..hi]
                            .iter()
                            .zip(&k[j][lo..hi])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for (j, ex) in exps.iter().enumerate() {
                    for ch in lo..hi {
                        ctx[i][ch] += ex / z * v[j][ch];
                    }
                }
            }
        }
        let ov = g.value(out);
        for (x, ctx_row) in ctx.iter().enumerate() {
            let mut oh = mat(&g, p.wo_h, ctx_row);
            for (y, b) in oh.iter_mut().zip(g.value(p.bo_h).data()) {
                *y += b;
            }
            for (ch, want) in oh.iter().enumerate() {
                let got = ov.data()[x * d + ch];
                assert!((got - want).abs() < 1e-12, "x={x} ch={ch}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn state_space_context_on_a_single_pixel_matches_the_closed_form() {
        let mut g = Graph::new();
        let (d, s) = (3, 2);
        let x = rand_leaf(&mut g, &[1, 1, d], 31, "x");
        let p = rand_ss2d(&mut g, d, s, 31);
        let out = ss2d_context(&mut g, x, &p);
        let xv = g.value(x).data().to_vec();
        for (ch, &xch) in xv.iter().enumerate() {
            let mut want = 0.0;
            for dir in &p.dirs {
                let bv = g.value(dir.b);
                let cv = g.value(dir.c);
                for si in 0..s {
                    want += cv.data()[ch * s + si] * bv.data()[ch * s + si] * xch;
                }
            }
            want /= 4.0;
            let got = g.value(out).data()[ch];
            assert!((got - want).abs() < 1e-12, "channel {ch}: {got} vs {want}");
        }
    }

    #[test]
    fn zero_decay_makes_the_state_space_scan_memoryless() {
        let mut g = Graph::new();
        let (h, w, d, s) = (2, 3, 2, 2);
        let x = rand_leaf(&mut g, &[h, w, d], 37, "x");
        let mut p = rand_ss2d(&mut g, d, s, 37);
        for dir in &mut p.dirs {
            dir.a_raw = g.leaf(Tensor::full(&[d, s], 0.0));
        }
        let out = ss2d_context(&mut g, x, &p);
        let xv = g.value(x).data().to_vec();
        let ov = g.value(out);
        for pix in 0..h * w {
            for ch in 0..d {
                let mut want = 0.0;
                for dir in &p.dirs {
                    let bv = g.value(dir.b);
                    let cv = g.value(dir.c);
                    for si in 0..s {
                        want += cv.data()[ch * s + si] * bv.data()[ch * s + si];
                    }
                }
                want *= xv[pix * d + ch] / 4.0;
                let got = ov.data()[pix * d + ch];
                assert!((got - want).abs() < 1e-12, "pixel {pix} channel {ch}");
            }
        }
    }

    #[test]
    fn a_half_decay_scan_over_two_pixels_matches_hand_computed_values() {
        // Scalar channel, one state, decay 1/2, unit gain and readout, grid
        // 1x2 holding (1, 2). Row-major gives (1, 2.5); reverse row-major
        // gives (2, 2); the column scans repeat them. Average: (1.5, 2.25).
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 2, 1], vec![1.0, 2.0]);
        let a_raw = 0.5f64.atanh();
        let dir = |g: &mut Graph| Ss2dDirection {
            a_raw: g.leaf(Tensor::from_vec(&[1, 1], vec![a_raw])),
            b: g.leaf(Tensor::full(&[1, 1], 1.0)),
            c: g.leaf(Tensor::full(&[1, 1], 1.0)),
        };
        let p = Ss2dParams {
            dirs: [dir(&mut g), dir(&mut g), dir(&mut g), dir(&mut g)],
        };
        let out = ss2d_context(&mut g, x, &p);
        let ov = g.value(out);
        assert!((ov.data()[0] - 1.5).abs() < 1e-12, "{}", ov.data()[0]);
        assert!((ov.data()[1] - 2.25).abs() < 1e-12, "{}", ov.data()[1]);
    }

    #[test]
    fn transposing_the_grid_and_swapping_scan_parameters_transposes_the_context() {
        let mut g = Graph::new();
        let (h, w, d, s) = (3, 4, 3, 2);
        let x = rand_leaf(&mut g, &[h, w, d], 41, "x");
        let p = rand_ss2d(&mut g, d, s, 41);
        let out = ss2d_context(&mut g, x, &p);
        let xt = g.permute(x, &[1, 0, 2]);
        let swapped = Ss2dParams {
            dirs: [p.dirs[2], p.dirs[3], p.dirs[0], p.dirs[1]],
        };
        let out_t = ss2d_context(&mut g, xt, &swapped);
        let ov = g.value(out);
        let tv = g.value(out_t);
        assert_eq!(tv.shape(), [w, h, d]);
        for y in 0..h {
            for xcol in 0..w {
                for ch in 0..d {
                    let a = ov.data()[(y * w + xcol) * d + ch];
                    let b = tv.data()[(xcol * h + y) * d + ch];
                    assert!((a - b).abs() < 1e-9, "({y},{xcol},{ch}): {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn selector_projections_pass_through_either_fusion_branch() {
        let mut g = Graph::new();
        let (h, w, d) = (2, 3, 3);
        let xl = rand_leaf(&mut g, &[h, w, d], 43, "xl");
        let yg = rand_leaf(&mut g, &[h, w, d], 43, "yg");
        let mut local_sel = vec![0.0; 2 * d * d];
        let mut global_sel = vec![0.0; 2 * d * d];
        for i in 0..d {
            local_sel[i * d + i] = 1.0;
            global_sel[(d + i) * d + i] = 1.0;
        }
        let wl = leaf(&mut g, &[2 * d, d], local_sel);
        let wg = leaf(&mut g, &[2 * d, d], global_sel);
        let b0 = g.leaf(Tensor::full(&[d], 0.0));
        let pick_local = fuse_local_global(&mut g, xl, yg, wl, b0);
        let pick_global = fuse_local_global(&mut g, xl, yg, wg, b0);
        for (a, b) in g.value(pick_local).data().iter().zip(g.value(xl).data()) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in g.value(pick_global).data().iter().zip(g.value(yg).data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn pointwise_fusion_matches_a_per_pixel_affine_reference() {
        let mut g = Graph::new();
        let (h, w, d) = (2, 2, 3);
        let xl = rand_leaf(&mut g, &[h, w, d], 47, "xl");
        let yg = rand_leaf(&mut g, &[h, w, d], 47, "yg");
        let wf = rand_leaf(&mut g, &[2 * d, d], 47, "wf");
        let bf = rand_leaf(&mut g, &[d], 47, "bf");
        let out = fuse_local_global(&mut g, xl, yg, wf, bf);
        let (lv, gv) = (g.value(xl), g.value(yg));
        let (wv, bv, ov) = (g.value(wf), g.value(bf), g.value(out));
        for pix in 0..h * w {
            for j in 0..d {
                let mut want = bv.data()[j];
                for i in 0..d {
                    want += lv.data()[pix * d + i] * wv.data()[i * d + j];
                    want += gv.data()[pix * d + i] * wv.data()[(d + i) * d + j];
                }
                let got = ov.data()[pix * d + j];
                assert!((got - want).abs() < 1e-12, "pixel {pix} channel {j}");
            }
        }
    }

    fn layernorm_ref(row: &[f64]) -> Vec<f64> {
        let d = row.len() as f64;
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let denom = (var + 1e-5).sqrt();
        row.iter().map(|v| (v - mean) / denom).collect()
    }

    #[test]
    fn zeroed_adapter_weights_reduce_to_stacked_layer_norms() {
        let mut g = Graph::new();
        let (h, w, d) = (2, 2, 4);
        let x = rand_leaf(&mut g, &[h, w, d], 53, "x");
        let zero = |g: &mut Graph, shape: &[usize]| g.leaf(Tensor::full(shape, 0.0));
        let unit_ln = |g: &mut Graph| {
            (g.leaf(Tensor::full(&[d], 1.0)), g.leaf(Tensor::full(&[d], 0.0)))
        };
        let p = AdaptParams {
            pw1_w: zero(&mut g, &[d, d]),
            pw1_b: zero(&mut g, &[d]),
            dw_w: zero(&mut g, &[d, 3, 3]),
            dw_b: zero(&mut g, &[d]),
            glu_w: zero(&mut g, &[d, 2 * d]),
            glu_b: zero(&mut g, &[2 * d]),
            pw2_w: zero(&mut g, &[d, d]),
            pw2_b: zero(&mut g, &[d]),
            ln: [unit_ln(&mut g), unit_ln(&mut g), unit_ln(&mut g), unit_ln(&mut g)],
        };
        let out = channel_adapt(&mut g, x, &p);
        let xv = g.value(x);
        let ov = g.value(out);
        for pix in 0..h * w {
            let mut row = xv.data()[pix * d..(pix + 1) * d].to_vec();
            for _ in 0..4 {
                row = layernorm_ref(&row);
            }
            for (ch, want) in row.iter().enumerate() {
                let got = ov.data()[pix * d + ch];
                assert!((got - want).abs() < 1e-12, "pixel {pix} channel {ch}");
            }
        }
    }

    #[test]
    fn identity_glu_expansion_halves_the_value_path() {
        // With the expansion set to [I | 0], the gate logits are zero, so the
        // gated branch contributes exactly half its input.
        let mut g = Graph::new();
        let (h, w, d) = (1, 2, 3);
        let x = rand_leaf(&mut g, &[h, w, d], 59, "x");
        let zero = |g: &mut Graph, shape: &[usize]| g.leaf(Tensor::full(shape, 0.0));
        let unit_ln = |g: &mut Graph| {
            (g.leaf(Tensor::full(&[d], 1.0)), g.leaf(Tensor::full(&[d], 0.0)))
        };
        let mut glu = vec![0.0; d * 2 * d];
        for i in 0..d {
            glu[i * 2 * d + i] = 1.0;
        }
        let p = AdaptParams {
            pw1_w: zero(&mut g, &[d, d]),
            pw1_b: zero(&mut g, &[d]),
            dw_w: zero(&mut g, &[d, 3, 3]),
            dw_b: zero(&mut g, &[d]),
            glu_w: leaf(&mut g, &[d, 2 * d], glu),
            glu_b: zero(&mut g, &[2 * d]),
            pw2_w: zero(&mut g, &[d, d]),
            pw2_b: zero(&mut g, &[d]),
            ln: [unit_ln(&mut g), unit_ln(&mut g), unit_ln(&mut g), unit_ln(&mut g)],
        };
        let out = channel_adapt(&mut g, x, &p);
        let xv = g.value(x);
        let ov = g.value(out);
        for pix in 0..h * w {
            let mut row = xv.data()[pix * d..(pix + 1) * d].to_vec();
            row = layernorm_ref(&row); // pointwise sub-block adds zero
            row = layernorm_ref(&row); // depthwise sub-block adds zero
            let gated: Vec<f64> = row.iter().map(|v| v + 0.5 * v).collect();
            row = layernorm_ref(&gated);
            row = layernorm_ref(&row); // second pointwise adds zero
            for (ch, want) in row.iter().enumerate() {
                let got = ov.data()[pix * d + ch];
                assert!((got - want).abs() < 1e-12, "pixel {pix} channel {ch}");
            }
        }
    }

    #[test]
    fn a_single_key_value_pair_returns_that_value() {
        let mut g = Graph::new();
        let d = 3;
        let q = rand_leaf(&mut g, &[2, d], 61, "q");
        let kv = rand_leaf(&mut g, &[1, d], 61, "kv");
        let out = linear_attention_core(&mut g, q, kv);
        let kvv = g.value(kv).data().to_vec();
        let ov = g.value(out);
        for t in 0..2 {
            for (ch, &want) in kvv.iter().enumerate() {
                let got = ov.data()[t * d + ch];
                assert!((got - want).abs() < 1e-12, "query {t} channel {ch}");
            }
        }
    }

    #[test]
    fn equal_keys_average_the_values() {
        // Keys and values coincide here, so identical keys force identical
        // values and the convex combination collapses to that shared row.
        let mut g = Graph::new();
        let d = 3;
        let row = normal_vec(67, "row", d);
        let q = rand_leaf(&mut g, &[2, d], 67, "q");
        let kv = leaf(&mut g, &[4, d], row.iter().cycle().take(4 * d).copied().collect());
        let out = linear_attention_core(&mut g, q, kv);
        let ov = g.value(out);
        for t in 0..2 {
            for (ch, &want) in row.iter().enumerate() {
                let got = ov.data()[t * d + ch];
                assert!((got - want).abs() < 1e-12, "query {t} channel {ch}");
            }
        }
    }

    #[test]
    fn streamed_linear_attention_matches_the_quadratic_reference() {
        let mut g = Graph::new();
        let (t, m, d) = (3, 5, 4);
        let q = rand_leaf(&mut g, &[t, d], 71, "q");
        let kv = rand_leaf(&mut g, &[m, d], 71, "kv");
        let out = linear_attention_core(&mut g, q, kv);
        let elu1 = |v: f64| if v > 0.0 { v + 1.0 } else { v.exp() };
        let qv = g.value(q).data().to_vec();
        let kvv = g.value(kv).data().to_vec();
        let ov = g.value(out);
        for ti in 0..t {
            let phi_q: Vec<f64> = qv[ti * d..(ti + 1) * d].iter().map(|&v| elu1(v)).collect();
            let raw: Vec<f64> = (0..m)
                .map(|j| {
                    phi_q
                        .iter()
                        .zip(&kvv[j * d..(j + 1) * d])
                        .map(|(a, &b)| a * elu1(b))
                        .sum()
                })
                .collect();
            let z: f64 = raw.iter().sum();
            let weights: Vec<f64> = raw.iter().map(|r| r / z).collect();
            for &wj in &weights {
                assert!(wj > 0.0, "attention weights stay positive");
            }
            assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for ch in 0..d {
                let want: f64 = (0..m).map(|j| weights[j] * kvv[j * d + ch]).sum();
                let got = ov.data()[ti * d + ch];
                assert!((got - want).abs() < 1e-6, "query {ti} channel {ch}: {got} vs {want}");
            }
        }
    }

    proptest! {
        #[test]
        fn attention_outputs_stay_in_the_convex_hull_of_the_values(
            seed in 0u64..500,
            t in 1usize..4,
            m in 1usize..6,
            d in 1usize..4,
        ) {
            let mut g = Graph::new();
            let q = rand_leaf(&mut g, &[t, d], seed, "hull_q");
            let kv = rand_leaf(&mut g, &[m, d], seed, "hull_kv");
            let out = linear_attention_core(&mut g, q, kv);
            let kvv = g.value(kv).data().to_vec();
            let ov = g.value(out);
            for ch in 0..d {
                let lo = (0..m).map(|j| kvv[j * d + ch]).fold(f64::INFINITY, f64::min);
                let hi = (0..m).map(|j| kvv[j * d + ch]).fold(f64::NEG_INFINITY, f64::max);
                for ti in 0..t {
                    let v = ov.data()[ti * d + ch];
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12,
                        "channel {} query {}: {} outside [{}, {}]", ch, ti, v, lo, hi);
                }
            }
        }
    }

    #[test]
    fn gated_query_update_blends_attention_with_the_input() {
        // Zero gate weights give sigmoid(0) = 1/2, and zero MLP weights leave
        // the blend untouched: queries' = (q + attention_out) / 2.
        let mut g = Graph::new();
        let (t, d) = (2, 3);
        let q = rand_leaf(&mut g, &[t, d], 73, "q");
        let xf = rand_leaf(&mut g, &[2, 2, d], 73, "xf");
        let et = rand_leaf(&mut g, &[2, d], 73, "et");
        let zero = |g: &mut Graph, shape: &[usize]| g.leaf(Tensor::full(shape, 0.0));
        let p = QueryAttnParams {
            gate_w: zero(&mut g, &[2 * d, d]),
            gate_b: zero(&mut g, &[d]),
            mlp_w1: zero(&mut g, &[d, 2 * d]),
            mlp_b1: zero(&mut g, &[2 * d]),
            mlp_w2: zero(&mut g, &[2 * d, d]),
            mlp_b2: zero(&mut g, &[d]),
        };
        let updated = language_query_attention(&mut g, q, xf, et, &p);

        let mut g2 = Graph::new();
        let q2 = rand_leaf(&mut g2, &[t, d], 73, "q");
        let xf2 = rand_leaf(&mut g2, &[2, 2, d], 73, "xf");
        let et2 = rand_leaf(&mut g2, &[2, d], 73, "et");
        let flat = g2.reshape(xf2, &[4, d]);
        let ft = g2.permute(flat, &[1, 0]);
        let ett = g2.permute(et2, &[1, 0]);
        let kvt = g2.concat_last(&[ft, ett]);
        let kv = g2.permute(kvt, &[1, 0]);
        let core = linear_attention_core(&mut g2, q2, kv);

        let qv = g.value(q).data().to_vec();
        let cv = g2.value(core).data().to_vec();
        let uv = g.value(updated);
        for i in 0..t * d {
            let want = 0.5 * (qv[i] + cv[i]);
            assert!((uv.data()[i] - want).abs() < 1e-12, "entry {i}");
        }
    }

    fn rand_block(
        g: &mut Graph,
        c: usize,
        d: usize,
        s: usize,
        seed: u64,
        reentry: bool,
    ) -> BlockParams {
        let e = c / 2 + d / 2;
        BlockParams {
            reentry: if reentry {
                Some((rand_leaf(g, &[d, c], seed, "re_w"), rand_leaf(g, &[c], seed, "re_b")))
            } else {
                None
            },
            attn: rand_attn(g, e, d / 2, seed),
            fuse_w: rand_leaf(g, &[2 * d, d], seed, "fuse_w"),
            fuse_b: rand_leaf(g, &[d], seed, "fuse_b"),
            ss2d: rand_ss2d(g, d, s, seed),
            adapt: rand_adapt(g, d, seed),
            query: rand_query(g, d, seed),
        }
    }

    #[test]
    fn a_fusion_block_composes_the_five_stages_bit_exactly() {
        let (c, d, s, heads) = (4, 4, 2, 2);
        let mut g = Graph::new();
        let f = rand_leaf(&mut g, &[3, 3, c], 79, "f");
        let gd = rand_leaf(&mut g, &[3, 3, d], 79, "gd");
        let et = rand_leaf(&mut g, &[2, d], 79, "et");
        let q = rand_leaf(&mut g, &[2, d], 79, "q");
        let p = rand_block(&mut g, c, d, s, 79, false);
        let tr = fusion_block(&mut g, f, gd, et, q, &p, heads);

        let xl = directional_attention(&mut g, f, gd, &p.attn, heads);
        let yg = ss2d_context(&mut g, gd, &p.ss2d);
        let xf = fuse_local_global(&mut g, xl, yg, p.fuse_w, p.fuse_b);
        let xa = channel_adapt(&mut g, xf, &p.adapt);
        let qo = language_query_attention(&mut g, q, xa, et, &p.query);

        assert_eq!(g.value(tr.x_adapted).data(), g.value(xa).data());
        assert_eq!(g.value(tr.queries).data(), g.value(qo).data());
        assert_eq!(g.counters.fusion_block_calls, 1);
    }

    #[test]
    fn stacked_blocks_differ_from_a_single_block() {
        let (c, d, s, heads) = (4, 4, 2, 2);
        let mut g = Graph::new();
        let f = rand_leaf(&mut g, &[3, 3, c], 83, "f");
        let gd = rand_leaf(&mut g, &[3, 3, d], 83, "gd");
        let et = rand_leaf(&mut g, &[2, d], 83, "et");
        let q = rand_leaf(&mut g, &[2, d], 83, "q");
        let b0 = rand_block(&mut g, c, d, s, 83, false);
        let b1 = rand_block(&mut g, c, d, s, 97, true);
        let traces = build_fusion(&mut g, f, gd, et, q, &[b0.clone(), b1], heads);
        assert_eq!(traces.len(), 2);
        assert_eq!(g.counters.fusion_block_calls, 2);
        let one = g.value(traces[0].x_adapted).data().to_vec();
        let two = g.value(traces[1].x_adapted).data().to_vec();
        let diff: f64 = one.iter().zip(&two).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6, "a second block must transform the map");
        // The second block's local branch reads the first block's output, not
        // the original encoder map.
        let q1 = g.value(traces[0].queries).data().to_vec();
        let q2 = g.value(traces[1].queries).data().to_vec();
        let qdiff: f64 = q1.iter().zip(&q2).map(|(a, b)| (a - b).abs()).sum();
        assert!(qdiff > 1e-9, "queries must keep evolving");
    }

    #[test]
    fn every_fusion_input_passes_gradcheck() {
        let (c, d, s, heads, t, n) = (4, 4, 2, 2, 2, 2);
        let e = c / 2 + d / 2;
        let mut shapes: Vec<(&str, Vec<usize>)> = vec![
            ("f", vec![4, 4, c]),
            ("gd", vec![4, 4, d]),
            ("et", vec![n, d]),
            ("q", vec![t, d]),
            ("wq", vec![e, e]),
            ("wk", vec![e, e]),
            ("wv", vec![e, e]),
            ("wo_h", vec![e, d / 2]),
            ("bo_h", vec![d / 2]),
            ("wo_v", vec![e, d / 2]),
            ("bo_v", vec![d / 2]),
            ("fuse_w", vec![2 * d, d]),
            ("fuse_b", vec![d]),
            ("pw1_w", vec![d, d]),
            ("pw1_b", vec![d]),
            ("dw_w", vec![d, 3, 3]),
            ("dw_b", vec![d]),
            ("glu_w", vec![d, 2 * d]),
            ("glu_b", vec![2 * d]),
            ("pw2_w", vec![d, d]),
            ("pw2_b", vec![d]),
            ("gate_w", vec![2 * d, d]),
            ("gate_b", vec![d]),
            ("mlp_w1", vec![d, 2 * d]),
            ("mlp_b1", vec![2 * d]),
            ("mlp_w2", vec![2 * d, d]),
            ("mlp_b2", vec![d]),
        ];
        for j in 0..4 {
            shapes.push(("ss2d_a", vec![d, s]));
            shapes.push(("ss2d_b", vec![d, s]));
            shapes.push(("ss2d_c", vec![d, s]));
            let _ = j;
        }
        let inputs: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let numel: usize = shape.iter().product();
                let data: Vec<f64> = normal_vec(101 + i as u64, name, numel)
                    .iter()
                    .map(|v| 0.3 * v)
                    .collect();
                Tensor::from_vec(shape, data)
            })
            .collect();
        let report = check_builder(
            &inputs,
            &|g, ids| {
                let unit_ln = |g: &mut Graph| {
                    (g.leaf(Tensor::full(&[d], 1.0)), g.leaf(Tensor::full(&[d], 0.0)))
                };
                let p = BlockParams {
                    reentry: None,
                    attn: DirectionalParams {
                        wq: ids[4],
                        wk: ids[5],
                        wv: ids[6],
                        wo_h: ids[7],
                        bo_h: ids[8],
                        wo_v: ids[9],
                        bo_v: ids[10],
                    },
                    fuse_w: ids[11],
                    fuse_b: ids[12],
                    ss2d: Ss2dParams {
                        dirs: [
                            Ss2dDirection { a_raw: ids[27], b: ids[28], c: ids[29] },
                            Ss2dDirection { a_raw: ids[30], b: ids[31], c: ids[32] },
                            Ss2dDirection { a_raw: ids[33], b: ids[34], c: ids[35] },
                            Ss2dDirection { a_raw: ids[36], b: ids[37], c: ids[38] },
                        ],
                    },
                    adapt: AdaptParams {
                        pw1_w: ids[13],
                        pw1_b: ids[14],
                        dw_w: ids[15],
                        dw_b: ids[16],
                        glu_w: ids[17],
                        glu_b: ids[18],
                        pw2_w: ids[19],
                        pw2_b: ids[20],
                        ln: [unit_ln(g), unit_ln(g), unit_ln(g), unit_ln(g)],
                    },
                    query: QueryAttnParams {
                        gate_w: ids[21],
                        gate_b: ids[22],
                        mlp_w1: ids[23],
                        mlp_b1: ids[24],
                        mlp_w2: ids[25],
                        mlp_b2: ids[26],
                    },
                };
                let tr = fusion_block(g, ids[0], ids[1], ids[2], ids[3], &p, heads);
                let probe_map = {
                    let shape = g.value(tr.x_adapted).shape().to_vec();
                    let numel = g.value(tr.x_adapted).numel();
                    let w: Vec<f64> = normal_vec(7, "probe_map", numel)
                        .iter()
                        .map(|v| 0.1 * v)
                        .collect();
                    let w = Tensor::from_vec(&shape, w);
                    g.dot_const(tr.x_adapted, &w)
                };
                let probe_q = {
                    let shape = g.value(tr.queries).shape().to_vec();
                    let numel = g.value(tr.queries).numel();
                    let w: Vec<f64> = normal_vec(7, "probe_q", numel)
                        .iter()
                        .map(|v| 0.1 * v)
                        .collect();
                    let w = Tensor::from_vec(&shape, w);
                    g.dot_const(tr.queries, &w)
                };
                g.add(probe_map, probe_q)
            },
            &CheckConfig { sample: Sample::Fraction { fraction: 0.35, seed: 5 }, ..CheckConfig::default() },
        )
        .unwrap();
        assert!(
            report.passed(&CheckConfig::default()),
            "max relative error {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}
