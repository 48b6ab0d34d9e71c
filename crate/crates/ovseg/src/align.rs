//! Prior-guided regional alignment.
//!
//! This stage turns frozen visual tokens and prompt embeddings into a
//! per-pixel guidance tensor. An image-level object prior scores how strongly
//! each category appears anywhere in the image; prompts are confidence-scaled
//! by that prior; region-pooled tokens are matched to the scaled prompts by
//! cosine similarity; a temperature softmax distributes each category's
//! attention over regions; the attended visual prototype and the scaled
//! prompt feed a text-side guidance projection, while an attention-pooled
//! visual summary feeds an image-side projection; a norm-difference gate
//! blends the two per region, and the blend is broadcast back to pixels.
//!
//! All builders append to a [`Graph`] tape, so every output is differentiable
//! and checkable against finite differences.

use crate::graph::{Graph, NodeId};
use crate::tensor::{RegionGrid, Tensor};
use std::rc::Rc;

/// Floor applied to the prior before it scales a prompt, keeping the
/// modulation factor strictly positive even for hostile priors.
pub const PRIOR_FLOOR: f64 = 1e-4;

/// Guidance-gate norms are clamped here; the gate depends only on the norm
/// difference, so the clamp changes nothing until a norm actually overflows
/// the comparison range.
pub const NORM_CLAMP: f64 = 50.0;

/// How the prior-mixing weight λ is realized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaMode {
    /// λ fixed at a constant in [0, 1].
    Fixed(f64),
    /// λ = sigmoid(raw) with `raw` trainable (initialized to 0, so λ starts
    /// at 0.5).
    Adaptive,
}

#[derive(Debug, Clone)]
pub struct AlignConfig {
    /// Sharpness of the text-to-region attention softmax.
    pub tau: f64,
    /// Sharpness of the per-region category softmax inside guidance mixing.
    pub beta: f64,
    /// Region grid side r; the token map is tiled into r x r regions.
    pub region_side: usize,
    /// Width D of the guidance vectors.
    pub guidance_dim: usize,
    pub lambda: LambdaMode,
}

impl Default for AlignConfig {
    fn default() -> AlignConfig {
        AlignConfig {
            tau: 5.0,
            beta: 5.0,
            region_side: 6,
            guidance_dim: 64,
            lambda: LambdaMode::Adaptive,
        }
    }
}

/// Trainable parameters of the alignment stage, already on the tape.
#[derive(Debug, Clone)]
pub struct AlignParams {
    /// Effective λ in [0, 1], shape `[1]`.
    pub lambda: NodeId,
    /// Text-side guidance projection `[2C, D]` and bias `[D]`.
    pub text_proj_w: NodeId,
    pub text_proj_b: NodeId,
    /// Token-scoring MLP: `[C, C]` + `[C]`, then `[C, 1]` + `[1]`.
    pub score_w1: NodeId,
    pub score_b1: NodeId,
    pub score_w2: NodeId,
    pub score_b2: NodeId,
    /// Image-side guidance projection `[C, D]` and bias `[D]`.
    pub image_proj_w: NodeId,
    pub image_proj_b: NodeId,
    /// Projection `[D, D]` applied to the attended text guidance (no bias).
    pub text_gate_w: NodeId,
}

/// Every intermediate the alignment stage exposes for observation and tests.
#[derive(Debug, Clone)]
pub struct AlignOutputs {
    /// Image-level category prior `[N]`.
    pub prior: NodeId,
    /// Prompt modulation factors `[N]`.
    pub modulation: NodeId,
    /// Modulated prompts `[N, C]`.
    pub t_hat: NodeId,
    /// Region-pooled tokens `[K, C]`.
    pub regions: NodeId,
    /// Region/category cosine alignment `[K, N]`.
    pub alignment: NodeId,
    /// Column-stochastic text-to-region attention `[K, N]`.
    pub attention: NodeId,
    /// Attended visual prototypes `[N, C]`.
    pub prototypes: NodeId,
    /// Text-side guidance `[N, D]`.
    pub g_region: NodeId,
    /// Image-side guidance `[K, D]`.
    pub g_image: NodeId,
    /// Attended text guidance per region `[K, D]`.
    pub g_text: NodeId,
    /// Gate values `[K]`.
    pub alpha: NodeId,
    /// Blended guidance per region `[K, D]`.
    pub per_region: NodeId,
    /// Guidance broadcast to pixels `[H, W, D]`.
    pub guidance: NodeId,
}

/// Image-level object prior: `p[n]` is the mean over tokens of the
/// token/prompt cosine.
pub fn object_prior(g: &mut Graph, v: NodeId, t_bar: NodeId) -> NodeId {
    g.counters.prior_evaluations += 1;
    let cos = g.cosine_matrix(v, t_bar);
    g.mean_first(cos)
}

/// Confidence modulation: `u[n] = (1 - λ) + λ * max(p[n], floor)` and
/// `t_hat[n, :] = u[n] * t_bar[n, :]`. Returns `(u, t_hat)`.
pub fn modulate_prompts(
    g: &mut Graph,
    t_bar: NodeId,
    prior: NodeId,
    lambda: NodeId,
) -> (NodeId, NodeId) {
    let floored = g.clamp_min(prior, PRIOR_FLOOR);
    let scaled = g.scale_by(floored, lambda);
    let one = g.constant(Tensor::scalar(1.0));
    let rest = g.sub(one, lambda);
    let u = g.add_scalar_node(scaled, rest);
    let t_hat = g.mul_col(t_bar, u);
    (u, t_hat)
}

/// Region-level alignment: tokens are mean-pooled per region and matched to
/// the modulated prompts by cosine. Returns `(alignment [K, N], regions [K, C])`.
pub fn regional_alignment(
    g: &mut Graph,
    v: NodeId,
    t_hat: NodeId,
    grid: &Rc<RegionGrid>,
) -> (NodeId, NodeId) {
    let c = g.value(v).shape()[1];
    let v_grid = g.reshape(v, &[grid.h, grid.w, c]);
    let regions = g.region_pool(v_grid, Rc::clone(grid));
    let alignment = g.cosine_matrix(regions, t_hat);
    (alignment, regions)
}

/// Column-stochastic attention: `w[:, n] = softmax_k(tau * a[:, n])`.
pub fn text_to_region_attention(g: &mut Graph, alignment: NodeId, tau: f64) -> NodeId {
    let cols = g.permute(alignment, &[1, 0]);
    let soft = g.softmax_last(cols, tau);
    g.permute(soft, &[1, 0])
}

/// Attended visual prototypes: `m[n, :] = sum_k w[k, n] * regions[k, :]`.
pub fn region_prototypes(g: &mut Graph, attention: NodeId, regions: NodeId) -> NodeId {
    let wt = g.permute(attention, &[1, 0]);
    g.matmul(wt, regions)
}

/// Text-side guidance: `g_region[n] = W_t [m_n ∥ t_hat_n] + b_t`.
pub fn text_guidance(
    g: &mut Graph,
    prototypes: NodeId,
    t_hat: NodeId,
    w: NodeId,
    b: NodeId,
) -> NodeId {
    let cat = g.concat_last(&[prototypes, t_hat]);
    let lin = g.matmul(cat, w);
    g.add_row_bias(lin, b)
}

/// Image-side guidance: a two-layer MLP scores every token, regions pool
/// their tokens by a softmax over those scores, and the pooled summary is
/// projected to guidance width.
pub fn image_guidance(
    g: &mut Graph,
    v: NodeId,
    params: &AlignParams,
    grid: &Rc<RegionGrid>,
) -> NodeId {
    let c = g.value(v).shape()[1];
    let h1 = g.matmul(v, params.score_w1);
    let h1 = g.add_row_bias(h1, params.score_b1);
    let h1 = g.gelu(h1);
    let s = g.matmul(h1, params.score_w2);
    let s = g.add_row_bias(s, params.score_b2);
    let scores = g.reshape(s, &[grid.h, grid.w]);
    let v_grid = g.reshape(v, &[grid.h, grid.w, c]);
    let pooled = g.region_softmax_pool(v_grid, scores, Rc::clone(grid));
    let proj = g.matmul(pooled, params.image_proj_w);
    g.add_row_bias(proj, params.image_proj_b)
}

/// Gated guidance mixing and pixel broadcast.
///
/// Each region attends over categories (`softmax_n(beta * a[k, :])`) to pool
/// text guidance, projects it, and blends it with the image guidance through
/// `alpha = sigmoid(clamp v_norm - clamp t_norm)`; the blend is broadcast to
/// every pixel of the region. Returns `(g_text, alpha, per_region, guidance)`.
pub fn mix_guidance(
    g: &mut Graph,
    alignment: NodeId,
    g_region: NodeId,
    g_image: NodeId,
    text_gate_w: NodeId,
    beta: f64,
    grid: &Rc<RegionGrid>,
) -> (NodeId, NodeId, NodeId, NodeId) {
    let k = g.value(alignment).shape()[0];
    let over_categories = g.softmax_last(alignment, beta);
    let pooled = g.matmul(over_categories, g_region);
    let g_text = g.matmul(pooled, text_gate_w);
    let vn = g.l2norm_rows(g_image);
    let tn = g.l2norm_rows(g_text);
    let vn = g.clamp_max(vn, NORM_CLAMP);
    let tn = g.clamp_max(tn, NORM_CLAMP);
    let diff = g.sub(vn, tn);
    let alpha = g.sigmoid(diff);
    let from_image = g.mul_col(g_image, alpha);
    let ones = g.constant(Tensor::full(&[k], 1.0));
    let rest = g.sub(ones, alpha);
    let from_text = g.mul_col(g_text, rest);
    let per_region = g.add(from_image, from_text);
    let guidance = g.region_broadcast(per_region, Rc::clone(grid));
    (g_text, alpha, per_region, guidance)
}

/// Builds the full alignment stage over visual tokens `v: [HW, C]` and mean
/// prompts `t_bar: [N, C]`.
pub fn build_alignment(
    g: &mut Graph,
    cfg: &AlignConfig,
    v: NodeId,
    t_bar: NodeId,
    params: &AlignParams,
    grid: &Rc<RegionGrid>,
) -> AlignOutputs {
    let prior = object_prior(g, v, t_bar);
    let (modulation, t_hat) = modulate_prompts(g, t_bar, prior, params.lambda);
    let (alignment, regions) = regional_alignment(g, v, t_hat, grid);
    let attention = text_to_region_attention(g, alignment, cfg.tau);
    let prototypes = region_prototypes(g, attention, regions);
    let g_region = text_guidance(g, prototypes, t_hat, params.text_proj_w, params.text_proj_b);
    let g_image = image_guidance(g, v, params, grid);
    let (g_text, alpha, per_region, guidance) =
        mix_guidance(g, alignment, g_region, g_image, params.text_gate_w, cfg.beta, grid);
    AlignOutputs {
        prior,
        modulation,
        t_hat,
        regions,
        alignment,
        attention,
        prototypes,
        g_region,
        g_image,
        g_text,
        alpha,
        per_region,
        guidance,
    }
}
