//! Query-correlation decoder with guidance-modulated upsampling.
//!
//! The learnable language queries and the fused feature map project into a
//! shared correlation space, where each query modulates the per-pixel
//! embedding channel-wise. Two decode stages then double the resolution each:
//! a learnable 2x upsampling kernel, a 3x3 convolution shared across the
//! query axis, and a per-channel scale/shift predicted from the matching
//! shallow encoder map. The query axis is averaged out, pixels project back
//! to the guidance width, and per-category logits are temperature-scaled
//! cosine similarities against the regional text guidance — so the category
//! count stays a free runtime dimension, and adding categories never changes
//! existing logits. A masked multi-label binary cross-entropy with a stable
//! log-sigmoid form scores the result.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};

/// Widths of the decode path.
#[derive(Debug, Clone)]
pub struct DecoderConfig {
    /// Channels of the correlation space.
    pub corr_channels: usize,
    /// Initial output temperature.
    pub tau_out_init: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { corr_channels: 8, tau_out_init: 10.0 }
    }
}

/// Weights of one decode stage.
#[derive(Debug, Clone, Copy)]
pub struct StageParams {
    /// Per-channel 2x2 upsampling kernel `[C, 2, 2]`.
    pub up_kern: NodeId,
    /// Convolution weights `[C, C, 3, 3]` + bias `[C]`, shared across queries.
    pub conv_w: NodeId,
    pub conv_b: NodeId,
    /// Guidance head `[C_s, 2C]` + bias `[2C]` predicting per-channel scale
    /// (first half) and shift (second half) from the shallow map.
    pub film_w: NodeId,
    pub film_b: NodeId,
}

/// All decoder weights.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    /// Query projection `[D, C]` into the correlation space (bias-free so a
    /// zero feature map yields a zero correlation).
    pub q_proj_w: NodeId,
    /// Feature projection `[D, C]` into the correlation space (bias-free).
    pub x_proj_w: NodeId,
    /// The two upsampling stages, in order.
    pub stages: [StageParams; 2],
    /// Pixel-embedding projection `[C, D]` back to the guidance width.
    pub out_proj_w: NodeId,
    /// Learnable output temperature `[1]`.
    pub tau_out: NodeId,
}

/// Correlates queries `[T, D]` with the fused map `[H, W, D]`:
/// `F[t, h, w, c] = (q_t W_q)[c] * (X[h, w] W_x)[c]`, shape `[T, H, W, C]`.
pub fn build_correlation(
    g: &mut Graph,
    queries: NodeId,
    x_fused: NodeId,
    q_proj_w: NodeId,
    x_proj_w: NodeId,
) -> NodeId {
    let qs = g.value(queries).shape().to_vec();
    let xs = g.value(x_fused).shape().to_vec();
    let t = qs[0];
    let (h, w, d) = (xs[0], xs[1], xs[2]);
    assert_eq!(qs[1], d, "query width differs from map width");
    let c = g.value(q_proj_w).shape()[1];
    let pq = g.matmul(queries, q_proj_w);
    let flat = g.reshape(x_fused, &[h * w, d]);
    let px = g.matmul(flat, x_proj_w);
    let corr = g.broadcast_outer_mul(pq, px);
    g.reshape(corr, &[t, h, w, c])
}

/// One decode stage: learnable 2x upsampling, a shared 3x3 convolution, and
/// a per-channel scale/shift predicted from the shallow map `s_i`, whose
/// spatial extents must be exactly twice those of `f`.
pub fn decode_stage(g: &mut Graph, f: NodeId, s_i: NodeId, p: &StageParams) -> Result<NodeId> {
    let fs = g.value(f).shape().to_vec();
    let ss = g.value(s_i).shape().to_vec();
    let (h, w, c) = (fs[1], fs[2], fs[3]);
    if ss[0] != 2 * h || ss[1] != 2 * w {
        return Err(Error::arg(format!(
            "stage guidance map is {}x{} but the upsampled grid is {}x{}",
            ss[0],
            ss[1],
            2 * h,
            2 * w
        )));
    }
    let cs = ss[2];
    let up = g.upsample2x(f, p.up_kern);
    let conv = g.conv3x3_shared(up, p.conv_w, p.conv_b);
    let flat_s = g.reshape(s_i, &[4 * h * w, cs]);
    let head = g.matmul(flat_s, p.film_w);
    let head = g.add_row_bias(head, p.film_b);
    let gamma = g.slice_last(head, 0, c);
    let delta = g.slice_last(head, c, 2 * c);
    let gamma = g.reshape(gamma, &[2 * h, 2 * w, c]);
    let delta = g.reshape(delta, &[2 * h, 2 * w, c]);
    Ok(g.film(conv, gamma, delta))
}

/// Reduces the query axis by mean, projects pixels back to the guidance
/// width, and scores each category as a temperature-scaled cosine against its
/// regional guidance row: `[N, H', W']`.
pub fn project_logits(
    g: &mut Graph,
    f: NodeId,
    g_region: NodeId,
    out_proj_w: NodeId,
    tau_out: NodeId,
) -> NodeId {
    let fs = g.value(f).shape().to_vec();
    let (h, w, c) = (fs[1], fs[2], fs[3]);
    let n = g.value(g_region).shape()[0];
    let mean = g.mean_first(f);
    let flat = g.reshape(mean, &[h * w, c]);
    let emb = g.matmul(flat, out_proj_w);
    let cos = g.cosine_matrix(emb, g_region);
    let scaled = g.scale_by(cos, tau_out);
    let by_class = g.permute(scaled, &[1, 0]);
    g.reshape(by_class, &[n, h, w])
}

/// Crops the padded margin of `logits: [N, H, W]` to `valid` and resizes to
/// `target`; bit-exact identity when the extents already match.
pub fn final_resize(
    g: &mut Graph,
    logits: NodeId,
    valid: (usize, usize),
    target: (usize, usize),
) -> NodeId {
    let cropped = g.crop_spatial(logits, valid);
    g.bilinear_resize(cropped, target)
}

/// Full decode path: correlation, two stages with an activation between them,
/// the logit head, and the final resize. `s1` and `s2` are the shallow maps
/// at 2x and 4x the fused resolution; `valid`/`target` control the final
/// crop and resize.
#[allow(clippy::too_many_arguments)]
pub fn build_decoder(
    g: &mut Graph,
    queries: NodeId,
    x_fused: NodeId,
    s1: NodeId,
    s2: NodeId,
    g_region: NodeId,
    p: &DecoderParams,
    valid: (usize, usize),
    target: (usize, usize),
) -> Result<NodeId> {
    let corr = build_correlation(g, queries, x_fused, p.q_proj_w, p.x_proj_w);
    let f1 = decode_stage(g, corr, s1, &p.stages[0])?;
    let f1 = g.gelu(f1);
    let f2 = decode_stage(g, f1, s2, &p.stages[1])?;
    let logits = project_logits(g, f2, g_region, p.out_proj_w, p.tau_out);
    Ok(final_resize(g, logits, valid, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_builder, CheckConfig, Sample};
    use crate::graph::Gradients;
    use crate::rng::normal_vec;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn leaf(g: &mut Graph, shape: &[usize], data: Vec<f64>) -> NodeId {
        g.leaf(Tensor::from_vec(shape, data))
    }

    fn rand_leaf(g: &mut Graph, shape: &[usize], seed: u64, label: &str) -> NodeId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = normal_vec(seed, label, n).iter().map(|v| 0.4 * v).collect();
        leaf(g, shape, data)
    }

    fn rand_stage(g: &mut Graph, c: usize, cs: usize, seed: u64) -> StageParams {
        StageParams {
            up_kern: rand_leaf(g, &[c, 2, 2], seed, "up_kern"),
            conv_w: rand_leaf(g, &[c, c, 3, 3], seed, "conv_w"),
            conv_b: rand_leaf(g, &[c], seed, "conv_b"),
            film_w: rand_leaf(g, &[cs, 2 * c], seed, "film_w"),
            film_b: rand_leaf(g, &[2 * c], seed, "film_b"),
        }
    }

    #[test]
    fn neutral_query_modulation_repeats_the_projected_map() {
        let mut g = Graph::new();
        let (t, d, c) = (3, 4, 2);
        // Each query is a basis row whose projection row is all ones.
        let mut qdata = vec![0.0; t * d];
        for ti in 0..t {
            qdata[ti * d] = 1.0;
        }
        let queries = leaf(&mut g, &[t, d], qdata);
        let mut wq = vec![0.0; d * c];
        wq[..c].fill(1.0);
        let q_proj = leaf(&mut g, &[d, c], wq);
        let x = rand_leaf(&mut g, &[2, 2, d], 3, "x");
        let x_proj = rand_leaf(&mut g, &[d, c], 3, "x_proj");
        let corr = build_correlation(&mut g, queries, x, q_proj, x_proj);
        let cv = g.value(corr);
        assert_eq!(cv.shape(), [t, 2, 2, c]);
        let plane = 4 * c;
        for ti in 1..t {
            for p in 0..plane {
                assert_eq!(cv.data()[p], cv.data()[ti * plane + p], "query {ti} entry {p}");
            }
        }
    }

    #[test]
    fn zero_features_annihilate_the_correlation() {
        let mut g = Graph::new();
        let (t, d, c) = (2, 3, 2);
        let queries = rand_leaf(&mut g, &[t, d], 5, "q");
        let x = g.leaf(Tensor::full(&[2, 3, d], 0.0));
        let q_proj = rand_leaf(&mut g, &[d, c], 5, "q_proj");
        let x_proj = rand_leaf(&mut g, &[d, c], 5, "x_proj");
        let corr = build_correlation(&mut g, queries, x, q_proj, x_proj);
        assert!(g.value(corr).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn correlation_matches_an_explicit_triple_loop() {
        let mut g = Graph::new();
        let (t, h, w, d, c) = (2, 2, 3, 4, 3);
        let queries = rand_leaf(&mut g, &[t, d], 7, "q");
        let x = rand_leaf(&mut g, &[h, w, d], 7, "x");
        let q_proj = rand_leaf(&mut g, &[d, c], 7, "q_proj");
        let x_proj = rand_leaf(&mut g, &[d, c], 7, "x_proj");
        let corr = build_correlation(&mut g, queries, x, q_proj, x_proj);
        let qv = g.value(queries);
        let xv = g.value(x);
        let wq = g.value(q_proj);
        let wx = g.value(x_proj);
        let cv = g.value(corr);
        for ti in 0..t {
            for y in 0..h {
                for xx in 0..w {
                    for ch in 0..c {
                        let pq: f64 =
                            (0..d).map(|i| qv.data()[ti * d + i] * wq.data()[i * c + ch]).sum();
                        let px: f64 = (0..d)
                            .map(|i| xv.data()[(y * w + xx) * d + i] * wx.data()[i * c + ch])
                            .sum();
                        let got = cv.data()[((ti * h + y) * w + xx) * c + ch];
                        let want = pq * px;
                        assert!(
                            (got - want).abs() < 1e-12,
                            "(t={ti}, y={y}, x={xx}, c={ch}): {got} vs {want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn identity_modulation_reduces_a_stage_to_upsample_and_conv() {
        let mut g = Graph::new();
        let (t, h, w, c, cs) = (2, 2, 2, 3, 2);
        let f = rand_leaf(&mut g, &[t, h, w, c], 11, "f");
        let s = rand_leaf(&mut g, &[2 * h, 2 * w, cs], 11, "s");
        let mut p = rand_stage(&mut g, c, cs, 11);
        p.film_w = g.leaf(Tensor::full(&[cs, 2 * c], 0.0));
        let mut fb = vec![0.0; 2 * c];
        fb[..c].fill(1.0);
        p.film_b = leaf(&mut g, &[2 * c], fb);
        let staged = decode_stage(&mut g, f, s, &p).unwrap();
        let up = g.upsample2x(f, p.up_kern);
        let plain = g.conv3x3_shared(up, p.conv_w, p.conv_b);
        assert_eq!(g.value(staged).data(), g.value(plain).data());
    }

    #[test]
    fn a_stage_doubles_the_spatial_extents_and_rejects_mismatched_guidance() {
        let mut g = Graph::new();
        let (t, h, w, c, cs) = (2, 3, 2, 2, 2);
        let f = rand_leaf(&mut g, &[t, h, w, c], 13, "f");
        let good = rand_leaf(&mut g, &[2 * h, 2 * w, cs], 13, "s");
        let bad = rand_leaf(&mut g, &[2 * h, 2 * w + 1, cs], 13, "s_bad");
        let p = rand_stage(&mut g, c, cs, 13);
        let out = decode_stage(&mut g, f, good, &p).unwrap();
        assert_eq!(g.value(out).shape(), [t, 2 * h, 2 * w, c]);
        let err = decode_stage(&mut g, f, bad, &p).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
    }

    #[test]
    fn a_single_pixel_stage_matches_a_direct_convolution_reference() {
        let mut g = Graph::new();
        let (c, cs) = (2, 2);
        let f = rand_leaf(&mut g, &[1, 1, 1, c], 17, "f");
        let s = rand_leaf(&mut g, &[2, 2, cs], 17, "s");
        let mut p = rand_stage(&mut g, c, cs, 17);
        p.up_kern = g.leaf(Tensor::full(&[c, 2, 2], 1.0));
        p.film_w = g.leaf(Tensor::full(&[cs, 2 * c], 0.0));
        let mut fb = vec![0.0; 2 * c];
        fb[..c].fill(1.0);
        p.film_b = leaf(&mut g, &[2 * c], fb);
        let out = decode_stage(&mut g, f, s, &p).unwrap();
        // A unit kernel expands the single pixel to a constant 2x2 patch;
        // convolve that patch directly with zero padding.
        let fv = g.value(f).data().to_vec();
        let wv = g.value(p.conv_w);
        let bv = g.value(p.conv_b);
        let ov = g.value(out);
        for y in 0..2usize {
            for x in 0..2usize {
                for co in 0..c {
                    let mut want = bv.data()[co];
                    for dy in 0..3usize {
                        let yy = y as isize + dy as isize - 1;
                        if !(0..2).contains(&yy) {
                            continue;
                        }
                        for dx in 0..3usize {
                            let xx = x as isize + dx as isize - 1;
                            if !(0..2).contains(&xx) {
                                continue;
                            }
                            for (ci, &fci) in fv.iter().enumerate() {
                                want += fci * wv.data()[((co * c + ci) * 3 + dy) * 3 + dx];
                            }
                        }
                    }
                    let got = ov.data()[(y * 2 + x) * c + co];
                    assert!((got - want).abs() < 1e-12, "({y},{x},{co}): {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn parallel_and_orthogonal_guidance_pin_the_logit_scale() {
        let mut g = Graph::new();
        let (t, c) = (2, 3);
        // out_proj is the identity, every pixel embedding is (2, 0, 0), and
        // the two guidance rows are parallel and orthogonal to it.
        let f = leaf(
            &mut g,
            &[t, 1, 2, c],
            vec![2.0, 0.0, 0.0, 2.0, 0.0, 0.0, 2.0, 0.0, 0.0, 2.0, 0.0, 0.0],
        );
        let mut eye = vec![0.0; c * c];
        for i in 0..c {
            eye[i * c + i] = 1.0;
        }
        let out_proj = leaf(&mut g, &[c, c], eye);
        let g_region = leaf(&mut g, &[2, c], vec![5.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let tau = leaf(&mut g, &[1], vec![10.0]);
        let logits = project_logits(&mut g, f, g_region, out_proj, tau);
        let lv = g.value(logits);
        assert_eq!(lv.shape(), [2, 1, 2]);
        for x in 0..2 {
            assert!((lv.data()[x] - 10.0).abs() < 1e-12, "parallel logit {}", lv.data()[x]);
            assert!(lv.data()[2 + x].abs() < 1e-12, "orthogonal logit {}", lv.data()[2 + x]);
        }
    }

    #[test]
    fn adding_categories_leaves_existing_logits_untouched() {
        let mut g = Graph::new();
        let (t, c, d) = (2, 3, 4);
        let f = rand_leaf(&mut g, &[t, 2, 2, c], 19, "f");
        let out_proj = rand_leaf(&mut g, &[c, d], 19, "out_proj");
        let tau = leaf(&mut g, &[1], vec![10.0]);
        let two = normal_vec(19, "gr", 2 * d);
        let third = normal_vec(19, "extra", d);
        let gr2 = leaf(&mut g, &[2, d], two.clone());
        let mut all = two;
        all.extend(third);
        let gr3 = leaf(&mut g, &[3, d], all);
        let small = project_logits(&mut g, f, gr2, out_proj, tau);
        let large = project_logits(&mut g, f, gr3, out_proj, tau);
        let sv = g.value(small);
        let lv = g.value(large);
        assert_eq!(sv.data(), &lv.data()[..sv.numel()]);
    }

    #[test]
    fn two_stages_take_the_grid_to_four_times_the_resolution() {
        let mut g = Graph::new();
        let (t, h, w, d, c, cs, n) = (2, 4, 4, 3, 2, 2, 2);
        let queries = rand_leaf(&mut g, &[t, d], 23, "q");
        let x = rand_leaf(&mut g, &[h, w, d], 23, "x");
        let s1 = rand_leaf(&mut g, &[2 * h, 2 * w, cs], 23, "s1");
        let s2 = rand_leaf(&mut g, &[4 * h, 4 * w, cs], 23, "s2");
        let gr = rand_leaf(&mut g, &[n, d], 23, "gr");
        let p = DecoderParams {
            q_proj_w: rand_leaf(&mut g, &[d, c], 23, "q_proj"),
            x_proj_w: rand_leaf(&mut g, &[d, c], 23, "x_proj"),
            stages: [rand_stage(&mut g, c, cs, 23), rand_stage(&mut g, c, cs, 29)],
            out_proj_w: rand_leaf(&mut g, &[c, d], 23, "out_proj"),
            tau_out: leaf(&mut g, &[1], vec![10.0]),
        };
        let same =
            build_decoder(&mut g, queries, x, s1, s2, gr, &p, (4 * h, 4 * w), (4 * h, 4 * w))
                .unwrap();
        assert_eq!(g.value(same).shape(), [n, 4 * h, 4 * w]);
        let resized =
            build_decoder(&mut g, queries, x, s1, s2, gr, &p, (4 * h, 4 * w), (20, 24)).unwrap();
        assert_eq!(g.value(resized).shape(), [n, 20, 24]);
    }

    #[test]
    fn zero_logits_with_a_full_mask_cost_ln_two() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::full(&[1, 2, 2], 0.0));
        let y = Tensor::from_vec(&[1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        let m = Tensor::full(&[2, 2], 1.0);
        let loss = g.masked_bce(logits, &y, &m);
        assert!((g.value(loss).item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn a_pinned_two_class_pixel_matches_the_hand_computed_loss() {
        let mut g = Graph::new();
        let logits = leaf(&mut g, &[2, 1, 1], vec![2.0, -2.0]);
        let y = Tensor::from_vec(&[2, 1, 1], vec![1.0, 0.0]);
        let m = Tensor::full(&[1, 1], 1.0);
        let loss = g.masked_bce(logits, &y, &m);
        let sigma2 = 1.0 / (1.0 + (-2.0f64).exp());
        let want = -(sigma2.ln() + (1.0 - (1.0 - sigma2)).ln());
        assert!((want - 0.253856).abs() < 1e-6, "hand value sanity: {want}");
        assert!((g.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn an_empty_mask_warns_and_returns_zero() {
        let mut g = Graph::new();
        let logits = rand_leaf(&mut g, &[2, 2, 2], 31, "logits");
        let y = Tensor::from_vec(&[2, 2, 2], vec![1.0; 8]);
        let m = Tensor::full(&[2, 2], 0.0);
        let loss = g.masked_bce(logits, &y, &m);
        assert_eq!(g.value(loss).item(), 0.0);
        assert_eq!(g.counters.zero_mask_warnings, 1);
    }

    #[test]
    fn masked_out_pixels_never_influence_the_loss() {
        let base = normal_vec(37, "logits", 8);
        let y = Tensor::from_vec(&[2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        let m = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let eval = |data: Vec<f64>| {
            let mut g = Graph::new();
            let logits = leaf(&mut g, &[2, 2, 2], data);
            let loss = g.masked_bce(logits, &y, &m);
            g.value(loss).item()
        };
        let reference = eval(base.clone());
        let mut poked = base;
        // Pixels (0,1) and (1,0) are masked out; classes index the lead axis.
        poked[1] += 100.0;
        poked[2] -= 3.0;
        poked[4 + 1] += 7.0;
        poked[4 + 2] = f64::MAX / 1e10;
        assert_eq!(eval(poked), reference);
    }

    #[test]
    fn the_loss_gradient_matches_the_sigmoid_residual() {
        let mut g = Graph::new();
        let (n, h, w) = (2, 3, 3);
        let logits = rand_leaf(&mut g, &[n, h, w], 41, "logits");
        let y_data: Vec<f64> =
            normal_vec(41, "y", n * h * w).iter().map(|v| if *v > 0.0 { 1.0 } else { 0.0 }).collect();
        let m_data: Vec<f64> =
            normal_vec(41, "m", h * w).iter().map(|v| if *v > -0.3 { 1.0 } else { 0.0 }).collect();
        let y = Tensor::from_vec(&[n, h, w], y_data.clone());
        let m = Tensor::from_vec(&[h, w], m_data.clone());
        let loss = g.masked_bce(logits, &y, &m);
        let grads: Gradients = g.backward(loss).unwrap();
        let got = grads.of(logits);
        let mask_sum: f64 = m_data.iter().sum();
        let xv = g.value(logits);
        for ni in 0..n {
            for p in 0..h * w {
                let x = xv.data()[ni * h * w + p];
                let sigma = 1.0 / (1.0 + (-x).exp());
                let want = m_data[p] * (sigma - y_data[ni * h * w + p]) / mask_sum;
                let gv = got.data()[ni * h * w + p];
                assert!((gv - want).abs() < 1e-6, "class {ni} pixel {p}: {gv} vs {want}");
            }
        }
    }

    proptest! {
        #[test]
        fn the_masked_loss_is_never_negative(seed in 0u64..400) {
            let mut g = Graph::new();
            let logits = rand_leaf(&mut g, &[2, 2, 2], seed, "pl");
            let y_data: Vec<f64> = normal_vec(seed, "py", 8)
                .iter()
                .map(|v| if *v > 0.0 { 1.0 } else { 0.0 })
                .collect();
            let m_data: Vec<f64> = normal_vec(seed, "pm", 4)
                .iter()
                .map(|v| if *v > -0.5 { 1.0 } else { 0.0 })
                .collect();
            let y = Tensor::from_vec(&[2, 2, 2], y_data);
            let m = Tensor::from_vec(&[2, 2], m_data);
            let loss = g.masked_bce(logits, &y, &m);
            prop_assert!(g.value(loss).item() >= 0.0);
        }
    }

    #[test]
    fn every_decoder_input_passes_gradcheck() {
        let (t, h, w, d, c, cs, n) = (2, 2, 2, 3, 2, 2, 2);
        let shapes: Vec<(&str, Vec<usize>)> = vec![
            ("queries", vec![t, d]),
            ("x_fused", vec![h, w, d]),
            ("s1", vec![2 * h, 2 * w, cs]),
            ("s2", vec![4 * h, 4 * w, cs]),
            ("g_region", vec![n, d]),
            ("q_proj", vec![d, c]),
            ("x_proj", vec![d, c]),
            ("up1", vec![c, 2, 2]),
            ("conv1_w", vec![c, c, 3, 3]),
            ("conv1_b", vec![c]),
            ("film1_w", vec![cs, 2 * c]),
            ("film1_b", vec![2 * c]),
            ("up2", vec![c, 2, 2]),
            ("conv2_w", vec![c, c, 3, 3]),
            ("conv2_b", vec![c]),
            ("film2_w", vec![cs, 2 * c]),
            ("film2_b", vec![2 * c]),
            ("out_proj", vec![c, d]),
            ("tau", vec![1]),
        ];
        let inputs: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let numel: usize = shape.iter().product();
                let data: Vec<f64> = if *name == "tau" {
                    vec![8.0]
                } else {
                    normal_vec(211 + i as u64, name, numel).iter().map(|v| 0.4 * v).collect()
                };
                Tensor::from_vec(shape, data)
            })
            .collect();
        let y_data: Vec<f64> = normal_vec(43, "y", n * 4 * h * 4 * w)
            .iter()
            .map(|v| if *v > 0.0 { 1.0 } else { 0.0 })
            .collect();
        let y = Tensor::from_vec(&[n, 4 * h, 4 * w], y_data);
        let m = Tensor::full(&[4 * h, 4 * w], 1.0);
        let report = check_builder(
            &inputs,
            &|g, ids| {
                let p = DecoderParams {
                    q_proj_w: ids[5],
                    x_proj_w: ids[6],
                    stages: [
                        StageParams {
                            up_kern: ids[7],
                            conv_w: ids[8],
                            conv_b: ids[9],
                            film_w: ids[10],
                            film_b: ids[11],
                        },
                        StageParams {
                            up_kern: ids[12],
                            conv_w: ids[13],
                            conv_b: ids[14],
                            film_w: ids[15],
                            film_b: ids[16],
                        },
                    ],
                    out_proj_w: ids[17],
                    tau_out: ids[18],
                };
                let logits = build_decoder(
                    g,
                    ids[0],
                    ids[1],
                    ids[2],
                    ids[3],
                    ids[4],
                    &p,
                    (4 * h, 4 * w),
                    (4 * h, 4 * w),
                )
                .unwrap();
                g.masked_bce(logits, &y, &m)
            },
            &CheckConfig {
                sample: Sample::Fraction { fraction: 0.5, seed: 9 },
                ..CheckConfig::default()
            },
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
