//! Evaluation: sliding-window inference with overlap averaging, mean IoU,
//! distractor false-positive rate, the frozen synthetic benchmark, and
//! heatmap dumps of the alignment and attention matrices.

use std::path::{Path, PathBuf};

use crate::encoder::{stub_encode_image, stub_encode_text, TextBank};
use crate::error::{Error, Result};
use crate::model::{forward, Config, ModelParams};
use crate::scene::{default_vocab, gen_scene, Scene, SceneConfig};
use crate::tensor::{Precision, Tensor};
use crate::{parallel, rng};

pub const BENCH_TRAIN_SCENES: usize = 64;
pub const BENCH_VAL_SCENES: usize = 16;
pub const BENCH_CATEGORIES: usize = 16;

/// Window origins tiling `extent` with `window`-sized tiles at `stride`:
/// `0, stride, 2*stride, ...`, with the final origin clamped flush to the
/// far edge. Requires `window <= extent`; consecutive origins are at most
/// `stride <= window` apart, so every pixel is covered at least once.
pub fn window_positions(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    assert!(window >= 1 && window <= extent, "window {window} must fit in {extent}");
    assert!(stride >= 1 && stride <= window, "stride {stride} must lie in [1, {window}]");
    let mut out = Vec::new();
    let mut y = 0;
    loop {
        if y + window >= extent {
            out.push(extent - window);
            break;
        }
        out.push(y);
        y += stride;
    }
    out
}

/// Copies the `side`-square window of an `[H, W, C]` image at `(y0, x0)`.
pub fn crop_image(image: &Tensor, y0: usize, x0: usize, side: usize) -> Tensor {
    let s = image.shape();
    assert_eq!(s.len(), 3, "crop expects [H, W, C]");
    let (h, w, c) = (s[0], s[1], s[2]);
    assert!(y0 + side <= h && x0 + side <= w, "window leaves the image");
    let src = image.data();
    let mut out = vec![0.0; side * side * c];
    for y in 0..side {
        let src_row = ((y0 + y) * w + x0) * c;
        let dst_row = y * side * c;
        out[dst_row..dst_row + side * c].copy_from_slice(&src[src_row..src_row + side * c]);
    }
    Tensor::from_vec(&[side, side, c], out)
}

/// Full-image logits `[N, H, W]`. Images no larger than the window run as a
/// single full pass (bit-identical to calling the model directly); larger
/// images are tiled by `window_positions`, per-window logits are summed into
/// a canvas, and each pixel is divided by its hit count.
pub fn sliding_window_infer(
    cfg: &Config,
    params: &ModelParams,
    image: &Tensor,
    text: &TextBank,
    precision: Precision,
) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::arg(format!("inference expects an [H, W, 3] image, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    if cfg.stride == 0 || cfg.stride > cfg.window {
        return Err(Error::arg(format!(
            "stride {} must lie in [1, window {}]",
            cfg.stride, cfg.window
        )));
    }
    let enc_cfg = cfg.encoder_config();
    if cfg.window >= h && cfg.window >= w {
        if !h.is_multiple_of(cfg.patch) || !w.is_multiple_of(cfg.patch) {
            return Err(Error::arg(format!(
                "image {h}x{w} is not divisible by patch {}",
                cfg.patch
            )));
        }
        let enc = stub_encode_image(&enc_cfg, cfg.seed, image)?;
        let (g, pass) = forward(cfg, params, &enc, text, precision)?;
        return Ok(g.value(pass.logits).clone());
    }
    if cfg.window > h || cfg.window > w {
        return Err(Error::arg(format!(
            "window {} exceeds one extent of the {h}x{w} image but not the other",
            cfg.window
        )));
    }
    let n = text.names.len();
    let ys = window_positions(h, cfg.window, cfg.stride);
    let xs = window_positions(w, cfg.window, cfg.stride);
    let tiles: Vec<(usize, usize)> =
        ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
    let results: Vec<Result<Tensor>> = parallel::par_map(&tiles, |&(y0, x0)| {
        let crop = crop_image(image, y0, x0, cfg.window);
        let enc = stub_encode_image(&enc_cfg, cfg.seed, &crop)?;
        let (g, pass) = forward(cfg, params, &enc, text, precision)?;
        Ok(g.value(pass.logits).clone())
    });
    let mut sum = vec![0.0; n * h * w];
    let mut hits = vec![0.0f64; h * w];
    for (&(y0, x0), r) in tiles.iter().zip(results) {
        let logits = r?;
        let ld = logits.data();
        for c in 0..n {
            for yy in 0..cfg.window {
                for xx in 0..cfg.window {
                    sum[(c * h + y0 + yy) * w + x0 + xx] +=
                        ld[(c * cfg.window + yy) * cfg.window + xx];
                }
            }
        }
        for yy in 0..cfg.window {
            for xx in 0..cfg.window {
                hits[(y0 + yy) * w + x0 + xx] += 1.0;
            }
        }
    }
    debug_assert!(hits.iter().all(|&c| c >= 1.0), "tiling must cover every pixel");
    for c in 0..n {
        for p in 0..h * w {
            sum[c * h * w + p] /= hits[p];
        }
    }
    Ok(Tensor::from_vec(&[n, h, w], sum))
}

/// Channel argmax of `[N, H, W]` logits; ties resolve to the lowest index.
pub fn argmax_channels(logits: &Tensor) -> Vec<u32> {
    let s = logits.shape();
    assert_eq!(s.len(), 3, "argmax expects [N, H, W]");
    let (n, plane) = (s[0], s[1] * s[2]);
    let d = logits.data();
    (0..plane)
        .map(|p| {
            let mut best = 0usize;
            for c in 1..n {
                if d[c * plane + p] > d[best * plane + p] {
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}

/// Mean intersection-over-union across categories. A category absent from
/// both prediction and ground truth (over the valid pixels) is excluded from
/// the mean; with no observed category at all the score is vacuously 1.
pub fn miou(pred: &[u32], gt: &[u32], categories: usize, valid: Option<&[bool]>) -> f64 {
    assert_eq!(pred.len(), gt.len(), "prediction and ground truth must align");
    if let Some(v) = valid {
        assert_eq!(v.len(), gt.len(), "mask must align with the label maps");
    }
    let mut inter = vec![0u64; categories];
    let mut union = vec![0u64; categories];
    for i in 0..pred.len() {
        if valid.is_some_and(|v| !v[i]) {
            continue;
        }
        let (p, t) = (pred[i] as usize, gt[i] as usize);
        assert!(p < categories && t < categories, "label out of range");
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let mut sum = 0.0;
    let mut observed = 0usize;
    for c in 0..categories {
        if union[c] == 0 {
            continue;
        }
        sum += inter[c] as f64 / union[c] as f64;
        observed += 1;
    }
    if observed == 0 {
        1.0
    } else {
        sum / observed as f64
    }
}

/// Fraction of pixels predicted as a category that is not in the scene's
/// `present` list (sorted category indices).
pub fn distractor_fp_rate(pred: &[u32], present: &[usize]) -> f64 {
    assert!(!pred.is_empty());
    let bad = pred.iter().filter(|&&p| present.binary_search(&(p as usize)).is_err()).count();
    bad as f64 / pred.len() as f64
}

/// Scene distribution of the frozen benchmark: sixteen categories, three to
/// five shapes per scene.
pub fn benchmark_scene_config(image_size: usize) -> SceneConfig {
    SceneConfig {
        image_size,
        shapes_min: 3,
        shapes_max: 5,
        shape_size: 12,
        min_gap: 2,
        vocab: default_vocab(BENCH_CATEGORIES),
    }
}

/// The frozen benchmark: 64 training and 16 validation scenes, deterministic
/// in `(image_size, seed)`.
pub fn benchmark(image_size: usize, seed: u64) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let cfg = benchmark_scene_config(image_size);
    let train = (0..BENCH_TRAIN_SCENES)
        .map(|i| gen_scene(&cfg, seed, &format!("bench-train-{i}")))
        .collect::<Result<Vec<_>>>()?;
    let val = (0..BENCH_VAL_SCENES)
        .map(|i| gen_scene(&cfg, seed, &format!("bench-val-{i}")))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, val))
}

/// Aggregate quality over a scene set.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mean_iou: f64,
    pub per_scene_iou: Vec<f64>,
    /// Mean fraction of pixels assigned to categories absent from the scene.
    pub distractor_fp: f64,
}

/// Runs sliding-window inference over every scene and averages mean IoU and
/// the distractor false-positive rate.
pub fn evaluate(
    cfg: &Config,
    params: &ModelParams,
    scenes: &[Scene],
    precision: Precision,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::arg("evaluation needs at least one scene"));
    }
    let vocab = &scenes[0].vocab;
    for s in scenes {
        if &s.vocab != vocab {
            return Err(Error::arg("all evaluation scenes must share one vocabulary"));
        }
    }
    let text = stub_encode_text(&cfg.encoder_config(), cfg.seed, vocab, &cfg.templates)?;
    let results: Vec<Result<(f64, f64)>> = parallel::par_map(scenes, |s| {
        let logits = sliding_window_infer(cfg, params, &s.image, &text, precision)?;
        let pred = argmax_channels(&logits);
        let iou = miou(&pred, &s.labels, vocab.len(), None);
        let fp = distractor_fp_rate(&pred, &s.present);
        Ok((iou, fp))
    });
    let mut per_scene_iou = Vec::with_capacity(scenes.len());
    let mut fp_sum = 0.0;
    for r in results {
        let (iou, fp) = r?;
        per_scene_iou.push(iou);
        fp_sum += fp;
    }
    let mean_iou = per_scene_iou.iter().sum::<f64>() / per_scene_iou.len() as f64;
    Ok(EvalReport { mean_iou, per_scene_iou, distractor_fp: fp_sum / scenes.len() as f64 })
}

/// Renders `r*r` region values as an ASCII graymap (P2): each region is a
/// `cell`-square block, min-max scaled to 0..255; a constant map renders as
/// uniform mid-gray 128.
pub fn render_region_grid(values: &[f64], r: usize, cell: usize) -> String {
    assert_eq!(values.len(), r * r, "one value per region");
    assert!(cell >= 1);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let level = |v: f64| -> u8 {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            128
        }
    };
    let side = r * cell;
    let mut s = format!("P2\n{side} {side}\n255\n");
    for y in 0..side {
        let mut row = Vec::with_capacity(side);
        for x in 0..side {
            let k = (y / cell) * r + x / cell;
            row.push(level(values[k]).to_string());
        }
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

/// Parses an ASCII graymap back to `(width, height, pixels)`.
pub fn parse_pgm(text: &str) -> Result<(usize, usize, Vec<u8>)> {
    let mut tokens = text.split_whitespace();
    let magic = tokens.next().unwrap_or("");
    if magic != "P2" {
        return Err(Error::Parse {
            what: "pgm",
            detail: format!("expected magic P2, got {magic:?}"),
        });
    }
    let mut next_num = |what: &str| -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| Error::Parse { what: "pgm", detail: format!("missing {what}") })?
            .parse()
            .map_err(|_| Error::Parse { what: "pgm", detail: format!("bad {what}") })
    };
    let w = next_num("width")?;
    let h = next_num("height")?;
    let maxval = next_num("maxval")?;
    if maxval != 255 {
        return Err(Error::Parse {
            what: "pgm",
            detail: format!("expected maxval 255, got {maxval}"),
        });
    }
    let mut pixels = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        let v = next_num("pixel")?;
        if v > 255 {
            return Err(Error::Parse { what: "pgm", detail: format!("pixel {v} above maxval") });
        }
        pixels.push(v as u8);
    }
    if tokens.next().is_some() {
        return Err(Error::Parse { what: "pgm", detail: "trailing data after pixels".into() });
    }
    Ok((w, h, pixels))
}

/// Parses a sidecar of one decimal value per line.
pub fn parse_sidecar(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim().parse().map_err(|_| Error::Parse {
                what: "sidecar",
                detail: format!("bad value {l:?}"),
            })
        })
        .collect()
}

/// Writes, for every category, graymap grids of its alignment and attention
/// columns plus sidecars holding the raw values (shortest round-trip decimal,
/// one region per line). Returns the created paths.
pub fn dump_heatmaps(
    dir: &Path,
    names: &[String],
    alignment: &Tensor,
    attention: &Tensor,
    region_side: usize,
    cell: usize,
) -> Result<Vec<PathBuf>> {
    let k = region_side * region_side;
    let n = names.len();
    for (label, t) in [("alignment", alignment), ("attention", attention)] {
        if t.shape() != [k, n] {
            return Err(Error::arg(format!(
                "{label} matrix is {:?}, expected [{k}, {n}] for region side {region_side}",
                t.shape()
            )));
        }
    }
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(4 * n);
    for (ci, name) in names.iter().enumerate() {
        for (label, t) in [("alignment", alignment), ("attention", attention)] {
            let column: Vec<f64> = (0..k).map(|r| t.data()[r * n + ci]).collect();
            let pgm = dir.join(format!("{label}-{name}.pgm"));
            std::fs::write(&pgm, render_region_grid(&column, region_side, cell))?;
            let sidecar = dir.join(format!("{label}-{name}.txt"));
            let body: String = column.iter().map(|v| format!("{v}\n")).collect();
            std::fs::write(&sidecar, body)?;
            paths.push(pgm);
            paths.push(sidecar);
        }
    }
    Ok(paths)
}

/// Tags a seed stream for held-out evaluation draws (kept distinct from any
/// training stream).
pub fn eval_stream(seed: u64, label: &str) -> rand_chacha::ChaCha8Rng {
    rng::stream(seed, &format!("eval/{label}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use proptest::prelude::*;

    fn infer_config() -> Config {
        Config {
            image_size: 16,
            patch: 2,
            channels: 12,
            shallow_channels: 6,
            region_side: 2,
            guidance_dim: 12,
            fusion_depth: 1,
            heads: 2,
            queries: 2,
            d_state: 2,
            corr_channels: 4,
            window: 8,
            stride: 4,
            ..Config::default()
        }
    }

    fn infer_scene(cfg: &Config) -> Scene {
        let scfg = SceneConfig {
            image_size: cfg.image_size,
            shapes_min: 1,
            shapes_max: 2,
            shape_size: 5,
            min_gap: 1,
            vocab: vec!["background".into(), "alpha".into(), "bravo".into()],
        };
        gen_scene(&scfg, 21, "infer-test").unwrap()
    }

    #[test]
    fn window_positions_match_the_pinned_tilings() {
        assert_eq!(window_positions(64, 64, 64), vec![0]);
        assert_eq!(window_positions(64, 32, 32), vec![0, 32]);
        assert_eq!(window_positions(64, 32, 16), vec![0, 16, 32]);
        assert_eq!(window_positions(64, 48, 32), vec![0, 16]);
        assert_eq!(window_positions(65, 32, 32), vec![0, 32, 33]);
        assert_eq!(window_positions(8, 8, 4), vec![0]);
    }

    proptest! {
        #[test]
        fn window_positions_always_cover_every_pixel(
            extent in 1usize..200,
            window in 1usize..200,
            stride in 1usize..200,
        ) {
            let window = window.min(extent);
            let stride = stride.min(window);
            let ys = window_positions(extent, window, stride);
            prop_assert_eq!(ys[0], 0);
            prop_assert_eq!(*ys.last().unwrap(), extent - window);
            let mut hits = vec![0u32; extent];
            for &y in &ys {
                for h in &mut hits[y..y + window] {
                    *h += 1;
                }
            }
            prop_assert!(hits.iter().all(|&h| h >= 1), "gap in coverage: {:?}", ys);
            for pair in ys.windows(2) {
                prop_assert!(pair[0] < pair[1], "origins must increase");
            }
        }
    }

    #[test]
    fn stride_equal_to_window_hits_every_pixel_exactly_once() {
        let ys = window_positions(64, 16, 16);
        let mut hits = vec![0u32; 64];
        for &y in &ys {
            for h in &mut hits[y..y + 16] {
                *h += 1;
            }
        }
        assert!(hits.iter().all(|&h| h == 1), "{hits:?}");
    }

    #[test]
    fn a_small_image_runs_as_one_full_pass_bit_exactly() {
        let cfg = Config { window: 16, stride: 8, ..infer_config() };
        let scene = infer_scene(&cfg);
        let params = ModelParams::init(&cfg);
        let text = stub_encode_text(
            &cfg.encoder_config(),
            cfg.seed,
            &scene.vocab,
            &cfg.templates,
        )
        .unwrap();
        let tiled = sliding_window_infer(&cfg, &params, &scene.image, &text, Precision::F64)
            .unwrap();
        let enc = stub_encode_image(&cfg.encoder_config(), cfg.seed, &scene.image).unwrap();
        let (g, pass) = forward(&cfg, &params, &enc, &text, Precision::F64).unwrap();
        assert_eq!(tiled.data(), g.value(pass.logits).data(), "single pass must be verbatim");
        let oversized = Config { window: 64, stride: 32, ..infer_config() };
        let wide = sliding_window_infer(&oversized, &params, &scene.image, &text, Precision::F64)
            .unwrap();
        assert_eq!(wide.data(), g.value(pass.logits).data());
    }

    #[test]
    fn tiled_inference_matches_a_hand_accumulated_canvas() {
        let cfg = infer_config();
        let scene = infer_scene(&cfg);
        let params = ModelParams::init(&cfg);
        let text = stub_encode_text(
            &cfg.encoder_config(),
            cfg.seed,
            &scene.vocab,
            &cfg.templates,
        )
        .unwrap();
        let got = sliding_window_infer(&cfg, &params, &scene.image, &text, Precision::F64)
            .unwrap();
        assert_eq!(got.shape(), [3, 16, 16]);

        let n = 3;
        let (h, w) = (16, 16);
        let mut sum = vec![0.0; n * h * w];
        let mut hits = vec![0.0; h * w];
        for &y0 in &window_positions(h, cfg.window, cfg.stride) {
            for &x0 in &window_positions(w, cfg.window, cfg.stride) {
                let crop = crop_image(&scene.image, y0, x0, cfg.window);
                let enc = stub_encode_image(&cfg.encoder_config(), cfg.seed, &crop).unwrap();
                let (g, pass) = forward(&cfg, &params, &enc, &text, Precision::F64).unwrap();
                let ld = g.value(pass.logits).data().to_vec();
                for c in 0..n {
                    for yy in 0..cfg.window {
                        for xx in 0..cfg.window {
                            sum[(c * h + y0 + yy) * w + x0 + xx] +=
                                ld[(c * cfg.window + yy) * cfg.window + xx];
                        }
                    }
                }
                for yy in 0..cfg.window {
                    for xx in 0..cfg.window {
                        hits[(y0 + yy) * w + x0 + xx] += 1.0;
                    }
                }
            }
        }
        assert!(hits.iter().any(|&c| c > 1.0), "this tiling must overlap somewhere");
        for c in 0..n {
            for p in 0..h * w {
                sum[c * h * w + p] /= hits[p];
            }
        }
        assert_eq!(got.data(), &sum[..], "accumulation must match the reference canvas");
    }

    #[test]
    fn cropping_extracts_the_exact_window() {
        let data: Vec<f64> = (0..4 * 4 * 3).map(|v| v as f64).collect();
        let image = Tensor::from_vec(&[4, 4, 3], data);
        let crop = crop_image(&image, 1, 2, 2);
        assert_eq!(crop.shape(), [2, 2, 3]);
        let px = |y: usize, x: usize, c: usize| ((y * 4 + x) * 3 + c) as f64;
        assert_eq!(
            crop.data(),
            &[
                px(1, 2, 0), px(1, 2, 1), px(1, 2, 2),
                px(1, 3, 0), px(1, 3, 1), px(1, 3, 2),
                px(2, 2, 0), px(2, 2, 1), px(2, 2, 2),
                px(2, 3, 0), px(2, 3, 1), px(2, 3, 2),
            ]
        );
    }

    #[test]
    fn mean_iou_matches_the_pinned_two_by_two_case() {
        let pred = [0u32, 0, 1, 1];
        let gt = [0u32, 1, 1, 1];
        let got = miou(&pred, &gt, 2, None);
        assert!((got - 7.0 / 12.0).abs() < 1e-15, "IoUs 1/2 and 2/3 average to 7/12, got {got}");
    }

    #[test]
    fn mean_iou_boundary_cases_behave() {
        let gt = [2u32, 2, 0, 1];
        assert_eq!(miou(&gt, &gt, 3, None), 1.0);
        let pred = [0u32, 0, 0, 0];
        let other = [1u32, 1, 1, 1];
        assert_eq!(miou(&pred, &other, 2, None), 0.0);
        // Categories 2..4 appear nowhere, so the mean runs over two entries.
        let p = [0u32, 0, 1, 1];
        let t = [0u32, 1, 1, 1];
        assert_eq!(miou(&p, &t, 5, None), miou(&p, &t, 2, None));
        // Masking out the single disagreeing pixel leaves a perfect score.
        let valid = [true, false, true, true];
        assert_eq!(miou(&p, &t, 2, Some(&valid)), 1.0);
        assert_eq!(miou(&p, &t, 2, Some(&[false; 4])), 1.0);
    }

    #[test]
    fn mean_iou_is_permutation_equivariant() {
        let pred = [0u32, 1, 2, 3, 0, 2, 1, 1, 3, 0];
        let gt = [0u32, 1, 1, 3, 2, 2, 1, 0, 3, 0];
        let base = miou(&pred, &gt, 4, None);
        let relabel = [2u32, 3, 0, 1];
        let pred_p: Vec<u32> = pred.iter().map(|&c| relabel[c as usize]).collect();
        let gt_p: Vec<u32> = gt.iter().map(|&c| relabel[c as usize]).collect();
        let permuted = miou(&pred_p, &gt_p, 4, None);
        assert!((base - permuted).abs() < 1e-12, "{base} vs {permuted}");
    }

    #[test]
    fn distractor_rate_counts_only_absent_categories() {
        let pred = [0u32, 1, 2, 2];
        assert_eq!(distractor_fp_rate(&pred, &[0, 1]), 0.5);
        assert_eq!(distractor_fp_rate(&pred, &[0, 1, 2]), 0.0);
        assert_eq!(distractor_fp_rate(&pred, &[3]), 1.0);
    }

    #[test]
    fn the_benchmark_is_frozen_and_shape_rich() {
        let (train, val) = benchmark(64, 0).unwrap();
        assert_eq!(train.len(), BENCH_TRAIN_SCENES);
        assert_eq!(val.len(), BENCH_VAL_SCENES);
        let (train2, _) = benchmark(64, 0).unwrap();
        for (a, b) in train.iter().zip(&train2) {
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.image.data(), b.image.data());
        }
        for s in train.iter().chain(&val) {
            assert_eq!(s.vocab.len(), BENCH_CATEGORIES);
            let foreground = s.present.iter().filter(|&&c| c != 0).count();
            assert!((3..=5).contains(&foreground), "scene places 3-5 shapes, saw {foreground}");
        }
        let first_val = &val[0];
        assert_ne!(first_val.labels, train[0].labels, "train and val streams differ");
    }

    #[test]
    fn evaluation_reports_bounded_scores_per_scene() {
        let cfg = Config { window: 16, ..infer_config() };
        let scenes = vec![infer_scene(&cfg), {
            let scfg = SceneConfig {
                image_size: cfg.image_size,
                shapes_min: 1,
                shapes_max: 2,
                shape_size: 5,
                min_gap: 1,
                vocab: vec!["background".into(), "alpha".into(), "bravo".into()],
            };
            gen_scene(&scfg, 22, "infer-test-2").unwrap()
        }];
        let params = ModelParams::init(&cfg);
        let report = evaluate(&cfg, &params, &scenes, Precision::F64).unwrap();
        assert_eq!(report.per_scene_iou.len(), 2);
        assert!((0.0..=1.0).contains(&report.mean_iou));
        assert!((0.0..=1.0).contains(&report.distractor_fp));
        let mean = report.per_scene_iou.iter().sum::<f64>() / 2.0;
        assert!((report.mean_iou - mean).abs() < 1e-15);
    }

    #[test]
    fn heatmap_grids_scale_blocks_and_round_trip() {
        let values = [0.0, 0.5, 1.0, 0.25];
        let text = render_region_grid(&values, 2, 2);
        let (w, h, px) = parse_pgm(&text).unwrap();
        assert_eq!((w, h), (4, 4));
        let expect = [0u8, 128, 255, 64];
        for y in 0..4 {
            for x in 0..4 {
                let k = (y / 2) * 2 + x / 2;
                assert_eq!(px[y * 4 + x], expect[k], "block ({y},{x})");
            }
        }
        let flat = render_region_grid(&[3.25; 9], 3, 1);
        let (_, _, px) = parse_pgm(&flat).unwrap();
        assert!(px.iter().all(|&v| v == 128), "constant maps render uniform gray");
        assert!(parse_pgm("P5 2 2 255 0 0 0 0").is_err(), "binary graymaps are rejected");
        assert!(parse_pgm("P2 2 2 255 0 0 0").is_err(), "missing pixels are rejected");
    }

    #[test]
    fn heatmap_dump_writes_grids_and_exact_sidecars() {
        let dir = tempfile::tempdir().unwrap();
        let names = vec!["background".to_string(), "alpha".to_string()];
        let alignment = Tensor::from_vec(
            &[4, 2],
            vec![-0.125, 0.1, 0.5, 0.2, 0.75, 0.3, -0.25, 0.4],
        );
        let attention = Tensor::from_vec(
            &[4, 2],
            vec![0.1, 0.4, 0.2, 0.3, 0.3, 0.2, 0.4, 0.1],
        );
        let paths = dump_heatmaps(dir.path(), &names, &alignment, &attention, 2, 3).unwrap();
        assert_eq!(paths.len(), 8);
        for name in &names {
            for label in ["alignment", "attention"] {
                let pgm_text =
                    std::fs::read_to_string(dir.path().join(format!("{label}-{name}.pgm")))
                        .unwrap();
                let (w, h, _) = parse_pgm(&pgm_text).unwrap();
                assert_eq!((w, h), (6, 6));
            }
        }
        let side = std::fs::read_to_string(dir.path().join("alignment-background.txt")).unwrap();
        let parsed = parse_sidecar(&side).unwrap();
        assert_eq!(parsed, vec![-0.125, 0.5, 0.75, -0.25], "sidecars round-trip exactly");
        for (ci, _) in names.iter().enumerate() {
            let txt =
                std::fs::read_to_string(dir.path().join(format!("attention-{}.txt", names[ci])))
                    .unwrap();
            let col = parse_sidecar(&txt).unwrap();
            let total: f64 = col.iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "attention column sums to one: {total}");
        }
        let bad = dump_heatmaps(dir.path(), &names, &attention, &alignment, 3, 2);
        assert!(bad.is_err(), "region side must match the matrix height");
    }
}
