//! Gradient diagnostics for the command line: every pipeline stage is
//! checked against central finite differences on a small deterministic
//! instance, and the worst relative error per stage is reported.

use std::collections::HashMap;
use std::rc::Rc;

use crate::align::{build_alignment, AlignConfig, AlignParams, LambdaMode};
use crate::decoder::{build_decoder, DecoderParams, StageParams};
use crate::encoder::{stub_encode_image, stub_encode_text};
use crate::fusion::{
    fusion_block, AdaptParams, BlockParams, DirectionalParams, QueryAttnParams, Ss2dDirection,
    Ss2dParams,
};
use crate::gradcheck::{check_builder, CheckConfig, Sample};
use crate::model::{build_forward, Bound, Config, ModelParams};
use crate::scene::{gen_scene, SceneConfig};
use crate::tensor::{region_grid, Tensor};
use crate::{rng, Result};

/// Outcome of one stage's finite-difference comparison.
#[derive(Debug, Clone)]
pub struct ModuleCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub coords: usize,
    pub passed: bool,
}

fn randn(seed: u64, label: &str, shape: &[usize]) -> Tensor {
    Tensor::from_vec(shape, rng::normal_vec(seed, label, shape.iter().product()))
}

/// Name-indexed tensors of one parameter subset, in definition order.
fn subset(params: &ModelParams, prefix: &str) -> (Vec<String>, Vec<Tensor>) {
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for def in params.defs() {
        if def.name.starts_with(prefix) {
            names.push(def.name.clone());
            tensors.push(def.tensor.clone());
        }
    }
    (names, tensors)
}

fn check_alignment(seed: u64) -> Result<ModuleCheck> {
    let (h, w, c, n, d, r) = (4, 4, 3, 2, 3, 2);
    let grid = Rc::new(region_grid(h, w, r)?);
    let inputs = vec![
        randn(seed, "diag/v", &[h * w, c]),
        randn(seed, "diag/t", &[n, c]),
        Tensor::scalar(0.3),
        randn(seed, "diag/wt", &[2 * c, d]),
        randn(seed, "diag/bt", &[d]),
        randn(seed, "diag/w1", &[c, c]),
        randn(seed, "diag/b1", &[c]),
        randn(seed, "diag/w2", &[c, 1]),
        randn(seed, "diag/b2", &[1]),
        randn(seed, "diag/wv", &[c, d]),
        randn(seed, "diag/bv", &[d]),
        randn(seed, "diag/wg", &[d, d]),
    ];
    let readout = randn(seed, "diag/readout", &[h, w, d]);
    let cfg = AlignConfig {
        tau: 5.0,
        beta: 5.0,
        region_side: r,
        guidance_dim: d,
        lambda: LambdaMode::Adaptive,
    };
    let check_cfg = CheckConfig::default();
    let report = check_builder(
        &inputs,
        &|g, ids| {
            let lambda = g.sigmoid(ids[2]);
            let params = AlignParams {
                lambda,
                text_proj_w: ids[3],
                text_proj_b: ids[4],
                score_w1: ids[5],
                score_b1: ids[6],
                score_w2: ids[7],
                score_b2: ids[8],
                image_proj_w: ids[9],
                image_proj_b: ids[10],
                text_gate_w: ids[11],
            };
            let out = build_alignment(g, &cfg, ids[0], ids[1], &params, &grid);
            g.dot_const(out.guidance, &readout)
        },
        &check_cfg,
    )?;
    Ok(ModuleCheck {
        name: "alignment",
        max_rel_err: report.max_rel_err,
        coords: report.coords_checked,
        passed: report.passed(&check_cfg),
    })
}

fn check_fusion(seed: u64) -> Result<ModuleCheck> {
    let cfg = Config::small();
    let (hf, wf) = (cfg.image_size / cfg.patch, cfg.image_size / cfg.patch);
    let (c, d, n) = (cfg.channels, cfg.guidance_dim, 3);
    let (names, inputs) = subset(&ModelParams::init(&cfg), "fusion.");
    let f_in = randn(seed, "diag/f_in", &[hf, wf, c]);
    let gd = randn(seed, "diag/gd", &[hf, wf, d]);
    let e_text = randn(seed, "diag/e_text", &[n, d]);
    let probe_x = randn(seed, "diag/probe_x", &[hf, wf, d]);
    let probe_q = randn(seed, "diag/probe_q", &[cfg.queries, d]);
    let heads = cfg.heads;
    let check_cfg = CheckConfig {
        sample: Sample::Fraction { fraction: 0.1, seed: seed ^ 0xf1 },
        ..CheckConfig::default()
    };
    let report = check_builder(
        &inputs,
        &|g, ids| {
            let pos: HashMap<&str, usize> =
                names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            let at = |s: &str| ids[pos[s]];
            let b = |s: &str| at(&format!("fusion.0.{s}"));
            let block = BlockParams {
                reentry: None,
                attn: DirectionalParams {
                    wq: b("wq"),
                    wk: b("wk"),
                    wv: b("wv"),
                    wo_h: b("wo_h"),
                    bo_h: b("bo_h"),
                    wo_v: b("wo_v"),
                    bo_v: b("bo_v"),
                },
                fuse_w: b("fuse_w"),
                fuse_b: b("fuse_b"),
                ss2d: Ss2dParams {
                    dirs: [0, 1, 2, 3].map(|j| Ss2dDirection {
                        a_raw: b(&format!("ss2d{j}.a_raw")),
                        b: b(&format!("ss2d{j}.b")),
                        c: b(&format!("ss2d{j}.c")),
                    }),
                },
                adapt: AdaptParams {
                    pw1_w: b("pw1_w"),
                    pw1_b: b("pw1_b"),
                    dw_w: b("dw_w"),
                    dw_b: b("dw_b"),
                    glu_w: b("glu_w"),
                    glu_b: b("glu_b"),
                    pw2_w: b("pw2_w"),
                    pw2_b: b("pw2_b"),
                    ln: [0, 1, 2, 3]
                        .map(|k| (b(&format!("ln{k}_gain")), b(&format!("ln{k}_bias")))),
                },
                query: QueryAttnParams {
                    gate_w: b("gate_w"),
                    gate_b: b("gate_b"),
                    mlp_w1: b("mlp_w1"),
                    mlp_b1: b("mlp_b1"),
                    mlp_w2: b("mlp_w2"),
                    mlp_b2: b("mlp_b2"),
                },
            };
            let fi = g.constant(f_in.clone());
            let gdn = g.constant(gd.clone());
            let et = g.constant(e_text.clone());
            let trace = fusion_block(g, fi, gdn, et, at("fusion.q_lrn"), &block, heads);
            let px = g.dot_const(trace.x_adapted, &probe_x);
            let pq = g.dot_const(trace.queries, &probe_q);
            g.add(px, pq)
        },
        &check_cfg,
    )?;
    Ok(ModuleCheck {
        name: "fusion block",
        max_rel_err: report.max_rel_err,
        coords: report.coords_checked,
        passed: report.passed(&check_cfg),
    })
}

fn check_decoder(seed: u64) -> Result<ModuleCheck> {
    let cfg = Config::small();
    let (hf, wf) = (cfg.image_size / cfg.patch, cfg.image_size / cfg.patch);
    let (d, cs, n) = (cfg.guidance_dim, cfg.shallow_channels, 3);
    let (names, inputs) = subset(&ModelParams::init(&cfg), "dec.");
    let queries = randn(seed, "diag/queries", &[cfg.queries, d]);
    let x_fused = randn(seed, "diag/x_fused", &[hf, wf, d]);
    let s1 = randn(seed, "diag/s1", &[2 * hf, 2 * wf, cs]);
    let s2 = randn(seed, "diag/s2", &[4 * hf, 4 * wf, cs]);
    let g_region = randn(seed, "diag/g_region", &[n, d]);
    let probe = randn(seed, "diag/probe_logits", &[n, cfg.image_size, cfg.image_size]);
    let check_cfg = CheckConfig {
        sample: Sample::Fraction { fraction: 0.5, seed: seed ^ 0xd3 },
        ..CheckConfig::default()
    };
    let report = check_builder(
        &inputs,
        &|g, ids| {
            let pos: HashMap<&str, usize> =
                names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
            let at = |s: &str| ids[pos[s]];
            let stage = |i: usize| StageParams {
                up_kern: at(&format!("dec.{i}.up_kern")),
                conv_w: at(&format!("dec.{i}.conv_w")),
                conv_b: at(&format!("dec.{i}.conv_b")),
                film_w: at(&format!("dec.{i}.film_w")),
                film_b: at(&format!("dec.{i}.film_b")),
            };
            let params = DecoderParams {
                q_proj_w: at("dec.q_proj_w"),
                x_proj_w: at("dec.x_proj_w"),
                stages: [stage(0), stage(1)],
                out_proj_w: at("dec.out_proj_w"),
                tau_out: at("dec.tau_out"),
            };
            let q = g.constant(queries.clone());
            let x = g.constant(x_fused.clone());
            let s1n = g.constant(s1.clone());
            let s2n = g.constant(s2.clone());
            let gr = g.constant(g_region.clone());
            let logits = build_decoder(
                g,
                q,
                x,
                s1n,
                s2n,
                gr,
                &params,
                (4 * hf, 4 * wf),
                (cfg.image_size, cfg.image_size),
            )
            .expect("consistent decoder geometry");
            g.dot_const(logits, &probe)
        },
        &check_cfg,
    )?;
    Ok(ModuleCheck {
        name: "decoder",
        max_rel_err: report.max_rel_err,
        coords: report.coords_checked,
        passed: report.passed(&check_cfg),
    })
}

fn check_model(seed: u64) -> Result<ModuleCheck> {
    let cfg = Config { seed, ..Config::small() };
    let vocab: Vec<String> = vec!["background".into(), "alpha".into(), "bravo".into()];
    let scene = gen_scene(
        &SceneConfig {
            image_size: cfg.image_size,
            shapes_min: 1,
            shapes_max: 2,
            shape_size: 6,
            min_gap: 1,
            vocab: vocab.clone(),
        },
        seed,
        "diagnostics",
    )?;
    let enc = stub_encode_image(&cfg.encoder_config(), cfg.seed, &scene.image)?;
    let text = stub_encode_text(&cfg.encoder_config(), cfg.seed, &vocab, &cfg.templates)?;
    let params = ModelParams::init(&cfg);
    let inputs: Vec<Tensor> = params.defs().iter().map(|p| p.tensor.clone()).collect();
    let y = scene.one_hot();
    let m = scene.full_mask();
    let check_cfg = CheckConfig {
        sample: Sample::Fraction { fraction: 0.03, seed: seed ^ 0xa7 },
        ..CheckConfig::default()
    };
    let target = (cfg.image_size, cfg.image_size);
    let report = check_builder(
        &inputs,
        &|g, ids| {
            let bound = Bound::from_ids(&params, ids);
            let pass =
                build_forward(g, &cfg, &enc, &text, &bound, target).expect("consistent geometry");
            g.masked_bce(pass.logits, &y, &m)
        },
        &check_cfg,
    )?;
    Ok(ModuleCheck {
        name: "full model",
        max_rel_err: report.max_rel_err,
        coords: report.coords_checked,
        passed: report.passed(&check_cfg),
    })
}

/// Runs every stage's finite-difference check. Deterministic in the seed.
pub fn module_gradchecks(seed: u64) -> Result<Vec<ModuleCheck>> {
    Ok(vec![check_alignment(seed)?, check_fusion(seed)?, check_decoder(seed)?, check_model(seed)?])
}
