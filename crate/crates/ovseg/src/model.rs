//! Model assembly: the configuration schema, parameter initialization, and
//! the full forward pass wiring the stub encoders, regional alignment, the
//! fusion tower, and the decoder into one graph.
//!
//! Ablation switches isolate the three contributions: with the object prior
//! off, prompts pass through unmodulated; with fusion off, a single pointwise
//! projection of the concatenated mid-level and guidance maps replaces the
//! tower; with regional alignment off, guidance comes from one global pool
//! broadcast uniformly, and no region operation executes (instrumentation
//! counters stay at zero).
//!
//! Category order is canonicalized internally — prompts are sorted by name,
//! the graph runs in sorted order, and logit channels gather back to the
//! caller's order at the end — so permuting the vocabulary permutes the
//! output channels bit-exactly.

use std::collections::HashMap;
use std::rc::Rc;

use crate::align::{
    image_guidance, mix_guidance, modulate_prompts, object_prior, region_prototypes,
    regional_alignment, text_guidance, text_to_region_attention, AlignParams, LambdaMode,
};
use crate::decoder::{build_decoder, DecoderParams, StageParams};
use crate::encoder::{EncodedImage, TextBank, DEFAULT_TEMPLATE};
use crate::error::{Error, Result};
use crate::fusion::{
    build_fusion, AdaptParams, BlockParams, DirectionalParams, QueryAttnParams, Ss2dDirection,
    Ss2dParams,
};
use crate::graph::{Graph, NodeId};
use crate::rng;
use crate::tensor::{region_grid, Precision, Tensor};
use crate::{align, encoder};

/// Switches that bypass individual stages for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    pub use_object_prior: bool,
    pub use_ccf: bool,
    pub use_region_alignment: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags { use_object_prior: true, use_ccf: true, use_region_alignment: true }
    }
}

/// Complete run configuration: model widths, inference geometry, prompt
/// templates, ablation flags, and training hyperparameters. One flat
/// key-value document serializes all of it.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    /// Square scene side in pixels.
    pub image_size: usize,
    /// Patch side of the visual tokenizer; window extents must divide by it.
    pub patch: usize,
    /// Shared width of visual tokens and text embeddings.
    pub channels: usize,
    /// Width of the shallow maps feeding the decoder stages.
    pub shallow_channels: usize,
    /// Amplitude of the encoder's sinusoidal position codes.
    pub pos_amplitude: f64,
    /// Amplitude of the encoder's bounded mixing residuals.
    pub mix_amplitude: f64,
    /// Sharpness of the text-to-region attention softmax.
    pub tau: f64,
    /// Sharpness of the per-region category softmax in guidance mixing.
    pub beta: f64,
    /// Region grid side; the token map tiles into `region_side^2` regions.
    pub region_side: usize,
    /// Guidance width D.
    pub guidance_dim: usize,
    /// Prior strength: a fixed value or a learnable sigmoid.
    pub lambda: LambdaMode,
    /// Stacked fusion blocks.
    pub fusion_depth: usize,
    /// Attention heads in the axial stage.
    pub heads: usize,
    /// Learnable language queries.
    pub queries: usize,
    /// State width of the four-direction scan.
    pub d_state: usize,
    /// Channels of the decoder correlation space.
    pub corr_channels: usize,
    /// Initial output temperature.
    pub tau_out_init: f64,
    /// Sliding-window side in pixels.
    pub window: usize,
    /// Sliding-window stride in pixels.
    pub stride: usize,
    /// Prompt templates; each must contain the category placeholder once.
    pub templates: Vec<String>,
    pub flags: AblationFlags,
    /// Scenes per optimizer step.
    pub batch: usize,
    /// Total optimizer steps.
    pub iters: usize,
    /// Peak learning rate.
    pub lr: f64,
    /// Floor of the cosine phase.
    pub min_lr: f64,
    /// Linear warm-up steps.
    pub warmup: usize,
    /// Decoupled weight-decay coefficient.
    pub weight_decay: f64,
    /// Learning-rate multiplier for encoder-group parameters.
    pub encoder_lr_scale: f64,
    /// Checkpoint interval in steps (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
    /// Master seed for initialization, shuffling, and augmentation.
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            image_size: 64,
            patch: 4,
            channels: 64,
            shallow_channels: 32,
            pos_amplitude: 0.02,
            mix_amplitude: 0.05,
            tau: 5.0,
            beta: 5.0,
            region_side: 6,
            guidance_dim: 64,
            lambda: LambdaMode::Adaptive,
            fusion_depth: 2,
            heads: 4,
            queries: 4,
            d_state: 8,
            corr_channels: 8,
            tau_out_init: 10.0,
            window: 64,
            stride: 32,
            templates: vec![DEFAULT_TEMPLATE.to_string()],
            flags: AblationFlags::default(),
            batch: 4,
            iters: 2000,
            lr: 2e-4,
            min_lr: 0.0,
            warmup: 100,
            weight_decay: 1e-4,
            encoder_lr_scale: 0.01,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

impl Config {
    /// A small but structurally complete configuration (16px scenes, narrow
    /// widths, one fusion block) for demos, diagnostics, and benchmarks.
    pub fn small() -> Config {
        Config {
            image_size: 16,
            patch: 2,
            channels: 16,
            shallow_channels: 8,
            region_side: 2,
            guidance_dim: 16,
            fusion_depth: 1,
            heads: 2,
            queries: 2,
            d_state: 2,
            corr_channels: 4,
            window: 16,
            stride: 8,
            batch: 2,
            iters: 40,
            warmup: 5,
            ..Config::default()
        }
    }

    /// Token-map side of a full window.
    pub fn window_extent(&self) -> usize {
        self.window / self.patch
    }

    pub fn encoder_config(&self) -> encoder::EncoderConfig {
        encoder::EncoderConfig {
            patch: self.patch,
            channels: self.channels,
            shallow_channels: self.shallow_channels,
            pos_amplitude: self.pos_amplitude,
            mix_amplitude: self.mix_amplitude,
        }
    }

    pub fn align_config(&self) -> align::AlignConfig {
        align::AlignConfig {
            tau: self.tau,
            beta: self.beta,
            region_side: self.region_side,
            guidance_dim: self.guidance_dim,
            lambda: self.lambda,
        }
    }

    /// Serializes to the flat key-value document `parse_config` reads back.
    pub fn print(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("image_size", self.image_size.to_string());
        kv("patch", self.patch.to_string());
        kv("channels", self.channels.to_string());
        kv("shallow_channels", self.shallow_channels.to_string());
        kv("pos_amplitude", self.pos_amplitude.to_string());
        kv("mix_amplitude", self.mix_amplitude.to_string());
        kv("tau", self.tau.to_string());
        kv("beta", self.beta.to_string());
        kv("region_side", self.region_side.to_string());
        kv("guidance_dim", self.guidance_dim.to_string());
        let lambda = match self.lambda {
            LambdaMode::Adaptive => "adaptive".to_string(),
            LambdaMode::Fixed(x) => x.to_string(),
        };
        kv("lambda", lambda);
        kv("fusion_depth", self.fusion_depth.to_string());
        kv("heads", self.heads.to_string());
        kv("queries", self.queries.to_string());
        kv("d_state", self.d_state.to_string());
        kv("corr_channels", self.corr_channels.to_string());
        kv("tau_out_init", self.tau_out_init.to_string());
        kv("window", self.window.to_string());
        kv("stride", self.stride.to_string());
        for t in &self.templates {
            kv("template", t.clone());
        }
        kv("use_object_prior", self.flags.use_object_prior.to_string());
        kv("use_ccf", self.flags.use_ccf.to_string());
        kv("use_region_alignment", self.flags.use_region_alignment.to_string());
        kv("batch", self.batch.to_string());
        kv("iters", self.iters.to_string());
        kv("lr", self.lr.to_string());
        kv("min_lr", self.min_lr.to_string());
        kv("warmup", self.warmup.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("encoder_lr_scale", self.encoder_lr_scale.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("seed", self.seed.to_string());
        s
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Parse {
        what: "config",
        detail: format!("key {key}: cannot parse {value:?}"),
    })
}

/// Parses the flat `key = value` document produced by [`Config::print`].
/// Unknown keys are rejected; a repeated `template` key extends the ensemble.
pub fn parse_config(text: &str) -> Result<Config> {
    let mut cfg = Config::default();
    let mut saw_template = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            what: "config",
            detail: format!("line {}: expected key = value, got {line:?}", lineno + 1),
        })?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "image_size" => cfg.image_size = parse_value(key, value)?,
            "patch" => cfg.patch = parse_value(key, value)?,
            "channels" => cfg.channels = parse_value(key, value)?,
            "shallow_channels" => cfg.shallow_channels = parse_value(key, value)?,
            "pos_amplitude" => cfg.pos_amplitude = parse_value(key, value)?,
            "mix_amplitude" => cfg.mix_amplitude = parse_value(key, value)?,
            "tau" => cfg.tau = parse_value(key, value)?,
            "beta" => cfg.beta = parse_value(key, value)?,
            "region_side" => cfg.region_side = parse_value(key, value)?,
            "guidance_dim" => cfg.guidance_dim = parse_value(key, value)?,
            "lambda" => {
                cfg.lambda = if value == "adaptive" {
                    LambdaMode::Adaptive
                } else {
                    LambdaMode::Fixed(parse_value(key, value)?)
                }
            }
            "fusion_depth" => cfg.fusion_depth = parse_value(key, value)?,
            "heads" => cfg.heads = parse_value(key, value)?,
            "queries" => cfg.queries = parse_value(key, value)?,
            "d_state" => cfg.d_state = parse_value(key, value)?,
            "corr_channels" => cfg.corr_channels = parse_value(key, value)?,
            "tau_out_init" => cfg.tau_out_init = parse_value(key, value)?,
            "window" => cfg.window = parse_value(key, value)?,
            "stride" => cfg.stride = parse_value(key, value)?,
            "template" => {
                if !saw_template {
                    cfg.templates.clear();
                    saw_template = true;
                }
                cfg.templates.push(value.to_string());
            }
            "use_object_prior" => cfg.flags.use_object_prior = parse_value(key, value)?,
            "use_ccf" => cfg.flags.use_ccf = parse_value(key, value)?,
            "use_region_alignment" => cfg.flags.use_region_alignment = parse_value(key, value)?,
            "batch" => cfg.batch = parse_value(key, value)?,
            "iters" => cfg.iters = parse_value(key, value)?,
            "lr" => cfg.lr = parse_value(key, value)?,
            "min_lr" => cfg.min_lr = parse_value(key, value)?,
            "warmup" => cfg.warmup = parse_value(key, value)?,
            "weight_decay" => cfg.weight_decay = parse_value(key, value)?,
            "encoder_lr_scale" => cfg.encoder_lr_scale = parse_value(key, value)?,
            "checkpoint_every" => cfg.checkpoint_every = parse_value(key, value)?,
            "seed" => cfg.seed = parse_value(key, value)?,
            other => {
                return Err(Error::Parse {
                    what: "config",
                    detail: format!("line {}: unknown key {other:?}", lineno + 1),
                })
            }
        }
    }
    Ok(cfg)
}

/// Checks every cross-field constraint, returning all violations at once;
/// each message names the fields in conflict.
pub fn validate_config(cfg: &Config) -> Result<()> {
    let mut errs = Vec::new();
    let mut require = |ok: bool, msg: String| {
        if !ok {
            errs.push(msg);
        }
    };
    require(cfg.patch >= 1, "patch must be at least 1 (fields: patch)".into());
    require(cfg.heads >= 1, "heads must be at least 1 (fields: heads)".into());
    require(cfg.batch >= 1, "batch must be at least 1 (fields: batch)".into());
    require(cfg.queries >= 1, "queries must be at least 1 (fields: queries)".into());
    require(cfg.d_state >= 1, "d_state must be at least 1 (fields: d_state)".into());
    require(
        cfg.corr_channels >= 1,
        "corr_channels must be at least 1 (fields: corr_channels)".into(),
    );
    require(
        cfg.fusion_depth >= 1,
        "fusion_depth must be at least 1 (fields: fusion_depth)".into(),
    );
    require(
        cfg.region_side >= 1,
        "region_side must be at least 1 (fields: region_side)".into(),
    );
    if cfg.patch >= 1 {
        require(
            cfg.image_size >= cfg.patch && cfg.image_size.is_multiple_of(cfg.patch),
            format!(
                "image_size {} is not divisible by patch {} (fields: image_size, patch)",
                cfg.image_size, cfg.patch
            ),
        );
        require(
            cfg.window >= cfg.patch && cfg.window.is_multiple_of(cfg.patch),
            format!(
                "window {} is not divisible by patch {} (fields: window, patch)",
                cfg.window, cfg.patch
            ),
        );
        let extent = cfg.window / cfg.patch;
        require(
            cfg.region_side <= extent.max(1),
            format!(
                "region_side {} exceeds the window token extent {} = window / patch \
                 (fields: region_side, window)",
                cfg.region_side, extent
            ),
        );
        let image_extent = cfg.image_size / cfg.patch;
        require(
            cfg.region_side <= image_extent.max(1),
            format!(
                "region_side {} exceeds the image token extent {} = image_size / patch \
                 (fields: region_side, image_size)",
                cfg.region_side, image_extent
            ),
        );
    }
    require(
        cfg.stride >= 1 && cfg.stride <= cfg.window,
        format!(
            "stride {} must lie in [1, window {}] (fields: stride, window)",
            cfg.stride, cfg.window
        ),
    );
    require(
        cfg.channels.is_multiple_of(2),
        format!(
            "channels {} must be even for the directional split (fields: channels, heads)",
            cfg.channels
        ),
    );
    require(
        cfg.guidance_dim.is_multiple_of(2),
        format!(
            "guidance_dim {} must be even for the directional split (fields: guidance_dim, heads)",
            cfg.guidance_dim
        ),
    );
    if cfg.channels.is_multiple_of(2) && cfg.guidance_dim.is_multiple_of(2) && cfg.heads >= 1 {
        let e = cfg.channels / 2 + cfg.guidance_dim / 2;
        require(
            e.is_multiple_of(cfg.heads),
            format!(
                "axial token width (channels + guidance_dim) / 2 = {e} is not divisible by \
                 heads {} (fields: channels, guidance_dim, heads)",
                cfg.heads
            ),
        );
    }
    require(
        cfg.min_lr <= cfg.lr,
        format!("min_lr {} exceeds lr {} (fields: min_lr, lr)", cfg.min_lr, cfg.lr),
    );
    if cfg.iters > 0 {
        require(
            cfg.warmup < cfg.iters,
            format!(
                "warmup {} must be below iters {} (fields: warmup, iters)",
                cfg.warmup, cfg.iters
            ),
        );
    }
    for amp in [("pos_amplitude", cfg.pos_amplitude), ("mix_amplitude", cfg.mix_amplitude)] {
        require(
            amp.1.is_finite() && amp.1 >= 0.0,
            format!("{} must be finite and non-negative (fields: {})", amp.0, amp.0),
        );
    }
    if let Err(e) = encoder::validate_templates(&cfg.templates) {
        require(false, format!("{e} (fields: template)"));
    }
    if let LambdaMode::Fixed(x) = cfg.lambda {
        require(
            (0.0..=1.0).contains(&x),
            format!("lambda {x} must lie in [0, 1] (fields: lambda)"),
        );
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(errs))
    }
}

/// Optimizer grouping of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Main,
    /// Backbone parameters trained at a reduced rate. The stub encoders are
    /// frozen seeded functions, so this group is empty in the default model;
    /// the optimizer still honors it.
    Encoder,
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamDef {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// The model's full parameter set, ordered and name-indexed.
#[derive(Debug, Clone)]
pub struct ModelParams {
    defs: Vec<ParamDef>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// Initializes every parameter from the config's seed: projections draw
    /// fan-in-scaled uniforms, normalization gains and the scale half of the
    /// modulation-head bias start at one, other biases at zero, upsampling
    /// kernels at one, queries from a unit Gaussian scaled by `D^(-1/2)`, and
    /// the output temperature at its configured value.
    pub fn init(cfg: &Config) -> ModelParams {
        let (c, d, t, s) = (cfg.channels, cfg.guidance_dim, cfg.queries, cfg.d_state);
        let (cd, cs) = (cfg.corr_channels, cfg.shallow_channels);
        let e = c / 2 + d / 2;
        let seed = cfg.seed;
        let mut defs: Vec<ParamDef> = Vec::new();
        let mut push = |name: String, tensor: Tensor| {
            defs.push(ParamDef { name, group: ParamGroup::Main, tensor });
        };
        let uniform = |name: &str, rows: usize, shape: &[usize]| {
            let numel: usize = shape.iter().product();
            let bound = 1.0 / (rows as f64).sqrt();
            let data = rng::uniform_vec(seed, &format!("init/{name}"), numel, -bound, bound);
            Tensor::from_vec(shape, data)
        };

        push("align.lambda_raw".into(), Tensor::full(&[1], 0.0));
        push("align.text_proj_w".into(), uniform("align.text_proj_w", 2 * c, &[2 * c, d]));
        push("align.text_proj_b".into(), Tensor::full(&[d], 0.0));
        push("align.score_w1".into(), uniform("align.score_w1", c, &[c, c]));
        push("align.score_b1".into(), Tensor::full(&[c], 0.0));
        push("align.score_w2".into(), uniform("align.score_w2", c, &[c, 1]));
        push("align.score_b2".into(), Tensor::full(&[1], 0.0));
        push("align.image_proj_w".into(), uniform("align.image_proj_w", c, &[c, d]));
        push("align.image_proj_b".into(), Tensor::full(&[d], 0.0));
        push("align.text_gate_w".into(), uniform("align.text_gate_w", d, &[d, d]));
        push("text.embed_w".into(), uniform("text.embed_w", c, &[c, d]));
        let q_data: Vec<f64> = rng::normal_vec(seed, "init/fusion.q_lrn", t * d)
            .iter()
            .map(|v| v / (d as f64).sqrt())
            .collect();
        push("fusion.q_lrn".into(), Tensor::from_vec(&[t, d], q_data));
        for l in 0..cfg.fusion_depth {
            let name = |suffix: &str| format!("fusion.{l}.{suffix}");
            if l > 0 {
                push(name("reentry_w"), uniform(&name("reentry_w"), d, &[d, c]));
                push(name("reentry_b"), Tensor::full(&[c], 0.0));
            }
            for w in ["wq", "wk", "wv"] {
                push(name(w), uniform(&name(w), e, &[e, e]));
            }
            for branch in ["h", "v"] {
                push(
                    name(&format!("wo_{branch}")),
                    uniform(&name(&format!("wo_{branch}")), e, &[e, d / 2]),
                );
                push(name(&format!("bo_{branch}")), Tensor::full(&[d / 2], 0.0));
            }
            push(name("fuse_w"), uniform(&name("fuse_w"), 2 * d, &[2 * d, d]));
            push(name("fuse_b"), Tensor::full(&[d], 0.0));
            for j in 0..4 {
                for part in ["a_raw", "b", "c"] {
                    let pname = name(&format!("ss2d{j}.{part}"));
                    push(pname.clone(), uniform(&pname, s, &[d, s]));
                }
            }
            push(name("pw1_w"), uniform(&name("pw1_w"), d, &[d, d]));
            push(name("pw1_b"), Tensor::full(&[d], 0.0));
            push(name("dw_w"), uniform(&name("dw_w"), 9, &[d, 3, 3]));
            push(name("dw_b"), Tensor::full(&[d], 0.0));
            push(name("glu_w"), uniform(&name("glu_w"), d, &[d, 2 * d]));
            push(name("glu_b"), Tensor::full(&[2 * d], 0.0));
            push(name("pw2_w"), uniform(&name("pw2_w"), d, &[d, d]));
            push(name("pw2_b"), Tensor::full(&[d], 0.0));
            for k in 0..4 {
                push(name(&format!("ln{k}_gain")), Tensor::full(&[d], 1.0));
                push(name(&format!("ln{k}_bias")), Tensor::full(&[d], 0.0));
            }
            push(name("gate_w"), uniform(&name("gate_w"), 2 * d, &[2 * d, d]));
            push(name("gate_b"), Tensor::full(&[d], 0.0));
            push(name("mlp_w1"), uniform(&name("mlp_w1"), d, &[d, 2 * d]));
            push(name("mlp_b1"), Tensor::full(&[2 * d], 0.0));
            push(name("mlp_w2"), uniform(&name("mlp_w2"), 2 * d, &[2 * d, d]));
            push(name("mlp_b2"), Tensor::full(&[d], 0.0));
        }
        push("ccf.bypass_w".into(), uniform("ccf.bypass_w", c + d, &[c + d, d]));
        push("ccf.bypass_b".into(), Tensor::full(&[d], 0.0));
        push("dec.q_proj_w".into(), uniform("dec.q_proj_w", d, &[d, cd]));
        push("dec.x_proj_w".into(), uniform("dec.x_proj_w", d, &[d, cd]));
        for i in 0..2 {
            let name = |suffix: &str| format!("dec.{i}.{suffix}");
            push(name("up_kern"), Tensor::full(&[cd, 2, 2], 1.0));
            push(name("conv_w"), uniform(&name("conv_w"), cd * 9, &[cd, cd, 3, 3]));
            push(name("conv_b"), Tensor::full(&[cd], 0.0));
            push(name("film_w"), Tensor::full(&[cs, 2 * cd], 0.0));
            let mut fb = vec![0.0; 2 * cd];
            fb[..cd].fill(1.0);
            push(name("film_b"), Tensor::from_vec(&[2 * cd], fb));
        }
        push("dec.out_proj_w".into(), uniform("dec.out_proj_w", cd, &[cd, d]));
        push("dec.tau_out".into(), Tensor::full(&[1], cfg.tau_out_init));

        let index = defs.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        ModelParams { defs, index }
    }

    /// Wraps an explicit parameter list (small optimizer tests build their
    /// own instead of the full model set).
    pub fn from_defs(defs: Vec<ParamDef>) -> ModelParams {
        let index = defs.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        ModelParams { defs, index }
    }

    pub fn len(&self) -> usize {
        self.defs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defs.is_empty()
    }

    pub fn defs(&self) -> &[ParamDef] {
        &self.defs
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.defs[i].tensor)
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.defs[i].tensor
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.defs.iter().map(|p| p.tensor.numel()).sum()
    }
}

/// Graph nodes for every parameter, positionally matching `ModelParams`.
pub struct Bound {
    ids: Vec<NodeId>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Creates one leaf per parameter.
    pub fn new(g: &mut Graph, params: &ModelParams) -> Bound {
        let ids = params.defs.iter().map(|p| g.leaf(p.tensor.clone())).collect();
        Bound { ids, index: params.index.clone() }
    }

    /// Wraps externally created leaves (for finite-difference harnesses).
    pub fn from_ids(params: &ModelParams, ids: &[NodeId]) -> Bound {
        assert_eq!(ids.len(), params.defs.len(), "one node per parameter");
        Bound { ids: ids.to_vec(), index: params.index.clone() }
    }

    pub fn node(&self, name: &str) -> NodeId {
        self.ids[*self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Alignment intermediates exposed for heatmaps and tests, in the caller's
/// category order. Present only when regional alignment is enabled.
#[derive(Debug, Clone, Copy)]
pub struct AlignTrace {
    /// Category prior `[N]`; `None` when the object prior is off.
    pub prior: Option<NodeId>,
    /// Region-to-category alignment `[K, N]`.
    pub alignment: NodeId,
    /// Column-stochastic attention `[K, N]`.
    pub attention: NodeId,
    /// Per-region gate values `[K]`.
    pub alpha: NodeId,
}

/// Handles to the forward pass's observable nodes.
pub struct ForwardPass {
    /// Per-category logits `[N, H0, W0]`, channels in the caller's order.
    pub logits: NodeId,
    /// Pixel guidance `[Hf, Wf, D]`.
    pub guidance: NodeId,
    /// Text-side guidance `[N, D]` (sorted order internally; rows gathered
    /// back to the caller's order).
    pub g_region: NodeId,
    /// Fused map `[Hf, Wf, D]` entering the decoder.
    pub x_fused: NodeId,
    /// Final language queries `[T, D]`.
    pub queries: NodeId,
    pub align: Option<AlignTrace>,
}

/// Captured values of the observable nodes; building it never changes the
/// graph or the outputs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Tensor,
    pub guidance: Tensor,
    pub g_region: Tensor,
    pub x_fused: Tensor,
    pub queries: Tensor,
    pub prior: Option<Tensor>,
    pub alignment: Option<Tensor>,
    pub attention: Option<Tensor>,
    pub alpha: Option<Tensor>,
}

impl ForwardPass {
    /// Copies every observable value out of the graph.
    pub fn capture(&self, g: &Graph) -> ForwardTrace {
        ForwardTrace {
            logits: g.value(self.logits).clone(),
            guidance: g.value(self.guidance).clone(),
            g_region: g.value(self.g_region).clone(),
            x_fused: g.value(self.x_fused).clone(),
            queries: g.value(self.queries).clone(),
            prior: self.align.as_ref().and_then(|a| a.prior).map(|id| g.value(id).clone()),
            alignment: self.align.as_ref().map(|a| g.value(a.alignment).clone()),
            attention: self.align.as_ref().map(|a| g.value(a.attention).clone()),
            alpha: self.align.as_ref().map(|a| g.value(a.alpha).clone()),
        }
    }
}

/// Sorting permutation of the category names: `perm[j]` is the original index
/// of the j-th name in sorted order, `inv[i]` the sorted rank of original
/// index `i`.
fn category_order(names: &[String]) -> (Vec<usize>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..names.len()).collect();
    perm.sort_by(|&a, &b| names[a].cmp(&names[b]));
    let mut inv = vec![0usize; names.len()];
    for (j, &i) in perm.iter().enumerate() {
        inv[i] = j;
    }
    (perm, inv)
}

fn fusion_blocks(bound: &Bound, depth: usize) -> Vec<BlockParams> {
    (0..depth)
        .map(|l| {
            let n = |s: &str| bound.node(&format!("fusion.{l}.{s}"));
            BlockParams {
                reentry: (l > 0).then(|| (n("reentry_w"), n("reentry_b"))),
                attn: DirectionalParams {
                    wq: n("wq"),
                    wk: n("wk"),
                    wv: n("wv"),
                    wo_h: n("wo_h"),
                    bo_h: n("bo_h"),
                    wo_v: n("wo_v"),
                    bo_v: n("bo_v"),
                },
                fuse_w: n("fuse_w"),
                fuse_b: n("fuse_b"),
                ss2d: Ss2dParams {
                    dirs: [0, 1, 2, 3].map(|j| Ss2dDirection {
                        a_raw: n(&format!("ss2d{j}.a_raw")),
                        b: n(&format!("ss2d{j}.b")),
                        c: n(&format!("ss2d{j}.c")),
                    }),
                },
                adapt: AdaptParams {
                    pw1_w: n("pw1_w"),
                    pw1_b: n("pw1_b"),
                    dw_w: n("dw_w"),
                    dw_b: n("dw_b"),
                    glu_w: n("glu_w"),
                    glu_b: n("glu_b"),
                    pw2_w: n("pw2_w"),
                    pw2_b: n("pw2_b"),
                    ln: [0, 1, 2, 3]
                        .map(|k| (n(&format!("ln{k}_gain")), n(&format!("ln{k}_bias")))),
                },
                query: QueryAttnParams {
                    gate_w: n("gate_w"),
                    gate_b: n("gate_b"),
                    mlp_w1: n("mlp_w1"),
                    mlp_b1: n("mlp_b1"),
                    mlp_w2: n("mlp_w2"),
                    mlp_b2: n("mlp_b2"),
                },
            }
        })
        .collect()
}

fn decoder_params(bound: &Bound) -> DecoderParams {
    let stage = |i: usize| {
        let n = |s: &str| bound.node(&format!("dec.{i}.{s}"));
        StageParams {
            up_kern: n("up_kern"),
            conv_w: n("conv_w"),
            conv_b: n("conv_b"),
            film_w: n("film_w"),
            film_b: n("film_b"),
        }
    };
    DecoderParams {
        q_proj_w: bound.node("dec.q_proj_w"),
        x_proj_w: bound.node("dec.x_proj_w"),
        stages: [stage(0), stage(1)],
        out_proj_w: bound.node("dec.out_proj_w"),
        tau_out: bound.node("dec.tau_out"),
    }
}

/// Builds the full forward graph over one encoded image and one prompt bank,
/// producing logits at `target` resolution. The caller owns the graph, so
/// losses and probes can be stacked on the returned nodes.
pub fn build_forward(
    g: &mut Graph,
    cfg: &Config,
    enc: &EncodedImage,
    text: &TextBank,
    bound: &Bound,
    target: (usize, usize),
) -> Result<ForwardPass> {
    let (hf, wf) = (enc.hf, enc.wf);
    let c = cfg.channels;
    let d = cfg.guidance_dim;
    let n = text.names.len();
    if text.t_bar.shape() != [n, c] {
        return Err(Error::ShapeMismatch {
            op: "forward",
            detail: format!(
                "prompt bank is {:?} but the model expects [{n}, {c}] (config channels)",
                text.t_bar.shape()
            ),
        });
    }

    // Canonicalize category order so every cross-category reduction runs in
    // a vocabulary-order-independent sequence.
    let (perm, inv) = category_order(&text.names);
    let mut sorted_t_bar = vec![0.0; n * c];
    for (j, &i) in perm.iter().enumerate() {
        sorted_t_bar[j * c..(j + 1) * c].copy_from_slice(&text.t_bar.data()[i * c..(i + 1) * c]);
    }

    let v = g.constant(enc.v.clone());
    let f_mid = g.constant(enc.f_mid.clone());
    let s1 = g.constant(enc.s1.clone());
    let s2 = g.constant(enc.s2.clone());
    let t_bar = g.constant(Tensor::from_vec(&[n, c], sorted_t_bar));

    let lambda = match cfg.lambda {
        LambdaMode::Adaptive => {
            let raw = bound.node("align.lambda_raw");
            g.sigmoid(raw)
        }
        LambdaMode::Fixed(x) => g.constant(Tensor::from_vec(&[1], vec![x])),
    };
    let align_params = AlignParams {
        lambda,
        text_proj_w: bound.node("align.text_proj_w"),
        text_proj_b: bound.node("align.text_proj_b"),
        score_w1: bound.node("align.score_w1"),
        score_b1: bound.node("align.score_b1"),
        score_w2: bound.node("align.score_w2"),
        score_b2: bound.node("align.score_b2"),
        image_proj_w: bound.node("align.image_proj_w"),
        image_proj_b: bound.node("align.image_proj_b"),
        text_gate_w: bound.node("align.text_gate_w"),
    };

    let (prior, t_hat) = if cfg.flags.use_object_prior {
        let p = object_prior(g, v, t_bar);
        let (_, th) = modulate_prompts(g, t_bar, p, align_params.lambda);
        (Some(p), th)
    } else {
        (None, t_bar)
    };

    let (guidance, g_region, align_trace) = if cfg.flags.use_region_alignment {
        let grid = Rc::new(region_grid(hf, wf, cfg.region_side)?);
        let (alignment, regions) = regional_alignment(g, v, t_hat, &grid);
        let attention = text_to_region_attention(g, alignment, cfg.tau);
        let prototypes = region_prototypes(g, attention, regions);
        let g_region =
            text_guidance(g, prototypes, t_hat, align_params.text_proj_w, align_params.text_proj_b);
        let g_image = image_guidance(g, v, &align_params, &grid);
        let (_, alpha, _, guidance) = mix_guidance(
            g,
            alignment,
            g_region,
            g_image,
            align_params.text_gate_w,
            cfg.beta,
            &grid,
        );
        let trace = AlignTrace { prior, alignment, attention, alpha };
        (guidance, g_region, Some(trace))
    } else {
        // Global substitute: one pooled summary stands in for every region,
        // and the blended guidance broadcasts uniformly. No region operation
        // executes on this path.
        let v_mean = g.mean_first(v);
        let v_global = g.reshape(v_mean, &[1, c]);
        let a_global = g.cosine_matrix(v_global, t_hat);
        let ones_n = g.constant(Tensor::full(&[n, 1], 1.0));
        let prototypes = g.matmul(ones_n, v_global);
        let g_region =
            text_guidance(g, prototypes, t_hat, align_params.text_proj_w, align_params.text_proj_b);
        let h1 = g.matmul(v, align_params.score_w1);
        let h1 = g.add_row_bias(h1, align_params.score_b1);
        let h1 = g.gelu(h1);
        let scores = g.matmul(h1, align_params.score_w2);
        let scores = g.add_row_bias(scores, align_params.score_b2);
        let row = g.reshape(scores, &[1, hf * wf]);
        let weights = g.softmax_last(row, 1.0);
        let pooled = g.matmul(weights, v);
        let proj = g.matmul(pooled, align_params.image_proj_w);
        let g_image = g.add_row_bias(proj, align_params.image_proj_b);
        let over_categories = g.softmax_last(a_global, cfg.beta);
        let pooled_text = g.matmul(over_categories, g_region);
        let g_text = g.matmul(pooled_text, align_params.text_gate_w);
        let vn = g.l2norm_rows(g_image);
        let tn = g.l2norm_rows(g_text);
        let vn = g.clamp_max(vn, align::NORM_CLAMP);
        let tn = g.clamp_max(tn, align::NORM_CLAMP);
        let diff = g.sub(vn, tn);
        let alpha = g.sigmoid(diff);
        let from_image = g.mul_col(g_image, alpha);
        let one = g.constant(Tensor::full(&[1], 1.0));
        let rest = g.sub(one, alpha);
        let from_text = g.mul_col(g_text, rest);
        let blended = g.add(from_image, from_text);
        let ones_hw = g.constant(Tensor::full(&[hf * wf, 1], 1.0));
        let tiled = g.matmul(ones_hw, blended);
        let guidance = g.reshape(tiled, &[hf, wf, d]);
        (guidance, g_region, None)
    };

    let e_text = g.matmul(t_bar, bound.node("text.embed_w"));
    let q_lrn = bound.node("fusion.q_lrn");
    let (x_fused, queries) = if cfg.flags.use_ccf {
        let blocks = fusion_blocks(bound, cfg.fusion_depth);
        let traces = build_fusion(g, f_mid, guidance, e_text, q_lrn, &blocks, cfg.heads);
        let last = traces.last().expect("at least one block");
        (last.x_adapted, last.queries)
    } else {
        let cat = g.concat_last(&[f_mid, guidance]);
        let flat = g.reshape(cat, &[hf * wf, c + d]);
        let y = g.matmul(flat, bound.node("ccf.bypass_w"));
        let y = g.add_row_bias(y, bound.node("ccf.bypass_b"));
        (g.reshape(y, &[hf, wf, d]), q_lrn)
    };

    let dec = decoder_params(bound);
    let logits_sorted = build_decoder(
        g,
        queries,
        x_fused,
        s1,
        s2,
        g_region,
        &dec,
        (4 * hf, 4 * wf),
        target,
    )?;

    // Gather channels (and the per-category observables) back to the
    // caller's order.
    let inv_idx = Rc::new(inv);
    let flat = g.reshape(logits_sorted, &[n, target.0 * target.1]);
    let gathered = g.gather_rows(flat, Rc::clone(&inv_idx));
    let logits = g.reshape(gathered, &[n, target.0, target.1]);
    let g_region_out = g.gather_rows(g_region, Rc::clone(&inv_idx));
    let align_out = align_trace.map(|tr| {
        let unsort_cols = |g: &mut Graph, x: NodeId| {
            let cols = g.permute(x, &[1, 0]);
            let picked = g.gather_rows(cols, Rc::clone(&inv_idx));
            g.permute(picked, &[1, 0])
        };
        let alignment = unsort_cols(g, tr.alignment);
        let attention = unsort_cols(g, tr.attention);
        let prior = tr.prior.map(|p| {
            let col = g.reshape(p, &[n, 1]);
            let picked = g.gather_rows(col, Rc::clone(&inv_idx));
            g.reshape(picked, &[n])
        });
        AlignTrace { prior, alignment, attention, alpha: tr.alpha }
    });

    Ok(ForwardPass {
        logits,
        guidance,
        g_region: g_region_out,
        x_fused,
        queries,
        align: align_out,
    })
}

/// Convenience wrapper: creates a graph at the requested precision, binds the
/// parameters, and runs the forward pass at the image's native resolution.
pub fn forward(
    cfg: &Config,
    params: &ModelParams,
    enc: &EncodedImage,
    text: &TextBank,
    precision: Precision,
) -> Result<(Graph, ForwardPass)> {
    let mut g = Graph::with_precision(precision);
    let bound = Bound::new(&mut g, params);
    let target = (enc.hf * cfg.patch, enc.wf * cfg.patch);
    let pass = build_forward(&mut g, cfg, enc, text, &bound, target)?;
    Ok((g, pass))
}
