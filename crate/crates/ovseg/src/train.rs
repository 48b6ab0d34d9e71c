//! Training: a warmup-cosine learning-rate schedule, decoupled-weight-decay
//! Adam with per-group rate multipliers, and a deterministic batch loop.
//!
//! Determinism is structural, not incidental: shuffling and flip augmentation
//! draw from streams keyed by the run seed, batch members are processed on
//! independent graphs (in parallel when the `parallel` feature is on), and
//! gradients accumulate in fixed parameter order afterwards, so the same seed
//! reproduces the same parameters bit for bit at any thread count.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::encoder::{stub_encode_image, stub_encode_text, EncodedImage};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::lgse;
use crate::model::{build_forward, validate_config, Bound, Config, ModelParams, ParamGroup};
use crate::scene::Scene;
use crate::tensor::Tensor;
use crate::{parallel, rng};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Warmup-cosine learning-rate schedule: linear from zero over `warmup`
/// steps, then a half-cosine from `base` down to `min` at `total`, constant
/// `min` afterwards. The two phases agree at the boundary.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub warmup: usize,
    pub total: usize,
    pub base: f64,
    pub min: f64,
}

impl Schedule {
    pub fn for_config(cfg: &Config) -> Schedule {
        Schedule { warmup: cfg.warmup, total: cfg.iters, base: cfg.lr, min: cfg.min_lr }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base * step as f64 / self.warmup as f64;
        }
        if step >= self.total {
            return self.min;
        }
        let span = (self.total - self.warmup) as f64;
        let progress = (step - self.warmup) as f64 / span;
        self.min + 0.5 * (self.base - self.min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct OptState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptState {
    pub fn zeros(params: &ModelParams) -> OptState {
        let z: Vec<Tensor> =
            params.defs().iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        OptState { m: z.clone(), v: z, step: 0 }
    }
}

/// One bias-corrected Adam step with decoupled weight decay:
/// `theta <- theta - lr_p * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`,
/// where `lr_p` applies the encoder-group multiplier. A non-finite gradient
/// aborts before any parameter moves. With zero gradients the moments stay
/// zero, so zero decay is a fixed point and positive decay shrinks every
/// parameter by exactly `1 - lr_p * wd` per step.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    opt: &mut OptState,
    lr: f64,
    weight_decay: f64,
    encoder_lr_scale: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::arg(format!(
            "optimizer got {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let t = opt.step + 1;
    for (def, grad) in params.defs().iter().zip(grads) {
        if grad.shape() != def.tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer_step",
                detail: format!(
                    "gradient for {} has shape {:?}, parameter has {:?}",
                    def.name,
                    grad.shape(),
                    def.tensor.shape()
                ),
            });
        }
        if grad.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: format!("gradient of {} at step {t}", def.name) });
        }
    }
    let c1 = 1.0 - BETA1.powi(t as i32);
    let c2 = 1.0 - BETA2.powi(t as i32);
    for (i, grad) in grads.iter().enumerate() {
        let scale = match params.defs()[i].group {
            ParamGroup::Main => 1.0,
            ParamGroup::Encoder => encoder_lr_scale,
        };
        let lr_p = lr * scale;
        let g = grad.data();
        let m = opt.m[i].data_mut();
        let v = opt.v[i].data_mut();
        let theta = params.tensor_mut(i).data_mut();
        for k in 0..theta.len() {
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            theta[k] -= lr_p * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * theta[k]);
        }
    }
    opt.step = t;
    Ok(())
}

/// Saves parameters, both moment vectors, and the step counter to one
/// embedding container.
pub fn save_checkpoint(path: &Path, params: &ModelParams, opt: &OptState) -> Result<()> {
    let mut entries = Vec::with_capacity(3 * params.len() + 1);
    for (i, def) in params.defs().iter().enumerate() {
        entries.push((format!("param.{}", def.name), def.tensor.clone()));
        entries.push((format!("adam.m.{}", def.name), opt.m[i].clone()));
        entries.push((format!("adam.v.{}", def.name), opt.v[i].clone()));
    }
    entries.push(("step".to_string(), Tensor::from_vec(&[1], vec![opt.step as f64])));
    lgse::save(path, &entries)
}

/// Loads a checkpoint against a template that supplies names, order, groups,
/// and expected shapes (normally `ModelParams::init` of the same config).
pub fn load_checkpoint(path: &Path, template: &ModelParams) -> Result<(ModelParams, OptState)> {
    let entries = lgse::load(path)?;
    let mut params = template.clone();
    let mut m = Vec::with_capacity(params.len());
    let mut v = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let name = params.defs()[i].name.clone();
        let shape = params.defs()[i].tensor.shape().to_vec();
        for (prefix, sink) in [("param", None), ("adam.m", Some(&mut m)), ("adam.v", Some(&mut v))]
        {
            let entry = lgse::find(&entries, &format!("{prefix}.{name}"))?;
            if entry.shape() != shape {
                return Err(Error::arg(format!(
                    "checkpoint entry {prefix}.{name} has shape {:?}, the model expects {shape:?}",
                    entry.shape()
                )));
            }
            match sink {
                None => *params.tensor_mut(i) = entry.clone(),
                Some(list) => list.push(entry.clone()),
            }
        }
    }
    let step_entry = lgse::find(&entries, "step")?;
    let step = step_entry.item() as u64;
    Ok((params, OptState { m, v, step }))
}

/// Mirrors an `[H, W, C]` image along its width.
pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let s = image.shape();
    assert_eq!(s.len(), 3, "flip expects [H, W, C]");
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let dst_px = (y * w + x) * c;
            let src_px = (y * w + (w - 1 - x)) * c;
            out[dst_px..dst_px + c].copy_from_slice(&src[src_px..src_px + c]);
        }
    }
    Tensor::from_vec(s, out)
}

/// Mirrors a scene (image and label map) along its width.
pub fn flip_scene(scene: &Scene) -> Scene {
    let h = scene.size();
    let mut labels = vec![0u32; scene.labels.len()];
    for y in 0..h {
        for x in 0..h {
            labels[y * h + x] = scene.labels[y * h + (h - 1 - x)];
        }
    }
    Scene {
        image: flip_horizontal(&scene.image),
        labels,
        vocab: scene.vocab.clone(),
        present: scene.present.clone(),
        placements: Vec::new(),
    }
}

/// Deterministic scene order: reshuffled once per epoch from the stream
/// keyed `shuffle-{epoch}`.
struct SceneStream {
    seed: u64,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl SceneStream {
    fn new(seed: u64, len: usize) -> SceneStream {
        let mut s = SceneStream { seed, order: (0..len).collect(), cursor: 0, epoch: 0 };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        let mut r = rng::stream(self.seed, &format!("shuffle-{}", self.epoch));
        self.order.shuffle(&mut r);
    }

    fn next(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.shuffle();
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        i
    }
}

struct EncodedItem {
    enc: EncodedImage,
    target: Tensor,
}

/// Final parameters, optimizer state, and the per-step loss log.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub opt: OptState,
    pub losses: Vec<f64>,
}

/// Trains from scratch on the given scenes. Every scene is encoded once per
/// orientation up front (the stub encoders are frozen), each step draws
/// `batch` scene/flip pairs from the seeded streams, and checkpoints land in
/// `checkpoint_dir` every `checkpoint_every` steps plus a `final.lgse`. A
/// non-finite loss aborts with a diagnostic checkpoint; `on_step` observes
/// `(step, mean loss)` after each update.
pub fn train(
    cfg: &Config,
    scenes: &[Scene],
    checkpoint_dir: Option<&Path>,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    validate_config(cfg)?;
    if scenes.is_empty() {
        return Err(Error::arg("training needs at least one scene"));
    }
    let vocab = &scenes[0].vocab;
    for s in scenes {
        if &s.vocab != vocab {
            return Err(Error::arg("all training scenes must share one vocabulary"));
        }
        if s.size() != cfg.image_size {
            return Err(Error::arg(format!(
                "scene is {}px but config image_size is {} (fields: image_size)",
                s.size(),
                cfg.image_size
            )));
        }
    }
    let enc_cfg = cfg.encoder_config();
    let text = stub_encode_text(&enc_cfg, cfg.seed, vocab, &cfg.templates)?;
    let encoded_results: Vec<Result<[EncodedItem; 2]>> = parallel::par_map(scenes, |s| {
        let flipped = flip_scene(s);
        Ok([
            EncodedItem {
                enc: stub_encode_image(&enc_cfg, cfg.seed, &s.image)?,
                target: s.one_hot(),
            },
            EncodedItem {
                enc: stub_encode_image(&enc_cfg, cfg.seed, &flipped.image)?,
                target: flipped.one_hot(),
            },
        ])
    });
    let mut encoded = Vec::with_capacity(scenes.len());
    for r in encoded_results {
        encoded.push(r?);
    }

    let mut params = ModelParams::init(cfg);
    let mut opt = OptState::zeros(&params);
    let schedule = Schedule::for_config(cfg);
    let mut stream = SceneStream::new(cfg.seed, scenes.len());
    let mask = Tensor::full(&[cfg.image_size, cfg.image_size], 1.0);
    let target_hw = (cfg.image_size, cfg.image_size);
    let mut losses = Vec::with_capacity(cfg.iters);

    for step in 0..cfg.iters {
        let flips = rng::uniform_vec(cfg.seed, &format!("flip-{step}"), cfg.batch, 0.0, 1.0);
        let batch: Vec<(usize, usize)> =
            flips.iter().map(|&f| (stream.next(), usize::from(f >= 0.5))).collect();
        let results: Vec<Result<(f64, Vec<Tensor>)>> = parallel::par_map(&batch, |&(si, oi)| {
            let item = &encoded[si][oi];
            let mut g = Graph::new();
            let bound = Bound::new(&mut g, &params);
            let pass = build_forward(&mut g, cfg, &item.enc, &text, &bound, target_hw)?;
            let loss = g.masked_bce(pass.logits, &item.target, &mask);
            let value = g.value(loss).item();
            let grads = g.backward(loss)?;
            Ok((value, bound.ids().iter().map(|&id| grads.of(id)).collect()))
        });

        let mut total_loss = 0.0;
        let mut acc: Vec<Tensor> =
            params.defs().iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        for r in results {
            let (value, gvec) = r?;
            total_loss += value;
            for (a, gt) in acc.iter_mut().zip(&gvec) {
                a.add_assign(gt);
            }
        }
        let inv = 1.0 / cfg.batch as f64;
        for a in &mut acc {
            for x in a.data_mut() {
                *x *= inv;
            }
        }
        let mean_loss = total_loss * inv;
        if !mean_loss.is_finite() {
            if let Some(dir) = checkpoint_dir {
                save_checkpoint(&dir.join("diagnostic.lgse"), &params, &opt)?;
            }
            return Err(Error::NonFinite {
                context: format!(
                    "training loss at step {step}; parameters at the failure were saved to \
                     diagnostic.lgse when an output directory was set"
                ),
            });
        }
        losses.push(mean_loss);
        optimizer_step(
            &mut params,
            &acc,
            &mut opt,
            schedule.lr_at(step),
            cfg.weight_decay,
            cfg.encoder_lr_scale,
        )?;
        on_step(step, mean_loss);
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1).is_multiple_of(cfg.checkpoint_every) {
                save_checkpoint(&dir.join(format!("checkpoint-{}.lgse", step + 1)), &params, &opt)?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        save_checkpoint(&dir.join("final.lgse"), &params, &opt)?;
    }
    Ok(TrainOutcome { params, opt, losses })
}
