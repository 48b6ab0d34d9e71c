//! Frozen stub encoders for vision and text.
//!
//! Both encoders are deterministic functions of a user seed — they have no
//! trainable parameters. The visual encoder patch-embeds the image, adds
//! zero-mean sinusoidal position codes, and applies two bounded mixing
//! layers; it also produces full-resolution shallow feature maps for the
//! decoder. The text encoder embeds each category by projecting its texture
//! signature through the *same* patch projection the visual encoder uses, so
//! a token covering a pure texture and the prompt naming that texture land
//! near each other in the shared space by construction. Prompt templates add
//! a small template-specific perturbation.

use crate::lgse;
use crate::rng;
use crate::scene::{self, TEXTURE_TILE};
use crate::tensor::{bilinear_resize_hwc, Tensor, DEGENERATE_NORM};
use crate::{Error, Result};

/// Substitution marker that every prompt template must contain exactly once.
pub const PLACEHOLDER: &str = "{category}";

/// Default prompt template applied to every category name.
pub const DEFAULT_TEMPLATE: &str = "A photo of a {category} in the scene";

/// Scale of the template-specific perturbation added to a category embedding.
const PROMPT_NOISE: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    /// Patch side in pixels; image extents must be divisible by it.
    pub patch: usize,
    /// Shared embedding width of visual tokens and text embeddings.
    pub channels: usize,
    /// Channels of the shallow feature maps handed to the decoder.
    pub shallow_channels: usize,
    /// Amplitude of the sinusoidal position codes.
    pub pos_amplitude: f64,
    /// Amplitude of the bounded token-mixing residuals.
    pub mix_amplitude: f64,
}

impl Default for EncoderConfig {
    fn default() -> EncoderConfig {
        EncoderConfig {
            patch: 4,
            channels: 64,
            shallow_channels: 32,
            pos_amplitude: 0.02,
            mix_amplitude: 0.05,
        }
    }
}

/// Everything the frozen visual encoder extracts from one image.
#[derive(Debug, Clone)]
pub struct EncodedImage {
    /// Final visual tokens `[Hf * Wf, C]`, one row per patch.
    pub v: Tensor,
    /// Mid-level feature map `[Hf, Wf, C]` tapped before the last mixing layer.
    pub f_mid: Tensor,
    /// Shallow features at 2x token resolution `[2Hf, 2Wf, Cs]`.
    pub s1: Tensor,
    /// Shallow features at 4x token resolution `[4Hf, 4Wf, Cs]`.
    pub s2: Tensor,
    pub hf: usize,
    pub wf: usize,
}

/// Prompt embeddings for one vocabulary.
#[derive(Debug, Clone)]
pub struct TextBank {
    /// Per-prompt embeddings `[N, P, C]`, each row unit-norm.
    pub t: Tensor,
    /// Mean prompt embedding per category `[N, C]` (not re-normalized).
    pub t_bar: Tensor,
    pub names: Vec<String>,
}

/// The shared patch projection `[3p^2, C]`. When the flattened patch fits in
/// the embedding width, the rows are orthonormalized so the projection
/// preserves inner products exactly — orthogonal textures stay orthogonal as
/// embeddings. Wider patches fall back to a variance-scaled random map.
fn patch_weight(seed: u64, patch: usize, channels: usize) -> Vec<f64> {
    let fan_in = 3 * patch * patch;
    let mut w = rng::normal_vec(seed, "enc/patch-proj", fan_in * channels);
    if fan_in <= channels {
        for i in 0..fan_in {
            for j in 0..i {
                let dot: f64 =
                    (0..channels).map(|c| w[i * channels + c] * w[j * channels + c]).sum();
                for c in 0..channels {
                    w[i * channels + c] -= dot * w[j * channels + c];
                }
            }
            let norm: f64 =
                (0..channels).map(|c| w[i * channels + c].powi(2)).sum::<f64>().sqrt();
            assert!(norm > DEGENERATE_NORM, "random rows cannot be dependent");
            for c in 0..channels {
                w[i * channels + c] /= norm;
            }
        }
    } else {
        let scale = 1.0 / (fan_in as f64).sqrt();
        for v in w.iter_mut() {
            *v *= scale;
        }
    }
    w
}

fn mix_weight(seed: u64, layer: usize, channels: usize) -> Tensor {
    let scale = 1.0 / (channels as f64).sqrt();
    let data = rng::normal_vec(seed, &format!("enc/mix-{layer}"), channels * channels)
        .into_iter()
        .map(|v| v * scale)
        .collect();
    Tensor::from_vec(&[channels, channels], data)
}

/// One bounded mixing layer: `x + amp * tanh(x @ m)` row by row.
fn mix(x: &Tensor, m: &Tensor, amp: f64) -> Tensor {
    let y = crate::tensor::matmul(x, m);
    x.zip_map(&y, |a, b| a + amp * b.tanh())
}

/// Encodes an image `[H, W, 3]` with values in [0, 1]. Extents must be
/// divisible by the patch size.
pub fn stub_encode_image(cfg: &EncoderConfig, seed: u64, image: &Tensor) -> Result<EncodedImage> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::ShapeMismatch {
            op: "stub_encode_image",
            detail: format!("expected [H, W, 3] image, got {shape:?}"),
        });
    }
    let (h, w) = (shape[0], shape[1]);
    let p = cfg.patch;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::arg(format!(
            "image {h}x{w} is not divisible by patch size {p}"
        )));
    }
    let (hf, wf) = (h / p, w / p);
    let c = cfg.channels;
    let wp = patch_weight(seed, p, c);
    let img = image.data();
    let tau = std::f64::consts::TAU;

    let mut x = vec![0.0; hf * wf * c];
    for by in 0..hf {
        for bx in 0..wf {
            let t = by * wf + bx;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..3 {
                        let s = img[((by * p + dy) * w + bx * p + dx) * 3 + ch] - 0.5;
                        let i = (dy * p + dx) * 3 + ch;
                        for cc in 0..c {
                            x[t * c + cc] += s * wp[i * c + cc];
                        }
                    }
                }
            }
            for cc in 0..c {
                let fy = (1 + cc % 4) as f64;
                let fx = (1 + (cc / 4) % 4) as f64;
                x[t * c + cc] += cfg.pos_amplitude
                    * ((tau * fy * (by as f64 + 0.5) / hf as f64).sin()
                        + (tau * fx * (bx as f64 + 0.5) / wf as f64).sin());
            }
        }
    }
    let x0 = Tensor::from_vec(&[hf * wf, c], x);
    let x1 = mix(&x0, &mix_weight(seed, 0, c), cfg.mix_amplitude);
    let v = mix(&x1, &mix_weight(seed, 1, c), cfg.mix_amplitude);
    let f_mid = x1.reshape(&[hf, wf, c]);

    // Full-resolution shallow projection, resized for each decoder stage.
    let cs = cfg.shallow_channels;
    let ws = rng::normal_vec(seed, "enc/shallow", 3 * cs);
    let scale = 1.0 / 3f64.sqrt();
    let mut shallow = vec![0.0; h * w * cs];
    for pix in 0..h * w {
        for ch in 0..3 {
            let sv = (img[pix * 3 + ch] - 0.5) * scale;
            for cc in 0..cs {
                shallow[pix * cs + cc] += sv * ws[ch * cs + cc];
            }
        }
    }
    let shallow = Tensor::from_vec(&[h, w, cs], shallow);
    let s1 = bilinear_resize_hwc(&shallow, (2 * hf, 2 * wf))?;
    let s2 = bilinear_resize_hwc(&shallow, (4 * hf, 4 * wf))?;

    Ok(EncodedImage { v, f_mid, s1, s2, hf, wf })
}

/// The unit-norm embeddings of every category's pure texture: each texture
/// tile is laid out as one patch and pushed through the shared patch
/// projection. Vocabulary order matters because textures are assigned within
/// a vocabulary.
pub fn pure_texture_embeddings(
    cfg: &EncoderConfig,
    seed: u64,
    vocab: &[String],
) -> Result<Vec<Vec<f64>>> {
    let sigs = scene::category_signatures(seed, vocab)?;
    let p = cfg.patch;
    let c = cfg.channels;
    let wp = patch_weight(seed, p, c);
    Ok(sigs
        .iter()
        .map(|sig| {
            let mut u = vec![0.0; c];
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..3 {
                        let s =
                            sig[((dy % TEXTURE_TILE) * TEXTURE_TILE + (dx % TEXTURE_TILE)) * 3 + ch];
                        let i = (dy * p + dx) * 3 + ch;
                        for cc in 0..c {
                            u[cc] += s * wp[i * c + cc];
                        }
                    }
                }
            }
            normalize(&mut u);
            u
        })
        .collect())
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > DEGENERATE_NORM {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// Checks that category names are non-empty and pairwise distinct.
pub fn validate_vocab(names: &[String]) -> Result<()> {
    if names.is_empty() {
        return Err(Error::arg("vocabulary must name at least one category"));
    }
    for (i, n) in names.iter().enumerate() {
        if n.trim().is_empty() {
            return Err(Error::arg(format!("category {i} has an empty name")));
        }
        if names[..i].contains(n) {
            return Err(Error::arg(format!("duplicate category name '{n}'")));
        }
    }
    Ok(())
}

/// Checks that each template contains the substitution marker exactly once.
pub fn validate_templates(templates: &[String]) -> Result<()> {
    if templates.is_empty() {
        return Err(Error::arg("at least one prompt template is required"));
    }
    for t in templates {
        let hits = t.matches(PLACEHOLDER).count();
        if hits != 1 {
            return Err(Error::arg(format!(
                "template '{t}' must contain {PLACEHOLDER} exactly once, found {hits}"
            )));
        }
    }
    Ok(())
}

/// Embeds every (category, template) prompt. Each prompt embedding is the
/// category's texture embedding plus a small perturbation keyed by the
/// template index, re-normalized; the per-category mean is *not*
/// re-normalized.
pub fn stub_encode_text(
    cfg: &EncoderConfig,
    seed: u64,
    names: &[String],
    templates: &[String],
) -> Result<TextBank> {
    validate_vocab(names)?;
    validate_templates(templates)?;
    let n = names.len();
    let pt = templates.len();
    let c = cfg.channels;
    let us = pure_texture_embeddings(cfg, seed, names)?;
    let mut t = vec![0.0; n * pt * c];
    let mut t_bar = vec![0.0; n * c];
    for (ni, u) in us.iter().enumerate() {
        for pi in 0..pt {
            let mut delta = rng::normal_vec(seed, &format!("prompt-noise/{pi}"), c);
            normalize(&mut delta);
            let mut row: Vec<f64> =
                u.iter().zip(&delta).map(|(&a, &b)| a + PROMPT_NOISE * b).collect();
            normalize(&mut row);
            for cc in 0..c {
                t[(ni * pt + pi) * c + cc] = row[cc];
                t_bar[ni * c + cc] += row[cc] / pt as f64;
            }
        }
    }
    Ok(TextBank {
        t: Tensor::from_vec(&[n, pt, c], t),
        t_bar: Tensor::from_vec(&[n, c], t_bar),
        names: names.to_vec(),
    })
}

// ---- embedding interchange --------------------------------------------------

/// Persists an encoded image so real backbone features can be swapped in.
pub fn save_encoded_image(path: &std::path::Path, e: &EncodedImage) -> Result<()> {
    lgse::save(
        path,
        &[
            ("v".to_string(), e.v.clone()),
            ("f_mid".to_string(), e.f_mid.clone()),
            ("s1".to_string(), e.s1.clone()),
            ("s2".to_string(), e.s2.clone()),
        ],
    )
}

/// Loads an encoded image saved by [`save_encoded_image`].
pub fn load_encoded_image(path: &std::path::Path) -> Result<EncodedImage> {
    let entries = lgse::load(path)?;
    let v = lgse::find(&entries, "v")?.clone();
    let f_mid = lgse::find(&entries, "f_mid")?.clone();
    let s1 = lgse::find(&entries, "s1")?.clone();
    let s2 = lgse::find(&entries, "s2")?.clone();
    if f_mid.shape().len() != 3 || v.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "load_encoded_image",
            detail: format!("v {:?} / f_mid {:?}", v.shape(), f_mid.shape()),
        });
    }
    let (hf, wf) = (f_mid.shape()[0], f_mid.shape()[1]);
    if v.shape()[0] != hf * wf {
        return Err(Error::ShapeMismatch {
            op: "load_encoded_image",
            detail: format!("v holds {} tokens, f_mid implies {}", v.shape()[0], hf * wf),
        });
    }
    Ok(EncodedImage { v, f_mid, s1, s2, hf, wf })
}

/// Persists a text bank, category names included.
pub fn save_text_bank(path: &std::path::Path, bank: &TextBank) -> Result<()> {
    let bytes = bank.names.join("\n").into_bytes();
    let names = Tensor::from_vec(&[bytes.len()], bytes.iter().map(|&b| b as f64).collect());
    lgse::save(
        path,
        &[
            ("t".to_string(), bank.t.clone()),
            ("t_bar".to_string(), bank.t_bar.clone()),
            ("names".to_string(), names),
        ],
    )
}

/// Loads a text bank saved by [`save_text_bank`].
pub fn load_text_bank(path: &std::path::Path) -> Result<TextBank> {
    let entries = lgse::load(path)?;
    let t = lgse::find(&entries, "t")?.clone();
    let t_bar = lgse::find(&entries, "t_bar")?.clone();
    let raw = lgse::find(&entries, "names")?;
    let bytes: Vec<u8> = raw.data().iter().map(|&v| v as u8).collect();
    let joined = String::from_utf8(bytes)
        .map_err(|e| Error::Parse { what: "text bank names", detail: e.to_string() })?;
    let names: Vec<String> = joined.split('\n').map(String::from).collect();
    validate_vocab(&names)?;
    if t.shape().len() != 3 || t.shape()[0] != names.len() || t_bar.shape() != [t.shape()[0], t.shape()[2]] {
        return Err(Error::ShapeMismatch {
            op: "load_text_bank",
            detail: format!("t {:?} / t_bar {:?} for {} names", t.shape(), t_bar.shape(), names.len()),
        });
    }
    Ok(TextBank { t, t_bar, names })
}
