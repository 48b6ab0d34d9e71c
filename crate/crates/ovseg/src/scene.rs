//! Synthetic scene generation.
//!
//! Scenes are 3-channel images populated with non-overlapping rectangles and
//! ellipses, each painted with a deterministic per-category texture. The
//! texture of category `n` is a fixed 4x4x3 signature tiled in global pixel
//! phase, so every axis-aligned 4x4 block inside a shape shows the identical
//! pattern; the stub text encoder projects the very same signatures, which is
//! what puts vision and language in a shared space by construction. The
//! background is itself a category (index 0) with its own texture.
//!
//! Pixel values are quantized to the 8-bit grid at generation time, so scenes
//! round-trip bit-exactly through portable-pixmap files.

use crate::lgse;
use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};
use rand::Rng;
use std::collections::BTreeSet;
use std::path::Path;

/// Texture tile side in pixels; signatures have `TILE * TILE * 3` entries.
pub const TEXTURE_TILE: usize = 4;

/// Largest vocabulary the texture scheme supports: each category owns one
/// pixel of the tile (3 signature coordinates), so the signatures of distinct
/// categories are exactly orthogonal.
pub const MAX_CATEGORIES: usize = TEXTURE_TILE * TEXTURE_TILE;

/// Per-category texture signatures for a whole vocabulary.
///
/// Category `i` tints pixel `i` of the 4x4 tile and leaves the rest gray:
/// its signature occupies coordinates `3i..3i+3`, values in ±[0.25, 0.35]
/// keyed by the category name. Disjoint supports make distinct categories
/// exactly orthogonal, which is what lets a small shape's prompt outrank an
/// absent distractor even though the background dominates the pixel count.
pub fn category_signatures(seed: u64, vocab: &[String]) -> Result<Vec<Vec<f64>>> {
    if vocab.len() > MAX_CATEGORIES {
        return Err(Error::arg(format!(
            "texture scheme supports at most {MAX_CATEGORIES} categories, got {}",
            vocab.len()
        )));
    }
    let n = TEXTURE_TILE * TEXTURE_TILE * 3;
    // Each category's signature lives on its own slot of the tile, chosen by
    // the name's rank in the sorted vocabulary so reordering the vocabulary
    // only reorders the signature rows.
    let mut sorted: Vec<&String> = vocab.iter().collect();
    sorted.sort();
    Ok(vocab
        .iter()
        .map(|name| {
            let slot = sorted.binary_search(&name).expect("name is in the sorted vocabulary");
            let r = rng::normal_vec(seed, &format!("texture/{name}"), 3);
            let mut sig = vec![0.0; n];
            for (j, &rj) in r.iter().enumerate() {
                sig[3 * slot + j] = rj.signum() * (0.25 + 0.05 * rj.abs().min(2.0));
            }
            sig
        })
        .collect())
}

/// The painted pixel value for a category at absolute pixel phase
/// `(y mod TILE, x mod TILE)`, before quantization.
fn texel(sig: &[f64], y: usize, x: usize, ch: usize) -> f64 {
    0.5 + sig[((y % TEXTURE_TILE) * TEXTURE_TILE + (x % TEXTURE_TILE)) * 3 + ch]
}

/// Snaps a value in [0, 1] to the 8-bit grid used by pixmap storage.
pub fn quantize(v: f64) -> f64 {
    (v * 255.0).round() / 255.0
}

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub image_size: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Side of every shape's bounding box, in pixels.
    pub shape_size: usize,
    /// Minimum empty margin between shape bounding boxes.
    pub min_gap: usize,
    /// Category names; index 0 is the background.
    pub vocab: Vec<String>,
}

impl Default for SceneConfig {
    fn default() -> SceneConfig {
        SceneConfig {
            image_size: 64,
            shapes_min: 2,
            shapes_max: 5,
            shape_size: 16,
            min_gap: 2,
            vocab: default_vocab(16),
        }
    }
}

const SHAPE_NAMES: [&str; 15] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india",
    "juliett", "kilo", "lima", "mike", "november", "oscar",
];

/// Builds the default vocabulary: "background" plus `n - 1` shape categories.
pub fn default_vocab(n: usize) -> Vec<String> {
    assert!(
        (1..=SHAPE_NAMES.len() + 1).contains(&n),
        "default vocabulary supports 1..={} categories",
        SHAPE_NAMES.len() + 1
    );
    let mut v = vec!["background".to_string()];
    v.extend(SHAPE_NAMES[..n - 1].iter().map(|s| s.to_string()));
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone)]
pub struct Placement {
    pub category: usize,
    pub kind: ShapeKind,
    pub y0: usize,
    pub x0: usize,
    pub size: usize,
}

impl Placement {
    /// Whether pixel `(y, x)` belongs to this shape.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        if y < self.y0 || x < self.x0 || y >= self.y0 + self.size || x >= self.x0 + self.size {
            return false;
        }
        match self.kind {
            ShapeKind::Rectangle => true,
            ShapeKind::Ellipse => {
                let c = (self.size as f64 - 1.0) / 2.0;
                let r = self.size as f64 / 2.0;
                let dy = y as f64 - (self.y0 as f64 + c);
                let dx = x as f64 - (self.x0 as f64 + c);
                dy * dy + dx * dx <= r * r
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    /// `[H, W, 3]` pixel values in [0, 1], already 8-bit quantized.
    pub image: Tensor,
    /// Category index per pixel, row-major `H * W`.
    pub labels: Vec<u32>,
    pub vocab: Vec<String>,
    /// Sorted distinct category indices present in the label map.
    pub present: Vec<usize>,
    /// Generation log; empty for scenes loaded from disk.
    pub placements: Vec<Placement>,
}

impl Scene {
    pub fn size(&self) -> usize {
        self.image.shape()[0]
    }

    /// One-hot supervision target `[N, H, W]` over this scene's vocabulary.
    pub fn one_hot(&self) -> Tensor {
        let h = self.size();
        let n = self.vocab.len();
        let mut y = vec![0.0; n * h * h];
        for (p, &l) in self.labels.iter().enumerate() {
            y[l as usize * h * h + p] = 1.0;
        }
        Tensor::from_vec(&[n, h, h], y)
    }

    /// All-valid pixel mask `[H, W]`.
    pub fn full_mask(&self) -> Tensor {
        Tensor::full(&[self.size(), self.size()], 1.0)
    }
}

fn present_of(labels: &[u32]) -> Vec<usize> {
    let set: BTreeSet<usize> = labels.iter().map(|&l| l as usize).collect();
    set.into_iter().collect()
}

/// Generates one scene, deterministic in `(config, seed, tag)`. The tag names
/// the scene's RNG stream (e.g. `"train-3"`), decorrelating scenes that share
/// a seed.
pub fn gen_scene(cfg: &SceneConfig, seed: u64, tag: &str) -> Result<Scene> {
    let h = cfg.image_size;
    if cfg.vocab.is_empty() {
        return Err(Error::arg("scene vocabulary must not be empty"));
    }
    if cfg.shapes_min > cfg.shapes_max {
        return Err(Error::arg(format!(
            "shapes_min {} exceeds shapes_max {}",
            cfg.shapes_min, cfg.shapes_max
        )));
    }
    if cfg.shapes_max > cfg.vocab.len().saturating_sub(1) {
        return Err(Error::arg(format!(
            "shapes_max {} needs {} non-background categories, vocabulary has {}",
            cfg.shapes_max,
            cfg.shapes_max,
            cfg.vocab.len().saturating_sub(1)
        )));
    }
    if cfg.shapes_max > 0 && cfg.shape_size > h {
        return Err(Error::arg(format!(
            "shape size {} exceeds image size {}",
            cfg.shape_size, h
        )));
    }

    let mut r = rng::stream(seed, &format!("scene/{tag}"));
    let count = if cfg.shapes_max > cfg.shapes_min {
        r.random_range(cfg.shapes_min..=cfg.shapes_max)
    } else {
        cfg.shapes_min
    };

    // Distinct non-background categories via a partial shuffle.
    let mut cats: Vec<usize> = (1..cfg.vocab.len()).collect();
    for i in 0..count.min(cats.len()) {
        let j = r.random_range(i..cats.len());
        cats.swap(i, j);
    }
    cats.truncate(count);

    let mut placements: Vec<Placement> = Vec::new();
    let span = h - cfg.shape_size; // inclusive upper corner bound
    for (i, &category) in cats.iter().enumerate() {
        let kind = if i % 2 == 0 { ShapeKind::Rectangle } else { ShapeKind::Ellipse };
        for _attempt in 0..200 {
            let y0 = r.random_range(0..=span);
            let x0 = r.random_range(0..=span);
            let clear = placements.iter().all(|p| {
                let sep = cfg.shape_size + cfg.min_gap;
                y0 + sep <= p.y0 || p.y0 + sep <= y0 || x0 + sep <= p.x0 || p.x0 + sep <= x0
            });
            if clear {
                placements.push(Placement { category, kind, y0, x0, size: cfg.shape_size });
                break;
            }
        }
    }

    // Paint background, then shapes in placement order.
    let sigs = category_signatures(seed, &cfg.vocab)?;
    let mut image = vec![0.0; h * h * 3];
    let mut labels = vec![0u32; h * h];
    for y in 0..h {
        for x in 0..h {
            let mut cat = 0usize;
            for p in &placements {
                if p.contains(y, x) {
                    cat = p.category;
                    break;
                }
            }
            labels[y * h + x] = cat as u32;
            for ch in 0..3 {
                image[(y * h + x) * 3 + ch] = quantize(texel(&sigs[cat], y, x, ch));
            }
        }
    }

    Ok(Scene {
        image: Tensor::from_vec(&[h, h, 3], image),
        present: present_of(&labels),
        labels,
        vocab: cfg.vocab.clone(),
        placements,
    })
}

/// Horizontal mirror of a scene (image, labels, and placement log).
pub fn flip_scene(s: &Scene) -> Scene {
    let h = s.size();
    let mut image = vec![0.0; h * h * 3];
    let mut labels = vec![0u32; h * h];
    for y in 0..h {
        for x in 0..h {
            let sx = h - 1 - x;
            labels[y * h + x] = s.labels[y * h + sx];
            for ch in 0..3 {
                image[(y * h + x) * 3 + ch] = s.image.data()[(y * h + sx) * 3 + ch];
            }
        }
    }
    Scene {
        image: Tensor::from_vec(&[h, h, 3], image),
        labels,
        vocab: s.vocab.clone(),
        present: s.present.clone(),
        placements: s
            .placements
            .iter()
            .map(|p| Placement { x0: h - p.size - p.x0, ..p.clone() })
            .collect(),
    }
}

// ---- pixmap and dataset I/O -------------------------------------------------

/// Writes an `[H, W, 3]` image with values in [0, 1] as a binary pixmap (P6).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    assert_eq!(image.shape().len(), 3);
    assert_eq!(image.shape()[2], 3, "pixmap expects 3 channels");
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a binary pixmap (P6, maxval 255) back to `[H, W, 3]` in [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let (h, w, off) = parse_pnm_header(&bytes, b"P6", "pixmap")?;
    let need = h * w * 3;
    let payload = bytes.get(off..off + need).ok_or_else(|| Error::Truncated {
        detail: format!("pixmap payload needs {need} bytes"),
    })?;
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::from_vec(&[h, w, 3], data))
}

/// Parses a PNM header (`magic`, whitespace-separated width/height/maxval),
/// returning `(height, width, payload offset)`.
pub(crate) fn parse_pnm_header(
    bytes: &[u8],
    magic: &[u8],
    what: &'static str,
) -> Result<(usize, usize, usize)> {
    if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
        return Err(Error::Parse { what, detail: "bad magic".to_string() });
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse { what, detail: "missing header field".to_string() });
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .expect("digits are UTF-8")
            .parse()
            .map_err(|e| Error::Parse { what, detail: format!("header field: {e}") })?;
    }
    if fields[2] != 255 {
        return Err(Error::Parse { what, detail: format!("unsupported maxval {}", fields[2]) });
    }
    // Exactly one whitespace byte separates header and payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Parse { what, detail: "missing payload separator".to_string() });
    }
    Ok((fields[1], fields[0], pos + 1))
}

/// Writes a dataset directory: `vocab.txt` plus per-scene pixmap and label
/// tensors (`scene-IDX.ppm`, `scene-IDX.labels.lgse`).
pub fn save_dataset(dir: &Path, scenes: &[Scene], vocab: &[String]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("vocab.txt"), vocab.join("\n") + "\n")?;
    for (i, s) in scenes.iter().enumerate() {
        write_ppm(&dir.join(format!("scene-{i:03}.ppm")), &s.image)?;
        let h = s.size();
        let labels = Tensor::from_vec(&[h, h], s.labels.iter().map(|&l| l as f64).collect());
        lgse::save(
            &dir.join(format!("scene-{i:03}.labels.lgse")),
            &[("labels".to_string(), labels)],
        )?;
    }
    Ok(())
}

/// Loads every scene of a dataset directory, in index order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let vocab_text = std::fs::read_to_string(dir.join("vocab.txt"))?;
    let vocab: Vec<String> =
        vocab_text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if vocab.is_empty() {
        return Err(Error::arg("vocab.txt lists no categories"));
    }
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("scene-") && n.ends_with(".ppm"))
        .collect();
    names.sort();
    let mut scenes = Vec::with_capacity(names.len());
    for name in names {
        let image = read_ppm(&dir.join(&name))?;
        let stem = name.trim_end_matches(".ppm");
        let entries = lgse::load(&dir.join(format!("{stem}.labels.lgse")))?;
        let lt = lgse::find(&entries, "labels")?;
        let h = image.shape()[0];
        if lt.shape() != [h, image.shape()[1]] {
            return Err(Error::ShapeMismatch {
                op: "load_dataset",
                detail: format!(
                    "label map {:?} does not match image {:?} in {name}",
                    lt.shape(),
                    image.shape()
                ),
            });
        }
        let labels: Vec<u32> = lt.data().iter().map(|&v| v as u32).collect();
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= vocab.len()) {
            return Err(Error::arg(format!(
                "label {bad} out of range for vocabulary of {} in {name}",
                vocab.len()
            )));
        }
        scenes.push(Scene {
            image,
            present: present_of(&labels),
            labels,
            vocab: vocab.clone(),
            placements: Vec::new(),
        });
    }
    Ok(scenes)
}
