//! ASCII image interchange: P3 color pixmaps for scene images and plain text
//! grids for label maps. Scene pixels are 8-bit quantized at generation time,
//! so a render/parse round trip reproduces the tensor bit for bit.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Renders an `[H, W, 3]` image with values in [0, 1] as an ASCII pixmap.
pub fn render_ppm(image: &Tensor) -> String {
    let s = image.shape();
    assert_eq!(s.len(), 3, "pixmap rendering expects [H, W, 3]");
    assert_eq!(s[2], 3, "pixmap rendering expects three channels");
    let (h, w) = (s[0], s[1]);
    let mut out = format!("P3\n{w} {h}\n255\n");
    let d = image.data();
    for y in 0..h {
        let mut row = Vec::with_capacity(3 * w);
        for x in 0..w {
            for c in 0..3 {
                let v = (d[(y * w + x) * 3 + c] * 255.0).round().clamp(0.0, 255.0) as u8;
                row.push(v.to_string());
            }
        }
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Parses an ASCII pixmap back to an `[H, W, 3]` tensor with values `k/255`.
pub fn parse_ppm(text: &str) -> Result<Tensor> {
    let mut tokens = text.split_whitespace();
    let magic = tokens.next().unwrap_or("");
    if magic != "P3" {
        return Err(Error::Parse {
            what: "ppm",
            detail: format!("expected magic P3, got {magic:?}"),
        });
    }
    let mut next_num = |what: &str| -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| Error::Parse { what: "ppm", detail: format!("missing {what}") })?
            .parse()
            .map_err(|_| Error::Parse { what: "ppm", detail: format!("bad {what}") })
    };
    let w = next_num("width")?;
    let h = next_num("height")?;
    let maxval = next_num("maxval")?;
    if maxval != 255 {
        return Err(Error::Parse {
            what: "ppm",
            detail: format!("expected maxval 255, got {maxval}"),
        });
    }
    let mut data = Vec::with_capacity(3 * w * h);
    for _ in 0..3 * w * h {
        let v = next_num("pixel")?;
        if v > 255 {
            return Err(Error::Parse { what: "ppm", detail: format!("pixel {v} above maxval") });
        }
        data.push(v as f64 / 255.0);
    }
    if tokens.next().is_some() {
        return Err(Error::Parse { what: "ppm", detail: "trailing data after pixels".into() });
    }
    Ok(Tensor::from_vec(&[h, w, 3], data))
}

/// Renders a row-major label map as lines of space-separated indices.
pub fn render_labels(labels: &[u32], width: usize) -> String {
    assert!(width >= 1 && labels.len().is_multiple_of(width), "labels must form full rows");
    let mut out = String::new();
    for row in labels.chunks(width) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Parses a label grid back to `(width, labels)`; all rows must be equally
/// wide.
pub fn parse_labels(text: &str) -> Result<(usize, Vec<u32>)> {
    let mut width = None;
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<u32> = line
            .split_whitespace()
            .map(|t| {
                t.parse().map_err(|_| Error::Parse {
                    what: "labels",
                    detail: format!("line {}: bad label {t:?}", lineno + 1),
                })
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Parse {
                    what: "labels",
                    detail: format!("line {}: {} labels, expected {w}", lineno + 1, row.len()),
                });
            }
            _ => {}
        }
        labels.extend(row);
    }
    let width = width.ok_or(Error::Parse { what: "labels", detail: "no rows".into() })?;
    Ok((width, labels))
}
