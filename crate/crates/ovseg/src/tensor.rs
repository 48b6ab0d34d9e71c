//! Dense row-major tensors and the deterministic numeric kernels everything
//! else is built from: cosine similarity, temperature softmax, bilinear
//! resampling, matrix products, and the rectangular region grid.
//!
//! Values are held as `f64`; a tensor tagged [`Precision::F32`] additionally
//! keeps every element exactly representable in `f32` by rounding kernel
//! outputs through `f32` ("storage quantization"). Tests and gradient oracles
//! always run at [`Precision::F64`].

use crate::error::{Error, Result};

/// Norms below this are treated as zero for cosine similarity.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Storage precision of a tensor's values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// Every element is exactly representable as an `f32`.
    F32,
    /// Full double precision (required by all tests and oracles).
    F64,
}

impl Precision {
    /// Result precision of an operation over operands: `F32` wins, so
    /// quantization is never silently lost.
    pub fn join(self, other: Precision) -> Precision {
        if self == Precision::F32 || other == Precision::F32 {
            Precision::F32
        } else {
            Precision::F64
        }
    }
}

/// Dense multi-dimensional array, row-major, with positive extents.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl Tensor {
    /// Builds a tensor from explicit contents. The data length must equal the
    /// product of the extents and every extent must be positive.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert!(shape.iter().all(|&e| e > 0), "tensor extents must be positive, got {shape:?}");
        let numel: usize = shape.iter().product();
        assert_eq!(data.len(), numel, "data length {} does not match shape {shape:?}", data.len());
        Tensor { shape: shape.to_vec(), data, precision: Precision::F64 }
    }

    /// All-zero tensor.
    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel])
    }

    /// Constant-filled tensor.
    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel])
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Value of a `[1]`-shaped tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on a tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Returns the tensor re-tagged (and, for `F32`, rounded) to `precision`.
    pub fn with_precision(mut self, precision: Precision) -> Tensor {
        self.precision = precision;
        self.seal()
    }

    /// Enforces the storage-precision contract: under `F32`, every element is
    /// rounded through `f32`. Called by every kernel on its output.
    pub fn seal(mut self) -> Tensor {
        if self.precision == Precision::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
        self
    }

    /// Same contents under a new shape with identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.numel(), "reshape {:?} -> {shape:?} changes element count", self.shape);
        assert!(shape.iter().all(|&e| e > 0));
        Tensor { shape: shape.to_vec(), data: self.data.clone(), precision: self.precision }
    }

    /// Errors if any element is NaN or infinite.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context.to_string() })
        }
    }

    /// Element-wise map; output keeps this tensor's precision tag.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            precision: self.precision,
        }
        .seal()
    }

    /// Element-wise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            precision: self.precision.join(other.precision),
        }
        .seal()
    }

    /// In-place accumulation (used by gradient reduction; `F64` paths only).
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Cosine similarity of two equal-length vectors.
///
/// Returns the similarity and a degeneracy flag: if either norm falls below
/// [`DEGENERATE_NORM`] the similarity is 0 and the flag is set, so padded or
/// dead features never produce NaN.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> (f64, bool) {
    assert_eq!(a.len(), b.len(), "cosine_sim length mismatch");
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        (0.0, true)
    } else {
        (dot / (na * nb), false)
    }
}

/// Row-by-row cosine similarity matrix between `a` (`[K, C]`) and `b`
/// (`[N, C]`), producing `[K, N]` plus the count of degenerate pairs.
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> (Tensor, u64) {
    assert_eq!(a.shape().len(), 2, "cosine_matrix expects [K, C]");
    assert_eq!(b.shape().len(), 2, "cosine_matrix expects [N, C]");
    assert_eq!(a.shape()[1], b.shape()[1], "cosine_matrix feature dims differ");
    let (k, c) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    let mut out = vec![0.0; k * n];
    let mut degenerate = 0u64;
    for i in 0..k {
        let ra = &a.data()[i * c..(i + 1) * c];
        for j in 0..n {
            let rb = &b.data()[j * c..(j + 1) * c];
            let (v, flag) = cosine_sim(ra, rb);
            out[i * n + j] = v;
            degenerate += u64::from(flag);
        }
    }
    let t = Tensor {
        shape: vec![k, n],
        data: out,
        precision: a.precision().join(b.precision()),
    }
    .seal();
    (t, degenerate)
}

/// Temperature-scaled softmax along `axis`: `softmax(temperature * x)` with
/// max subtraction for stability. Slices along the axis sum to 1.
pub fn softmax_axis(x: &Tensor, axis: usize, temperature: f64) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(Error::arg(format!("softmax temperature must be positive, got {temperature}")));
    }
    assert!(axis < x.shape().len(), "softmax axis {axis} out of range for {:?}", x.shape());
    let shape = x.shape();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..axis_len {
                max = max.max(temperature * x.data()[base + a * inner]);
            }
            let mut sum = 0.0;
            for a in 0..axis_len {
                let e = (temperature * x.data()[base + a * inner] - max).exp();
                out[base + a * inner] = e;
                sum += e;
            }
            for a in 0..axis_len {
                out[base + a * inner] /= sum;
            }
        }
    }
    Ok(Tensor { shape: shape.to_vec(), data: out, precision: x.precision() }.seal())
}

/// Plain matrix product `[m, k] x [k, n] -> [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape().len(), 2, "matmul lhs must be rank 2");
    assert_eq!(b.shape().len(), 2, "matmul rhs must be rank 2");
    let (m, ka) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(ka, kb, "matmul inner dims differ: {ka} vs {kb}");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ra = &a.data()[i * ka..(i + 1) * ka];
        let ro = &mut out[i * n..(i + 1) * n];
        for (k, &av) in ra.iter().enumerate() {
            let rb = &b.data()[k * n..(k + 1) * n];
            for (o, &bv) in ro.iter_mut().zip(rb) {
                *o += av * bv;
            }
        }
    }
    Tensor { shape: vec![m, n], data: out, precision: a.precision().join(b.precision()) }.seal()
}

/// Per-axis source positions for half-pixel-center bilinear sampling:
/// for output index `i`, returns `(lo, hi, frac)` so the sample is
/// `(1 - frac) * x[lo] + frac * x[hi]`, with edge clamping.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = (i as f64 + 0.5) * (src as f64 / dst as f64) - 0.5;
            if pos <= 0.0 {
                (0, 0, 0.0)
            } else if pos >= (src - 1) as f64 {
                (src - 1, src - 1, 0.0)
            } else {
                let lo = pos.floor() as usize;
                (lo, lo + 1, pos - lo as f64)
            }
        })
        .collect()
}

/// Bilinear resize of an `[H, W, C]` tensor to `[h, w, C]` with half-pixel
/// centers. Identity (bit-exact) when the target equals the source.
pub fn bilinear_resize_hwc(x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    assert_eq!(x.shape().len(), 3, "bilinear_resize_hwc expects [H, W, C]");
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::arg(format!("bilinear target extents must be >= 1, got {th}x{tw}")));
    }
    if (th, tw) == (h, w) {
        return Ok(x.clone());
    }
    let ty = bilinear_taps(h, th);
    let tx = bilinear_taps(w, tw);
    let mut out = vec![0.0; th * tw * c];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            for ch in 0..c {
                let v00 = x.data()[(y0 * w + x0) * c + ch];
                let v01 = x.data()[(y0 * w + x1) * c + ch];
                let v10 = x.data()[(y1 * w + x0) * c + ch];
                let v11 = x.data()[(y1 * w + x1) * c + ch];
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                out[(oy * tw + ox) * c + ch] = top + fy * (bot - top);
            }
        }
    }
    Ok(Tensor { shape: vec![th, tw, c], data: out, precision: x.precision() }.seal())
}

/// A rectangular `r x r` partition of an `H x W` grid.
///
/// When `r` does not divide an extent, runs are ceil/floor balanced: the
/// first `extent mod r` runs get the ceiling length (16 split 6 ways gives
/// 3,3,3,3,2,2). Every cell belongs to exactly one region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionGrid {
    pub r: usize,
    pub h: usize,
    pub w: usize,
    /// Region index of each cell, row-major, length `h * w`.
    pub id: Vec<usize>,
    /// Cells per region, length `r * r`.
    pub counts: Vec<usize>,
    pub row_extents: Vec<usize>,
    pub col_extents: Vec<usize>,
}

impl RegionGrid {
    pub fn region_count(&self) -> usize {
        self.r * self.r
    }
}

fn split_extents(n: usize, r: usize) -> Vec<usize> {
    let ceil = n.div_ceil(r);
    let floor = n / r;
    let ceils = n % r;
    (0..r).map(|i| if i < ceils { ceil } else { floor }).collect()
}

/// Builds the region partition; errors when `r` exceeds either extent.
pub fn region_grid(h: usize, w: usize, r: usize) -> Result<RegionGrid> {
    if r == 0 || r > h.min(w) {
        return Err(Error::arg(format!(
            "region grid side {r} must be in 1..=min(H, W) = {}",
            h.min(w)
        )));
    }
    let row_extents = split_extents(h, r);
    let col_extents = split_extents(w, r);
    let mut row_of = Vec::with_capacity(h);
    for (ri, &e) in row_extents.iter().enumerate() {
        row_of.extend(std::iter::repeat_n(ri, e));
    }
    let mut col_of = Vec::with_capacity(w);
    for (ci, &e) in col_extents.iter().enumerate() {
        col_of.extend(std::iter::repeat_n(ci, e));
    }
    let mut id = vec![0usize; h * w];
    let mut counts = vec![0usize; r * r];
    for y in 0..h {
        for x in 0..w {
            let k = row_of[y] * r + col_of[x];
            id[y * w + x] = k;
            counts[k] += 1;
        }
    }
    Ok(RegionGrid { r, h, w, id, counts, row_extents, col_extents })
}
