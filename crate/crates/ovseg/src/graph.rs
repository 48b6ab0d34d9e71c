//! Reverse-mode automatic differentiation over a write-once tape.
//!
//! A [`Graph`] records one forward computation: every operation appends a
//! node holding its output tensor and a closure that maps the node's output
//! gradient to input-gradient contributions. [`Graph::backward`] sweeps the
//! tape in exact reverse creation order (which is a reverse topological
//! order, since inputs always precede uses), giving deterministic gradient
//! accumulation. Leaves never reached by the sweep report exactly-zero
//! gradients.
//!
//! The op set is exactly what the segmentation stack needs: dense linear
//! algebra, activations, softmax, shape surgery, region pooling/broadcast,
//! directional linear scans, small convolutions, bilinear resampling, and the
//! masked multi-label BCE loss.

use crate::tensor::{self, strides_of, Precision, Tensor};
use crate::{Error, Result};
use std::rc::Rc;

/// Handle to a node in one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

type BackwardFn = Box<dyn Fn(&Tensor, &mut GradSink)>;

struct Node {
    value: Tensor,
    backward: Option<BackwardFn>,
}

/// Instrumentation counters, bumped while the forward tape is built. Tests
/// use them to prove that disabled pipeline stages really execute nothing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpCounters {
    pub region_pool_calls: u64,
    pub region_broadcast_calls: u64,
    pub region_attention_pool_calls: u64,
    pub prior_evaluations: u64,
    pub fusion_block_calls: u64,
    pub degenerate_cosine_pairs: u64,
    pub zero_mask_warnings: u64,
}

/// Accumulates gradient contributions during the reverse sweep.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Tensor>],
}

impl GradSink<'_> {
    /// Adds `g` to the gradient of `id` (tape-order accumulation).
    pub fn add(&mut self, id: NodeId, g: Tensor) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Gradients of every node after a backward sweep. Nodes off the loss path
/// (and nodes only reachable forward of the loss) report zeros.
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `id`, materializing zeros when the node is off-path.
    pub fn of(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    /// Whether any gradient actually reached `id`.
    pub fn reached(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

/// One recorded forward computation.
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    pub counters: OpCounters,
}

impl Default for Graph {
    fn default() -> Graph {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph::with_precision(Precision::F64)
    }

    /// A graph whose every node value is stored at the given precision. At
    /// [`Precision::F32`] each op output (and each leaf) is rounded through
    /// 32-bit storage, modeling a production forward pass end to end.
    pub fn with_precision(precision: Precision) -> Graph {
        Graph { nodes: Vec::new(), precision, counters: OpCounters::default() }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    fn store(&self, t: Tensor) -> Tensor {
        match self.precision {
            Precision::F64 => t,
            Precision::F32 => t.with_precision(Precision::F32).seal(),
        }
    }

    /// Number of nodes on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Output tensor of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn val(&self, id: NodeId) -> Tensor {
        self.nodes[id.0].value.clone()
    }

    /// A differentiable input (parameter or activation root).
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let value = self.store(t);
        self.nodes.push(Node { value, backward: None });
        NodeId(self.nodes.len() - 1)
    }

    /// A non-trainable input; identical to [`Graph::leaf`] except in intent.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t)
    }

    fn push(&mut self, value: Tensor, backward: BackwardFn) -> NodeId {
        let value = self.store(value);
        self.nodes.push(Node { value, backward: Some(backward) });
        NodeId(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss` node. Errors if the loss is not
    /// finite. Gradient accumulation order is fixed by the tape.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        assert_eq!(lt.numel(), 1, "backward requires a scalar loss, got {:?}", lt.shape());
        if !lt.item().is_finite() {
            return Err(Error::NonFinite { context: "loss before backward".to_string() });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(bw) = self.nodes[id].backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let mut sink = GradSink { grads: &mut grads };
            bw(&g, &mut sink);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    // ---- elementwise arithmetic ----------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Box::new(move |g, sink| {
            sink.add(a, g.clone());
            sink.add(b, g.clone());
        }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Box::new(move |g, sink| {
            sink.add(a, g.clone());
            sink.add(b, g.map(|x| -x));
        }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.val(a);
        let bv = self.val(b);
        let v = av.zip_map(&bv, |x, y| x * y);
        self.push(v, Box::new(move |g, sink| {
            sink.add(a, g.zip_map(&bv, |x, y| x * y));
            sink.add(b, g.zip_map(&av, |x, y| x * y));
        }))
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Box::new(move |g, sink| sink.add(a, g.map(|x| x * c))))
    }

    /// `x + s` with `s` a `[1]`-shaped node broadcast over all of `x`.
    pub fn add_scalar_node(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let sv = self.value(s).item();
        let v = self.value(x).map(|v| v + sv);
        self.push(v, Box::new(move |g, sink| {
            sink.add(x, g.clone());
            sink.add(s, Tensor::scalar(g.data().iter().sum()));
        }))
    }

    /// `s * x` with `s` a `[1]`-shaped node broadcast over all of `x`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let xv = self.val(x);
        let sv = self.value(s).item();
        let v = xv.map(|v| v * sv);
        self.push(v, Box::new(move |g, sink| {
            sink.add(x, g.map(|v| v * sv));
            let dot: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
            sink.add(s, Tensor::scalar(dot));
        }))
    }

    /// Row-wise scaling: `y[k, :] = s[k] * x[k, :]` for `x: [K, D]`, `s: [K]`.
    pub fn mul_col(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let xv = self.val(x);
        let sv = self.val(s);
        let (k, d) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(sv.shape(), [k], "mul_col scale shape");
        let mut out = vec![0.0; k * d];
        for i in 0..k {
            for j in 0..d {
                out[i * d + j] = sv.data()[i] * xv.data()[i * d + j];
            }
        }
        let v = Tensor::from_vec(&[k, d], out);
        self.push(v, Box::new(move |g, sink| {
            let mut dx = vec![0.0; k * d];
            let mut ds = vec![0.0; k];
            for i in 0..k {
                for j in 0..d {
                    dx[i * d + j] = g.data()[i * d + j] * sv.data()[i];
                    ds[i] += g.data()[i * d + j] * xv.data()[i * d + j];
                }
            }
            sink.add(x, Tensor::from_vec(&[k, d], dx));
            sink.add(s, Tensor::from_vec(&[k], ds));
        }))
    }

    /// Row-wise division: `y[k, :] = x[k, :] / z[k]` for `x: [K, D]`, `z: [K]`.
    pub fn div_col(&mut self, x: NodeId, z: NodeId) -> NodeId {
        let xv = self.val(x);
        let zv = self.val(z);
        let (k, d) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(zv.shape(), [k], "div_col divisor shape");
        let mut out = vec![0.0; k * d];
        for i in 0..k {
            for j in 0..d {
                out[i * d + j] = xv.data()[i * d + j] / zv.data()[i];
            }
        }
        let yv = Tensor::from_vec(&[k, d], out);
        let yc = yv.clone();
        self.push(yv, Box::new(move |g, sink| {
            let mut dx = vec![0.0; k * d];
            let mut dz = vec![0.0; k];
            for i in 0..k {
                for j in 0..d {
                    dx[i * d + j] = g.data()[i * d + j] / zv.data()[i];
                    dz[i] -= g.data()[i * d + j] * yc.data()[i * d + j] / zv.data()[i];
                }
            }
            sink.add(x, Tensor::from_vec(&[k, d], dx));
            sink.add(z, Tensor::from_vec(&[k], dz));
        }))
    }

    // ---- activations ----------------------------------------------------

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid_stable);
        let yv = v.clone();
        self.push(v, Box::new(move |g, sink| {
            sink.add(x, g.zip_map(&yv, |gv, y| gv * y * (1.0 - y)));
        }))
    }

    pub fn tanh_act(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::tanh);
        let yv = v.clone();
        self.push(v, Box::new(move |g, sink| {
            sink.add(x, g.zip_map(&yv, |gv, y| gv * (1.0 - y * y)));
        }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let xv = self.val(x);
        let v = xv.map(|v| 0.5 * v * (1.0 + (K * (v + A * v * v * v)).tanh()));
        self.push(v, Box::new(move |g, sink| {
            let dx = g.zip_map(&xv, |gv, v| {
                let t = (K * (v + A * v * v * v)).tanh();
                let du = K * (1.0 + 3.0 * A * v * v);
                gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
            });
            sink.add(x, dx);
        }))
    }

    /// `elu(x) + 1`: strictly positive kernel feature map.
    pub fn elu1(&mut self, x: NodeId) -> NodeId {
        let xv = self.val(x);
        let v = xv.map(|v| if v > 0.0 { v + 1.0 } else { v.exp() });
        let yv = v.clone();
        self.push(v, Box::new(move |g, sink| {
            let mut dx = g.clone();
            for ((d, &xi), &yi) in dx.data_mut().iter_mut().zip(xv.data()).zip(yv.data()) {
                *d *= if xi > 0.0 { 1.0 } else { yi };
            }
            sink.add(x, dx);
        }))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::exp);
        let yv = v.clone();
        self.push(v, Box::new(move |g, sink| {
            sink.add(x, g.zip_map(&yv, |gv, y| gv * y));
        }))
    }

    /// `min(x, c)`; gradient passes where the clamp is inactive.
    pub fn clamp_max(&mut self, x: NodeId, c: f64) -> NodeId {
        let xv = self.val(x);
        let v = xv.map(|v| v.min(c));
        self.push(v, Box::new(move |g, sink| {
            sink.add(x, g.zip_map(&xv, |gv, v| if v <= c { gv } else { 0.0 }));
        }))
    }

    /// `max(x, c)`; gradient passes where the clamp is inactive.
    pub fn clamp_min(&mut self, x: NodeId, c: f64) -> NodeId {
        let xv = self.val(x);
        let v = xv.map(|v| v.max(c));
        self.push(v, Box::new(move |g, sink| {
            sink.add(x, g.zip_map(&xv, |gv, v| if v >= c { gv } else { 0.0 }));
        }))
    }

    // ---- linear algebra ---------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.val(a);
        let bv = self.val(b);
        let v = tensor::matmul(&av, &bv);
        self.push(v, Box::new(move |g, sink| {
            sink.add(a, matmul_nt(g, &bv));
            sink.add(b, matmul_tn(&av, g));
        }))
    }

    /// Batched matmul `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.val(a);
        let bv = self.val(b);
        let (ba, m, ka) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bb, kb, n) = (bv.shape()[0], bv.shape()[1], bv.shape()[2]);
        assert_eq!(ba, bb, "bmm batch dims differ");
        assert_eq!(ka, kb, "bmm inner dims differ");
        let mut out = vec![0.0; ba * m * n];
        for t in 0..ba {
            let sa = &av.data()[t * m * ka..(t + 1) * m * ka];
            let sb = &bv.data()[t * ka * n..(t + 1) * ka * n];
            let so = &mut out[t * m * n..(t + 1) * m * n];
            for i in 0..m {
                for k in 0..ka {
                    let x = sa[i * ka + k];
                    for j in 0..n {
                        so[i * n + j] += x * sb[k * n + j];
                    }
                }
            }
        }
        let v = Tensor::from_vec(&[ba, m, n], out)
            .with_precision(av.precision().join(bv.precision()));
        self.push(v, Box::new(move |g, sink| {
            let mut da = vec![0.0; ba * m * ka];
            let mut db = vec![0.0; ba * ka * n];
            for t in 0..ba {
                let sg = &g.data()[t * m * n..(t + 1) * m * n];
                let sa = &av.data()[t * m * ka..(t + 1) * m * ka];
                let sb = &bv.data()[t * ka * n..(t + 1) * ka * n];
                let sda = &mut da[t * m * ka..(t + 1) * m * ka];
                for i in 0..m {
                    for k in 0..ka {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += sg[i * n + j] * sb[k * n + j];
                        }
                        sda[i * ka + k] = acc;
                    }
                }
                let sdb = &mut db[t * ka * n..(t + 1) * ka * n];
                for k in 0..ka {
                    for i in 0..m {
                        let x = sa[i * ka + k];
                        for j in 0..n {
                            sdb[k * n + j] += x * sg[i * n + j];
                        }
                    }
                }
            }
            sink.add(a, Tensor::from_vec(&[ba, m, ka], da));
            sink.add(b, Tensor::from_vec(&[ba, ka, n], db));
        }))
    }

    /// Adds a `[n]`-shaped bias over the last axis of `x`.
    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = self.val(x);
        let bv = self.val(b);
        let n = *xv.shape().last().expect("add_row_bias on rank-0");
        assert_eq!(bv.shape(), [n], "bias must match last axis");
        let rows = xv.numel() / n;
        let mut out = xv.data().to_vec();
        for r in 0..rows {
            for j in 0..n {
                out[r * n + j] += bv.data()[j];
            }
        }
        let v = Tensor::from_vec(xv.shape(), out)
            .with_precision(xv.precision().join(bv.precision()));
        self.push(v, Box::new(move |g, sink| {
            sink.add(x, g.clone());
            let mut db = vec![0.0; n];
            for row in g.data().chunks(n) {
                for (dbj, &gj) in db.iter_mut().zip(row) {
                    *dbj += gj;
                }
            }
            sink.add(b, Tensor::from_vec(&[n], db));
        }))
    }

    // ---- shape surgery ----------------------------------------------------

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(x).reshape(shape);
        let old: Vec<usize> = self.value(x).shape().to_vec();
        self.push(v, Box::new(move |g, sink| sink.add(x, g.reshape(&old))))
    }

    /// Axis permutation: output axis `i` takes input axis `perm[i]`.
    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> NodeId {
        let xv = self.val(x);
        let v = permute_tensor(&xv, perm);
        let perm_owned: Vec<usize> = perm.to_vec();
        let mut inverse = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let _ = &perm_owned;
        self.push(v, Box::new(move |g, sink| {
            sink.add(x, permute_tensor(g, &inverse));
        }))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let vals: Vec<Tensor> = parts.iter().map(|&p| self.val(p)).collect();
        let lead = &vals[0].shape()[..vals[0].shape().len() - 1];
        let mut last_total = 0;
        for v in &vals {
            assert_eq!(&v.shape()[..v.shape().len() - 1], lead, "concat_last leading dims differ");
            last_total += *v.shape().last().unwrap();
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * last_total);
        for r in 0..rows {
            for v in &vals {
                let w = *v.shape().last().unwrap();
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(last_total);
        let prec = vals.iter().fold(Precision::F64, |p, v| p.join(v.precision()));
        let widths: Vec<usize> = vals.iter().map(|v| *v.shape().last().unwrap()).collect();
        let ids: Vec<NodeId> = parts.to_vec();
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        let v = Tensor::from_vec(&shape, out).with_precision(prec);
        self.push(v, Box::new(move |g, sink| {
            let mut offset = 0;
            for ((&id, &w), shape) in ids.iter().zip(&widths).zip(&shapes) {
                let mut part = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    part.extend_from_slice(&g.data()[r * last_total + offset..r * last_total + offset + w]);
                }
                sink.add(id, Tensor::from_vec(shape, part));
                offset += w;
            }
        }))
    }

    /// Contiguous slice `x[..., from..to]` along the last axis.
    pub fn slice_last(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let xv = self.val(x);
        let last = *xv.shape().last().unwrap();
        assert!(from < to && to <= last, "slice_last range {from}..{to} of {last}");
        let rows = xv.numel() / last;
        let w = to - from;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&xv.data()[r * last + from..r * last + to]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        let xshape: Vec<usize> = xv.shape().to_vec();
        let v = Tensor::from_vec(&shape, out).with_precision(xv.precision());
        self.push(v, Box::new(move |g, sink| {
            let mut dx = vec![0.0; rows * last];
            for r in 0..rows {
                dx[r * last + from..r * last + to].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
            }
            sink.add(x, Tensor::from_vec(&xshape, dx));
        }))
    }

    /// Reorders rows of `x: [M, D]` as `y[i, :] = x[idx[i], :]`. `idx` may be
    /// any index multiset; the backward pass scatter-adds.
    pub fn gather_rows(&mut self, x: NodeId, idx: Rc<Vec<usize>>) -> NodeId {
        let xv = self.val(x);
        let (m, d) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            assert!(i < m, "gather_rows index {i} out of {m}");
            out.extend_from_slice(&xv.data()[i * d..(i + 1) * d]);
        }
        let n = idx.len();
        let v = Tensor::from_vec(&[n, d], out).with_precision(xv.precision());
        self.push(v, Box::new(move |g, sink| {
            let mut dx = vec![0.0; m * d];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..d {
                    dx[i * d + j] += g.data()[r * d + j];
                }
            }
            sink.add(x, Tensor::from_vec(&[m, d], dx));
        }))
    }

    // ---- reductions and normalization --------------------------------------

    /// Sum over axis 0.
    pub fn sum_first(&mut self, x: NodeId) -> NodeId {
        self.reduce_first(x, false)
    }

    /// Mean over axis 0.
    pub fn mean_first(&mut self, x: NodeId) -> NodeId {
        self.reduce_first(x, true)
    }

    fn reduce_first(&mut self, x: NodeId, mean: bool) -> NodeId {
        let xv = self.val(x);
        let a = xv.shape()[0];
        let rest: Vec<usize> = xv.shape()[1..].to_vec();
        let inner: usize = rest.iter().product();
        let scale = if mean { 1.0 / a as f64 } else { 1.0 };
        let mut out = vec![0.0; inner];
        for t in 0..a {
            let row = &xv.data()[t * inner..(t + 1) * inner];
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o *= scale;
        }
        let out_shape = if rest.is_empty() { vec![1] } else { rest.clone() };
        let xshape: Vec<usize> = xv.shape().to_vec();
        let v = Tensor::from_vec(&out_shape, out).with_precision(xv.precision());
        self.push(v, Box::new(move |g, sink| {
            let mut dx = vec![0.0; a * inner];
            for t in 0..a {
                for i in 0..inner {
                    dx[t * inner + i] = g.data()[i] * scale;
                }
            }
            sink.add(x, Tensor::from_vec(&xshape, dx));
        }))
    }

    /// Scalar readout `sum(x * w)` against fixed weights; the standard way to
    /// reduce any output to a checkable scalar.
    pub fn dot_const(&mut self, x: NodeId, w: &Tensor) -> NodeId {
        let xv = self.val(x);
        assert_eq!(xv.shape(), w.shape(), "dot_const weight shape");
        let v: f64 = xv.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        let wc = w.clone();
        self.push(Tensor::scalar(v), Box::new(move |g, sink| {
            let s = g.item();
            sink.add(x, wc.map(|v| v * s));
        }))
    }

    /// Temperature softmax over the last axis: rows of `softmax(t * x)`.
    pub fn softmax_last(&mut self, x: NodeId, temperature: f64) -> NodeId {
        assert!(temperature > 0.0, "softmax temperature must be positive");
        let xv = self.val(x);
        let axis = xv.shape().len() - 1;
        let v = tensor::softmax_axis(&xv, axis, temperature).expect("validated temperature");
        let yv = v.clone();
        let last = *xv.shape().last().unwrap();
        let rows = xv.numel() / last;
        self.push(v, Box::new(move |g, sink| {
            let mut dx = vec![0.0; rows * last];
            for r in 0..rows {
                let ys = &yv.data()[r * last..(r + 1) * last];
                let gs = &g.data()[r * last..(r + 1) * last];
                let inner: f64 = ys.iter().zip(gs).map(|(y, gv)| y * gv).sum();
                for j in 0..last {
                    dx[r * last + j] = temperature * ys[j] * (gs[j] - inner);
                }
            }
            sink.add(x, Tensor::from_vec(yv.shape(), dx));
        }))
    }

    /// Euclidean norm of each row of `x: [K, D]`, with zero gradient for
    /// degenerate (near-zero) rows.
    pub fn l2norm_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.val(x);
        let (k, d) = (xv.shape()[0], xv.shape()[1]);
        let norms: Vec<f64> = (0..k)
            .map(|i| xv.data()[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let nv = norms.clone();
        let v = Tensor::from_vec(&[k], norms).with_precision(xv.precision());
        self.push(v, Box::new(move |g, sink| {
            let mut dx = vec![0.0; k * d];
            for i in 0..k {
                if nv[i] < tensor::DEGENERATE_NORM {
                    continue;
                }
                for j in 0..d {
                    dx[i * d + j] = g.data()[i] * xv.data()[i * d + j] / nv[i];
                }
            }
            sink.add(x, Tensor::from_vec(&[k, d], dx));
        }))
    }

    /// Pairwise cosine similarity between rows of `a: [K, C]` and `b: [N, C]`,
    /// producing `[K, N]`. Degenerate pairs yield similarity 0, zero gradient,
    /// and bump the degeneracy counter.
    pub fn cosine_matrix(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.val(a);
        let bv = self.val(b);
        let (v, degenerate) = tensor::cosine_matrix(&av, &bv);
        self.counters.degenerate_cosine_pairs += degenerate;
        let (k, c) = (av.shape()[0], av.shape()[1]);
        let n = bv.shape()[0];
        let yv = v.clone();
        self.push(v, Box::new(move |g, sink| {
            let mut da = vec![0.0; k * c];
            let mut db = vec![0.0; n * c];
            let norms_a: Vec<f64> = (0..k)
                .map(|i| av.data()[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            let norms_b: Vec<f64> = (0..n)
                .map(|j| bv.data()[j * c..(j + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            for i in 0..k {
                if norms_a[i] < tensor::DEGENERATE_NORM {
                    continue;
                }
                for j in 0..n {
                    if norms_b[j] < tensor::DEGENERATE_NORM {
                        continue;
                    }
                    let gv = g.data()[i * n + j];
                    if gv == 0.0 {
                        continue;
                    }
                    let cos = yv.data()[i * n + j];
                    let (na, nb) = (norms_a[i], norms_b[j]);
                    for t in 0..c {
                        let x = av.data()[i * c + t];
                        let y = bv.data()[j * c + t];
                        da[i * c + t] += gv * (y / (na * nb) - cos * x / (na * na));
                        db[j * c + t] += gv * (x / (na * nb) - cos * y / (nb * nb));
                    }
                }
            }
            sink.add(a, Tensor::from_vec(&[k, c], da));
            sink.add(b, Tensor::from_vec(&[n, c], db));
        }))
    }

    /// LayerNorm over the last axis with learnable gain and bias.
    pub fn layernorm_last(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        const EPS: f64 = 1e-5;
        let xv = self.val(x);
        let gv = self.val(gain);
        let bv = self.val(bias);
        let d = *xv.shape().last().unwrap();
        assert_eq!(gv.shape(), [d], "layernorm gain shape");
        assert_eq!(bv.shape(), [d], "layernorm bias shape");
        let rows = xv.numel() / d;
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let xs = &xv.data()[r * d..(r + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (xs[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let xshape: Vec<usize> = xv.shape().to_vec();
        let v = Tensor::from_vec(&xshape, out).with_precision(xv.precision());
        self.push(v, Box::new(move |g, sink| {
            let mut dx = vec![0.0; rows * d];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for r in 0..rows {
                let gs = &g.data()[r * d..(r + 1) * d];
                let hs = &xhat[r * d..(r + 1) * d];
                let mut mean_dh = 0.0;
                let mut mean_dh_h = 0.0;
                for j in 0..d {
                    let dh = gs[j] * gv.data()[j];
                    mean_dh += dh;
                    mean_dh_h += dh * hs[j];
                    dgain[j] += gs[j] * hs[j];
                    dbias[j] += gs[j];
                }
                mean_dh /= d as f64;
                mean_dh_h /= d as f64;
                for j in 0..d {
                    let dh = gs[j] * gv.data()[j];
                    dx[r * d + j] = inv_std[r] * (dh - mean_dh - hs[j] * mean_dh_h);
                }
            }
            sink.add(x, Tensor::from_vec(&xshape, dx));
            sink.add(gain, Tensor::from_vec(&[d], dgain));
            sink.add(bias, Tensor::from_vec(&[d], dbias));
        }))
    }

    // ---- region operations -------------------------------------------------

    /// Mean-pools `x: [H, W, C]` within each region, producing `[K, C]`.
    pub fn region_pool(&mut self, x: NodeId, grid: Rc<tensor::RegionGrid>) -> NodeId {
        self.counters.region_pool_calls += 1;
        let xv = self.val(x);
        let (h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!((h, w), (grid.h, grid.w), "region_pool grid extents");
        let k = grid.region_count();
        let mut out = vec![0.0; k * c];
        for p in 0..h * w {
            let r = grid.id[p];
            for ch in 0..c {
                out[r * c + ch] += xv.data()[p * c + ch];
            }
        }
        for r in 0..k {
            let inv = 1.0 / grid.counts[r] as f64;
            for ch in 0..c {
                out[r * c + ch] *= inv;
            }
        }
        let gc = Rc::clone(&grid);
        let v = Tensor::from_vec(&[k, c], out).with_precision(xv.precision());
        self.push(v, Box::new(move |g, sink| {
            let mut dx = vec![0.0; h * w * c];
            for p in 0..h * w {
                let r = gc.id[p];
                let inv = 1.0 / gc.counts[r] as f64;
                for ch in 0..c {
                    dx[p * c + ch] = g.data()[r * c + ch] * inv;
                }
            }
            sink.add(x, Tensor::from_vec(&[h, w, c], dx));
        }))
    }

    /// Attention-pools `x: [H, W, C]` within each region using per-pixel
    /// `scores: [H, W]` softmax-normalized inside the region, producing `[K, C]`.
    pub fn region_softmax_pool(
        &mut self,
        x: NodeId,
        scores: NodeId,
        grid: Rc<tensor::RegionGrid>,
    ) -> NodeId {
        self.counters.region_attention_pool_calls += 1;
        let xv = self.val(x);
        let sv = self.val(scores);
        let (h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(sv.shape(), [h, w], "region_softmax_pool score shape");
        assert_eq!((h, w), (grid.h, grid.w), "region_softmax_pool grid extents");
        let k = grid.region_count();
        // Per-region softmax over member scores.
        let mut max = vec![f64::NEG_INFINITY; k];
        for p in 0..h * w {
            let r = grid.id[p];
            max[r] = max[r].max(sv.data()[p]);
        }
        let mut alpha = vec![0.0; h * w];
        let mut denom = vec![0.0; k];
        for (p, a) in alpha.iter_mut().enumerate() {
            let r = grid.id[p];
            let e = (sv.data()[p] - max[r]).exp();
            *a = e;
            denom[r] += e;
        }
        for (p, a) in alpha.iter_mut().enumerate() {
            *a /= denom[grid.id[p]];
        }
        let mut out = vec![0.0; k * c];
        for (p, &ap) in alpha.iter().enumerate() {
            let r = grid.id[p];
            for ch in 0..c {
                out[r * c + ch] += ap * xv.data()[p * c + ch];
            }
        }
        let gc = Rc::clone(&grid);
        let alpha_saved = alpha;
        let v = Tensor::from_vec(&[k, c], out).with_precision(xv.precision());
        self.push(v, Box::new(move |g, sink| {
            let mut dx = vec![0.0; h * w * c];
            let mut ds = vec![0.0; h * w];
            // Per-pixel score of interest: s_p = <g_region, x_p>.
            let mut sdot = vec![0.0; h * w];
            let mut region_mean = vec![0.0; k];
            for p in 0..h * w {
                let r = gc.id[p];
                let mut acc = 0.0;
                for ch in 0..c {
                    acc += g.data()[r * c + ch] * xv.data()[p * c + ch];
                    dx[p * c + ch] = alpha_saved[p] * g.data()[r * c + ch];
                }
                sdot[p] = acc;
                region_mean[r] += alpha_saved[p] * acc;
            }
            for p in 0..h * w {
                let r = gc.id[p];
                ds[p] = alpha_saved[p] * (sdot[p] - region_mean[r]);
            }
            sink.add(x, Tensor::from_vec(&[h, w, c], dx));
            sink.add(scores, Tensor::from_vec(&[h, w], ds));
        }))
    }

    /// Broadcasts per-region vectors `g: [K, D]` back to every member pixel,
    /// producing `[H, W, D]` constant within each region.
    pub fn region_broadcast(&mut self, x: NodeId, grid: Rc<tensor::RegionGrid>) -> NodeId {
        self.counters.region_broadcast_calls += 1;
        let xv = self.val(x);
        let (k, d) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(k, grid.region_count(), "region_broadcast region count");
        let (h, w) = (grid.h, grid.w);
        let mut out = vec![0.0; h * w * d];
        for p in 0..h * w {
            let r = grid.id[p];
            out[p * d..(p + 1) * d].copy_from_slice(&xv.data()[r * d..(r + 1) * d]);
        }
        let gc = Rc::clone(&grid);
        let v = Tensor::from_vec(&[h, w, d], out).with_precision(xv.precision());
        self.push(v, Box::new(move |g, sink| {
            let mut dx = vec![0.0; k * d];
            for p in 0..h * w {
                let r = gc.id[p];
                for ch in 0..d {
                    dx[r * d + ch] += g.data()[p * d + ch];
                }
            }
            sink.add(x, Tensor::from_vec(&[k, d], dx));
        }))
    }

    // ---- sequence scan -------------------------------------------------------

    /// Per-channel diagonal linear recurrence along a flattened sequence
    /// `x: [L, D]` with decay `a: [D, S]`, input gain `b: [D, S]`, and readout
    /// `c: [D, S]`:
    /// `h_t = a (.) h_(t-1) + b * x_t`, `y_t = <c, h_t>`, `h_(-1) = 0`.
    pub fn linear_scan(&mut self, x: NodeId, a: NodeId, b: NodeId, c: NodeId) -> NodeId {
        let xv = self.val(x);
        let av = self.val(a);
        let bv = self.val(b);
        let cv = self.val(c);
        let (l, d) = (xv.shape()[0], xv.shape()[1]);
        let s = av.shape()[1];
        assert_eq!(av.shape(), [d, s], "linear_scan decay shape");
        assert_eq!(bv.shape(), [d, s], "linear_scan gain shape");
        assert_eq!(cv.shape(), [d, s], "linear_scan readout shape");
        let mut y = vec![0.0; l * d];
        // States saved for the adjoint recurrence: h[t, ch, s].
        let mut states = vec![0.0; l * d * s];
        for ch in 0..d {
            let ac = &av.data()[ch * s..(ch + 1) * s];
            let bc = &bv.data()[ch * s..(ch + 1) * s];
            let cc = &cv.data()[ch * s..(ch + 1) * s];
            let mut h = vec![0.0; s];
            for t in 0..l {
                let xt = xv.data()[t * d + ch];
                let mut yt = 0.0;
                for si in 0..s {
                    h[si] = ac[si] * h[si] + bc[si] * xt;
                    yt += cc[si] * h[si];
                    states[(t * d + ch) * s + si] = h[si];
                }
                y[t * d + ch] = yt;
            }
        }
        let v = Tensor::from_vec(&[l, d], y).with_precision(xv.precision());
        self.push(v, Box::new(move |g, sink| {
            let mut dx = vec![0.0; l * d];
            let mut da = vec![0.0; d * s];
            let mut db = vec![0.0; d * s];
            let mut dc = vec![0.0; d * s];
            for ch in 0..d {
                let ac = &av.data()[ch * s..(ch + 1) * s];
                let bc = &bv.data()[ch * s..(ch + 1) * s];
                let cc = &cv.data()[ch * s..(ch + 1) * s];
                let mut dh = vec![0.0; s];
                for t in (0..l).rev() {
                    let gy = g.data()[t * d + ch];
                    let xt = xv.data()[t * d + ch];
                    let hs = &states[(t * d + ch) * s..(t * d + ch) * s + s];
                    let mut dxt = 0.0;
                    for si in 0..s {
                        // dL/dh_t = c * dy_t + a (.) dL/dh_(t+1)  (dh already
                        // holds the t+1 term multiplied by a).
                        dh[si] += cc[si] * gy;
                        dc[ch * s + si] += gy * hs[si];
                        dxt += dh[si] * bc[si];
                        db[ch * s + si] += dh[si] * xt;
                        let h_prev = if t == 0 { 0.0 } else { states[((t - 1) * d + ch) * s + si] };
                        da[ch * s + si] += dh[si] * h_prev;
                        dh[si] *= ac[si];
                    }
                    dx[t * d + ch] = dxt;
                }
            }
            sink.add(x, Tensor::from_vec(&[l, d], dx));
            sink.add(a, Tensor::from_vec(&[d, s], da));
            sink.add(b, Tensor::from_vec(&[d, s], db));
            sink.add(c, Tensor::from_vec(&[d, s], dc));
        }))
    }

    // ---- convolutions and resampling -----------------------------------------

    /// 3x3 convolution with zero padding over `x: [T, H, W, Ci]`, weights
    /// `w: [Co, Ci, 3, 3]` shared across the leading `T` axis, bias `[Co]`.
    pub fn conv3x3_shared(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> NodeId {
        let xv = self.val(x);
        let wv = self.val(w);
        let bv = self.val(bias);
        let (t, h, ww, ci) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let co = wv.shape()[0];
        assert_eq!(wv.shape(), [co, ci, 3, 3], "conv3x3 weight shape");
        assert_eq!(bv.shape(), [co], "conv3x3 bias shape");
        let mut out = vec![0.0; t * h * ww * co];
        for ti in 0..t {
            for y in 0..h {
                for x2 in 0..ww {
                    let o_base = ((ti * h + y) * ww + x2) * co;
                    out[o_base..o_base + co].copy_from_slice(bv.data());
                    for dy in 0..3usize {
                        let yy = y as isize + dy as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for dx in 0..3usize {
                            let xx = x2 as isize + dx as isize - 1;
                            if xx < 0 || xx >= ww as isize {
                                continue;
                            }
                            let i_base = ((ti * h + yy as usize) * ww + xx as usize) * ci;
                            for oc in 0..co {
                                let w_base = ((oc * ci) * 3 + dy) * 3 + dx;
                                let mut acc = 0.0;
                                for icn in 0..ci {
                                    acc += wv.data()[w_base + icn * 9]
                                        * xv.data()[i_base + icn];
                                }
                                out[o_base + oc] += acc;
                            }
                        }
                    }
                }
            }
        }
        let v = Tensor::from_vec(&[t, h, ww, co], out)
            .with_precision(xv.precision().join(wv.precision()));
        self.push(v, Box::new(move |g, sink| {
            let mut dx = vec![0.0; t * h * ww * ci];
            let mut dw = vec![0.0; co * ci * 9];
            let mut dbias = vec![0.0; co];
            for ti in 0..t {
                for y in 0..h {
                    for x2 in 0..ww {
                        let o_base = ((ti * h + y) * ww + x2) * co;
                        for (db, &gv) in dbias.iter_mut().zip(&g.data()[o_base..o_base + co]) {
                            *db += gv;
                        }
                        for dy in 0..3usize {
                            let yy = y as isize + dy as isize - 1;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for dx2 in 0..3usize {
                                let xx = x2 as isize + dx2 as isize - 1;
                                if xx < 0 || xx >= ww as isize {
                                    continue;
                                }
                                let i_base = ((ti * h + yy as usize) * ww + xx as usize) * ci;
                                for oc in 0..co {
                                    let gv = g.data()[o_base + oc];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    let w_base = ((oc * ci) * 3 + dy) * 3 + dx2;
                                    for icn in 0..ci {
                                        dx[i_base + icn] += gv * wv.data()[w_base + icn * 9];
                                        dw[w_base + icn * 9] += gv * xv.data()[i_base + icn];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            sink.add(x, Tensor::from_vec(&[t, h, ww, ci], dx));
            sink.add(w, Tensor::from_vec(&[co, ci, 3, 3], dw));
            sink.add(bias, Tensor::from_vec(&[co], dbias));
        }))
    }

    /// Depthwise 3x3 convolution with zero padding over `x: [H, W, C]`,
    /// per-channel kernels `w: [C, 3, 3]` and bias `[C]`.
    pub fn depthwise3x3(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> NodeId {
        let xv = self.val(x);
        let wv = self.val(w);
        let bv = self.val(bias);
        let (h, ww, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(wv.shape(), [c, 3, 3], "depthwise3x3 weight shape");
        assert_eq!(bv.shape(), [c], "depthwise3x3 bias shape");
        let mut out = vec![0.0; h * ww * c];
        for y in 0..h {
            for x2 in 0..ww {
                for ch in 0..c {
                    let mut acc = bv.data()[ch];
                    for dy in 0..3usize {
                        let yy = y as isize + dy as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for dx in 0..3usize {
                            let xx = x2 as isize + dx as isize - 1;
                            if xx < 0 || xx >= ww as isize {
                                continue;
                            }
                            acc += wv.data()[(ch * 3 + dy) * 3 + dx]
                                * xv.data()[((yy as usize) * ww + xx as usize) * c + ch];
                        }
                    }
                    out[(y * ww + x2) * c + ch] = acc;
                }
            }
        }
        let v = Tensor::from_vec(&[h, ww, c], out)
            .with_precision(xv.precision().join(wv.precision()));
        self.push(v, Box::new(move |g, sink| {
            let mut dx = vec![0.0; h * ww * c];
            let mut dw = vec![0.0; c * 9];
            let mut dbias = vec![0.0; c];
            for y in 0..h {
                for x2 in 0..ww {
                    for ch in 0..c {
                        let gv = g.data()[(y * ww + x2) * c + ch];
                        if gv == 0.0 {
                            continue;
                        }
                        dbias[ch] += gv;
                        for dy in 0..3usize {
                            let yy = y as isize + dy as isize - 1;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for dx2 in 0..3usize {
                                let xx = x2 as isize + dx2 as isize - 1;
                                if xx < 0 || xx >= ww as isize {
                                    continue;
                                }
                                let pi = ((yy as usize) * ww + xx as usize) * c + ch;
                                dx[pi] += gv * wv.data()[(ch * 3 + dy) * 3 + dx2];
                                dw[(ch * 3 + dy) * 3 + dx2] += gv * xv.data()[pi];
                            }
                        }
                    }
                }
            }
            sink.add(x, Tensor::from_vec(&[h, ww, c], dx));
            sink.add(w, Tensor::from_vec(&[c, 3, 3], dw));
            sink.add(bias, Tensor::from_vec(&[c], dbias));
        }))
    }

    /// Learnable 2x upsampling (stride-2 transposed convolution with a 2x2
    /// per-channel kernel, shared across the leading `T` axis):
    /// `y[t, 2i+di, 2j+dj, c] = x[t, i, j, c] * k[c, di, dj]`.
    pub fn upsample2x(&mut self, x: NodeId, kern: NodeId) -> NodeId {
        let xv = self.val(x);
        let kv = self.val(kern);
        let (t, h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert_eq!(kv.shape(), [c, 2, 2], "upsample2x kernel shape");
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; t * oh * ow * c];
        for ti in 0..t {
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        let xvv = xv.data()[((ti * h + i) * w + j) * c + ch];
                        for di in 0..2usize {
                            for dj in 0..2usize {
                                out[((ti * oh + 2 * i + di) * ow + 2 * j + dj) * c + ch] =
                                    xvv * kv.data()[(ch * 2 + di) * 2 + dj];
                            }
                        }
                    }
                }
            }
        }
        let v = Tensor::from_vec(&[t, oh, ow, c], out)
            .with_precision(xv.precision().join(kv.precision()));
        self.push(v, Box::new(move |g, sink| {
            let mut dx = vec![0.0; t * h * w * c];
            let mut dk = vec![0.0; c * 4];
            for ti in 0..t {
                for i in 0..h {
                    for j in 0..w {
                        for ch in 0..c {
                            let xvv = xv.data()[((ti * h + i) * w + j) * c + ch];
                            let mut acc = 0.0;
                            for di in 0..2usize {
                                for dj in 0..2usize {
                                    let gv = g.data()
                                        [((ti * oh + 2 * i + di) * ow + 2 * j + dj) * c + ch];
                                    acc += gv * kv.data()[(ch * 2 + di) * 2 + dj];
                                    dk[(ch * 2 + di) * 2 + dj] += gv * xvv;
                                }
                            }
                            dx[((ti * h + i) * w + j) * c + ch] = acc;
                        }
                    }
                }
            }
            sink.add(x, Tensor::from_vec(&[t, h, w, c], dx));
            sink.add(kern, Tensor::from_vec(&[c, 2, 2], dk));
        }))
    }

    /// Outer channel-wise modulation: `y[t, m, c] = a[t, c] * b[m, c]`.
    pub fn broadcast_outer_mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.val(a);
        let bv = self.val(b);
        let (t, c) = (av.shape()[0], av.shape()[1]);
        let (m, cb) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(c, cb, "broadcast_outer_mul channel dims differ");
        let mut out = vec![0.0; t * m * c];
        for ti in 0..t {
            for mi in 0..m {
                for ch in 0..c {
                    out[(ti * m + mi) * c + ch] = av.data()[ti * c + ch] * bv.data()[mi * c + ch];
                }
            }
        }
        let v = Tensor::from_vec(&[t, m, c], out)
            .with_precision(av.precision().join(bv.precision()));
        self.push(v, Box::new(move |g, sink| {
            let mut da = vec![0.0; t * c];
            let mut db = vec![0.0; m * c];
            for ti in 0..t {
                for mi in 0..m {
                    for ch in 0..c {
                        let gv = g.data()[(ti * m + mi) * c + ch];
                        da[ti * c + ch] += gv * bv.data()[mi * c + ch];
                        db[mi * c + ch] += gv * av.data()[ti * c + ch];
                    }
                }
            }
            sink.add(a, Tensor::from_vec(&[t, c], da));
            sink.add(b, Tensor::from_vec(&[m, c], db));
        }))
    }

    /// Feature-wise affine modulation broadcast over the leading `T` axis:
    /// `y[t, h, w, c] = gamma[h, w, c] * x[t, h, w, c] + delta[h, w, c]`.
    pub fn film(&mut self, x: NodeId, gamma: NodeId, delta: NodeId) -> NodeId {
        let xv = self.val(x);
        let gv = self.val(gamma);
        let dv = self.val(delta);
        let (t, h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert_eq!(gv.shape(), [h, w, c], "film gamma shape");
        assert_eq!(dv.shape(), [h, w, c], "film delta shape");
        let plane = h * w * c;
        let mut out = vec![0.0; t * plane];
        for ti in 0..t {
            for p in 0..plane {
                out[ti * plane + p] = gv.data()[p] * xv.data()[ti * plane + p] + dv.data()[p];
            }
        }
        let v = Tensor::from_vec(&[t, h, w, c], out)
            .with_precision(xv.precision().join(gv.precision()));
        self.push(v, Box::new(move |g, sink| {
            let mut dx = vec![0.0; t * plane];
            let mut dgamma = vec![0.0; plane];
            let mut ddelta = vec![0.0; plane];
            for ti in 0..t {
                for p in 0..plane {
                    let gg = g.data()[ti * plane + p];
                    dx[ti * plane + p] = gg * gv.data()[p];
                    dgamma[p] += gg * xv.data()[ti * plane + p];
                    ddelta[p] += gg;
                }
            }
            sink.add(x, Tensor::from_vec(&[t, h, w, c], dx));
            sink.add(gamma, Tensor::from_vec(&[h, w, c], dgamma));
            sink.add(delta, Tensor::from_vec(&[h, w, c], ddelta));
        }))
    }

    /// Crops `x: [N, H, W]` to its top-left `[N, h, w]` corner (identity when
    /// extents already match).
    pub fn crop_spatial(&mut self, x: NodeId, target: (usize, usize)) -> NodeId {
        let xv = self.val(x);
        let (n, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (th, tw) = target;
        assert!(th <= h && tw <= w, "crop target exceeds source");
        if (th, tw) == (h, w) {
            return self.push(xv, Box::new(move |g, sink| sink.add(x, g.clone())));
        }
        let mut out = vec![0.0; n * th * tw];
        for ni in 0..n {
            for y in 0..th {
                for x2 in 0..tw {
                    out[(ni * th + y) * tw + x2] = xv.data()[(ni * h + y) * w + x2];
                }
            }
        }
        let v = Tensor::from_vec(&[n, th, tw], out).with_precision(xv.precision());
        self.push(v, Box::new(move |g, sink| {
            let mut dx = vec![0.0; n * h * w];
            for ni in 0..n {
                for y in 0..th {
                    for x2 in 0..tw {
                        dx[(ni * h + y) * w + x2] = g.data()[(ni * th + y) * tw + x2];
                    }
                }
            }
            sink.add(x, Tensor::from_vec(&[n, h, w], dx));
        }))
    }

    /// Bilinear resize of `x: [N, H, W]` to `[N, h, w]` with half-pixel
    /// centers; bit-exact identity when extents already match.
    pub fn bilinear_resize(&mut self, x: NodeId, target: (usize, usize)) -> NodeId {
        let xv = self.val(x);
        let (n, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (th, tw) = target;
        assert!(th >= 1 && tw >= 1, "bilinear target extents must be >= 1");
        if (th, tw) == (h, w) {
            return self.push(xv, Box::new(move |g, sink| sink.add(x, g.clone())));
        }
        let ty = tensor::bilinear_taps(h, th);
        let tx = tensor::bilinear_taps(w, tw);
        let mut out = vec![0.0; n * th * tw];
        for ni in 0..n {
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let at = |yy: usize, xx: usize| xv.data()[(ni * h + yy) * w + xx];
                    let top = at(y0, x0) + fx * (at(y0, x1) - at(y0, x0));
                    let bot = at(y1, x0) + fx * (at(y1, x1) - at(y1, x0));
                    out[(ni * th + oy) * tw + ox] = top + fy * (bot - top);
                }
            }
        }
        let v = Tensor::from_vec(&[n, th, tw], out).with_precision(xv.precision());
        self.push(v, Box::new(move |g, sink| {
            let mut dx = vec![0.0; n * h * w];
            for ni in 0..n {
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gv = g.data()[(ni * th + oy) * tw + ox];
                        dx[(ni * h + y0) * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        dx[(ni * h + y0) * w + x1] += gv * (1.0 - fy) * fx;
                        dx[(ni * h + y1) * w + x0] += gv * fy * (1.0 - fx);
                        dx[(ni * h + y1) * w + x1] += gv * fy * fx;
                    }
                }
            }
            sink.add(x, Tensor::from_vec(&[n, h, w], dx));
        }))
    }

    // ---- loss ------------------------------------------------------------------

    /// Masked multi-label binary cross-entropy over logits `[N, H, W]` against
    /// targets `y: [N, H, W]` in {0, 1} with a pixel mask `m: [H, W]` in {0, 1}:
    /// the per-element stable form `m * (softplus(x) - y * x)` summed and
    /// divided by the count of valid pixels (not pixels x classes). An all-zero
    /// mask yields loss 0 and bumps the zero-mask warning counter.
    pub fn masked_bce(&mut self, logits: NodeId, y: &Tensor, m: &Tensor) -> NodeId {
        let xv = self.val(logits);
        let (n, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(y.shape(), [n, h, w], "bce target shape");
        assert_eq!(m.shape(), [h, w], "bce mask shape");
        let mask_sum: f64 = m.data().iter().sum();
        if mask_sum == 0.0 {
            self.counters.zero_mask_warnings += 1;
            return self.push(Tensor::scalar(0.0), Box::new(move |_, _| {}));
        }
        let mut total = 0.0;
        for ni in 0..n {
            for p in 0..h * w {
                let mm = m.data()[p];
                if mm == 0.0 {
                    continue;
                }
                let x = xv.data()[ni * h * w + p];
                let yy = y.data()[ni * h * w + p];
                total += mm * (softplus_stable(x) - yy * x);
            }
        }
        let yc = y.clone();
        let mc = m.clone();
        let v = Tensor::scalar(total / mask_sum);
        self.push(v, Box::new(move |g, sink| {
            let s = g.item() / mask_sum;
            let mut dx = vec![0.0; n * h * w];
            for ni in 0..n {
                for p in 0..h * w {
                    let mm = mc.data()[p];
                    if mm == 0.0 {
                        continue;
                    }
                    let x = xv.data()[ni * h * w + p];
                    let yy = yc.data()[ni * h * w + p];
                    dx[ni * h * w + p] = s * mm * (sigmoid_stable(x) - yy);
                }
            }
            sink.add(logits, Tensor::from_vec(&[n, h, w], dx));
        }))
    }
}

/// Numerically stable logistic function.
pub fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus_stable(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `a [m, n] x b^T [k, n] -> [m, k]`.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let (k, nb) = (b.shape()[0], b.shape()[1]);
    assert_eq!(n, nb, "matmul_nt inner dims differ");
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let ra = &a.data()[i * n..(i + 1) * n];
        for j in 0..k {
            let rb = &b.data()[j * n..(j + 1) * n];
            out[i * k + j] = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::from_vec(&[m, k], out)
}

/// `a^T [m, k] x b [m, n] -> [k, n]`.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (mb, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(m, mb, "matmul_tn outer dims differ");
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for kk in 0..k {
            let x = a.data()[i * k + kk];
            if x == 0.0 {
                continue;
            }
            for j in 0..n {
                out[kk * n + j] += x * b.data()[i * n + j];
            }
        }
    }
    Tensor::from_vec(&[k, n], out)
}

/// Axis permutation kernel: output axis `i` takes input axis `perm[i]`.
fn permute_tensor(x: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = x.shape();
    assert_eq!(perm.len(), in_shape.len(), "permute rank mismatch");
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides_of(in_shape);
    let out_numel = x.numel();
    let mut out = vec![0.0; out_numel];
    let rank = perm.len();
    let mut coord = vec![0usize; rank];
    for (oi, slot) in out.iter_mut().enumerate() {
        // Decompose oi into output coordinates.
        let mut rem = oi;
        for (axis, &extent) in out_shape.iter().enumerate().rev() {
            coord[axis] = rem % extent;
            rem /= extent;
        }
        let mut in_off = 0;
        for (axis, &p) in perm.iter().enumerate() {
            in_off += coord[axis] * in_strides[p];
        }
        *slot = x.data()[in_off];
    }
    Tensor::from_vec(&out_shape, out).with_precision(x.precision())
}
