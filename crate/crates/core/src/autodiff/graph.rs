//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and backward is a single reverse sweep.

use super::tensor::{numel, Grads, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Similarity measures for [`Graph::pairwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairwise {
    Cosine,
    NegL2,
    Dot,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax { input: Var, axis: usize },
    Mean(Var),
    Sum(Var),
    Max { input: Var, argmax: usize },
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    Reverse { input: Var, axis: usize },
    Pairwise { a: Var, b: Var, kind: Pairwise },
    Pad2d(Var),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Smallest input value `log` accepts before clamping.
pub const LOG_CLAMP: f64 = 1e-12;

/// A computation graph for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    kink_margin: f64,
}

/// (outer, dim, inner) sizes around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            param: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shapes are valid")
    }

    /// Distance of the current evaluation point from the nearest
    /// non-differentiable point seen so far (relu at 0, ties in max, zero
    /// norms, plus anything registered with [`Graph::note_kink`]).
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    /// Registers a non-differentiable point that depends on node values,
    /// such as a ranking tie decided outside the graph.
    pub fn note_kink(&mut self, margin: f64) {
        self.kink_margin = self.kink_margin.min(margin);
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.constant(&t))
    }

    /// Loads a parameter as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (x, y) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let xv = x[i * k + p];
                if xv == 0.0 {
                    continue;
                }
                for (o, yv) in row.iter_mut().zip(&y[p * n..(p + 1) * n]) {
                    *o += xv * yv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Orders `(a, b)` so the second shape is a suffix of the first.
    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.ends_with(sb) {
            Ok((a, b))
        } else if sb.ends_with(sa) {
            Ok((b, a))
        } else {
            Err(Error::shape(op, format!("{sa:?} and {sb:?} do not broadcast")))
        }
    }

    /// Elementwise sum, broadcasting the shorter operand over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let out: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + y[i % y.len()]).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// Elementwise product, broadcasting like [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let out: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * y[i % y.len()]).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|v| v * factor).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, factor), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} on {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let d = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v)[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(shape, out, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape("slice", format!("[{start}, {start}+{len}) on axis {axis} of {s:?}")));
        }
        let (outer, d, inner) = split_axis(&s, axis);
        let x = self.value(input);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d * inner + start * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(input);
        Ok(self.push(shape, out, Op::Slice { input, axis, start }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(input).len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", format!("{:?} to {shape:?}", self.shape(input))));
        }
        let out = self.value(input).to_vec();
        let rg = self.rg(input);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(input), rg))
    }

    fn unary(&mut self, input: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(input).iter().map(|&v| f(v)).collect();
        let rg = self.rg(input);
        self.push(self.shape(input).to_vec(), out, op, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let margin = self.value(x).iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
        self.note_kink(margin);
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Natural log with inputs clamped below at [`LOG_CLAMP`].
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(LOG_CLAMP).ln(), Op::Log(x))
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("softmax", format!("axis {axis} on {s:?}")));
        }
        let (outer, d, inner) = split_axis(&s, axis);
        let x = self.value(input);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| o * d * inner + k * inner + i;
                let m = (0..d).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..d {
                    let e = (x[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..d {
                    out[idx(k)] /= z;
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(s, out, Op::Softmax { input, axis }, rg))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Vec::new(), vec![m], Op::Mean(x), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    /// Maximum over all elements, as a scalar. Ties go to the first index.
    pub fn max(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (mut argmax, mut best, mut second) = (0, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (i, &val) in v.iter().enumerate() {
            if val > best {
                second = best;
                best = val;
                argmax = i;
            } else if val > second {
                second = val;
            }
        }
        self.note_kink(best - second);
        let rg = self.rg(x);
        self.push(Vec::new(), vec![best], Op::Max { input: x, argmax }, rg)
    }

    /// Cross-correlation of `[N, C, H, W]` input with `[O, C, KH, KW]`
    /// kernels, zero padding `pad` on every side, optional `[O]` bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        let bad = || Error::shape("conv2d", format!("input {si:?}, kernel {sk:?}, stride {stride}, pad {pad}"));
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] || stride == 0 {
            return Err(bad());
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, kh, kw) = (sk[0], sk[2], sk[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(bad());
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {o} filters", self.shape(b))));
            }
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let x = self.value(input);
        let k = self.value(kernel);
        let mut out = vec![0.0; n * o * oh * ow];
        for ni in 0..n {
            for oi in 0..o {
                let plane = &mut out[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
                if let Some(b) = bias {
                    let bv = self.nodes[b.0].data[oi];
                    plane.iter_mut().for_each(|v| *v = bv);
                }
                for ci in 0..c {
                    let xplane = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for a in 0..kh {
                        for bcol in 0..kw {
                            let kv = k[((oi * c + ci) * kh + a) * kw + bcol];
                            for y in 0..oh {
                                let iy = (y * stride + a) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = &xplane[iy as usize * w..(iy as usize + 1) * w];
                                let orow = &mut plane[y * ow..(y + 1) * ow];
                                for (xo, ov) in orow.iter_mut().enumerate() {
                                    let ix = (xo * stride + bcol) as isize - pad as isize;
                                    if ix >= 0 && ix < w as isize {
                                        *ov += kv * xrow[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![n, o, oh, ow], out, Op::Conv2d { input, kernel, bias, stride, pad }, rg))
    }

    /// Per-window maxima over the last two axes of a `[N, C, H, W]` tensor.
    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || window == 0 || stride == 0 || s[2] < window || s[3] < window {
            return Err(Error::shape("maxpool2d", format!("{s:?} window {window} stride {stride}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let x = self.value(input);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let mut margin = f64::INFINITY;
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xo in 0..ow {
                    let (mut best, mut second, mut at) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0);
                    for a in 0..window {
                        for b in 0..window {
                            let idx = base + (y * stride + a) * w + xo * stride + b;
                            if x[idx] > best {
                                second = best;
                                best = x[idx];
                                at = idx;
                            } else if x[idx] > second {
                                second = x[idx];
                            }
                        }
                    }
                    if window > 1 {
                        margin = margin.min(best - second);
                    }
                    out.push(best);
                    argmax.push(at);
                }
            }
        }
        self.note_kink(margin);
        let rg = self.rg(input);
        Ok(self.push(vec![n, c, oh, ow], out, Op::MaxPool2d { input, argmax }, rg))
    }

    pub fn reverse(&mut self, input: Var, axis: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("reverse", format!("axis {axis} on {s:?}")));
        }
        let (outer, d, inner) = split_axis(&s, axis);
        let x = self.value(input);
        let mut out = Vec::with_capacity(x.len());
        for o in 0..outer {
            for k in (0..d).rev() {
                let base = (o * d + k) * inner;
                out.extend_from_slice(&x[base..base + inner]);
            }
        }
        let rg = self.rg(input);
        Ok(self.push(s, out, Op::Reverse { input, axis }, rg))
    }

    /// All-pairs similarity between the rows of `a` `[m, d]` and `b` `[n, d]`,
    /// giving `[m, n]`. Cosine with a zero-norm row is 0.
    pub fn pairwise(&mut self, a: Var, b: Var, kind: Pairwise) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("pairwise", format!("{sa:?} vs {sb:?}")));
        }
        let (m, n, d) = (sa[0], sb[0], sa[1]);
        let (x, y) = (self.value(a), self.value(b));
        let row = |t: &[f64], i: usize| -> Vec<f64> { t[i * d..(i + 1) * d].to_vec() };
        let norms = |t: &[f64], r: usize| -> Vec<f64> {
            (0..r).map(|i| t[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
        };
        let (na, nb) = (norms(x, m), norms(y, n));
        let mut out = vec![0.0; m * n];
        let mut margin = f64::INFINITY;
        for i in 0..m {
            let xi = row(x, i);
            for j in 0..n {
                let yj = &y[j * d..(j + 1) * d];
                out[i * n + j] = match kind {
                    Pairwise::Dot => dot(&xi, yj),
                    Pairwise::Cosine => {
                        margin = margin.min(na[i]).min(nb[j]);
                        if na[i] == 0.0 || nb[j] == 0.0 {
                            0.0
                        } else {
                            dot(&xi, yj) / (na[i] * nb[j])
                        }
                    }
                    Pairwise::NegL2 => {
                        let dist = xi.iter().zip(yj).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
                        margin = margin.min(dist);
                        -dist
                    }
                };
            }
        }
        if kind != Pairwise::Dot {
            self.note_kink(margin);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::Pairwise { a, b, kind }, rg))
    }

    /// Zero-pads the last two axes of `[L, H, W]` up to `[L, height, width]`,
    /// keeping the input in the top-left corner.
    pub fn pad2d(&mut self, input: Var, height: usize, width: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 || s[1] > height || s[2] > width {
            return Err(Error::shape("pad2d", format!("{s:?} into {height}x{width}")));
        }
        let (l, h, w) = (s[0], s[1], s[2]);
        let x = self.value(input);
        let mut out = vec![0.0; l * height * width];
        for c in 0..l {
            for y in 0..h {
                let src = &x[(c * h + y) * w..(c * h + y + 1) * w];
                out[(c * height + y) * width..(c * height + y) * width + w].copy_from_slice(src);
            }
        }
        let rg = self.rg(input);
        Ok(self.push(vec![l, height, width], out, Op::Pad2d(input), rg))
    }

    /// Gradients of scalar `loss` with respect to every parameter leaf.
    pub fn gradients(&self, loss: Var, n_params: usize) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Grads::empty(n_params);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Some(p) = node.param {
                if let Some(slot) = out.0.get_mut(p.0) {
                    add_into(slot, &g);
                }
            }
            self.backprop(node, &g, &mut grads);
        }
        Ok(out)
    }

    /// Accumulates dloss/dparam into the store's gradient buffers.
    /// Parameters the loss does not depend on receive zero gradients.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss, store.len())?;
        store.accumulate(&grads);
        Ok(())
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].data.as_slice();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (x, y) = (val(*a), val(*b));
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] = dot(&g[i * n..(i + 1) * n], &y[p * n..(p + 1) * n]);
                        }
                    }
                    add_into(&mut grads[a.0], &ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let xv = x[i * k + p];
                            if xv == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *o += xv * gv;
                            }
                        }
                    }
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if wants(*b) {
                    let nb = val(*b).len();
                    let mut gb = vec![0.0; nb];
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % nb] += gv;
                    }
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let nb = y.len();
                if wants(*a) {
                    let ga: Vec<f64> = g.iter().enumerate().map(|(i, gv)| gv * y[i % nb]).collect();
                    add_into(&mut grads[a.0], &ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; nb];
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % nb] += gv * x[i];
                    }
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::Scale(a, f) => {
                let ga: Vec<f64> = g.iter().map(|v| v * f).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let d = self.nodes[v.0].shape[*axis];
                    if wants(*v) {
                        let mut gv = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[base..base + d * inner]);
                        }
                        add_into(&mut grads[v.0], &gv);
                    }
                    offset += d;
                }
            }
            Op::Slice { input, axis, start } => {
                let s = &self.nodes[input.0].shape;
                let (outer, d, inner) = split_axis(s, *axis);
                let len = node.shape[*axis];
                let mut gi = vec![0.0; outer * d * inner];
                for o in 0..outer {
                    let base = o * d * inner + start * inner;
                    gi[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                add_into(&mut grads[input.0], &gi);
            }
            Op::Reshape(a) => {
                add_into(&mut grads[a.0], g);
            }
            Op::Pad2d(a) => {
                let s = &self.nodes[a.0].shape;
                let (l, h, w) = (s[0], s[1], s[2]);
                let (height, width) = (node.shape[1], node.shape[2]);
                let mut gi = Vec::with_capacity(l * h * w);
                for c in 0..l {
                    for y in 0..h {
                        let base = (c * height + y) * width;
                        gi.extend_from_slice(&g[base..base + w]);
                    }
                }
                add_into(&mut grads[a.0], &gi);
            }
            Op::Tanh(a) => {
                let gi: Vec<f64> = g.iter().zip(&node.data).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                add_into(&mut grads[a.0], &gi);
            }
            Op::Sigmoid(a) => {
                let gi: Vec<f64> = g.iter().zip(&node.data).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                add_into(&mut grads[a.0], &gi);
            }
            Op::Relu(a) => {
                let gi: Vec<f64> = g
                    .iter()
                    .zip(val(*a))
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                add_into(&mut grads[a.0], &gi);
            }
            Op::Exp(a) => {
                let gi: Vec<f64> = g.iter().zip(&node.data).map(|(gv, y)| gv * y).collect();
                add_into(&mut grads[a.0], &gi);
            }
            Op::Log(a) => {
                let gi: Vec<f64> = g
                    .iter()
                    .zip(val(*a))
                    .map(|(gv, x)| if *x > LOG_CLAMP { gv / x } else { 0.0 })
                    .collect();
                add_into(&mut grads[a.0], &gi);
            }
            Op::Softmax { input, axis } => {
                let (outer, d, inner) = split_axis(&node.shape, *axis);
                let y = &node.data;
                let mut gi = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| o * d * inner + k * inner + i;
                        let s: f64 = (0..d).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..d {
                            gi[idx(k)] = y[idx(k)] * (g[idx(k)] - s);
                        }
                    }
                }
                add_into(&mut grads[input.0], &gi);
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                add_into(&mut grads[a.0], &vec![g[0] / n as f64; n]);
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                add_into(&mut grads[a.0], &vec![g[0]; n]);
            }
            Op::Max { input, argmax } => {
                let mut gi = vec![0.0; val(*input).len()];
                gi[*argmax] = g[0];
                add_into(&mut grads[input.0], &gi);
            }
            Op::Conv2d { input, kernel, bias, stride, pad } => {
                self.conv2d_backward(node, g, *input, *kernel, *bias, *stride, *pad, grads);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut gi = vec![0.0; val(*input).len()];
                for (gv, &at) in g.iter().zip(argmax) {
                    gi[at] += gv;
                }
                add_into(&mut grads[input.0], &gi);
            }
            Op::Reverse { input, axis } => {
                let (outer, d, inner) = split_axis(&node.shape, *axis);
                let mut gi = Vec::with_capacity(g.len());
                for o in 0..outer {
                    for k in (0..d).rev() {
                        let base = (o * d + k) * inner;
                        gi.extend_from_slice(&g[base..base + inner]);
                    }
                }
                add_into(&mut grads[input.0], &gi);
            }
            Op::Pairwise { a, b, kind } => self.pairwise_backward(node, g, *a, *b, *kind, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        node: &Node,
        g: &[f64],
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let si = &self.nodes[input.0].shape;
        let sk = &self.nodes[kernel.0].shape;
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, kh, kw) = (sk[0], sk[2], sk[3]);
        let (oh, ow) = (node.shape[2], node.shape[3]);
        let x = &self.nodes[input.0].data;
        let k = &self.nodes[kernel.0].data;
        let want_x = self.nodes[input.0].requires_grad;
        let want_k = self.nodes[kernel.0].requires_grad;
        let mut gx = vec![0.0; if want_x { x.len() } else { 0 }];
        let mut gk = vec![0.0; if want_k { k.len() } else { 0 }];
        for ni in 0..n {
            for oi in 0..o {
                let gplane = &g[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
                for ci in 0..c {
                    let xbase = (ni * c + ci) * h * w;
                    for a in 0..kh {
                        for b in 0..kw {
                            let kidx = ((oi * c + ci) * kh + a) * kw + b;
                            let kv = k[kidx];
                            let mut acc = 0.0;
                            for y in 0..oh {
                                let iy = (y * stride + a) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = xbase + iy as usize * w;
                                for xo in 0..ow {
                                    let ix = (xo * stride + b) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let gv = gplane[y * ow + xo];
                                    if want_x {
                                        gx[xrow + ix as usize] += kv * gv;
                                    }
                                    acc += x[xrow + ix as usize] * gv;
                                }
                            }
                            if want_k {
                                gk[kidx] += acc;
                            }
                        }
                    }
                }
            }
        }
        if want_x {
            add_into(&mut grads[input.0], &gx);
        }
        if want_k {
            add_into(&mut grads[kernel.0], &gk);
        }
        if let Some(bv) = bias {
            if self.nodes[bv.0].requires_grad {
                let mut gb = vec![0.0; o];
                for ni in 0..n {
                    for (oi, slot) in gb.iter_mut().enumerate() {
                        *slot += g[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow].iter().sum::<f64>();
                    }
                }
                add_into(&mut grads[bv.0], &gb);
            }
        }
    }

    fn pairwise_backward(&self, node: &Node, g: &[f64], a: Var, b: Var, kind: Pairwise, grads: &mut [Option<Vec<f64>>]) {
        let (x, y) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let (m, n) = (node.shape[0], node.shape[1]);
        let d = self.nodes[a.0].shape[1];
        let mut ga = vec![0.0; m * d];
        let mut gb = vec![0.0; n * d];
        let norm = |t: &[f64], i: usize| t[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
        let na: Vec<f64> = (0..m).map(|i| norm(x, i)).collect();
        let nb: Vec<f64> = (0..n).map(|j| norm(y, j)).collect();
        for i in 0..m {
            let xi = &x[i * d..(i + 1) * d];
            for j in 0..n {
                let gv = g[i * n + j];
                if gv == 0.0 {
                    continue;
                }
                let yj = &y[j * d..(j + 1) * d];
                let out = node.data[i * n + j];
                match kind {
                    Pairwise::Dot => {
                        for t in 0..d {
                            ga[i * d + t] += gv * yj[t];
                            gb[j * d + t] += gv * xi[t];
                        }
                    }
                    Pairwise::Cosine => {
                        if na[i] == 0.0 || nb[j] == 0.0 {
                            continue;
                        }
                        let inv = 1.0 / (na[i] * nb[j]);
                        for t in 0..d {
                            ga[i * d + t] += gv * (yj[t] * inv - out * xi[t] / (na[i] * na[i]));
                            gb[j * d + t] += gv * (xi[t] * inv - out * yj[t] / (nb[j] * nb[j]));
                        }
                    }
                    Pairwise::NegL2 => {
                        let dist = -out;
                        if dist == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            let diff = (xi[t] - yj[t]) / dist;
                            ga[i * d + t] -= gv * diff;
                            gb[j * d + t] += gv * diff;
                        }
                    }
                }
            }
        }
        if self.nodes[a.0].requires_grad {
            add_into(&mut grads[a.0], &ga);
        }
        if self.nodes[b.0].requires_grad {
            add_into(&mut grads[b.0], &gb);
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
