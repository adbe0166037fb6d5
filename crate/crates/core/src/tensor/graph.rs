use super::{macs, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberately wrong adjoints, used to prove that gradient checking catches
/// broken backward rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    GeluAdjoint,
    MatmulAdjoint,
}

pub const BCE_CLAMP: f64 = 1e-7;

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Hadamard { a: Var, b: Var, broadcast: bool },
    Scale { a: Var, s: f64 },
    Gelu { a: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Concat { parts: Vec<Var>, lens: Vec<usize>, outer: usize, inner: usize },
    Slice { a: Var, outer: usize, src_len: usize, start: usize, len: usize, inner: usize },
    Reshape { a: Var },
    Upsample2x { a: Var, h: usize, w: usize, c: usize },
    UpsampleBilinear2x { a: Var, h: usize, w: usize, c: usize },
    Bce { p: Var, target: Vec<f64> },
    Sum { a: Var },
    Mean { a: Var },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only computation tape. Node order is topological order; backward
/// walks it in reverse exactly once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
    fault: Option<Fault>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Source taps for 2x bilinear upsampling (half-pixel centers, edge clamp).
fn bilinear_taps(j: usize, n: usize) -> [(usize, f64); 2] {
    let i = j / 2;
    if j.is_multiple_of(2) {
        if i == 0 {
            [(0, 1.0), (0, 0.0)]
        } else {
            [(i - 1, 0.25), (i, 0.75)]
        }
    } else if i + 1 >= n {
        [(i, 1.0), (i, 0.0)]
    } else {
        [(i, 0.75), (i + 1, 0.25)]
    }
}

/// `c[m×n] (+)= a · b` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers size every buffer so that all strided accesses for the
    // given (m, k, n) stay in bounds; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose backward pass uses a corrupted adjoint for one op kind.
    pub fn with_fault(fault: Fault) -> Self {
        Graph {
            fault: Some(fault),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; gradients flow to it iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].requires_grad = false;
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node invariant")
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Config(format!("{op} expects a 2-D tensor, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        macs::add((m * k * n) as u64);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "transpose")?;
        let src = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a, rows, cols }, &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a length-`n` vector to every row of a `[.., n]` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap();
        if self.shape(row) != [n] {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow { a, row }, &[a, row]))
    }

    /// Elementwise product. `b` may match `a` exactly or replace its last
    /// axis by a singleton, in which case it scales each row.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let broadcast = if sa == sb {
            false
        } else if sa.len() == sb.len()
            && sb.last() == Some(&1)
            && sa[..sa.len() - 1] == sb[..sb.len() - 1]
        {
            true
        } else {
            return Err(Error::shape("hadamard", sa, sb));
        };
        let out = if broadcast {
            let d = *sa.last().unwrap();
            self.value(a)
                .chunks(d)
                .zip(self.value(b))
                .flat_map(|(row, s)| row.iter().map(move |x| x * s))
                .collect()
        } else {
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect()
        };
        Ok(self.push(sa.to_vec(), out, Op::Hadamard { a, b, broadcast }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, s }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Gelu { a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Relu { a }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Sigmoid { a }, &[a])
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Config(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax { a, outer, len, inner }, &[a]))
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let src = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Config(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let chunk = len * inner;
                out.extend_from_slice(&self.value(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat { parts: parts.to_vec(), lens, outer, inner };
        Ok(self.push(shape, out, op, parts))
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Config(format!(
                "slice {start}..{} on axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, src_len, inner) = split_axis(&shape, axis);
        let src = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * src_len * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let op = Op::Slice { a, outer, src_len, start, len, inner };
        Ok(self.push(new_shape, out, op, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a }, &[a]))
    }

    fn dims3(&self, a: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape(a) {
            [h, w, c] => Ok((*h, *w, *c)),
            s => Err(Error::Config(format!("{op} expects h×w×c, got {s:?}"))),
        }
    }

    /// Nearest-neighbor 2x upsampling of an `h×w×c` grid.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let (h, w, c) = self.dims3(a, "upsample2x")?;
        let src = self.value(a);
        let mut out = vec![0.0; 4 * h * w * c];
        for y in 0..2 * h {
            for x in 0..2 * w {
                let s = ((y / 2) * w + x / 2) * c;
                let d = (y * 2 * w + x) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        Ok(self.push(vec![2 * h, 2 * w, c], out, Op::Upsample2x { a, h, w, c }, &[a]))
    }

    /// Bilinear 2x upsampling of an `h×w×c` grid (half-pixel centers, edges
    /// clamped). Each input cell contributes a total weight of 4.
    pub fn upsample2x_bilinear(&mut self, a: Var) -> Result<Var> {
        let (h, w, c) = self.dims3(a, "upsample2x_bilinear")?;
        let src = self.value(a);
        let mut out = vec![0.0; 4 * h * w * c];
        for y in 0..2 * h {
            let ty = bilinear_taps(y, h);
            for x in 0..2 * w {
                let tx = bilinear_taps(x, w);
                let d = (y * 2 * w + x) * c;
                for &(sy, wy) in &ty {
                    for &(sx, wx) in &tx {
                        let wt = wy * wx;
                        if wt == 0.0 {
                            continue;
                        }
                        let s = (sy * w + sx) * c;
                        for ch in 0..c {
                            out[d + ch] += wt * src[s + ch];
                        }
                    }
                }
            }
        }
        let op = Op::UpsampleBilinear2x { a, h, w, c };
        Ok(self.push(vec![2 * h, 2 * w, c], out, op, &[a]))
    }

    /// Mean binary cross-entropy of probabilities `p` against a fixed
    /// 0/1 target. Probabilities are clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, p: Var, target: &Tensor) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(Error::shape("bce", self.shape(p), target.shape()));
        }
        let n = target.len() as f64;
        let loss = self
            .value(p)
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| {
                let c = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * c.ln() + (1.0 - y) * (1.0 - c).ln())
            })
            .sum::<f64>()
            / n;
        let op = Op::Bce { p, target: target.data().to_vec() };
        Ok(self.push(vec![1], vec![loss], op, &[p]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![s], Op::Mean { a }, &[a])
    }

    /// Reverse pass from a scalar loss. Populates [`Graph::grad`] for every
    /// leaf that requires a gradient, then frees intermediate activations.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n_nodes).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) {
                if node.requires_grad && node.grad.is_none() {
                    node.grad = Some(vec![0.0; node.value.len()]);
                }
            } else {
                node.value = Vec::new();
                node.op = Op::Leaf;
            }
        }
        self.consumed = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.as_slice();
        // Lazily allocated accumulation buffer for an input.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut [f64] {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let corrupt = self.fault == Some(Fault::MatmulAdjoint);
                if wants(a) {
                    let da = slot(grads, nodes, a);
                    // dA = G · Bᵀ
                    gemm(m, n, k, g, (n as isize, 1), val(b), (1, n as isize), 1.0, da);
                    if corrupt {
                        da.iter_mut().for_each(|x| *x *= 1.1);
                    }
                }
                if wants(b) {
                    let db = slot(grads, nodes, b);
                    // dB = Aᵀ · G
                    gemm(k, m, n, val(a), (1, k as isize), g, (n as isize, 1), 1.0, db);
                }
            }
            &Op::Transpose { a, rows, cols } => {
                let da = slot(grads, nodes, a);
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] += g[c * rows + r];
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if wants(v) {
                        slot(grads, nodes, v).iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::AddRow { a, row } => {
                if wants(a) {
                    slot(grads, nodes, a).iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if wants(row) {
                    let dr = slot(grads, nodes, row);
                    let n = dr.len();
                    for chunk in g.chunks(n) {
                        dr.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::Hadamard { a, b, broadcast } => {
                let (va, vb) = (val(a), val(b));
                if broadcast {
                    let d = va.len() / vb.len();
                    if wants(a) {
                        let da = slot(grads, nodes, a);
                        for (idx, x) in da.iter_mut().enumerate() {
                            *x += g[idx] * vb[idx / d];
                        }
                    }
                    if wants(b) {
                        let db = slot(grads, nodes, b);
                        for (r, x) in db.iter_mut().enumerate() {
                            *x += (0..d).map(|j| g[r * d + j] * va[r * d + j]).sum::<f64>();
                        }
                    }
                } else {
                    if wants(a) {
                        let da = slot(grads, nodes, a);
                        for (idx, x) in da.iter_mut().enumerate() {
                            *x += g[idx] * vb[idx];
                        }
                    }
                    if wants(b) {
                        let db = slot(grads, nodes, b);
                        for (idx, x) in db.iter_mut().enumerate() {
                            *x += g[idx] * va[idx];
                        }
                    }
                }
            }
            &Op::Scale { a, s } => {
                slot(grads, nodes, a).iter_mut().zip(g).for_each(|(d, g)| *d += g * s);
            }
            &Op::Gelu { a } => {
                let factor = if self.fault == Some(Fault::GeluAdjoint) { 1.5 } else { 1.0 };
                let x = val(a);
                let da = slot(grads, nodes, a);
                for idx in 0..da.len() {
                    da[idx] += factor * g[idx] * gelu_grad(x[idx]);
                }
            }
            &Op::Relu { a } => {
                let x = val(a);
                let da = slot(grads, nodes, a);
                for idx in 0..da.len() {
                    if x[idx] > 0.0 {
                        da[idx] += g[idx];
                    }
                }
            }
            &Op::Sigmoid { a } => {
                let y = &nodes[i].value;
                let da = slot(grads, nodes, a);
                for idx in 0..da.len() {
                    da[idx] += g[idx] * y[idx] * (1.0 - y[idx]);
                }
            }
            &Op::Softmax { a, outer, len, inner } => {
                let y = &nodes[i].value;
                let da = slot(grads, nodes, a);
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + ii;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            da[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = val(gain).len();
                if wants(x) {
                    let gv = val(gain);
                    let dx = slot(grads, nodes, x);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let dh: Vec<f64> = g[row.clone()].iter().zip(gv).map(|(g, w)| g * w).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(&xhat[row.clone()]).map(|(a, b)| a * b).sum::<f64>()
                            / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += rs * (dh[j] - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                }
                if wants(gain) {
                    let dg = slot(grads, nodes, gain);
                    for (idx, (gv, h)) in g.iter().zip(xhat).enumerate() {
                        dg[idx % d] += gv * h;
                    }
                }
                if wants(bias) {
                    let db = slot(grads, nodes, bias);
                    for (idx, gv) in g.iter().enumerate() {
                        db[idx % d] += gv;
                    }
                }
            }
            Op::Concat { parts, lens, outer, inner } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&p, &len) in parts.iter().zip(lens) {
                    if wants(p) {
                        let dp = slot(grads, nodes, p);
                        let chunk = len * inner;
                        for o in 0..*outer {
                            let src = o * total * inner + offset * inner;
                            dp[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(&g[src..src + chunk])
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                    offset += len;
                }
            }
            &Op::Slice { a, outer, src_len, start, len, inner } => {
                let da = slot(grads, nodes, a);
                let chunk = len * inner;
                for o in 0..outer {
                    let dst = o * src_len * inner + start * inner;
                    da[dst..dst + chunk]
                        .iter_mut()
                        .zip(&g[o * chunk..(o + 1) * chunk])
                        .for_each(|(d, g)| *d += g);
                }
            }
            &Op::Reshape { a } => {
                slot(grads, nodes, a).iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            &Op::Upsample2x { a, h, w, c } => {
                let da = slot(grads, nodes, a);
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        let s = ((y / 2) * w + x / 2) * c;
                        let d = (y * 2 * w + x) * c;
                        for ch in 0..c {
                            da[s + ch] += g[d + ch];
                        }
                    }
                }
            }
            &Op::UpsampleBilinear2x { a, h, w, c } => {
                let da = slot(grads, nodes, a);
                for y in 0..2 * h {
                    let ty = bilinear_taps(y, h);
                    for x in 0..2 * w {
                        let tx = bilinear_taps(x, w);
                        let d = (y * 2 * w + x) * c;
                        for &(sy, wy) in &ty {
                            for &(sx, wx) in &tx {
                                let wt = wy * wx;
                                if wt == 0.0 {
                                    continue;
                                }
                                let s = (sy * w + sx) * c;
                                for ch in 0..c {
                                    da[s + ch] += wt * g[d + ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::Bce { p, target } => {
                let p = *p;
                let n = target.len() as f64;
                let pv = val(p);
                let dp = slot(grads, nodes, p);
                for idx in 0..dp.len() {
                    let x = pv[idx];
                    if (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&x) {
                        let y = target[idx];
                        dp[idx] += g[0] * (-(y / x) + (1.0 - y) / (1.0 - x)) / n;
                    }
                }
            }
            &Op::Sum { a } => {
                slot(grads, nodes, a).iter_mut().for_each(|d| *d += g[0]);
            }
            &Op::Mean { a } => {
                let da = slot(grads, nodes, a);
                let n = da.len() as f64;
                da.iter_mut().for_each(|d| *d += g[0] / n);
            }
        }
    }
}
