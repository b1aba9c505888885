use std::borrow::Cow;

use super::{check_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Transpose(Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    L1(Var, Var),
    NormalizeLast {
        x: Var,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of a computation.
///
/// Leaves borrow their data from the caller's tensors for the tape's lifetime.
/// Nodes are only appended, so every node's inputs precede it and a single
/// reverse sweep visits each operation exactly once.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("shapes are non-empty")
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `c = beta * c + op(a) * op(b)` with row-major operands; `op` optionally transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // strides of op(a) as an m×k matrix, op(b) as k×n
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides describe
    // matrices lying entirely inside those slices.
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

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [f64]>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a tensor as a leaf. Gradients are tracked iff it requires them.
    pub fn leaf(&mut self, tensor: &'a Tensor) -> Var {
        self.push(
            Cow::Borrowed(tensor.data()),
            tensor.shape().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Records an owned leaf that may optionally track gradients.
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        Ok(self.push(Cow::Owned(data), shape, Op::Leaf, requires_grad))
    }

    /// An owned constant leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        self.input(shape, data, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("tape shapes are valid")
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        match self.value(v) {
            [x] => Ok(*x),
            other => Err(Error::Contract(format!(
                "expected a scalar, found {} elements",
                other.len()
            ))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn as_matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Dimension(format!("{what}: expected a matrix, found shape {s:?}"))),
        }
    }

    // ---- forward ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (r, k, c) = match (sa.as_slice(), sb.as_slice()) {
            (&[r, k1], &[k2, c]) if k1 == k2 => (r, k1, c),
            _ => {
                return Err(Error::Dimension(format!(
                    "matmul: cannot multiply {sa:?} by {sb:?}"
                )))
            }
        };
        let mut out = vec![0.0; r * c];
        gemm(r, k, c, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), vec![r, c], Op::MatMul(a, b), needs))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Cow::Owned(out), shape, Op::Scale(a, s), needs)
    }

    /// Adds a vector along the last axis of `x` (row-wise broadcast).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = last_dim(self.shape(x));
        if self.shape(bias) != [c] {
            return Err(Error::Dimension(format!(
                "add_bias: bias {:?} does not broadcast over {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Cow::Owned(out), shape, Op::AddBias(x, bias), needs))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Cow::Owned(out), shape, Op::Gelu(x), needs)
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.value(x);
        let mut out = vec![0.0; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xs[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (xs[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            needs,
        ))
    }

    /// Layer normalization over the last axis followed by the affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm: gamma {:?} / beta {:?} do not match last axis of {:?}",
                self.shape(gamma),
                self.shape(beta),
                self.shape(x)
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("layer_norm: eps must be positive, got {eps}")));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
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
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.as_matrix(x, "transpose")?;
        let xs = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xs[i * c + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Cow::Owned(out), vec![c, r], Op::Transpose(x), needs))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = last_dim(&shape);
        if len == 0 || start + len > c {
            return Err(Error::Dimension(format!(
                "slice_last: range {start}..{} out of bounds for {shape:?}",
                start + len
            )));
        }
        let out: Vec<f64> = self
            .value(x)
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let needs = self.needs(x);
        Ok(self.push(Cow::Owned(out), out_shape, Op::SliceLast { x, start }, needs))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat_last: no inputs".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Dimension(format!(
                    "concat_last: leading axes {:?} and {:?} differ",
                    lead,
                    &s[..s.len() - 1]
                )));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| last_dim(self.shape(p))).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Cow::Owned(out), shape, Op::ConcatLast(parts.to_vec()), needs))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.as_matrix(x, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::Dimension(format!(
                "slice_rows: range {start}..{} out of bounds for {r} rows",
                start + len
            )));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let needs = self.needs(x);
        Ok(self.push(Cow::Owned(out), vec![len, c], Op::SliceRows { x, start }, needs))
    }

    /// Stacks vectors `[d]` into `[n × d]`, or concatenates matrices `[rᵢ × d]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat_rows: no inputs".into()))?;
        let width = last_dim(self.shape(*first));
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            match *s {
                [d] if d == width => rows += 1,
                [r, d] if d == width => rows += r,
                _ => {
                    return Err(Error::Dimension(format!(
                        "concat_rows: part {s:?} does not have width {width}"
                    )))
                }
            }
        }
        let mut out = Vec::with_capacity(rows * width);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Cow::Owned(out), vec![rows, width], Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Mean over the rows of a matrix: `[k × d] → [d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.as_matrix(x, "mean_rows")?;
        let xs = self.value(x);
        let mut out = vec![0.0; c];
        for row in xs.chunks_exact(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let needs = self.needs(x);
        Ok(self.push(Cow::Owned(out), vec![c], Op::MeanRows(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} cannot become {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Cow::Owned(out), shape, Op::Reshape(x), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum::<f64>();
        let needs = self.needs(x);
        self.push(Cow::Owned(vec![s]), vec![1], Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let needs = self.needs(x);
        self.push(Cow::Owned(vec![m]), vec![1], Op::Mean(x), needs)
    }

    /// Mean absolute difference. The subgradient at exact ties is 0.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "l1_loss")?;
        let n = self.value(pred).len() as f64;
        let s = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Cow::Owned(vec![s / n]), vec![1], Op::L1(pred, target), needs))
    }

    /// Scales each slice along the last axis to unit Euclidean norm.
    pub fn normalize_last(&mut self, x: Var) -> Var {
        let c = last_dim(self.shape(x));
        let xs = self.value(x);
        let mut norms = Vec::with_capacity(xs.len() / c);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks_exact(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Cow::Owned(out), shape, Op::NormalizeLast { x, norms }, needs)
    }

    // ---- reverse sweep ----

    /// Propagates adjoints from a scalar `loss` back to every node.
    ///
    /// The returned [`Gradients`] are independent of the tape; calling this
    /// twice yields two equal, separate gradient sets.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, found shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            self.propagate(node, g, lower);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.needs(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (r, k) = (self.shape(a)[0], self.shape(a)[1]);
                let c = self.shape(b)[1];
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.slot(grads, a) {
                    gemm(r, c, k, g, false, bv, true, ga, 1.0);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gemm(k, r, c, av, true, g, false, gb, 1.0);
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.slot(grads, a) {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            &Op::AddBias(x, bias) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                let c = self.value(bias).len();
                if let Some(gb) = self.slot(grads, bias) {
                    for row in g.chunks_exact(c) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            &Op::Gelu(x) => {
                let xs = self.value(x);
                if let Some(gx) = self.slot(grads, x) {
                    for ((o, gi), &v) in gx.iter_mut().zip(g).zip(xs) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *o += gi * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                }
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = &node.value;
                if let Some(gx) = self.slot(grads, x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).len();
                let gm = self.value(*gamma);
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for grow in g.chunks_exact(d) {
                        gb.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dh = vec![0.0; d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dh[j] = grow[j] * gm[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h =
                            dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rs * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                if let Some(gx) = self.slot(grads, x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            &Op::SliceLast { x, start } => {
                let c = last_dim(self.shape(x));
                let len = last_dim(&node.shape);
                if let Some(gx) = self.slot(grads, x) {
                    for (row, grow) in gx.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                        row[start..start + len]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let total = last_dim(&node.shape);
                let mut offset = 0;
                for &p in parts {
                    let w = last_dim(self.shape(p));
                    if let Some(gp) = self.slot(grads, p) {
                        for (row, grow) in gp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            row.iter_mut()
                                .zip(&grow[offset..offset + w])
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += w;
                }
            }
            &Op::SliceRows { x, start } => {
                let c = node.shape[1];
                if let Some(gx) = self.slot(grads, x) {
                    gx[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(a, b)| *a += b);
                    }
                    offset += n;
                }
            }
            &Op::MeanRows(x) => {
                let r = self.shape(x)[0] as f64;
                let c = g.len();
                if let Some(gx) = self.slot(grads, x) {
                    for row in gx.chunks_exact_mut(c) {
                        row.iter_mut().zip(g).for_each(|(a, b)| *a += b / r);
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            &Op::Mean(x) => {
                let n = self.value(x).len() as f64;
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().for_each(|a| *a += g[0] / n);
                }
            }
            &Op::L1(a, b) => {
                let n = self.value(a).len() as f64;
                let (av, bv) = (self.value(a), self.value(b));
                let scale = g[0] / n;
                if let Some(ga) = self.slot(grads, a) {
                    for ((o, x), y) in ga.iter_mut().zip(av).zip(bv) {
                        *o += scale * sign(x - y);
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for ((o, x), y) in gb.iter_mut().zip(av).zip(bv) {
                        *o -= scale * sign(x - y);
                    }
                }
            }
            Op::NormalizeLast { x, norms } => {
                let c = last_dim(&node.shape);
                let y = &node.value;
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                }
            }
        }
    }
}
