use super::{Real, Tensor};
use crate::{Error, Result};

/// Lower clamp applied to predicted probabilities before taking logs.
pub const BCE_EPSILON: f64 = 1e-7;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation<T> {
    Sigmoid,
    Tanh,
    Relu,
    /// `x` for `x >= 0`, `alpha * x` otherwise.
    Prelu(T),
    /// Normalized log-probabilities along `axis`.
    LogSoftmax { axis: usize },
}

/// Deliberate corruption of one backward rule. Exists so the gradient
/// checker can be shown to catch a wrong derivative.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    SigmoidBackward,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Prelu(Var, T),
    LogSoftmax {
        x: Var,
        outer: usize,
        dim: usize,
        inner: usize,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Blend {
        a: Var,
        b: Var,
        mask: Vec<T>,
    },
    MaskMul {
        x: Var,
        mask: Vec<T>,
    },
    Nll {
        x: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    Bce {
        p: Var,
        labels: Vec<T>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of differentiable operations for one forward pass.
///
/// Values are computed eagerly when an operation is appended. A tape is
/// meant to live for a single step: build it, call [`Tape::backward`] once,
/// read gradients, drop it.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    fault: Option<Fault>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [r, c] => (*r, *c),
        [n] => (1, *n),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a tensor as a leaf. Gradients flow to it iff it has
    /// `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension {
                op: "constant",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Result<Tensor<T>> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), false, self.value(b), false, T::zero(), &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// Adds a length-`n` bias to every row of a `b x n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = dims2(self.shape(x));
        if self.value(bias).len() != cols || self.shape(x).len() != 2 {
            return Err(Error::Dimension {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for r in 0..rows {
            out[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(b)
                .for_each(|(o, &bb)| *o += bb);
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(vec![rows, cols], out, Op::AddBias(x, bias), ng))
    }

    /// `x W + bias`.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, bias)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let ng = self.ng(a);
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    pub fn activation(&mut self, x: Var, kind: Activation<T>) -> Result<Var> {
        let ng = self.ng(x);
        let shape = self.shape(x).to_vec();
        let v = self.value(x);
        Ok(match kind {
            Activation::Sigmoid => {
                let out = v.iter().map(|&z| sigmoid(z)).collect();
                self.push(shape, out, Op::Sigmoid(x), ng)
            }
            Activation::Tanh => {
                let out = v.iter().map(|z| z.tanh()).collect();
                self.push(shape, out, Op::Tanh(x), ng)
            }
            Activation::Relu => {
                let out = v.iter().map(|&z| if z > T::zero() { z } else { T::zero() }).collect();
                self.push(shape, out, Op::Relu(x), ng)
            }
            Activation::Prelu(alpha) => {
                let out = v.iter().map(|&z| if z >= T::zero() { z } else { alpha * z }).collect();
                self.push(shape, out, Op::Prelu(x, alpha), ng)
            }
            Activation::LogSoftmax { axis } => {
                if axis >= shape.len() {
                    return Err(Error::Index {
                        what: "log_softmax axis",
                        index: axis,
                        size: shape.len(),
                    });
                }
                let outer: usize = shape[..axis].iter().product();
                let dim = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut out = vec![T::zero(); v.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |d: usize| o * dim * inner + d * inner + i;
                        let max = (0..dim).map(|d| v[at(d)]).fold(T::neg_infinity(), T::max);
                        let lse = (0..dim).map(|d| (v[at(d)] - max).exp()).sum::<T>().ln() + max;
                        for d in 0..dim {
                            out[at(d)] = v[at(d)] - lse;
                        }
                    }
                }
                self.push(shape, out, Op::LogSoftmax { x, outer, dim, inner }, ng)
            }
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid).expect("elementwise")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh).expect("elementwise")
    }

    /// Embedding lookup: row `indices[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = dims2(self.shape(table));
        let v = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &ix in indices {
            if ix >= rows {
                return Err(Error::Index {
                    what: "embedding table",
                    index: ix,
                    size: rows,
                });
            }
            out.extend_from_slice(&v[ix * cols..(ix + 1) * cols]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            vec![indices.len(), cols],
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = dims2(self.shape(parts[0])).0;
        let widths: Vec<usize> = parts.iter().map(|&p| dims2(self.shape(p)).1).collect();
        for &p in parts {
            if dims2(self.shape(p)).0 != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = dims2(self.shape(x));
        if start + len > cols || len == 0 {
            return Err(Error::Index {
                what: "column slice end",
                index: start + len,
                size: cols,
            });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![rows, len], out, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = dims2(self.shape(parts[0])).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = dims2(self.shape(p));
            if c != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Row-wise select: row `r` is taken from `a` where `mask[r]` is set and
    /// from `b` otherwise.
    pub fn blend_rows(&mut self, a: Var, b: Var, mask: &[bool]) -> Result<Var> {
        self.same_shape("blend_rows", a, b)?;
        let (rows, cols) = dims2(self.shape(a));
        if mask.len() != rows {
            return Err(Error::Dimension {
                op: "blend_rows",
                left: self.shape(a).to_vec(),
                right: vec![mask.len()],
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(rows * cols);
        for (r, &m) in mask.iter().enumerate() {
            let src = if m { va } else { vb };
            out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let m: Vec<T> = mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Blend { a, b, mask: m }, ng))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Dimension {
                op: "mask_mul",
                left: self.shape(x).to_vec(),
                right: vec![mask.len()],
            });
        }
        let out = self.value(x).iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let ng = self.ng(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MaskMul { x, mask }, ng))
    }

    /// Mean negative log-likelihood over unmasked rows of a `T x V`
    /// log-probability matrix. Zero when every row is masked.
    pub fn nll_loss(&mut self, log_probs: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, vocab) = dims2(self.shape(log_probs));
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Dimension {
                op: "nll_loss",
                left: self.shape(log_probs).to_vec(),
                right: vec![targets.len(), mask.len()],
            });
        }
        let v = self.value(log_probs);
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            if t >= vocab {
                return Err(Error::Index {
                    what: "nll target",
                    index: t,
                    size: vocab,
                });
            }
            total -= v[r * vocab + t];
            count += 1;
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count).unwrap()
        };
        let ng = self.ng(log_probs);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Nll {
                x: log_probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy of predictions `p` (any shape, one value
    /// per item) against 0/1 labels, with `p` clamped to `[eps, 1 - eps]`.
    pub fn bce_loss(&mut self, p: Var, labels: &[bool]) -> Result<Var> {
        let n = self.value(p).len();
        if labels.len() != n {
            return Err(Error::Dimension {
                op: "bce_loss",
                left: self.shape(p).to_vec(),
                right: vec![labels.len()],
            });
        }
        let eps = T::from_f64c(BCE_EPSILON);
        let ys: Vec<T> = labels.iter().map(|&y| if y { T::one() } else { T::zero() }).collect();
        let total: T = self
            .value(p)
            .iter()
            .zip(&ys)
            .map(|(&pi, &y)| {
                let pc = pi.max(eps).min(T::one() - eps);
                -(y * pc.ln() + (T::one() - y) * (T::one() - pc).ln())
            })
            .sum();
        let loss = total / T::from_usize(n).unwrap();
        let ng = self.ng(p);
        Ok(self.push(vec![1], vec![loss], Op::Bce { p, labels: ys }, ng))
    }

    /// Reverse pass from a scalar. Gradients of leaves become available
    /// through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` onto `t`. A leaf that requires a gradient but
    /// was not reached receives zeros.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) {
        if !t.requires_grad() {
            return;
        }
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![T::zero(); t.len()]),
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.ng(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:expr) => {
                if let Some($buf) = self.slot(grads, $v) {
                    $body
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let n = dims2(self.shape(*b)).1;
                with_grad!(*a, |ga| T::gemm(m, n, k, g, false, self.value(*b), true, T::one(), ga));
                with_grad!(*b, |gb| T::gemm(k, m, n, self.value(*a), true, g, false, T::one(), gb));
            }
            Op::AddBias(x, bias) => {
                with_grad!(*x, |gx| add_into(gx, g));
                let cols = self.value(*bias).len();
                with_grad!(*bias, |gb| {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| add_into(ga, g));
                with_grad!(*b, |gb| add_into(gb, g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                with_grad!(*a, |ga| {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *o += gi * y;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(va) {
                        *o += gi * x;
                    }
                });
            }
            Op::Scale(a, c) => {
                with_grad!(*a, |ga| ga.iter_mut().zip(g).for_each(|(o, &gi)| *o += gi * *c));
            }
            Op::Sum(a) => {
                with_grad!(*a, |ga| ga.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Sigmoid(a) => {
                let bump = if self.fault == Some(Fault::SigmoidBackward) {
                    T::from_f64c(1.1)
                } else {
                    T::one()
                };
                with_grad!(*a, |ga| {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *o += gi * y * (T::one() - y) * bump;
                    }
                });
            }
            Op::Tanh(a) => {
                with_grad!(*a, |ga| {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *o += gi * (T::one() - y * y);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                with_grad!(*a, |ga| {
                    for ((o, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        if xi > T::zero() {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Prelu(a, alpha) => {
                let x = self.value(*a);
                with_grad!(*a, |ga| {
                    for ((o, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        *o += if xi >= T::zero() { gi } else { *alpha * gi };
                    }
                });
            }
            Op::LogSoftmax { x, outer, dim, inner } => {
                let y = &node.value;
                with_grad!(*x, |gx| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |d: usize| o * dim * inner + d * inner + i;
                            let gsum: T = (0..*dim).map(|d| g[at(d)]).sum();
                            for d in 0..*dim {
                                gx[at(d)] += g[at(d)] - y[at(d)].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::Gather { table, indices } => {
                let cols = dims2(self.shape(*table)).1;
                with_grad!(*table, |gt| {
                    for (r, &ix) in indices.iter().enumerate() {
                        add_into(&mut gt[ix * cols..(ix + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = dims2(&node.shape);
                let mut offset = 0;
                for &p in parts {
                    let w = dims2(self.shape(p)).1;
                    with_grad!(p, |gp| {
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = dims2(self.shape(*x));
                let len = dims2(&node.shape).1;
                with_grad!(*x, |gx| {
                    for r in 0..rows {
                        add_into(
                            &mut gx[r * cols + start..r * cols + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    with_grad!(p, |gp| add_into(gp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::Blend { a, b, mask } => {
                let cols = dims2(&node.shape).1;
                with_grad!(*a, |ga| {
                    for (r, &m) in mask.iter().enumerate() {
                        if m > T::zero() {
                            add_into(&mut ga[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        }
                    }
                });
                with_grad!(*b, |gb| {
                    for (r, &m) in mask.iter().enumerate() {
                        if m == T::zero() {
                            add_into(&mut gb[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        }
                    }
                });
            }
            Op::MaskMul { x, mask } => {
                with_grad!(*x, |gx| {
                    for ((o, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                });
            }
            Op::Nll {
                x,
                targets,
                mask,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let vocab = dims2(self.shape(*x)).1;
                let share = g[0] / T::from_usize(*count).unwrap();
                with_grad!(*x, |gx| {
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if m {
                            gx[r * vocab + t] -= share;
                        }
                    }
                });
            }
            Op::Bce { p, labels } => {
                let eps = T::from_f64c(BCE_EPSILON);
                let n = T::from_usize(labels.len()).unwrap();
                let pv = self.value(*p);
                with_grad!(*p, |gp| {
                    for ((o, &pi), &y) in gp.iter_mut().zip(pv).zip(labels) {
                        if pi < eps || pi > T::one() - eps {
                            continue;
                        }
                        *o += g[0] * (-y / pi + (T::one() - y) / (T::one() - pi)) / n;
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub(crate) fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}
