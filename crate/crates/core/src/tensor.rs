//! Dense tensors with reverse-mode gradients.
//!
//! Exactly the operations the classifier and its losses need: 2-D/batched
//! matmul, the elementwise suite, layer normalization, softmax, the two
//! losses, and a handful of shape moves. The graph is rebuilt on every
//! forward pass (define-by-run): each produced tensor records its parents,
//! and `backward` walks the recorded nodes once in reverse topological
//! order. Reductions accumulate left-to-right so forward results are
//! bitwise deterministic for identical inputs.
//!
//! A `Tensor` is a cheap handle (`Rc`) onto its node; cloning a handle does
//! not copy the buffer. Nodes with `requires_grad == false` never allocate
//! a gradient buffer.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Epsilon inside the layer-norm variance denominator.
pub const LAYERNORM_EPS: f64 = 1e-5;

pub struct Tensor<T: Scalar> {
    node: Rc<RefCell<Node<T>>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

enum Op<T: Scalar> {
    Leaf,
    Matmul { a: Tensor<T>, b: Tensor<T> },
    Bmm { a: Tensor<T>, b: Tensor<T> },
    Transpose2 { a: Tensor<T> },
    TransposeLast { a: Tensor<T> },
    SwapAxes12 { a: Tensor<T> },
    Reshape { a: Tensor<T> },
    Add { a: Tensor<T>, b: Tensor<T> },
    AddRow { a: Tensor<T>, row: Tensor<T> },
    MulRow { a: Tensor<T>, row: Tensor<T> },
    Scale { a: Tensor<T>, factor: T },
    Gelu { a: Tensor<T> },
    LayerNorm { a: Tensor<T>, inv_std: Vec<T> },
    Softmax { a: Tensor<T> },
    SoftmaxCrossEntropy { logits: Tensor<T>, labels: Vec<usize>, probs: Vec<T> },
    Mse { a: Tensor<T>, b: Tensor<T> },
    MeanAxis1 { a: Tensor<T> },
    Sum { a: Tensor<T> },
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

// ── Construction and access ─────────────────────────────────────────────────

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if numel(&shape) != values.len() {
            return Err(Error::Dimension {
                op: "from_vec",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        Ok(Self::leaf(shape, values, false))
    }

    /// Leaf with `requires_grad == true`; the unit for trainable parameters.
    pub fn param(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let t = Self::from_vec(shape, values)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::leaf(shape, vec![T::zero(); n], false)
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = numel(&shape);
        Self::leaf(shape, vec![value; n], false)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![1], vec![value], false)
    }

    fn leaf(shape: Vec<usize>, values: Vec<T>, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(RefCell::new(Node {
                shape,
                values,
                grad: None,
                requires_grad,
                op: Op::Leaf,
            })),
        }
    }

    fn from_op(shape: Vec<usize>, values: Vec<T>, op: Op<T>, requires_grad: bool) -> Self {
        // Drop parent links when nothing upstream needs a gradient; pure
        // evaluation then records no graph at all.
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor {
            node: Rc::new(RefCell::new(Node {
                shape,
                values,
                grad: None,
                requires_grad,
                op,
            })),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.node.borrow().values.len()
    }

    pub fn values(&self) -> Vec<T> {
        self.node.borrow().values.clone()
    }

    /// Scalar extraction; panics on non-scalar tensors.
    pub fn item(&self) -> T {
        let n = self.node.borrow();
        assert_eq!(n.values.len(), 1, "item() on non-scalar tensor");
        n.values[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.borrow().grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, flag: bool) {
        let mut n = self.node.borrow_mut();
        n.requires_grad = flag;
        if !flag {
            n.grad = None;
        }
    }

    /// Drops any accumulated gradient.
    pub fn zero_grad(&self) {
        self.node.borrow_mut().grad = None;
    }

    /// In-place value mutation for optimizer steps; shape is fixed.
    pub fn update_values(&self, f: impl FnOnce(&mut [T])) {
        f(&mut self.node.borrow_mut().values);
    }

    /// Replaces the buffer; length must match.
    pub fn set_values(&self, values: Vec<T>) -> Result<()> {
        let mut n = self.node.borrow_mut();
        if values.len() != n.values.len() {
            return Err(Error::Dimension {
                op: "set_values",
                lhs: n.shape.clone(),
                rhs: vec![values.len()],
            });
        }
        n.values = values;
        Ok(())
    }

    /// Value-only copy detached from any graph.
    pub fn detach(&self) -> Tensor<T> {
        let n = self.node.borrow();
        Self::leaf(n.shape.clone(), n.values.clone(), false)
    }

    fn same_node(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.node, &other.node)
    }
}

// ── Forward operations ──────────────────────────────────────────────────────

impl<T: Scalar> Tensor<T> {
    /// `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let a = self.node.borrow();
        let b = rhs.node.borrow();
        let out = matmul_raw(&a.values, &b.values, m, k, n);
        let req = a.requires_grad || b.requires_grad;
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            Op::Matmul {
                a: self.clone(),
                b: rhs.clone(),
            },
            req,
        ))
    }

    /// Batched matmul: `[N×m×k] · [N×k×n] -> [N×m×n]`.
    pub fn bmm(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Dimension {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (nb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let a = self.node.borrow();
        let b = rhs.node.borrow();
        let mut out = vec![T::zero(); nb * m * n];
        for i in 0..nb {
            let ab = &a.values[i * m * k..(i + 1) * m * k];
            let bb = &b.values[i * k * n..(i + 1) * k * n];
            matmul_into(ab, bb, m, k, n, &mut out[i * m * n..(i + 1) * m * n]);
        }
        let req = a.requires_grad || b.requires_grad;
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            vec![nb, m, n],
            out,
            Op::Bmm {
                a: self.clone(),
                b: rhs.clone(),
            },
            req,
        ))
    }

    /// 2-D transpose.
    pub fn transpose2(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Dimension {
                op: "transpose2",
                lhs: s,
                rhs: vec![],
            });
        }
        let (m, n) = (s[0], s[1]);
        let a = self.node.borrow();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a.values[i * n + j];
            }
        }
        let req = a.requires_grad;
        drop(a);
        Ok(Tensor::from_op(
            vec![n, m],
            out,
            Op::Transpose2 { a: self.clone() },
            req,
        ))
    }

    /// Transpose of the last two axes of a 3-D tensor.
    pub fn transpose_last(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::Dimension {
                op: "transpose_last",
                lhs: s,
                rhs: vec![],
            });
        }
        let (nb, m, n) = (s[0], s[1], s[2]);
        let a = self.node.borrow();
        let mut out = vec![T::zero(); nb * m * n];
        for b in 0..nb {
            for i in 0..m {
                for j in 0..n {
                    out[b * m * n + j * m + i] = a.values[b * m * n + i * n + j];
                }
            }
        }
        let req = a.requires_grad;
        drop(a);
        Ok(Tensor::from_op(
            vec![nb, n, m],
            out,
            Op::TransposeLast { a: self.clone() },
            req,
        ))
    }

    /// Swaps axes 1 and 2 of a 4-D tensor (`[a,b,c,d] -> [a,c,b,d]`).
    pub fn swap_axes12(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::Dimension {
                op: "swap_axes12",
                lhs: s,
                rhs: vec![],
            });
        }
        let a = self.node.borrow();
        let out = swap12_raw(&a.values, &s);
        let req = a.requires_grad;
        drop(a);
        Ok(Tensor::from_op(
            vec![s[0], s[2], s[1], s[3]],
            out,
            Op::SwapAxes12 { a: self.clone() },
            req,
        ))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<T>> {
        if numel(&shape) != self.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape,
            });
        }
        let a = self.node.borrow();
        let values = a.values.clone();
        let req = a.requires_grad;
        drop(a);
        Ok(Tensor::from_op(
            shape,
            values,
            Op::Reshape { a: self.clone() },
            req,
        ))
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa != sb {
            return Err(Error::Dimension {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let a = self.node.borrow();
        let b = rhs.node.borrow();
        let out: Vec<T> = a
            .values
            .iter()
            .zip(b.values.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let req = a.requires_grad || b.requires_grad;
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            sa,
            out,
            Op::Add {
                a: self.clone(),
                b: rhs.clone(),
            },
            req,
        ))
    }

    /// Adds a `[C]` row vector to every row of a `[R×C]` tensor.
    pub fn add_row(&self, row: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sr) = (self.shape(), row.shape());
        if sa.len() != 2 || sr.len() != 1 || sa[1] != sr[0] {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: sa,
                rhs: sr,
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let a = self.node.borrow();
        let b = row.node.borrow();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(a.values[i * c + j] + b.values[j]);
            }
        }
        let req = a.requires_grad || b.requires_grad;
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            sa,
            out,
            Op::AddRow {
                a: self.clone(),
                row: row.clone(),
            },
            req,
        ))
    }

    /// Multiplies every row of a `[R×C]` tensor elementwise by a `[C]` vector.
    pub fn mul_row(&self, row: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sr) = (self.shape(), row.shape());
        if sa.len() != 2 || sr.len() != 1 || sa[1] != sr[0] {
            return Err(Error::Dimension {
                op: "mul_row",
                lhs: sa,
                rhs: sr,
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let a = self.node.borrow();
        let b = row.node.borrow();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(a.values[i * c + j] * b.values[j]);
            }
        }
        let req = a.requires_grad || b.requires_grad;
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            sa,
            out,
            Op::MulRow {
                a: self.clone(),
                row: row.clone(),
            },
            req,
        ))
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        let a = self.node.borrow();
        let out: Vec<T> = a.values.iter().map(|&x| x * factor).collect();
        let shape = a.shape.clone();
        let req = a.requires_grad;
        drop(a);
        Tensor::from_op(shape, out, Op::Scale { a: self.clone(), factor }, req)
    }

    /// GELU, tanh form.
    pub fn gelu(&self) -> Tensor<T> {
        let a = self.node.borrow();
        let out: Vec<T> = a.values.iter().map(|&x| gelu_fw(x)).collect();
        let shape = a.shape.clone();
        let req = a.requires_grad;
        drop(a);
        Tensor::from_op(shape, out, Op::Gelu { a: self.clone() }, req)
    }

    /// Layer normalization over the last axis, without affine parameters.
    /// A constant row normalizes to all zeros.
    pub fn layernorm(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        let features = *s.last().ok_or(Error::Dimension {
            op: "layernorm",
            lhs: s.clone(),
            rhs: vec![],
        })?;
        if features == 0 {
            return Err(Error::Dimension {
                op: "layernorm",
                lhs: s,
                rhs: vec![],
            });
        }
        let rows = numel(&s) / features;
        let eps = T::from_f(LAYERNORM_EPS);
        let a = self.node.borrow();
        let mut out = vec![T::zero(); rows * features];
        let mut inv_std = vec![T::zero(); rows];
        let denom = T::from_f(features as f64);
        for r in 0..rows {
            let x = &a.values[r * features..(r + 1) * features];
            let mean = x.iter().copied().sum::<T>() / denom;
            let var = x
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / denom;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..features {
                out[r * features + j] = (x[j] - mean) * is;
            }
        }
        let req = a.requires_grad;
        drop(a);
        Ok(Tensor::from_op(
            s,
            out,
            Op::LayerNorm {
                a: self.clone(),
                inv_std,
            },
            req,
        ))
    }

    /// Softmax over the given axis; only the last axis is supported.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if axis + 1 != s.len() {
            return Err(Error::contract(
                "softmax",
                format!("axis {axis} unsupported for shape {s:?}; only the last axis is implemented"),
            ));
        }
        let features = s[axis];
        let rows = numel(&s) / features;
        let a = self.node.borrow();
        let mut out = vec![T::zero(); rows * features];
        for r in 0..rows {
            let x = &a.values[r * features..(r + 1) * features];
            softmax_row(x, &mut out[r * features..(r + 1) * features]);
        }
        let req = a.requires_grad;
        drop(a);
        Ok(Tensor::from_op(s, out, Op::Softmax { a: self.clone() }, req))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// max-subtraction. Labels index the class axis of `[B×C]` logits.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let (batch, classes) = (s[0], s[1]);
        if labels.len() != batch || batch == 0 {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        for &l in labels {
            if l >= classes {
                return Err(Error::Index {
                    context: "softmax_cross_entropy label",
                    index: l,
                    limit: classes,
                });
            }
        }
        let a = self.node.borrow();
        let mut probs = vec![T::zero(); batch * classes];
        let mut loss = T::zero();
        for r in 0..batch {
            let x = &a.values[r * classes..(r + 1) * classes];
            softmax_row(x, &mut probs[r * classes..(r + 1) * classes]);
            let maxv = x.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = x
                .iter()
                .map(|&v| (v - maxv).exp())
                .sum::<T>()
                .ln()
                + maxv;
            loss += lse - x[labels[r]];
        }
        loss = loss / T::from_f(batch as f64);
        let req = a.requires_grad;
        drop(a);
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits: self.clone(),
                labels: labels.to_vec(),
                probs,
            },
            req,
        ))
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mse(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa != sb {
            return Err(Error::Dimension {
                op: "mse",
                lhs: sa,
                rhs: sb,
            });
        }
        let a = self.node.borrow();
        let b = rhs.node.borrow();
        let n = T::from_f(a.values.len() as f64);
        let mut loss = T::zero();
        for (&x, &y) in a.values.iter().zip(b.values.iter()) {
            let d = x - y;
            loss += d * d;
        }
        loss = loss / n;
        let req = a.requires_grad || b.requires_grad;
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            Op::Mse {
                a: self.clone(),
                b: rhs.clone(),
            },
            req,
        ))
    }

    /// Mean over axis 1 of a 3-D tensor: `[B,S,D] -> [B,D]`.
    pub fn mean_axis1(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::Dimension {
                op: "mean_axis1",
                lhs: s,
                rhs: vec![],
            });
        }
        let (b, sq, d) = (s[0], s[1], s[2]);
        let a = self.node.borrow();
        let denom = T::from_f(sq as f64);
        let mut out = vec![T::zero(); b * d];
        for i in 0..b {
            for t in 0..sq {
                for j in 0..d {
                    out[i * d + j] += a.values[i * sq * d + t * d + j];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v / denom;
        }
        let req = a.requires_grad;
        drop(a);
        Ok(Tensor::from_op(
            vec![b, d],
            out,
            Op::MeanAxis1 { a: self.clone() },
            req,
        ))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor<T> {
        let a = self.node.borrow();
        let total = a.values.iter().copied().sum::<T>();
        let req = a.requires_grad;
        drop(a);
        Tensor::from_op(vec![1], vec![total], Op::Sum { a: self.clone() }, req)
    }
}

// ── Backward pass ───────────────────────────────────────────────────────────

impl<T: Scalar> Tensor<T> {
    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// `requires_grad` leaf reachable from the loss; repeated calls keep
    /// accumulating until `zero_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape()),
            ));
        }
        let order = self.topo_order();
        // Interior gradients are scratch space for this sweep; only leaves
        // accumulate across calls.
        for t in &order {
            let mut n = t.node.borrow_mut();
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        self.accumulate_grad(&[T::one()]);
        for t in order.iter().rev() {
            t.backprop_step();
        }
        Ok(())
    }

    /// Post-order over the recorded graph (parents before children).
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const RefCell<Node<T>>> = HashSet::new();
        // Iterative DFS; the second stack element marks "children done".
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&t.node);
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            let parents = t.parents();
            stack.push((t, true));
            for p in parents {
                if !visited.contains(&Rc::as_ptr(&p.node)) {
                    stack.push((p, false));
                }
            }
        }
        order
    }

    fn parents(&self) -> Vec<Tensor<T>> {
        let n = self.node.borrow();
        match &n.op {
            Op::Leaf => vec![],
            Op::Matmul { a, b }
            | Op::Bmm { a, b }
            | Op::Add { a, b }
            | Op::Mse { a, b } => vec![a.clone(), b.clone()],
            Op::AddRow { a, row } | Op::MulRow { a, row } => vec![a.clone(), row.clone()],
            Op::Transpose2 { a }
            | Op::TransposeLast { a }
            | Op::SwapAxes12 { a }
            | Op::Reshape { a }
            | Op::Scale { a, .. }
            | Op::Gelu { a }
            | Op::LayerNorm { a, .. }
            | Op::Softmax { a }
            | Op::MeanAxis1 { a }
            | Op::Sum { a } => vec![a.clone()],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits.clone()],
        }
    }

    fn accumulate_grad(&self, delta: &[T]) {
        let mut n = self.node.borrow_mut();
        if !n.requires_grad {
            return;
        }
        match &mut n.grad {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(delta.iter()) {
                    *gi += d;
                }
            }
            None => n.grad = Some(delta.to_vec()),
        }
    }

    /// Pushes this node's gradient to its parents.
    fn backprop_step(&self) {
        let (grad, own_values) = {
            let n = self.node.borrow();
            if !n.requires_grad {
                return;
            }
            match &n.grad {
                None => return,
                Some(g) => (g.clone(), n.values.clone()),
            }
        };
        let n = self.node.borrow();
        match &n.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (av, bv) = (a.values(), b.values());
                let (sa, sb) = (a.shape(), b.shape());
                let (m, k, nn) = (sa[0], sa[1], sb[1]);
                if a.requires_grad() {
                    // dL/da = g · b^T
                    let mut da = vec![T::zero(); m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = T::zero();
                            for j in 0..nn {
                                acc += grad[i * nn + j] * bv[p * nn + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    // dL/db = a^T · g
                    let mut db = vec![T::zero(); k * nn];
                    for p in 0..k {
                        for j in 0..nn {
                            let mut acc = T::zero();
                            for i in 0..m {
                                acc += av[i * k + p] * grad[i * nn + j];
                            }
                            db[p * nn + j] = acc;
                        }
                    }
                    b.accumulate_grad(&db);
                }
            }
            Op::Bmm { a, b } => {
                let (av, bv) = (a.values(), b.values());
                let (sa, sb) = (a.shape(), b.shape());
                let (nb, m, k, nn) = (sa[0], sa[1], sa[2], sb[2]);
                if a.requires_grad() {
                    let mut da = vec![T::zero(); nb * m * k];
                    for bi in 0..nb {
                        let g = &grad[bi * m * nn..(bi + 1) * m * nn];
                        let bb = &bv[bi * k * nn..(bi + 1) * k * nn];
                        let dst = &mut da[bi * m * k..(bi + 1) * m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = T::zero();
                                for j in 0..nn {
                                    acc += g[i * nn + j] * bb[p * nn + j];
                                }
                                dst[i * k + p] = acc;
                            }
                        }
                    }
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let mut db = vec![T::zero(); nb * k * nn];
                    for bi in 0..nb {
                        let g = &grad[bi * m * nn..(bi + 1) * m * nn];
                        let ab = &av[bi * m * k..(bi + 1) * m * k];
                        let dst = &mut db[bi * k * nn..(bi + 1) * k * nn];
                        for p in 0..k {
                            for j in 0..nn {
                                let mut acc = T::zero();
                                for i in 0..m {
                                    acc += ab[i * k + p] * g[i * nn + j];
                                }
                                dst[p * nn + j] = acc;
                            }
                        }
                    }
                    b.accumulate_grad(&db);
                }
            }
            Op::Transpose2 { a } => {
                if a.requires_grad() {
                    let s = self.node.borrow().shape.clone();
                    let (m, nn) = (s[0], s[1]);
                    let mut da = vec![T::zero(); m * nn];
                    for i in 0..m {
                        for j in 0..nn {
                            da[j * m + i] = grad[i * nn + j];
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }
            Op::TransposeLast { a } => {
                if a.requires_grad() {
                    let s = self.node.borrow().shape.clone();
                    let (nb, m, nn) = (s[0], s[1], s[2]);
                    let mut da = vec![T::zero(); nb * m * nn];
                    for bi in 0..nb {
                        for i in 0..m {
                            for j in 0..nn {
                                da[bi * m * nn + j * m + i] = grad[bi * m * nn + i * nn + j];
                            }
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }
            Op::SwapAxes12 { a } => {
                if a.requires_grad() {
                    let s = self.node.borrow().shape.clone();
                    let da = swap12_raw(&grad, &s);
                    a.accumulate_grad(&da);
                }
            }
            Op::Reshape { a } => {
                if a.requires_grad() {
                    a.accumulate_grad(&grad);
                }
            }
            Op::Add { a, b } => {
                if a.requires_grad() {
                    a.accumulate_grad(&grad);
                }
                if b.requires_grad() {
                    b.accumulate_grad(&grad);
                }
            }
            Op::AddRow { a, row } => {
                if a.requires_grad() {
                    a.accumulate_grad(&grad);
                }
                if row.requires_grad() {
                    let c = row.numel();
                    let r = grad.len() / c;
                    let mut dr = vec![T::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            dr[j] += grad[i * c + j];
                        }
                    }
                    row.accumulate_grad(&dr);
                }
            }
            Op::MulRow { a, row } => {
                let c = row.numel();
                let r = grad.len() / c;
                if a.requires_grad() {
                    let rv = row.values();
                    let mut da = vec![T::zero(); grad.len()];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = grad[i * c + j] * rv[j];
                        }
                    }
                    a.accumulate_grad(&da);
                }
                if row.requires_grad() {
                    let av = a.values();
                    let mut dr = vec![T::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            dr[j] += grad[i * c + j] * av[i * c + j];
                        }
                    }
                    row.accumulate_grad(&dr);
                }
            }
            Op::Scale { a, factor } => {
                if a.requires_grad() {
                    let da: Vec<T> = grad.iter().map(|&g| g * *factor).collect();
                    a.accumulate_grad(&da);
                }
            }
            Op::Gelu { a } => {
                if a.requires_grad() {
                    let av = a.values();
                    let da: Vec<T> = av
                        .iter()
                        .zip(grad.iter())
                        .map(|(&x, &g)| g * gelu_bw(x))
                        .collect();
                    a.accumulate_grad(&da);
                }
            }
            Op::LayerNorm { a, inv_std } => {
                if a.requires_grad() {
                    let s = self.node.borrow().shape.clone();
                    let features = *s.last().unwrap();
                    let rows = grad.len() / features;
                    let denom = T::from_f(features as f64);
                    let mut da = vec![T::zero(); grad.len()];
                    for r in 0..rows {
                        let g = &grad[r * features..(r + 1) * features];
                        let xh = &own_values[r * features..(r + 1) * features];
                        let g_mean = g.iter().copied().sum::<T>() / denom;
                        let gx_mean = g
                            .iter()
                            .zip(xh.iter())
                            .map(|(&gi, &xi)| gi * xi)
                            .sum::<T>()
                            / denom;
                        for j in 0..features {
                            da[r * features + j] =
                                inv_std[r] * (g[j] - g_mean - xh[j] * gx_mean);
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }
            Op::Softmax { a } => {
                if a.requires_grad() {
                    let s = self.node.borrow().shape.clone();
                    let features = *s.last().unwrap();
                    let rows = grad.len() / features;
                    let mut da = vec![T::zero(); grad.len()];
                    for r in 0..rows {
                        let g = &grad[r * features..(r + 1) * features];
                        let p = &own_values[r * features..(r + 1) * features];
                        let dot = g
                            .iter()
                            .zip(p.iter())
                            .map(|(&gi, &pi)| gi * pi)
                            .sum::<T>();
                        for j in 0..features {
                            da[r * features + j] = p[j] * (g[j] - dot);
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if logits.requires_grad() {
                    let batch = labels.len();
                    let classes = probs.len() / batch;
                    let scale = grad[0] / T::from_f(batch as f64);
                    let mut da = vec![T::zero(); probs.len()];
                    for r in 0..batch {
                        for c in 0..classes {
                            let indicator = if labels[r] == c { T::one() } else { T::zero() };
                            da[r * classes + c] = (probs[r * classes + c] - indicator) * scale;
                        }
                    }
                    logits.accumulate_grad(&da);
                }
            }
            Op::Mse { a, b } => {
                let av = a.values();
                let bv = b.values();
                let n = T::from_f(av.len() as f64);
                let two = T::from_f(2.0);
                let scale = grad[0] * two / n;
                if a.requires_grad() {
                    let da: Vec<T> = av
                        .iter()
                        .zip(bv.iter())
                        .map(|(&x, &y)| (x - y) * scale)
                        .collect();
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let db: Vec<T> = av
                        .iter()
                        .zip(bv.iter())
                        .map(|(&x, &y)| (y - x) * scale)
                        .collect();
                    b.accumulate_grad(&db);
                }
            }
            Op::MeanAxis1 { a } => {
                if a.requires_grad() {
                    let s = a.shape();
                    let (bsz, sq, d) = (s[0], s[1], s[2]);
                    let denom = T::from_f(sq as f64);
                    let mut da = vec![T::zero(); bsz * sq * d];
                    for i in 0..bsz {
                        for t in 0..sq {
                            for j in 0..d {
                                da[i * sq * d + t * d + j] = grad[i * d + j] / denom;
                            }
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }
            Op::Sum { a } => {
                if a.requires_grad() {
                    let da = vec![grad[0]; a.numel()];
                    a.accumulate_grad(&da);
                }
            }
        }
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────────────

fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_into(a, b, m, k, n, &mut out);
    out
}

fn matmul_into<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn swap12_raw<T: Scalar>(values: &[T], shape: &[usize]) -> Vec<T> {
    let (d0, d1, d2, d3) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![T::zero(); values.len()];
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                let src = ((i * d1 + j) * d2 + k) * d3;
                let dst = ((i * d2 + k) * d1 + j) * d3;
                out[dst..dst + d3].copy_from_slice(&values[src..src + d3]);
            }
        }
    }
    out
}

fn softmax_row<T: Scalar>(x: &[T], out: &mut [T]) {
    let maxv = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        let e = (v - maxv).exp();
        *o = e;
        total += e;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

fn gelu_fw<T: Scalar>(x: T) -> T {
    let c = T::from_f(0.7978845608028654); // sqrt(2/pi)
    let k = T::from_f(0.044715);
    let half = T::from_f(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_bw<T: Scalar>(x: T) -> T {
    let c = T::from_f(0.7978845608028654);
    let k = T::from_f(0.044715);
    let half = T::from_f(0.5);
    let three = T::from_f(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.node.borrow();
        f.debug_struct("Tensor")
            .field("shape", &n.shape)
            .field("requires_grad", &n.requires_grad)
            .finish()
    }
}

// `same_node` is used by the test suite to confirm handles share storage.
#[allow(dead_code)]
fn _assert_handle_semantics<T: Scalar>(t: &Tensor<T>) -> bool {
    t.same_node(&t.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdiff::{max_rel_err, numeric_grad};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn param(shape: Vec<usize>, values: Vec<f64>) -> Tensor<f64> {
        Tensor::param(shape, values).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = eye.matmul(&m).unwrap();
        assert_eq!(out.values(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_orthogonal_selection() {
        let a = Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 1], vec![0.0, 5.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().values(), vec![0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a0 = randn(&mut rng, 12);
        let b0 = randn(&mut rng, 8);
        let a = param(vec![3, 4], a0.clone());
        let b = param(vec![4, 2], b0.clone());
        a.matmul(&b).unwrap().sum().backward().unwrap();

        let fa = |x: &[f64]| {
            let a = Tensor::from_vec(vec![3, 4], x.to_vec()).unwrap();
            let b = Tensor::from_vec(vec![4, 2], b0.clone()).unwrap();
            a.matmul(&b).unwrap().sum().item()
        };
        let fb = |x: &[f64]| {
            let a = Tensor::from_vec(vec![3, 4], a0.clone()).unwrap();
            let b = Tensor::from_vec(vec![4, 2], x.to_vec()).unwrap();
            a.matmul(&b).unwrap().sum().item()
        };
        assert!(max_rel_err(&a.grad().unwrap(), &numeric_grad(fa, &a0, 1e-5)) < 1e-6);
        assert!(max_rel_err(&b.grad().unwrap(), &numeric_grad(fb, &b0, 1e-5)) < 1e-6);
    }

    #[test]
    fn cross_entropy_saturated_and_uniform() {
        let sat = Tensor::from_vec(vec![1, 2], vec![10.0, -10.0]).unwrap();
        assert!(sat.softmax_cross_entropy(&[0]).unwrap().item() < 1e-4);
        let uni = Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let loss = uni.softmax_cross_entropy(&[0]).unwrap().item();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let z = Tensor::from_vec(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            z.softmax_cross_entropy(&[3]),
            Err(crate::error::Error::Index { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z0 = randn(&mut rng, 20);
        let labels = vec![0usize, 3, 1, 4];
        let z = param(vec![4, 5], z0.clone());
        z.softmax_cross_entropy(&labels).unwrap().backward().unwrap();
        let f = |x: &[f64]| {
            Tensor::from_vec(vec![4, 5], x.to_vec())
                .unwrap()
                .softmax_cross_entropy(&labels)
                .unwrap()
                .item()
        };
        assert!(max_rel_err(&z.grad().unwrap(), &numeric_grad(f, &z0, 1e-5)) < 1e-6);
    }

    #[test]
    fn mse_analytic_cases() {
        let a = Tensor::<f64>::from_vec(vec![2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
        assert!((a.mse(&b).unwrap().item() - 0.5).abs() < 1e-15);
        assert_eq!(a.mse(&a).unwrap().item(), 0.0);
    }

    #[test]
    fn mse_gradient_matches_analytic_and_numeric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a0 = randn(&mut rng, 6);
        let b0 = randn(&mut rng, 6);
        let a = param(vec![2, 3], a0.clone());
        let b = Tensor::from_vec(vec![2, 3], b0.clone()).unwrap();
        a.mse(&b).unwrap().backward().unwrap();
        let grad = a.grad().unwrap();
        for i in 0..6 {
            let analytic = 2.0 * (a0[i] - b0[i]) / 6.0;
            assert!((grad[i] - analytic).abs() < 1e-12);
        }
        let f = |x: &[f64]| {
            Tensor::from_vec(vec![2, 3], x.to_vec())
                .unwrap()
                .mse(&Tensor::from_vec(vec![2, 3], b0.clone()).unwrap())
                .unwrap()
                .item()
        };
        assert!(max_rel_err(&grad, &numeric_grad(f, &a0, 1e-5)) < 1e-6);
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let x = Tensor::<f64>::from_vec(vec![1, 4], vec![3.5; 4]).unwrap();
        let out = x.layernorm().unwrap();
        for v in out.values() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_and_row_sums() {
        let x = Tensor::<f64>::from_vec(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let p = x.softmax(1).unwrap().values();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Tensor::from_vec(vec![5, 7], randn(&mut rng, 35)).unwrap();
        let probs = z.softmax(1).unwrap().values();
        for r in 0..5 {
            let s: f64 = probs[r * 7..(r + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = randn(&mut rng, 10);
        let x = param(vec![10], x0.clone());
        x.gelu().sum().backward().unwrap();
        let f = |v: &[f64]| {
            Tensor::from_vec(vec![10], v.to_vec())
                .unwrap()
                .gelu()
                .sum()
                .item()
        };
        assert!(max_rel_err(&x.grad().unwrap(), &numeric_grad(f, &x0, 1e-5)) < 1e-6);
    }

    #[test]
    fn backward_requires_scalar() {
        let x = param(vec![2], vec![1.0, 2.0]);
        assert!(matches!(
            x.backward(),
            Err(crate::error::Error::Contract { .. })
        ));
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let x = param(vec![2], vec![1.0, 2.0]);
        let loss = x.sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn frozen_leaves_never_allocate_grads() {
        let x = param(vec![2], vec![1.0, 2.0]);
        let y = Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap();
        x.add(&y).unwrap().sum().backward().unwrap();
        assert!(x.grad().is_some());
        assert!(y.grad().is_none());
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vals = randn(&mut rng, 24);
        let run = || {
            let x = Tensor::from_vec(vec![4, 6], vals.clone()).unwrap();
            x.layernorm().unwrap().gelu().softmax(1).unwrap().values()
        };
        let a = run();
        let b = run();
        assert!(a
            .iter()
            .zip(b.iter())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn shared_node_semantics() {
        let x = param(vec![1], vec![1.0]);
        assert!(_assert_handle_semantics(&x));
    }

    // Finite-difference sweep over every differentiable op the model uses.
    #[test]
    fn gradient_check_all_ops() {
        let cases: Vec<(&str, usize, Box<dyn Fn(&Tensor<f64>) -> Tensor<f64>>)> = vec![
            ("scale", 12, Box::new(|x| x.scale(1.7).sum())),
            ("gelu", 12, Box::new(|x| x.gelu().sum())),
            (
                "layernorm",
                12,
                Box::new(|x| {
                    x.reshape(vec![3, 4]).unwrap().layernorm().unwrap().gelu().sum()
                }),
            ),
            (
                "softmax",
                12,
                Box::new(|x| {
                    // Weight rows so the softmax gradient is nontrivial.
                    let w = Tensor::from_vec(
                        vec![3, 4],
                        (0..12).map(|i| (i as f64) * 0.3 - 1.0).collect(),
                    )
                    .unwrap();
                    x.reshape(vec![3, 4])
                        .unwrap()
                        .softmax(1)
                        .unwrap()
                        .mse(&w)
                        .unwrap()
                }),
            ),
            (
                "mean_axis1",
                24,
                Box::new(|x| x.reshape(vec![2, 3, 4]).unwrap().mean_axis1().unwrap().gelu().sum()),
            ),
            (
                "transpose2",
                12,
                Box::new(|x| x.reshape(vec![3, 4]).unwrap().transpose2().unwrap().gelu().sum()),
            ),
            (
                "transpose_last",
                24,
                Box::new(|x| {
                    x.reshape(vec![2, 3, 4]).unwrap().transpose_last().unwrap().gelu().sum()
                }),
            ),
            (
                "swap_axes12",
                24,
                Box::new(|x| {
                    x.reshape(vec![2, 3, 2, 2]).unwrap().swap_axes12().unwrap().gelu().sum()
                }),
            ),
            (
                "add_row",
                12,
                Box::new(|x| {
                    let row = Tensor::from_vec(vec![4], vec![0.2, -0.4, 0.6, 1.0]).unwrap();
                    x.reshape(vec![3, 4]).unwrap().add_row(&row).unwrap().gelu().sum()
                }),
            ),
            (
                "mul_row",
                12,
                Box::new(|x| {
                    let row = Tensor::from_vec(vec![4], vec![0.2, -0.4, 0.6, 1.0]).unwrap();
                    x.reshape(vec![3, 4]).unwrap().mul_row(&row).unwrap().gelu().sum()
                }),
            ),
            (
                "bmm",
                24,
                Box::new(|x| {
                    let b = Tensor::from_vec(
                        vec![2, 4, 2],
                        (0..16).map(|i| (i as f64) * 0.1 - 0.8).collect(),
                    )
                    .unwrap();
                    x.reshape(vec![2, 3, 4]).unwrap().bmm(&b).unwrap().sum()
                }),
            ),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (name, n, f) in &cases {
            for _ in 0..10 {
                let x0 = randn(&mut rng, *n);
                let x = param(vec![*n], x0.clone());
                f(&x).backward().unwrap();
                let g = x.grad().unwrap();
                let num = numeric_grad(
                    |v| f(&Tensor::from_vec(vec![*n], v.to_vec()).unwrap()).item(),
                    &x0,
                    1e-5,
                );
                let err = max_rel_err(&g, &num);
                assert!(err < 1e-5, "{name}: rel err {err}");
            }
        }
    }
}
