//! Dense reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a handle to a node in a dynamically built operation graph.
//! Every operation records its parents and a backward rule; calling
//! [`Tensor::backward`] on a scalar walks the graph in reverse topological
//! order and accumulates gradients into every tensor that requires them.
//!
//! The graph is rebuilt on every forward pass. Handles are `Rc`-based, so a
//! graph lives on the thread that built it.
//!
//! ```
//! use gclview::tensor::Tensor;
//!
//! let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
//! let y = x.mul(&x).unwrap().sum();
//! y.backward().unwrap();
//! assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
//! ```

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::TensorError;

pub type TResult<T> = std::result::Result<T, TensorError>;

type Grads = Vec<Option<Vec<f64>>>;
type BackwardFn = Box<dyn Fn(&[f64], &Node) -> Grads>;

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

struct Node {
    id: usize,
    shape: Vec<usize>,
    value: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

impl Node {
    fn parent_value(&self, i: usize) -> Ref<'_, Vec<f64>> {
        self.parents[i].0.value.borrow()
    }

    fn parent_requires_grad(&self, i: usize) -> bool {
        self.parents[i].0.requires_grad
    }
}

/// Handle to a dense tensor in the operation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(values: Vec<f64>, shape: &[usize], requires_grad: bool) -> TResult<Tensor> {
        if values.len() != numel(shape) {
            return Err(TensorError::Length {
                op: "tensor",
                len: values.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor(Rc::new(Node {
            id: next_id(),
            shape: shape.to_vec(),
            value: RefCell::new(values),
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        })))
    }

    /// Constant tensor (no gradient).
    pub fn new(values: Vec<f64>, shape: &[usize]) -> TResult<Tensor> {
        Self::leaf(values, shape, false)
    }

    /// Trainable leaf tensor.
    pub fn param(values: Vec<f64>, shape: &[usize]) -> TResult<Tensor> {
        Self::leaf(values, shape, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::leaf(vec![0.0; numel(shape)], shape, false).expect("consistent shape")
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::leaf(vec![v], &[], false).expect("scalar")
    }

    /// Builds a constant 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> TResult<Tensor> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Invalid("ragged rows".into()));
        }
        let values = rows.iter().flatten().copied().collect();
        Self::new(values, &[rows.len(), cols])
    }

    fn from_op(
        value: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(value.len(), numel(&shape));
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        let (parents, backward) = if requires_grad {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward,
        }))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn value(&self) -> Ref<'_, Vec<f64>> {
        self.0.value.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.value.borrow().clone()
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.0.value.borrow()[0]
    }

    /// In-place update of the stored values (optimizer steps, checkpoint loads).
    pub fn update_value(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.value.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Copy of this tensor cut off from the gradient graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.to_vec(), self.shape(), false).expect("same shape")
    }

    fn rows_cols(&self, op: &'static str) -> TResult<(usize, usize)> {
        match self.0.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::Rank {
                op,
                expected: "a 2-D tensor",
                got: s.to_vec(),
            }),
        }
    }

    /// Accumulates gradients of this scalar into all requiring ancestors.
    pub fn backward(&self) -> TResult<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.0.id) else {
                continue;
            };
            {
                let mut slot = node.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g.clone()),
                }
            }
            if let Some(bw) = &node.0.backward {
                let contribs = bw(&g, &node.0);
                for (parent, contrib) in node.0.parents.iter().zip(contribs) {
                    let Some(c) = contrib else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(c.len(), parent.numel());
                    match grads.get_mut(&parent.id()) {
                        Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(parent.id(), c);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over gradient-requiring ancestors (iterative DFS).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((node, child)) = stack.pop() {
            if child < node.0.parents.len() {
                let parent = node.0.parents[child].clone();
                stack.push((node, child + 1));
                if parent.requires_grad() && visited.insert(parent.id()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }

    // ----------------------------------------------------------------------
    // Elementwise
    // ----------------------------------------------------------------------

    fn binary(&self, other: &Tensor, kind: BinaryKind) -> TResult<Tensor> {
        let op = kind.name();
        let out_shape = broadcast_shape(self.shape(), other.shape()).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            }
        })?;
        let map = BroadcastMap::new(self.shape(), other.shape(), &out_shape);
        let value = {
            let a = self.value();
            let b = other.value();
            let n = numel(&out_shape);
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                out.push(kind.apply(a[map.a(i)], b[map.b(i)]));
            }
            out
        };
        let (a_len, b_len) = (self.numel(), other.numel());
        Ok(Tensor::from_op(
            value,
            out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g, node| {
                let a = node.parent_value(0);
                let b = node.parent_value(1);
                let need_a = node.parent_requires_grad(0);
                let need_b = node.parent_requires_grad(1);
                let mut ga = need_a.then(|| vec![0.0; a_len]);
                let mut gb = need_b.then(|| vec![0.0; b_len]);
                for (i, &gi) in g.iter().enumerate() {
                    let (ia, ib) = (map.a(i), map.b(i));
                    let (da, db) = kind.partials(a[ia], b[ib]);
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += gi * da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += gi * db;
                    }
                }
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor) -> TResult<Tensor> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor) -> TResult<Tensor> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> TResult<Tensor> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(&self, other: &Tensor) -> TResult<Tensor> {
        self.binary(other, BinaryKind::Div)
    }

    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
        let value: Vec<f64> = self.value().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            value,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, node| {
                let x = node.parent_value(0);
                let y = node.value.borrow();
                let gx = g
                    .iter()
                    .zip(x.iter().zip(y.iter()))
                    .map(|(gi, (&xi, &yi))| gi * df(xi, yi))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    /// Natural log. Non-positive inputs are rejected when a gradient flows.
    pub fn log(&self) -> TResult<Tensor> {
        if self.requires_grad() {
            if let Some((position, &value)) =
                self.value().iter().enumerate().find(|(_, v)| **v <= 0.0)
            {
                return Err(TensorError::LogDomain { value, position });
            }
        }
        Ok(self.unary(f64::ln, |x, _| 1.0 / x))
    }

    /// Rectifier with relu'(0) = 0.
    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn powf(&self, p: f64) -> Tensor {
        self.unary(move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    /// Forward value is `hard`; the backward pass treats the op as identity
    /// on `self`. This is the straight-through estimator.
    pub fn straight_through(&self, hard: Vec<f64>) -> TResult<Tensor> {
        if hard.len() != self.numel() {
            return Err(TensorError::Length {
                op: "straight_through",
                len: hard.len(),
                shape: self.shape().to_vec(),
            });
        }
        Ok(Tensor::from_op(
            hard,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    // ----------------------------------------------------------------------
    // Shape manipulation
    // ----------------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> TResult<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    pub fn transpose(&self) -> TResult<Tensor> {
        let (r, c) = self.rows_cols("transpose")?;
        let value = transpose_buf(&self.value(), r, c);
        Ok(Tensor::from_op(
            value,
            vec![c, r],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(transpose_buf(g, c, r))]),
        ))
    }

    /// Stacks 2-D tensors with equal column counts along rows.
    pub fn concat_rows(parts: &[&Tensor]) -> TResult<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_rows of zero tensors".into()))?;
        let (_, cols) = first.rows_cols("concat_rows")?;
        let mut rows = Vec::with_capacity(parts.len());
        let mut value = Vec::new();
        for p in parts {
            let (r, c) = p.rows_cols("concat_rows")?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            rows.push(r);
            value.extend_from_slice(&p.value());
        }
        let total: usize = rows.iter().sum();
        Ok(Tensor::from_op(
            value,
            vec![total, cols],
            parts.iter().map(|t| (*t).clone()).collect(),
            Box::new(move |g, _| {
                let mut offset = 0;
                rows.iter()
                    .map(|r| {
                        let part = g[offset * cols..(offset + r) * cols].to_vec();
                        offset += r;
                        Some(part)
                    })
                    .collect()
            }),
        ))
    }

    /// Selects columns of a 2-D tensor, producing `[rows, cols.len()]`.
    pub fn select_cols(&self, cols: &[usize]) -> TResult<Tensor> {
        let (r, c) = self.rows_cols("select_cols")?;
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(TensorError::IndexOutOfRange {
                op: "select_cols",
                index: bad,
                size: c,
            });
        }
        let k = cols.len();
        let cols = cols.to_vec();
        let value = {
            let x = self.value();
            let mut out = Vec::with_capacity(r * k);
            for i in 0..r {
                out.extend(cols.iter().map(|&j| x[i * c + j]));
            }
            out
        };
        Ok(Tensor::from_op(
            value,
            vec![r, k],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for (t, &j) in cols.iter().enumerate() {
                        gx[i * c + j] += g[i * k + t];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    // ----------------------------------------------------------------------
    // Linear algebra
    // ----------------------------------------------------------------------

    pub fn matmul(&self, other: &Tensor) -> TResult<Tensor> {
        let (m, k) = self.rows_cols("matmul")?;
        let (k2, n) = other.rows_cols("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut value = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.value(),
            false,
            &other.value(),
            false,
            &mut value,
        );
        Ok(Tensor::from_op(
            value,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |g, node| {
                let ga = node.parent_requires_grad(0).then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, &node.parent_value(1), true, &mut ga);
                    ga
                });
                let gb = node.parent_requires_grad(1).then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, &node.parent_value(0), true, g, false, &mut gb);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    // ----------------------------------------------------------------------
    // Reductions
    // ----------------------------------------------------------------------

    pub fn sum(&self) -> Tensor {
        let s = self.value().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![s],
            vec![],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum over the columns of a 2-D tensor, producing `[rows]`.
    pub fn row_sum(&self) -> TResult<Tensor> {
        let (r, c) = self.rows_cols("row_sum")?;
        let value = self
            .value()
            .chunks(c.max(1))
            .take(r)
            .map(|row| row.iter().sum())
            .collect();
        let value = if c == 0 { vec![0.0; r] } else { value };
        Ok(Tensor::from_op(
            value,
            vec![r],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = Vec::with_capacity(r * c);
                for &gi in g {
                    gx.extend(std::iter::repeat_n(gi, c));
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn row_mean(&self) -> TResult<Tensor> {
        let (_, c) = self.rows_cols("row_mean")?;
        Ok(self.row_sum()?.scale(1.0 / c.max(1) as f64))
    }

    /// `out[i] = Σ_{j : index[j] = i} src[j]`.
    pub fn scatter_sum(&self, index: &[usize], out_size: usize) -> TResult<Tensor> {
        let (e, f) = self.rows_cols("scatter_sum")?;
        if index.len() != e {
            return Err(TensorError::Length {
                op: "scatter_sum",
                len: index.len(),
                shape: self.shape().to_vec(),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= out_size) {
            return Err(TensorError::IndexOutOfRange {
                op: "scatter_sum",
                index: bad,
                size: out_size,
            });
        }
        let mut value = vec![0.0; out_size * f];
        {
            let src = self.value();
            for (j, &i) in index.iter().enumerate() {
                let dst = &mut value[i * f..(i + 1) * f];
                dst.iter_mut()
                    .zip(&src[j * f..(j + 1) * f])
                    .for_each(|(d, s)| *d += s);
            }
        }
        let index = index.to_vec();
        Ok(Tensor::from_op(
            value,
            vec![out_size, f],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(gather_buf(g, &index, f))]),
        ))
    }

    /// `out[j] = src[index[j]]`.
    pub fn gather_rows(&self, index: &[usize]) -> TResult<Tensor> {
        let (n, f) = self.rows_cols("gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                size: n,
            });
        }
        let value = gather_buf(&self.value(), index, f);
        let index = index.to_vec();
        Ok(Tensor::from_op(
            value,
            vec![index.len(), f],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n * f];
                for (j, &i) in index.iter().enumerate() {
                    gx[i * f..(i + 1) * f]
                        .iter_mut()
                        .zip(&g[j * f..(j + 1) * f])
                        .for_each(|(d, s)| *d += s);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Segment-wise mean; empty segments produce zero rows.
    pub fn segment_mean(&self, index: &[usize], out_size: usize) -> TResult<Tensor> {
        let summed = self.scatter_sum(index, out_size)?;
        let mut counts = vec![0.0; out_size];
        for &i in index {
            counts[i] += 1.0;
        }
        let inv: Vec<f64> = counts
            .iter()
            .map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 })
            .collect();
        summed.mul(&Tensor::new(inv, &[out_size, 1])?)
    }

    /// `out[i] = x[i, cols[i]]`, producing `[rows]`.
    pub fn pick_per_row(&self, cols: &[usize]) -> TResult<Tensor> {
        let (r, c) = self.rows_cols("pick_per_row")?;
        if cols.len() != r {
            return Err(TensorError::Length {
                op: "pick_per_row",
                len: cols.len(),
                shape: self.shape().to_vec(),
            });
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(TensorError::IndexOutOfRange {
                op: "pick_per_row",
                index: bad,
                size: c,
            });
        }
        let value = {
            let x = self.value();
            cols.iter()
                .enumerate()
                .map(|(i, &j)| x[i * c + j])
                .collect()
        };
        let cols = cols.to_vec();
        Ok(Tensor::from_op(
            value,
            vec![r],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; r * c];
                for (i, &j) in cols.iter().enumerate() {
                    gx[i * c + j] = g[i];
                }
                vec![Some(gx)]
            }),
        ))
    }

    // ----------------------------------------------------------------------
    // Row-wise normalizations
    // ----------------------------------------------------------------------

    pub fn softmax_rows(&self) -> TResult<Tensor> {
        let (r, c) = self.rows_cols("softmax_rows")?;
        if c == 0 {
            return Err(TensorError::Invalid("softmax over zero columns".into()));
        }
        let value = softmax_buf(&self.value(), r, c);
        Ok(Tensor::from_op(
            value,
            vec![r, c],
            vec![self.clone()],
            Box::new(move |g, node| {
                let y = node.value.borrow();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let dot: f64 = g[row.clone()]
                        .iter()
                        .zip(&y[row.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for j in row {
                        gx[j] = y[j] * (g[j] - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn log_softmax_rows(&self) -> TResult<Tensor> {
        let (r, c) = self.rows_cols("log_softmax_rows")?;
        if c == 0 {
            return Err(TensorError::Invalid("log_softmax over zero columns".into()));
        }
        let value = {
            let x = self.value();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for j in 0..c {
                    out[i * c + j] = row[j] - lse;
                }
            }
            out
        };
        Ok(Tensor::from_op(
            value,
            vec![r, c],
            vec![self.clone()],
            Box::new(move |g, node| {
                let y = node.value.borrow();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let gsum: f64 = g[row.clone()].iter().sum();
                    for j in row {
                        gx[j] = g[j] - y[j].exp() * gsum;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Rows scaled to unit length: `x / (‖x‖ + eps)`. Exact zero rows are rejected.
    pub fn normalize_rows(&self, eps: f64) -> TResult<Tensor> {
        let (r, c) = self.rows_cols("normalize_rows")?;
        let norms: Vec<f64> = self
            .value()
            .chunks(c.max(1))
            .take(r)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        if let Some(row) = norms.iter().position(|&n| n == 0.0) {
            return Err(TensorError::ZeroNorm { row });
        }
        let value = {
            let x = self.value();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let d = norms[i] + eps;
                for j in 0..c {
                    out[i * c + j] = x[i * c + j] / d;
                }
            }
            out
        };
        Ok(Tensor::from_op(
            value,
            vec![r, c],
            vec![self.clone()],
            Box::new(move |g, node| {
                let x = node.parent_value(0);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let n = norms[i];
                    let d = n + eps;
                    let row = i * c..(i + 1) * c;
                    let xg: f64 = x[row.clone()]
                        .iter()
                        .zip(&g[row.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    let coef = xg / (n * d * d);
                    for j in row {
                        gx[j] = g[j] / d - x[j] * coef;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Row-wise cosine similarity of two equal-shape 2-D tensors, `[rows]`.
    pub fn cosine_rows(&self, other: &Tensor, eps: f64) -> TResult<Tensor> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_rows",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        self.normalize_rows(eps)?
            .mul(&other.normalize_rows(eps)?)?
            .row_sum()
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `self`.
    pub fn cross_entropy(&self, labels: &[usize]) -> TResult<Tensor> {
        let (r, c) = self.rows_cols("cross_entropy")?;
        if labels.len() != r {
            return Err(TensorError::Length {
                op: "cross_entropy",
                len: labels.len(),
                shape: self.shape().to_vec(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                size: c,
            });
        }
        Ok(self.log_softmax_rows()?.pick_per_row(labels)?.mean().neg())
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
        }
    }

    #[inline]
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            BinaryKind::Add => (1.0, 1.0),
            BinaryKind::Sub => (1.0, -1.0),
            BinaryKind::Mul => (b, a),
            BinaryKind::Div => (1.0 / b, -a / (b * b)),
        }
    }
}

/// Numpy-style broadcast of two shapes (trailing dimensions aligned).
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps flat output positions to flat operand positions.
enum OperandMap {
    Identity,
    Scalar,
    Table(Vec<usize>),
}

struct BroadcastMap {
    a: OperandMap,
    b: OperandMap,
}

impl BroadcastMap {
    fn new(a: &[usize], b: &[usize], out: &[usize]) -> Self {
        Self {
            a: Self::operand(a, out),
            b: Self::operand(b, out),
        }
    }

    fn operand(shape: &[usize], out: &[usize]) -> OperandMap {
        if shape == out {
            return OperandMap::Identity;
        }
        if numel(shape) == 1 {
            return OperandMap::Scalar;
        }
        let rank = out.len();
        let offset = rank - shape.len();
        // operand strides in output coordinates; broadcast dims get stride 0
        let mut strides = vec![0; rank];
        let mut acc = 1;
        for i in (0..shape.len()).rev() {
            if shape[i] != 1 {
                strides[i + offset] = acc;
            }
            acc *= shape[i];
        }
        let n = numel(out);
        let mut table = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        for _ in 0..n {
            table.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        OperandMap::Table(table)
    }

    #[inline]
    fn a(&self, i: usize) -> usize {
        Self::lookup(&self.a, i)
    }

    #[inline]
    fn b(&self, i: usize) -> usize {
        Self::lookup(&self.b, i)
    }

    #[inline]
    fn lookup(map: &OperandMap, i: usize) -> usize {
        match map {
            OperandMap::Identity => i,
            OperandMap::Scalar => 0,
            OperandMap::Table(t) => t[i],
        }
    }
}

fn transpose_buf(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn gather_buf(x: &[f64], index: &[usize], f: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(index.len() * f);
    for &i in index {
        out.extend_from_slice(&x[i * f..(i + 1) * f]);
    }
    out
}

pub(crate) fn softmax_buf(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            let e = (row[j] - max).exp();
            out[i * c + j] = e;
            z += e;
        }
        out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// `c += op(a) · op(b)` for row-major buffers, where `op` optionally transposes.
/// Logical shapes: op(a) is m×k, op(b) is k×n, c is m×n.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: buffer lengths cover the strided extents asserted above.
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
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], s: &[usize]) -> Tensor {
        Tensor::new(v.to_vec(), s).unwrap()
    }

    fn p(v: &[f64], s: &[usize]) -> Tensor {
        Tensor::param(v.to_vec(), s).unwrap()
    }

    #[test]
    fn relu_and_add() {
        assert_eq!(
            t(&[-1.0, 0.0, 2.0], &[3]).relu().to_vec(),
            vec![0.0, 0.0, 2.0]
        );
        let s = t(&[1.0, 2.0], &[2]).add(&t(&[3.0, 4.0], &[2])).unwrap();
        assert_eq!(s.to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn exp_derivative_at_zero() {
        let x = p(&[0.0], &[1]);
        x.exp().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let x = p(&[0.0], &[1]);
        x.relu().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let err = t(&[1.0, 2.0], &[2])
            .add(&t(&[1.0, 2.0, 3.0], &[3]))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn log_of_nonpositive_under_gradient_errors() {
        assert!(matches!(
            p(&[1.0, 0.0], &[2]).log(),
            Err(TensorError::LogDomain { position: 1, .. })
        ));
        // constants may take log of zero
        assert_eq!(t(&[0.0], &[1]).log().unwrap().item(), f64::NEG_INFINITY);
    }

    #[test]
    fn matmul_examples() {
        let i2 = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let m = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        assert_eq!(i2.matmul(&m).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        let r = t(&[1.0, 2.0], &[1, 2])
            .matmul(&t(&[3.0, 4.0], &[2, 1]))
            .unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.item(), 11.0);
        assert!(t(&[1.0, 2.0], &[1, 2])
            .matmul(&m.reshape(&[4, 1]).unwrap())
            .is_err());
    }

    #[test]
    fn matmul_backward_rules() {
        let a = p(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = p(&[1.0, -1.0, 0.5, 2.0, -0.5, 1.0], &[3, 2]);
        a.matmul(&b).unwrap().sum().backward().unwrap();
        // d/da sum(ab) = 1·bᵀ: row sums of b
        assert_eq!(a.grad().unwrap(), vec![0.0, 2.5, 0.5, 0.0, 2.5, 0.5]);
        // d/db = aᵀ·1: column sums of a
        assert_eq!(b.grad().unwrap(), vec![5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn scatter_sum_examples() {
        let src = t(&[1.0, 2.0, 3.0], &[3, 1]);
        assert_eq!(
            src.scatter_sum(&[0, 0, 1], 2).unwrap().to_vec(),
            vec![3.0, 3.0]
        );
        let empty = Tensor::zeros(&[0, 1]);
        assert_eq!(empty.scatter_sum(&[], 2).unwrap().to_vec(), vec![0.0, 0.0]);
        assert!(matches!(
            src.scatter_sum(&[0, 2, 1], 2),
            Err(TensorError::IndexOutOfRange { index: 2, .. })
        ));
    }

    #[test]
    fn scatter_backward_is_gather() {
        let src = p(&[1.0, 2.0, 3.0, 4.0], &[4, 1]);
        let w = t(&[10.0, 20.0], &[2, 1]);
        src.scatter_sum(&[1, 0, 1, 1], 2)
            .unwrap()
            .mul(&w)
            .unwrap()
            .sum()
            .backward()
            .unwrap();
        assert_eq!(src.grad().unwrap(), vec![20.0, 10.0, 20.0, 20.0]);
    }

    #[test]
    fn softmax_cosine_cross_entropy_examples() {
        assert_eq!(
            t(&[0.0, 0.0], &[1, 2]).softmax_rows().unwrap().to_vec(),
            vec![0.5, 0.5]
        );
        let e1 = t(&[1.0, 0.0], &[1, 2]);
        let e2 = t(&[0.0, 1.0], &[1, 2]);
        assert!((e1.cosine_rows(&e1, 1e-12).unwrap().item() - 1.0).abs() < 1e-9);
        assert_eq!(e1.cosine_rows(&e2, 1e-12).unwrap().item(), 0.0);
        let ce = t(&[0.0, 0.0], &[1, 2]).cross_entropy(&[0]).unwrap().item();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(
            t(&[0.0, 0.0], &[1, 2]).cosine_rows(&e1, 1e-12),
            Err(TensorError::ZeroNorm { row: 0 })
        ));
    }

    #[test]
    fn backward_accumulates_without_zero_grad() {
        let x = p(&[1.0, 2.0], &[2]);
        let root = x.mul(&x).unwrap().sum();
        root.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
        root.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let x = p(&[1.0, 2.0], &[2]);
        assert!(matches!(x.backward(), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn broadcasting_bias_and_column() {
        let x = p(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let bias = p(&[10.0, 20.0, 30.0], &[3]);
        let col = p(&[2.0, 3.0], &[2, 1]);
        let y = x.add(&bias).unwrap().mul(&col).unwrap();
        assert_eq!(y.to_vec(), vec![22.0, 44.0, 66.0, 42.0, 75.0, 108.0]);
        y.sum().backward().unwrap();
        assert_eq!(bias.grad().unwrap(), vec![5.0, 5.0, 5.0]);
        assert_eq!(col.grad().unwrap(), vec![66.0, 75.0]);
        assert!(t(&[1.0, 2.0], &[2]).add(&x).is_err());
    }

    #[test]
    fn straight_through_forward_is_hard_backward_is_identity() {
        let soft = p(&[0.3, 0.7], &[2]);
        let st = soft.straight_through(vec![0.0, 1.0]).unwrap();
        assert_eq!(st.to_vec(), vec![0.0, 1.0]);
        st.scale(2.0).sum().backward().unwrap();
        assert_eq!(soft.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn shared_subexpression_gets_both_contributions() {
        let x = p(&[3.0], &[1]);
        let y = x.scale(2.0);
        let z = y.mul(&y).unwrap().add(&y).unwrap().sum();
        z.backward().unwrap();
        // z = 4x² + 2x → dz/dx = 8x + 2
        assert_eq!(x.grad().unwrap(), vec![26.0]);
    }
}
