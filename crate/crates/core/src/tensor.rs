//! Dense row-major matrices with a tape-based reverse-mode autodiff.
//!
//! Operations are recorded on a [`Tape`] in execution order, which is a
//! topological order of the computation, so [`Tape::backward`] is a single
//! reverse sweep. Only first-order gradients are supported.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for {size} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("mape_loss: truth entry {0} is zero")]
    ZeroTruth(usize),
    #[error("backward needs a 1x1 loss, got {0:?}")]
    NotScalar(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c (+)= op(a) * op(b)` where `op` optionally transposes. `a` is stored as
/// `a_rows x a_cols` before transposition.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (m, k) = if trans_a {
        (a_cols, a_rows)
    } else {
        (a_rows, a_cols)
    };
    let n = if trans_b { b_rows } else { b_cols };
    debug_assert_eq!(k, if trans_b { b_cols } else { b_rows });
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, a_cols as isize)
    } else {
        (a_cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b_cols as isize)
    } else {
        (b_cols as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe exactly the row-major buffers `a`
    // (a_rows x a_cols), `b` (b_rows x b_cols) and `c` (m x n), whose lengths
    // are checked by the callers' shape validation.
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

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Mask(Var, Vec<f64>),
    Concat(Var, Var),
    Stack(Vec<Var>),
    ScatterSum(Var, Vec<usize>),
    Mean(Var),
    Mape(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape.len() != 2 || bv.shape.len() != 2 || av.cols() != bv.rows() {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = Tensor::zeros(m, n);
        gemm(
            &av.data,
            m,
            k,
            false,
            &bv.data,
            k,
            n,
            false,
            &mut out.data,
            false,
        );
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.value(a).same_shape(self.value(b), "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: av.shape.clone(),
                rhs: rv.shape.clone(),
            });
        }
        let n = av.cols();
        let mut out = av.clone();
        for chunk in out.data.chunks_mut(n.max(1)) {
            for (o, r) in chunk.iter_mut().zip(&rv.data) {
                *o += r;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v = v.max(0.0);
        }
        self.push(out, Op::Relu(a))
    }

    /// Inverted dropout: zeroes entries with probability `p` and scales the
    /// survivors by `1 / (1 - p)`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mut out = self.value(a).clone();
        for (o, m) in out.data.iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Mask(a, mask))
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(TensorError::Shape {
                op: "concat",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let (m, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(m * (ca + cb));
        for r in 0..m {
            data.extend_from_slice(&av.data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv.data[r * cb..(r + 1) * cb]);
        }
        let out = Tensor::matrix(m, ca + cb, data)?;
        Ok(self.push(out, Op::Concat(a, b)))
    }

    /// Row-wise stacking of matrices with equal column counts.
    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let cols = parts.first().map_or(0, |p| self.value(*p).cols());
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(TensorError::Shape {
                    op: "vstack",
                    lhs: vec![rows, cols],
                    rhs: v.shape.clone(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(&v.data);
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::Stack(parts.to_vec())))
    }

    /// Sums rows of `values` into `out_rows` buckets given by `index`.
    pub fn scatter_sum(
        &mut self,
        values: Var,
        index: &[usize],
        out_rows: usize,
    ) -> Result<Var, TensorError> {
        let v = self.value(values);
        if v.rows() != index.len() {
            return Err(TensorError::Shape {
                op: "scatter_sum",
                lhs: v.shape.clone(),
                rhs: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= out_rows) {
            return Err(TensorError::IndexOutOfRange {
                op: "scatter_sum",
                index: bad,
                size: out_rows,
            });
        }
        let d = v.cols();
        let mut out = Tensor::zeros(out_rows, d);
        for (row, &i) in index.iter().enumerate() {
            let src = &v.data[row * d..(row + 1) * d];
            for (o, s) in out.data[i * d..(i + 1) * d].iter_mut().zip(src) {
                *o += s;
            }
        }
        Ok(self.push(out, Op::ScatterSum(values, index.to_vec())))
    }

    /// Mean over all entries, as a `1 x 1` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = if v.is_empty() {
            0.0
        } else {
            v.data.iter().sum::<f64>() / v.len() as f64
        };
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// `mean(|pred - truth| / |truth|)` over a column of predictions.
    pub fn mape_loss(&mut self, pred: Var, truth: &[f64]) -> Result<Var, TensorError> {
        let p = self.value(pred);
        if p.len() != truth.len() {
            return Err(TensorError::Shape {
                op: "mape_loss",
                lhs: p.shape.clone(),
                rhs: vec![truth.len()],
            });
        }
        if let Some(i) = truth.iter().position(|t| *t == 0.0) {
            return Err(TensorError::ZeroTruth(i));
        }
        let loss = mape(&p.data, truth);
        Ok(self.push(Tensor::scalar(loss), Op::Mape(pred, truth.to_vec())))
    }

    /// Reverse sweep from a `1 x 1` loss. Previous gradients are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let shape = &self.nodes[loss.0].value.shape;
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(shape.clone()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Tensor) {
        match &mut self.nodes[v.0].grad {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut ga = Tensor::zeros(m, k);
                gemm(
                    &g.data,
                    m,
                    n,
                    false,
                    &bv.data,
                    k,
                    n,
                    true,
                    &mut ga.data,
                    false,
                );
                let mut gb = Tensor::zeros(k, n);
                gemm(
                    &av.data,
                    m,
                    k,
                    true,
                    &g.data,
                    m,
                    n,
                    false,
                    &mut gb.data,
                    false,
                );
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            &Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            &Op::AddRow(a, row) => {
                let n = g.cols();
                let mut gr = Tensor::zeros(1, n);
                for chunk in g.data.chunks(n.max(1)) {
                    for (o, v) in gr.data.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                self.accumulate(a, g.clone());
                self.accumulate(row, gr);
            }
            &Op::Relu(a) => {
                let mut ga = g.clone();
                for (o, x) in ga.data.iter_mut().zip(&node.value.data) {
                    if *x <= 0.0 {
                        *o = 0.0;
                    }
                }
                self.accumulate(a, ga);
            }
            Op::Mask(a, mask) => {
                let a = *a;
                let mut ga = g.clone();
                for (o, m) in ga.data.iter_mut().zip(mask) {
                    *o *= m;
                }
                self.accumulate(a, ga);
            }
            &Op::Concat(a, b) => {
                let (ca, cb) = (self.value(a).cols(), self.value(b).cols());
                let m = g.rows();
                let mut ga = Vec::with_capacity(m * ca);
                let mut gb = Vec::with_capacity(m * cb);
                for r in 0..m {
                    let row = &g.data[r * (ca + cb)..(r + 1) * (ca + cb)];
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                let ga = Tensor::matrix(m, ca, ga).expect("shape");
                let gb = Tensor::matrix(m, cb, gb).expect("shape");
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Stack(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let n = self.value(p).len();
                    let shape = self.value(p).shape.clone();
                    let part =
                        Tensor::new(shape, g.data[offset..offset + n].to_vec()).expect("shape");
                    offset += n;
                    self.accumulate(p, part);
                }
            }
            Op::ScatterSum(values, index) => {
                let values = *values;
                let d = g.cols();
                let mut gv = Tensor::zeros(index.len(), d);
                for (row, &j) in index.iter().enumerate() {
                    gv.data[row * d..(row + 1) * d].copy_from_slice(&g.data[j * d..(j + 1) * d]);
                }
                self.accumulate(values, gv);
            }
            &Op::Mean(a) => {
                let shape = self.value(a).shape.clone();
                let len = self.value(a).len().max(1);
                let data = vec![g.data[0] / len as f64; self.value(a).len()];
                self.accumulate(a, Tensor::new(shape, data).expect("shape"));
            }
            Op::Mape(pred, truth) => {
                let pred = *pred;
                let p = self.value(pred);
                let n = truth.len() as f64;
                let data = p
                    .data
                    .iter()
                    .zip(truth)
                    .map(|(p, t)| {
                        let diff = p - t;
                        let sign = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        g.data[0] * sign / (t.abs() * n)
                    })
                    .collect();
                let shape = p.shape.clone();
                self.accumulate(pred, Tensor::new(shape, data).expect("shape"));
            }
        }
    }
}

/// Mean absolute percentage error as a fraction (0.1 = 10%).
pub fn mape(pred: &[f64], truth: &[f64]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs() / t.abs())
        .sum::<f64>()
        / truth.len() as f64
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), TensorError> {
        if params.len() != grads.len() {
            return Err(TensorError::Shape {
                op: "adam",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        for (p, g) in params.iter().zip(grads) {
            p.same_shape(g, "adam")?;
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pi, gi), mi), vi) in p.data.iter_mut().zip(&g.data).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
