//! Dense row-major `f64` matrices with reverse-mode gradient tracking.
//!
//! Every operation builds a node in a dynamically constructed computation
//! graph. Calling [`Matrix::backward`] on a scalar result walks the graph in
//! reverse topological order and accumulates gradients into every node that
//! requires them. Matrices are immutable once an operation completes; only
//! leaf parameters may have their data rewritten between steps (optimizer
//! updates, finite-difference probes).

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{PerftError, Result};

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Node {
    rows: usize,
    cols: usize,
    data: RefCell<Vec<f64>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Matrix>,
    backward: Option<BackwardFn>,
}

/// A dense matrix participating in the gradient graph.
///
/// Cloning is cheap: clones share the same underlying node.
#[derive(Clone)]
pub struct Matrix {
    node: Rc<Node>,
}

impl std::fmt::Debug for Matrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Matrix")
            .field("rows", &self.rows())
            .field("cols", &self.cols())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(PerftError::NonFinite(op))
    }
}

impl Matrix {
    fn new_node(
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        parents: Vec<Matrix>,
        backward: Option<BackwardFn>,
        op: &'static str,
    ) -> Result<Matrix> {
        debug_assert_eq!(data.len(), rows * cols);
        check_finite(&data, op)?;
        // Constant-fold: if no parent needs a gradient, drop the graph edges.
        let track = parents.iter().any(Matrix::needs_grad);
        let (parents, backward) = if track {
            (parents, backward)
        } else {
            (Vec::new(), None)
        };
        Ok(Matrix {
            node: Rc::new(Node {
                rows,
                cols,
                data: RefCell::new(data),
                requires_grad: Cell::new(false),
                grad: RefCell::new(None),
                parents,
                backward,
            }),
        })
    }

    /// Leaf matrix from row-major data.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(PerftError::Argument(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Matrix::new_node(rows, cols, data, Vec::new(), None, "from_vec")
    }

    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, vec![0.0; rows * cols]).expect("zeros is always valid")
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Matrix> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix::from_vec(rows, cols, data)
    }

    pub fn identity(n: usize) -> Matrix {
        Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 }).expect("identity is valid")
    }

    pub fn scalar(v: f64) -> Result<Matrix> {
        Matrix::from_vec(1, 1, vec![v])
    }

    /// Mark this leaf as a trainable parameter.
    pub fn with_grad(self) -> Matrix {
        assert!(
            self.node.backward.is_none(),
            "only leaf matrices can be marked trainable"
        );
        self.node.requires_grad.set(true);
        self
    }

    pub fn set_requires_grad(&self, flag: bool) {
        assert!(self.node.backward.is_none(), "only leaves can toggle requires_grad");
        self.node.requires_grad.set(flag);
    }

    pub fn rows(&self) -> usize {
        self.node.rows
    }

    pub fn cols(&self) -> usize {
        self.node.cols
    }

    pub fn len(&self) -> usize {
        self.node.rows * self.node.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad.get()
    }

    fn needs_grad(&self) -> bool {
        self.node.requires_grad.get() || self.node.backward.is_some()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.node.data.borrow()[r * self.node.cols + c]
    }

    /// Copy of the row-major data.
    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    /// Value of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() requires a 1x1 matrix");
        self.node.data.borrow()[0]
    }

    /// Two matrices sharing the same node.
    pub fn same_node(&self, other: &Matrix) -> bool {
        Rc::ptr_eq(&self.node, &other.node)
    }

    /// Gradient accumulated by the last backward pass, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Rewrite the data of a leaf in place (optimizer step, finite-difference probe).
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        assert!(self.node.backward.is_none(), "only leaves may be mutated");
        f(&mut self.node.data.borrow_mut());
    }

    /// Leaf copy of this matrix, detached from the graph.
    pub fn detach(&self) -> Matrix {
        Matrix::from_vec(self.rows(), self.cols(), self.to_vec()).expect("detach preserves shape")
    }

    fn accumulate_grad(&self, g: &[f64]) {
        if !self.needs_grad() {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        let grad = slot.get_or_insert_with(|| vec![0.0; self.len()]);
        for (dst, src) in grad.iter_mut().zip(g) {
            *dst += *src;
        }
    }

    fn shape_err(
        op: &'static str,
        a: &Matrix,
        b: &Matrix,
    ) -> PerftError {
        PerftError::Shape {
            op,
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        }
    }

    /// Reverse-mode pass from a scalar output.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(PerftError::Argument(format!(
                "backward requires a 1x1 matrix, got {}x{}",
                self.rows(),
                self.cols()
            )));
        }
        let order = topo_order(self);
        self.accumulate_for_backward();
        for m in order.iter().rev() {
            let grad = m.node.grad.borrow().clone();
            if let (Some(g), Some(bw)) = (grad, m.node.backward.as_ref()) {
                bw(&g);
            }
        }
        Ok(())
    }

    fn accumulate_for_backward(&self) {
        // Seed the scalar root with gradient 1 even if it is a constant leaf.
        let mut slot = self.node.grad.borrow_mut();
        let grad = slot.get_or_insert_with(|| vec![0.0; 1]);
        grad[0] += 1.0;
    }

    // ---- operations -----------------------------------------------------

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols() != other.rows() {
            return Err(Matrix::shape_err("matmul", self, other));
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let out = mm(&self.node.data.borrow(), &other.node.data.borrow(), m, k, n);
        let a = self.clone();
        let b = other.clone();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            // dA = dC * B^T, dB = A^T * dC
            let da = mm_nt(g, &b.node.data.borrow(), m, n, k);
            a.accumulate_grad(&da);
            let db = mm_tn(&a.node.data.borrow(), g, m, k, n);
            b.accumulate_grad(&db);
        });
        Matrix::new_node(m, n, out, vec![self.clone(), other.clone()], Some(backward), "matmul")
    }

    pub fn transpose(&self) -> Result<Matrix> {
        let (m, n) = (self.rows(), self.cols());
        let src = self.node.data.borrow();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = src[r * n + c];
            }
        }
        drop(src);
        let a = self.clone();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            let mut da = vec![0.0; m * n];
            for r in 0..m {
                for c in 0..n {
                    da[r * n + c] = g[c * m + r];
                }
            }
            a.accumulate_grad(&da);
        });
        Matrix::new_node(n, m, out, vec![self.clone()], Some(backward), "transpose")
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip("add", other, |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip("sub", other, |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&self, other: &Matrix) -> Result<Matrix> {
        self.zip("mul", other, |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    fn zip(
        &self,
        op: &'static str,
        other: &Matrix,
        f: fn(f64, f64) -> f64,
        df: fn(f64, f64, f64) -> (f64, f64),
    ) -> Result<Matrix> {
        if self.rows() != other.rows() || self.cols() != other.cols() {
            return Err(Matrix::shape_err(op, self, other));
        }
        let out: Vec<f64> = {
            let a = self.node.data.borrow();
            let b = other.node.data.borrow();
            a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        let a = self.clone();
        let b = other.clone();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            let (da, db): (Vec<f64>, Vec<f64>) = {
                let x = a.node.data.borrow();
                let y = b.node.data.borrow();
                g.iter()
                    .zip(x.iter().zip(y.iter()))
                    .map(|(&g, (&x, &y))| df(x, y, g))
                    .unzip()
            };
            a.accumulate_grad(&da);
            b.accumulate_grad(&db);
        });
        Matrix::new_node(
            self.rows(),
            self.cols(),
            out,
            vec![self.clone(), other.clone()],
            Some(backward),
            op,
        )
    }

    pub fn scale(&self, c: f64) -> Result<Matrix> {
        let out: Vec<f64> = self.node.data.borrow().iter().map(|v| v * c).collect();
        let a = self.clone();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            let da: Vec<f64> = g.iter().map(|v| v * c).collect();
            a.accumulate_grad(&da);
        });
        Matrix::new_node(self.rows(), self.cols(), out, vec![self.clone()], Some(backward), "scale")
    }

    /// Element-wise SiLU: `x * sigmoid(x)`.
    pub fn silu(&self) -> Result<Matrix> {
        let out: Vec<f64> = self.node.data.borrow().iter().map(|&x| x * sigmoid(x)).collect();
        let a = self.clone();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            let da: Vec<f64> = {
                let x = a.node.data.borrow();
                g.iter()
                    .zip(x.iter())
                    .map(|(&g, &x)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect()
            };
            a.accumulate_grad(&da);
        });
        Matrix::new_node(self.rows(), self.cols(), out, vec![self.clone()], Some(backward), "silu")
    }

    /// Element-wise reciprocal. Inputs must be nonzero.
    pub fn recip(&self) -> Result<Matrix> {
        let out: Vec<f64> = self.node.data.borrow().iter().map(|&x| 1.0 / x).collect();
        let a = self.clone();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            let da: Vec<f64> = {
                let x = a.node.data.borrow();
                g.iter().zip(x.iter()).map(|(&g, &x)| -g / (x * x)).collect()
            };
            a.accumulate_grad(&da);
        });
        Matrix::new_node(self.rows(), self.cols(), out, vec![self.clone()], Some(backward), "recip")
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&self) -> Result<Matrix> {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        {
            let src = self.node.data.borrow();
            for r in 0..m {
                softmax_into(&src[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
            }
        }
        let probs = out.clone();
        let a = self.clone();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            let mut da = vec![0.0; m * n];
            for r in 0..m {
                let p = &probs[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let dot: f64 = p.iter().zip(gr).map(|(&p, &g)| p * g).sum();
                for c in 0..n {
                    da[r * n + c] = p[c] * (gr[c] - dot);
                }
            }
            a.accumulate_grad(&da);
        });
        Matrix::new_node(m, n, out, vec![self.clone()], Some(backward), "softmax_rows")
    }

    /// Row-wise `log(sum(exp(row)))`, stabilized; result is a column vector.
    pub fn logsumexp_rows(&self) -> Result<Matrix> {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m];
        {
            let src = self.node.data.borrow();
            for r in 0..m {
                out[r] = logsumexp(&src[r * n..(r + 1) * n]);
            }
        }
        let a = self.clone();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            let mut da = vec![0.0; m * n];
            {
                let src = a.node.data.borrow();
                let mut p = vec![0.0; n];
                for r in 0..m {
                    softmax_into(&src[r * n..(r + 1) * n], &mut p);
                    for c in 0..n {
                        da[r * n + c] = g[r] * p[c];
                    }
                }
            }
            a.accumulate_grad(&da);
        });
        Matrix::new_node(m, 1, out, vec![self.clone()], Some(backward), "logsumexp_rows")
    }

    /// Scale row `t` by `s[t]` where `s` is a column vector.
    pub fn scale_rows(&self, s: &Matrix) -> Result<Matrix> {
        if s.cols() != 1 || s.rows() != self.rows() {
            return Err(Matrix::shape_err("scale_rows", self, s));
        }
        let (m, n) = (self.rows(), self.cols());
        let out: Vec<f64> = {
            let a = self.node.data.borrow();
            let sv = s.node.data.borrow();
            (0..m * n).map(|i| a[i] * sv[i / n]).collect()
        };
        let a = self.clone();
        let sm = s.clone();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            let (da, ds) = {
                let av = a.node.data.borrow();
                let sv = sm.node.data.borrow();
                let mut da = vec![0.0; m * n];
                let mut ds = vec![0.0; m];
                for r in 0..m {
                    for c in 0..n {
                        let i = r * n + c;
                        da[i] = g[i] * sv[r];
                        ds[r] += g[i] * av[i];
                    }
                }
                (da, ds)
            };
            a.accumulate_grad(&da);
            sm.accumulate_grad(&ds);
        });
        Matrix::new_node(m, n, out, vec![self.clone(), s.clone()], Some(backward), "scale_rows")
    }

    /// Select rows by index (duplicates allowed).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let (m, n) = (self.rows(), self.cols());
        for &i in indices {
            if i >= m {
                return Err(PerftError::Argument(format!("row index {i} out of range for {m} rows")));
            }
        }
        let out: Vec<f64> = {
            let src = self.node.data.borrow();
            indices
                .iter()
                .flat_map(|&i| src[i * n..(i + 1) * n].to_vec())
                .collect()
        };
        let a = self.clone();
        let idx = indices.to_vec();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            let mut da = vec![0.0; m * n];
            for (k, &i) in idx.iter().enumerate() {
                for c in 0..n {
                    da[i * n + c] += g[k * n + c];
                }
            }
            a.accumulate_grad(&da);
        });
        Matrix::new_node(indices.len(), n, out, vec![self.clone()], Some(backward), "gather_rows")
    }

    /// Scatter-add rows of `self` (k x n) into a zero matrix with `total_rows` rows.
    pub fn scatter_add_rows(&self, indices: &[usize], total_rows: usize) -> Result<Matrix> {
        if indices.len() != self.rows() {
            return Err(PerftError::Argument(format!(
                "scatter_add_rows: {} indices for {} rows",
                indices.len(),
                self.rows()
            )));
        }
        let n = self.cols();
        for &i in indices {
            if i >= total_rows {
                return Err(PerftError::Argument(format!(
                    "row index {i} out of range for {total_rows} rows"
                )));
            }
        }
        let mut out = vec![0.0; total_rows * n];
        {
            let src = self.node.data.borrow();
            for (k, &i) in indices.iter().enumerate() {
                for c in 0..n {
                    out[i * n + c] += src[k * n + c];
                }
            }
        }
        let a = self.clone();
        let idx = indices.to_vec();
        let k_rows = self.rows();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            let mut da = vec![0.0; k_rows * n];
            for (k, &i) in idx.iter().enumerate() {
                for c in 0..n {
                    da[k * n + c] = g[i * n + c];
                }
            }
            a.accumulate_grad(&da);
        });
        Matrix::new_node(total_rows, n, out, vec![self.clone()], Some(backward), "scatter_add_rows")
    }

    /// Select individual entries `(row, col)` as a column vector.
    pub fn gather_entries(&self, entries: &[(usize, usize)]) -> Result<Matrix> {
        let (m, n) = (self.rows(), self.cols());
        for &(r, c) in entries {
            if r >= m || c >= n {
                return Err(PerftError::Argument(format!(
                    "entry ({r},{c}) out of range for {m}x{n}"
                )));
            }
        }
        let out: Vec<f64> = {
            let src = self.node.data.borrow();
            entries.iter().map(|&(r, c)| src[r * n + c]).collect()
        };
        let a = self.clone();
        let idx = entries.to_vec();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            let mut da = vec![0.0; m * n];
            for (k, &(r, c)) in idx.iter().enumerate() {
                da[r * n + c] += g[k];
            }
            a.accumulate_grad(&da);
        });
        Matrix::new_node(entries.len(), 1, out, vec![self.clone()], Some(backward), "gather_entries")
    }

    /// Sum of all entries as a 1x1 matrix.
    pub fn sum(&self) -> Result<Matrix> {
        let total: f64 = self.node.data.borrow().iter().sum();
        let a = self.clone();
        let len = self.len();
        let backward: BackwardFn = Box::new(move |g: &[f64]| {
            a.accumulate_grad(&vec![g[0]; len]);
        });
        Matrix::new_node(1, 1, vec![total], vec![self.clone()], Some(backward), "sum")
    }

    /// Sum of squared entries as a 1x1 matrix.
    pub fn sum_squares(&self) -> Result<Matrix> {
        let sq = self.mul(self)?;
        sq.sum()
    }
}

fn topo_order(root: &Matrix) -> Vec<Matrix> {
    let mut order = Vec::new();
    let mut visited: HashSet<*const Node> = HashSet::new();
    let mut stack: Vec<(Matrix, bool)> = vec![(root.clone(), false)];
    while let Some((m, expanded)) = stack.pop() {
        if expanded {
            order.push(m);
            continue;
        }
        let ptr = Rc::as_ptr(&m.node);
        if !visited.insert(ptr) {
            continue;
        }
        stack.push((m.clone(), true));
        for p in &m.node.parents {
            stack.push((p.clone(), false));
        }
    }
    order
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

fn logsumexp(src: &[f64]) -> f64 {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = src.iter().map(|&s| (s - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of a slice, allocating the output.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    softmax_into(v, &mut out);
    out
}

/// Indices and values of the `k` largest entries. Ties break toward the
/// lowest index; indices come back in ascending order.
pub fn top_k(v: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if k == 0 || k > v.len() {
        return Err(PerftError::Argument(format!(
            "top_k: k={k} out of range for length {}",
            v.len()
        )));
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
    let mut idx: Vec<usize> = order[..k].to_vec();
    idx.sort_unstable();
    let vals = idx.iter().map(|&i| v[i]).collect();
    Ok((idx, vals))
}

// Raw row-major matmul kernels used by forward and backward paths.

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[l * n + j];
            }
        }
    }
    out
}

/// `a (m x n) * b^T (n x k)` where `b` is `k x n` row-major.
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            let mut acc = 0.0;
            for l in 0..n {
                acc += a[i * n + l] * b[j * n + l];
            }
            out[i * k + j] = acc;
        }
    }
    out
}

/// `a^T (k x m) * b (m x n)` where `a` is `m x k` row-major.
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for l in 0..m {
        for i in 0..k {
            let av = a[l * k + i];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[l * n + j];
            }
        }
    }
    out
}
