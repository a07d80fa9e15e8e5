use super::{AutodiffError, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    /// Leaf or a value computed from operands that need no gradient.
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    GatherCols(Var, Vec<usize>),
    ConcatCols(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Tape of recorded operations.
///
/// Nodes are appended in evaluation order, so every operand index is
/// smaller than the index of the node that uses it and the backward sweep
/// is a plain reverse iteration. A graph is built fresh for every training
/// step and dropped afterwards.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `c = beta * c + op(a) * op(b)` for row-major operands.
///
/// `a` is `m x k` after the optional transpose, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover the strided extents checked above.
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

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that does not take part in differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Records a leaf whose gradient will be reported by `backward`.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var, AutodiffError> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, AutodiffError> {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, out, op, &[a])
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, AutodiffError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    fn expect_matrix(&self, name: &'static str, a: Var) -> Result<(usize, usize), AutodiffError> {
        let t = &self.nodes[a.0].value;
        if !t.is_matrix() {
            return Err(AutodiffError::InvalidShape {
                shape: t.shape().to_vec(),
                reason: name,
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.expect_matrix("matmul expects matrices", a)?;
        let (k2, n) = self.expect_matrix("matmul expects matrices", b)?;
        if k != k2 {
            return Err(shape_err("matmul", &self.nodes[a.0].value, &self.nodes[b.0].value));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.nodes[a.0].value.data(),
            false,
            self.nodes[b.0].value.data(),
            false,
            0.0,
            &mut out,
        );
        let out = Tensor::matrix(m, n, out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary_same_shape("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary_same_shape("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary_same_shape("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `[1, cols]` (or `[cols]`) row to every row of a `[rows, cols]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.expect_matrix("add_bias expects a matrix", x)?;
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if bv.len() != cols || bv.rows() != 1 && bv.shape().len() == 2 {
            return Err(shape_err("add_bias", xv, bv));
        }
        let mut data = xv.data().to_vec();
        let b = bv.data();
        for r in 0..rows {
            for (d, bb) in data[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *d += bb;
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        self.push("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        self.unary("scale", a, Op::Scale(a, c), |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        self.unary("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        if let Some(&bad) = self.nodes[a.0].value.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(AutodiffError::Domain { op: "log", value: bad });
        }
        self.unary("log", a, Op::Log(a), f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("tanh", a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("softplus", a, Op::Softplus(a), softplus)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("square", a, Op::Square(a), |x| x * x)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, AutodiffError> {
        self.unary("clamp", a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Sum of all elements as a shape-`[1]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.nodes[a.0].value.data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = &self.nodes[a.0].value;
        if t.is_empty() {
            return Err(AutodiffError::InvalidShape {
                shape: t.shape().to_vec(),
                reason: "mean of empty tensor",
            });
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Per-row sum: `[rows, cols] -> [rows, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.expect_matrix("sum_rows expects a matrix", a)?;
        let d = self.nodes[a.0].value.data();
        let out: Vec<f64> = (0..rows).map(|r| d[r * cols..(r + 1) * cols].iter().sum()).collect();
        let out = Tensor::matrix(rows, 1, out)?;
        self.push("sum_rows", out, Op::SumRows(a), &[a])
    }

    /// Selects columns by index, in the given order (duplicates allowed).
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.expect_matrix("gather_cols expects a matrix", a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(AutodiffError::IndexOutOfRange { index: bad, len: cols });
        }
        let d = self.nodes[a.0].value.data();
        let k = idx.len();
        let mut out = Vec::with_capacity(rows * k);
        for r in 0..rows {
            let row = &d[r * cols..(r + 1) * cols];
            out.extend(idx.iter().map(|&i| row[i]));
        }
        let out = Tensor::matrix(rows, k, out)?;
        self.push("gather_cols", out, Op::GatherCols(a, idx.to_vec()), &[a])
    }

    /// Horizontal concatenation `[a | b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ra, ca) = self.expect_matrix("concat_cols expects matrices", a)?;
        let (rb, cb) = self.expect_matrix("concat_cols expects matrices", b)?;
        if ra != rb {
            return Err(shape_err("concat_cols", &self.nodes[a.0].value, &self.nodes[b.0].value));
        }
        let (ad, bd) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&ad[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bd[r * cb..(r + 1) * cb]);
        }
        let out = Tensor::matrix(ra, ca + cb, out)?;
        self.push("concat_cols", out, Op::ConcatCols(a, b), &[a, b])
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns the gradient of `loss` with respect to every node that
    /// requires one. Fan-out contributions are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;

        macro_rules! elementwise {
            ($a:expr, |$x:ident, $y:ident| $body:expr) => {{
                let a = $a;
                if self.wants(a) {
                    let av = val(a).data();
                    let od = out.data();
                    accumulate(&mut grads[a.0], val(a).shape(), |d| {
                        for ((dd, (&$x, &$y)), gg) in d.iter_mut().zip(av.iter().zip(od)).zip(gd) {
                            *dd += gg * $body;
                        }
                    });
                }
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if self.wants(*a) {
                    let bd = val(*b).data();
                    accumulate(&mut grads[a.0], val(*a).shape(), |d| {
                        gemm(m, n, k, gd, false, bd, true, 1.0, d);
                    });
                }
                if self.wants(*b) {
                    let ad = val(*a).data();
                    accumulate(&mut grads[b.0], val(*b).shape(), |d| {
                        gemm(k, m, n, ad, true, gd, false, 1.0, d);
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(&mut grads[v.0], val(v).shape(), |d| add_into(d, gd, 1.0));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], val(*a).shape(), |d| add_into(d, gd, 1.0));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], val(*b).shape(), |d| add_into(d, gd, -1.0));
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(v) {
                        let od = val(other).data();
                        accumulate(&mut grads[v.0], val(v).shape(), |d| {
                            for ((dd, gg), oo) in d.iter_mut().zip(gd).zip(od) {
                                *dd += gg * oo;
                            }
                        });
                    }
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], val(*x).shape(), |d| add_into(d, gd, 1.0));
                }
                if self.wants(*b) {
                    let cols = val(*b).len();
                    accumulate(&mut grads[b.0], val(*b).shape(), |d| {
                        for row in gd.chunks_exact(cols) {
                            add_into(d, row, 1.0);
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], val(*a).shape(), |d| add_into(d, gd, *c));
                }
            }
            Op::AddScalar(a) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], val(*a).shape(), |d| add_into(d, gd, 1.0));
                }
            }
            Op::Exp(a) => elementwise!(*a, |_x, y| y),
            Op::Log(a) => elementwise!(*a, |x, _y| 1.0 / x),
            Op::Tanh(a) => elementwise!(*a, |_x, y| 1.0 - y * y),
            Op::Relu(a) => elementwise!(*a, |x, _y| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Sigmoid(a) => elementwise!(*a, |_x, y| y * (1.0 - y)),
            Op::Softplus(a) => elementwise!(*a, |x, _y| sigmoid(x)),
            Op::Square(a) => elementwise!(*a, |x, _y| 2.0 * x),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                elementwise!(*a, |x, _y| if x >= lo && x <= hi { 1.0 } else { 0.0 })
            }
            Op::Sum(a) | Op::Mean(a) => {
                if self.wants(*a) {
                    let n = val(*a).len() as f64;
                    let s = if matches!(node.op, Op::Mean(_)) { gd[0] / n } else { gd[0] };
                    accumulate(&mut grads[a.0], val(*a).shape(), |d| {
                        for dd in d.iter_mut() {
                            *dd += s;
                        }
                    });
                }
            }
            Op::SumRows(a) => {
                if self.wants(*a) {
                    let cols = val(*a).shape()[1];
                    accumulate(&mut grads[a.0], val(*a).shape(), |d| {
                        for (row, gg) in d.chunks_exact_mut(cols.max(1)).zip(gd) {
                            for dd in row {
                                *dd += gg;
                            }
                        }
                    });
                }
            }
            Op::GatherCols(a, idx) => {
                if self.wants(*a) {
                    let cols = val(*a).shape()[1];
                    let k = idx.len();
                    accumulate(&mut grads[a.0], val(*a).shape(), |d| {
                        if k == 0 {
                            return;
                        }
                        for (row, grow) in d.chunks_exact_mut(cols).zip(gd.chunks_exact(k)) {
                            for (&j, gg) in idx.iter().zip(grow) {
                                row[j] += gg;
                            }
                        }
                    });
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).shape()[1];
                let cb = val(*b).shape()[1];
                let total = ca + cb;
                if total == 0 {
                    return;
                }
                if self.wants(*a) && ca > 0 {
                    accumulate(&mut grads[a.0], val(*a).shape(), |d| {
                        for (row, grow) in d.chunks_exact_mut(ca).zip(gd.chunks_exact(total)) {
                            add_into(row, &grow[..ca], 1.0);
                        }
                    });
                }
                if self.wants(*b) && cb > 0 {
                    accumulate(&mut grads[b.0], val(*b).shape(), |d| {
                        for (row, grow) in d.chunks_exact_mut(cb).zip(gd.chunks_exact(total)) {
                            add_into(row, &grow[ca..], 1.0);
                        }
                    });
                }
            }
        }
    }
}
