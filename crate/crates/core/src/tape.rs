//! Reverse-mode differentiation over dense 2-D tensors.
//!
//! Every operation evaluates eagerly when it is recorded; `backward` then
//! sweeps the recorded nodes once, newest to oldest, applying a hand-written
//! adjoint rule per op. Operations that are too coarse to express as
//! elementwise algebra (rasterization, SSIM, IDW gathers) plug in through
//! [`CustomOp`].

use std::fmt;

use crate::error::{Error, Result};

/// Row-major matrix of `f64`.
#[derive(Clone, Default, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Tensor {
        Tensor { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(rows * cols, data.len(), "tensor shape mismatch");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_rows<const N: usize>(rows: &[[f64; N]]) -> Tensor {
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor { rows: rows.len(), cols: N, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension");
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            let o = &mut out.data[i * m..(i + 1) * m];
            for (j, oj) in o.iter_mut().enumerate() {
                let b = &other.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for t in 0..k {
                    acc += a[t] * b[t];
                }
                *oj = acc;
            }
        }
        out
    }

    /// `self · other`
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            let o = &mut out.data[i * m..(i + 1) * m];
            for t in 0..k {
                let a = self.data[i * k + t];
                if a == 0.0 {
                    continue;
                }
                let b = &other.data[t * m..(t + 1) * m];
                for j in 0..m {
                    o[j] += a * b[j];
                }
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows, "t_matmul inner dimension");
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(k, m);
        for i in 0..n {
            let a = &self.data[i * k..(i + 1) * k];
            let b = &other.data[i * m..(i + 1) * m];
            for (t, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let o = &mut out.data[t * m..(t + 1) * m];
                for j in 0..m {
                    o[j] += av * b[j];
                }
            }
        }
        out
    }
}

/// Handle to a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation with a hand-written adjoint, recorded as a single node.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one optional gradient per input, shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MatMulT(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalar(Var, Var),
    Exp(Var),
    Square(Var),
    Abs(Var),
    Softplus(Var, f64),
    SoftplusGrad(Var, f64),
    Sigmoid(Var),
    RowNorm(Var),
    MinRow(Var, Vec<usize>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    MaskedMean(Var, Vec<bool>),
    Clamp(Var, Vec<bool>),
    NormalizeRows(Var),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records one forward computation for exact reverse-mode gradients.
#[derive(Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`GradientTape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
    /// Number of nodes swept by the backward pass.
    pub nodes_visited: usize,
}

impl Gradients {
    /// Gradient of a recorded node, if the root depends on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, zero-filled when the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl GradientTape {
    pub fn new() -> GradientTape {
        GradientTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter or constant input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1×m` row to every row of an `n×m` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows, 1, "add_row expects a single row");
        assert_eq!(av.cols, rv.cols, "add_row width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// `a · wᵀ` for `a: n×k`, `w: m×k`.
    pub fn matmul_t(&mut self, a: Var, w: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(w));
        self.push(v, Op::MatMulT(a, w))
    }

    /// Dense layer `a · wᵀ + b`.
    pub fn linear(&mut self, a: Var, w: Var, b: Var) -> Var {
        let z = self.matmul_t(a, w);
        self.add_row(z, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    /// Multiplies every entry of `a` by the `1×1` tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.len(), 1, "mul_scalar expects a 1x1 factor");
        let c = sv.data[0];
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    /// `softplus(βx)/β`; smooth with derivative `σ(βx)` everywhere.
    pub fn softplus(&mut self, a: Var, beta: f64) -> Var {
        let v = self.value(a).map(|x| softplus(beta * x) / beta);
        self.push(v, Op::Softplus(a, beta))
    }

    /// Derivative of [`GradientTape::softplus`], itself differentiable.
    pub fn softplus_grad(&mut self, a: Var, beta: f64) -> Var {
        let v = self.value(a).map(|x| sigmoid(beta * x));
        self.push(v, Op::SoftplusGrad(a, beta))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Euclidean norm of each row, as an `n×1` column.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows).map(|r| av.row(r).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let v = Tensor::from_vec(av.rows, 1, data);
        self.push(v, Op::RowNorm(a))
    }

    /// Minimum of each row; ties resolve to the lowest column.
    pub fn min_row(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut arg = Vec::with_capacity(av.rows);
        let mut data = Vec::with_capacity(av.rows);
        for r in 0..av.rows {
            let row = av.row(r);
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] < row[best] {
                    best = c;
                }
            }
            arg.push(best);
            data.push(row[best]);
        }
        let v = Tensor::from_vec(av.rows, 1, data);
        self.push(v, Op::MinRow(a, arg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(av.rows, len);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows, "slice_rows out of range");
        let data = av.data[start * av.cols..(start + len) * av.cols].to_vec();
        let v = Tensor::from_vec(len, av.cols, data);
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = if av.is_empty() { 0.0 } else { av.data.iter().sum::<f64>() / av.len() as f64 };
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Mean over the entries whose mask is set (0 when none are).
    pub fn masked_mean(&mut self, a: Var, mask: Vec<bool>) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), mask.len(), "mask length");
        let (mut s, mut n) = (0.0, 0usize);
        for (v, &m) in av.data.iter().zip(&mask) {
            if m {
                s += v;
                n += 1;
            }
        }
        let m = if n == 0 { 0.0 } else { s / n as f64 };
        self.push(Tensor::scalar(m), Op::MaskedMean(a, mask))
    }

    /// Elementwise clamp into `[lo, hi]`; clamped entries pass no gradient.
    pub fn clamp(&mut self, a: Var, lo: &Tensor, hi: &Tensor) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), lo.shape());
        assert_eq!(av.shape(), hi.shape());
        let mut pass = Vec::with_capacity(av.len());
        let mut out = av.clone();
        for i in 0..out.data.len() {
            let x = out.data[i];
            if x < lo.data[i] {
                out.data[i] = lo.data[i];
                pass.push(false);
            } else if x > hi.data[i] {
                out.data[i] = hi.data[i];
                pass.push(false);
            } else {
                pass.push(true);
            }
        }
        self.push(out, Op::Clamp(a, pass))
    }

    /// Scales every row to unit length.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in row.iter_mut() {
                *x /= n;
            }
        }
        self.push(out, Op::NormalizeRows(a))
    }

    /// Records an externally evaluated op with a hand-written adjoint.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], value: Tensor) -> Var {
        self.push(value, Op::Custom(op, inputs.to_vec()))
    }

    /// Backward pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.check_root(root)?;
        if shape != (1, 1) {
            return Err(Error::Tape(format!("backward root must be scalar, got {shape:?}")));
        }
        self.backward_with(root, Tensor::scalar(1.0))
    }

    fn check_root(&self, root: Var) -> Result<(usize, usize)> {
        if self.nodes.is_empty() {
            return Err(Error::Tape("backward called before any forward computation".into()));
        }
        match self.nodes.get(root.0) {
            Some(n) => Ok(n.value.shape()),
            None => Err(Error::Tape(format!("node {} was not recorded on this tape", root.0))),
        }
    }

    /// Backward pass seeding `root` with an arbitrary adjoint.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        let shape = self.check_root(root)?;
        if seed.shape() != shape {
            return Err(Error::Tape(format!("seed shape {:?} != root shape {:?}", seed.shape(), shape)));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        let mut visited = 0;
        for i in (0..=root.0).rev() {
            visited += 1;
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            nodes_visited: visited,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip(val(b), |x, y| x * y));
                accumulate(grads, *b, g.zip(val(a), |x, y| x * y));
            }
            Op::AddRow(a, b) => {
                let mut gb = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, x) in gb.data.iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, gb);
            }
            Op::MatMulT(a, w) => {
                accumulate(grads, *a, g.matmul(val(w)));
                accumulate(grads, *w, g.t_matmul(val(a)));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::MulScalar(a, s) => {
                let c = val(s).data[0];
                let gs: f64 = g.data.iter().zip(&val(a).data).map(|(x, y)| x * y).sum();
                accumulate(grads, *a, g.map(|x| x * c));
                accumulate(grads, *s, Tensor::scalar(gs));
            }
            Op::Exp(a) => accumulate(grads, *a, g.zip(out, |x, y| x * y)),
            Op::Square(a) => accumulate(grads, *a, g.zip(val(a), |x, y| 2.0 * x * y)),
            Op::Abs(a) => accumulate(grads, *a, g.zip(val(a), |x, y| if y > 0.0 { x } else if y < 0.0 { -x } else { 0.0 })),
            Op::Softplus(a, beta) => {
                accumulate(grads, *a, g.zip(val(a), |x, y| x * sigmoid(beta * y)));
            }
            Op::SoftplusGrad(a, beta) => {
                accumulate(grads, *a, g.zip(out, |x, s| x * beta * s * (1.0 - s)));
            }
            Op::Sigmoid(a) => accumulate(grads, *a, g.zip(out, |x, s| x * s * (1.0 - s))),
            Op::RowNorm(a) => {
                let av = val(a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    let n = out.data[r];
                    if n > 0.0 {
                        let k = g.data[r] / n;
                        for (o, x) in ga.row_mut(r).iter_mut().zip(av.row(r)) {
                            *o = k * x;
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::MinRow(a, arg) => {
                let av = val(a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for (r, &c) in arg.iter().enumerate() {
                    *ga.at_mut(r, c) = g.data[r];
                }
                accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let av = val(a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    ga.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let av = val(a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                ga.data[start * av.cols..(start + g.rows) * av.cols].copy_from_slice(&g.data);
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let pc = val(p).cols;
                    let mut gp = Tensor::zeros(g.rows, pc);
                    for r in 0..g.rows {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                    }
                    off += pc;
                    accumulate(grads, *p, gp);
                }
            }
            Op::Sum(a) => {
                let av = val(a);
                accumulate(grads, *a, Tensor::filled(av.rows, av.cols, g.data[0]));
            }
            Op::Mean(a) => {
                let av = val(a);
                let k = if av.is_empty() { 0.0 } else { g.data[0] / av.len() as f64 };
                accumulate(grads, *a, Tensor::filled(av.rows, av.cols, k));
            }
            Op::MaskedMean(a, mask) => {
                let av = val(a);
                let n = mask.iter().filter(|m| **m).count();
                let mut ga = Tensor::zeros(av.rows, av.cols);
                if n > 0 {
                    let k = g.data[0] / n as f64;
                    for (o, &m) in ga.data.iter_mut().zip(mask) {
                        if m {
                            *o = k;
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Clamp(a, pass) => {
                let mut ga = g.clone();
                for (o, &p) in ga.data.iter_mut().zip(pass) {
                    if !p {
                        *o = 0.0;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::NormalizeRows(a) => {
                let av = val(a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    let n = av.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                    let u = out.row(r);
                    let gr = g.row(r);
                    let proj: f64 = u.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = (gr[c] - u[c] * proj) / n;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Custom(op, inputs) => {
                let ins: Vec<&Tensor> = inputs.iter().map(val).collect();
                let gs = op.backward(&ins, out, g);
                debug_assert_eq!(gs.len(), inputs.len(), "{} returned wrong gradient count", op.name());
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        accumulate(grads, *v, gi);
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Central finite differences, the independent oracle for every adjoint rule.
pub mod gradcheck {
    use super::Tensor;

    /// Numerical gradient of a scalar function of one tensor.
    pub fn numeric_gradient(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
        let mut g = Tensor::zeros(x.rows, x.cols);
        let mut probe = x.clone();
        for i in 0..x.len() {
            let orig = probe.data[i];
            probe.data[i] = orig + step;
            let fp = f(&probe);
            probe.data[i] = orig - step;
            let fm = f(&probe);
            probe.data[i] = orig;
            g.data[i] = (fp - fm) / (2.0 * step);
        }
        g
    }

    /// Relative-error test with an absolute floor.
    pub fn close(analytic: f64, numeric: f64, rel: f64, abs_floor: f64) -> bool {
        let diff = (analytic - numeric).abs();
        diff <= abs_floor || diff <= rel * analytic.abs().max(numeric.abs())
    }

    /// First index where two gradients disagree, if any.
    pub fn first_mismatch(analytic: &Tensor, numeric: &Tensor, rel: f64, abs_floor: f64) -> Option<(usize, f64, f64)> {
        analytic
            .data
            .iter()
            .zip(&numeric.data)
            .enumerate()
            .find(|(_, (a, n))| !close(**a, **n, rel, abs_floor))
            .map(|(i, (a, n))| (i, *a, *n))
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{first_mismatch, numeric_gradient};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(build)/d(input k) against finite differences for every input.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut GradientTape, &[Var]) -> Var) {
        let mut tape = GradientTape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root).unwrap();
        for k in 0..inputs.len() {
            let numeric = numeric_gradient(&inputs[k], 1e-6, |probe| {
                let mut t = GradientTape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| t.leaf(if j == k { probe.clone() } else { x.clone() }))
                    .collect();
                let r = build(&mut t, &vs);
                t.value(r).item()
            });
            let analytic = grads.wrt(vars[k]);
            assert_eq!(first_mismatch(&analytic, &numeric, 1e-6, 1e-9), None, "input {k}");
        }
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (random(&mut rng, 3, 4), random(&mut rng, 3, 4));
        check(vec![a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1]);
            let d = t.sub(s, v[1]);
            let m = t.mul(d, v[1]);
            let e = t.exp(m);
            let q = t.square(e);
            let sc = t.scale(q, -0.7);
            let o = t.add_scalar(sc, 2.0);
            t.sum(o)
        });
        check(vec![a.clone(), b.clone()], |t, v| {
            let sp = t.softplus(v[0], 3.0);
            let sg = t.softplus_grad(v[1], 3.0);
            let sm = t.sigmoid(sp);
            let m = t.mul(sm, sg);
            let m = t.abs(m);
            t.mean(m)
        });
    }

    #[test]
    fn matrix_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 5, 3);
        let w = random(&mut rng, 4, 3);
        let b = random(&mut rng, 1, 4);
        let s = random(&mut rng, 1, 1);
        check(vec![x, w, b, s], |t, v| {
            let z = t.linear(v[0], v[1], v[2]);
            let z = t.mul_scalar(z, v[3]);
            let a = t.slice_cols(z, 1, 2);
            let c = t.slice_rows(z, 2, 3);
            let c = t.slice_cols(c, 0, 2);
            let cat = t.concat_cols(&[a, a]);
            let n = t.row_norm(cat);
            let cs = t.sum(c);
            let ns = t.sum(n);
            t.add(cs, ns)
        });
    }

    #[test]
    fn reductions_and_selections() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 6, 3);
        check(vec![x.clone()], |t, v| {
            let m = t.min_row(v[0]);
            let sq = t.square(m);
            t.masked_mean(sq, vec![true, false, true, true, false, true])
        });
        let lo = Tensor::filled(6, 3, -0.5);
        let hi = Tensor::filled(6, 3, 0.5);
        check(vec![x], move |t, v| {
            let c = t.clamp(v[0], &lo, &hi);
            let n = t.normalize_rows(v[0]);
            let p = t.mul(c, n);
            t.sum(p)
        });
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        let mut tape = GradientTape::new();
        let a = tape.leaf(Tensor::filled(2, 2, 1.5));
        let unused = tape.leaf(Tensor::filled(3, 1, 2.0));
        let s = tape.square(a);
        let root = tape.sum(s);
        let g = tape.backward(root).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused), Tensor::zeros(3, 1));
        assert_eq!(g.nodes_visited, tape.len());
    }

    #[test]
    fn backward_without_forward_fails() {
        let tape = GradientTape::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::Tape(_))));
        let mut tape = GradientTape::new();
        let a = tape.leaf(Tensor::zeros(2, 2));
        assert!(tape.backward(a).is_err(), "non-scalar root");
        assert!(tape.backward(Var(7)).is_err());
    }

    #[test]
    fn masked_mean_of_empty_selection_is_zero() {
        let mut tape = GradientTape::new();
        let a = tape.leaf(Tensor::filled(3, 1, 4.0));
        let m = tape.masked_mean(a, vec![false; 3]);
        assert_eq!(tape.value(m).item(), 0.0);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.wrt(a), Tensor::zeros(3, 1));
    }

    #[test]
    fn matmul_helpers_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 3, 5);
        let b = random(&mut rng, 5, 2);
        let mut bt = Tensor::zeros(2, 5);
        for i in 0..5 {
            for j in 0..2 {
                *bt.at_mut(j, i) = b.at(i, j);
            }
        }
        let x = a.matmul(&b);
        let y = a.matmul_t(&bt);
        for (p, q) in x.data.iter().zip(&y.data) {
            assert!((p - q).abs() < 1e-12);
        }
        let _ = rng.random::<f64>();
    }
}
