use crate::array::Array;
use crate::error::{Error, Result};
use crate::par;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Full,
    Row,
    Col,
    Scalar,
}

impl Bcast {
    #[inline]
    fn index(self, i: usize, j: usize, cols: usize) -> usize {
        match self {
            Bcast::Full => i * cols + j,
            Bcast::Row => j,
            Bcast::Col => i,
            Bcast::Scalar => 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Input,
    MatMul(Var, Var),
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        ka: Bcast,
        kb: Bcast,
    },
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanRows(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Relu(Var),
    Tanh(Var),
    Sqrt(Var),
    Scale(Var, f64),
    Shift(Var),
    ClampMin(Var, f64),
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    SqDist {
        z: Var,
        w: Option<Var>,
        m: Var,
    },
    StraightThrough(Var),
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Tape of one forward pass. Rebuilt for every evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints from one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, or zeros shaped like `like` when `v` is unreachable.
    pub fn wrt_or_zeros(&self, v: Var, like: &Array) -> Array {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros_like(like))
    }
}

fn as_matrix(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap();
    (shape.iter().product::<usize>() / cols, cols)
}

fn bcast_kind(shape: &[usize], rows: usize, cols: usize) -> Option<Bcast> {
    let (r, c) = as_matrix(shape);
    match (r == rows, c == cols, r == 1, c == 1) {
        (true, true, _, _) => Some(Bcast::Full),
        (_, true, true, _) => Some(Bcast::Row),
        (true, _, _, true) => Some(Bcast::Col),
        (_, _, true, true) => Some(Bcast::Scalar),
        _ => None,
    }
}

/// Row-major `out = a (m x k) * b (k x n)`.
fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    par::for_each_row(&mut out, n, k * n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    debug_assert_eq!(out.len(), m * n);
    out
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Array>], v: Var, g: Array) {
    match &mut grads[v.0] {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Sum `g` (shaped `rows x cols`) down to an operand broadcast as `kind`.
fn reduce_broadcast(g: &[f64], rows: usize, cols: usize, kind: Bcast, shape: &[usize]) -> Array {
    let len: usize = shape.iter().product();
    let mut out = vec![0.0; len];
    for i in 0..rows {
        for j in 0..cols {
            out[kind.index(i, j, cols)] += g[i * cols + j];
        }
    }
    Array::new(shape, out).expect("reduced shape")
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

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, x: Var, value: Array, op: Op, name: &'static str) -> Result<Var> {
        let needs = self.needs(x);
        self.push(value, op, needs, name)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient: same value, cut from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = as_matrix(sa);
        let (k2, n) = as_matrix(sb);
        if k != k2 || sb.len() > 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let data = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Array::matrix(m, n, data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), needs, "matmul")
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (ra, ca) = as_matrix(&sa);
        let (rb, cb) = as_matrix(&sb);
        let (rows, cols) = (ra.max(rb), ca.max(cb));
        let mismatch = || Error::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let ka = bcast_kind(&sa, rows, cols).ok_or_else(mismatch)?;
        let kb = bcast_kind(&sb, rows, cols).ok_or_else(mismatch)?;
        let out_shape = if ka == Bcast::Full {
            sa.clone()
        } else if kb == Bcast::Full {
            sb.clone()
        } else {
            vec![rows, cols]
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let x = da[ka.index(i, j, cols)];
                let y = db[kb.index(i, j, cols)];
                out.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                });
            }
        }
        let value = Array::new(&out_shape, out)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Binary { kind, a, b, ka, kb }, needs, name)
    }

    /// Elementwise `a + b`. Either side may broadcast as a row, column or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|t| t * t);
        self.unary(x, v, Op::Square(x), "square")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Array::scalar(self.value(x).sum());
        self.unary(x, v, Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let a = self.value(x);
        let v = Array::scalar(a.sum() / a.len() as f64);
        self.unary(x, v, Op::Mean(x), "mean")
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let a = self.value(x);
        let rows = a.rows();
        let data = (0..rows).map(|i| a.row(i).iter().sum()).collect();
        let v = Array::matrix(rows, 1, data)?;
        self.unary(x, v, Op::SumLast(x), "sum_last")
    }

    /// Column means: `r x c -> c`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let a = self.value(x);
        let (rows, cols) = (a.rows(), a.cols());
        let mut data = vec![0.0; cols];
        for i in 0..rows {
            for (d, v) in data.iter_mut().zip(a.row(i)) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= rows as f64);
        let v = Array::vector(data);
        self.unary(x, v, Op::MeanRows(x), "mean_rows")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::exp);
        self.unary(x, v, Op::Exp(x), "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let a = self.value(x);
        if let Some(&bad) = a.data().iter().find(|&&t| t <= 0.0 || t.is_nan()) {
            return Err(Error::NonPositiveLog(bad));
        }
        let v = a.map(f64::ln);
        self.unary(x, v, Op::Log(x), "log")
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(softplus);
        self.unary(x, v, Op::Softplus(x), "softplus")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|t| t.max(0.0));
        self.unary(x, v, Op::Relu(x), "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::tanh);
        self.unary(x, v, Op::Tanh(x), "tanh")
    }

    /// Square root. The adjoint at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let a = self.value(x);
        if a.data().iter().any(|&t| t < 0.0) {
            return Err(Error::invalid("sqrt of negative value"));
        }
        let v = a.map(f64::sqrt);
        self.unary(x, v, Op::Sqrt(x), "sqrt")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|t| t * c);
        self.unary(x, v, Op::Scale(x, c), "scale")
    }

    /// `x + c` for a constant `c`.
    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|t| t + c);
        self.unary(x, v, Op::Shift(x), "shift")
    }

    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Result<Var> {
        let v = self.value(x).map(|t| t.max(lo));
        self.unary(x, v, Op::ClampMin(x, lo), "clamp_min")
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let mut v = self.value(x).clone();
        for i in 0..v.rows() {
            softmax_in_place(v.row_mut(i));
        }
        self.unary(x, v, Op::SoftmaxLast(x), "softmax_last")
    }

    /// `x - logsumexp(x)` over the last axis.
    pub fn log_softmax_last(&mut self, x: Var) -> Result<Var> {
        let mut v = self.value(x).clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let lse = logsumexp(row);
            row.iter_mut().for_each(|t| *t -= lse);
        }
        self.unary(x, v, Op::LogSoftmaxLast(x), "log_softmax_last")
    }

    /// Columns `[start, end)` of the matrix view.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let a = self.value(x);
        if start >= end || end > a.cols() {
            return Err(Error::invalid(format!(
                "slice_cols {start}..{end} of {:?}",
                a.shape()
            )));
        }
        let rows = a.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for i in 0..rows {
            data.extend_from_slice(&a.row(i)[start..end]);
        }
        let v = Array::matrix(rows, end - start, data)?;
        self.unary(x, v, Op::SliceCols { x, start }, "slice_cols")
    }

    /// Pairwise weighted squared distances.
    ///
    /// `out[b, c] = sum_i w[b, i] * (z[b, i] - m[c, i])^2` for `z: B x L`,
    /// `m: C x L` and optional per-row weights `w: B x L` (unit when absent).
    pub fn sq_dist(&mut self, z: Var, w: Option<Var>, m: Var) -> Result<Var> {
        let (bz, l) = as_matrix(self.shape(z));
        let (c, lm) = as_matrix(self.shape(m));
        if l != lm {
            return Err(Error::ShapeMismatch {
                op: "sq_dist",
                lhs: self.shape(z).to_vec(),
                rhs: self.shape(m).to_vec(),
            });
        }
        if let Some(w) = w {
            if as_matrix(self.shape(w)) != (bz, l) {
                return Err(Error::ShapeMismatch {
                    op: "sq_dist",
                    lhs: self.shape(z).to_vec(),
                    rhs: self.shape(w).to_vec(),
                });
            }
        }
        let zd = self.value(z).data();
        let md = self.value(m).data();
        let wd = w.map(|w| self.value(w).data());
        let mut out = vec![0.0; bz * c];
        par::for_each_row(&mut out, c, c * l, |b, row| {
            let zr = &zd[b * l..(b + 1) * l];
            for (k, o) in row.iter_mut().enumerate() {
                let mr = &md[k * l..(k + 1) * l];
                *o = match wd {
                    Some(wd) => {
                        let wr = &wd[b * l..(b + 1) * l];
                        (0..l).map(|i| wr[i] * (zr[i] - mr[i]).powi(2)).sum()
                    }
                    None => (0..l).map(|i| (zr[i] - mr[i]).powi(2)).sum(),
                };
            }
        });
        let v = Array::matrix(bz, c, out)?;
        let needs = self.needs(z) || self.needs(m) || w.is_some_and(|w| self.needs(w));
        self.push(v, Op::SqDist { z, w, m }, needs, "sq_dist")
    }

    /// Forward value is `value`; the backward pass hands the incoming
    /// adjoint to `src` unchanged (straight-through).
    pub fn straight_through(&mut self, value: Array, src: Var) -> Result<Var> {
        if value.shape() != self.shape(src) {
            return Err(Error::ShapeMismatch {
                op: "straight_through",
                lhs: value.shape().to_vec(),
                rhs: self.shape(src).to_vec(),
            });
        }
        self.unary(src, value, Op::StraightThrough(src), "straight_through")
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array::full(rv.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) {
        let out = &node.value;
        let gd = g.data();
        match node.op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k) = as_matrix(av.shape());
                let n = bv.cols();
                if self.needs(a) {
                    let bt = bv.transpose();
                    let da = matmul_kernel(gd, bt.data(), m, n, k);
                    accumulate(grads, a, Array::new(av.shape(), da).unwrap());
                }
                if self.needs(b) {
                    let at = av.clone().reshape(&[m, k]).unwrap().transpose();
                    let db = matmul_kernel(at.data(), gd, k, m, n);
                    accumulate(grads, b, Array::new(bv.shape(), db).unwrap());
                }
            }
            Op::Binary { kind, a, b, ka, kb } => {
                let (rows, cols) = as_matrix(out.shape());
                let (da, db) = (self.value(a).data(), self.value(b).data());
                if self.needs(a) {
                    let ga: Vec<f64> = match kind {
                        Binary::Add | Binary::Sub => gd.to_vec(),
                        Binary::Mul => (0..rows * cols)
                            .map(|p| gd[p] * db[kb.index(p / cols, p % cols, cols)])
                            .collect(),
                    };
                    let r = reduce_broadcast(&ga, rows, cols, ka, self.shape(a));
                    accumulate(grads, a, r);
                }
                if self.needs(b) {
                    let gb: Vec<f64> = match kind {
                        Binary::Add => gd.to_vec(),
                        Binary::Sub => gd.iter().map(|t| -t).collect(),
                        Binary::Mul => (0..rows * cols)
                            .map(|p| gd[p] * da[ka.index(p / cols, p % cols, cols)])
                            .collect(),
                    };
                    let r = reduce_broadcast(&gb, rows, cols, kb, self.shape(b));
                    accumulate(grads, b, r);
                }
            }
            Op::Square(x) => {
                let xv = self.value(x);
                accumulate(grads, x, zip_map(xv, g, |x, g| 2.0 * x * g));
            }
            Op::Sum(x) => {
                let gs = gd[0];
                accumulate(grads, x, Array::full(self.shape(x), gs));
            }
            Op::Mean(x) => {
                let n = self.value(x).len() as f64;
                accumulate(grads, x, Array::full(self.shape(x), gd[0] / n));
            }
            Op::SumLast(x) => {
                let xv = self.value(x);
                let mut r = Array::zeros_like(xv);
                for (i, &gi) in gd.iter().enumerate().take(xv.rows()) {
                    r.row_mut(i).iter_mut().for_each(|t| *t = gi);
                }
                accumulate(grads, x, r);
            }
            Op::MeanRows(x) => {
                let xv = self.value(x);
                let rows = xv.rows() as f64;
                let mut r = Array::zeros_like(xv);
                for i in 0..xv.rows() {
                    r.row_mut(i)
                        .iter_mut()
                        .zip(gd)
                        .for_each(|(t, g)| *t = g / rows);
                }
                accumulate(grads, x, r);
            }
            Op::Exp(x) => accumulate(grads, x, zip_map(out, g, |y, g| y * g)),
            Op::Log(x) => accumulate(grads, x, zip_map(self.value(x), g, |x, g| g / x)),
            Op::Softplus(x) => {
                accumulate(grads, x, zip_map(self.value(x), g, |x, g| g * sigmoid(x)))
            }
            Op::Relu(x) => accumulate(
                grads,
                x,
                zip_map(self.value(x), g, |x, g| if x > 0.0 { g } else { 0.0 }),
            ),
            Op::Tanh(x) => accumulate(grads, x, zip_map(out, g, |y, g| g * (1.0 - y * y))),
            Op::Sqrt(x) => accumulate(
                grads,
                x,
                zip_map(out, g, |y, g| if y > 0.0 { 0.5 * g / y } else { 0.0 }),
            ),
            Op::Scale(x, c) => accumulate(grads, x, g.map(|t| t * c)),
            Op::Shift(x) | Op::StraightThrough(x) => accumulate(grads, x, g.clone()),
            Op::ClampMin(x, lo) => accumulate(
                grads,
                x,
                zip_map(self.value(x), g, |x, g| if x > lo { g } else { 0.0 }),
            ),
            Op::SoftmaxLast(x) => {
                let mut r = Array::zeros_like(out);
                for i in 0..out.rows() {
                    let (y, gr) = (out.row(i), g.row(i));
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, t) in r.row_mut(i).iter_mut().enumerate() {
                        *t = y[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, x, r);
            }
            Op::LogSoftmaxLast(x) => {
                let mut r = Array::zeros_like(out);
                for i in 0..out.rows() {
                    let (y, gr) = (out.row(i), g.row(i));
                    let gsum: f64 = gr.iter().sum();
                    for (j, t) in r.row_mut(i).iter_mut().enumerate() {
                        *t = gr[j] - y[j].exp() * gsum;
                    }
                }
                accumulate(grads, x, r);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(x);
                let width = out.cols();
                let mut r = Array::zeros_like(xv);
                for i in 0..xv.rows() {
                    r.row_mut(i)[start..start + width].copy_from_slice(g.row(i));
                }
                accumulate(grads, x, r);
            }
            Op::SqDist { z, w, m } => self.sq_dist_backward(z, w, m, g, grads),
        }
    }

    fn sq_dist_backward(
        &self,
        z: Var,
        w: Option<Var>,
        m: Var,
        g: &Array,
        grads: &mut [Option<Array>],
    ) {
        let (zv, mv) = (self.value(z), self.value(m));
        let (bn, l) = as_matrix(zv.shape());
        let c = mv.rows();
        let (zd, md, gd) = (zv.data(), mv.data(), g.data());
        let wd = w.map(|w| self.value(w).data());
        let weight = |b: usize, i: usize| wd.map_or(1.0, |wd| wd[b * l + i]);

        if self.needs(z) {
            let mut dz = vec![0.0; bn * l];
            par::for_each_row(&mut dz, l, c * l, |b, row| {
                for k in 0..c {
                    let gbk = gd[b * c + k];
                    for (i, t) in row.iter_mut().enumerate() {
                        *t += 2.0 * gbk * weight(b, i) * (zd[b * l + i] - md[k * l + i]);
                    }
                }
            });
            accumulate(grads, z, Array::new(zv.shape(), dz).unwrap());
        }
        if let Some(wv) = w.filter(|&w| self.needs(w)) {
            let mut dw = vec![0.0; bn * l];
            par::for_each_row(&mut dw, l, c * l, |b, row| {
                for k in 0..c {
                    let gbk = gd[b * c + k];
                    for (i, t) in row.iter_mut().enumerate() {
                        *t += gbk * (zd[b * l + i] - md[k * l + i]).powi(2);
                    }
                }
            });
            accumulate(grads, wv, Array::new(self.shape(wv), dw).unwrap());
        }
        if self.needs(m) {
            let mut dm = vec![0.0; c * l];
            par::for_each_row(&mut dm, l, bn * l, |k, row| {
                for b in 0..bn {
                    let gbk = gd[b * c + k];
                    for (i, t) in row.iter_mut().enumerate() {
                        *t -= 2.0 * gbk * weight(b, i) * (zd[b * l + i] - md[k * l + i]);
                    }
                }
            });
            accumulate(grads, m, Array::new(mv.shape(), dm).unwrap());
        }
    }
}

fn zip_map(a: &Array, g: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a
        .data()
        .iter()
        .zip(g.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Array::new(a.shape(), data).unwrap()
}

fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for t in row.iter_mut() {
        *t = (*t - max).exp();
        total += *t;
    }
    row.iter_mut().for_each(|t| *t /= total);
}
