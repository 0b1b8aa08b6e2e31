//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A `Tape` is an append-only arena of nodes; every operation records its
//! inputs and enough structure to replay the chain rule. `backward` walks
//! the arena once in reverse and accumulates gradients per node. All
//! arithmetic is 64-bit, single-threaded, and allocation-ordered, so a
//! fixed input produces a bit-identical gradient.
//!
//! The recurrent sequence op is fused into a single node with a
//! hand-derived backward pass; everything else is a primitive with a
//! textbook vector-Jacobian product.

use ndarray::{Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Parameter handles for the fused gated-recurrence op.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub wxz: Var,
    pub wxr: Var,
    pub wxh: Var,
    pub whz: Var,
    pub whr: Var,
    pub whh: Var,
    pub bz: Var,
    pub br: Var,
    pub bh: Var,
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRowBroadcast(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    PowConst(Var, f64),
    Sqrt(Var),
    SoftmaxRows(Var),
    SumAll(Var),
    MeanRows(Var),
    MaxAll(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    Elem(Var, usize, usize),
    StackScalars(Vec<Var>),
    L2NormRows(Var),
    ColRenorm(Var),
    SmoothL1(Var, f64),
    Clamp(Var, f64, f64),
    ReverseRows(Var),
    Gru { x: Var, p: GruVars },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar root with respect to every node, indexed by `Var`.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
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

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a [1,1] node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.dim(), (1, 1), "scalar_value on non-scalar node");
        a[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.leaf(Array2::zeros((rows, cols)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.value(a).dim();
        let (br, bc) = self.value(b).dim();
        assert_eq!(ac, br, "matmul shape mismatch {ar}x{ac} . {br}x{bc}");
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "div shape mismatch");
        let v = self.value(a) / self.value(b);
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    /// `[m,n] + [1,n]` with the row vector broadcast down the rows.
    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.value(a).dim();
        let (rr, rn) = self.value(row).dim();
        assert_eq!((rr, rn), (1, n), "row broadcast shape mismatch");
        let v = self.value(a) + &self.value(row).row(0);
        self.push(v, Op::AddRowBroadcast(a, row))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).mapv(|x| x.powf(p));
        self.push(v, Op::PowConst(a, p))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    /// Row-wise softmax. `mask`, when given, is added to the logits first;
    /// `-inf` entries are excluded exactly (their output and gradient are 0).
    pub fn softmax_rows(&mut self, a: Var, mask: Option<Array2<f64>>) -> Var {
        let x = self.value(a);
        if let Some(m) = &mask {
            assert_eq!(m.dim(), x.dim(), "softmax mask shape mismatch");
        }
        let (rows, cols) = x.dim();
        let mut out = Array2::zeros((rows, cols));
        for i in 0..rows {
            let logit = |j: usize| x[[i, j]] + mask.as_ref().map_or(0.0, |m| m[[i, j]]);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..cols {
                mx = mx.max(logit(j));
            }
            assert!(mx.is_finite(), "softmax row {i} fully masked");
            let mut sum = 0.0;
            for j in 0..cols {
                let e = (logit(j) - mx).exp();
                out[[i, j]] = e;
                sum += e;
            }
            for j in 0..cols {
                out[[i, j]] /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means: `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let m = x.nrows() as f64;
        let v = x.sum_axis(Axis(0)).insert_axis(Axis(0)) / m;
        self.push(v, Op::MeanRows(a))
    }

    /// Maximum entry as a scalar. Ties break to the lowest row-major index;
    /// the subgradient flows only to that entry.
    pub fn max_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.len() > 0, "max_all on empty");
        let mut best = f64::NEG_INFINITY;
        for &v in x.iter() {
            if v > best {
                best = v;
            }
        }
        let v = Array2::from_elem((1, 1), best);
        self.push(v, Op::MaxAll(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut r = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.ncols(), cols, "concat_rows column mismatch");
            v.slice_mut(ndarray::s![r..r + x.nrows(), ..]).assign(x);
            r += x.nrows();
        }
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut c = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.nrows(), rows, "concat_cols row mismatch");
            v.slice_mut(ndarray::s![.., c..c + x.ncols()]).assign(x);
            c += x.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let v = self.value(a).slice(ndarray::s![r0..r1, ..]).to_owned();
        self.push(v, Op::SliceRows(a, r0))
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let v = self.value(a).slice(ndarray::s![.., c0..c1]).to_owned();
        self.push(v, Op::SliceCols(a, c0))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.slice_rows(a, i, i + 1)
    }

    /// Gather the listed rows (repeats allowed) into a new matrix.
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros((indices.len(), x.ncols()));
        for (k, &i) in indices.iter().enumerate() {
            v.row_mut(k).assign(&x.row(i));
        }
        self.push(v, Op::SelectRows(a, indices.to_vec()))
    }

    /// Single entry as a scalar node.
    pub fn elem(&mut self, a: Var, i: usize, j: usize) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a)[[i, j]]);
        self.push(v, Op::Elem(a, i, j))
    }

    /// Assemble `rows x cols` scalars (row-major) into one matrix node.
    pub fn stack_scalars(&mut self, scalars: &[Var], rows: usize, cols: usize) -> Var {
        assert_eq!(scalars.len(), rows * cols, "stack_scalars count mismatch");
        let mut v = Array2::zeros((rows, cols));
        for (k, &s) in scalars.iter().enumerate() {
            v[[k / cols, k % cols]] = self.scalar_value(s);
        }
        self.push(v, Op::StackScalars(scalars.to_vec()))
    }

    /// Normalize each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt() + L2_EPS;
            row.mapv_inplace(|e| e / n);
        }
        self.push(v, Op::L2NormRows(a))
    }

    /// Scale each column to sum 1 when its sum is positive; all-zero columns
    /// pass through unchanged.
    pub fn col_renormalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for j in 0..x.ncols() {
            let s: f64 = x.column(j).sum();
            if s > 0.0 {
                v.column_mut(j).mapv_inplace(|e| e / s);
            }
        }
        self.push(v, Op::ColRenorm(a))
    }

    /// Smooth-L1 of a scalar prediction against a constant target
    /// (transition point 1).
    pub fn smooth_l1(&mut self, pred: Var, target: f64) -> Var {
        let x = self.scalar_value(pred) - target;
        let y = if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 };
        let v = Array2::from_elem((1, 1), y);
        self.push(v, Op::SmoothL1(pred, target))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn reverse_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).slice(ndarray::s![..;-1, ..]).to_owned();
        self.push(v, Op::ReverseRows(a))
    }

    /// Gated recurrence over the rows of `x` (initial hidden state zero),
    /// returning the `[T, hidden]` sequence of hidden states. One fused node;
    /// the backward pass recomputes the gates and runs truncated BPTT over
    /// the whole sequence.
    pub fn gru(&mut self, x: Var, p: GruVars) -> Var {
        let (h_seq, _, _, _) = self.gru_forward(x, p);
        self.push(h_seq, Op::Gru { x, p })
    }

    #[allow(clippy::type_complexity)]
    fn gru_forward(
        &self,
        x: Var,
        p: GruVars,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
        let xv = self.value(x);
        let steps = xv.nrows();
        let hidden = self.value(p.whz).nrows();
        let mut h_seq = Array2::zeros((steps, hidden));
        let mut z_seq = Array2::zeros((steps, hidden));
        let mut r_seq = Array2::zeros((steps, hidden));
        let mut c_seq = Array2::zeros((steps, hidden));
        let mut h_prev = Array2::zeros((1, hidden));
        for t in 0..steps {
            let xt = xv.row(t).insert_axis(Axis(0));
            let az = xt.dot(self.value(p.wxz)) + h_prev.dot(self.value(p.whz)) + self.value(p.bz);
            let ar = xt.dot(self.value(p.wxr)) + h_prev.dot(self.value(p.whr)) + self.value(p.br);
            let z = az.mapv(sigmoid);
            let r = ar.mapv(sigmoid);
            let rh = &r * &h_prev;
            let ac = xt.dot(self.value(p.wxh)) + rh.dot(self.value(p.whh)) + self.value(p.bh);
            let c = ac.mapv(f64::tanh);
            let h = (1.0 - &z) * &h_prev + &z * &c;
            z_seq.row_mut(t).assign(&z.row(0));
            r_seq.row_mut(t).assign(&r.row(0));
            c_seq.row_mut(t).assign(&c.row(0));
            h_seq.row_mut(t).assign(&h.row(0));
            h_prev = h;
        }
        (h_seq, z_seq, r_seq, c_seq)
    }

    /// Reverse pass from a scalar root. Panics if the root is not `[1,1]`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..self.nodes.len()).rev() {
            // Inputs of a node always precede it on the tape, so reading
            // grads[idx] while accumulating into earlier slots is safe.
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.mapv(|x| -x));
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, &g * self.value(*b));
                    accumulate(&mut grads, *b, &g * self.value(*a));
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    accumulate(&mut grads, *a, &g / bv);
                    let db = -&g * self.value(*a) / (bv * bv);
                    accumulate(&mut grads, *b, db);
                }
                Op::Neg(a) => accumulate(&mut grads, *a, g.mapv(|x| -x)),
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.mapv(|x| x * c)),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g.clone()),
                Op::AddRowBroadcast(a, row) => {
                    accumulate(&mut grads, *a, g.clone());
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, dr);
                }
                Op::Relu(a) => {
                    let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, &g * &mask);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    accumulate(&mut grads, *a, &g * &(y * &y.mapv(|v| 1.0 - v)));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    accumulate(&mut grads, *a, &g * &y.mapv(|v| 1.0 - v * v));
                }
                Op::Exp(a) => accumulate(&mut grads, *a, &g * &node.value),
                Op::Ln(a) => accumulate(&mut grads, *a, &g / self.value(*a)),
                Op::PowConst(a, p) => {
                    let da = self.value(*a).mapv(|x| p * x.powf(p - 1.0));
                    accumulate(&mut grads, *a, &g * &da);
                }
                Op::Sqrt(a) => {
                    let da = node.value.mapv(|y| 0.5 / y);
                    accumulate(&mut grads, *a, &g * &da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let dot: f64 = y.row(i).dot(&g.row(i));
                        for j in 0..y.ncols() {
                            dx[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::SumAll(a) => {
                    let da = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, da);
                }
                Op::MeanRows(a) => {
                    let (m, n) = self.value(*a).dim();
                    let mut da = Array2::zeros((m, n));
                    for i in 0..m {
                        for j in 0..n {
                            da[[i, j]] = g[[0, j]] / m as f64;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::MaxAll(a) => {
                    let x = self.value(*a);
                    let best = node.value[[0, 0]];
                    let mut da = Array2::zeros(x.dim());
                    'scan: for i in 0..x.nrows() {
                        for j in 0..x.ncols() {
                            if x[[i, j]] == best {
                                da[[i, j]] = g[[0, 0]];
                                break 'scan;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatRows(parts) => {
                    let mut r = 0;
                    for &p in parts {
                        let rows = self.value(p).nrows();
                        let gp = g.slice(ndarray::s![r..r + rows, ..]).to_owned();
                        accumulate(&mut grads, p, gp);
                        r += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for &p in parts {
                        let cols = self.value(p).ncols();
                        let gp = g.slice(ndarray::s![.., c..c + cols]).to_owned();
                        accumulate(&mut grads, p, gp);
                        c += cols;
                    }
                }
                Op::SliceRows(a, r0) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    da.slice_mut(ndarray::s![*r0..*r0 + g.nrows(), ..]).assign(&g);
                    accumulate(&mut grads, *a, da);
                }
                Op::SliceCols(a, c0) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    da.slice_mut(ndarray::s![.., *c0..*c0 + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, da);
                }
                Op::SelectRows(a, indices) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    for (k, &i) in indices.iter().enumerate() {
                        let mut row = da.row_mut(i);
                        row += &g.row(k);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Elem(a, i, j) => {
                    let mut da = Array2::zeros(self.value(*a).dim());
                    da[[*i, *j]] = g[[0, 0]];
                    accumulate(&mut grads, *a, da);
                }
                Op::StackScalars(scalars) => {
                    let cols = node.value.ncols();
                    for (k, &s) in scalars.iter().enumerate() {
                        let gs = Array2::from_elem((1, 1), g[[k / cols, k % cols]]);
                        accumulate(&mut grads, s, gs);
                    }
                }
                Op::L2NormRows(a) => {
                    let x = self.value(*a);
                    let mut da = Array2::zeros(x.dim());
                    for i in 0..x.nrows() {
                        let row = x.row(i);
                        let n0 = row.dot(&row).sqrt();
                        if n0 < 1e-300 {
                            continue;
                        }
                        let n = n0 + L2_EPS;
                        let gr = g.row(i);
                        let gdotx: f64 = gr.dot(&row);
                        for j in 0..x.ncols() {
                            da[[i, j]] = gr[j] / n - gdotx * row[j] / (n * n * n0);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ColRenorm(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut da = Array2::zeros(x.dim());
                    for j in 0..x.ncols() {
                        let s: f64 = x.column(j).sum();
                        if s > 0.0 {
                            let gdoty: f64 = g.column(j).dot(&y.column(j));
                            for i in 0..x.nrows() {
                                da[[i, j]] = g[[i, j]] / s - gdoty / s;
                            }
                        } else {
                            for i in 0..x.nrows() {
                                da[[i, j]] = g[[i, j]];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SmoothL1(pred, target) => {
                    let x = self.scalar_value(*pred) - target;
                    let d = if x.abs() < 1.0 { x } else { x.signum() };
                    accumulate(&mut grads, *pred, g.mapv(|v| v * d));
                }
                Op::Clamp(a, lo, hi) => {
                    let pass = self.value(*a).mapv(|x| if x > *lo && x < *hi { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, &g * &pass);
                }
                Op::ReverseRows(a) => {
                    accumulate(&mut grads, *a, g.slice(ndarray::s![..;-1, ..]).to_owned());
                }
                Op::Gru { x, p } => {
                    self.gru_backward(*x, *p, &g, &mut grads);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn gru_backward(&self, x: Var, p: GruVars, g: &Array2<f64>, grads: &mut Vec<Option<Array2<f64>>>) {
        let (h_seq, z_seq, r_seq, c_seq) = self.gru_forward(x, p);
        let xv = self.value(x);
        let steps = xv.nrows();
        let hidden = h_seq.ncols();
        let input = xv.ncols();

        let mut dx = Array2::zeros((steps, input));
        let mut d_wxz = Array2::zeros((input, hidden));
        let mut d_wxr = Array2::zeros((input, hidden));
        let mut d_wxh = Array2::zeros((input, hidden));
        let mut d_whz = Array2::zeros((hidden, hidden));
        let mut d_whr = Array2::zeros((hidden, hidden));
        let mut d_whh = Array2::zeros((hidden, hidden));
        let mut d_bz = Array2::zeros((1, hidden));
        let mut d_br = Array2::zeros((1, hidden));
        let mut d_bh = Array2::zeros((1, hidden));

        let mut dh_carry: Array2<f64> = Array2::zeros((1, hidden));
        for t in (0..steps).rev() {
            let h_prev = if t == 0 {
                Array2::zeros((1, hidden))
            } else {
                h_seq.row(t - 1).insert_axis(Axis(0)).to_owned()
            };
            let z = z_seq.row(t).insert_axis(Axis(0)).to_owned();
            let r = r_seq.row(t).insert_axis(Axis(0)).to_owned();
            let c = c_seq.row(t).insert_axis(Axis(0)).to_owned();
            let xt = xv.row(t).insert_axis(Axis(0)).to_owned();

            let dh = g.row(t).insert_axis(Axis(0)).to_owned() + &dh_carry;
            let dz = &dh * &(&c - &h_prev);
            let dc = &dh * &z;
            let mut dh_prev = &dh * &z.mapv(|v| 1.0 - v);
            let mut dxt: Array2<f64> = Array2::zeros((1, input));

            // candidate branch
            let dac = &dc * &c.mapv(|v| 1.0 - v * v);
            d_wxh += &xt.t().dot(&dac);
            d_bh += &dac;
            dxt += &dac.dot(&self.value(p.wxh).t());
            let drh = dac.dot(&self.value(p.whh).t());
            let rh = &r * &h_prev;
            d_whh += &rh.t().dot(&dac);
            let dr = &drh * &h_prev;
            dh_prev = dh_prev + &drh * &r;

            // update gate
            let daz = &dz * &(&z * &z.mapv(|v| 1.0 - v));
            d_wxz += &xt.t().dot(&daz);
            d_whz += &h_prev.t().dot(&daz);
            d_bz += &daz;
            dxt += &daz.dot(&self.value(p.wxz).t());
            dh_prev = dh_prev + daz.dot(&self.value(p.whz).t());

            // reset gate
            let dar = &dr * &(&r * &r.mapv(|v| 1.0 - v));
            d_wxr += &xt.t().dot(&dar);
            d_whr += &h_prev.t().dot(&dar);
            d_br += &dar;
            dxt += &dar.dot(&self.value(p.wxr).t());
            dh_prev = dh_prev + dar.dot(&self.value(p.whr).t());

            let mut row = dx.row_mut(t);
            row += &dxt.row(0);
            dh_carry = dh_prev;
        }

        accumulate(grads, x, dx);
        accumulate(grads, p.wxz, d_wxz);
        accumulate(grads, p.wxr, d_wxr);
        accumulate(grads, p.wxh, d_wxh);
        accumulate(grads, p.whz, d_whz);
        accumulate(grads, p.whr, d_whr);
        accumulate(grads, p.whh, d_whh);
        accumulate(grads, p.bz, d_bz);
        accumulate(grads, p.br, d_br);
        accumulate(grads, p.bh, d_bh);
    }
}

const L2_EPS: f64 = 1e-12;

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}
