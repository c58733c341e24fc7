//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a `1×1` output walks the tape in reverse and
//! returns gradients for every node that depends on a trainable leaf.

use std::rc::Rc;

use crate::tensor::Matrix;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    BroadcastCols(Var),
    Gather(Var, Rc<Vec<usize>>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RowSoftmax(Var),
    GroupSoftmax(Var, usize),
    GroupSum(Var, usize),
    MeanRows(Var),
    MeanAll(Var),
    SoftCrossEntropy(Var, Rc<Vec<f64>>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Probabilities below this floor are clamped before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.derived(value, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        self.derived(value, Op::MatMulNt(a, b), &[a, b])
    }

    /// Adds the `1×c` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        assert_eq!(bv.rows(), 1, "bias must be a single row");
        assert_eq!(xv.cols(), bv.cols(), "bias width mismatch");
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.derived(value, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.derived(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.derived(value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.derived(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.derived(value, Op::Scale(a, s), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.derived(value, Op::LeakyRelu(a, slope), &[a])
    }

    /// Repeats an `n×1` column across `cols` columns.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols(), 1, "broadcast_cols expects a single column");
        let value = Matrix::from_fn(av.rows(), cols, |r, _| av.get(r, 0));
        self.derived(value, Op::BroadcastCols(a), &[a])
    }

    /// Row `r` of the output is row `indices[r]` of `a`.
    pub fn gather(&mut self, a: Var, indices: Rc<Vec<usize>>) -> Var {
        let value = self.value(a).select_rows(&indices);
        self.derived(value, Op::Gather(a, indices), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::concat_cols(&mats);
        self.derived(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::concat_rows(&mats);
        self.derived(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Softmax across the columns of each row.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        self.derived(value, Op::RowSoftmax(a), &[a])
    }

    /// Softmax over each block of `group` consecutive rows, independently per column.
    pub fn group_softmax(&mut self, a: Var, group: usize) -> Var {
        let av = self.value(a);
        assert!(group > 0 && av.rows().is_multiple_of(group), "rows not divisible by group");
        let cols = av.cols();
        let mut value = av.clone();
        let data = value.data_mut();
        for g in 0..av.rows() / group {
            let base = g * group * cols;
            for c in 0..cols {
                let mut max = f64::NEG_INFINITY;
                for j in 0..group {
                    max = max.max(data[base + j * cols + c]);
                }
                let mut sum = 0.0;
                for j in 0..group {
                    let e = (data[base + j * cols + c] - max).exp();
                    data[base + j * cols + c] = e;
                    sum += e;
                }
                for j in 0..group {
                    data[base + j * cols + c] /= sum;
                }
            }
        }
        self.derived(value, Op::GroupSoftmax(a, group), &[a])
    }

    /// Sums each block of `group` consecutive rows.
    pub fn group_sum(&mut self, a: Var, group: usize) -> Var {
        let av = self.value(a);
        assert!(group > 0 && av.rows().is_multiple_of(group), "rows not divisible by group");
        let n = av.rows() / group;
        let mut value = Matrix::zeros(n, av.cols());
        for r in 0..av.rows() {
            let out = r / group;
            for (o, v) in value.row_mut(out).iter_mut().zip(av.row(r)) {
                *o += v;
            }
        }
        self.derived(value, Op::GroupSum(a, group), &[a])
    }

    /// Column means as a `1×c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.col_sums();
        value.scale_in_place(1.0 / av.rows() as f64);
        self.derived(value, Op::MeanRows(a), &[a])
    }

    /// Mean of all entries as a `1×1` value.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Matrix::filled(1, 1, av.sum() / av.len() as f64);
        self.derived(value, Op::MeanAll(a), &[a])
    }

    /// `−Σ target_i · ln(max(p_i, LOG_FLOOR))` for a single-row probability vector.
    pub fn soft_cross_entropy(&mut self, p: Var, target: &[f64]) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.len(), target.len(), "target width mismatch");
        let loss = pv.data().iter().zip(target).map(|(&pi, &gi)| -gi * pi.max(LOG_FLOOR).ln()).sum();
        self.derived(Matrix::filled(1, 1, loss), Op::SoftCrossEntropy(p, Rc::new(target.to_vec())), &[p])
    }

    /// Mean squared difference of two equally shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, grad: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, g: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, grad.matmul_nt(self.value(*b)));
                }
                if needs(*b) {
                    acc(*b, self.value(*a).matmul_tn(grad));
                }
            }
            Op::MatMulNt(a, b) => {
                if needs(*a) {
                    acc(*a, grad.matmul(self.value(*b)));
                }
                if needs(*b) {
                    acc(*b, grad.matmul_tn(self.value(*a)));
                }
            }
            Op::AddRow(x, bias) => {
                if needs(*bias) {
                    acc(*bias, grad.col_sums());
                }
                acc(*x, grad.clone());
            }
            Op::Add(a, b) => {
                acc(*a, grad.clone());
                acc(*b, grad.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, grad.clone());
                if needs(*b) {
                    acc(*b, grad.map(|g| -g));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, grad.zip_map(self.value(*b), |g, y| g * y));
                }
                if needs(*b) {
                    acc(*b, grad.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::Scale(a, s) => acc(*a, grad.map(|g| g * s)),
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                acc(*a, grad.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { g * slope }));
            }
            Op::BroadcastCols(a) => {
                let g = Matrix::from_fn(grad.rows(), 1, |r, _| grad.row(r).iter().sum());
                acc(*a, g);
            }
            Op::Gather(a, indices) => {
                let av = self.value(*a);
                let mut g = Matrix::zeros(av.rows(), av.cols());
                for (r, &src) in indices.iter().enumerate() {
                    for (o, v) in g.row_mut(src).iter_mut().zip(grad.row(r)) {
                        *o += v;
                    }
                }
                acc(*a, g);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if needs(p) {
                        let g = Matrix::from_fn(grad.rows(), w, |r, c| grad.get(r, offset + c));
                        acc(p, g);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if needs(p) {
                        let cols = grad.cols();
                        let slice = grad.data()[offset * cols..(offset + h) * cols].to_vec();
                        acc(p, Matrix::from_vec(h, cols, slice));
                    }
                    offset += h;
                }
            }
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let mut g = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = grad.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in g.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - dot);
                    }
                }
                acc(*a, g);
            }
            Op::GroupSoftmax(a, group) => {
                let y = &node.value;
                let cols = y.cols();
                let mut g = Matrix::zeros(y.rows(), cols);
                let (yd, gd) = (y.data(), grad.data());
                let out = g.data_mut();
                for blk in 0..y.rows() / group {
                    let base = blk * group * cols;
                    for c in 0..cols {
                        let mut dot = 0.0;
                        for j in 0..*group {
                            dot += yd[base + j * cols + c] * gd[base + j * cols + c];
                        }
                        for j in 0..*group {
                            let i = base + j * cols + c;
                            out[i] = yd[i] * (gd[i] - dot);
                        }
                    }
                }
                acc(*a, g);
            }
            Op::GroupSum(a, group) => {
                let av = self.value(*a);
                let g = Matrix::from_fn(av.rows(), av.cols(), |r, c| grad.get(r / group, c));
                acc(*a, g);
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let inv = 1.0 / av.rows() as f64;
                let g = Matrix::from_fn(av.rows(), av.cols(), |_, c| grad.get(0, c) * inv);
                acc(*a, g);
            }
            Op::MeanAll(a) => {
                let av = self.value(*a);
                let g = Matrix::filled(av.rows(), av.cols(), grad.get(0, 0) / av.len() as f64);
                acc(*a, g);
            }
            Op::SoftCrossEntropy(p, target) => {
                let pv = self.value(*p);
                let upstream = grad.get(0, 0);
                let data = pv
                    .data()
                    .iter()
                    .zip(target.iter())
                    .map(|(&pi, &gi)| if pi > LOG_FLOOR { -upstream * gi / pi } else { 0.0 })
                    .collect();
                acc(*p, Matrix::from_vec(pv.rows(), pv.cols(), data));
            }
        }
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}
