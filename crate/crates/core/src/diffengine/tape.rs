use std::sync::Arc;

use super::{Activation, Array, EngineError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether every primitive validates that its output is finite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CheckMode {
    #[default]
    Checked,
    Fast,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Act { x: usize, act: Activation, order: u8 },
    BroadcastRows(usize),
    ColSum(usize),
    BroadcastCols(usize),
    RowSum(usize),
    LogSumExpRows(usize),
    SoftmaxRows(usize),
    GatherRows { x: usize, idx: Arc<[usize]> },
    ScatterRows { x: usize, idx: Arc<[usize]> },
    PickCols { x: usize, cols: Arc<[usize]> },
    PlaceCols { x: usize, cols: Arc<[usize]> },
    Sum(usize),
    Expand(usize),
    SumSquares(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Act { .. } => "activation",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::ColSum(_) => "col_sum",
            Op::BroadcastCols(_) => "broadcast_cols",
            Op::RowSum(_) => "row_sum",
            Op::LogSumExpRows(_) => "logsumexp",
            Op::SoftmaxRows(_) => "softmax",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::PickCols { .. } => "pick_cols",
            Op::PlaceCols { .. } => "place_cols",
            Op::Sum(_) => "sum",
            Op::Expand(_) => "expand",
            Op::SumSquares(_) => "squared_norm",
        }
    }

    fn inputs(&self) -> ([usize; 2], usize) {
        match *self {
            Op::Leaf => ([0, 0], 0),
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => ([a, b], 2),
            Op::Scale(x, _)
            | Op::Act { x, .. }
            | Op::BroadcastRows(x)
            | Op::ColSum(x)
            | Op::BroadcastCols(x)
            | Op::RowSum(x)
            | Op::LogSumExpRows(x)
            | Op::SoftmaxRows(x)
            | Op::GatherRows { x, .. }
            | Op::ScatterRows { x, .. }
            | Op::PickCols { x, .. }
            | Op::PlaceCols { x, .. }
            | Op::Sum(x)
            | Op::Expand(x)
            | Op::SumSquares(x) => ([x, 0], 1),
        }
    }
}

struct Node {
    op: Op,
    value: Array,
}

/// Append-only record of primitive operations and their values.
///
/// Every primitive evaluates eagerly. [`Tape::grad`] walks the record in
/// reverse and appends the vector-Jacobian products as ordinary nodes, so
/// the resulting gradients are themselves differentiable: calling `grad`
/// on a function of a gradient yields exact mixed second derivatives.
///
/// Numerical failures are sticky: the first non-finite primitive output in
/// checked mode is remembered and reported by [`Tape::check`] and by every
/// later `grad` call. Shape errors are programming errors and panic.
pub struct Tape {
    nodes: Vec<Node>,
    mode: CheckMode,
    error: Option<EngineError>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn gemm(a: &Array, b: &Array, ta: bool, tb: bool) -> Array {
    assert!(a.shape().len() == 2 && b.shape().len() == 2, "matmul needs matrices, got {:?} and {:?}", a.shape(), b.shape());
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul inner dimensions disagree: {:?}{} x {:?}{}", a.shape(), if ta { "ᵀ" } else { "" }, b.shape(), if tb { "ᵀ" } else { "" });
    let (rsa, csa) = if ta { (1, ac) } else { (ac, 1) };
    let (rsb, csb) = if tb { (1, bc) } else { (bc, 1) };
    let mut c = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: the strides describe exactly the row-major buffers of `a`,
        // `b` and `c`, whose lengths were checked against their shapes.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data().as_ptr(),
                rsa as isize,
                csa as isize,
                b.data().as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Array::from_parts(vec![m, n], c)
}

fn zip_with(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    assert_eq!(a.shape(), b.shape(), "elementwise shapes disagree");
    Array::from_parts(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn map(a: &Array, f: impl Fn(f64) -> f64) -> Array {
    Array::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn matrix_dims(a: &Array) -> (usize, usize) {
    assert_eq!(a.shape().len(), 2, "expected a matrix, got {:?}", a.shape());
    (a.shape()[0], a.shape()[1])
}

fn vector_len(a: &Array) -> usize {
    assert_eq!(a.shape().len(), 1, "expected a vector, got {:?}", a.shape());
    a.shape()[0]
}

impl Tape {
    pub fn new() -> Self {
        Self::with_mode(CheckMode::Checked)
    }

    pub fn with_mode(mode: CheckMode) -> Self {
        Self { nodes: Vec::new(), mode, error: None }
    }

    pub fn mode(&self) -> CheckMode {
        self.mode
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

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// First numerical failure recorded so far, if any.
    pub fn check(&self) -> Result<(), EngineError> {
        match &self.error {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    /// Drops every node recorded after the first `len`. Vars pointing past
    /// the new end must not be used afterwards.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, op: Op, value: Array) -> Var {
        if self.mode == CheckMode::Checked && self.error.is_none() && !value.is_finite() {
            self.error = Some(EngineError::NonFinite { primitive: op.name() });
        }
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, i: usize) -> &Array {
        &self.nodes[i].value
    }

    /// Records an input, parameter or constant.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.leaf(Array::scalar(value))
    }

    /// `a · b` for matrices.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the matching flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let value = gemm(self.val(a.0), self.val(b.0), ta, tb);
        self.push(Op::MatMul { a: a.0, b: b.0, ta, tb }, value)
    }

    /// `x · wᵀ + bias` for `x: [n × in]`, `w: [out × in]`, `bias: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let xw = self.matmul_t(x, w, false, true);
        self.add_bias(xw, bias)
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let rows = matrix_dims(self.val(x.0)).0;
        let b = self.broadcast_rows(bias, rows);
        self.add(x, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = zip_with(self.val(a.0), self.val(b.0), |x, y| x + y);
        self.push(Op::Add(a.0, b.0), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = zip_with(self.val(a.0), self.val(b.0), |x, y| x - y);
        self.push(Op::Sub(a.0, b.0), value)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = zip_with(self.val(a.0), self.val(b.0), |x, y| x * y);
        self.push(Op::Mul(a.0, b.0), value)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = map(self.val(x.0), |v| c * v);
        self.push(Op::Scale(x.0, c), value)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        self.act_order(x.0, act, 0)
    }

    fn act_order(&mut self, x: usize, act: Activation, order: u8) -> Var {
        let value = map(self.val(x), |v| act.derivative(order, v));
        self.push(Op::Act { x, act, order }, value)
    }

    /// Repeats a vector `[n]` as every row of a `[rows × n]` matrix.
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Var {
        let src = self.val(x.0);
        let n = vector_len(src);
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(src.data());
        }
        self.push(Op::BroadcastRows(x.0), Array::from_parts(vec![rows, n], data))
    }

    /// Sums a `[rows × n]` matrix over its rows, giving `[n]`.
    pub fn col_sum(&mut self, x: Var) -> Var {
        let src = self.val(x.0);
        let (r, n) = matrix_dims(src);
        let mut out = vec![0.0; n];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(src.row(i)) {
                *o += v;
            }
        }
        self.push(Op::ColSum(x.0), Array::from_parts(vec![n], out))
    }

    /// Repeats a vector `[rows]` across `cols` columns.
    pub fn broadcast_cols(&mut self, x: Var, cols: usize) -> Var {
        let src = self.val(x.0);
        let r = vector_len(src);
        let data = src.data().iter().flat_map(|&v| std::iter::repeat_n(v, cols)).collect();
        self.push(Op::BroadcastCols(x.0), Array::from_parts(vec![r, cols], data))
    }

    /// Sums a `[rows × n]` matrix along each row, giving `[rows]`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let src = self.val(x.0);
        let (r, _) = matrix_dims(src);
        let out = (0..r).map(|i| src.row(i).iter().sum()).collect();
        self.push(Op::RowSum(x.0), Array::from_parts(vec![r], out))
    }

    /// Row-wise `ln Σ_j exp(x_ij)`, shifted by the row maximum.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let src = self.val(x.0);
        let (r, _) = matrix_dims(src);
        let out = (0..r)
            .map(|i| {
                let row = src.row(i);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        self.push(Op::LogSumExpRows(x.0), Array::from_parts(vec![r], out))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let src = self.val(x.0);
        let (r, n) = matrix_dims(src);
        let mut data = Vec::with_capacity(r * n);
        for i in 0..r {
            let row = src.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            data.extend(row.iter().map(|v| (v - m).exp()));
            let z: f64 = data[start..].iter().sum();
            data[start..].iter_mut().for_each(|e| *e /= z);
        }
        self.push(Op::SoftmaxRows(x.0), Array::from_parts(vec![r, n], data))
    }

    /// Selects rows `idx` of a matrix, which may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: impl Into<Arc<[usize]>>) -> Var {
        let idx = idx.into();
        let src = self.val(x.0);
        let (rows, n) = matrix_dims(src);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            assert!(i < rows, "gather index {i} out of {rows} rows");
            data.extend_from_slice(src.row(i));
        }
        let value = Array::from_parts(vec![idx.len(), n], data);
        self.push(Op::GatherRows { x: x.0, idx }, value)
    }

    /// Adjoint of [`Tape::gather_rows`]: adds row `j` of `x` into row
    /// `idx[j]` of a zero `[rows × n]` matrix.
    pub fn scatter_rows(&mut self, x: Var, idx: impl Into<Arc<[usize]>>, rows: usize) -> Var {
        let idx = idx.into();
        let src = self.val(x.0);
        let (m, n) = matrix_dims(src);
        assert_eq!(m, idx.len(), "scatter index count");
        let mut data = vec![0.0; rows * n];
        for (j, &i) in idx.iter().enumerate() {
            assert!(i < rows, "scatter index {i} out of {rows} rows");
            for (o, v) in data[i * n..(i + 1) * n].iter_mut().zip(src.row(j)) {
                *o += v;
            }
        }
        let value = Array::from_parts(vec![rows, n], data);
        self.push(Op::ScatterRows { x: x.0, idx }, value)
    }

    /// `out[r] = x[r, cols[r]]`.
    pub fn pick_cols(&mut self, x: Var, cols: impl Into<Arc<[usize]>>) -> Var {
        let cols = cols.into();
        let src = self.val(x.0);
        let (r, n) = matrix_dims(src);
        assert_eq!(r, cols.len(), "one column per row");
        let out = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                assert!(c < n, "column {c} out of {n}");
                src.row(i)[c]
            })
            .collect();
        self.push(Op::PickCols { x: x.0, cols }, Array::from_parts(vec![r], out))
    }

    /// Adjoint of [`Tape::pick_cols`].
    pub fn place_cols(&mut self, x: Var, cols: impl Into<Arc<[usize]>>, width: usize) -> Var {
        let cols = cols.into();
        let src = self.val(x.0);
        let r = vector_len(src);
        assert_eq!(r, cols.len(), "one column per row");
        let mut data = vec![0.0; r * width];
        for (i, &c) in cols.iter().enumerate() {
            data[i * width + c] = src.data()[i];
        }
        let value = Array::from_parts(vec![r, width], data);
        self.push(Op::PlaceCols { x: x.0, cols }, value)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x.0).data().iter().sum();
        self.push(Op::Sum(x.0), Array::scalar(s))
    }

    /// Broadcasts a one-element array to `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.val(x.0).item();
        self.push(Op::Expand(x.0), Array::filled(shape, v))
    }

    /// `Σ x_i²`, as a scalar.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.val(x.0).squared_norm();
        self.push(Op::SumSquares(x.0), Array::scalar(s))
    }

    /// Gradients of the scalar `out` with respect to each of `wrt`.
    ///
    /// The vector-Jacobian products are recorded on the tape, so every
    /// returned `Var` can itself be differentiated. Inputs with no path to
    /// `out` receive zeros.
    pub fn grad(&mut self, out: Var, wrt: &[Var]) -> Result<Vec<Var>, EngineError> {
        self.check()?;
        if self.val(out.0).len() != 1 {
            return Err(EngineError::NotScalar { shape: self.val(out.0).shape().to_vec() });
        }
        let n = out.0 + 1;
        let mut depends = vec![false; n];
        for w in wrt {
            if w.0 < n {
                depends[w.0] = true;
            }
        }
        for i in 0..n {
            if !depends[i] {
                let (ins, count) = self.nodes[i].op.inputs();
                depends[i] = ins[..count].iter().any(|&j| depends[j]);
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; n];
        if depends[out.0] {
            let shape = self.val(out.0).shape().to_vec();
            grads[out.0] = Some(self.leaf(Array::filled(&shape, 1.0)));
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            if !depends[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let contributions = self.vjp(i, &op, g, &depends)?;
            for (j, gj) in contributions {
                grads[j] = Some(match grads[j] {
                    None => gj,
                    Some(prev) => self.add(prev, gj),
                });
            }
        }
        self.check()?;

        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.val(w.0).shape().to_vec();
                    self.leaf(Array::zeros(&shape))
                }
            })
            .collect())
    }

    fn vjp(&mut self, node: usize, op: &Op, g: Var, depends: &[bool]) -> Result<Vec<(usize, Var)>, EngineError> {
        let mut out = Vec::with_capacity(2);
        let needs = |j: usize| depends[j];
        match op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                if needs(a) {
                    let ga = if ta { self.matmul_t(Var(b), g, tb, true) } else { self.matmul_t(g, Var(b), false, !tb) };
                    out.push((a, ga));
                }
                if needs(b) {
                    let gb = if tb { self.matmul_t(g, Var(a), true, ta) } else { self.matmul_t(Var(a), g, !ta, false) };
                    out.push((b, gb));
                }
            }
            &Op::Add(a, b) => {
                if needs(a) {
                    out.push((a, g));
                }
                if needs(b) {
                    out.push((b, g));
                }
            }
            &Op::Sub(a, b) => {
                if needs(a) {
                    out.push((a, g));
                }
                if needs(b) {
                    let nb = self.neg(g);
                    out.push((b, nb));
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    let ga = self.mul(g, Var(b));
                    out.push((a, ga));
                }
                if needs(b) {
                    let gb = self.mul(g, Var(a));
                    out.push((b, gb));
                }
            }
            &Op::Scale(x, c) => {
                let gx = self.scale(g, c);
                out.push((x, gx));
            }
            &Op::Act { x, act, order } => {
                let next = order + 1;
                if next > act.max_order() {
                    return Err(if act.is_smooth() {
                        EngineError::OrderExceeded { order: next, max: act.max_order() }
                    } else {
                        EngineError::NonSmooth { primitive: act.name(), order: next }
                    });
                }
                let d = self.act_order(x, act, next);
                let gx = self.mul(g, d);
                out.push((x, gx));
            }
            &Op::BroadcastRows(x) => {
                let gx = self.col_sum(g);
                out.push((x, gx));
            }
            &Op::ColSum(x) => {
                let rows = self.val(x).shape()[0];
                let gx = self.broadcast_rows(g, rows);
                out.push((x, gx));
            }
            &Op::BroadcastCols(x) => {
                let gx = self.row_sum(g);
                out.push((x, gx));
            }
            &Op::RowSum(x) => {
                let cols = self.val(x).shape()[1];
                let gx = self.broadcast_cols(g, cols);
                out.push((x, gx));
            }
            &Op::LogSumExpRows(x) => {
                let cols = self.val(x).shape()[1];
                let s = self.softmax_rows(Var(x));
                let gb = self.broadcast_cols(g, cols);
                let gx = self.mul(gb, s);
                out.push((x, gx));
            }
            &Op::SoftmaxRows(x) => {
                let s = Var(node);
                let cols = self.val(x).shape()[1];
                let gs = self.mul(g, s);
                let r = self.row_sum(gs);
                let rb = self.broadcast_cols(r, cols);
                let srb = self.mul(s, rb);
                let gx = self.sub(gs, srb);
                out.push((x, gx));
            }
            Op::GatherRows { x, idx } => {
                let rows = self.val(*x).shape()[0];
                let gx = self.scatter_rows(g, idx.clone(), rows);
                out.push((*x, gx));
            }
            Op::ScatterRows { x, idx, .. } => {
                let gx = self.gather_rows(g, idx.clone());
                out.push((*x, gx));
            }
            Op::PickCols { x, cols } => {
                let width = self.val(*x).shape()[1];
                let gx = self.place_cols(g, cols.clone(), width);
                out.push((*x, gx));
            }
            Op::PlaceCols { x, cols, .. } => {
                let gx = self.pick_cols(g, cols.clone());
                out.push((*x, gx));
            }
            &Op::Sum(x) => {
                let shape = self.val(x).shape().to_vec();
                let gx = self.expand(g, &shape);
                out.push((x, gx));
            }
            &Op::Expand(x) => {
                let gx = self.sum(g);
                out.push((x, gx));
            }
            &Op::SumSquares(x) => {
                let shape = self.val(x).shape().to_vec();
                let ge = self.expand(g, &shape);
                let two_x = self.scale(Var(x), 2.0);
                let gx = self.mul(ge, two_x);
                out.push((x, gx));
            }
        }
        Ok(out)
    }
}
