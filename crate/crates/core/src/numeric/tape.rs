//! Define-by-run reverse-mode differentiation over [`Matrix`] values.
//!
//! Every operation appends a node holding its forward value. Nodes only
//! reference earlier nodes, so walking the node list backwards from the loss
//! is a valid reverse topological order and touches each node once.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric::linalg::{Cholesky, DEFAULT_JITTER};
use crate::numeric::matrix::gemm;
use crate::numeric::Matrix;

/// Smallest argument passed to `ln`; smaller inputs are clamped and get a
/// zero derivative.
pub const LN_FLOOR: f64 = f64::MIN_POSITIVE;

/// Guard added to norm denominators in [`Tape::recon_features`].
pub const RECON_DELTA: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    DivScalar(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Tanh(Var),
    Ln(Var),
    Recip(Var),
    RowSoftmax(Var),
    RowLogSumExp(Var),
    Sum(Var),
    RowSum(Var),
    ColSum(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Diag(Var),
    NeighborScores {
        src: Var,
        dst: Var,
        nbrs: Arc<[usize]>,
    },
    NeighborAggregate {
        alpha: Var,
        feats: Var,
        nbrs: Arc<[usize]>,
    },
    ReconFeatures {
        x: Arc<Matrix>,
        xhat: Var,
    },
    CholSolve {
        s: Var,
        b: Var,
        chol: Cholesky,
    },
    LogDet {
        s: Var,
        chol: Cholesky,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients keyed by parameter id; parameters that did not reach the loss
/// have no entry.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: usize) -> Option<&Matrix> {
        self.by_param.get(id).and_then(Option::as_ref)
    }

    pub fn all_finite(&self) -> bool {
        self.by_param.iter().flatten().all(Matrix::is_finite)
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant)
    }

    /// Registers trainable parameter `id`; its gradient is reported under
    /// the same id by [`Tape::backward`].
    pub fn param(&mut self, id: usize, m: &Matrix) -> Var {
        self.push(m.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", va, vb));
        }
        let out = gemm(va, false, vb, false);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape("mul", vb)?;
        let out = va.zip_map(vb, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a `1 x C` row to every row of an `N x C` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(shape_err("add_row", va, vr));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o += *b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Scales row `i` of an `N x C` matrix by entry `i` of an `N x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (va, vc) = (self.value(a), self.value(col));
        if vc.cols() != 1 || vc.rows() != va.rows() {
            return Err(shape_err("mul_col", va, vc));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            let s = vc.get(r, 0);
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    /// Divides every entry by a `1 x 1` node.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (va, vs) = (self.value(a), self.value(s));
        if vs.shape() != (1, 1) {
            return Err(shape_err("div_scalar", va, vs));
        }
        let d = vs.item();
        let out = va.map(|v| v / d);
        Ok(self.push(out, Op::DivScalar(a, s)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Adds a constant matrix of the same shape.
    pub fn shift(&mut self, a: Var, c: &Matrix) -> Result<Var> {
        let out = self.value(a).add(c)?;
        Ok(self.push(out, Op::Shift(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Elementwise natural log with inputs clamped at [`LN_FLOOR`].
    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(LN_FLOOR).ln());
        self.push(out, Op::Ln(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| 1.0 / v);
        self.push(out, Op::Recip(a))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let out = row_softmax(self.value(a));
        self.push(out, Op::RowSoftmax(a))
    }

    /// `log Σ_j exp(a_ij)` per row, as an `N x 1` column.
    pub fn row_logsumexp(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Matrix::from_vec(
            va.rows(),
            1,
            (0..va.rows()).map(|r| logsumexp(va.row(r))).collect(),
        );
        self.push(out, Op::RowLogSumExp(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = (self.value(a).rows() * self.value(a).cols()).max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let out = self.value(a).row_sums();
        self.push(out, Op::RowSum(a))
    }

    pub fn col_sum(&mut self, a: Var) -> Var {
        let out = self.value(a).col_sums();
        self.push(out, Op::ColSum(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start > end || end > va.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: va.shape(),
                rhs: (start, end),
            });
        }
        let c = va.cols();
        let out = Matrix::from_vec(end - start, c, va.data()[start * c..end * c].to_vec());
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start > end || end > va.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: va.shape(),
                rhs: (start, end),
            });
        }
        let mut data = Vec::with_capacity(va.rows() * (end - start));
        for r in 0..va.rows() {
            data.extend_from_slice(&va.row(r)[start..end]);
        }
        let out = Matrix::from_vec(va.rows(), end - start, data);
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |p| self.value(*p).rows());
        let mut cols = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: (rows, cols),
                    rhs: v.shape(),
                });
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Matrix::from_vec(rows, cols, data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Diagonal of a square matrix as a `1 x n` row.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rows() != va.cols() {
            return Err(shape_err("diag", va, va));
        }
        let n = va.rows();
        let out = Matrix::from_vec(1, n, (0..n).map(|i| va.get(i, i)).collect());
        Ok(self.push(out, Op::Diag(a)))
    }

    /// `out[i][s] = src[i] + dst[nbrs[i*w + s]]` for `N x 1` columns `src`,
    /// `dst` and a flattened `N x w` neighbor table.
    pub fn neighbor_scores(&mut self, src: Var, dst: Var, nbrs: Arc<[usize]>) -> Result<Var> {
        let (vs, vd) = (self.value(src), self.value(dst));
        let n = vs.rows();
        if vs.cols() != 1 || vd.cols() != 1 || n == 0 || nbrs.len() % n != 0 {
            return Err(shape_err("neighbor_scores", vs, vd));
        }
        let w = nbrs.len() / n;
        let mut out = Matrix::zeros(n, w);
        for i in 0..n {
            for s in 0..w {
                out.set(i, s, vs.get(i, 0) + vd.get(nbrs[i * w + s], 0));
            }
        }
        Ok(self.push(out, Op::NeighborScores { src, dst, nbrs }))
    }

    /// `out_i = Σ_s alpha[i][s] · feats[nbrs[i*w + s]]`.
    pub fn neighbor_aggregate(&mut self, alpha: Var, feats: Var, nbrs: Arc<[usize]>) -> Result<Var> {
        let (va, vf) = (self.value(alpha), self.value(feats));
        let (n, w) = va.shape();
        if nbrs.len() != n * w {
            return Err(shape_err("neighbor_aggregate", va, vf));
        }
        let d = vf.cols();
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            let row = out.row_mut(i);
            for s in 0..w {
                let a = va.get(i, s);
                for (o, f) in row.iter_mut().zip(vf.row(nbrs[i * w + s])) {
                    *o += a * f;
                }
            }
        }
        Ok(self.push(out, Op::NeighborAggregate { alpha, feats, nbrs }))
    }

    /// Two reconstruction-quality columns per row: relative Euclidean
    /// distance `‖x−x̂‖/(‖x‖+δ)` and cosine similarity
    /// `⟨x,x̂⟩/(‖x‖‖x̂‖+δ)`. Only `xhat` is differentiated.
    pub fn recon_features(&mut self, x: Arc<Matrix>, xhat: Var) -> Result<Var> {
        let vh = self.value(xhat);
        x.same_shape("recon_features", vh)?;
        let mut out = Matrix::zeros(x.rows(), 2);
        for r in 0..x.rows() {
            let s = RowStats::new(x.row(r), vh.row(r));
            out.set(r, 0, s.rel_dist());
            out.set(r, 1, s.cosine());
        }
        Ok(self.push(out, Op::ReconFeatures { x, xhat }))
    }

    /// `s⁻¹ b` through a Cholesky factorization of `s` (with jitter retries).
    pub fn chol_solve(&mut self, s: Var, b: Var) -> Result<Var> {
        let chol = Cholesky::factor_with_retries(self.value(s), DEFAULT_JITTER)?;
        let out = chol.solve(self.value(b))?;
        Ok(self.push(out, Op::CholSolve { s, b, chol }))
    }

    /// `log|s|` of a symmetric positive-definite matrix.
    pub fn logdet(&mut self, s: Var) -> Result<Var> {
        let chol = Cholesky::factor_with_retries(self.value(s), DEFAULT_JITTER)?;
        let out = Matrix::scalar(chol.logdet());
        Ok(self.push(out, Op::LogDet { s, chol }))
    }

    /// Reverse pass from a `1 x 1` loss. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: shape.0,
                cols: shape.1,
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    if out.by_param.len() <= *id {
                        out.by_param.resize(*id + 1, None);
                    }
                    accumulate(&mut out.by_param[*id], g);
                }
                Op::MatMul(a, b) => {
                    let ga = gemm(&g, false, val(*b), true);
                    let gb = gemm(val(*a), true, &g, false);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.scale(-1.0));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(val(*b), |x, y| x * y);
                    let gb = g.zip_map(val(*a), |x, y| x * y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.col_sums());
                    acc(&mut grads, *a, g);
                }
                Op::MulCol(a, col) => {
                    let va = val(*a);
                    let vc = val(*col);
                    let mut ga = g.clone();
                    let mut gc = Matrix::zeros(vc.rows(), 1);
                    for r in 0..g.rows() {
                        let s = vc.get(r, 0);
                        let dot: f64 = g.row(r).iter().zip(va.row(r)).map(|(x, y)| x * y).sum();
                        gc.set(r, 0, dot);
                        ga.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *col, gc);
                }
                Op::DivScalar(a, s) => {
                    let d = val(*s).item();
                    let dot: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    acc(&mut grads, *s, Matrix::scalar(-dot / (d * d)));
                    acc(&mut grads, *a, g.scale(1.0 / d));
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.scale(*s)),
                Op::Shift(a) => acc(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * (1.0 - y * y));
                    acc(&mut grads, *a, ga);
                }
                Op::Ln(a) => {
                    let ga = g.zip_map(val(*a), |x, v| if v > LN_FLOOR { x / v } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Recip(a) => {
                    let ga = g.zip_map(&node.value, |x, y| -x * y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(x, p)| x * p).sum();
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o = y.get(r, c) * (g.get(r, c) - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RowLogSumExp(a) => {
                    let va = val(*a);
                    let mut ga = Matrix::zeros(va.rows(), va.cols());
                    for r in 0..va.rows() {
                        let lse = node.value.get(r, 0);
                        let gr = g.get(r, 0);
                        for (o, v) in ga.row_mut(r).iter_mut().zip(va.row(r)) {
                            *o = gr * (v - lse).exp();
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(&mut grads, *a, Matrix::filled(r, c, g.item()));
                }
                Op::RowSum(a) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        let v = g.get(i, 0);
                        ga.row_mut(i).iter_mut().for_each(|o| *o = v);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ColSum(a) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i).copy_from_slice(g.data());
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    ga.data_mut()[start * c..start * c + g.data().len()].copy_from_slice(g.data());
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = val(*p).cols();
                        let mut gp = Matrix::zeros(g.rows(), w);
                        for i in 0..g.rows() {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        offset += w;
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::Diag(a) => {
                    let n = g.cols();
                    let ga = Matrix::diag(&g.data()[..n]);
                    acc(&mut grads, *a, ga);
                }
                Op::NeighborScores { src, dst, nbrs } => {
                    let (n, w) = g.shape();
                    let mut gs = Matrix::zeros(n, 1);
                    let mut gd = Matrix::zeros(val(*dst).rows(), 1);
                    for i in 0..n {
                        let mut total = 0.0;
                        for s in 0..w {
                            let v = g.get(i, s);
                            total += v;
                            let j = nbrs[i * w + s];
                            gd.set(j, 0, gd.get(j, 0) + v);
                        }
                        gs.set(i, 0, total);
                    }
                    acc(&mut grads, *src, gs);
                    acc(&mut grads, *dst, gd);
                }
                Op::NeighborAggregate { alpha, feats, nbrs } => {
                    let va = val(*alpha);
                    let vf = val(*feats);
                    let (n, w) = va.shape();
                    let mut galpha = Matrix::zeros(n, w);
                    let mut gf = Matrix::zeros(vf.rows(), vf.cols());
                    for i in 0..n {
                        let gi = g.row(i);
                        for s in 0..w {
                            let j = nbrs[i * w + s];
                            let dot: f64 = gi.iter().zip(vf.row(j)).map(|(x, y)| x * y).sum();
                            galpha.set(i, s, dot);
                            let a = va.get(i, s);
                            for (o, x) in gf.row_mut(j).iter_mut().zip(gi) {
                                *o += a * x;
                            }
                        }
                    }
                    acc(&mut grads, *alpha, galpha);
                    acc(&mut grads, *feats, gf);
                }
                Op::ReconFeatures { x, xhat } => {
                    let vh = val(*xhat);
                    let mut gh = Matrix::zeros(vh.rows(), vh.cols());
                    for r in 0..vh.rows() {
                        let xr = x.row(r);
                        let hr = vh.row(r);
                        let s = RowStats::new(xr, hr);
                        let (g1, g2) = (g.get(r, 0), g.get(r, 1));
                        let d1 = s.nx + RECON_DELTA;
                        let d2 = s.nx * s.nh + RECON_DELTA;
                        let out = gh.row_mut(r);
                        for c in 0..out.len() {
                            let mut v = 0.0;
                            if s.nr > 0.0 {
                                v -= g1 * (xr[c] - hr[c]) / (s.nr * d1);
                            }
                            v += g2 * xr[c] / d2;
                            if s.nh > 0.0 {
                                v -= g2 * s.dot * s.nx * hr[c] / (s.nh * d2 * d2);
                            }
                            out[c] = v;
                        }
                    }
                    acc(&mut grads, *xhat, gh);
                }
                Op::CholSolve { s, b, chol } => {
                    // ∂b = s⁻¹ g ; ∂s = -(s⁻¹ g) yᵀ
                    let gb = chol.solve(&g)?;
                    let gs = gemm(&gb, false, &node.value, true).scale(-1.0);
                    acc(&mut grads, *s, gs);
                    acc(&mut grads, *b, gb);
                }
                Op::LogDet { s, chol } => {
                    let inv = chol.solve(&Matrix::identity(chol.dim()))?;
                    acc(&mut grads, *s, inv.scale(g.item()));
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    accumulate(&mut grads[v.0], g);
}

struct RowStats {
    nx: f64,
    nh: f64,
    nr: f64,
    dot: f64,
}

impl RowStats {
    fn new(x: &[f64], h: &[f64]) -> Self {
        let (mut xx, mut hh, mut rr, mut dot) = (0.0, 0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(h) {
            xx += a * a;
            hh += b * b;
            rr += (a - b) * (a - b);
            dot += a * b;
        }
        RowStats {
            nx: xx.sqrt(),
            nh: hh.sqrt(),
            nr: rr.sqrt(),
            dot,
        }
    }

    fn rel_dist(&self) -> f64 {
        self.nr / (self.nx + RECON_DELTA)
    }

    fn cosine(&self) -> f64 {
        self.dot / (self.nx * self.nh + RECON_DELTA)
    }
}

/// Numerically stable `log Σ exp(v)`; `-inf` entries contribute nothing.
pub fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax with per-row max subtraction.
pub fn row_softmax(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let w = Matrix::new(2, 3, vec![0.1, -0.4, 2.0, 1.0, 0.0, 3.5]).unwrap();
        let mut t = Tape::new();
        let wv = t.param(0, &w);
        let l = t.sum(wv);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(0).unwrap(), &Matrix::filled(2, 3, 1.0));
    }

    #[test]
    fn unused_param_has_no_gradient() {
        let mut t = Tape::new();
        let a = t.param(0, &Matrix::scalar(2.0));
        let _b = t.param(1, &Matrix::scalar(3.0));
        let l = t.mul(a, a).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(0).unwrap().item(), 4.0);
        assert!(g.get(1).is_none());
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut t = Tape::new();
        let a = t.param(0, &Matrix::scalar(1.0));
        let l = t.sum(a);
        t.backward(l).unwrap();
        assert!(matches!(t.backward(l), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let a = t.param(0, &Matrix::zeros(2, 2));
        assert!(matches!(t.backward(a), Err(Error::NonScalarLoss { rows: 2, cols: 2 })));
    }

    #[test]
    fn uniform_softmax() {
        let s = row_softmax(&Matrix::zeros(1, 3));
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_logit_softmax_matches_scalar_formula() {
        let (c, k) = (0.7_f64, 1.0_f64);
        let s = row_softmax(&Matrix::new(1, 2, vec![c, c + k]).unwrap());
        let e = k.exp();
        assert!((s.get(0, 0) - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((s.get(0, 1) - e / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_handles_neg_infinity() {
        assert_eq!(logsumexp(&[f64::NEG_INFINITY, 0.0]), 0.0);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn recon_features_perfect_and_negated() {
        let x = Arc::new(Matrix::new(1, 3, vec![0.2, 0.5, 0.1]).unwrap());
        let mut t = Tape::new();
        let same = t.constant((*x).clone());
        let neg = t.constant(x.scale(-1.0));
        let a = t.recon_features(x.clone(), same).unwrap();
        let b = t.recon_features(x, neg).unwrap();
        assert!(t.value(a).get(0, 0).abs() < 1e-12);
        assert!((t.value(a).get(0, 1) - 1.0).abs() < 1e-10);
        assert!((t.value(b).get(0, 1) + 1.0).abs() < 1e-10);
    }
}
