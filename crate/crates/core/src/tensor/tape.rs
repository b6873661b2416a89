//! Flat gradient tape. Every primitive evaluates eagerly, records its node,
//! and node ids are a topological order by construction. `backward` walks
//! the tape once in reverse and accumulates vector-Jacobian products.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::gemm::matmul_into;
use super::pointwise::PointwiseFn;
use super::value::Tensor;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddConst,
    MaxConst(f64),
    Pointwise(PointwiseFn),
    MatMul,
    Transpose,
    Sum,
    Mean,
    Reshape,
    GatherRows(Arc<Vec<usize>>),
    ConcatRows,
    SliceCols { start: usize, end: usize },
    ConcatCols,
    RowNormalize,
    NormalizeCols,
    AddRowBias,
    SoftmaxRows,
    LayerNormRows { eps: f64 },
    PairRowMix(Arc<Vec<(usize, usize)>>),
    PairwiseSqdist,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Gradient table produced by [`Tape::backward`]; indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    table: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` required one.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.table.get(v.id).and_then(Option::as_ref)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// How a binary elementwise op pairs its operands.
#[derive(Clone, Copy, PartialEq)]
enum Pairing {
    Elementwise,
    ScalarLhs,
    ScalarRhs,
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

    /// Registers a leaf value. Gradients are produced only for leaves with
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(Op::Leaf, vec![], value, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Copies the current value of `v` into a fresh gradient-free leaf.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.id].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::invalid("tape", "tape reused after backward"));
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Ok(Var { id })
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn pairing(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Result<Pairing> {
        if lhs.shape() == rhs.shape() {
            Ok(Pairing::Elementwise)
        } else if rhs.numel() == 1 {
            Ok(Pairing::ScalarRhs)
        } else if lhs.numel() == 1 {
            Ok(Pairing::ScalarLhs)
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: lhs.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        op: Op,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (la, lb) = (self.value(a), self.value(b));
        let pairing = Self::pairing(name, la, lb)?;
        let out = match pairing {
            Pairing::Elementwise => {
                let data = la
                    .data()
                    .iter()
                    .zip(lb.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                Tensor::new(la.shape().to_vec(), data)?
            }
            Pairing::ScalarRhs => {
                let s = lb.data()[0];
                let data = la.data().iter().map(|&x| f(x, s)).collect();
                Tensor::new(la.shape().to_vec(), data)?
            }
            Pairing::ScalarLhs => {
                let s = la.data()[0];
                let data = lb.data().iter().map(|&y| f(s, y)).collect();
                Tensor::new(lb.shape().to_vec(), data)?
            }
        };
        let rg = self.any_grad(&[a.id, b.id]);
        self.push(op, vec![a.id, b.id], out, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&y| y == 0.0) {
            return Err(Error::invalid("div", "division by zero"));
        }
        self.binary(Op::Div, "div", a, b, |x, y| x / y)
    }

    /// Left fold of `add` over `vars`.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::invalid("add_n", "empty operand list"))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    fn unary(
        &mut self,
        op: Op,
        a: Var,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var> {
        let la = self.value(a);
        let data = la.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(la.shape().to_vec(), data)?;
        let rg = self.nodes[a.id].requires_grad;
        self.push(op, vec![a.id], out, rg)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Neg, a, |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Op::Scale(c), a, |x| c * x)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Op::AddConst, a, |x| x + c)
    }

    /// Elementwise max(x, c).
    pub fn max_const(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Op::MaxConst(c), a, |x| x.max(c))
    }

    pub fn pointwise(&mut self, a: Var, f: PointwiseFn) -> Result<Var> {
        for &x in self.value(a).data() {
            if let Some(msg) = f.domain_error(x) {
                return Err(Error::invalid(f.name(), msg));
            }
        }
        self.unary(Op::Pointwise(f), a, |x| f.eval(x))
    }

    pub fn arctan(&mut self, a: Var) -> Result<Var> {
        self.pointwise(a, PointwiseFn::Arctan)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.pointwise(a, PointwiseFn::Exp)
    }

    /// ln(max(x, 1e-12)); negative inputs are a domain error.
    pub fn log_guarded(&mut self, a: Var) -> Result<Var> {
        self.pointwise(a, PointwiseFn::LogGuarded)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.pointwise(a, PointwiseFn::Sigmoid)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.pointwise(a, PointwiseFn::Gelu)
    }

    /// Matrix product `(n,k)·(k,m) -> (n,m)` or matrix-vector
    /// `(n,k)·(k,) -> (n,)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (la, lb) = (self.value(a), self.value(b));
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: la.shape().to_vec(),
            rhs: lb.shape().to_vec(),
        };
        let out = match (la.rank(), lb.rank()) {
            (2, 2) => {
                let (n, k) = (la.shape()[0], la.shape()[1]);
                let (k2, m) = (lb.shape()[0], lb.shape()[1]);
                if k != k2 {
                    return Err(mismatch());
                }
                let mut c = vec![0.0; n * m];
                matmul_into(la.data(), n, k, false, lb.data(), k2, m, false, &mut c, false);
                Tensor::new(vec![n, m], c)?
            }
            (2, 1) => {
                let (n, k) = (la.shape()[0], la.shape()[1]);
                if k != lb.shape()[0] {
                    return Err(mismatch());
                }
                let mut c = vec![0.0; n];
                matmul_into(la.data(), n, k, false, lb.data(), k, 1, false, &mut c, false);
                Tensor::new(vec![n], c)?
            }
            _ => return Err(mismatch()),
        };
        let rg = self.any_grad(&[a.id, b.id]);
        self.push(Op::MatMul, vec![a.id, b.id], out, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let la = self.value(a);
        if la.rank() != 2 {
            return Err(Error::invalid("transpose", "rank-2 tensor required"));
        }
        let (n, m) = (la.shape()[0], la.shape()[1]);
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = la.data()[i * m + j];
            }
        }
        let rg = self.nodes[a.id].requires_grad;
        self.push(Op::Transpose, vec![a.id], Tensor::new(vec![m, n], data)?, rg)
    }

    /// Sum of all elements; returns a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.nodes[a.id].requires_grad;
        self.push(Op::Sum, vec![a.id], Tensor::scalar(s), rg)
    }

    /// Mean of all elements; returns a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let la = self.value(a);
        if la.numel() == 0 {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let s: f64 = la.data().iter().sum();
        let m = s / la.numel() as f64;
        let rg = self.nodes[a.id].requires_grad;
        self.push(Op::Mean, vec![a.id], Tensor::scalar(m), rg)
    }

    /// Reinterprets the buffer with a new shape of equal element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let la = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != la.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: la.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor::new(shape.to_vec(), la.data().to_vec())?;
        let rg = self.nodes[a.id].requires_grad;
        self.push(Op::Reshape, vec![a.id], out, rg)
    }

    /// Selects rows of a matrix (or elements of a vector) by index, with
    /// repetition allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let la = self.value(a);
        let n = la.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(
                "gather_rows",
                format!("index {bad} out of bounds for {n} rows"),
            ));
        }
        let out = match la.rank() {
            1 => Tensor::vector(idx.iter().map(|&i| la.data()[i]).collect()),
            2 => {
                let d = la.cols();
                let mut data = Vec::with_capacity(idx.len() * d);
                for &i in idx {
                    data.extend_from_slice(&la.data()[i * d..(i + 1) * d]);
                }
                Tensor::new(vec![idx.len(), d], data)?
            }
            _ => return Err(Error::invalid("gather_rows", "rank-1 or rank-2 required")),
        };
        let rg = self.nodes[a.id].requires_grad;
        self.push(
            Op::GatherRows(Arc::new(idx.to_vec())),
            vec![a.id],
            out,
            rg,
        )
    }

    /// Stacks matrices with equal column counts (or vectors) along rows.
    pub fn concat_rows(&mut self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::invalid("concat_rows", "empty operand list"));
        }
        let rank = self.value(vars[0]).rank();
        let out = match rank {
            1 => {
                let mut data = Vec::new();
                for &v in vars {
                    let t = self.value(v);
                    if t.rank() != 1 {
                        return Err(Error::invalid("concat_rows", "mixed ranks"));
                    }
                    data.extend_from_slice(t.data());
                }
                Tensor::vector(data)
            }
            2 => {
                let d = self.value(vars[0]).cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for &v in vars {
                    let t = self.value(v);
                    if t.rank() != 2 || t.cols() != d {
                        return Err(Error::ShapeMismatch {
                            op: "concat_rows",
                            lhs: self.value(vars[0]).shape().to_vec(),
                            rhs: t.shape().to_vec(),
                        });
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::new(vec![rows, d], data)?
            }
            _ => return Err(Error::invalid("concat_rows", "rank-1 or rank-2 required")),
        };
        let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
        let rg = self.any_grad(&ids);
        self.push(Op::ConcatRows, ids, out, rg)
    }

    /// Contiguous column slice `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let la = self.value(a);
        if la.rank() != 2 {
            return Err(Error::invalid("slice_cols", "rank-2 tensor required"));
        }
        let (n, d) = (la.rows(), la.cols());
        if start >= end || end > d {
            return Err(Error::invalid(
                "slice_cols",
                format!("range {start}..{end} invalid for {d} columns"),
            ));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&la.data()[i * d + start..i * d + end]);
        }
        let rg = self.nodes[a.id].requires_grad;
        self.push(
            Op::SliceCols { start, end },
            vec![a.id],
            Tensor::new(vec![n, w], data)?,
            rg,
        )
    }

    /// Stacks matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::invalid("concat_cols", "empty operand list"));
        }
        let n = self.value(vars[0]).rows();
        let mut widths = Vec::with_capacity(vars.len());
        let mut total = 0;
        for &v in vars {
            let t = self.value(v);
            if t.rank() != 2 || t.rows() != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(vars[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            widths.push(t.cols());
            total += t.cols();
        }
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for (&v, &w) in vars.iter().zip(&widths) {
            let t = self.value(v);
            for i in 0..n {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&t.data()[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
        let rg = self.any_grad(&ids);
        self.push(Op::ConcatCols, ids, Tensor::new(vec![n, total], data)?, rg)
    }

    /// Divides each row of a matrix by its L2 norm; a zero-norm row is an
    /// error naming the row.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let la = self.value(a);
        if la.rank() != 2 {
            return Err(Error::invalid("row_normalize", "rank-2 tensor required"));
        }
        let (n, d) = (la.rows(), la.cols());
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &la.data()[i * d..(i + 1) * d];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::invalid(
                    "row_normalize",
                    format!("row {i} has zero norm"),
                ));
            }
            for j in 0..d {
                data[i * d + j] = row[j] / norm;
            }
        }
        let rg = self.nodes[a.id].requires_grad;
        self.push(
            Op::RowNormalize,
            vec![a.id],
            Tensor::new(vec![n, d], data)?,
            rg,
        )
    }

    /// Divides each column by its sum; a zero-sum column is an error.
    pub fn normalize_cols(&mut self, a: Var) -> Result<Var> {
        let la = self.value(a);
        if la.rank() != 2 {
            return Err(Error::invalid("normalize_cols", "rank-2 tensor required"));
        }
        let (n, d) = (la.rows(), la.cols());
        let mut sums = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                sums[j] += la.data()[i * d + j];
            }
        }
        if let Some(j) = sums.iter().position(|&s| s == 0.0) {
            return Err(Error::invalid(
                "normalize_cols",
                format!("column {j} has zero sum"),
            ));
        }
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] = la.data()[i * d + j] / sums[j];
            }
        }
        let rg = self.nodes[a.id].requires_grad;
        self.push(
            Op::NormalizeCols,
            vec![a.id],
            Tensor::new(vec![n, d], data)?,
            rg,
        )
    }

    /// Adds a length-d bias vector to every row of an (n,d) matrix.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (la, lb) = (self.value(a), self.value(bias));
        if la.rank() != 2 || lb.rank() != 1 || la.cols() != lb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: la.shape().to_vec(),
                rhs: lb.shape().to_vec(),
            });
        }
        let (n, d) = (la.rows(), la.cols());
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] = la.data()[i * d + j] + lb.data()[j];
            }
        }
        let rg = self.any_grad(&[a.id, bias.id]);
        self.push(
            Op::AddRowBias,
            vec![a.id, bias.id],
            Tensor::new(vec![n, d], data)?,
            rg,
        )
    }

    /// Row-wise softmax of a matrix (max-shifted for stability).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let la = self.value(a);
        if la.rank() != 2 {
            return Err(Error::invalid("softmax_rows", "rank-2 tensor required"));
        }
        let (n, d) = (la.rows(), la.cols());
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &la.data()[i * d..(i + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..d {
                let e = (row[j] - m).exp();
                data[i * d + j] = e;
                z += e;
            }
            for j in 0..d {
                data[i * d + j] /= z;
            }
        }
        let rg = self.nodes[a.id].requires_grad;
        self.push(
            Op::SoftmaxRows,
            vec![a.id],
            Tensor::new(vec![n, d], data)?,
            rg,
        )
    }

    /// Row-wise layer normalization with learnable gain and shift.
    pub fn layer_norm_rows(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (la, lg, lb) = (self.value(a), self.value(gamma), self.value(beta));
        if la.rank() != 2
            || lg.rank() != 1
            || lb.rank() != 1
            || lg.shape()[0] != la.cols()
            || lb.shape()[0] != la.cols()
        {
            return Err(Error::ShapeMismatch {
                op: "layer_norm_rows",
                lhs: la.shape().to_vec(),
                rhs: lg.shape().to_vec(),
            });
        }
        let (n, d) = (la.rows(), la.cols());
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &la.data()[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
            let sigma = (var + eps).sqrt();
            for j in 0..d {
                let xhat = (row[j] - mu) / sigma;
                data[i * d + j] = lg.data()[j] * xhat + lb.data()[j];
            }
        }
        let rg = self.any_grad(&[a.id, gamma.id, beta.id]);
        self.push(
            Op::LayerNormRows { eps },
            vec![a.id, gamma.id, beta.id],
            Tensor::new(vec![n, d], data)?,
            rg,
        )
    }

    /// Applies one layer of symmetric pair mixing: rows (i, j) of `x` become
    /// `a·x_i + (1-a)·x_j` and `(1-a)·x_i + a·x_j`, one coefficient per
    /// pair. `x` may be a vector or a matrix; untouched rows pass through.
    pub fn pair_row_mix(&mut self, x: Var, coeff: Var, pairs: Arc<Vec<(usize, usize)>>) -> Result<Var> {
        let (lx, lc) = (self.value(x), self.value(coeff));
        let r = lx.rows();
        if lc.rank() != 1 || lc.shape()[0] != pairs.len() {
            return Err(Error::ShapeMismatch {
                op: "pair_row_mix",
                lhs: lx.shape().to_vec(),
                rhs: lc.shape().to_vec(),
            });
        }
        let mut seen = vec![false; r];
        for &(i, j) in pairs.iter() {
            if i >= j || j >= r {
                return Err(Error::invalid(
                    "pair_row_mix",
                    format!("pair ({i},{j}) invalid for {r} rows"),
                ));
            }
            if seen[i] || seen[j] {
                return Err(Error::invalid(
                    "pair_row_mix",
                    format!("pair ({i},{j}) overlaps another pair"),
                ));
            }
            seen[i] = true;
            seen[j] = true;
        }
        let c = lx.cols();
        let mut data = lx.data().to_vec();
        for (q, &(i, j)) in pairs.iter().enumerate() {
            let a = lc.data()[q];
            for col in 0..c {
                let xi = lx.data()[i * c + col];
                let xj = lx.data()[j * c + col];
                data[i * c + col] = a * xi + (1.0 - a) * xj;
                data[j * c + col] = (1.0 - a) * xi + a * xj;
            }
        }
        let out = Tensor::new(lx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x.id, coeff.id]);
        self.push(Op::PairRowMix(pairs), vec![x.id, coeff.id], out, rg)
    }

    /// Squared Euclidean distances between rows of `a` (n,d) and rows of
    /// `b` (m,d), producing (n,m).
    pub fn pairwise_sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (la, lb) = (self.value(a), self.value(b));
        if la.rank() != 2 || lb.rank() != 2 || la.cols() != lb.cols() {
            return Err(Error::ShapeMismatch {
                op: "pairwise_sqdist",
                lhs: la.shape().to_vec(),
                rhs: lb.shape().to_vec(),
            });
        }
        let (n, m, d) = (la.rows(), lb.rows(), la.cols());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for k in 0..d {
                    let diff = la.data()[i * d + k] - lb.data()[j * d + k];
                    s += diff * diff;
                }
                data[i * m + j] = s;
            }
        }
        let rg = self.any_grad(&[a.id, b.id]);
        self.push(
            Op::PairwiseSqdist,
            vec![a.id, b.id],
            Tensor::new(vec![n, m], data)?,
            rg,
        )
    }

    /// Reverse-mode sweep from a scalar loss. Returns gradients for every
    /// node that required one; every `requires_grad` leaf is present (zeros
    /// when off the gradient path). The tape cannot be used afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::invalid("backward", "tape reused after backward"));
        }
        self.consumed = true;
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut table: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                table.push(None);
                continue;
            }
            match grads[id].take() {
                Some(g) => table.push(Some(Tensor::new(node.value.shape().to_vec(), g)?)),
                None if matches!(node.op, Op::Leaf) => {
                    table.push(Some(Tensor::zeros(node.value.shape())))
                }
                None => table.push(None),
            }
        }
        Ok(Gradients { table })
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, add: impl FnOnce(&mut [f64])) {
        let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
        add(slot);
    }

    /// Adds this node's vector-Jacobian product into its inputs' slots.
    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let want = |i: usize| self.nodes[ins[i]].requires_grad;
        let val = |i: usize| &self.nodes[ins[i]].value;

        match &node.op {
            Op::Leaf => {}
            Op::Add | Op::Sub => {
                let sign = if matches!(node.op, Op::Sub) { -1.0 } else { 1.0 };
                let (a, b) = (val(0), val(1));
                if want(0) {
                    Self::accumulate(grads, ins[0], a.numel(), |ga| {
                        if a.numel() == g.len() {
                            for (s, &gv) in ga.iter_mut().zip(g) {
                                *s += gv;
                            }
                        } else {
                            ga[0] += g.iter().sum::<f64>();
                        }
                    });
                }
                if want(1) {
                    Self::accumulate(grads, ins[1], b.numel(), |gb| {
                        if b.numel() == g.len() {
                            for (s, &gv) in gb.iter_mut().zip(g) {
                                *s += sign * gv;
                            }
                        } else {
                            gb[0] += sign * g.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Mul => {
                let (a, b) = (val(0), val(1));
                if want(0) {
                    Self::accumulate(grads, ins[0], a.numel(), |ga| {
                        if a.numel() == g.len() && b.numel() == g.len() {
                            for k in 0..g.len() {
                                ga[k] += g[k] * b.data()[k];
                            }
                        } else if b.numel() == 1 {
                            for k in 0..g.len() {
                                ga[k] += g[k] * b.data()[0];
                            }
                        } else {
                            // a is the scalar side
                            ga[0] += g.iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).sum::<f64>();
                        }
                    });
                }
                if want(1) {
                    Self::accumulate(grads, ins[1], b.numel(), |gb| {
                        if a.numel() == g.len() && b.numel() == g.len() {
                            for k in 0..g.len() {
                                gb[k] += g[k] * a.data()[k];
                            }
                        } else if a.numel() == 1 {
                            for k in 0..g.len() {
                                gb[k] += g[k] * a.data()[0];
                            }
                        } else {
                            gb[0] += g.iter().zip(a.data()).map(|(&gv, &av)| gv * av).sum::<f64>();
                        }
                    });
                }
            }
            Op::Div => {
                let (a, b) = (val(0), val(1));
                let out = &node.value;
                if want(0) {
                    Self::accumulate(grads, ins[0], a.numel(), |ga| {
                        if a.numel() == g.len() && b.numel() == g.len() {
                            for k in 0..g.len() {
                                ga[k] += g[k] / b.data()[k];
                            }
                        } else if b.numel() == 1 {
                            for k in 0..g.len() {
                                ga[k] += g[k] / b.data()[0];
                            }
                        } else {
                            ga[0] += g
                                .iter()
                                .zip(b.data())
                                .map(|(&gv, &bv)| gv / bv)
                                .sum::<f64>();
                        }
                    });
                }
                if want(1) {
                    Self::accumulate(grads, ins[1], b.numel(), |gb| {
                        if a.numel() == g.len() && b.numel() == g.len() {
                            for k in 0..g.len() {
                                gb[k] -= g[k] * out.data()[k] / b.data()[k];
                            }
                        } else if b.numel() == 1 {
                            let s: f64 = g
                                .iter()
                                .zip(out.data())
                                .map(|(&gv, &ov)| gv * ov)
                                .sum();
                            gb[0] -= s / b.data()[0];
                        } else {
                            for k in 0..g.len() {
                                gb[k] -= g[k] * out.data()[k] / b.data()[k];
                            }
                        }
                    });
                }
            }
            Op::Neg => {
                if want(0) {
                    Self::accumulate(grads, ins[0], g.len(), |ga| {
                        for k in 0..g.len() {
                            ga[k] -= g[k];
                        }
                    });
                }
            }
            Op::Scale(c) => {
                if want(0) {
                    let c = *c;
                    Self::accumulate(grads, ins[0], g.len(), |ga| {
                        for k in 0..g.len() {
                            ga[k] += c * g[k];
                        }
                    });
                }
            }
            Op::AddConst => {
                if want(0) {
                    Self::accumulate(grads, ins[0], g.len(), |ga| {
                        for k in 0..g.len() {
                            ga[k] += g[k];
                        }
                    });
                }
            }
            Op::MaxConst(c) => {
                if want(0) {
                    let a = val(0);
                    let c = *c;
                    Self::accumulate(grads, ins[0], g.len(), |ga| {
                        for k in 0..g.len() {
                            if a.data()[k] > c {
                                ga[k] += g[k];
                            }
                        }
                    });
                }
            }
            Op::Pointwise(f) => {
                if want(0) {
                    let a = val(0);
                    Self::accumulate(grads, ins[0], g.len(), |ga| {
                        for k in 0..g.len() {
                            ga[k] += g[k] * f.deriv(a.data()[k]);
                        }
                    });
                }
            }
            Op::MatMul => {
                let (a, b) = (val(0), val(1));
                if b.rank() == 2 {
                    let (n, k) = (a.shape()[0], a.shape()[1]);
                    let m = b.shape()[1];
                    if want(0) {
                        Self::accumulate(grads, ins[0], n * k, |ga| {
                            matmul_into(g, n, m, false, b.data(), k, m, true, ga, true);
                        });
                    }
                    if want(1) {
                        Self::accumulate(grads, ins[1], k * m, |gb| {
                            matmul_into(a.data(), n, k, true, g, n, m, false, gb, true);
                        });
                    }
                } else {
                    let (n, k) = (a.shape()[0], a.shape()[1]);
                    if want(0) {
                        Self::accumulate(grads, ins[0], n * k, |ga| {
                            for i in 0..n {
                                for j in 0..k {
                                    ga[i * k + j] += g[i] * b.data()[j];
                                }
                            }
                        });
                    }
                    if want(1) {
                        Self::accumulate(grads, ins[1], k, |gb| {
                            matmul_into(a.data(), n, k, true, g, n, 1, false, gb, true);
                        });
                    }
                }
            }
            Op::Transpose => {
                if want(0) {
                    let a = val(0);
                    let (n, m) = (a.shape()[0], a.shape()[1]);
                    Self::accumulate(grads, ins[0], n * m, |ga| {
                        for i in 0..m {
                            for j in 0..n {
                                ga[j * m + i] += g[i * n + j];
                            }
                        }
                    });
                }
            }
            Op::Sum => {
                if want(0) {
                    let numel = val(0).numel();
                    Self::accumulate(grads, ins[0], numel, |ga| {
                        for s in ga.iter_mut() {
                            *s += g[0];
                        }
                    });
                }
            }
            Op::Mean => {
                if want(0) {
                    let numel = val(0).numel();
                    let w = g[0] / numel as f64;
                    Self::accumulate(grads, ins[0], numel, |ga| {
                        for s in ga.iter_mut() {
                            *s += w;
                        }
                    });
                }
            }
            Op::Reshape => {
                if want(0) {
                    Self::accumulate(grads, ins[0], g.len(), |ga| {
                        for k in 0..g.len() {
                            ga[k] += g[k];
                        }
                    });
                }
            }
            Op::GatherRows(idx) => {
                if want(0) {
                    let a = val(0);
                    let d = if a.rank() == 2 { a.cols() } else { 1 };
                    Self::accumulate(grads, ins[0], a.numel(), |ga| {
                        for (r, &i) in idx.iter().enumerate() {
                            for c in 0..d {
                                ga[i * d + c] += g[r * d + c];
                            }
                        }
                    });
                }
            }
            Op::ConcatRows => {
                let mut off = 0;
                for (slot, &inp) in ins.iter().enumerate() {
                    let len = self.nodes[inp].value.numel();
                    if want(slot) {
                        Self::accumulate(grads, inp, len, |ga| {
                            for k in 0..len {
                                ga[k] += g[off + k];
                            }
                        });
                    }
                    off += len;
                }
            }
            Op::SliceCols { start, end } => {
                if want(0) {
                    let a = val(0);
                    let (n, d) = (a.rows(), a.cols());
                    let w = end - start;
                    Self::accumulate(grads, ins[0], n * d, |ga| {
                        for i in 0..n {
                            for j in 0..w {
                                ga[i * d + start + j] += g[i * w + j];
                            }
                        }
                    });
                }
            }
            Op::ConcatCols => {
                let n = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for (slot, &inp) in ins.iter().enumerate() {
                    let t = &self.nodes[inp].value;
                    let w = t.cols();
                    if want(slot) {
                        Self::accumulate(grads, inp, t.numel(), |ga| {
                            for i in 0..n {
                                for j in 0..w {
                                    ga[i * w + j] += g[i * total + off + j];
                                }
                            }
                        });
                    }
                    off += w;
                }
            }
            Op::RowNormalize => {
                if want(0) {
                    let a = val(0);
                    let y = &node.value;
                    let (n, d) = (a.rows(), a.cols());
                    Self::accumulate(grads, ins[0], n * d, |ga| {
                        for i in 0..n {
                            let row = &a.data()[i * d..(i + 1) * d];
                            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                            let yrow = &y.data()[i * d..(i + 1) * d];
                            let grow = &g[i * d..(i + 1) * d];
                            let dot: f64 = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum();
                            for j in 0..d {
                                ga[i * d + j] += (grow[j] - dot * yrow[j]) / norm;
                            }
                        }
                    });
                }
            }
            Op::NormalizeCols => {
                if want(0) {
                    let a = val(0);
                    let y = &node.value;
                    let (n, d) = (a.rows(), a.cols());
                    Self::accumulate(grads, ins[0], n * d, |ga| {
                        for j in 0..d {
                            let mut s = 0.0;
                            let mut dot = 0.0;
                            for i in 0..n {
                                s += a.data()[i * d + j];
                                dot += g[i * d + j] * y.data()[i * d + j];
                            }
                            for i in 0..n {
                                ga[i * d + j] += (g[i * d + j] - dot) / s;
                            }
                        }
                    });
                }
            }
            Op::AddRowBias => {
                let a = val(0);
                let (n, d) = (a.rows(), a.cols());
                if want(0) {
                    Self::accumulate(grads, ins[0], n * d, |ga| {
                        for k in 0..n * d {
                            ga[k] += g[k];
                        }
                    });
                }
                if want(1) {
                    Self::accumulate(grads, ins[1], d, |gb| {
                        for i in 0..n {
                            for j in 0..d {
                                gb[j] += g[i * d + j];
                            }
                        }
                    });
                }
            }
            Op::SoftmaxRows => {
                if want(0) {
                    let y = &node.value;
                    let (n, d) = (y.rows(), y.cols());
                    Self::accumulate(grads, ins[0], n * d, |ga| {
                        for i in 0..n {
                            let yrow = &y.data()[i * d..(i + 1) * d];
                            let grow = &g[i * d..(i + 1) * d];
                            let dot: f64 = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum();
                            for j in 0..d {
                                ga[i * d + j] += yrow[j] * (grow[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNormRows { eps } => {
                let a = val(0);
                let gamma = val(1);
                let (n, d) = (a.rows(), a.cols());
                // Recompute per-row statistics once for all three inputs.
                let mut xhat = vec![0.0; n * d];
                let mut sigmas = vec![0.0; n];
                for i in 0..n {
                    let row = &a.data()[i * d..(i + 1) * d];
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
                    let sigma = (var + eps).sqrt();
                    sigmas[i] = sigma;
                    for j in 0..d {
                        xhat[i * d + j] = (row[j] - mu) / sigma;
                    }
                }
                if want(0) {
                    Self::accumulate(grads, ins[0], n * d, |ga| {
                        for i in 0..n {
                            let grow = &g[i * d..(i + 1) * d];
                            let xrow = &xhat[i * d..(i + 1) * d];
                            let mut mean_h = 0.0;
                            let mut mean_hx = 0.0;
                            for j in 0..d {
                                let h = grow[j] * gamma.data()[j];
                                mean_h += h;
                                mean_hx += h * xrow[j];
                            }
                            mean_h /= d as f64;
                            mean_hx /= d as f64;
                            for j in 0..d {
                                let h = grow[j] * gamma.data()[j];
                                ga[i * d + j] += (h - mean_h - xrow[j] * mean_hx) / sigmas[i];
                            }
                        }
                    });
                }
                if want(1) {
                    Self::accumulate(grads, ins[1], d, |gg| {
                        for i in 0..n {
                            for j in 0..d {
                                gg[j] += g[i * d + j] * xhat[i * d + j];
                            }
                        }
                    });
                }
                if want(2) {
                    Self::accumulate(grads, ins[2], d, |gb| {
                        for i in 0..n {
                            for j in 0..d {
                                gb[j] += g[i * d + j];
                            }
                        }
                    });
                }
            }
            Op::PairRowMix(pairs) => {
                let x = val(0);
                let c = x.cols();
                if want(0) {
                    Self::accumulate(grads, ins[0], x.numel(), |gx| {
                        // Untouched rows pass gradients through unchanged.
                        let mut mixed = vec![false; x.rows()];
                        for &(i, j) in pairs.iter() {
                            mixed[i] = true;
                            mixed[j] = true;
                        }
                        for r in 0..x.rows() {
                            if !mixed[r] {
                                for col in 0..c {
                                    gx[r * c + col] += g[r * c + col];
                                }
                            }
                        }
                        let coeff = &self.nodes[ins[1]].value;
                        for (q, &(i, j)) in pairs.iter().enumerate() {
                            let a = coeff.data()[q];
                            for col in 0..c {
                                let gi = g[i * c + col];
                                let gj = g[j * c + col];
                                gx[i * c + col] += a * gi + (1.0 - a) * gj;
                                gx[j * c + col] += (1.0 - a) * gi + a * gj;
                            }
                        }
                    });
                }
                if want(1) {
                    Self::accumulate(grads, ins[1], pairs.len(), |gc| {
                        for (q, &(i, j)) in pairs.iter().enumerate() {
                            let mut s = 0.0;
                            for col in 0..c {
                                let diff = x.data()[i * c + col] - x.data()[j * c + col];
                                s += (g[i * c + col] - g[j * c + col]) * diff;
                            }
                            gc[q] += s;
                        }
                    });
                }
            }
            Op::PairwiseSqdist => {
                let (a, b) = (val(0), val(1));
                let (n, m, d) = (a.rows(), b.rows(), a.cols());
                if want(0) {
                    Self::accumulate(grads, ins[0], n * d, |ga| {
                        for i in 0..n {
                            for j in 0..m {
                                let gv = g[i * m + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for k in 0..d {
                                    ga[i * d + k] +=
                                        2.0 * gv * (a.data()[i * d + k] - b.data()[j * d + k]);
                                }
                            }
                        }
                    });
                }
                if want(1) {
                    Self::accumulate(grads, ins[1], m * d, |gb| {
                        for i in 0..n {
                            for j in 0..m {
                                let gv = g[i * m + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for k in 0..d {
                                    gb[j * d + k] +=
                                        2.0 * gv * (b.data()[j * d + k] - a.data()[i * d + k]);
                                }
                            }
                        }
                    });
                }
            }
        }
    }
}
