//! Minimal reverse-mode automatic differentiation on a linear tape.
//!
//! The solver's losses are compositions of a fixed vocabulary of dense ops
//! (add, scale, matmul, matvec, tanh, elementwise product, dot, sum, trace,
//! concatenate, plus a few batched helpers for row broadcasting and for
//! blocks of per-particle `d x d` matrices stored flat as `[n*d, d]`).
//! Each operation appends a node holding its forward value; `backward` seeds
//! a scalar loss with gradient one and sweeps the tape in reverse, so every
//! node is visited exactly once and the evaluation order is deterministic.
//!
//! Values are plain `f64` tensors; there is no implicit broadcasting beyond
//! the explicit `*_row_vec` / `scale_rows` / `add_scalar` ops.

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { trainable: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, mul: f64 },
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Recip(usize),
    Abs(usize),
    MaxElem(usize, usize),
    MatMul(usize, usize),
    MatVec(usize, usize),
    Transpose(usize),
    Dot(usize, usize),
    Sum(usize),
    RowSum(usize),
    Trace(usize),
    Concat0(Vec<usize>),
    ColumnGet { m: usize, col: usize },
    ColumnStack(Vec<usize>),
    ScaleRows { m: usize, v: usize },
    AddRowVec { m: usize, v: usize },
    MulRowVec { m: usize, v: usize },
    AddScalar { m: usize, s: usize },
    RepeatRows { m: usize, times: usize },
    BlockTranspose { m: usize, block: usize },
    BlockTrace { m: usize, block: usize },
    WeightedOuter { a: usize, left: usize, right: usize },
    SymFromUpper { v: usize, d: usize },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Reverse-mode tape. Build a graph with the op methods, then call
/// [`Tape::backward`] on a scalar node; the tape is consumed by the backward
/// sweep, so read any diagnostic forward values first.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the loss with respect to leaf nodes (see [`Tape::backward`]).
/// Leaves that do not influence the loss report a zero gradient.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    shapes: Vec<Option<Vec<usize>>>,
}

impl Gradients {
    /// Gradient tensor for a leaf `Var`. Zero-filled if the leaf never
    /// reached the loss; `None` if `v` is not a leaf node.
    pub fn for_var(&self, v: Var) -> Option<Tensor> {
        let shape = self.shapes.get(v.0)?.as_ref()?;
        match &self.by_node[v.0] {
            Some(g) => Some(g.clone()),
            None => Some(Tensor::zeros(shape)),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input (parameters, particle positions under test, ...).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf { trainable: true }, t)
    }

    /// Non-differentiable input (data, fixed drift values, ...).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf { trainable: false }, t)
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::shape(op_name, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        Ok(self.push(Op::Add(a.0, b.0), Tensor::new(shape, data)?))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        Ok(self.push(Op::Sub(a.0, b.0), Tensor::new(shape, data)?))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        Ok(self.push(Op::Mul(a.0, b.0), Tensor::new(shape, data)?))
    }

    fn unary_map(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Var {
        let value = Tensor::new(
            self.nodes[x.0].value.shape().to_vec(),
            self.nodes[x.0].value.data().iter().map(|&v| f(v)).collect(),
        )
        .expect("unary op preserves shape");
        self.push(op, value)
    }

    /// Elementwise `mul * x + add` with compile-time constants.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        self.unary_map(Op::Affine { x: x.0, mul }, x, |v| mul * v + add)
    }

    /// Elementwise scaling by a constant.
    pub fn scale(&mut self, x: Var, mul: f64) -> Var {
        self.affine(x, mul, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary_map(Op::Tanh(x.0), x, f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary_map(Op::Exp(x.0), x, f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary_map(Op::Log(x.0), x, f64::ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary_map(Op::Sqrt(x.0), x, f64::sqrt)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary_map(Op::Recip(x.0), x, f64::recip)
    }

    /// Elementwise absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary_map(Op::Abs(x.0), x, f64::abs)
    }

    /// Elementwise maximum; ties route their gradient to the first input.
    pub fn max_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("max_elem", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x.max(*y))
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        Ok(self.push(Op::MaxElem(a.0, b.0), Tensor::new(shape, data)?))
    }

    /// Matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        matmul_acc(
            out.data_mut(),
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        Ok(self.push(Op::MatMul(a.0, b.0), out))
    }

    /// Matrix-vector product `[m, n] x [n] -> [m]`.
    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.nodes[a.0].value.shape(), self.nodes[x.0].value.shape());
        if sa.len() != 2 || sx.len() != 1 || sa[1] != sx[0] {
            return Err(Error::shape("matvec", format!("{:?} x {:?}", sa, sx)));
        }
        let (m, n) = (sa[0], sa[1]);
        let av = self.nodes[a.0].value.data();
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            out[i] = row.iter().zip(xv).map(|(p, q)| p * q).sum();
        }
        Ok(self.push(Op::MatVec(a.0, x.0), Tensor::vector(out)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.transposed()?;
        Ok(self.push(Op::Transpose(a.0), value))
    }

    /// Full inner product of two same-shape tensors; returns a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("dot", a, b)?;
        let s: f64 = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Op::Dot(a.0, b.0), Tensor::scalar(s)))
    }

    /// Sum of all elements; returns a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::Sum(a.0), Tensor::scalar(s))
    }

    /// Mean of all elements; returns a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel().max(1);
        let s = self.sum(a);
        self.affine(s, 1.0 / n as f64, 0.0)
    }

    /// Row sums of a matrix: `[m, n] -> [m]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let sa = self.nodes[a.0].value.shape();
        if sa.len() != 2 {
            return Err(Error::shape("row_sum", format!("expected rank 2, got {:?}", sa)));
        }
        let (m, n) = (sa[0], sa[1]);
        let av = self.nodes[a.0].value.data();
        let out: Vec<f64> = (0..m).map(|i| av[i * n..(i + 1) * n].iter().sum()).collect();
        Ok(self.push(Op::RowSum(a.0), Tensor::vector(out)))
    }

    /// Trace of a square matrix; returns a scalar.
    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let sa = self.nodes[a.0].value.shape();
        if sa.len() != 2 || sa[0] != sa[1] {
            return Err(Error::shape("trace", format!("expected square, got {:?}", sa)));
        }
        let d = sa[0];
        let av = self.nodes[a.0].value.data();
        let s: f64 = (0..d).map(|i| av[i * d + i]).sum();
        Ok(self.push(Op::Trace(a.0), Tensor::scalar(s)))
    }

    /// Concatenates vectors end-to-end, or stacks matrices with equal column
    /// counts along axis 0.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat0", "no inputs".to_string()));
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        let rank = first.len();
        if rank == 0 || rank > 2 {
            return Err(Error::shape("concat0", format!("unsupported rank {:?}", first)));
        }
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != rank || (rank == 2 && s[1] != first[1]) {
                return Err(Error::shape(
                    "concat0",
                    format!("incompatible part {:?} with leading {:?}", s, first),
                ));
            }
            rows += s[0];
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let shape = if rank == 1 { vec![rows] } else { vec![rows, first[1]] };
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Op::Concat0(ids), Tensor::new(shape, data)?))
    }

    /// Extracts column `col` of a matrix as a vector.
    pub fn column(&mut self, m: Var, col: usize) -> Result<Var> {
        let s = self.nodes[m.0].value.shape();
        if s.len() != 2 || col >= s[1] {
            return Err(Error::shape("column", format!("column {} of {:?}", col, s)));
        }
        let (rows, cols) = (s[0], s[1]);
        let mv = self.nodes[m.0].value.data();
        let out: Vec<f64> = (0..rows).map(|i| mv[i * cols + col]).collect();
        Ok(self.push(Op::ColumnGet { m: m.0, col }, Tensor::vector(out)))
    }

    /// Stacks equal-length vectors as the columns of a matrix.
    pub fn column_stack(&mut self, cols: &[Var]) -> Result<Var> {
        if cols.is_empty() {
            return Err(Error::shape("column_stack", "no inputs".to_string()));
        }
        let n = self.nodes[cols[0].0].value.shape().to_vec();
        if n.len() != 1 {
            return Err(Error::shape("column_stack", format!("expected vectors, got {:?}", n)));
        }
        let rows = n[0];
        for c in cols {
            if self.nodes[c.0].value.shape() != [rows] {
                return Err(Error::shape(
                    "column_stack",
                    format!("length mismatch: {:?} vs {}", self.nodes[c.0].value.shape(), rows),
                ));
            }
        }
        let width = cols.len();
        let mut data = vec![0.0; rows * width];
        for (j, c) in cols.iter().enumerate() {
            let cv = self.nodes[c.0].value.data();
            for i in 0..rows {
                data[i * width + j] = cv[i];
            }
        }
        let ids = cols.iter().map(|c| c.0).collect();
        Ok(self.push(Op::ColumnStack(ids), Tensor::new(vec![rows, width], data)?))
    }

    /// Scales row `i` of `m` by `v[i]`: `[n, d] x [n] -> [n, d]`.
    pub fn scale_rows(&mut self, m: Var, v: Var) -> Result<Var> {
        let (sm, sv) = (self.nodes[m.0].value.shape(), self.nodes[v.0].value.shape());
        if sm.len() != 2 || sv.len() != 1 || sm[0] != sv[0] {
            return Err(Error::shape("scale_rows", format!("{:?} vs {:?}", sm, sv)));
        }
        let (rows, cols) = (sm[0], sm[1]);
        let mv = self.nodes[m.0].value.data();
        let vv = self.nodes[v.0].value.data();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] = mv[i * cols + j] * vv[i];
            }
        }
        Ok(self.push(Op::ScaleRows { m: m.0, v: v.0 }, Tensor::new(vec![rows, cols], data)?))
    }

    fn row_vec_check(&self, op: &'static str, m: Var, v: Var) -> Result<(usize, usize)> {
        let (sm, sv) = (self.nodes[m.0].value.shape(), self.nodes[v.0].value.shape());
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::shape(op, format!("{:?} vs {:?}", sm, sv)));
        }
        Ok((sm[0], sm[1]))
    }

    /// Adds a vector to every row: `[n, k] + [k] -> [n, k]`.
    pub fn add_row_vec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.row_vec_check("add_row_vec", m, v)?;
        let mv = self.nodes[m.0].value.data();
        let vv = self.nodes[v.0].value.data();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] = mv[i * cols + j] + vv[j];
            }
        }
        Ok(self.push(Op::AddRowVec { m: m.0, v: v.0 }, Tensor::new(vec![rows, cols], data)?))
    }

    /// Multiplies every row elementwise by a vector: `[n, k] . [k] -> [n, k]`.
    pub fn mul_row_vec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.row_vec_check("mul_row_vec", m, v)?;
        let mv = self.nodes[m.0].value.data();
        let vv = self.nodes[v.0].value.data();
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] = mv[i * cols + j] * vv[j];
            }
        }
        Ok(self.push(Op::MulRowVec { m: m.0, v: v.0 }, Tensor::new(vec![rows, cols], data)?))
    }

    /// Adds a scalar node to every element of `m`.
    pub fn add_scalar(&mut self, m: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].value.numel() != 1 {
            return Err(Error::shape(
                "add_scalar",
                format!("scalar operand has shape {:?}", self.nodes[s.0].value.shape()),
            ));
        }
        let sv = self.nodes[s.0].value.data()[0];
        let shape = self.nodes[m.0].value.shape().to_vec();
        let data = self.nodes[m.0].value.data().iter().map(|x| x + sv).collect();
        Ok(self.push(Op::AddScalar { m: m.0, s: s.0 }, Tensor::new(shape, data)?))
    }

    /// Repeats each row `times` times consecutively: `[n, k] -> [n*times, k]`.
    /// Used to broadcast per-particle vectors over `d x d` block rows.
    pub fn repeat_rows(&mut self, m: Var, times: usize) -> Result<Var> {
        let sm = self.nodes[m.0].value.shape();
        if sm.len() != 2 || times == 0 {
            return Err(Error::shape("repeat_rows", format!("{:?} times {}", sm, times)));
        }
        let (rows, cols) = (sm[0], sm[1]);
        let mv = self.nodes[m.0].value.data();
        let mut data = Vec::with_capacity(rows * times * cols);
        for i in 0..rows {
            for _ in 0..times {
                data.extend_from_slice(&mv[i * cols..(i + 1) * cols]);
            }
        }
        Ok(self.push(
            Op::RepeatRows { m: m.0, times },
            Tensor::new(vec![rows * times, cols], data)?,
        ))
    }

    fn block_check(&self, op: &'static str, m: Var, block: usize) -> Result<usize> {
        let sm = self.nodes[m.0].value.shape();
        if sm.len() != 2 || sm[1] != block || block == 0 || sm[0] % block != 0 {
            return Err(Error::shape(op, format!("{:?} with block {}", sm, block)));
        }
        Ok(sm[0] / block)
    }

    /// Transposes each `block x block` sub-matrix of a `[n*block, block]` stack.
    pub fn block_transpose(&mut self, m: Var, block: usize) -> Result<Var> {
        let n = self.block_check("block_transpose", m, block)?;
        let mv = self.nodes[m.0].value.data();
        let mut data = vec![0.0; mv.len()];
        for b in 0..n {
            let base = b * block * block;
            for i in 0..block {
                for j in 0..block {
                    data[base + j * block + i] = mv[base + i * block + j];
                }
            }
        }
        Ok(self.push(
            Op::BlockTranspose { m: m.0, block },
            Tensor::new(vec![n * block, block], data)?,
        ))
    }

    /// Trace of each `block x block` sub-matrix: `[n*block, block] -> [n]`.
    pub fn block_trace(&mut self, m: Var, block: usize) -> Result<Var> {
        let n = self.block_check("block_trace", m, block)?;
        let mv = self.nodes[m.0].value.data();
        let out: Vec<f64> = (0..n)
            .map(|b| (0..block).map(|i| mv[b * block * block + i * block + i]).sum())
            .collect();
        Ok(self.push(Op::BlockTrace { m: m.0, block }, Tensor::vector(out)))
    }

    /// Per-particle weighted sum of outer products:
    /// `a: [n, k]`, `left: [k, d]`, `right: [k, d]` produce `[n*d, d]` whose
    /// block `b` is `left^T diag(a[b, :]) right`. This expresses Jacobians and
    /// Hessian contractions of the one-hidden-layer field in tape ops.
    pub fn weighted_outer(&mut self, a: Var, left: Var, right: Var) -> Result<Var> {
        let (sa, sl, sr) = (
            self.nodes[a.0].value.shape(),
            self.nodes[left.0].value.shape(),
            self.nodes[right.0].value.shape(),
        );
        if sa.len() != 2 || sl.len() != 2 || sr.len() != 2 || sl != sr || sa[1] != sl[0] {
            return Err(Error::shape(
                "weighted_outer",
                format!("a {:?}, left {:?}, right {:?}", sa, sl, sr),
            ));
        }
        let (n, k, d) = (sa[0], sa[1], sl[1]);
        let av = self.nodes[a.0].value.data();
        let lv = self.nodes[left.0].value.data();
        let rv = self.nodes[right.0].value.data();
        let mut data = vec![0.0; n * d * d];
        for b in 0..n {
            let out_block = &mut data[b * d * d..(b + 1) * d * d];
            for p in 0..k {
                let w = av[b * k + p];
                if w == 0.0 {
                    continue;
                }
                let lrow = &lv[p * d..(p + 1) * d];
                let rrow = &rv[p * d..(p + 1) * d];
                for i in 0..d {
                    let wl = w * lrow[i];
                    for j in 0..d {
                        out_block[i * d + j] += wl * rrow[j];
                    }
                }
            }
        }
        Ok(self.push(
            Op::WeightedOuter { a: a.0, left: left.0, right: right.0 },
            Tensor::new(vec![n * d, d], data)?,
        ))
    }

    /// Materializes a symmetric `d x d` matrix from its packed upper triangle
    /// (row-major order `(0,0), (0,1), ..., (1,1), ...`, length `d(d+1)/2`).
    pub fn sym_from_upper(&mut self, v: Var, d: usize) -> Result<Var> {
        let sv = self.nodes[v.0].value.shape();
        let packed = d * (d + 1) / 2;
        if sv.len() != 1 || sv[0] != packed {
            return Err(Error::shape(
                "sym_from_upper",
                format!("{:?} vs packed length {} for d = {}", sv, packed, d),
            ));
        }
        let vv = self.nodes[v.0].value.data();
        let mut data = vec![0.0; d * d];
        let mut idx = 0;
        for i in 0..d {
            for j in i..d {
                data[i * d + j] = vv[idx];
                data[j * d + i] = vv[idx];
                idx += 1;
            }
        }
        Ok(self.push(Op::SymFromUpper { v: v.0, d }, Tensor::new(vec![d, d], data)?))
    }

    /// Reverse sweep from a scalar loss node. Consumes the tape (forward
    /// values are released as soon as their backward step has run) and
    /// returns gradients for every leaf created with [`Tape::leaf`].
    pub fn backward(mut self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut shapes: Vec<Option<Vec<usize>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { trainable: true } = node.op {
                shapes[i] = Some(node.value.shape().to_vec());
            }
        }
        grads[loss.0] = Some(Tensor::new(
            self.nodes[loss.0].value.shape().to_vec(),
            vec![1.0],
        )?);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            // Reborrow pattern: take the op out to satisfy the borrow checker,
            // values are only read through immutable indexing.
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf { trainable } => {
                    if trainable {
                        grads[i] = Some(g);
                    }
                    continue;
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, a, &g, 1.0);
                    self.acc(&mut grads, b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, a, &g, 1.0);
                    self.acc(&mut grads, b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let ga = elementwise_product(&g, &self.nodes[b].value);
                    let gb = elementwise_product(&g, &self.nodes[a].value);
                    self.acc(&mut grads, a, &ga, 1.0);
                    self.acc(&mut grads, b, &gb, 1.0);
                }
                Op::Affine { x, mul } => {
                    self.acc(&mut grads, x, &g, mul);
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[i].value;
                    let gx = map2(&g, y, |gi, yi| gi * (1.0 - yi * yi));
                    self.acc(&mut grads, x, &gx, 1.0);
                }
                Op::Exp(x) => {
                    let gx = elementwise_product(&g, &self.nodes[i].value);
                    self.acc(&mut grads, x, &gx, 1.0);
                }
                Op::Log(x) => {
                    let gx = map2(&g, &self.nodes[x].value, |gi, xi| gi / xi);
                    self.acc(&mut grads, x, &gx, 1.0);
                }
                Op::Sqrt(x) => {
                    let gx = map2(&g, &self.nodes[i].value, |gi, yi| gi * 0.5 / yi);
                    self.acc(&mut grads, x, &gx, 1.0);
                }
                Op::Recip(x) => {
                    let gx = map2(&g, &self.nodes[i].value, |gi, yi| -gi * yi * yi);
                    self.acc(&mut grads, x, &gx, 1.0);
                }
                Op::Abs(x) => {
                    let gx = map2(&g, &self.nodes[x].value, |gi, xi| gi * sign0(xi));
                    self.acc(&mut grads, x, &gx, 1.0);
                }
                Op::MaxElem(a, b) => {
                    let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                    let ga = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(va.data().iter().zip(vb.data()))
                            .map(|(gi, (x, y))| if x >= y { *gi } else { 0.0 })
                            .collect(),
                    )?;
                    let gb = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(va.data().iter().zip(vb.data()))
                            .map(|(gi, (x, y))| if x >= y { 0.0 } else { *gi })
                            .collect(),
                    )?;
                    self.acc(&mut grads, a, &ga, 1.0);
                    self.acc(&mut grads, b, &gb, 1.0);
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let mut ga = Tensor::zeros(&[m, k]);
                    matmul_a_bt_acc(ga.data_mut(), g.data(), self.nodes[b].value.data(), m, n, k);
                    let mut gb = Tensor::zeros(&[k, n]);
                    matmul_at_b_acc(gb.data_mut(), self.nodes[a].value.data(), g.data(), m, k, n);
                    self.acc(&mut grads, a, &ga, 1.0);
                    self.acc(&mut grads, b, &gb, 1.0);
                }
                Op::MatVec(a, x) => {
                    let sa = self.nodes[a].value.shape();
                    let (m, n) = (sa[0], sa[1]);
                    let gv = g.data();
                    let xv = self.nodes[x].value.data();
                    let av = self.nodes[a].value.data();
                    let mut ga = Tensor::zeros(&[m, n]);
                    let mut gx = Tensor::zeros(&[n]);
                    for r in 0..m {
                        let gr = gv[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for c in 0..n {
                            ga.data_mut()[r * n + c] += gr * xv[c];
                            gx.data_mut()[c] += gr * av[r * n + c];
                        }
                    }
                    self.acc(&mut grads, a, &ga, 1.0);
                    self.acc(&mut grads, x, &gx, 1.0);
                }
                Op::Transpose(a) => {
                    let gt = g.transposed()?;
                    self.acc(&mut grads, a, &gt, 1.0);
                }
                Op::Dot(a, b) => {
                    let s = g.data()[0];
                    let ga = self.nodes[b].value.clone();
                    let gb = self.nodes[a].value.clone();
                    self.acc(&mut grads, a, &ga, s);
                    self.acc(&mut grads, b, &gb, s);
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    let shape = self.nodes[a].value.shape().to_vec();
                    let ones = Tensor::new(shape.clone(), vec![1.0; shape.iter().product()])?;
                    self.acc(&mut grads, a, &ones, s);
                }
                Op::RowSum(a) => {
                    let sa = self.nodes[a].value.shape();
                    let (m, n) = (sa[0], sa[1]);
                    let mut ga = Tensor::zeros(&[m, n]);
                    for r in 0..m {
                        let gr = g.data()[r];
                        for c in 0..n {
                            ga.data_mut()[r * n + c] = gr;
                        }
                    }
                    self.acc(&mut grads, a, &ga, 1.0);
                }
                Op::Trace(a) => {
                    let s = g.data()[0];
                    let d = self.nodes[a].value.shape()[0];
                    let mut ga = Tensor::zeros(&[d, d]);
                    for r in 0..d {
                        ga.data_mut()[r * d + r] = s;
                    }
                    self.acc(&mut grads, a, &ga, 1.0);
                }
                Op::Concat0(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let shape = self.nodes[p].value.shape().to_vec();
                        let len = shape.iter().product::<usize>();
                        let gp = Tensor::new(shape, g.data()[offset..offset + len].to_vec())?;
                        offset += len;
                        self.acc(&mut grads, p, &gp, 1.0);
                    }
                }
                Op::ColumnGet { m, col } => {
                    let sm = self.nodes[m].value.shape();
                    let (rows, cols) = (sm[0], sm[1]);
                    let mut gm = Tensor::zeros(&[rows, cols]);
                    for r in 0..rows {
                        gm.data_mut()[r * cols + col] = g.data()[r];
                    }
                    self.acc(&mut grads, m, &gm, 1.0);
                }
                Op::ColumnStack(cols_in) => {
                    let rows = g.shape()[0];
                    let width = g.shape()[1];
                    for (j, c) in cols_in.into_iter().enumerate() {
                        let gc = Tensor::vector(
                            (0..rows).map(|r| g.data()[r * width + j]).collect(),
                        );
                        self.acc(&mut grads, c, &gc, 1.0);
                    }
                }
                Op::ScaleRows { m, v } => {
                    let sm = self.nodes[m].value.shape();
                    let (rows, cols) = (sm[0], sm[1]);
                    let mv = self.nodes[m].value.data();
                    let vv = self.nodes[v].value.data();
                    let mut gm = Tensor::zeros(&[rows, cols]);
                    let mut gv = Tensor::zeros(&[rows]);
                    for r in 0..rows {
                        let mut acc_v = 0.0;
                        for c in 0..cols {
                            let gi = g.data()[r * cols + c];
                            gm.data_mut()[r * cols + c] = gi * vv[r];
                            acc_v += gi * mv[r * cols + c];
                        }
                        gv.data_mut()[r] = acc_v;
                    }
                    self.acc(&mut grads, m, &gm, 1.0);
                    self.acc(&mut grads, v, &gv, 1.0);
                }
                Op::AddRowVec { m, v } => {
                    let sm = self.nodes[m].value.shape();
                    let (rows, cols) = (sm[0], sm[1]);
                    let mut gv = Tensor::zeros(&[cols]);
                    for r in 0..rows {
                        for c in 0..cols {
                            gv.data_mut()[c] += g.data()[r * cols + c];
                        }
                    }
                    self.acc(&mut grads, m, &g, 1.0);
                    self.acc(&mut grads, v, &gv, 1.0);
                }
                Op::MulRowVec { m, v } => {
                    let sm = self.nodes[m].value.shape();
                    let (rows, cols) = (sm[0], sm[1]);
                    let mv = self.nodes[m].value.data();
                    let vv = self.nodes[v].value.data();
                    let mut gm = Tensor::zeros(&[rows, cols]);
                    let mut gv = Tensor::zeros(&[cols]);
                    for r in 0..rows {
                        for c in 0..cols {
                            let gi = g.data()[r * cols + c];
                            gm.data_mut()[r * cols + c] = gi * vv[c];
                            gv.data_mut()[c] += gi * mv[r * cols + c];
                        }
                    }
                    self.acc(&mut grads, m, &gm, 1.0);
                    self.acc(&mut grads, v, &gv, 1.0);
                }
                Op::AddScalar { m, s } => {
                    let total: f64 = g.data().iter().sum();
                    let shape = self.nodes[s].value.shape().to_vec();
                    let gs = Tensor::new(shape, vec![total])?;
                    self.acc(&mut grads, m, &g, 1.0);
                    self.acc(&mut grads, s, &gs, 1.0);
                }
                Op::RepeatRows { m, times } => {
                    let sm = self.nodes[m].value.shape();
                    let (rows, cols) = (sm[0], sm[1]);
                    let mut gm = Tensor::zeros(&[rows, cols]);
                    for r in 0..rows {
                        for rep in 0..times {
                            let src = (r * times + rep) * cols;
                            for c in 0..cols {
                                gm.data_mut()[r * cols + c] += g.data()[src + c];
                            }
                        }
                    }
                    self.acc(&mut grads, m, &gm, 1.0);
                }
                Op::BlockTranspose { m, block } => {
                    let n = g.shape()[0] / block;
                    let mut gm = Tensor::zeros(&[n * block, block]);
                    for b in 0..n {
                        let base = b * block * block;
                        for r in 0..block {
                            for c in 0..block {
                                gm.data_mut()[base + c * block + r] = g.data()[base + r * block + c];
                            }
                        }
                    }
                    self.acc(&mut grads, m, &gm, 1.0);
                }
                Op::BlockTrace { m, block } => {
                    let n = g.shape()[0];
                    let mut gm = Tensor::zeros(&[n * block, block]);
                    for b in 0..n {
                        let gb = g.data()[b];
                        for r in 0..block {
                            gm.data_mut()[b * block * block + r * block + r] = gb;
                        }
                    }
                    self.acc(&mut grads, m, &gm, 1.0);
                }
                Op::WeightedOuter { a, left, right } => {
                    let (sa, sl) = (self.nodes[a].value.shape(), self.nodes[left].value.shape());
                    let (n, k, d) = (sa[0], sa[1], sl[1]);
                    let av = self.nodes[a].value.data();
                    let lv = self.nodes[left].value.data();
                    let rv = self.nodes[right].value.data();
                    let mut ga = Tensor::zeros(&[n, k]);
                    let mut gl = Tensor::zeros(&[k, d]);
                    let mut gr = Tensor::zeros(&[k, d]);
                    for b in 0..n {
                        let gb = &g.data()[b * d * d..(b + 1) * d * d];
                        for p in 0..k {
                            let lrow = &lv[p * d..(p + 1) * d];
                            let rrow = &rv[p * d..(p + 1) * d];
                            let w = av[b * k + p];
                            let mut acc_a = 0.0;
                            for i in 0..d {
                                let grow = &gb[i * d..(i + 1) * d];
                                let li = lrow[i];
                                let mut dot_gr = 0.0;
                                for j in 0..d {
                                    dot_gr += grow[j] * rrow[j];
                                    gr.data_mut()[p * d + j] += w * li * grow[j];
                                }
                                acc_a += li * dot_gr;
                                gl.data_mut()[p * d + i] += w * dot_gr;
                            }
                            ga.data_mut()[b * k + p] = acc_a;
                        }
                    }
                    self.acc(&mut grads, a, &ga, 1.0);
                    self.acc(&mut grads, left, &gl, 1.0);
                    self.acc(&mut grads, right, &gr, 1.0);
                }
                Op::SymFromUpper { v, d } => {
                    let packed = d * (d + 1) / 2;
                    let mut gv = Tensor::zeros(&[packed]);
                    let mut idx = 0;
                    for r in 0..d {
                        for c in r..d {
                            gv.data_mut()[idx] = if r == c {
                                g.data()[r * d + c]
                            } else {
                                g.data()[r * d + c] + g.data()[c * d + r]
                            };
                            idx += 1;
                        }
                    }
                    self.acc(&mut grads, v, &gv, 1.0);
                }
            }
            // The forward value of node i is no longer needed; free it early
            // so long rollouts do not hold two copies of every activation.
            self.nodes[i].value = Tensor::scalar(0.0);
        }

        Ok(Gradients { by_node: grads, shapes })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], target: usize, g: &Tensor, alpha: f64) {
        match &mut grads[target] {
            Some(existing) => {
                existing.axpy(alpha, g).expect("gradient shapes agree by construction");
            }
            None => {
                let mut t = Tensor::zeros(self.nodes[target].value.shape());
                if t.numel() == g.numel() && t.shape() != g.shape() {
                    // Shapes can only disagree here if a node was freed early,
                    // which the reverse ordering prevents.
                    unreachable!("gradient shape mismatch against freed node");
                }
                t.axpy(alpha, g).expect("gradient shapes agree by construction");
                grads[target] = Some(t);
            }
        }
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn elementwise_product(a: &Tensor, b: &Tensor) -> Tensor {
    map2(a, b, |x, y| x * y)
}

fn map2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
    .expect("map2 preserves shape")
}
