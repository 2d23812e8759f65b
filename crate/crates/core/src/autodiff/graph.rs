//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so insertion order is a valid
//! topological order and the backward sweep is a single reverse pass.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[n×d] + [d]` row broadcast of a bias.
    AddRow(Var, Var),
    /// `[n×k] ⊙ [n×1]` column broadcast.
    MulCol(Var, Var),
    /// `[n×k] / [n×1]` column broadcast.
    DivCol(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Log { x: Var, floor: f64 },
    Softmax(Var),
    MaskedFill { x: Var, mask: Vec<bool> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    PickCols { x: Var, idx: Vec<usize> },
    ScatterCols { x: Var, targets: Vec<Option<usize>> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulCol(a, b)
            | DivCol(a, b) => vec![*a, *b],
            Transpose(x) | Affine(x, _) | Sigmoid(x) | Relu(x) | Softmax(x) | Sum(x) => vec![*x],
            Log { x, .. }
            | MaskedFill { x, .. }
            | SliceCols { x, .. }
            | SliceRows { x, .. }
            | Dropout { x, .. }
            | SumAxis { x, .. }
            | PickCols { x, .. }
            | ScatterCols { x, .. } => vec![*x],
            ConcatCols(xs) | ConcatRows(xs) => xs.clone(),
            Embedding { table, .. } => vec![*table],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// The computation graph. Rebuilt for every forward pass.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|i| self.nodes[i.0].requires_grad);
        if cfg!(debug_assertions) && !matches!(op, Op::MaskedFill { .. }) {
            debug_assert!(
                value.is_finite(),
                "non-finite output from {:?}",
                std::mem::discriminant(&op)
            );
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows() {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let out = matmul_raw(av, bv);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::shape("transpose", xv.shape(), &[]));
        }
        let out = transpose_raw(xv);
        Ok(self.push(out, Op::Transpose(x)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).unwrap()
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a bias of length `d` to every row of `x: [n×d]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.numel() != xv.cols() {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let d = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv.data()[i % d])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data).unwrap();
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    fn check_col(&self, op: &'static str, x: Var, c: Var) -> Result<(usize, usize)> {
        let (xv, cv) = (self.value(x), self.value(c));
        if xv.rank() != 2 || cv.numel() != xv.rows() || cv.cols() != 1 {
            return Err(Error::shape(op, xv.shape(), cv.shape()));
        }
        Ok(dims2(xv))
    }

    /// Scales row `i` of `x: [n×k]` by `c[i]` where `c: [n×1]`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (_, k) = self.check_col("mul_col", x, c)?;
        let (xv, cv) = (self.value(x), self.value(c));
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * cv.data()[i / k])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data).unwrap();
        Ok(self.push(out, Op::MulCol(x, c)))
    }

    /// Divides row `i` of `x: [n×k]` by `c[i]` where `c: [n×1]`.
    pub fn div_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (_, k) = self.check_col("div_col", x, c)?;
        let (xv, cv) = (self.value(x), self.value(c));
        if cv.data().contains(&0.0) {
            return Err(Error::Domain {
                op: "div_col",
                msg: "division by zero".into(),
            });
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v / cv.data()[i / k])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data).unwrap();
        Ok(self.push(out, Op::DivCol(x, c)))
    }

    /// `scale * x + shift`, elementwise with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.map(x, |v| scale * v + shift);
        self.push(out, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.map(x, |v| k * v);
        self.push(out, Op::Affine(x, k))
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| 1.0 - v);
        self.push(out, Op::Affine(x, -1.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// Natural log with inputs clamped below at `floor`. Clamped entries get
    /// zero gradient.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        let out = self.map(x, |v| v.max(floor).ln());
        self.push(out, Op::Log { x, floor })
    }

    /// Softmax over the last dimension, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = Vec::with_capacity(xv.numel());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::contract("softmax over a fully masked row"));
            }
            let start = data.len();
            let mut sum = 0.0;
            for &v in row {
                let e = (v - max).exp();
                sum += e;
                data.push(e);
            }
            for v in &mut data[start..start + c] {
                *v /= sum;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data).unwrap();
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Replaces entries where `mask` is true with `-inf`.
    pub fn mask_neg_inf(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(Error::shape("masked_fill", xv.shape(), &[mask.len()]));
        }
        let data = xv
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { f64::NEG_INFINITY } else { v })
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data).unwrap();
        Ok(self.push(
            out,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let n = self.value(*first).rows();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let xv = self.value(x);
            if xv.rank() != 2 || xv.rows() != n {
                return Err(Error::shape("concat_cols", self.value(*first).shape(), xv.shape()));
            }
            widths.push(xv.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(r));
            }
        }
        let out = Tensor::new(vec![n, total], data).unwrap();
        Ok(self.push(out, Op::ConcatCols(xs.to_vec())))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let xv = self.value(x);
            if xv.cols() != c {
                return Err(Error::shape("concat_rows", self.value(*first).shape(), xv.shape()));
            }
            rows += xv.rows();
            data.extend_from_slice(xv.data());
        }
        let out = Tensor::new(vec![rows, c], data).unwrap();
        Ok(self.push(out, Op::ConcatRows(xs.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || len == 0 || start + len > xv.cols() {
            return Err(Error::shape("slice_cols", xv.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![xv.rows(), len], data).unwrap();
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    /// Gathers rows of `table: [V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 || ids.is_empty() || ids.iter().any(|&i| i >= tv.rows()) {
            return Err(Error::shape("embedding", tv.shape(), &[ids.len()]));
        }
        let d = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data).unwrap();
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Layer normalisation over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut data = Vec::with_capacity(xv.numel());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                data.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data).unwrap();
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Multiplies by a precomputed inverted-dropout mask (entries `0` or
    /// `1/(1-p)`).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(Error::shape("dropout", xv.shape(), &[mask.len()]));
        }
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).unwrap();
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    /// Sum of all entries, as a shape-`[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Sum over `axis` of a rank-2 tensor, keeping the reduced dimension.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || axis > 1 {
            return Err(Error::shape("sum_axis", xv.shape(), &[axis]));
        }
        let (n, k) = dims2(xv);
        let out = if axis == 0 {
            let mut acc = vec![0.0; k];
            for r in 0..n {
                for (a, v) in acc.iter_mut().zip(xv.row(r)) {
                    *a += v;
                }
            }
            Tensor::new(vec![1, k], acc).unwrap()
        } else {
            let acc = (0..n).map(|r| xv.row(r).iter().sum()).collect();
            Tensor::new(vec![n, 1], acc).unwrap()
        };
        Ok(self.push(out, Op::SumAxis { x, axis }))
    }

    /// Mean over `axis` of a rank-2 tensor, keeping the reduced dimension.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || axis > 1 {
            return Err(Error::shape("mean_axis", xv.shape(), &[axis]));
        }
        let count = xv.shape()[axis] as f64;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / count))
    }

    /// Picks `x[i, idx[i]]` for every row, giving `[n×1]`.
    pub fn pick_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, k) = dims2(xv);
        if idx.len() != n || idx.iter().any(|&i| i >= k) {
            return Err(Error::shape("pick_cols", xv.shape(), &[idx.len()]));
        }
        let data = idx.iter().enumerate().map(|(r, &c)| xv.at(r, c)).collect();
        let out = Tensor::new(vec![n, 1], data).unwrap();
        Ok(self.push(
            out,
            Op::PickCols {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Scatter-adds column `j` of `x: [n×k]` into column `targets[j]` of an
    /// `[n×width]` result; `None` columns are dropped.
    pub fn scatter_cols(&mut self, x: Var, targets: &[Option<usize>], width: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, k) = dims2(xv);
        if targets.len() != k || targets.iter().flatten().any(|&t| t >= width) {
            return Err(Error::shape("scatter_cols", xv.shape(), &[targets.len(), width]));
        }
        let mut data = vec![0.0; n * width];
        for r in 0..n {
            for (j, t) in targets.iter().enumerate() {
                if let Some(t) = t {
                    data[r * width + t] += xv.at(r, j);
                }
            }
        }
        let out = Tensor::new(vec![n, width], data).unwrap();
        Ok(self.push(
            out,
            Op::ScatterCols {
                x,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward on non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let gt = Tensor::new(out.shape().to_vec(), g.to_vec()).unwrap();
                if self.nodes[a.0].requires_grad {
                    acc(*a, matmul_raw(&gt, &transpose_raw(bv)).into_data());
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, matmul_raw(&transpose_raw(av), &gt).into_data());
                }
            }
            Op::Transpose(x) => {
                let gt = Tensor::new(out.shape().to_vec(), g.to_vec()).unwrap();
                acc(*x, transpose_raw(&gt).into_data());
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::AddRow(x, b) => {
                acc(*x, g.to_vec());
                let d = out.cols();
                let mut gb = vec![0.0; d];
                for (i, v) in g.iter().enumerate() {
                    gb[i % d] += v;
                }
                acc(*b, gb);
            }
            Op::MulCol(x, c) => {
                let (xv, cv) = (val(*x), val(*c).data());
                let k = xv.cols();
                acc(*x, g.iter().enumerate().map(|(i, g)| g * cv[i / k]).collect());
                let mut gc = vec![0.0; cv.len()];
                for (i, (g, x)) in g.iter().zip(xv.data()).enumerate() {
                    gc[i / k] += g * x;
                }
                acc(*c, gc);
            }
            Op::DivCol(x, c) => {
                let (xv, cv) = (val(*x), val(*c).data());
                let k = xv.cols();
                acc(*x, g.iter().enumerate().map(|(i, g)| g / cv[i / k]).collect());
                let mut gc = vec![0.0; cv.len()];
                for (i, (g, x)) in g.iter().zip(xv.data()).enumerate() {
                    let c = cv[i / k];
                    gc[i / k] -= g * x / (c * c);
                }
                acc(*c, gc);
            }
            Op::Affine(x, k) => acc(*x, g.iter().map(|v| v * k).collect()),
            Op::Sigmoid(x) => acc(
                *x,
                g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect(),
            ),
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x).data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Log { x, floor } => acc(
                *x,
                g.iter()
                    .zip(val(*x).data())
                    .map(|(g, v)| if *v > *floor { g / v } else { 0.0 })
                    .collect(),
            ),
            Op::Softmax(x) => {
                let c = out.cols();
                let mut gx = Vec::with_capacity(g.len());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(y).map(|(g, y)| y * (g - dot)));
                }
                acc(*x, gx);
            }
            Op::MaskedFill { x, mask } => acc(
                *x,
                g.iter()
                    .zip(mask)
                    .map(|(g, m)| if *m { 0.0 } else { *g })
                    .collect(),
            ),
            Op::ConcatCols(xs) => {
                let total = out.cols();
                let mut offset = 0;
                for &x in xs {
                    let w = val(x).cols();
                    if self.nodes[x.0].requires_grad {
                        let mut gx = Vec::with_capacity(out.rows() * w);
                        for r in 0..out.rows() {
                            gx.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(x, gx);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = val(x).numel();
                    acc(x, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (w, c) = (out.cols(), xv.cols());
                let mut gx = vec![0.0; xv.numel()];
                for r in 0..out.rows() {
                    gx[r * c + start..r * c + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                acc(*x, gx);
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut gx = vec![0.0; xv.numel()];
                gx[start * c..start * c + g.len()].copy_from_slice(g);
                acc(*x, gx);
            }
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let d = tv.cols();
                let mut gt = vec![0.0; tv.numel()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[r * d + j];
                    }
                }
                acc(*table, gt);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain).data();
                let d = out.cols();
                let mut gx = Vec::with_capacity(g.len());
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..out.rows() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_gh = 0.0;
                    let mut sum_ghx = 0.0;
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                        gb[j] += gr[j];
                        let gh = gr[j] * gv[j];
                        sum_gh += gh;
                        sum_ghx += gh * hr[j];
                    }
                    let dn = d as f64;
                    for j in 0..d {
                        let gh = gr[j] * gv[j];
                        gx.push(inv_std[r] / dn * (dn * gh - sum_gh - hr[j] * sum_ghx));
                    }
                }
                acc(*x, gx);
                acc(*gain, gg);
                acc(*bias, gb);
            }
            Op::Dropout { x, mask } => {
                acc(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect())
            }
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).numel()]),
            Op::SumAxis { x, axis } => {
                let xv = val(*x);
                let (n, k) = dims2(xv);
                let gx = (0..n * k)
                    .map(|i| if *axis == 0 { g[i % k] } else { g[i / k] })
                    .collect();
                acc(*x, gx);
            }
            Op::PickCols { x, idx } => {
                let xv = val(*x);
                let k = xv.cols();
                let mut gx = vec![0.0; xv.numel()];
                for (r, &c) in idx.iter().enumerate() {
                    gx[r * k + c] += g[r];
                }
                acc(*x, gx);
            }
            Op::ScatterCols { x, targets } => {
                let xv = val(*x);
                let (n, k) = dims2(xv);
                let width = out.cols();
                let mut gx = vec![0.0; n * k];
                for r in 0..n {
                    for (j, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            gx[r * k + j] = g[r * width + t];
                        }
                    }
                }
                acc(*x, gx);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (p, q) = dims2(a);
    let r = b.cols();
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let orow = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = ad[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &bd[k * r..(k + 1) * r];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Tensor::new(vec![p, r], out).unwrap()
}

pub(crate) fn transpose_raw(a: &Tensor) -> Tensor {
    let (n, k) = dims2(a);
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            out[j * n + i] = a.data()[i * k + j];
        }
    }
    Tensor::new(vec![k, n], out).unwrap()
}
