//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive in the order it is evaluated. Each
//! recorded node keeps its forward value plus whatever the backward rule
//! needs. [`Tape::backward`] walks the record in exact reverse order and
//! accumulates `d loss / d node` for every node that depends on a leaf
//! created with `requires_grad = true`.
//!
//! ```
//! use mpad::numcore::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]), true);
//! let loss = tape.sum(w);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap(), &Matrix::filled(2, 2, 1.0));
//! ```

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::matrix::{gemm, Matrix};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// One diagonal block of a block-diagonal left operand: rows
/// `offset..offset + matrix.rows()` of the right operand are multiplied by
/// `matrix`.
#[derive(Debug, Clone)]
pub struct Block {
    pub offset: usize,
    pub matrix: Matrix,
}

/// A contiguous run of rows, `start..start + len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    RowSoftmax(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    RowSlice {
        input: usize,
        start: usize,
    },
    Gather {
        input: usize,
        indices: Rc<[Option<usize>]>,
    },
    Transpose(usize),
    Sum(usize),
    Scale(usize, f64),
    MaskMul(usize, Matrix),
    BlockMatMul {
        input: usize,
        blocks: Rc<[Block]>,
    },
    SegmentSoftmax {
        input: usize,
        segments: Rc<[Segment]>,
    },
    SegmentWeightedSum {
        weights: usize,
        input: usize,
        segments: Rc<[Segment]>,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push_unchecked(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Matrix {
        assert_eq!(var.tape, self.id, "variable from a different tape");
        &self.nodes[var.index].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.value(var).shape()
    }

    fn idx(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::ForeignVariable);
        }
        Ok(var.index)
    }

    fn push_unchecked(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn push(&mut self, name: &'static str, value: Matrix, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        self.push("matmul", value, Op::MatMul(ia, ib), &[ia, ib])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", ia, ib)?;
        let value = self.nodes[ia]
            .value
            .zip_map(&self.nodes[ib].value, |x, y| x + y);
        self.push("add", value, Op::Add(ia, ib), &[ia, ib])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("sub", ia, ib)?;
        let value = self.nodes[ia]
            .value
            .zip_map(&self.nodes[ib].value, |x, y| x - y);
        self.push("sub", value, Op::Sub(ia, ib), &[ia, ib])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", ia, ib)?;
        let value = self.nodes[ia]
            .value
            .zip_map(&self.nodes[ib].value, |x, y| x * y);
        self.push("mul", value, Op::Mul(ia, ib), &[ia, ib])
    }

    fn check_row(&self, op: &'static str, a: usize, row: usize) -> Result<()> {
        let (sa, sr) = (self.nodes[a].value.shape(), self.nodes[row].value.shape());
        if sr != (1, sa.1) {
            return Err(Error::ShapeMismatch {
                op,
                left: sa,
                right: sr,
            });
        }
        Ok(())
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ir) = (self.idx(a)?, self.idx(row)?);
        self.check_row("add_row", ia, ir)?;
        let mut value = self.nodes[ia].value.clone();
        let r = self.nodes[ir].value.as_slice();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(r) {
                *v += b;
            }
        }
        self.push("add_row", value, Op::AddRow(ia, ir), &[ia, ir])
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ir) = (self.idx(a)?, self.idx(row)?);
        self.check_row("mul_row", ia, ir)?;
        let mut value = self.nodes[ia].value.clone();
        let r = self.nodes[ir].value.as_slice();
        for i in 0..value.rows() {
            for (v, s) in value.row_mut(i).iter_mut().zip(r) {
                *v *= s;
            }
        }
        self.push("mul_row", value, Op::MulRow(ia, ir), &[ia, ir])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(ia), &[ia])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.map(f64::tanh);
        self.push("tanh", value, Op::Tanh(ia), &[ia])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu(ia), &[ia])
    }

    /// Softmax applied independently to each row.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let mut value = self.nodes[ia].value.clone();
        for i in 0..value.rows() {
            softmax_in_place(value.row_mut(i));
        }
        self.push("row_softmax", value, Op::RowSoftmax(ia), &[ia])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&v| self.idx(v)).collect::<Result<_>>()?;
        let Some(&first) = idx.first() else {
            return Err(Error::InvalidArgument("concat_cols of nothing".into()));
        };
        let rows = self.nodes[first].value.rows();
        let mut cols = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.0 != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.nodes[first].value.shape(),
                    right: s,
                });
            }
            cols += s.1;
        }
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            let out = value.row_mut(r);
            for &i in &idx {
                let src = self.nodes[i].value.row(r);
                out[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        self.push("concat_cols", value, Op::ConcatCols(idx.clone()), &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&v| self.idx(v)).collect::<Result<_>>()?;
        let Some(&first) = idx.first() else {
            return Err(Error::InvalidArgument("concat_rows of nothing".into()));
        };
        let cols = self.nodes[first].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &idx {
            let v = &self.nodes[i].value;
            if v.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.nodes[first].value.shape(),
                    right: v.shape(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.as_slice());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        self.push("concat_rows", value, Op::ConcatRows(idx.clone()), &idx)
    }

    /// Rows `start..start + len` of `a`.
    pub fn row_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let src = &self.nodes[ia].value;
        if start + len > src.rows() {
            return Err(Error::InvalidArgument(format!(
                "row_slice {start}..{} out of bounds for {:?}",
                start + len,
                src.shape()
            )));
        }
        let cols = src.cols();
        let value = Matrix::from_vec(
            len,
            cols,
            src.as_slice()[start * cols..(start + len) * cols].to_vec(),
        )?;
        self.push("row_slice", value, Op::RowSlice { input: ia, start }, &[ia])
    }

    /// Gathers rows by index; `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, indices: Rc<[Option<usize>]>) -> Result<Var> {
        let ia = self.idx(a)?;
        let src = &self.nodes[ia].value;
        let mut value = Matrix::zeros(indices.len(), src.cols());
        for (dst, ix) in indices.iter().enumerate() {
            if let Some(ix) = *ix {
                if ix >= src.rows() {
                    return Err(Error::InvalidArgument(format!(
                        "gather index {ix} out of bounds for {:?}",
                        src.shape()
                    )));
                }
                value.row_mut(dst).copy_from_slice(src.row(ix));
            }
        }
        self.push(
            "gather_rows",
            value,
            Op::Gather { input: ia, indices },
            &[ia],
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.transpose();
        self.push("transpose", value, Op::Transpose(ia), &[ia])
    }

    /// Sum of all entries, as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let ia = self.idx(a).expect("variable from a different tape");
        let value = Matrix::scalar(self.nodes[ia].value.sum());
        let rg = self.nodes[ia].requires_grad;
        self.push_unchecked(value, Op::Sum(ia), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.map(|v| v * factor);
        self.push("scale", value, Op::Scale(ia, factor), &[ia])
    }

    /// Elementwise product with a constant mask (no gradient to the mask).
    pub fn mask_mul(&mut self, a: Var, mask: Matrix) -> Result<Var> {
        let ia = self.idx(a)?;
        if mask.shape() != self.nodes[ia].value.shape() {
            return Err(Error::ShapeMismatch {
                op: "mask_mul",
                left: self.nodes[ia].value.shape(),
                right: mask.shape(),
            });
        }
        let value = self.nodes[ia].value.zip_map(&mask, |x, m| x * m);
        self.push("mask_mul", value, Op::MaskMul(ia, mask), &[ia])
    }

    /// Left-multiplies `x` by a constant block-diagonal matrix. Rows of `x`
    /// not covered by any block map to zero rows.
    pub fn block_matmul(&mut self, blocks: Rc<[Block]>, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let src = &self.nodes[ix].value;
        let mut value = Matrix::zeros(src.rows(), src.cols());
        for b in blocks.iter() {
            let n = b.matrix.rows();
            if b.matrix.cols() != n || b.offset + n > src.rows() {
                return Err(Error::ShapeMismatch {
                    op: "block_matmul",
                    left: b.matrix.shape(),
                    right: src.shape(),
                });
            }
            let xs = rows_of(src, b.offset, n);
            let mut out = Matrix::zeros(n, src.cols());
            gemm(
                1.0,
                &b.matrix,
                false,
                &xs,
                false,
                &mut out,
                (n, n, src.cols()),
            );
            let cols = src.cols();
            value.as_mut_slice()[b.offset * cols..(b.offset + n) * cols]
                .copy_from_slice(out.as_slice());
        }
        self.push(
            "block_matmul",
            value,
            Op::BlockMatMul { input: ix, blocks },
            &[ix],
        )
    }

    /// Softmax over each segment of an `N x 1` column. Rows outside every
    /// segment are zero.
    pub fn segment_softmax(&mut self, a: Var, segments: Rc<[Segment]>) -> Result<Var> {
        let ia = self.idx(a)?;
        let src = &self.nodes[ia].value;
        check_segments("segment_softmax", src, &segments)?;
        let mut value = Matrix::zeros(src.rows(), src.cols());
        for s in segments.iter() {
            let r = s.start..s.start + s.len;
            value.as_mut_slice()[r.clone()].copy_from_slice(&src.as_slice()[r.clone()]);
            softmax_in_place(&mut value.as_mut_slice()[r]);
        }
        self.push(
            "segment_softmax",
            value,
            Op::SegmentSoftmax {
                input: ia,
                segments,
            },
            &[ia],
        )
    }

    /// For each segment `s`, `sum_{i in s} weights[i] * x[i, :]`; the result
    /// has one row per segment.
    pub fn segment_weighted_sum(
        &mut self,
        weights: Var,
        x: Var,
        segments: Rc<[Segment]>,
    ) -> Result<Var> {
        let (iw, ix) = (self.idx(weights)?, self.idx(x)?);
        let w = &self.nodes[iw].value;
        let xs = &self.nodes[ix].value;
        if w.cols() != 1 || w.rows() != xs.rows() {
            return Err(Error::ShapeMismatch {
                op: "segment_weighted_sum",
                left: w.shape(),
                right: xs.shape(),
            });
        }
        check_segments("segment_weighted_sum", w, &segments)?;
        let mut value = Matrix::zeros(segments.len(), xs.cols());
        for (k, s) in segments.iter().enumerate() {
            let out = value.row_mut(k);
            for i in s.start..s.start + s.len {
                let wi = w.as_slice()[i];
                for (o, v) in out.iter_mut().zip(xs.row(i)) {
                    *o += wi * v;
                }
            }
        }
        self.push(
            "segment_weighted_sum",
            value,
            Op::SegmentWeightedSum {
                weights: iw,
                input: ix,
                segments,
            },
            &[iw, ix],
        )
    }

    /// Training-mode batch normalization over rows: each column is
    /// standardized by the batch mean and biased variance, then scaled by
    /// `gamma` and shifted by `beta` (both `1 x c`).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        self.check_row("batch_norm", ix, ig)?;
        self.check_row("batch_norm", ix, ib)?;
        let src = &self.nodes[ix].value;
        let (b, c) = src.shape();
        if b == 0 {
            return Err(Error::InvalidArgument(
                "batch_norm over an empty batch".into(),
            ));
        }
        let mut mean = vec![0.0; c];
        for i in 0..b {
            for (m, v) in mean.iter_mut().zip(src.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        let mut var = vec![0.0; c];
        for i in 0..b {
            for ((s, v), m) in var.iter_mut().zip(src.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= b as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut normalized = src.clone();
        for i in 0..b {
            for (j, v) in normalized.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j];
            }
        }
        let g = self.nodes[ig].value.as_slice();
        let be = self.nodes[ib].value.as_slice();
        let mut value = normalized.clone();
        for i in 0..b {
            for (j, v) in value.row_mut(i).iter_mut().enumerate() {
                *v = *v * g[j] + be[j];
            }
        }
        let out = self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                input: ix,
                gamma: ig,
                beta: ib,
                normalized,
                inv_std,
            },
            &[ix, ig, ib],
        )?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Mean cross-entropy `-log softmax(logits[i])[labels[i]]` over rows.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let z = &self.nodes[il].value;
        if z.rows() != labels.len() || z.rows() == 0 {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: {} labels for logits of shape {:?}",
                labels.len(),
                z.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= z.cols()) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: label {bad} out of range for {} classes",
                z.cols()
            )));
        }
        let mut probs = z.clone();
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = z.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
            softmax_in_place(probs.row_mut(i));
        }
        let value = Matrix::scalar(total / labels.len() as f64);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
            &[il],
        )
    }

    /// Propagates gradients from a `1 x 1` loss back through the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        let shape = self.nodes[il].value.shape();
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; il + 1];
        grads[il] = Some(Matrix::scalar(1.0));
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn backward_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |i: usize| &self.nodes[i].value;
        let wants = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = val(a).shape();
                let n = val(b).cols();
                if wants(a) {
                    let mut da = Matrix::zeros(m, k);
                    gemm(1.0, g, false, val(b), true, &mut da, (m, n, k));
                    accumulate(grads, a, da);
                }
                if wants(b) {
                    let mut db = Matrix::zeros(k, n);
                    gemm(1.0, val(a), true, g, false, &mut db, (k, m, n));
                    accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, b, g.map(|v| -v));
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    accumulate(grads, a, g.zip_map(val(b), |x, y| x * y));
                }
                if wants(b) {
                    accumulate(grads, b, g.zip_map(val(a), |x, y| x * y));
                }
            }
            &Op::AddRow(a, r) => {
                if wants(a) {
                    accumulate(grads, a, g.clone());
                }
                if wants(r) {
                    accumulate(grads, r, column_sums(g));
                }
            }
            &Op::MulRow(a, r) => {
                if wants(a) {
                    let row = val(r).as_slice();
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        for (v, s) in da.row_mut(i).iter_mut().zip(row) {
                            *v *= s;
                        }
                    }
                    accumulate(grads, a, da);
                }
                if wants(r) {
                    accumulate(grads, r, column_sums(&g.zip_map(val(a), |x, y| x * y)));
                }
            }
            &Op::Sigmoid(a) => {
                if wants(a) {
                    accumulate(grads, a, g.zip_map(&node.value, |d, y| d * y * (1.0 - y)));
                }
            }
            &Op::Tanh(a) => {
                if wants(a) {
                    accumulate(grads, a, g.zip_map(&node.value, |d, y| d * (1.0 - y * y)));
                }
            }
            &Op::Relu(a) => {
                if wants(a) {
                    accumulate(
                        grads,
                        a,
                        g.zip_map(&node.value, |d, y| if y > 0.0 { d } else { 0.0 }),
                    );
                }
            }
            &Op::RowSoftmax(a) => {
                if wants(a) {
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        softmax_backward(y.row(i), g.row(i), da.row_mut(i));
                    }
                    accumulate(grads, a, da);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, cols) = val(p).shape();
                    if wants(p) {
                        let mut dp = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            dp.row_mut(r)
                                .copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        accumulate(grads, p, dp);
                    }
                    offset += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    if wants(p) {
                        accumulate(grads, p, rows_of(g, offset, rows));
                    }
                    offset += rows;
                }
            }
            &Op::RowSlice { input, start } => {
                if wants(input) {
                    let (rows, cols) = val(input).shape();
                    let mut d = Matrix::zeros(rows, cols);
                    d.as_mut_slice()[start * cols..start * cols + g.len()]
                        .copy_from_slice(g.as_slice());
                    accumulate(grads, input, d);
                }
            }
            Op::Gather { input, indices } => {
                let input = *input;
                if wants(input) {
                    let (rows, cols) = val(input).shape();
                    let mut d = Matrix::zeros(rows, cols);
                    for (src, ix) in indices.iter().enumerate() {
                        if let Some(ix) = *ix {
                            for (o, v) in d.row_mut(ix).iter_mut().zip(g.row(src)) {
                                *o += v;
                            }
                        }
                    }
                    accumulate(grads, input, d);
                }
            }
            &Op::Transpose(a) => {
                if wants(a) {
                    accumulate(grads, a, g.transpose());
                }
            }
            &Op::Sum(a) => {
                if wants(a) {
                    let (r, c) = val(a).shape();
                    accumulate(grads, a, Matrix::filled(r, c, g[(0, 0)]));
                }
            }
            &Op::Scale(a, f) => {
                if wants(a) {
                    accumulate(grads, a, g.map(|v| v * f));
                }
            }
            Op::MaskMul(a, mask) => {
                if wants(*a) {
                    accumulate(grads, *a, g.zip_map(mask, |x, m| x * m));
                }
            }
            Op::BlockMatMul { input, blocks } => {
                let input = *input;
                if wants(input) {
                    let cols = g.cols();
                    let mut d = Matrix::zeros(g.rows(), cols);
                    for b in blocks.iter() {
                        let n = b.matrix.rows();
                        let gs = rows_of(g, b.offset, n);
                        let mut out = Matrix::zeros(n, cols);
                        gemm(1.0, &b.matrix, true, &gs, false, &mut out, (n, n, cols));
                        d.as_mut_slice()[b.offset * cols..(b.offset + n) * cols]
                            .copy_from_slice(out.as_slice());
                    }
                    accumulate(grads, input, d);
                }
            }
            Op::SegmentSoftmax { input, segments } => {
                let input = *input;
                if wants(input) {
                    let y = node.value.as_slice();
                    let mut d = Matrix::zeros(node.value.rows(), 1);
                    for s in segments.iter() {
                        let r = s.start..s.start + s.len;
                        softmax_backward(
                            &y[r.clone()],
                            &g.as_slice()[r.clone()],
                            &mut d.as_mut_slice()[r],
                        );
                    }
                    accumulate(grads, input, d);
                }
            }
            Op::SegmentWeightedSum {
                weights,
                input,
                segments,
            } => {
                let (w, x) = (val(*weights), val(*input));
                if wants(*weights) {
                    let mut dw = Matrix::zeros(w.rows(), 1);
                    for (k, s) in segments.iter().enumerate() {
                        for i in s.start..s.start + s.len {
                            dw.as_mut_slice()[i] = dot(g.row(k), x.row(i));
                        }
                    }
                    accumulate(grads, *weights, dw);
                }
                if wants(*input) {
                    let mut dx = Matrix::zeros(x.rows(), x.cols());
                    for (k, s) in segments.iter().enumerate() {
                        for i in s.start..s.start + s.len {
                            let wi = w.as_slice()[i];
                            for (o, v) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                                *o = wi * v;
                            }
                        }
                    }
                    accumulate(grads, *input, dx);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (b, c) = normalized.shape();
                if wants(*gamma) {
                    accumulate(
                        grads,
                        *gamma,
                        column_sums(&g.zip_map(normalized, |x, y| x * y)),
                    );
                }
                if wants(*beta) {
                    accumulate(grads, *beta, column_sums(g));
                }
                if wants(*input) {
                    let gm = val(*gamma).as_slice();
                    let mut sum_d = vec![0.0; c];
                    let mut sum_dx = vec![0.0; c];
                    for i in 0..b {
                        for j in 0..c {
                            let d = g[(i, j)] * gm[j];
                            sum_d[j] += d;
                            sum_dx[j] += d * normalized[(i, j)];
                        }
                    }
                    let bf = b as f64;
                    let mut dx = Matrix::zeros(b, c);
                    for i in 0..b {
                        for j in 0..c {
                            let d = g[(i, j)] * gm[j];
                            dx[(i, j)] = inv_std[j] / bf
                                * (bf * d - sum_d[j] - normalized[(i, j)] * sum_dx[j]);
                        }
                    }
                    accumulate(grads, *input, dx);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if wants(*logits) {
                    let scale = g[(0, 0)] / labels.len() as f64;
                    let mut d = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        d[(i, l)] -= 1.0;
                    }
                    d.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
                    accumulate(grads, *logits, d);
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient with respect to `var`, or `None` if the loss does not depend
    /// on it.
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
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

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn softmax_backward(y: &[f64], g: &[f64], out: &mut [f64]) {
    let inner = dot(y, g);
    for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
        *o = yi * (gi - inner);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for i in 0..m.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}

fn rows_of(m: &Matrix, start: usize, len: usize) -> Matrix {
    let cols = m.cols();
    Matrix::from_vec(
        len,
        cols,
        m.as_slice()[start * cols..(start + len) * cols].to_vec(),
    )
    .expect("row range within bounds")
}

fn check_segments(op: &'static str, m: &Matrix, segments: &[Segment]) -> Result<()> {
    if m.cols() != 1 {
        return Err(Error::ShapeMismatch {
            op,
            left: m.shape(),
            right: (m.rows(), 1),
        });
    }
    for s in segments {
        if s.len == 0 || s.start + s.len > m.rows() {
            return Err(Error::InvalidArgument(format!(
                "{op}: segment {}..{} invalid for {} rows",
                s.start,
                s.start + s.len,
                m.rows()
            )));
        }
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Matrix>], index: usize, g: Matrix) {
    match &mut grads[index] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
