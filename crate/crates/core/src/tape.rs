//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`GradTape`] records every operation as a node in insertion order, so the
//! recording is already a topological order. [`GradTape::backward`] walks it in
//! reverse and visits each node once.
//!
//! Leaves are either parameters (gradients collected) or constants (gradients
//! dropped). Detaching a value is just re-entering it as a constant.

use crate::error::{Error, Result};
use crate::matrix::{softmax_cols, softmax_rows, Matrix};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    Mul(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    SumRows(Var),
    SumCols(Var),
    Column(Var, usize),
    SelectRows(Var, Vec<usize>),
    GradReverse(Var, f64),
    Clamp(Var, f64, f64),
    Log(Var),
    OneMinus(Var),
    WeightedSum(Var, Matrix),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needs one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `var`; an exact zero matrix when nothing reached it.
    pub fn get(&self, var: Var) -> Matrix {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v`'s value with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// `x · W + b` with `b` a `1 x n` row broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if bv.rows() != 1 || bv.cols() != wv.cols() {
            return Err(Error::Shape(format!(
                "bias {:?} does not match weight {:?}",
                bv.shape(),
                wv.shape()
            )));
        }
        let mut out = xv.matmul(wv)?;
        for i in 0..out.rows() {
            for (o, bj) in out.row_mut(i).iter_mut().zip(bv.as_slice()) {
                *o += bj;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Affine { x, w, b }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::SoftmaxRows(x), needs)
    }

    pub fn softmax_cols(&mut self, x: Var) -> Var {
        let out = softmax_cols(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::SoftmaxCols(x), needs)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, s), needs)
    }

    /// Sum over rows (`m x n -> 1 x n`).
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let out = self.value(x).sum_rows();
        let needs = self.needs(x);
        self.push(out, Op::SumRows(x), needs)
    }

    /// Sum over columns (`m x n -> m x 1`).
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let out = self.value(x).sum_cols();
        let needs = self.needs(x);
        self.push(out, Op::SumCols(x), needs)
    }

    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let xv = self.value(x);
        if j >= xv.cols() {
            return Err(Error::Shape(format!(
                "column {j} out of range for {:?}",
                xv.shape()
            )));
        }
        let out = Matrix::col_vector(&xv.column(j));
        let needs = self.needs(x);
        Ok(self.push(out, Op::Column(x, j), needs))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(Error::Shape(format!(
                "row {bad} out of range for {:?}",
                xv.shape()
            )));
        }
        let out = xv.select_rows(rows);
        let needs = self.needs(x);
        Ok(self.push(out, Op::SelectRows(x, rows.to_vec()), needs))
    }

    /// Identity forward; multiplies the upstream gradient by `-lambda` on the
    /// way back.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) {
            return Err(Error::Input(format!(
                "gradient reversal weight must be >= 0, got {lambda}"
            )));
        }
        let out = self.value(x).clone();
        let needs = self.needs(x);
        Ok(self.push(out, Op::GradReverse(x, lambda), needs))
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is cut outside the range.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let needs = self.needs(x);
        self.push(out, Op::Clamp(x, lo, hi), needs)
    }

    /// Natural log. Callers clamp first, so a non-positive or NaN input means
    /// the values upstream have already broken down.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if let Some(v) = xv.as_slice().iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::numeric("log", format!("non-positive input {v}")));
        }
        let out = xv.map(f64::ln);
        let needs = self.needs(x);
        Ok(self.push(out, Op::Log(x), needs))
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 - v);
        let needs = self.needs(x);
        self.push(out, Op::OneMinus(x), needs)
    }

    /// `Σ weights ⊙ x` as a `1 x 1` value; `weights` is a constant.
    pub fn weighted_sum(&mut self, x: Var, weights: Matrix) -> Result<Var> {
        self.value(x).expect_same_shape(&weights)?;
        let total: f64 = self
            .value(x)
            .as_slice()
            .iter()
            .zip(weights.as_slice())
            .map(|(a, w)| a * w)
            .sum();
        let needs = self.needs(x);
        Ok(self.push(Matrix::scalar(total), Op::WeightedSum(x, weights), needs))
    }

    /// Sum of a list of `1 x 1` values, each scaled by its weight.
    pub fn linear_combination(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let scaled = if w == 1.0 { v } else { self.scale(v, w) };
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        acc.ok_or_else(|| Error::Input("empty linear combination".into()))
    }

    /// Reverse pass from the `1 x 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shapes: Vec<_> = self.nodes.iter().map(|n| n.value.shape()).collect();
        if shapes[loss.0] != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                shapes[loss.0]
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            // Leaves keep their gradient; every other node hands it down.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (parent, contrib) in self.local_grads(node, &g)? {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn local_grads(&self, node: &Node, g: &Matrix) -> Result<Vec<(Var, Matrix)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Affine { x, w, b } => {
                let mut res = Vec::with_capacity(3);
                if self.needs(*x) {
                    res.push((*x, g.matmul(&val(*w).transpose())?));
                }
                if self.needs(*w) {
                    res.push((*w, val(*x).transpose().matmul(g)?));
                }
                if self.needs(*b) {
                    res.push((*b, g.sum_rows()));
                }
                res
            }
            Op::Relu(x) => {
                let gx = val(*x).zip_map(g, |xv, gv| if xv > 0.0 { gv } else { 0.0 })?;
                vec![(*x, gx)]
            }
            Op::SoftmaxRows(x) => vec![(*x, softmax_rows_backward(out, g))],
            Op::SoftmaxCols(x) => {
                let gx = softmax_rows_backward(&out.transpose(), &g.transpose()).transpose();
                vec![(*x, gx)]
            }
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |gv, bv| gv * bv)?),
                (*b, g.zip_map(val(*a), |gv, av| gv * av)?),
            ],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Scale(x, s) => vec![(*x, g.scale(*s))],
            Op::SumRows(x) => {
                let (m, n) = val(*x).shape();
                let mut gx = Matrix::zeros(m, n);
                for i in 0..m {
                    gx.row_mut(i).copy_from_slice(g.row(0));
                }
                vec![(*x, gx)]
            }
            Op::SumCols(x) => {
                let (m, n) = val(*x).shape();
                let mut gx = Matrix::zeros(m, n);
                for i in 0..m {
                    gx.row_mut(i).fill(g[(i, 0)]);
                }
                vec![(*x, gx)]
            }
            Op::Column(x, j) => {
                let (m, n) = val(*x).shape();
                let mut gx = Matrix::zeros(m, n);
                for i in 0..m {
                    gx[(i, *j)] = g[(i, 0)];
                }
                vec![(*x, gx)]
            }
            Op::SelectRows(x, rows) => {
                let (m, n) = val(*x).shape();
                let mut gx = Matrix::zeros(m, n);
                for (k, &r) in rows.iter().enumerate() {
                    for (dst, src) in gx.row_mut(r).iter_mut().zip(g.row(k)) {
                        *dst += src;
                    }
                }
                vec![(*x, gx)]
            }
            Op::GradReverse(x, lambda) => vec![(*x, g.scale(-lambda))],
            Op::Clamp(x, lo, hi) => {
                let gx = val(*x).zip_map(g, |xv, gv| {
                    if xv >= *lo && xv <= *hi {
                        gv
                    } else {
                        0.0
                    }
                })?;
                vec![(*x, gx)]
            }
            Op::Log(x) => vec![(*x, g.zip_map(val(*x), |gv, xv| gv / xv)?)],
            Op::OneMinus(x) => vec![(*x, g.scale(-1.0))],
            Op::WeightedSum(x, weights) => vec![(*x, weights.scale(g.item()))],
        })
    }
}

/// `dx = y ⊙ (g - rowsum(g ⊙ y))` for `y = softmax_rows(x)`.
fn softmax_rows_backward(y: &Matrix, g: &Matrix) -> Matrix {
    let mut gx = Matrix::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let (yr, gr) = (y.row(i), g.row(i));
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((dst, yv), gv) in gx.row_mut(i).iter_mut().zip(yr).zip(gr) {
            *dst = yv * (gv - dot);
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn affine_identity_and_bias() {
        let mut tape = GradTape::new();
        let x = tape.constant(Matrix::identity(2));
        let w = tape.param(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.param(Matrix::row_vector(&[0.0, 0.0]));
        let out = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(out).as_slice(), &[1.0, 2.0, 3.0, 4.0]);

        let x = tape.constant(m(&[&[1.0, 1.0]]));
        let w = tape.param(Matrix::identity(2));
        let b = tape.param(Matrix::row_vector(&[5.0, 5.0]));
        let out = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(out).as_slice(), &[6.0, 6.0]);
    }

    #[test]
    fn affine_shape_error() {
        let mut tape = GradTape::new();
        let x = tape.constant(Matrix::zeros(2, 3));
        let w = tape.param(Matrix::zeros(2, 2));
        let b = tape.param(Matrix::zeros(1, 2));
        assert!(matches!(tape.affine(x, w, b), Err(Error::Shape(_))));
        let w = tape.param(Matrix::zeros(3, 2));
        let b = tape.param(Matrix::zeros(1, 3));
        assert!(matches!(tape.affine(x, w, b), Err(Error::Shape(_))));
    }

    #[test]
    fn grad_reverse_negates_and_detaches() {
        for (lambda, expected) in [(1.0, [-1.0, 1.0]), (0.0, [0.0, 0.0])] {
            let mut tape = GradTape::new();
            let x = tape.param(m(&[&[1.0, 2.0]]));
            let r = tape.grad_reverse(x, lambda).unwrap();
            assert_eq!(tape.value(r).as_slice(), &[1.0, 2.0]);
            // upstream gradient [1, -1]
            let loss = tape.weighted_sum(r, m(&[&[1.0, -1.0]])).unwrap();
            let grads = tape.backward(loss).unwrap();
            let gx = grads.get(x);
            assert_eq!(gx.as_slice()[0], expected[0]);
            assert_eq!(gx.as_slice()[1], expected[1]);
        }
    }

    #[test]
    fn grad_reverse_rejects_negative_weight() {
        let mut tape = GradTape::new();
        let x = tape.param(Matrix::scalar(1.0));
        assert!(tape.grad_reverse(x, -0.5).is_err());
    }

    #[test]
    fn unused_params_get_exact_zero() {
        let mut tape = GradTape::new();
        let used = tape.param(Matrix::scalar(3.0));
        let unused = tape.param(Matrix::zeros(2, 2));
        let sq = tape.mul(used, used).unwrap();
        let loss = tape.scale(sq, 0.5);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(used).item(), 3.0);
        assert_eq!(grads.get(unused), Matrix::zeros(2, 2));
    }

    #[test]
    fn detached_values_stop_gradients() {
        let mut tape = GradTape::new();
        let x = tape.param(Matrix::scalar(2.0));
        let d = tape.detach(x);
        let prod = tape.mul(x, d).unwrap();
        let grads = tape.backward(prod).unwrap();
        assert_eq!(grads.get(x).item(), 2.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = GradTape::new();
        let x = tape.param(Matrix::zeros(2, 2));
        assert!(tape.backward(x).is_err());
    }
}
