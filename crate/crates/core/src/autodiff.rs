//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records matrix operations in evaluation order; `backward`
//! walks it in reverse and accumulates adjoints. Every value is a 2D array;
//! scalars are `1×1`.

use crate::torus::Mat3;
use ndarray::{s, Array2, Axis};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AdError {
    #[error("non-finite value encountered ({0})")]
    NonFinite(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Sparse row operator: output row `i` is `Σ w · x[j]` over `rows[i]`.
pub type RowMix = Vec<Vec<(usize, f64)>>;
/// Sparse 3-column operator: output row `i` is `Σ M · x[j]` over `rows[i]`.
pub type BlockMix = Vec<Vec<(usize, Mat3)>>;

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Array2<f64>>),
    Silu(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Rc<Vec<usize>>),
    MeanBlocks(Var, usize),
    MeanRows(Var),
    RowMix(Var, Rc<RowMix>),
    BlockMix(Var, Rc<BlockMix>),
    SumSquares(Var),
}

struct Node {
    value: Rc<Array2<f64>>,
    op: Op,
    grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, grad: bool) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            op,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input number `index`; `value` is shared, not copied.
    pub fn param(&mut self, index: usize, value: &Rc<Array2<f64>>) -> Var {
        self.nodes.push(Node {
            value: Rc::clone(value),
            op: Op::Param(index),
            grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let grad = self.g(a) || self.g(b);
        self.push(v, Op::MatMul(a, b), grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let grad = self.g(a) || self.g(b);
        self.push(v, Op::Add(a, b), grad)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let grad = self.g(a) || self.g(b);
        self.push(v, Op::Sub(a, b), grad)
    }

    /// Adds the `1×d` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + &self.value(b).row(0);
        let grad = self.g(a) || self.g(b);
        self.push(v, Op::AddRow(a, b), grad)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let grad = self.g(a);
        self.push(v, Op::Scale(a, c), grad)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let v = self.value(a) * &c;
        let grad = self.g(a);
        self.push(v, Op::MulConst(a, Rc::new(c)), grad)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x / (1.0 + (-x).exp()));
        let grad = self.g(a);
        self.push(v, Op::Silu(a), grad)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let grad = parts.iter().any(|p| self.g(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), grad)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let v = self.value(a).select(Axis(0), &idx);
        let grad = self.g(a);
        self.push(v, Op::GatherRows(a, idx), grad)
    }

    /// Mean over consecutive blocks of `block` rows.
    pub fn mean_blocks(&mut self, a: Var, block: usize) -> Var {
        let x = self.value(a);
        let n = x.nrows() / block;
        assert_eq!(n * block, x.nrows(), "mean_blocks: rows not divisible");
        let mut v = Array2::zeros((n, x.ncols()));
        for i in 0..n {
            let m = x.slice(s![i * block..(i + 1) * block, ..]).sum_axis(Axis(0)) / block as f64;
            v.row_mut(i).assign(&m);
        }
        let grad = self.g(a);
        self.push(v, Op::MeanBlocks(a, block), grad)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = (x.sum_axis(Axis(0)) / x.nrows() as f64).insert_axis(Axis(0));
        let grad = self.g(a);
        self.push(v, Op::MeanRows(a), grad)
    }

    pub fn row_mix(&mut self, a: Var, mix: Rc<RowMix>) -> Var {
        let x = self.value(a);
        let mut v = Array2::zeros((mix.len(), x.ncols()));
        for (i, terms) in mix.iter().enumerate() {
            let mut row = v.row_mut(i);
            for &(j, w) in terms {
                row.scaled_add(w, &x.row(j));
            }
        }
        let grad = self.g(a);
        self.push(v, Op::RowMix(a, mix), grad)
    }

    pub fn block_mix(&mut self, a: Var, mix: Rc<BlockMix>) -> Var {
        let x = self.value(a);
        assert_eq!(x.ncols(), 3, "block_mix needs 3 columns");
        let mut v = Array2::zeros((mix.len(), 3));
        for (i, terms) in mix.iter().enumerate() {
            for (j, m) in terms {
                for r in 0..3 {
                    v[[i, r]] += m[r][0] * x[[*j, 0]] + m[r][1] * x[[*j, 1]] + m[r][2] * x[[*j, 2]];
                }
            }
        }
        let grad = self.g(a);
        self.push(v, Op::BlockMix(a, mix), grad)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).iter().map(|x| x * x).sum();
        let grad = self.g(a);
        self.push(Array2::from_elem((1, 1), s), Op::SumSquares(a), grad)
    }

    /// Adjoints of `out` (a `1×1` value) with respect to every parameter
    /// index below `num_params`. Unused parameters get `None`.
    pub fn backward(&self, out: Var, num_params: usize) -> Vec<Option<Array2<f64>>> {
        let mut adj: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: Vec<Option<Array2<f64>>> = (0..num_params).map(|_| None).collect();
        adj[out.0] = Some(Array2::ones(self.value(out).dim()));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.grad {
                continue;
            }
            let gy = match adj[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => accumulate(&mut params[*p], gy),
                Op::MatMul(a, b) => {
                    if self.g(*a) {
                        let ga = gy.dot(&self.value(*b).t());
                        accumulate(&mut adj[a.0], ga);
                    }
                    if self.g(*b) {
                        let gb = self.value(*a).t().dot(&gy);
                        accumulate(&mut adj[b.0], gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.g(*a) {
                        accumulate(&mut adj[a.0], gy.clone());
                    }
                    if self.g(*b) {
                        accumulate(&mut adj[b.0], gy);
                    }
                }
                Op::Sub(a, b) => {
                    if self.g(*b) {
                        accumulate(&mut adj[b.0], -&gy);
                    }
                    if self.g(*a) {
                        accumulate(&mut adj[a.0], gy);
                    }
                }
                Op::AddRow(a, b) => {
                    if self.g(*b) {
                        accumulate(&mut adj[b.0], gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.g(*a) {
                        accumulate(&mut adj[a.0], gy);
                    }
                }
                Op::Scale(a, c) => accumulate(&mut adj[a.0], gy * *c),
                Op::MulConst(a, c) => accumulate(&mut adj[a.0], gy * &**c),
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let mut gx = gy;
                    ndarray::Zip::from(&mut gx).and(x).for_each(|g, &x| {
                        let sg = 1.0 / (1.0 + (-x).exp());
                        *g *= sg * (1.0 + x * (1.0 - sg));
                    });
                    accumulate(&mut adj[a.0], gx);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.g(*p) {
                            accumulate(&mut adj[p.0], gy.slice(s![.., col..col + w]).to_owned());
                        }
                        col += w;
                    }
                }
                Op::GatherRows(a, rows) => {
                    let mut gx = Array2::zeros(self.value(*a).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = gx.row_mut(r);
                        dst += &gy.row(i);
                    }
                    accumulate(&mut adj[a.0], gx);
                }
                Op::MeanBlocks(a, block) => {
                    let mut gx = Array2::zeros(self.value(*a).dim());
                    let w = 1.0 / *block as f64;
                    for i in 0..gy.nrows() {
                        for r in i * block..(i + 1) * block {
                            gx.row_mut(r).scaled_add(w, &gy.row(i));
                        }
                    }
                    accumulate(&mut adj[a.0], gx);
                }
                Op::MeanRows(a) => {
                    let (n, d) = self.value(*a).dim();
                    let row = gy.row(0).mapv(|x| x / n as f64);
                    let gx = Array2::from_shape_fn((n, d), |(_, c)| row[c]);
                    accumulate(&mut adj[a.0], gx);
                }
                Op::RowMix(a, mix) => {
                    let mut gx = Array2::zeros(self.value(*a).dim());
                    for (i, terms) in mix.iter().enumerate() {
                        for &(j, w) in terms {
                            gx.row_mut(j).scaled_add(w, &gy.row(i));
                        }
                    }
                    accumulate(&mut adj[a.0], gx);
                }
                Op::BlockMix(a, mix) => {
                    let mut gx = Array2::zeros(self.value(*a).dim());
                    for (i, terms) in mix.iter().enumerate() {
                        for (j, m) in terms {
                            for c in 0..3 {
                                gx[[*j, c]] += m[0][c] * gy[[i, 0]] + m[1][c] * gy[[i, 1]] + m[2][c] * gy[[i, 2]];
                            }
                        }
                    }
                    accumulate(&mut adj[a.0], gx);
                }
                Op::SumSquares(a) => {
                    let g = gy[[0, 0]];
                    accumulate(&mut adj[a.0], self.value(*a) * (2.0 * g));
                }
            }
        }
        params
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Evaluates `f` on a fresh tape and returns the scalar output with its
/// gradient for every entry of `params` (zeros where unused).
pub fn gradients<F>(params: &[Rc<Array2<f64>>], f: F) -> Result<(f64, Vec<Array2<f64>>), AdError>
where
    F: FnOnce(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
    let out = f(&mut tape, &vars);
    let value = tape.scalar(out);
    if !value.is_finite() {
        return Err(AdError::NonFinite("loss".into()));
    }
    let grads = tape.backward(out, params.len());
    let grads: Vec<Array2<f64>> = grads
        .into_iter()
        .zip(params)
        .map(|(g, p)| g.unwrap_or_else(|| Array2::zeros(p.dim())))
        .collect();
    if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(AdError::NonFinite("gradient".into()));
    }
    Ok((value, grads))
}
