use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;

use super::tensor::{gemm, Operand};
use super::{Activation, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Act(usize, Activation),
    ActDeriv(usize, Activation),
    Ln(usize),
    Recip(usize),
    SumCols(usize),
    SumAll(usize),
    ConcatCols(usize, usize),
    TileRows(usize, usize),
    UnstackRows(usize, usize),
}

impl Op {
    fn inputs(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf | Constant => [None, None],
            MatMul(a, b) | AddRow(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | ConcatCols(a, b) => {
                [Some(a), Some(b)]
            }
            Scale(a, _)
            | AddScalar(a)
            | Act(a, _)
            | ActDeriv(a, _)
            | Ln(a)
            | Recip(a)
            | SumCols(a)
            | SumAll(a)
            | TileRows(a, _)
            | UnstackRows(a, _) => [Some(a), None],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Dynamic reverse-mode tape. Single-threaded; build one per loss evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to every leaf on the tape.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_leaf: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.by_leaf.get(&leaf.0)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.by_leaf.iter().map(|(&id, g)| (Var(id), g))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Trainable leaf: gradients are reported for it by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Whether `v` depends on at least one leaf.
    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, op, tracked });
        Var(id)
    }

    /// Records `op` only if one of its inputs is tracked; otherwise the result is a constant.
    fn record(&self, value: Tensor, op: Op) -> Var {
        let tracked = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().flatten().any(|&i| nodes[i].tracked)
        };
        let op = if tracked { op } else { Op::Constant };
        self.push(value, op, tracked)
    }

    fn unary(&self, a: Var, f: impl FnOnce(&Tensor) -> Result<Tensor>, op: Op) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value)?
        };
        Ok(self.record(value, op))
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
        op: Op,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value, &nodes[b.0].value)?
        };
        Ok(self.record(value, op))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.matmul(y), Op::MatMul(a.0, b.0))
    }

    /// Adds the 1×n row `bias` to every row of `a`.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        self.binary(a, bias, |x, y| x.add_row(y), Op::AddRow(a.0, bias.0))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.add(y), Op::Add(a.0, b.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.sub(y), Op::Sub(a.0, b.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.mul(y), Op::Mul(a.0, b.0))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| Ok(x.scale(c)), Op::Scale(a.0, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| Ok(x.map(|v| v + c)), Op::AddScalar(a.0))
    }

    pub fn activation(&self, a: Var, kind: Activation) -> Result<Var> {
        self.unary(a, |x| Ok(x.map(|v| kind.apply(v))), Op::Act(a.0, kind))
    }

    /// Elementwise first derivative of the activation, itself differentiable.
    pub fn activation_derivative(&self, a: Var, kind: Activation) -> Result<Var> {
        self.unary(
            a,
            |x| Ok(x.map(|v| kind.derivative(v))),
            Op::ActDeriv(a.0, kind),
        )
    }

    pub fn ln(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(x.map(f64::ln)), Op::Ln(a.0))
    }

    pub fn recip(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(x.map(f64::recip)), Op::Recip(a.0))
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Row sums: m×n → m×1.
    pub fn sum_cols(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(x.sum_cols()), Op::SumCols(a.0))
    }

    /// Sum of every entry: m×n → 1×1.
    pub fn sum_all(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| Ok(Tensor::scalar(x.sum())), Op::SumAll(a.0))
    }

    /// Row-wise inner product: m×n, m×n → m×1.
    pub fn dot_rows(&self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum_cols(p)
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x.concat_cols(y), Op::ConcatCols(a.0, b.0))
    }

    /// Stacks `k` copies of `a` vertically: m×n → (k·m)×n.
    pub fn tile_rows(&self, a: Var, k: usize) -> Result<Var> {
        self.unary(
            a,
            |x| {
                let mut data = Vec::with_capacity(k * x.len());
                for _ in 0..k {
                    data.extend_from_slice(x.data());
                }
                Tensor::from_vec(k * x.rows(), x.cols(), data)
            },
            Op::TileRows(a.0, k),
        )
    }

    /// Turns a column of `k` stacked m-blocks into an m×k matrix:
    /// `out[r][j] = a[j·m + r]`.
    pub fn unstack_rows(&self, a: Var, k: usize) -> Result<Var> {
        self.unary(
            a,
            |x| {
                if x.cols() != 1 || k == 0 || x.rows() % k != 0 {
                    return Err(Error::shape("unstack_rows", x.shape(), (k, 1)));
                }
                let m = x.rows() / k;
                let mut out = Tensor::zeros(m, k);
                for j in 0..k {
                    for r in 0..m {
                        out.set(r, j, x.data()[j * m + r]);
                    }
                }
                Ok(out)
            },
            Op::UnstackRows(a.0, k),
        )
    }

    /// Reverse sweep from a scalar node. Every leaf on the tape receives a
    /// gradient, zero if it does not influence `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let Some(loss_node) = nodes.get(loss.0) else {
            return Err(Error::Contract(format!(
                "node {} is not on this tape",
                loss.0
            )));
        };
        if loss_node.value.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, node {} is {:?}",
                loss.0,
                loss_node.value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        if loss_node.tracked {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }

        let mut by_leaf = BTreeMap::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            propagate(&nodes, node, g, &mut grads, &mut by_leaf, id);
        }

        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                by_leaf
                    .entry(id)
                    .or_insert_with(|| Tensor::zeros(node.value.rows(), node.value.cols()));
            }
        }
        Ok(Gradients { by_leaf })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].tracked {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc
            .add_assign(&g)
            .expect("gradient shape mirrors node shape"),
        slot @ None => *slot = Some(g),
    }
}

/// Adds `a · b` into the gradient slot of `id`, allocating it if needed.
fn accumulate_product(
    grads: &mut [Option<Tensor>],
    nodes: &[Node],
    id: usize,
    a: Operand<'_>,
    b: Operand<'_>,
) {
    if !nodes[id].tracked {
        return;
    }
    let (rows, cols) = nodes[id].value.shape();
    match &mut grads[id] {
        Some(acc) => gemm(a, b, acc, true),
        slot @ None => {
            let mut out = Tensor::zeros(rows, cols);
            gemm(a, b, &mut out, false);
            *slot = Some(out);
        }
    }
}

fn propagate(
    nodes: &[Node],
    node: &Node,
    g: Tensor,
    grads: &mut [Option<Tensor>],
    by_leaf: &mut BTreeMap<usize, Tensor>,
    id: usize,
) {
    let val = |i: usize| &nodes[i].value;
    match node.op {
        Op::Leaf => {
            by_leaf.insert(id, g);
        }
        Op::Constant => {}
        Op::MatMul(a, b) => {
            accumulate_product(
                grads,
                nodes,
                a,
                Operand::plain(&g),
                Operand::transposed(val(b)),
            );
            accumulate_product(
                grads,
                nodes,
                b,
                Operand::transposed(val(a)),
                Operand::plain(&g),
            );
        }
        Op::AddRow(a, bias) => {
            accumulate(grads, nodes, bias, g.sum_rows());
            accumulate(grads, nodes, a, g);
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, b, g.clone());
            accumulate(grads, nodes, a, g);
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, b, g.scale(-1.0));
            accumulate(grads, nodes, a, g);
        }
        Op::Mul(a, b) => {
            let ga = g.mul(val(b)).expect("same shape");
            let gb = g.mul(val(a)).expect("same shape");
            accumulate(grads, nodes, a, ga);
            accumulate(grads, nodes, b, gb);
        }
        Op::Scale(a, c) => accumulate(grads, nodes, a, g.scale(c)),
        Op::AddScalar(a) => accumulate(grads, nodes, a, g),
        Op::Act(a, kind) => {
            let local = match kind {
                Activation::Tanh => node.value.map(|y| 1.0 - y * y),
                Activation::Sine => val(a).map(f64::cos),
            };
            accumulate(grads, nodes, a, g.mul(&local).expect("same shape"));
        }
        Op::ActDeriv(a, kind) => {
            let local = val(a).map(|v| kind.second_derivative(v));
            accumulate(grads, nodes, a, g.mul(&local).expect("same shape"));
        }
        Op::Ln(a) => {
            let ga = g.zip_map(val(a), "ln", |gv, x| gv / x).expect("same shape");
            accumulate(grads, nodes, a, ga);
        }
        Op::Recip(a) => {
            let ga = g
                .zip_map(&node.value, "recip", |gv, y| -gv * y * y)
                .expect("same shape");
            accumulate(grads, nodes, a, ga);
        }
        Op::SumCols(a) => {
            let (rows, cols) = val(a).shape();
            let mut ga = Tensor::zeros(rows, cols);
            for r in 0..rows {
                let gr = g.data()[r];
                ga.data_mut()[r * cols..(r + 1) * cols].fill(gr);
            }
            accumulate(grads, nodes, a, ga);
        }
        Op::SumAll(a) => {
            let (rows, cols) = val(a).shape();
            accumulate(grads, nodes, a, Tensor::filled(rows, cols, g.data()[0]));
        }
        Op::ConcatCols(a, b) => {
            let (rows, ca) = val(a).shape();
            let cb = val(b).cols();
            let mut ga = Vec::with_capacity(rows * ca);
            let mut gb = Vec::with_capacity(rows * cb);
            for r in 0..rows {
                let row = g.row(r);
                ga.extend_from_slice(&row[..ca]);
                gb.extend_from_slice(&row[ca..]);
            }
            accumulate(
                grads,
                nodes,
                b,
                Tensor::from_vec(rows, cb, gb).expect("split"),
            );
            accumulate(
                grads,
                nodes,
                a,
                Tensor::from_vec(rows, ca, ga).expect("split"),
            );
        }
        Op::TileRows(a, k) => {
            let (rows, cols) = val(a).shape();
            let block = rows * cols;
            let mut ga = Tensor::zeros(rows, cols);
            for j in 0..k {
                for (acc, v) in ga
                    .data_mut()
                    .iter_mut()
                    .zip(&g.data()[j * block..(j + 1) * block])
                {
                    *acc += v;
                }
            }
            accumulate(grads, nodes, a, ga);
        }
        Op::UnstackRows(a, k) => {
            let rows = val(a).rows();
            let m = rows / k;
            let mut ga = Tensor::zeros(rows, 1);
            for j in 0..k {
                for r in 0..m {
                    ga.data_mut()[j * m + r] = g.get(r, j);
                }
            }
            accumulate(grads, nodes, a, ga);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let loss = tape.mul(x, x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::filled(2, 2, 1.5));
        let c = tape.constant(Tensor::scalar(4.0));
        let loss = tape.scale(c, 2.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &Tensor::zeros(2, 2));
        assert!(!tape.is_tracked(loss));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(2, 1));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(w) + sum(w ⊙ w) → grad = 1 + 2w
        let tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let s1 = tape.sum_all(w).unwrap();
        let sq = tape.square(w).unwrap();
        let s2 = tape.sum_all(sq).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn unstack_layout() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(6, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let u = tape.unstack_rows(a, 2).unwrap();
        assert_eq!(tape.value(u).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(tape.unstack_rows(a, 4).is_err());
    }
}
