//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! A [`Tape`] records every operation as a node whose parents precede it, so
//! the graph is acyclic by construction and the backward pass is a single
//! reverse sweep. Parameters are borrowed from a [`ParamStore`] rather than
//! copied onto the tape; their gradients are returned as [`Gradients`].
//!
//! Hinge subgradients (`relu` at 0, `clip_relu1` at 0 and 1) are 0.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ClipRelu1(Var),
    Log(Var),
    Exp(Var),
    PowI(Var, i32),
    LogSoftmax(Var),
    RowExtreme(Var, Vec<usize>),
    RowSum(Var),
    Sum(Var),
    Pick(Var, usize),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Row(Var, usize),
    HStack(Vec<Var>),
    Column(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
}

/// Element-wise operation codes accepted by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
    Log,
    Exp,
    ClipRelu1,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_vector(&mut self, data: Vec<f64>) -> Var {
        self.leaf(Tensor::vector(data))
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(tensor::sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(tensor::relu);
        self.push(out, Op::Relu(a))
    }

    pub fn clip_relu1(&mut self, a: Var) -> Var {
        let out = self.value(a).map(tensor::clip_relu1);
        self.push(out, Op::ClipRelu1(a))
    }

    /// Natural log; non-positive entries become `-inf`.
    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(tensor::log_or_neg_inf);
        self.push(out, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn powi(&mut self, a: Var, n: i32) -> Var {
        let out = self.value(a).map(|x| x.powi(n));
        self.push(out, Op::PowI(a, n))
    }

    pub fn elementwise(&mut self, op: ElementOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = matches!(op, ElementOp::Add | ElementOp::Sub | ElementOp::Mul);
        match (need_b, b) {
            (true, Some(b)) => match op {
                ElementOp::Add => self.add(a, b),
                ElementOp::Sub => self.sub(a, b),
                _ => self.mul(a, b),
            },
            (true, None) => Err(Error::Input(format!("{op:?} needs two operands"))),
            (false, Some(_)) => Err(Error::Input(format!("{op:?} takes one operand"))),
            (false, None) => Ok(match op {
                ElementOp::Sigmoid => self.sigmoid(a),
                ElementOp::Tanh => self.tanh(a),
                ElementOp::Relu => self.relu(a),
                ElementOp::Log => self.log(a),
                ElementOp::Exp => self.exp(a),
                ElementOp::ClipRelu1 => self.clip_relu1(a),
                _ => unreachable!(),
            }),
        }
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), tensor::log_softmax(t.data()))
            .expect("same length");
        self.push(out, Op::LogSoftmax(a))
    }

    /// Softmax as `exp(log_softmax(a))`.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ls = self.log_softmax(a);
        self.exp(ls)
    }

    fn row_extreme(&mut self, a: Var, want_max: bool) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || t.is_empty() {
            return Err(Error::dim(
                if want_max { "row_max" } else { "row_min" },
                t.shape(),
                &[],
            ));
        }
        let (rows, cols) = t.dims2();
        let mut values = Vec::with_capacity(rows);
        let mut arg = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = t.row(r);
            let mut best = 0;
            for c in 1..cols {
                let better = if want_max {
                    row[c] > row[best]
                } else {
                    row[c] < row[best]
                };
                if better {
                    best = c;
                }
            }
            values.push(row[best]);
            arg.push(best);
        }
        Ok(self.push(Tensor::vector(values), Op::RowExtreme(a, arg)))
    }

    /// Per-row maximum of a matrix; ties route the gradient to the lowest column.
    pub fn row_max(&mut self, a: Var) -> Result<Var> {
        self.row_extreme(a, true)
    }

    /// Per-row minimum of a matrix; ties route the gradient to the lowest column.
    pub fn row_min(&mut self, a: Var) -> Result<Var> {
        self.row_extreme(a, false)
    }

    /// Sums a matrix over its columns, giving one value per row.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, _) = t.dims2();
        let values = (0..rows).map(|r| t.row(r).iter().sum()).collect();
        self.push(Tensor::vector(values), Op::RowSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn pick(&mut self, a: Var, index: usize) -> Var {
        let v = self.value(a).data()[index];
        self.push(Tensor::scalar(v), Op::Pick(a, index))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let data = self.value(a).data()[start..start + len].to_vec();
        self.push(Tensor::vector(data), Op::Slice(a, start))
    }

    /// One row of a matrix as a vector (embedding lookup).
    pub fn row(&mut self, a: Var, index: usize) -> Var {
        let data = self.value(a).row(index).to_vec();
        self.push(Tensor::vector(data), Op::Row(a, index))
    }

    /// Stacks equal-length vectors as the columns of a matrix.
    pub fn hstack(&mut self, columns: &[Var]) -> Result<Var> {
        let cols: Vec<Vec<f64>> = columns
            .iter()
            .map(|&c| self.value(c).data().to_vec())
            .collect();
        let out = Tensor::from_columns(&cols)?;
        Ok(self.push(out, Op::HStack(columns.to_vec())))
    }

    pub fn column(&mut self, a: Var, index: usize) -> Var {
        let data = self.value(a).column(index);
        self.push(Tensor::vector(data), Op::Column(a, index))
    }

    /// Backpropagates from a scalar node, returning the parameter gradients.
    pub fn backward(&self, output: Var) -> Gradients {
        let (params, _) = self.backward_full(output);
        params
    }

    /// As [`Tape::backward`], also returning the adjoint of every node.
    pub fn backward_full(&self, output: Var) -> (Gradients, Vec<Option<Vec<f64>>>) {
        assert_eq!(self.value(output).len(), 1, "backward from non-scalar");
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(vec![1.0]);
        let mut params = Gradients::zeros_like(self.store);

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = self.value(Var(idx));
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    for (p, gv) in params.get_mut(*id).iter_mut().zip(&g) {
                        *p += gv;
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = ta.dims2();
                    let n = tb.cols();
                    let ga = grad_buf(&mut adj, *a, m * k);
                    tensor::gemm_nt_acc(ga, &g, tb.data(), m, k, n);
                    let gb = grad_buf(&mut adj, *b, k * n);
                    tensor::gemm_tn_acc(gb, ta.data(), &g, m, k, n);
                }
                Op::Transpose(a) => {
                    let (r, c) = self.value(*a).dims2();
                    let ga = grad_buf(&mut adj, *a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc(grad_buf(&mut adj, *a, g.len()), &g, |_, gv| gv);
                    acc(grad_buf(&mut adj, *b, g.len()), &g, |_, gv| gv);
                }
                Op::Sub(a, b) => {
                    acc(grad_buf(&mut adj, *a, g.len()), &g, |_, gv| gv);
                    acc(grad_buf(&mut adj, *b, g.len()), &g, |_, gv| -gv);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                    acc(grad_buf(&mut adj, *a, g.len()), &g, |i, gv| gv * tb[i]);
                    acc(grad_buf(&mut adj, *b, g.len()), &g, |i, gv| gv * ta[i]);
                }
                Op::Scale(a, f) => {
                    acc(grad_buf(&mut adj, *a, g.len()), &g, |_, gv| gv * f);
                }
                Op::Sigmoid(a) => {
                    let yd = y.data();
                    acc(grad_buf(&mut adj, *a, g.len()), &g, |i, gv| {
                        gv * yd[i] * (1.0 - yd[i])
                    });
                }
                Op::Tanh(a) => {
                    let yd = y.data();
                    acc(grad_buf(&mut adj, *a, g.len()), &g, |i, gv| {
                        gv * (1.0 - yd[i] * yd[i])
                    });
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    acc(grad_buf(&mut adj, *a, g.len()), &g, |i, gv| {
                        if x[i] > 0.0 {
                            gv
                        } else {
                            0.0
                        }
                    });
                }
                Op::ClipRelu1(a) => {
                    let x = self.value(*a).data();
                    acc(grad_buf(&mut adj, *a, g.len()), &g, |i, gv| {
                        if x[i] > 0.0 && x[i] < 1.0 {
                            gv
                        } else {
                            0.0
                        }
                    });
                }
                Op::Log(a) => {
                    let x = self.value(*a).data();
                    acc(grad_buf(&mut adj, *a, g.len()), &g, |i, gv| gv / x[i]);
                }
                Op::Exp(a) => {
                    let yd = y.data();
                    acc(grad_buf(&mut adj, *a, g.len()), &g, |i, gv| gv * yd[i]);
                }
                Op::PowI(a, n) => {
                    let x = self.value(*a).data();
                    let n = *n;
                    acc(grad_buf(&mut adj, *a, g.len()), &g, |i, gv| {
                        gv * n as f64 * x[i].powi(n - 1)
                    });
                }
                Op::LogSoftmax(a) => {
                    let yd = y.data();
                    let total: f64 = g.iter().sum();
                    acc(grad_buf(&mut adj, *a, g.len()), &g, |i, gv| {
                        gv - yd[i].exp() * total
                    });
                }
                Op::RowExtreme(a, arg) => {
                    let (r, c) = self.value(*a).dims2();
                    let ga = grad_buf(&mut adj, *a, r * c);
                    for (row, &col) in arg.iter().enumerate() {
                        ga[row * c + col] += g[row];
                    }
                }
                Op::RowSum(a) => {
                    let (r, c) = self.value(*a).dims2();
                    let ga = grad_buf(&mut adj, *a, r * c);
                    for row in 0..r {
                        for x in &mut ga[row * c..(row + 1) * c] {
                            *x += g[row];
                        }
                    }
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    for x in grad_buf(&mut adj, *a, n) {
                        *x += g[0];
                    }
                }
                Op::Pick(a, index) => {
                    let n = self.value(*a).len();
                    grad_buf(&mut adj, *a, n)[*index] += g[0];
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        let gp = grad_buf(&mut adj, p, n);
                        for (x, gv) in gp.iter_mut().zip(&g[offset..offset + n]) {
                            *x += gv;
                        }
                        offset += n;
                    }
                }
                Op::Slice(a, start) => {
                    let n = self.value(*a).len();
                    let ga = grad_buf(&mut adj, *a, n);
                    for (x, gv) in ga[*start..*start + g.len()].iter_mut().zip(&g) {
                        *x += gv;
                    }
                }
                Op::Row(a, index) => {
                    let t = self.value(*a);
                    let (n, c) = (t.len(), t.cols());
                    let ga = grad_buf(&mut adj, *a, n);
                    for (x, gv) in ga[*index * c..(*index + 1) * c].iter_mut().zip(&g) {
                        *x += gv;
                    }
                }
                Op::HStack(columns) => {
                    let cols = columns.len();
                    for (j, &col) in columns.iter().enumerate() {
                        let rows = self.value(col).len();
                        let gc = grad_buf(&mut adj, col, rows);
                        for (i, x) in gc.iter_mut().enumerate() {
                            *x += g[i * cols + j];
                        }
                    }
                }
                Op::Column(a, index) => {
                    let t = self.value(*a);
                    let (r, c) = t.dims2();
                    let ga = grad_buf(&mut adj, *a, r * c);
                    for i in 0..r {
                        ga[i * c + *index] += g[i];
                    }
                }
            }
            adj[idx] = Some(g);
        }
        (params, adj)
    }
}

fn grad_buf(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn acc(dst: &mut [f64], g: &[f64], f: impl Fn(usize, f64) -> f64) {
    for (i, (d, &gv)) in dst.iter_mut().zip(g).enumerate() {
        *d += f(i, gv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(tensors: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = tensors
            .iter()
            .map(|(n, t)| s.add(*n, t.clone()).unwrap())
            .collect();
        (s, ids)
    }

    #[test]
    fn elementwise_definitions() {
        let s = ParamStore::new();
        let mut t = Tape::new(&s);
        let x = t.constant_vector(vec![-0.5, 0.3, 2.0]);
        let y = t.elementwise(ElementOp::ClipRelu1, x, None).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.3, 1.0]);
        let z = t.constant_vector(vec![0.0]);
        let sg = t.elementwise(ElementOp::Sigmoid, z, None).unwrap();
        assert_eq!(t.value(sg).data(), &[0.5]);
        let r = t.constant_vector(vec![-3.0, 0.0, 3.0]);
        let rr = t.elementwise(ElementOp::Relu, r, None).unwrap();
        assert_eq!(t.value(rr).data(), &[0.0, 0.0, 3.0]);
        let lz = t.constant_vector(vec![0.0, -2.0]);
        let l = t.elementwise(ElementOp::Log, lz, None).unwrap();
        assert!(t.value(l).data().iter().all(|v| *v == f64::NEG_INFINITY));
    }

    #[test]
    fn elementwise_arity_and_shape_errors() {
        let s = ParamStore::new();
        let mut t = Tape::new(&s);
        let a = t.constant_vector(vec![1.0, 2.0]);
        let b = t.constant_vector(vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            t.elementwise(ElementOp::Add, a, Some(b)),
            Err(Error::Dimension { .. })
        ));
        assert!(t.elementwise(ElementOp::Mul, a, None).is_err());
        assert!(t.elementwise(ElementOp::Tanh, a, Some(a)).is_err());
    }

    #[test]
    fn row_extremes() {
        let s = ParamStore::new();
        let mut t = Tape::new(&s);
        let m = t.leaf(Tensor::matrix(2, 2, vec![1.0, -2.0, 0.0, 5.0]).unwrap());
        let mx = t.row_max(m).unwrap();
        let mn = t.row_min(m).unwrap();
        assert_eq!(t.value(mx).data(), &[1.0, 5.0]);
        assert_eq!(t.value(mn).data(), &[-2.0, 0.0]);

        let col = t.leaf(Tensor::matrix(3, 1, vec![4.0, -1.0, 2.0]).unwrap());
        let a = t.row_max(col).unwrap();
        let b = t.row_min(col).unwrap();
        assert_eq!(t.value(a), t.value(b));

        let empty = t.leaf(Tensor::zeros(&[0, 3]));
        assert!(t.row_max(empty).is_err());
    }

    #[test]
    fn row_extreme_ties_route_to_lowest_column() {
        let (s, ids) = store_with(&[("m", Tensor::matrix(1, 3, vec![2.0, 2.0, 1.0]).unwrap())]);
        let mut t = Tape::new(&s);
        let m = t.param(ids[0]);
        let mx = t.row_max(m).unwrap();
        let total = t.sum(mx);
        let g = t.backward(total);
        assert_eq!(g.get(ids[0]), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn square_has_derivative_six_at_three() {
        let (s, ids) = store_with(&[("x", Tensor::vector(vec![3.0]))]);
        let mut t = Tape::new(&s);
        let x = t.param(ids[0]);
        let sq = t.powi(x, 2);
        let y = t.sum(sq);
        assert_eq!(t.backward(y).get(ids[0]), &[6.0]);
    }

    #[test]
    fn hinge_subgradient_is_zero() {
        let (s, ids) = store_with(&[("x", Tensor::vector(vec![0.0, 1.0, 0.5]))]);
        let mut t = Tape::new(&s);
        let x = t.param(ids[0]);
        let r = t.relu(x);
        let c = t.clip_relu1(x);
        let both = t.add(r, c).unwrap();
        let y = t.sum(both);
        assert_eq!(t.backward(y).get(ids[0]), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn param_node_is_shared() {
        let (s, ids) = store_with(&[("x", Tensor::vector(vec![2.0]))]);
        let mut t = Tape::new(&s);
        let a = t.param(ids[0]);
        let b = t.param(ids[0]);
        assert_eq!(a, b);
        let p = t.mul(a, b).unwrap();
        let y = t.sum(p);
        assert_eq!(t.backward(y).get(ids[0]), &[4.0]);
    }
}
