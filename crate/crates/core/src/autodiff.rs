//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] is an append-only list of primitive operations. Values are
//! computed eagerly as operations are recorded, so append order is a valid
//! topological order and the backward pass is a single reverse sweep.
//!
//! Two backward passes are provided:
//!
//! * [`Tape::grad`] accumulates plain adjoint tensors. This is what training
//!   uses.
//! * [`Tape::grad_taped`] records the backward sweep itself as new tape
//!   operations, returning variables that can be differentiated again. This
//!   gives exact higher-order derivatives (e.g. ∂²u/∂x∂y) with no special
//!   casing.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Op<T> {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    ScaleShift(usize, T, T),
    AddRow(usize, usize),
    SumRows(usize),
    Broadcast(usize, Vec<usize>),
    Reshape(usize, Vec<usize>),
    MatMul(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Square(usize),
    Sum(usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleShift(..) => "scale_shift",
            Op::AddRow(..) => "add_row",
            Op::SumRows(..) => "sum_rows",
            Op::Broadcast(..) => "broadcast",
            Op::Reshape(..) => "reshape",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Tanh(..) => "tanh",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
        }
    }

    fn parents(&self) -> (Option<usize>, Option<usize>) {
        match *self {
            Op::Leaf | Op::Constant => (None, None),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MatMul(a, b) => {
                (Some(a), Some(b))
            }
            Op::Scale(a, _)
            | Op::ScaleShift(a, _, _)
            | Op::SumRows(a)
            | Op::Broadcast(a, _)
            | Op::Reshape(a, _)
            | Op::Transpose(a)
            | Op::Tanh(a)
            | Op::Square(a)
            | Op::Sum(a) => (Some(a), None),
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Append-only record of tensor operations.
///
/// A tape is single-owner. Independent tapes can be driven from different
/// threads and their gradients summed afterwards.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
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

    /// Name of the primitive recorded at `index`.
    pub fn op_name(&self, index: usize) -> &'static str {
        self.nodes[index].op.name()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => {
                let (a, b) = op.parents();
                a.is_some_and(|i| self.nodes[i].needs_grad)
                    || b.is_some_and(|i| self.nodes[i].needs_grad)
            }
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var {
            index: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn record(&mut self, op: Op<T>) -> Result<Var> {
        let value = evaluate(&op, &self.nodes)?;
        Ok(self.push(op, value))
    }

    /// Differentiable input (parameters, or coordinates when input
    /// derivatives are wanted).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.index].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::Scale(a, c))
    }

    /// `c * a + d`, elementwise.
    pub fn scale_shift(&mut self, a: Var, c: T, d: T) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::ScaleShift(a, c, d))
    }

    /// Matrix plus a row vector broadcast over rows.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (m, row) = (self.check(m)?, self.check(row)?);
        self.record(Op::AddRow(m, row))
    }

    pub fn sum_rows(&mut self, m: Var) -> Result<Var> {
        let m = self.check(m)?;
        self.record(Op::SumRows(m))
    }

    /// Expands a one-element tensor to `shape`.
    pub fn broadcast(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        let s = self.check(s)?;
        self.record(Op::Broadcast(s, shape.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::Reshape(a, shape.to_vec()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.record(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::Transpose(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::Tanh(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let a = self.check(a)?;
        self.record(Op::Sum(a))
    }

    /// Mean of all elements, as a rank-0 value.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1);
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Node indices visited by a backward sweep from `output`, in visit
    /// order. Every node that depends on a differentiable leaf appears
    /// exactly once, in reverse append order.
    pub fn backward_order(&self, output: Var) -> Result<Vec<usize>> {
        let out = self.check(output)?;
        Ok((0..=out).rev().filter(|&i| self.nodes[i].needs_grad).collect())
    }

    /// Gradients of a scalar `output` with respect to each of `wrt`.
    ///
    /// Variables that do not influence the output get a zero gradient.
    pub fn grad(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor<T>>> {
        let out = self.check(output)?;
        let out_value = &self.nodes[out].value;
        if !out_value.is_scalar() {
            return Err(Error::NonScalarOutput(out_value.shape().to_vec()));
        }
        let mut targets: HashMap<usize, Vec<usize>> = HashMap::new();
        for (slot, &w) in wrt.iter().enumerate() {
            targets.entry(self.check(w)?).or_default().push(slot);
        }
        let mut result: Vec<Option<Tensor<T>>> = vec![None; wrt.len()];
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; out + 1];
        adj[out] = Some(Tensor::ones(out_value.shape()));

        for i in self.backward_order(output)? {
            let Some(g) = adj[i].take() else { continue };
            if let Some(slots) = targets.get(&i) {
                for &s in slots {
                    result[s] = Some(g.clone());
                }
            }
            self.propagate(i, &g, &mut adj)?;
        }
        Ok(result
            .into_iter()
            .zip(wrt)
            .map(|(g, w)| g.unwrap_or_else(|| Tensor::zeros(self.value(*w).shape())))
            .collect())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let wants = |j: usize| self.nodes[j].needs_grad;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            &Op::Add(a, b) => {
                if wants(a) {
                    accumulate(adj, a, g.clone())?;
                }
                if wants(b) {
                    accumulate(adj, b, g.clone())?;
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(adj, a, g.clone())?;
                }
                if wants(b) {
                    accumulate(adj, b, g.scale(-T::one())?)?;
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    accumulate(adj, a, g.mul(val(b))?)?;
                }
                if wants(b) {
                    accumulate(adj, b, g.mul(val(a))?)?;
                }
            }
            &Op::Scale(a, c) | &Op::ScaleShift(a, c, _) => {
                accumulate(adj, a, g.scale(c)?)?;
            }
            &Op::AddRow(m, row) => {
                if wants(m) {
                    accumulate(adj, m, g.clone())?;
                }
                if wants(row) {
                    let shape = val(row).shape().to_vec();
                    accumulate(adj, row, g.sum_rows()?.reshape(shape)?)?;
                }
            }
            &Op::SumRows(m) => {
                let spread = Tensor::zeros(val(m).shape()).add_row(g)?;
                accumulate(adj, m, spread)?;
            }
            Op::Broadcast(s, _) => {
                let shape = val(*s).shape().to_vec();
                accumulate(adj, *s, Tensor::scalar(g.sum()).reshape(shape)?)?;
            }
            Op::Reshape(a, _) => {
                let shape = val(*a).shape().to_vec();
                accumulate(adj, *a, g.clone().reshape(shape)?)?;
            }
            &Op::MatMul(a, b) => {
                if wants(a) {
                    accumulate(adj, a, g.matmul_nt(val(b))?)?;
                }
                if wants(b) {
                    accumulate(adj, b, val(a).matmul_tn(g)?)?;
                }
            }
            &Op::Transpose(a) => accumulate(adj, a, g.transpose()?)?,
            &Op::Tanh(a) => {
                let y = &node.value;
                let local = y.zip_map(g, "tanh", |y, g| g * (T::one() - y * y))?;
                accumulate(adj, a, local)?;
            }
            &Op::Square(a) => {
                let two = T::lit(2.0);
                let local = val(a).zip_map(g, "square", |x, g| two * x * g)?;
                accumulate(adj, a, local)?;
            }
            &Op::Sum(a) => {
                let shape = val(a).shape().to_vec();
                accumulate(adj, a, Tensor::full(&shape, g.item()?))?;
            }
        }
        Ok(())
    }

    /// Like [`Tape::grad`], but records the backward sweep on this tape and
    /// returns the gradients as differentiable variables.
    pub fn grad_taped(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let out = self.check(output)?;
        let out_shape = self.nodes[out].value.shape().to_vec();
        if self.nodes[out].value.len() != 1 {
            return Err(Error::NonScalarOutput(out_shape));
        }
        let mut targets: HashMap<usize, Vec<usize>> = HashMap::new();
        for (slot, &w) in wrt.iter().enumerate() {
            targets.entry(self.check(w)?).or_default().push(slot);
        }
        let order = self.backward_order(output)?;
        let mut result: Vec<Option<Var>> = vec![None; wrt.len()];
        let mut adj: Vec<Option<Var>> = vec![None; out + 1];
        adj[out] = Some(self.constant(Tensor::ones(&out_shape)));

        for i in order {
            let Some(g) = adj[i].take() else { continue };
            if let Some(slots) = targets.get(&i) {
                for &s in slots {
                    result[s] = Some(g);
                }
            }
            self.propagate_taped(i, g, &mut adj)?;
        }
        let mut vars = Vec::with_capacity(wrt.len());
        for (g, w) in result.into_iter().zip(wrt) {
            let v = match g {
                Some(v) => v,
                None => {
                    let shape = self.value(*w).shape().to_vec();
                    self.constant(Tensor::zeros(&shape))
                }
            };
            vars.push(v);
        }
        Ok(vars)
    }

    fn propagate_taped(&mut self, i: usize, g: Var, adj: &mut [Option<Var>]) -> Result<()> {
        let op = self.nodes[i].op.clone();
        let me = Var {
            index: i,
            tape: self.id,
        };
        let id = self.id;
        let var = move |index: usize| Var {
            index,
            tape: id,
        };
        let wants = |tape: &Self, j: usize| tape.nodes[j].needs_grad;
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if wants(self, a) {
                    self.accumulate_taped(adj, a, g)?;
                }
                if wants(self, b) {
                    self.accumulate_taped(adj, b, g)?;
                }
            }
            Op::Sub(a, b) => {
                if wants(self, a) {
                    self.accumulate_taped(adj, a, g)?;
                }
                if wants(self, b) {
                    let neg = self.scale(g, -T::one())?;
                    self.accumulate_taped(adj, b, neg)?;
                }
            }
            Op::Mul(a, b) => {
                if wants(self, a) {
                    let ga = self.mul(g, var(b))?;
                    self.accumulate_taped(adj, a, ga)?;
                }
                if wants(self, b) {
                    let gb = self.mul(g, var(a))?;
                    self.accumulate_taped(adj, b, gb)?;
                }
            }
            Op::Scale(a, c) | Op::ScaleShift(a, c, _) => {
                let ga = self.scale(g, c)?;
                self.accumulate_taped(adj, a, ga)?;
            }
            Op::AddRow(m, row) => {
                if wants(self, m) {
                    self.accumulate_taped(adj, m, g)?;
                }
                if wants(self, row) {
                    let shape = self.nodes[row].value.shape().to_vec();
                    let summed = self.sum_rows(g)?;
                    let gr = self.reshape(summed, &shape)?;
                    self.accumulate_taped(adj, row, gr)?;
                }
            }
            Op::SumRows(m) => {
                let shape = self.nodes[m].value.shape().to_vec();
                let zeros = self.constant(Tensor::zeros(&shape));
                let spread = self.add_row(zeros, g)?;
                self.accumulate_taped(adj, m, spread)?;
            }
            Op::Broadcast(s, _) => {
                let shape = self.nodes[s].value.shape().to_vec();
                let total = self.sum(g)?;
                let gs = self.reshape(total, &shape)?;
                self.accumulate_taped(adj, s, gs)?;
            }
            Op::Reshape(a, _) => {
                let shape = self.nodes[a].value.shape().to_vec();
                let ga = self.reshape(g, &shape)?;
                self.accumulate_taped(adj, a, ga)?;
            }
            Op::MatMul(a, b) => {
                if wants(self, a) {
                    let bt = self.transpose(var(b))?;
                    let ga = self.matmul(g, bt)?;
                    self.accumulate_taped(adj, a, ga)?;
                }
                if wants(self, b) {
                    let at = self.transpose(var(a))?;
                    let gb = self.matmul(at, g)?;
                    self.accumulate_taped(adj, b, gb)?;
                }
            }
            Op::Transpose(a) => {
                let ga = self.transpose(g)?;
                self.accumulate_taped(adj, a, ga)?;
            }
            Op::Tanh(a) => {
                let y2 = self.square(me)?;
                let slope = self.scale_shift(y2, -T::one(), T::one())?;
                let ga = self.mul(g, slope)?;
                self.accumulate_taped(adj, a, ga)?;
            }
            Op::Square(a) => {
                let prod = self.mul(g, var(a))?;
                let ga = self.scale(prod, T::lit(2.0))?;
                self.accumulate_taped(adj, a, ga)?;
            }
            Op::Sum(a) => {
                let shape = self.nodes[a].value.shape().to_vec();
                let ga = self.broadcast(g, &shape)?;
                self.accumulate_taped(adj, a, ga)?;
            }
        }
        Ok(())
    }

    fn accumulate_taped(&mut self, adj: &mut [Option<Var>], j: usize, g: Var) -> Result<()> {
        adj[j] = Some(match adj[j] {
            None => g,
            Some(prev) => self.add(prev, g)?,
        });
        Ok(())
    }

    /// Recomputes every node from the recorded leaves and constants.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut replayed: Vec<Node<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf | Op::Constant => node.value.clone(),
                ref op => evaluate(op, &replayed)?,
            };
            replayed.push(Node {
                op: node.op.clone(),
                value,
                needs_grad: node.needs_grad,
            });
        }
        Ok(replayed.into_iter().map(|n| n.value).collect())
    }

    /// True when a replay reproduces every recorded value bit-for-bit.
    pub fn verify_replay(&self) -> Result<bool> {
        let replayed = self.replay()?;
        Ok(replayed.iter().zip(&self.nodes).all(|(r, n)| {
            r.shape() == n.value.shape()
                && r.data()
                    .iter()
                    .zip(n.value.data())
                    .all(|(a, b)| a.to_bits_eq(*b))
        }))
    }
}

trait BitEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<T: Scalar> BitEq for T {
    fn to_bits_eq(self, other: Self) -> bool {
        // Equal values, or both NaN; -0.0 vs 0.0 compares by f64 bits.
        let (a, b) = (self.f64(), other.f64());
        a.to_bits() == b.to_bits()
    }
}

fn accumulate<T: Scalar>(adj: &mut [Option<Tensor<T>>], j: usize, g: Tensor<T>) -> Result<()> {
    match &mut adj[j] {
        Some(prev) => prev.accumulate(&g)?,
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

fn evaluate<T: Scalar>(op: &Op<T>, nodes: &[Node<T>]) -> Result<Tensor<T>> {
    let v = |i: usize| &nodes[i].value;
    match op {
        Op::Leaf | Op::Constant => unreachable!("inputs are never re-evaluated"),
        &Op::Add(a, b) => v(a).add(v(b)),
        &Op::Sub(a, b) => v(a).sub(v(b)),
        &Op::Mul(a, b) => v(a).mul(v(b)),
        &Op::Scale(a, c) => v(a).scale(c),
        &Op::ScaleShift(a, c, d) => v(a).scale_shift(c, d),
        &Op::AddRow(m, row) => v(m).add_row(v(row)),
        &Op::SumRows(m) => v(m).sum_rows()?.checked("sum_rows"),
        Op::Broadcast(s, shape) => {
            let x = v(*s);
            if !x.is_scalar() {
                return Err(Error::ShapeMismatch {
                    op: "broadcast",
                    left: x.shape().to_vec(),
                    right: shape.clone(),
                });
            }
            Ok(Tensor::full(shape, x.data()[0]))
        }
        Op::Reshape(a, shape) => v(*a).clone().reshape(shape.clone()),
        &Op::MatMul(a, b) => v(a).matmul(v(b)),
        &Op::Transpose(a) => v(a).transpose(),
        &Op::Tanh(a) => Ok(v(a).map(|x| x.tanh_fast())),
        &Op::Square(a) => v(a).map(|x| x * x).checked("square"),
        &Op::Sum(a) => Tensor::scalar(v(a).sum()).checked("sum"),
    }
}
