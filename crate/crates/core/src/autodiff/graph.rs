use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::tensor::{self, ConvGeometry, Precision, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    MatMul,
    Permute(Vec<usize>),
    Reshape,
    SumTo,
    BroadcastTo,
    Relu,
    Exp,
    Log,
    Sqrt,
    SafeRecip,
    Clamp(f64, f64),
    LogSoftmax,
    Im2Col(ConvGeometry),
    Col2Im(ConvGeometry),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::Permute(_) => "permute",
            Op::Reshape => "reshape",
            Op::SumTo => "sum_to",
            Op::BroadcastTo => "broadcast_to",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::SafeRecip => "safe_recip",
            Op::Clamp(..) => "clamp",
            Op::LogSoftmax => "log_softmax",
            Op::Im2Col(_) => "im2col",
            Op::Col2Im(_) => "col2im",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<usize>,
    requires_grad: bool,
}

struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
}

thread_local! {
    static BACKWARD_FAULT: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Corrupts the backward rule of the named op on the current thread (its
/// vector-Jacobian product is scaled by 1.5). Used by mutation tests of the
/// gradient-check suite; pass `None` to restore correct behaviour.
#[doc(hidden)]
pub fn inject_backward_fault(op: Option<&'static str>) {
    BACKWARD_FAULT.with(|f| f.set(op));
}

/// A recording tape. Cloning yields another handle to the same tape.
///
/// A graph is single-threaded (`!Send`); independent graphs can live on
/// different threads.
#[derive(Clone)]
pub struct Graph(Rc<RefCell<Tape>>);

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Graph({} nodes)", self.len())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph(Rc::new(RefCell::new(Tape {
            nodes: Vec::new(),
            precision,
        })))
    }

    pub fn precision(&self) -> Precision {
        self.0.borrow().precision
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn insert(&self, op: Op, inputs: Vec<usize>, value: Tensor, requires_grad: bool) -> Result<Var> {
        let mut tape = self.0.borrow_mut();
        let value = value.rounded(tape.precision);
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let id = tape.nodes.len();
        tape.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Ok(Var {
            graph: self.clone(),
            id,
        })
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Result<Var> {
        self.insert(Op::Leaf, vec![], value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Result<Var> {
        self.insert(Op::Constant, vec![], value, false)
    }

    fn record(&self, op: Op, inputs: &[&Var], value: Tensor) -> Result<Var> {
        let mut requires_grad = false;
        let mut ids = Vec::with_capacity(inputs.len());
        {
            let tape = self.0.borrow();
            for v in inputs {
                if !self.same(&v.graph) {
                    return Err(Error::GraphMismatch);
                }
                requires_grad |= tape.nodes[v.id].requires_grad;
                ids.push(v.id);
            }
        }
        self.insert(op, ids, value, requires_grad)
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.0.borrow().nodes[id].value.clone()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

impl Var {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.0.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.0.borrow().nodes[self.id].requires_grad
    }

    /// Same value as a constant on the same graph.
    pub fn detach(&self) -> Result<Var> {
        self.graph.constant(self.value())
    }

    fn binary(&self, other: &Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        if !self.graph.same(&other.graph) {
            return Err(Error::GraphMismatch);
        }
        let v = tensor::broadcast_binary(op.name(), &self.value(), &other.value(), f)?;
        self.graph.record(op, &[self, other], v)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let v = self.value().map(f);
        self.graph.record(op, &[self], v)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    pub fn neg(&self) -> Result<Var> {
        self.unary(Op::Neg, |a| -a)
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        self.unary(Op::Scale(c), |a| a * c)
    }

    pub fn relu(&self) -> Result<Var> {
        self.unary(Op::Relu, |a| if a > 0.0 { a } else { 0.0 })
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn log(&self) -> Result<Var> {
        self.unary(Op::Log, f64::ln)
    }

    /// Square root; its derivative at 0 is taken to be 0.
    pub fn sqrt(&self) -> Result<Var> {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    /// `1/x`, with `1/0` defined as 0.
    pub fn safe_recip(&self) -> Result<Var> {
        self.unary(Op::SafeRecip, |a| if a == 0.0 { 0.0 } else { 1.0 / a })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(Op::Clamp(lo, hi), |a| a.clamp(lo, hi))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        if !self.graph.same(&other.graph) {
            return Err(Error::GraphMismatch);
        }
        let v = tensor::matmul(&self.value(), &other.value())?;
        self.graph.record(Op::MatMul, &[self, other], v)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var> {
        let v = tensor::permute(&self.value(), axes)?;
        self.graph.record(Op::Permute(axes.to_vec()), &[self], v)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::invalid("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value().reshape(shape)?;
        self.graph.record(Op::Reshape, &[self], v)
    }

    /// Collapses all axes after the first.
    pub fn flatten(&self) -> Result<Var> {
        let s = self.shape();
        let b = *s.first().ok_or_else(|| Error::invalid("flatten of a 0-dim tensor"))?;
        self.reshape(&[b, s[1..].iter().product()])
    }

    pub fn sum_to(&self, shape: &[usize]) -> Result<Var> {
        let v = tensor::sum_to(&self.value(), shape)?;
        self.graph.record(Op::SumTo, &[self], v)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var> {
        let v = tensor::broadcast_to(&self.value(), shape)?;
        self.graph.record(Op::BroadcastTo, &[self], v)
    }

    pub fn sum(&self) -> Result<Var> {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.shape().iter().product::<usize>();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Sum over the given axes, removing them.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var> {
        let s = self.shape();
        if let Some(&a) = axes.iter().find(|&&a| a >= s.len()) {
            return Err(Error::invalid(format!("axis {a} out of range for {s:?}")));
        }
        let keep: Vec<usize> = s
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let out: Vec<usize> = s
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        self.sum_to(&keep)?.reshape(&out)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Var> {
        let s = self.shape();
        let n: usize = axes.iter().filter_map(|&a| s.get(a)).product();
        if n == 0 {
            return Err(Error::invalid("mean over an empty axis"));
        }
        self.sum_axes(axes)?.scale(1.0 / n as f64)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Var> {
        let v = tensor::log_softmax_last(&self.value())?;
        self.graph.record(Op::LogSoftmax, &[self], v)
    }

    pub fn softmax(&self) -> Result<Var> {
        self.log_softmax()?.exp()
    }

    pub fn im2col(&self, geom: ConvGeometry) -> Result<Var> {
        let s = self.shape();
        if s != [geom.batch, geom.channels, geom.height, geom.width] {
            return Err(Error::ShapeMismatch {
                op: "im2col",
                lhs: s,
                rhs: vec![geom.batch, geom.channels, geom.height, geom.width],
            });
        }
        let v = tensor::im2col(&self.value(), &geom);
        self.graph.record(Op::Im2Col(geom), &[self], v)
    }

    fn col2im(&self, geom: ConvGeometry) -> Result<Var> {
        let v = tensor::col2im(&self.value(), &geom);
        self.graph.record(Op::Col2Im(geom), &[self], v)
    }
}

/// Maps source-graph node ids to variables on the graph the backward pass is
/// recorded on.
struct BackCtx {
    src: Graph,
    dst: Graph,
    same: bool,
    imported: HashMap<usize, Var>,
}

impl BackCtx {
    fn var(&mut self, id: usize) -> Result<Var> {
        if self.same {
            return Ok(Var {
                graph: self.src.clone(),
                id,
            });
        }
        if let Some(v) = self.imported.get(&id) {
            return Ok(v.clone());
        }
        let v = self.dst.constant(self.src.value_of(id))?;
        self.imported.insert(id, v.clone());
        Ok(v)
    }

    fn mask(&self, src_id: usize, pred: impl Fn(f64) -> bool) -> Result<Var> {
        let m = self.src.value_of(src_id).map(|v| if pred(v) { 1.0 } else { 0.0 });
        self.dst.constant(m)
    }
}

fn vjp(ctx: &mut BackCtx, op: &Op, inputs: &[usize], out: usize, g: &Var, needs: &[bool]) -> Result<Vec<Option<Var>>> {
    let shape_of = |ctx: &BackCtx, id: usize| ctx.src.0.borrow().nodes[id].value.shape().to_vec();
    let mut grads: Vec<Option<Var>> = vec![None; inputs.len()];
    match op {
        Op::Leaf | Op::Constant => {}
        Op::Add | Op::Sub => {
            if needs[0] {
                grads[0] = Some(g.sum_to(&shape_of(ctx, inputs[0]))?);
            }
            if needs[1] {
                let gb = g.sum_to(&shape_of(ctx, inputs[1]))?;
                grads[1] = Some(if matches!(op, Op::Sub) { gb.neg()? } else { gb });
            }
        }
        Op::Mul => {
            if needs[0] {
                let b = ctx.var(inputs[1])?;
                grads[0] = Some(g.mul(&b)?.sum_to(&shape_of(ctx, inputs[0]))?);
            }
            if needs[1] {
                let a = ctx.var(inputs[0])?;
                grads[1] = Some(g.mul(&a)?.sum_to(&shape_of(ctx, inputs[1]))?);
            }
        }
        Op::Div => {
            let b = ctx.var(inputs[1])?;
            if needs[0] {
                grads[0] = Some(g.div(&b)?.sum_to(&shape_of(ctx, inputs[0]))?);
            }
            if needs[1] {
                let y = ctx.var(out)?;
                grads[1] = Some(g.mul(&y)?.div(&b)?.neg()?.sum_to(&shape_of(ctx, inputs[1]))?);
            }
        }
        Op::Neg => grads[0] = Some(g.neg()?),
        Op::Scale(c) => grads[0] = Some(g.scale(*c)?),
        Op::MatMul => {
            if needs[0] {
                let b = ctx.var(inputs[1])?;
                grads[0] = Some(g.matmul(&b.transpose()?)?);
            }
            if needs[1] {
                let a = ctx.var(inputs[0])?;
                grads[1] = Some(a.transpose()?.matmul(g)?);
            }
        }
        Op::Permute(axes) => {
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            grads[0] = Some(g.permute(&inv)?);
        }
        Op::Reshape => grads[0] = Some(g.reshape(&shape_of(ctx, inputs[0]))?),
        Op::SumTo => grads[0] = Some(g.broadcast_to(&shape_of(ctx, inputs[0]))?),
        Op::BroadcastTo => grads[0] = Some(g.sum_to(&shape_of(ctx, inputs[0]))?),
        Op::Relu => {
            let m = ctx.mask(inputs[0], |v| v > 0.0)?;
            grads[0] = Some(g.mul(&m)?);
        }
        Op::Exp => grads[0] = Some(g.mul(&ctx.var(out)?)?),
        Op::Log => grads[0] = Some(g.div(&ctx.var(inputs[0])?)?),
        Op::Sqrt => {
            let r = ctx.var(out)?.safe_recip()?.scale(0.5)?;
            grads[0] = Some(g.mul(&r)?);
        }
        Op::SafeRecip => {
            let y = ctx.var(out)?;
            grads[0] = Some(g.mul(&y.mul(&y)?)?.neg()?);
        }
        Op::Clamp(lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            let m = ctx.mask(inputs[0], move |v| v >= lo && v <= hi)?;
            grads[0] = Some(g.mul(&m)?);
        }
        Op::LogSoftmax => {
            let mut keep = shape_of(ctx, out);
            if let Some(last) = keep.last_mut() {
                *last = 1;
            }
            let p = ctx.var(out)?.exp()?;
            let s = g.sum_to(&keep)?;
            grads[0] = Some(g.sub(&p.mul(&s)?)?);
        }
        Op::Im2Col(geom) => grads[0] = Some(g.col2im(*geom)?),
        Op::Col2Im(geom) => grads[0] = Some(g.im2col(*geom)?),
    }
    if BACKWARD_FAULT.with(|f| f.get()) == Some(op.name()) {
        for gi in grads.iter_mut().flatten() {
            *gi = gi.scale(1.5)?;
        }
    }
    Ok(grads)
}

/// Reverse-mode gradient of a one-element `output` with respect to `wrt`.
///
/// Variables in `wrt` that do not influence `output` get zero gradients. With
/// `create_graph` set the backward pass is recorded on the same tape, so the
/// returned gradients are differentiable functions of the graph's leaves;
/// otherwise it runs on a scratch tape and the results are constants.
pub fn grad(output: &Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
    let src = output.graph.clone();
    if wrt.iter().any(|w| !src.same(&w.graph)) {
        return Err(Error::GraphMismatch);
    }
    let out_shape = output.shape();
    if out_shape.iter().product::<usize>() != 1 {
        return Err(Error::NotScalar { shape: out_shape });
    }
    let last = output.id;
    let is_target: HashMap<usize, usize> = wrt.iter().enumerate().map(|(i, w)| (w.id, i)).collect();

    // Which nodes lie on a path from some target to the output.
    let mut leads = vec![false; last + 1];
    {
        let tape = src.0.borrow();
        for id in 0..=last {
            let n = &tape.nodes[id];
            leads[id] = n.requires_grad && (is_target.contains_key(&id) || n.inputs.iter().any(|&i| leads[i]));
        }
    }

    let dst = if create_graph {
        src.clone()
    } else {
        Graph::with_precision(src.precision())
    };
    let mut ctx = BackCtx {
        src: src.clone(),
        dst: dst.clone(),
        same: create_graph,
        imported: HashMap::new(),
    };
    let mut results: Vec<Option<Var>> = vec![None; wrt.len()];
    let mut pending: Vec<Option<Var>> = vec![None; last + 1];
    if leads[last] {
        pending[last] = Some(dst.constant(Tensor::ones(&out_shape))?);
    }
    for id in (0..=last).rev() {
        let Some(g) = pending[id].take() else { continue };
        if let Some(&slot) = is_target.get(&id) {
            results[slot] = Some(g.clone());
        }
        let (op, inputs) = {
            let tape = src.0.borrow();
            let n = &tape.nodes[id];
            (n.op.clone(), n.inputs.clone())
        };
        let needs: Vec<bool> = inputs.iter().map(|&i| leads[i]).collect();
        if !needs.iter().any(|&b| b) {
            continue;
        }
        let grads = vjp(&mut ctx, &op, &inputs, id, &g, &needs)?;
        for ((&inp, gi), need) in inputs.iter().zip(grads).zip(needs) {
            let Some(gi) = gi else { continue };
            if !need {
                continue;
            }
            pending[inp] = Some(match pending[inp].take() {
                Some(acc) => acc.add(&gi)?,
                None => gi,
            });
        }
    }

    // Duplicate targets share a slot in `is_target`; fill them all.
    let mut out = Vec::with_capacity(wrt.len());
    for w in wrt {
        let slot = is_target[&w.id];
        let g = match &results[slot] {
            Some(g) if create_graph => g.clone(),
            Some(g) => src.constant(g.value())?,
            None => src.constant(Tensor::zeros(&w.shape()))?,
        };
        out.push(g);
    }
    Ok(out)
}
