//! The computation tape and reverse sweep.
//!
//! Every backward rule is written in terms of tape operations, so gradients
//! can themselves be recorded (`create_graph = true`) and differentiated
//! again. Gradient-weighted activation maps need exactly that: the map is a
//! function of `∂score/∂activation`, and the attack differentiates the map.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::conv::ConvGeom;
use crate::error::{Error, Result};
use crate::sparse::SparseLinear;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    /// Addition of a constant (scalar or tensor); gradient passes through.
    Shift(usize),
    MulConst(usize, Arc<Tensor>),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Exp(usize),
    Softplus(usize),
    Abs(usize),
    Maximum(usize, usize),
    Minimum(usize, usize),
    Sum(usize),
    Expand(usize),
    Reshape(usize),
    SumAxis(usize, usize),
    BroadcastAxis(usize, usize),
    Gather(usize, Arc<Vec<usize>>),
    ScatterAdd(usize, Arc<Vec<usize>>),
    Concat(Vec<usize>),
    Linear(usize, Arc<SparseLinear>, bool),
    Conv2d(usize, usize, ConvGeom),
    ConvInputGrad(usize, usize, ConvGeom),
    ConvWeightGrad(usize, usize, ConvGeom),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Maximum(a, b) | Minimum(a, b) => {
                vec![*a, *b]
            }
            Conv2d(a, b, _) | ConvInputGrad(a, b, _) | ConvWeightGrad(a, b, _) => vec![*a, *b],
            Scale(a, _)
            | Shift(a)
            | MulConst(a, _)
            | Relu(a)
            | LeakyRelu(a, _)
            | Sigmoid(a)
            | Exp(a)
            | Softplus(a)
            | Abs(a)
            | Sum(a)
            | Expand(a)
            | Reshape(a)
            | SumAxis(a, _)
            | BroadcastAxis(a, _)
            | Gather(a, _)
            | ScatterAdd(a, _)
            | Linear(a, _, _) => vec![*a],
            Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Arc<Tensor>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Append-only record of evaluated operations. Single-writer; use one tape
/// per independent computation.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

/// Gradients of a scalar loss w.r.t. every leaf that requires them.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.by_id.get(&var.id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
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

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.leaf_arc(Arc::new(value), requires_grad)
    }

    /// Registers a shared value without copying it.
    pub fn leaf_arc(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records `value`; the operation is kept only if an input needs gradients.
    pub(crate) fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn check_owner(&self, var: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self, var.tape) {
            Ok(())
        } else {
            Err(Error::ForeignVar)
        }
    }

    /// Gradients of the scalar `output` w.r.t. each of `wrt` (leaves or
    /// intermediate values). `None` means `output` does not depend on it.
    ///
    /// With `create_graph` the returned gradients are recorded on the tape
    /// and can be differentiated again.
    pub fn grad<'t>(
        &'t self,
        output: Var<'t>,
        wrt: &[Var<'t>],
        create_graph: bool,
    ) -> Result<Vec<Option<Var<'t>>>> {
        self.check_owner(&output)?;
        for w in wrt {
            self.check_owner(w)?;
        }
        let out_value = self.value_of(output.id);
        if out_value.len() != 1 {
            return Err(Error::NonScalarLoss(out_value.shape().to_vec()));
        }
        let end = output.id + 1;

        // Nodes on some path from a `wrt` node: only those need gradients.
        let mut leads = vec![false; end];
        for w in wrt {
            if w.id < end {
                leads[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for id in 0..end {
                if !leads[id] && nodes[id].requires_grad {
                    leads[id] = nodes[id].op.inputs().iter().any(|&i| leads[i]);
                }
            }
        }

        let mut grads: Vec<Option<Var<'t>>> = vec![None; end];
        grads[output.id] = Some(self.constant(Tensor::full(out_value.shape(), 1.0)));
        let ctx = Ctx {
            tape: self,
            create_graph,
        };

        for id in (0..end).rev() {
            if !leads[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let op = self.nodes.borrow()[id].op.clone();
            let inputs = op.inputs();
            if inputs.is_empty() {
                continue;
            }
            let wanted: Vec<bool> = inputs
                .iter()
                .map(|&i| leads[i] && self.requires_grad_of(i))
                .collect();
            if !wanted.iter().any(|&w| w) {
                continue;
            }
            let contributions = ctx.rule(id, &op, g, &wanted)?;
            for ((input, contribution), keep) in inputs.into_iter().zip(contributions).zip(wanted) {
                if let (Some(c), true) = (contribution, keep) {
                    grads[input] = Some(match grads[input] {
                        Some(prev) => prev.add(c)?,
                        None => c,
                    });
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|w| if w.id < end { grads[w.id] } else { None })
            .collect())
    }

    /// Reverse sweep from a scalar loss to every leaf that requires
    /// gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.is_empty() {
            return Err(Error::EmptyTape);
        }
        let leaves: Vec<Var<'_>> = {
            let nodes = self.nodes.borrow();
            (0..=loss.id.min(nodes.len() - 1))
                .filter(|&i| nodes[i].requires_grad && matches!(nodes[i].op, Op::Leaf))
                .map(|id| Var { tape: self, id })
                .collect()
        };
        let grads = self.grad(loss, &leaves, false)?;
        let mut by_id = HashMap::new();
        for (leaf, g) in leaves.iter().zip(grads) {
            let value = match g {
                Some(g) => (*g.value()).clone(),
                None => Tensor::zeros(self.value_of(leaf.id).shape()),
            };
            by_id.insert(leaf.id, value);
        }
        Ok(Gradients { by_id })
    }
}

struct Ctx<'t> {
    tape: &'t Tape,
    create_graph: bool,
}

impl<'t> Ctx<'t> {
    /// A recorded value as seen from a backward rule: itself when building a
    /// differentiable graph, a detached constant otherwise.
    fn var(&self, id: usize) -> Var<'t> {
        if self.create_graph {
            Var {
                tape: self.tape,
                id,
            }
        } else {
            self.tape.leaf_arc(self.tape.value_of(id), false)
        }
    }

    fn shape(&self, id: usize) -> Vec<usize> {
        self.tape.value_of(id).shape().to_vec()
    }

    fn rule(
        &self,
        id: usize,
        op: &Op,
        g: Var<'t>,
        wanted: &[bool],
    ) -> Result<Vec<Option<Var<'t>>>> {
        let want = |k: usize| wanted[k];
        let one = |v: Result<Var<'t>>| -> Result<Vec<Option<Var<'t>>>> { Ok(vec![Some(v?)]) };
        match op {
            Op::Leaf => Ok(Vec::new()),
            Op::Add(_, _) => Ok(vec![Some(g), Some(g)]),
            Op::Sub(_, _) => Ok(vec![Some(g), if want(1) { Some(g.neg()) } else { None }]),
            Op::Mul(a, b) => Ok(vec![
                if want(0) {
                    Some(g.mul(self.var(*b))?)
                } else {
                    None
                },
                if want(1) {
                    Some(g.mul(self.var(*a))?)
                } else {
                    None
                },
            ]),
            Op::Div(a, b) => {
                let t = g.div(self.var(*b))?;
                let gb = if want(1) {
                    Some(t.mul(self.var(*a))?.div(self.var(*b))?.neg())
                } else {
                    None
                };
                Ok(vec![Some(t), gb])
            }
            Op::Scale(_, c) => Ok(vec![Some(g.scale(*c))]),
            Op::Shift(_) => Ok(vec![Some(g)]),
            Op::MulConst(_, m) => one(g.mul_const_arc(m.clone())),
            Op::Relu(a) => {
                let mask = self
                    .tape
                    .value_of(*a)
                    .map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                one(g.mul_const(mask))
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let mask = self
                    .tape
                    .value_of(*a)
                    .map(|v| if v > 0.0 { 1.0 } else { s });
                one(g.mul_const(mask))
            }
            Op::Sigmoid(_) => {
                let y = self.var(id);
                let dy = y.mul(y.scale(-1.0).add_scalar(1.0))?;
                one(g.mul(dy))
            }
            Op::Exp(_) => one(g.mul(self.var(id))),
            Op::Softplus(a) => one(g.mul(self.var(*a).sigmoid())),
            Op::Abs(a) => {
                let sign = self.tape.value_of(*a).map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                one(g.mul_const(sign))
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(op, Op::Maximum(..));
                let va = self.tape.value_of(*a);
                let vb = self.tape.value_of(*b);
                let pick_a = va.zip_map(&vb, |x, y| {
                    let first = if is_max { x >= y } else { x <= y };
                    if first {
                        1.0
                    } else {
                        0.0
                    }
                });
                let pick_b = pick_a.map(|m| 1.0 - m);
                Ok(vec![
                    if want(0) {
                        Some(g.mul_const(pick_a)?)
                    } else {
                        None
                    },
                    if want(1) {
                        Some(g.mul_const(pick_b)?)
                    } else {
                        None
                    },
                ])
            }
            Op::Sum(a) => one(g.expand(&self.shape(*a))),
            Op::Expand(a) => one(g.sum().reshape(&self.shape(*a))),
            Op::Reshape(a) => one(g.reshape(&self.shape(*a))),
            Op::SumAxis(a, axis) => {
                let n = self.shape(*a)[*axis];
                one(g.broadcast_axis(*axis, n))
            }
            Op::BroadcastAxis(_, axis) => one(g.sum_axis(*axis)),
            Op::Gather(a, idx) => one(g.scatter_add_arc(idx.clone(), &self.shape(*a))),
            Op::ScatterAdd(a, idx) => one(g.gather_arc(idx.clone())?.reshape(&self.shape(*a))),
            Op::Concat(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for (k, &p) in parts.iter().enumerate() {
                    let shape = self.shape(p);
                    let n: usize = shape.iter().product();
                    if want(k) {
                        let idx: Vec<usize> = (offset..offset + n).collect();
                        out.push(Some(g.gather(idx)?.reshape(&shape)?));
                    } else {
                        out.push(None);
                    }
                    offset += n;
                }
                Ok(out)
            }
            Op::Linear(a, map, transposed) => {
                let shape = self.shape(*a);
                one(g.linear_arc(map.clone(), !*transposed)?.reshape(&shape))
            }
            Op::Conv2d(x, w, geom) => {
                let xs = self.shape(*x);
                let k = self.shape(*w)[2];
                Ok(vec![
                    if want(0) {
                        Some(g.conv2d_input_grad(self.var(*w), *geom, (xs[2], xs[3]))?)
                    } else {
                        None
                    },
                    if want(1) {
                        Some(self.var(*x).conv2d_weight_grad(g, *geom, k)?)
                    } else {
                        None
                    },
                ])
            }
            Op::ConvInputGrad(g0, w, geom) => {
                // y = Aᵀ(w) g0, linear in each argument.
                let k = self.shape(*w)[2];
                Ok(vec![
                    if want(0) {
                        Some(g.conv2d(self.var(*w), *geom)?)
                    } else {
                        None
                    },
                    if want(1) {
                        Some(g.conv2d_weight_grad(self.var(*g0), *geom, k)?)
                    } else {
                        None
                    },
                ])
            }
            Op::ConvWeightGrad(x, g0, geom) => {
                let xs = self.shape(*x);
                Ok(vec![
                    if want(0) {
                        Some(self.var(*g0).conv2d_input_grad(g, *geom, (xs[2], xs[3]))?)
                    } else {
                        None
                    },
                    if want(1) {
                        Some(self.var(*x).conv2d(g, *geom)?)
                    } else {
                        None
                    },
                ])
            }
        }
    }
}
