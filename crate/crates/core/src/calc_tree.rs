//! Forward pass and tape storage analysis.
//!
//! Backward kernels read only a few primal values: `add`, `sub` and `neg`
//! read none, `exp`/`tan`/`sqrt` read their own output, the remaining
//! univariates read their input and `mul` reads its operands. The
//! [`StoragePlan`] keeps exactly the values some kernel on a derivative
//! path will read, plus inputs and outputs.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::graph::{BinaryOp, Graph, Node, NodeRef, UnaryOp, VarId};
use crate::request::{order_cap, RequestSet};

/// What an operator's derivative kernels read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StorageClass {
    pub needs_inputs: [bool; 2],
    pub needs_output: bool,
}

pub fn storage_class(op: UnaryOp) -> StorageClass {
    let (input, output) = match op {
        UnaryOp::Neg => (false, false),
        UnaryOp::Exp | UnaryOp::Tan | UnaryOp::Sqrt => (false, true),
        UnaryOp::Log
        | UnaryOp::Sin
        | UnaryOp::Cos
        | UnaryOp::Erfc
        | UnaryOp::Recip
        | UnaryOp::PowConst(_) => (true, false),
    };
    StorageClass {
        needs_inputs: [input, false],
        needs_output: output,
    }
}

pub fn binary_storage_class(op: BinaryOp) -> StorageClass {
    let both = op == BinaryOp::Mul;
    StorageClass {
        needs_inputs: [both, both],
        needs_output: false,
    }
}

/// Which node values a calc tree retains, and where.
#[derive(Clone, Debug, PartialEq)]
pub struct StoragePlan {
    graph: u32,
    outputs: Vec<NodeRef>,
    order: Vec<NodeRef>,
    slot_of: Vec<Option<u32>>,
    stored: Vec<NodeRef>,
}

/// Minimal storage for backpropagating any derivative of `outputs` up to
/// `max_order`.
pub fn plan_storage(graph: &Graph, outputs: &[NodeRef], max_order: u32) -> Result<StoragePlan> {
    StoragePlan::minimal(graph, outputs, max_order)
}

impl StoragePlan {
    /// Storage for derivatives with respect to every variable.
    pub fn minimal(graph: &Graph, outputs: &[NodeRef], max_order: u32) -> Result<Self> {
        if max_order == 0 {
            return Err(Error::ZeroOrder);
        }
        if max_order > order_cap() {
            return Err(Error::OrderCap {
                order: max_order,
                cap: order_cap(),
            });
        }
        // kernel reads do not depend on the truncation order
        Self::build(graph, outputs, |_| true)
    }

    /// Storage restricted to what backpropagating `requests` reads;
    /// variables outside the requests are treated as passive.
    pub fn for_requests(graph: &Graph, outputs: &[NodeRef], requests: &RequestSet) -> Result<Self> {
        let active: BTreeSet<u32> = requests
            .active_vars()
            .iter()
            .filter_map(|v| graph.var_ordinal(v))
            .collect();
        Self::build(graph, outputs, |ord| active.contains(&ord))
    }

    /// Stores every non-constant reachable node.
    pub fn store_all(graph: &Graph, outputs: &[NodeRef]) -> Result<Self> {
        let order = Self::reachable(graph, outputs)?;
        let mut keep = vec![false; graph.len()];
        for &n in &order {
            keep[n.index()] = !matches!(graph.get(n), Node::Const(_));
        }
        Ok(Self::assign(graph, outputs, order, &keep))
    }

    fn reachable(graph: &Graph, outputs: &[NodeRef]) -> Result<Vec<NodeRef>> {
        if outputs.is_empty() {
            return Err(Error::NoOutputs);
        }
        graph.topo_order(outputs)
    }

    fn build(graph: &Graph, outputs: &[NodeRef], is_active: impl Fn(u32) -> bool) -> Result<Self> {
        let order = Self::reachable(graph, outputs)?;
        let live = |n: NodeRef| graph.support_ords(n).iter().any(|&o| is_active(o));
        let mut keep = vec![false; graph.len()];
        for &o in outputs {
            keep[o.index()] = true;
        }
        for &n in &order {
            match *graph.get(n) {
                Node::Var(_) => keep[n.index()] = true,
                Node::Const(_) => {}
                Node::Unary(op, child) => {
                    if live(n) {
                        let class = storage_class(op);
                        keep[child.index()] |= class.needs_inputs[0];
                        keep[n.index()] |= class.needs_output;
                    }
                }
                Node::Binary(BinaryOp::Mul, l, r) => {
                    // eps_l is scaled by r's value and vice versa
                    keep[r.index()] |= live(l);
                    keep[l.index()] |= live(r);
                }
                Node::Binary(_, _, _) => {}
            }
        }
        for &n in &order {
            if matches!(graph.get(n), Node::Const(_)) {
                keep[n.index()] = false;
            }
        }
        Ok(Self::assign(graph, outputs, order, &keep))
    }

    fn assign(graph: &Graph, outputs: &[NodeRef], order: Vec<NodeRef>, keep: &[bool]) -> Self {
        let mut slot_of = vec![None; graph.len()];
        let mut stored = Vec::new();
        for &n in &order {
            if keep[n.index()] {
                slot_of[n.index()] = Some(stored.len() as u32);
                stored.push(n);
            }
        }
        StoragePlan {
            graph: graph.id(),
            outputs: outputs.to_vec(),
            order,
            slot_of,
            stored,
        }
    }

    pub fn is_stored(&self, n: NodeRef) -> bool {
        self.slot(n).is_some()
    }

    pub fn slot(&self, n: NodeRef) -> Option<usize> {
        self.slot_of
            .get(n.index())
            .copied()
            .flatten()
            .map(|s| s as usize)
    }

    pub fn slot_count(&self) -> usize {
        self.stored.len()
    }

    /// Stored nodes in slot order.
    pub fn stored(&self) -> &[NodeRef] {
        &self.stored
    }

    pub fn outputs(&self) -> &[NodeRef] {
        &self.outputs
    }

    /// Reachable nodes in evaluation order.
    pub fn schedule(&self) -> &[NodeRef] {
        &self.order
    }
}

#[derive(Clone, Copy, Debug)]
enum EvalOp {
    Var(u32),
    Const(f64),
    Unary(UnaryOp, u32),
    Binary(BinaryOp, u32, u32),
}

/// Primal values of one evaluation, restricted to what the storage plan
/// retains.
#[derive(Clone, Debug)]
pub struct CalcTree<'g> {
    graph: &'g Graph,
    plan: StoragePlan,
    program: Vec<(EvalOp, Option<u32>)>,
    inputs: Vec<Option<f64>>,
    slots: Vec<f64>,
    scratch: Vec<f64>,
    evaluated: bool,
}

impl<'g> CalcTree<'g> {
    /// Calc tree with the minimal storage plan for `outputs`.
    pub fn new(graph: &'g Graph, outputs: &[NodeRef]) -> Result<Self> {
        Self::with_plan(graph, StoragePlan::minimal(graph, outputs, 1)?)
    }

    pub fn with_plan(graph: &'g Graph, plan: StoragePlan) -> Result<Self> {
        if plan.graph != graph.id() {
            return Err(Error::GraphMismatch);
        }
        let mut position = vec![u32::MAX; graph.len()];
        let mut program = Vec::with_capacity(plan.order.len());
        for (p, &n) in plan.order.iter().enumerate() {
            position[n.index()] = p as u32;
            let op = match graph.get(n) {
                Node::Var(v) => EvalOp::Var(graph.var_ordinal(v).expect("registered variable")),
                Node::Const(c) => EvalOp::Const(*c),
                Node::Unary(op, c) => EvalOp::Unary(*op, position[c.index()]),
                Node::Binary(op, l, r) => {
                    EvalOp::Binary(*op, position[l.index()], position[r.index()])
                }
            };
            program.push((op, plan.slot_of[n.index()]));
        }
        Ok(CalcTree {
            graph,
            slots: vec![0.0; plan.slot_count()],
            scratch: vec![0.0; plan.order.len()],
            inputs: vec![None; graph.var_count()],
            plan,
            program,
            evaluated: false,
        })
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn storage(&self) -> &StoragePlan {
        &self.plan
    }

    pub fn is_evaluated(&self) -> bool {
        self.evaluated
    }

    pub fn set(&mut self, var: &VarId, value: f64) -> Result<()> {
        let ord = self
            .graph
            .var_ordinal(var)
            .ok_or_else(|| Error::UnknownVariable(var.to_string()))?;
        self.inputs[ord as usize] = Some(value);
        self.evaluated = false;
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, value: f64) -> Result<()> {
        let v = VarId::new(name).map_err(|_| Error::UnknownVariable(name.to_string()))?;
        self.set(&v, value)
    }

    /// Sets the value of a variable node.
    pub fn set_node(&mut self, node: NodeRef, value: f64) -> Result<()> {
        match self.graph.node(node)? {
            Node::Var(v) => {
                let v = v.clone();
                self.set(&v, value)
            }
            _ => Err(Error::NotAVariable(node.id())),
        }
    }

    /// Runs the forward pass in one sweep over the schedule.
    pub fn evaluate(&mut self) -> Result<()> {
        self.evaluated = false;
        let missing: Vec<String> = self
            .program
            .iter()
            .filter_map(|(op, _)| match *op {
                EvalOp::Var(o) if self.inputs[o as usize].is_none() => {
                    Some(self.graph.var_by_ordinal(o).0.to_string())
                }
                _ => None,
            })
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingInputs(missing));
        }
        for (p, &(op, slot)) in self.program.iter().enumerate() {
            let v = match op {
                EvalOp::Var(o) => self.inputs[o as usize].unwrap_or(f64::NAN),
                EvalOp::Const(c) => c,
                EvalOp::Unary(op, c) => op.apply(self.scratch[c as usize]),
                EvalOp::Binary(op, l, r) => {
                    op.apply(self.scratch[l as usize], self.scratch[r as usize])
                }
            };
            if !v.is_finite() {
                let node = self.plan.order[p];
                let inputs = self
                    .graph
                    .get(node)
                    .children()
                    .map(|c| self.scratch[self.position(c)])
                    .collect();
                return Err(Error::NonFiniteValue {
                    node: node.id(),
                    op: self.graph.get(node).op_name(),
                    inputs,
                });
            }
            self.scratch[p] = v;
            if let Some(s) = slot {
                self.slots[s as usize] = v;
            }
        }
        self.evaluated = true;
        Ok(())
    }

    fn position(&self, n: NodeRef) -> usize {
        self.plan
            .order
            .binary_search(&n)
            .expect("child precedes parent in schedule")
    }

    /// Retained value of `n`; constants are always available.
    pub fn get(&self, n: NodeRef) -> Result<f64> {
        self.graph.check(n)?;
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        self.value(n)
    }

    #[inline]
    pub(crate) fn value(&self, n: NodeRef) -> Result<f64> {
        if let Node::Const(c) = self.graph.get(n) {
            return Ok(*c);
        }
        match self.plan.slot(n) {
            Some(s) => Ok(self.slots[s]),
            None => Err(Error::Elided(n.id())),
        }
    }
}
