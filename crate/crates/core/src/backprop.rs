//! Single-sweep Taylor backpropagation.
//!
//! The sweep starts from the identity expansion `eps_out` of every output,
//! weighted by its seed, and eliminates the interior nodes in reverse
//! topological order. Eliminating node `n` substitutes its local expansion
//! (see [`crate::kernels`]) for `eps_n` in every live monomial, multiplies
//! out and drops every resulting monomial that can no longer reach a
//! requested multi-index. When only input perturbations remain, the
//! coefficient of `prod_x eps_x^{M(x)}` times `prod_x M(x)!` is the
//! derivative selected by `M`.
//!
//! All symbolic work happens once in [`BackpropPlan::new`]; the plan is a
//! flat list of multiply-accumulate instructions over a fixed-size buffer
//! that [`BackPropagator`] replays against any number of calc trees.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use smallvec::SmallVec;

use crate::calc_tree::{storage_class, CalcTree};
use crate::error::{Error, Result};
use crate::graph::{BinaryOp, Graph, Node, NodeRef, UnaryOp};
use crate::kernels::fill_coeffs;
use crate::request::{MultiIndex, RequestSet};

/// Product of perturbation variables, `prod_W eps_W^{a_W}`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Monomial {
    // (node id, exponent), sorted by node id
    factors: SmallVec<[(u32, u8); 4]>,
}

impl Monomial {
    pub fn new(factors: &[(NodeRef, u32)]) -> Self {
        let mut m = Monomial::default();
        for &(n, a) in factors {
            if a > 0 {
                m = m.times_power(n.id(), a);
            }
        }
        m
    }

    fn single(node: u32, exp: u32) -> Self {
        let mut factors = SmallVec::new();
        factors.push((node, exp as u8));
        Monomial { factors }
    }

    fn times_power(&self, node: u32, exp: u32) -> Monomial {
        let mut factors = self.factors.clone();
        match factors.binary_search_by_key(&node, |f| f.0) {
            Ok(i) => factors[i].1 += exp as u8,
            Err(i) => factors.insert(i, (node, exp as u8)),
        }
        Monomial { factors }
    }

    fn times(&self, other: &Monomial) -> Monomial {
        other
            .factors
            .iter()
            .fold(self.clone(), |m, &(n, a)| m.times_power(n, a as u32))
    }

    /// Removes `node` and returns its exponent with the remaining monomial.
    fn split(&self, node: u32) -> Option<(u32, Monomial)> {
        let i = self.factors.iter().position(|f| f.0 == node)?;
        let mut rest = self.factors.clone();
        let (_, a) = rest.remove(i);
        Some((a as u32, Monomial { factors: rest }))
    }

    pub fn degree(&self) -> u32 {
        self.factors.iter().map(|f| f.1 as u32).sum()
    }

    /// `(node id, exponent)` pairs in node order.
    pub fn factors(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.factors.iter().map(|&(n, a)| (n, a as u32))
    }

    pub fn exponent(&self, node: NodeRef) -> u32 {
        self.factors
            .iter()
            .find(|f| f.0 == node.id())
            .map_or(0, |f| f.1 as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }
}

impl fmt::Debug for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.factors.is_empty() {
            return f.write_str("1");
        }
        for (i, (n, a)) in self.factors().enumerate() {
            if i > 0 {
                f.write_str("·")?;
            }
            write!(f, "e{n}")?;
            if a > 1 {
                write!(f, "^{a}")?;
            }
        }
        Ok(())
    }
}

/// Requests in terms of variable ordinals, sorted by total order.
struct Targets {
    // (orders by var ordinal, total order)
    requests: Vec<(Vec<(u32, u32)>, u32)>,
}

impl Targets {
    fn new(graph: &Graph, requests: &RequestSet) -> Result<Self> {
        let mut out = Vec::with_capacity(requests.len());
        for m in requests {
            let mut orders = Vec::with_capacity(m.entries().len());
            for (v, k) in m.entries() {
                let ord = graph
                    .var_ordinal(v)
                    .ok_or_else(|| Error::UnknownVariable(v.to_string()))?;
                orders.push((ord, *k));
            }
            orders.sort_unstable();
            out.push((orders, m.total_order()));
        }
        out.sort_by_key(|r| r.1);
        Ok(Targets { requests: out })
    }

    fn max_order(&self) -> u32 {
        self.requests.last().map_or(0, |r| r.1)
    }
}

/// Exact feasibility test deciding whether a live monomial can still feed
/// one of the requests.
///
/// Every `eps_W^a` expands into input monomials of degree at least `a` over
/// `support(W)`; an input perturbation `eps_x^a` stays exactly itself. The
/// monomial survives iff some request `M` splits into per-factor parts
/// meeting those constraints. With the variable factors subtracted, the
/// remaining split is a transportation problem whose feasibility is
/// Hall's condition over every subset of factors.
struct Filter<'g> {
    graph: &'g Graph,
    targets: Targets,
    cache: HashMap<Monomial, bool>,
}

impl<'g> Filter<'g> {
    fn new(graph: &'g Graph, targets: Targets) -> Self {
        Filter {
            graph,
            targets,
            cache: HashMap::new(),
        }
    }

    fn keep(&mut self, m: &Monomial) -> bool {
        if let Some(&k) = self.cache.get(m) {
            return k;
        }
        let k = self.decide(m);
        self.cache.insert(m.clone(), k);
        k
    }

    fn decide(&self, m: &Monomial) -> bool {
        let degree = m.degree();
        let start = self.targets.requests.partition_point(|r| r.1 < degree);
        self.targets.requests[start..]
            .iter()
            .any(|(orders, _)| self.feasible(m, orders))
    }

    fn feasible(&self, m: &Monomial, orders: &[(u32, u32)]) -> bool {
        let mut supply: SmallVec<[u32; 8]> = orders.iter().map(|o| o.1).collect();
        // (mask over request entries, demand)
        let mut groups: SmallVec<[(u64, u32); 8]> = SmallVec::new();
        let mut covered = 0u64;
        for (node, a) in m.factors() {
            let node_ref = self.graph.node_ref(node as usize);
            match self.graph.get(node_ref) {
                Node::Var(v) => {
                    let ord = self.graph.var_ordinal(v).expect("registered variable");
                    match orders.iter().position(|o| o.0 == ord) {
                        Some(i) if supply[i] >= a => supply[i] -= a,
                        _ => return false,
                    }
                }
                _ => {
                    let support = self.graph.support_ords(node_ref);
                    let mut mask = 0u64;
                    for (i, o) in orders.iter().enumerate() {
                        if support.binary_search(&o.0).is_ok() {
                            mask |= 1 << i;
                        }
                    }
                    if mask == 0 {
                        return false;
                    }
                    covered |= mask;
                    match groups.iter_mut().find(|g| g.0 == mask) {
                        Some(g) => g.1 += a,
                        None => groups.push((mask, a)),
                    }
                }
            }
        }
        // leftover units must land on some non-variable factor
        for (i, &s) in supply.iter().enumerate() {
            if s > 0 && covered & (1 << i) == 0 {
                return false;
            }
        }
        let k = groups.len();
        for subset in 1u64..(1 << k) {
            let mut demand = 0;
            let mut union = 0u64;
            for (j, g) in groups.iter().enumerate() {
                if subset & (1 << j) != 0 {
                    demand += g.1;
                    union |= g.0;
                }
            }
            let available: u32 = supply
                .iter()
                .enumerate()
                .filter(|(i, _)| union & (1 << i) != 0)
                .map(|(_, &s)| s)
                .sum();
            if demand > available {
                return false;
            }
        }
        true
    }
}

/// Whether monomial `m` can still contribute to one of `requests`.
pub fn contribution_filter(graph: &Graph, m: &Monomial, requests: &RequestSet) -> Result<bool> {
    for (n, _) in m.factors() {
        graph.check(graph.node_ref(n as usize))?;
    }
    let filter = Filter::new(graph, Targets::new(graph, requests)?);
    Ok(filter.decide(m))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum FactorSpec {
    /// Plan-time constant (binomials, signs).
    Const(u64),
    /// Coefficient of `eps^j` in `(sum_k c_k eps^k)^a`.
    Power { a: u8, j: u8 },
    /// `coef * value(right)^i * value(left)^j` from the product expansion.
    MulTerm { coef: u64, i: u8, j: u8 },
}

#[derive(Clone, Debug)]
enum StepKind {
    Linear,
    Univariate {
        op: UnaryOp,
        value_of: NodeRef,
        order: usize,
        max_power: usize,
    },
    Mul {
        left: NodeRef,
        right: NodeRef,
        max_power: usize,
        needs_left: bool,
        needs_right: bool,
    },
}

#[derive(Clone, Copy, Debug)]
struct Instr {
    src: u32,
    dst: u32,
    factor: u32,
}

#[derive(Clone, Debug)]
struct Step {
    node: NodeRef,
    kind: StepKind,
    consumed: Vec<u32>,
    fresh: Vec<u32>,
    factors: Vec<FactorSpec>,
    instrs: Vec<Instr>,
}

/// The backward sweep for one set of outputs and requests, fully analysed.
#[derive(Clone, Debug)]
pub struct BackpropPlan {
    graph: u32,
    outputs: Vec<NodeRef>,
    seed_slots: Vec<Option<u32>>,
    requests: Vec<MultiIndex>,
    request_index: HashMap<MultiIndex, usize>,
    final_slots: Vec<Option<u32>>,
    steps: Vec<Step>,
    buffer_size: usize,
    scratch_size: usize,
    max_kernel_order: usize,
    required_values: Vec<NodeRef>,
    boundaries: Vec<Vec<Monomial>>,
    dropped: Vec<Vec<Monomial>>,
}

/// Plans the backward sweep of `outputs` for `requests`.
pub fn make_plan(
    graph: &Graph,
    outputs: &[NodeRef],
    requests: &RequestSet,
) -> Result<BackpropPlan> {
    BackpropPlan::new(graph, outputs, requests)
}

struct Planner<'g> {
    filter: Filter<'g>,
    active: BTreeMap<Monomial, u32>,
    free: Vec<u32>,
    next_slot: u32,
}

impl Planner<'_> {
    fn alloc(&mut self) -> u32 {
        self.free.pop().unwrap_or_else(|| {
            self.next_slot += 1;
            self.next_slot - 1
        })
    }
}

fn binomial(n: u32, k: u32) -> u64 {
    (0..k).fold(1u64, |acc, i| acc * u64::from(n - i) / u64::from(i + 1))
}

impl BackpropPlan {
    pub fn new(graph: &Graph, outputs: &[NodeRef], requests: &RequestSet) -> Result<Self> {
        if outputs.is_empty() {
            return Err(Error::NoOutputs);
        }
        if requests.is_empty() {
            return Err(Error::NoRequests);
        }
        for &o in outputs {
            graph.check(o)?;
        }
        let mut uniq: Vec<NodeRef> = Vec::new();
        for &o in outputs {
            if !uniq.contains(&o) {
                uniq.push(o);
            }
        }
        let outputs = uniq;
        let targets = Targets::new(graph, requests)?;
        let max_order = targets.max_order();
        let active_ords: BTreeSet<u32> = targets
            .requests
            .iter()
            .flat_map(|r| r.0.iter().map(|o| o.0))
            .collect();
        let is_live = |n: NodeRef| {
            graph
                .support_ords(n)
                .iter()
                .any(|o| active_ords.contains(o))
        };

        let mut p = Planner {
            filter: Filter::new(graph, targets),
            active: BTreeMap::new(),
            free: Vec::new(),
            next_slot: 0,
        };

        let mut seed_slots = Vec::with_capacity(outputs.len());
        for &o in &outputs {
            let m = Monomial::single(o.id(), 1);
            if is_live(o) && p.filter.keep(&m) {
                let slot = p.alloc();
                p.active.insert(m, slot);
                seed_slots.push(Some(slot));
            } else {
                seed_slots.push(None);
            }
        }

        let order = graph.topo_order(&outputs)?;
        let mut boundaries = vec![p.active.keys().cloned().collect::<Vec<_>>()];
        let mut dropped = Vec::new();
        let mut steps = Vec::new();
        let mut required = BTreeSet::new();
        let mut scratch_size = 0;
        let mut max_kernel_order = 0;

        for &n in order.iter().rev() {
            let node = graph.get(n);
            if node.is_leaf() || !is_live(n) {
                continue;
            }
            let (step, lost) = Self::eliminate(&mut p, n, node, max_order)?;
            scratch_size = scratch_size.max(step.consumed.len());
            match step.kind {
                StepKind::Univariate {
                    value_of, order, ..
                } if !step.instrs.is_empty() => {
                    required.insert(value_of);
                    max_kernel_order = max_kernel_order.max(order);
                }
                StepKind::Mul {
                    left,
                    right,
                    needs_left,
                    needs_right,
                    ..
                } => {
                    if needs_left && !matches!(graph.get(left), Node::Const(_)) {
                        required.insert(left);
                    }
                    if needs_right && !matches!(graph.get(right), Node::Const(_)) {
                        required.insert(right);
                    }
                }
                _ => {}
            }
            steps.push(step);
            boundaries.push(p.active.keys().cloned().collect());
            dropped.push(lost);
        }

        let mut final_slots = Vec::with_capacity(requests.len());
        let mut request_index = HashMap::with_capacity(requests.len());
        for (i, m) in requests.iter().enumerate() {
            let mut mono = Monomial::default();
            let mut reachable = true;
            for (v, k) in m.entries() {
                match graph.var_node_by_id(v) {
                    Some(node) => mono = mono.times_power(node.id(), *k),
                    None => reachable = false,
                }
            }
            let slot = if reachable {
                p.active.get(&mono).copied()
            } else {
                None
            };
            final_slots.push(slot);
            request_index.insert(m.clone(), i);
        }

        Ok(BackpropPlan {
            graph: graph.id(),
            outputs,
            seed_slots,
            requests: requests.iter().cloned().collect(),
            request_index,
            final_slots,
            steps,
            buffer_size: p.next_slot as usize,
            scratch_size,
            max_kernel_order,
            required_values: required.into_iter().collect(),
            boundaries,
            dropped,
        })
    }

    /// Symbolically substitutes the local expansion of `n` into every live
    /// monomial containing `eps_n`.
    fn eliminate(
        p: &mut Planner<'_>,
        n: NodeRef,
        node: &Node,
        max_order: u32,
    ) -> Result<(Step, Vec<Monomial>)> {
        let consumed: Vec<(Monomial, u32)> = p
            .active
            .iter()
            .filter(|(m, _)| m.exponent(n) > 0)
            .map(|(m, &s)| (m.clone(), s))
            .collect();
        let consumed_slots: Vec<u32> = consumed.iter().map(|c| c.1).collect();
        for (m, s) in &consumed {
            p.active.remove(m);
            p.free.push(*s);
        }
        // reuse low slots first
        p.free.sort_unstable_by(|a, b| b.cmp(a));

        let max_power = consumed
            .iter()
            .map(|(m, _)| m.exponent(n))
            .max()
            .unwrap_or(0);
        let mut factors: Vec<FactorSpec> = Vec::new();
        let mut factor_index: HashMap<FactorSpec, u32> = HashMap::new();
        let mut instrs = Vec::new();
        let mut fresh = Vec::new();
        let mut lost = BTreeSet::new();
        let mut max_j = 0usize;
        let (mut needs_left, mut needs_right) = (false, false);

        for (src, (m, _)) in consumed.iter().enumerate() {
            let (a, rest) = m.split(n.id()).expect("consumed monomials contain eps_n");
            let budget = max_order.saturating_sub(rest.degree());
            for (term, spec) in expansion_terms(node, a, budget) {
                let target = rest.times(&term);
                if !p.filter.keep(&target) {
                    lost.insert(target);
                    continue;
                }
                let dst = match p.active.get(&target) {
                    Some(&s) => s,
                    None => {
                        let s = p.alloc();
                        p.active.insert(target, s);
                        fresh.push(s);
                        s
                    }
                };
                match spec {
                    FactorSpec::Power { j, .. } => max_j = max_j.max(j as usize),
                    FactorSpec::MulTerm { i, j, .. } => {
                        needs_right |= i > 0;
                        needs_left |= j > 0;
                    }
                    FactorSpec::Const(_) => {}
                }
                let next = factors.len() as u32;
                let factor = *factor_index.entry(spec).or_insert_with(|| {
                    factors.push(spec);
                    next
                });
                instrs.push(Instr {
                    src: src as u32,
                    dst,
                    factor,
                });
            }
        }

        let kind = match *node {
            Node::Unary(UnaryOp::Neg, _) | Node::Binary(BinaryOp::Add | BinaryOp::Sub, _, _) => {
                StepKind::Linear
            }
            Node::Unary(op, child) => StepKind::Univariate {
                op,
                value_of: if storage_class(op).needs_output {
                    n
                } else {
                    child
                },
                order: max_j,
                max_power: max_power as usize,
            },
            Node::Binary(BinaryOp::Mul, left, right) => StepKind::Mul {
                left,
                right,
                max_power: max_power as usize,
                needs_left,
                needs_right,
            },
            Node::Var(_) | Node::Const(_) => unreachable!("leaves are never eliminated"),
        };
        Ok((
            Step {
                node: n,
                kind,
                consumed: consumed_slots,
                fresh,
                factors,
                instrs,
            },
            lost.into_iter().collect(),
        ))
    }

    pub fn outputs(&self) -> &[NodeRef] {
        &self.outputs
    }

    pub fn requests(&self) -> &[MultiIndex] {
        &self.requests
    }

    /// Nodes in the order the sweep eliminates them.
    pub fn elimination_order(&self) -> Vec<NodeRef> {
        self.steps.iter().map(|s| s.node).collect()
    }

    /// Number of buffer slots, the peak count of simultaneously live
    /// monomials.
    pub fn buffer_size(&self) -> usize {
        self.buffer_size
    }

    /// Live monomials before the first step and after each step.
    pub fn active_sets(&self) -> &[Vec<Monomial>] {
        &self.boundaries
    }

    /// Monomials discarded by the contribution filter at each step.
    pub fn dropped(&self) -> &[Vec<Monomial>] {
        &self.dropped
    }

    /// Primal values the sweep reads from a calc tree.
    pub fn required_values(&self) -> &[NodeRef] {
        &self.required_values
    }

    /// Multiply-accumulate instructions across all steps.
    pub fn instruction_count(&self) -> usize {
        self.steps.iter().map(|s| s.instrs.len()).sum()
    }

    /// Whether the final buffer holds a slot for `m`; requests without one
    /// are structurally zero.
    pub fn has_slot(&self, m: &MultiIndex) -> bool {
        self.request_index
            .get(m)
            .is_some_and(|&i| self.final_slots[i].is_some())
    }
}

/// Terms of `L_n^a` truncated at degree `budget`, where `L_n` is the local
/// expansion of `node` in its operands' perturbations.
fn expansion_terms(node: &Node, a: u32, budget: u32) -> Vec<(Monomial, FactorSpec)> {
    let mut out = Vec::new();
    match *node {
        Node::Unary(UnaryOp::Neg, c) => {
            if a <= budget {
                let sign = if a.is_multiple_of(2) { 1.0f64 } else { -1.0 };
                out.push((
                    Monomial::single(c.id(), a),
                    FactorSpec::Const(sign.to_bits()),
                ));
            }
        }
        Node::Unary(_, c) => {
            for j in a..=budget {
                out.push((
                    Monomial::single(c.id(), j),
                    FactorSpec::Power {
                        a: a as u8,
                        j: j as u8,
                    },
                ));
            }
        }
        Node::Binary(op @ (BinaryOp::Add | BinaryOp::Sub), l, r) => {
            if a <= budget {
                for i in (0..=a).rev() {
                    let mut coef = binomial(a, i) as f64;
                    if op == BinaryOp::Sub && (a - i) % 2 == 1 {
                        coef = -coef;
                    }
                    let m = Monomial::default()
                        .times_power(l.id(), i)
                        .times_power(r.id(), a - i);
                    let m = strip_zero(m);
                    out.push((m, FactorSpec::Const(coef.to_bits())));
                }
            }
        }
        Node::Binary(BinaryOp::Mul, l, r) => {
            // (v_r e_l + v_l e_r + e_l e_r)^a, terms indexed by (i, j, k)
            for k in 0..=a {
                for i in (0..=a - k).rev() {
                    let j = a - k - i;
                    if a + k > budget {
                        continue;
                    }
                    let coef = binomial(a, k) * binomial(a - k, i);
                    let m = Monomial::default()
                        .times_power(l.id(), i + k)
                        .times_power(r.id(), j + k);
                    out.push((
                        strip_zero(m),
                        FactorSpec::MulTerm {
                            coef,
                            i: i as u8,
                            j: j as u8,
                        },
                    ));
                }
            }
        }
        Node::Var(_) | Node::Const(_) => {}
    }
    out
}

fn strip_zero(mut m: Monomial) -> Monomial {
    m.factors.retain(|f| f.1 > 0);
    m
}

/// Per-execution instrumentation.
#[derive(Clone, Debug, Default)]
pub struct BackpropTrace {
    /// Elimination count per node id.
    pub eliminations: Vec<u32>,
    pub peak_live: usize,
    live: usize,
    occupied: Vec<bool>,
}

/// Executes a [`BackpropPlan`] against calc trees.
#[derive(Clone, Debug)]
pub struct BackPropagator {
    plan: Arc<BackpropPlan>,
    seeds: Vec<Option<f64>>,
    buffer: Vec<f64>,
    scratch: Vec<f64>,
    factors: Vec<f64>,
    coeffs: Vec<f64>,
    powers: Vec<f64>,
    results: Option<Vec<f64>>,
}

impl BackPropagator {
    pub fn new(plan: Arc<BackpropPlan>) -> Self {
        let k = plan.max_kernel_order + 1;
        BackPropagator {
            seeds: vec![None; plan.outputs.len()],
            buffer: vec![0.0; plan.buffer_size],
            scratch: vec![0.0; plan.scratch_size],
            factors: Vec::new(),
            coeffs: vec![0.0; k],
            powers: vec![0.0; k * k],
            results: None,
            plan,
        }
    }

    /// Plans and wraps in one call.
    pub fn build(graph: &Graph, outputs: &[NodeRef], requests: &RequestSet) -> Result<Self> {
        Ok(Self::new(Arc::new(BackpropPlan::new(
            graph, outputs, requests,
        )?)))
    }

    pub fn plan(&self) -> &Arc<BackpropPlan> {
        &self.plan
    }

    pub fn set_seed(&mut self, output: NodeRef, seed: f64) -> Result<()> {
        let i = self
            .plan
            .outputs
            .iter()
            .position(|&o| o == output)
            .ok_or(Error::NotAnOutput(output.id()))?;
        self.seeds[i] = Some(seed);
        Ok(())
    }

    pub fn backpropagate(&mut self, ct: &CalcTree<'_>) -> Result<()> {
        self.run(ct, None)
    }

    /// Like [`backpropagate`](Self::backpropagate), recording eliminations
    /// and buffer occupancy.
    pub fn backpropagate_traced(
        &mut self,
        ct: &CalcTree<'_>,
        trace: &mut BackpropTrace,
    ) -> Result<()> {
        *trace = BackpropTrace {
            eliminations: vec![0; ct.graph().len()],
            occupied: vec![false; self.plan.buffer_size],
            ..BackpropTrace::default()
        };
        self.run(ct, Some(trace))
    }

    fn run(&mut self, ct: &CalcTree<'_>, mut trace: Option<&mut BackpropTrace>) -> Result<()> {
        self.results = None;
        let plan = Arc::clone(&self.plan);
        if plan.graph != ct.graph().id() {
            return Err(Error::GraphMismatch);
        }
        if !ct.is_evaluated() {
            return Err(Error::NotEvaluated);
        }
        for &n in &plan.required_values {
            ct.value(n)?;
        }
        let mut seeds = Vec::with_capacity(plan.outputs.len());
        for (i, s) in self.seeds.iter().enumerate() {
            seeds.push(s.ok_or(Error::MissingSeed(plan.outputs[i].id()))?);
        }
        for (slot, seed) in plan.seed_slots.iter().zip(&seeds) {
            if let Some(slot) = slot {
                self.buffer[*slot as usize] = *seed;
                if let Some(t) = trace.as_deref_mut() {
                    t.occupied[*slot as usize] = true;
                    t.live += 1;
                }
            }
        }
        if let Some(t) = trace.as_deref_mut() {
            t.peak_live = t.live;
        }

        for step in &plan.steps {
            for (k, &s) in step.consumed.iter().enumerate() {
                self.scratch[k] = self.buffer[s as usize];
            }
            for &s in &step.fresh {
                self.buffer[s as usize] = 0.0;
            }
            if let Some(t) = trace.as_deref_mut() {
                t.eliminations[step.node.index()] += 1;
                for &s in &step.consumed {
                    assert!(t.occupied[s as usize], "consumed slot {s} not live");
                    t.occupied[s as usize] = false;
                }
                for &s in &step.fresh {
                    assert!(!t.occupied[s as usize], "fresh slot {s} already live");
                    t.occupied[s as usize] = true;
                }
                t.live = t.live + step.fresh.len() - step.consumed.len();
                t.peak_live = t.peak_live.max(t.live);
            }
            if step.instrs.is_empty() {
                continue;
            }
            self.compute_factors(ct, step)?;
            for ins in &step.instrs {
                self.buffer[ins.dst as usize] +=
                    self.scratch[ins.src as usize] * self.factors[ins.factor as usize];
            }
        }

        let results = plan
            .final_slots
            .iter()
            .zip(&plan.requests)
            .map(|(slot, m)| match slot {
                Some(s) => self.buffer[*s as usize] * m.factorial_product(),
                None => 0.0,
            })
            .collect();
        self.results = Some(results);
        Ok(())
    }

    fn compute_factors(&mut self, ct: &CalcTree<'_>, step: &Step) -> Result<()> {
        self.factors.clear();
        match step.kind {
            StepKind::Linear => {
                self.factors.extend(step.factors.iter().map(|f| match f {
                    FactorSpec::Const(bits) => f64::from_bits(*bits),
                    _ => unreachable!("linear steps only use constant factors"),
                }));
            }
            StepKind::Univariate {
                op,
                value_of,
                order,
                max_power,
            } => {
                let x = ct.value(value_of)?;
                let stride = order + 1;
                let c = &mut self.coeffs[..stride];
                fill_coeffs(op, x, c).map_err(|e| match e {
                    Error::Domain { op, point, .. } => Error::Domain {
                        op,
                        point,
                        node: Some(step.node.id()),
                    },
                    other => other,
                })?;
                // powers[a * stride + j] = [eps^j] (sum_k c_k eps^k)^a
                let pw = &mut self.powers;
                pw[stride..2 * stride].copy_from_slice(c);
                for a in 2..=max_power {
                    for j in 0..stride {
                        let mut acc = 0.0;
                        if j >= a {
                            for i in (a - 1)..j {
                                acc += pw[(a - 1) * stride + i] * c[j - i];
                            }
                        }
                        pw[a * stride + j] = acc;
                    }
                }
                self.factors.extend(step.factors.iter().map(|f| match *f {
                    FactorSpec::Power { a, j } => pw[a as usize * stride + j as usize],
                    _ => unreachable!("univariate steps only use power factors"),
                }));
            }
            StepKind::Mul {
                left,
                right,
                max_power,
                needs_left,
                needs_right,
            } => {
                let vl = if needs_left { ct.value(left)? } else { 0.0 };
                let vr = if needs_right { ct.value(right)? } else { 0.0 };
                let mut pl = [1.0; crate::request::MAX_ORDER_CAP as usize + 1];
                let mut pr = pl;
                for e in 1..=max_power {
                    pl[e] = pl[e - 1] * vl;
                    pr[e] = pr[e - 1] * vr;
                }
                self.factors.extend(step.factors.iter().map(|f| match *f {
                    FactorSpec::MulTerm { coef, i, j } => {
                        coef as f64 * pr[i as usize] * pl[j as usize]
                    }
                    _ => unreachable!("product steps only use product factors"),
                }));
            }
        }
        Ok(())
    }

    /// Derivative selected by `m` after [`backpropagate`](Self::backpropagate).
    pub fn get(&self, m: &MultiIndex) -> Result<f64> {
        let i = *self
            .plan
            .request_index
            .get(m)
            .ok_or_else(|| Error::NotRequested(m.to_string()))?;
        let results = self.results.as_ref().ok_or(Error::NotBackpropagated)?;
        Ok(results[i])
    }

    /// All results in request order.
    pub fn results(&self) -> Result<&[f64]> {
        self.results.as_deref().ok_or(Error::NotBackpropagated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::exp_cos_product;

    fn reqs(list: &[&str]) -> RequestSet {
        RequestSet::new(list.iter().map(|r| r.parse().unwrap()))
    }

    fn mono(g: &Graph, factors: &[(&str, u32)]) -> Monomial {
        let f: Vec<(NodeRef, u32)> = factors
            .iter()
            .map(|(n, a)| (g.var_node(n).unwrap(), *a))
            .collect();
        Monomial::new(&f)
    }

    #[test]
    fn filter_rejects_disjoint_support() {
        let mut g = Graph::new();
        g.variable("x1").unwrap();
        g.variable("x2").unwrap();
        let m = mono(&g, &[("x2", 1)]);
        assert!(!contribution_filter(&g, &m, &reqs(&["d<2>(x1)"])).unwrap());
    }

    #[test]
    fn filter_keeps_squared_product() {
        let mut g = Graph::new();
        let [_, _, p, _, _] = exp_cos_product(&mut g).unwrap();
        let m = Monomial::new(&[(p, 2)]);
        assert!(contribution_filter(&g, &m, &reqs(&["d<2>(V1)"])).unwrap());
        let m3 = Monomial::new(&[(p, 3)]);
        assert!(!contribution_filter(&g, &m3, &reqs(&["d<2>(V1)", "d(V1)*d(V2)"])).unwrap());
    }

    #[test]
    fn filter_needs_units_for_every_factor() {
        let mut g = Graph::new();
        let x = g.variable("x").unwrap();
        let y = g.variable("y").unwrap();
        let sx = g.sin(x).unwrap();
        let cx = g.cos(x).unwrap();
        let m = Monomial::new(&[(sx, 1), (cx, 1)]);
        assert!(!contribution_filter(&g, &m, &reqs(&["d(x)*d(y)"])).unwrap());
        assert!(contribution_filter(&g, &m, &reqs(&["d<2>(x)"])).unwrap());
        let m = Monomial::new(&[(sx, 1), (y, 1)]);
        assert!(contribution_filter(&g, &m, &reqs(&["d<3>(x)*d(y)"])).unwrap());
        assert!(!contribution_filter(&g, &m, &reqs(&["d(x)*d<2>(y)"])).unwrap());
    }

    #[test]
    fn worked_example_final_monomials() {
        let mut g = Graph::new();
        let [v1, v2, _, _, r] = exp_cos_product(&mut g).unwrap();
        let rs = reqs(&["d(V1)", "d(V2)", "d<2>(V1)", "d(V1)*d(V2)", "d<2>(V2)"]);
        let plan = make_plan(&g, &[r], &rs).unwrap();
        let last = plan.active_sets().last().unwrap();
        let expected: BTreeSet<Monomial> = [
            Monomial::new(&[(v1, 1)]),
            Monomial::new(&[(v2, 1)]),
            Monomial::new(&[(v1, 2)]),
            Monomial::new(&[(v1, 1), (v2, 1)]),
            Monomial::new(&[(v2, 2)]),
        ]
        .into_iter()
        .collect();
        assert_eq!(last.iter().cloned().collect::<BTreeSet<_>>(), expected);
        assert_eq!(plan.elimination_order().len(), 3);
    }

    #[test]
    fn worked_example_values() {
        let mut g = Graph::new();
        let [_, _, _, _, r] = exp_cos_product(&mut g).unwrap();
        let rs = reqs(&["d(V1)", "d(V2)", "d<2>(V1)", "d(V1)*d(V2)", "d<2>(V2)"]);
        let (x1, x2) = (0.8, 1.3);
        let mut ct = CalcTree::new(&g, &[r]).unwrap();
        ct.set_by_name("V1", x1).unwrap();
        ct.set_by_name("V2", x2).unwrap();
        ct.evaluate().unwrap();
        let mut bp = BackPropagator::build(&g, &[r], &rs).unwrap();
        bp.set_seed(r, 1.0).unwrap();
        bp.backpropagate(&ct).unwrap();
        let p = x1 * x2;
        let f = p.cos().exp();
        let alpha = -p.sin() * f;
        let beta = 0.5 * (p.sin().powi(2) - p.cos()) * f;
        let get = |t: &str| bp.get(&t.parse().unwrap()).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs();
        assert!(close(get("d(V1)"), alpha * x2));
        assert!(close(get("d(V2)"), alpha * x1));
        assert!(close(get("d(V1)*d(V2)"), alpha + 2.0 * beta * p));
        assert!(close(get("d<2>(V1)"), 2.0 * beta * x2 * x2));
        assert!(close(get("d<2>(V2)"), 2.0 * beta * x1 * x1));
    }

    fn run(g: &Graph, out: NodeRef, inputs: &[(&str, f64)], rs: &RequestSet) -> BackPropagator {
        let mut ct = CalcTree::new(g, &[out]).unwrap();
        for (n, v) in inputs {
            ct.set_by_name(n, *v).unwrap();
        }
        ct.evaluate().unwrap();
        let mut bp = BackPropagator::build(g, &[out], rs).unwrap();
        bp.set_seed(out, 1.0).unwrap();
        bp.backpropagate(&ct).unwrap();
        bp
    }

    #[test]
    fn identity_graph() {
        let mut g = Graph::new();
        let x = g.variable("x").unwrap();
        let rs = reqs(&["d(x)", "d<2>(x)"]);
        let bp = run(&g, x, &[("x", 4.0)], &rs);
        assert_eq!(bp.get(&"d(x)".parse().unwrap()).unwrap(), 1.0);
        assert_eq!(bp.get(&"d<2>(x)".parse().unwrap()).unwrap(), 0.0);
        assert_eq!(bp.plan().elimination_order(), vec![]);
    }

    #[test]
    fn factorial_convention() {
        for k in 1..=8 {
            let mut g = Graph::new();
            let x = g.variable("x").unwrap();
            let p = g.powi(x, k).unwrap();
            let m = MultiIndex::var("x", k as u32).unwrap();
            let rs = RequestSet::new([m.clone()]);
            let bp = run(&g, p, &[("x", 1.0)], &rs);
            let fact: f64 = (1..=k).map(f64::from).product();
            assert_eq!(bp.get(&m).unwrap(), fact);
        }
    }

    #[test]
    fn first_order_is_adjoint_mirror() {
        let mut g = Graph::new();
        let x = g.variable("x").unwrap();
        let y = g.variable("y").unwrap();
        let p = g.mul(x, y).unwrap();
        let s = g.sin(p).unwrap();
        let f = g.add(s, x).unwrap();
        let plan = make_plan(&g, &[f], &reqs(&["d(x)"])).unwrap();
        // every live monomial is a single first-order adjoint
        for set in plan.active_sets() {
            for m in set {
                assert_eq!(m.degree(), 1);
            }
        }
        assert_eq!(plan.elimination_order(), vec![f, s, p]);
        let bp = run(&g, f, &[("x", 0.5), ("y", 2.0)], &reqs(&["d(x)"]));
        let want = 2.0 * 1f64.cos() + 1.0;
        assert!((bp.get(&"d(x)".parse().unwrap()).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn unreachable_request_is_exact_zero() {
        let mut g = Graph::new();
        let x = g.variable("x").unwrap();
        g.variable("y").unwrap();
        let e = g.exp(x).unwrap();
        let rs = reqs(&["d(y)", "d(x)*d(y)", "d(x)"]);
        let bp = run(&g, e, &[("x", 0.0), ("y", 1.0)], &rs);
        assert_eq!(bp.get(&"d(y)".parse().unwrap()).unwrap(), 0.0);
        assert_eq!(bp.get(&"d(x)*d(y)".parse().unwrap()).unwrap(), 0.0);
        assert_eq!(bp.get(&"d(x)".parse().unwrap()).unwrap(), 1.0);
    }

    #[test]
    fn seeds_combine_linearly() {
        let mut g = Graph::new();
        let x = g.variable("x").unwrap();
        let f1 = g.sin(x).unwrap();
        let f2 = g.exp(x).unwrap();
        let rs = reqs(&["d(x)", "d<2>(x)"]);
        let mut ct = CalcTree::new(&g, &[f1, f2]).unwrap();
        ct.set_by_name("x", 0.7).unwrap();
        ct.evaluate().unwrap();
        let mut bp = BackPropagator::build(&g, &[f1, f2], &rs).unwrap();
        bp.set_seed(f1, 2.0).unwrap();
        bp.set_seed(f2, 3.0).unwrap();
        bp.backpropagate(&ct).unwrap();
        let a = run(&g, f1, &[("x", 0.7)], &rs);
        let b = run(&g, f2, &[("x", 0.7)], &rs);
        for m in &rs {
            let want = 2.0 * a.get(m).unwrap() + 3.0 * b.get(m).unwrap();
            assert!((bp.get(m).unwrap() - want).abs() < 1e-14 * want.abs());
        }
    }

    #[test]
    fn executor_errors() {
        let mut g = Graph::new();
        let x = g.variable("x").unwrap();
        let e = g.exp(x).unwrap();
        let rs = reqs(&["d(x)"]);
        let mut bp = BackPropagator::build(&g, &[e], &rs).unwrap();
        let mut ct = CalcTree::new(&g, &[e]).unwrap();
        ct.set_by_name("x", 1.0).unwrap();
        assert_eq!(bp.backpropagate(&ct).unwrap_err(), Error::NotEvaluated);
        ct.evaluate().unwrap();
        assert_eq!(
            bp.backpropagate(&ct).unwrap_err(),
            Error::MissingSeed(e.id())
        );
        assert_eq!(bp.set_seed(x, 1.0).unwrap_err(), Error::NotAnOutput(x.id()));
        bp.set_seed(e, 1.0).unwrap();
        let dx: MultiIndex = "d(x)".parse().unwrap();
        assert_eq!(bp.get(&dx).unwrap_err(), Error::NotBackpropagated);
        bp.backpropagate(&ct).unwrap();
        assert!(matches!(
            bp.get(&"d<2>(x)".parse().unwrap()),
            Err(Error::NotRequested(_))
        ));

        let mut other = Graph::new();
        let ox = other.variable("x").unwrap();
        let mut oct = CalcTree::new(&other, &[ox]).unwrap();
        oct.set_by_name("x", 1.0).unwrap();
        oct.evaluate().unwrap();
        assert_eq!(bp.backpropagate(&oct).unwrap_err(), Error::GraphMismatch);
    }

    #[test]
    fn plan_errors() {
        let mut g = Graph::new();
        let x = g.variable("x").unwrap();
        assert_eq!(
            make_plan(&g, &[], &reqs(&["d(x)"])).unwrap_err(),
            Error::NoOutputs
        );
        assert_eq!(
            make_plan(&g, &[x], &RequestSet::default()).unwrap_err(),
            Error::NoRequests
        );
        assert!(matches!(
            make_plan(&g, &[x], &reqs(&["d(z)"])),
            Err(Error::UnknownVariable(_))
        ));
    }

    #[test]
    fn traced_run_counts_each_node_once() {
        let mut g = Graph::new();
        let [_, _, _, _, r] = exp_cos_product(&mut g).unwrap();
        let rs = reqs(&["d(V1)", "d<3>(V2)", "d<2>(V1)*d(V2)"]);
        let mut ct = CalcTree::new(&g, &[r]).unwrap();
        ct.set_by_name("V1", 0.6).unwrap();
        ct.set_by_name("V2", 1.1).unwrap();
        ct.evaluate().unwrap();
        let mut bp = BackPropagator::build(&g, &[r], &rs).unwrap();
        bp.set_seed(r, 1.0).unwrap();
        let mut trace = BackpropTrace::default();
        bp.backpropagate_traced(&ct, &mut trace).unwrap();
        for n in bp.plan().elimination_order() {
            assert_eq!(trace.eliminations[n.index()], 1);
        }
        assert_eq!(trace.peak_live, bp.plan().buffer_size());
    }

    #[test]
    fn domain_error_names_node() {
        let mut g = Graph::new();
        let x = g.variable("x").unwrap();
        let c = g.constant(0.0).unwrap();
        let s = g.mul(x, c).unwrap();
        let q = g.sqrt(s).unwrap();
        let mut ct = CalcTree::new(&g, &[q]).unwrap();
        ct.set_by_name("x", 1.0).unwrap();
        ct.evaluate().unwrap();
        let mut bp = BackPropagator::build(&g, &[q], &reqs(&["d(x)"])).unwrap();
        bp.set_seed(q, 1.0).unwrap();
        match bp.backpropagate(&ct) {
            Err(Error::Domain { node, .. }) => assert_eq!(node, Some(q.id())),
            other => panic!("{other:?}"),
        }
    }
}
