//! Hash-consed computation DAG.
//!
//! Every node is interned on construction, so structurally identical
//! subexpressions share one [`NodeRef`]. Children always have smaller ids
//! than their parents, which makes the id order a valid topological order.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

/// `-1/sqrt(2)`, the argument scale of the normal CDF written via `erfc`.
pub const M_ONE_OVER_SQRT2: f64 = -std::f64::consts::FRAC_1_SQRT_2;
/// `1/sqrt(2*pi)`, the normal density at zero.
pub const ONE_OVER_SQRT_2PI: f64 = 0.39894228040143265;

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Name of an input variable.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VarId(Arc<str>);

impl VarId {
    pub fn new(name: &str) -> Result<Self> {
        if is_identifier(name) {
            Ok(VarId(Arc::from(name)))
        } else {
            Err(Error::InvalidName(name.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeRef {
    graph: u32,
    index: u32,
}

impl NodeRef {
    #[inline]
    pub fn index(self) -> usize {
        self.index as usize
    }

    #[inline]
    pub fn id(self) -> u32 {
        self.index
    }
}

impl fmt::Debug for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    Tan,
    Erfc,
    Recip,
    /// Integer power; exponents 0 and 1 are canonicalized away.
    PowConst(i32),
}

impl UnaryOp {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Sin => x.sin(),
            UnaryOp::Cos => x.cos(),
            UnaryOp::Tan => x.tan(),
            UnaryOp::Erfc => libm::erfc(x),
            UnaryOp::Recip => 1.0 / x,
            UnaryOp::PowConst(n) => x.powi(n),
        }
    }

    pub fn name(self) -> String {
        match self {
            UnaryOp::Neg => "neg".into(),
            UnaryOp::Exp => "exp".into(),
            UnaryOp::Log => "log".into(),
            UnaryOp::Sqrt => "sqrt".into(),
            UnaryOp::Sin => "sin".into(),
            UnaryOp::Cos => "cos".into(),
            UnaryOp::Tan => "tan".into(),
            UnaryOp::Erfc => "erfc".into(),
            UnaryOp::Recip => "recip".into(),
            UnaryOp::PowConst(n) => format!("pow{n}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Var(VarId),
    Const(f64),
    Unary(UnaryOp, NodeRef),
    Binary(BinaryOp, NodeRef, NodeRef),
}

impl Node {
    pub fn children(&self) -> impl Iterator<Item = NodeRef> {
        let (a, b) = match *self {
            Node::Var(_) | Node::Const(_) => (None, None),
            Node::Unary(_, c) => (Some(c), None),
            Node::Binary(_, l, r) => (Some(l), Some(r)),
        };
        a.into_iter().chain(b)
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Node::Var(_) | Node::Const(_))
    }

    pub fn op_name(&self) -> String {
        match self {
            Node::Var(v) => format!("var {v}"),
            Node::Const(c) => format!("const {c}"),
            Node::Unary(op, _) => op.name(),
            Node::Binary(op, _, _) => op.name().to_string(),
        }
    }
}

/// Interning key: constants compare by bit pattern.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
enum Key {
    Var(VarId),
    Const(u64),
    Unary(UnaryOp, u32),
    Binary(BinaryOp, u32, u32),
}

/// Append-only, hash-consed expression DAG.
#[derive(Debug)]
pub struct Graph {
    id: u32,
    nodes: Vec<Node>,
    intern: HashMap<Key, u32>,
    /// Sorted variable ordinals each node depends on.
    supports: Vec<Box<[u32]>>,
    vars: Vec<(VarId, NodeRef)>,
    var_lookup: HashMap<VarId, u32>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            intern: HashMap::new(),
            supports: Vec::new(),
            vars: Vec::new(),
            var_lookup: HashMap::new(),
        }
    }

    #[inline]
    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Checks that `n` was issued by this graph.
    pub fn check(&self, n: NodeRef) -> Result<()> {
        if n.graph == self.id && n.index() < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::ForeignNode { index: n.index })
        }
    }

    pub fn node(&self, n: NodeRef) -> Result<&Node> {
        self.check(n)?;
        Ok(&self.nodes[n.index()])
    }

    /// Unchecked access for handles already validated by the caller.
    #[inline]
    pub(crate) fn get(&self, n: NodeRef) -> &Node {
        &self.nodes[n.index()]
    }

    #[inline]
    pub(crate) fn node_ref(&self, index: usize) -> NodeRef {
        NodeRef {
            graph: self.id,
            index: index as u32,
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeRef, &Node)> {
        self.nodes
            .iter()
            .enumerate()
            .map(move |(i, n)| (self.node_ref(i), n))
    }

    fn insert(&mut self, key: Key, node: Node) -> NodeRef {
        if let Some(&i) = self.intern.get(&key) {
            return self.node_ref(i as usize);
        }
        let index = self.nodes.len() as u32;
        let support: Box<[u32]> = match &node {
            Node::Var(_) => Box::new([self.vars.len() as u32]),
            Node::Const(_) => Box::new([]),
            Node::Unary(_, c) => self.supports[c.index()].clone(),
            Node::Binary(_, l, r) => {
                merge_sorted(&self.supports[l.index()], &self.supports[r.index()])
            }
        };
        if let Node::Var(v) = &node {
            self.var_lookup.insert(v.clone(), self.vars.len() as u32);
            self.vars.push((v.clone(), self.node_ref(index as usize)));
        }
        self.nodes.push(node);
        self.supports.push(support);
        self.intern.insert(key, index);
        self.node_ref(index as usize)
    }

    /// Registers (or looks up) the input variable `name`.
    pub fn variable(&mut self, name: &str) -> Result<NodeRef> {
        let v = VarId::new(name)?;
        Ok(self.insert(Key::Var(v.clone()), Node::Var(v)))
    }

    pub fn constant(&mut self, value: f64) -> Result<NodeRef> {
        if !value.is_finite() {
            return Err(Error::NonFiniteConstant(value));
        }
        Ok(self.insert(Key::Const(value.to_bits()), Node::Const(value)))
    }

    pub fn unary(&mut self, op: UnaryOp, x: NodeRef) -> Result<NodeRef> {
        self.check(x)?;
        match op {
            UnaryOp::PowConst(0) => self.constant(1.0),
            UnaryOp::PowConst(1) => Ok(x),
            _ => Ok(self.insert(Key::Unary(op, x.index), Node::Unary(op, x))),
        }
    }

    pub fn binary(&mut self, op: BinaryOp, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.insert(Key::Binary(op, a.index, b.index), Node::Binary(op, a, b)))
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// `a / b`, stored as `a * recip(b)`.
    pub fn div(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.check(a)?;
        let r = self.unary(UnaryOp::Recip, b)?;
        self.mul(a, r)
    }

    pub fn neg(&mut self, x: NodeRef) -> Result<NodeRef> {
        self.unary(UnaryOp::Neg, x)
    }

    pub fn exp(&mut self, x: NodeRef) -> Result<NodeRef> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn log(&mut self, x: NodeRef) -> Result<NodeRef> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn sqrt(&mut self, x: NodeRef) -> Result<NodeRef> {
        self.unary(UnaryOp::Sqrt, x)
    }

    pub fn sin(&mut self, x: NodeRef) -> Result<NodeRef> {
        self.unary(UnaryOp::Sin, x)
    }

    pub fn cos(&mut self, x: NodeRef) -> Result<NodeRef> {
        self.unary(UnaryOp::Cos, x)
    }

    pub fn tan(&mut self, x: NodeRef) -> Result<NodeRef> {
        self.unary(UnaryOp::Tan, x)
    }

    pub fn erfc(&mut self, x: NodeRef) -> Result<NodeRef> {
        self.unary(UnaryOp::Erfc, x)
    }

    pub fn recip(&mut self, x: NodeRef) -> Result<NodeRef> {
        self.unary(UnaryOp::Recip, x)
    }

    pub fn powi(&mut self, x: NodeRef, n: i32) -> Result<NodeRef> {
        self.unary(UnaryOp::PowConst(n), x)
    }

    /// Standard normal CDF, expanded to `0.5 * erfc(x * -1/sqrt(2))`.
    pub fn cdf_n(&mut self, x: NodeRef) -> Result<NodeRef> {
        let half = self.constant(0.5)?;
        let scale = self.constant(M_ONE_OVER_SQRT2)?;
        let arg = self.mul(x, scale)?;
        let e = self.erfc(arg)?;
        self.mul(half, e)
    }

    /// Standard normal density, expanded to `c * exp(-0.5 * x * x)`.
    pub fn pdf_n(&mut self, x: NodeRef) -> Result<NodeRef> {
        let c = self.constant(ONE_OVER_SQRT_2PI)?;
        let m_half = self.constant(-0.5)?;
        let hx = self.mul(m_half, x)?;
        let sq = self.mul(hx, x)?;
        let e = self.exp(sq)?;
        self.mul(c, e)
    }

    /// Node of a registered variable.
    pub fn var_node(&self, name: &str) -> Option<NodeRef> {
        let v = VarId::new(name).ok()?;
        self.var_lookup.get(&v).map(|&o| self.vars[o as usize].1)
    }

    pub fn var_node_by_id(&self, v: &VarId) -> Option<NodeRef> {
        self.var_lookup.get(v).map(|&o| self.vars[o as usize].1)
    }

    /// Variables in registration order.
    pub fn variables(&self) -> impl Iterator<Item = (&VarId, NodeRef)> {
        self.vars.iter().map(|(v, n)| (v, *n))
    }

    pub fn var_count(&self) -> usize {
        self.vars.len()
    }

    pub(crate) fn var_ordinal(&self, v: &VarId) -> Option<u32> {
        self.var_lookup.get(v).copied()
    }

    pub(crate) fn var_by_ordinal(&self, ord: u32) -> (&VarId, NodeRef) {
        let (v, n) = &self.vars[ord as usize];
        (v, *n)
    }

    /// Variable ordinals the node depends on, sorted.
    #[inline]
    pub(crate) fn support_ords(&self, n: NodeRef) -> &[u32] {
        &self.supports[n.index()]
    }

    /// Exact set of input variables reachable from `n`.
    pub fn input_support(&self, n: NodeRef) -> Result<BTreeSet<VarId>> {
        self.check(n)?;
        Ok(self.supports[n.index()]
            .iter()
            .map(|&o| self.vars[o as usize].0.clone())
            .collect())
    }

    /// Every node reachable from `roots`, children before parents, ties
    /// broken by node id.
    pub fn topo_order(&self, roots: &[NodeRef]) -> Result<Vec<NodeRef>> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = Vec::new();
        for &r in roots {
            self.check(r)?;
            stack.push(r.index());
        }
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut seen[i], true) {
                continue;
            }
            stack.extend(self.nodes[i].children().map(NodeRef::index));
        }
        // ids are already a topological order
        Ok(seen
            .iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(i, _)| self.node_ref(i))
            .collect())
    }

    /// Plain forward evaluation, used by the oracles.
    pub fn evaluate(&self, roots: &[NodeRef], inputs: &HashMap<VarId, f64>) -> Result<Vec<f64>> {
        let order = self.topo_order(roots)?;
        let mut values = vec![f64::NAN; self.nodes.len()];
        let mut missing = Vec::new();
        for &n in &order {
            let v = match self.get(n) {
                Node::Var(name) => match inputs.get(name) {
                    Some(&v) => v,
                    None => {
                        missing.push(name.to_string());
                        continue;
                    }
                },
                Node::Const(c) => *c,
                Node::Unary(op, c) => op.apply(values[c.index()]),
                Node::Binary(op, l, r) => op.apply(values[l.index()], values[r.index()]),
            };
            values[n.index()] = v;
        }
        if !missing.is_empty() {
            return Err(Error::MissingInputs(missing));
        }
        Ok(roots.iter().map(|r| values[r.index()]).collect())
    }
}

fn merge_sorted(a: &[u32], b: &[u32]) -> Box<[u32]> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out.into_boxed_slice()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variable_registration_is_idempotent() {
        let mut g = Graph::new();
        let s1 = g.variable("S").unwrap();
        let s2 = g.variable("S").unwrap();
        let k = g.variable("K").unwrap();
        assert_eq!(s1, s2);
        assert_ne!(s1, k);
        assert_eq!(g.var_count(), 2);
    }

    #[test]
    fn malformed_names_are_rejected() {
        let mut g = Graph::new();
        assert_eq!(g.variable("2bad"), Err(Error::InvalidName("2bad".into())));
        assert!(g.variable("").is_err());
        assert!(g.variable("a-b").is_err());
        assert!(g.variable("_ok9").is_ok());
        // case sensitive
        assert_ne!(g.variable("s").unwrap(), g.variable("S").unwrap());
    }

    #[test]
    fn constants_intern_by_bits() {
        let mut g = Graph::new();
        assert_eq!(g.constant(0.5).unwrap(), g.constant(0.5).unwrap());
        assert_ne!(g.constant(0.0).unwrap(), g.constant(-0.0).unwrap());
        let c = g.constant(-std::f64::consts::FRAC_1_SQRT_2).unwrap();
        assert_eq!(g.node(c).unwrap(), &Node::Const(M_ONE_OVER_SQRT2));
        assert!(matches!(
            g.constant(f64::NAN),
            Err(Error::NonFiniteConstant(_))
        ));
        assert!(g.constant(f64::INFINITY).is_err());
    }

    #[test]
    fn structural_sharing() {
        let mut g = Graph::new();
        let v = g.variable("V").unwrap();
        let t = g.variable("T").unwrap();
        let a = {
            let s = g.sqrt(t).unwrap();
            g.mul(v, s).unwrap()
        };
        let len = g.len();
        let b = {
            let s = g.sqrt(t).unwrap();
            g.mul(v, s).unwrap()
        };
        assert_eq!(a, b);
        assert_eq!(g.len(), len);
    }

    #[test]
    fn division_becomes_reciprocal_product() {
        let mut g = Graph::new();
        let s = g.variable("S").unwrap();
        let k = g.variable("K").unwrap();
        let q = g.div(s, k).unwrap();
        let Node::Binary(BinaryOp::Mul, l, r) = *g.node(q).unwrap() else {
            panic!("expected mul");
        };
        assert_eq!(l, s);
        assert_eq!(g.node(r).unwrap(), &Node::Unary(UnaryOp::Recip, k));
    }

    #[test]
    fn pow_canonicalization() {
        let mut g = Graph::new();
        let x = g.variable("x").unwrap();
        assert_eq!(g.powi(x, 1).unwrap(), x);
        let one = g.powi(x, 0).unwrap();
        assert_eq!(g.node(one).unwrap(), &Node::Const(1.0));
        let sq = g.powi(x, 2).unwrap();
        assert_eq!(g.node(sq).unwrap(), &Node::Unary(UnaryOp::PowConst(2), x));
    }

    #[test]
    fn foreign_nodes_are_rejected() {
        let mut g = Graph::new();
        let mut h = Graph::new();
        let x = h.variable("x").unwrap();
        assert!(matches!(g.exp(x), Err(Error::ForeignNode { .. })));
        assert!(g.input_support(x).is_err());
    }

    #[test]
    fn supports() {
        let mut g = Graph::new();
        let half = g.constant(0.5).unwrap();
        assert!(g.input_support(half).unwrap().is_empty());
        let v1 = g.variable("V1").unwrap();
        let v2 = g.variable("V2").unwrap();
        let p = g.mul(v1, v2).unwrap();
        let names: Vec<_> = g.input_support(p).unwrap().into_iter().collect();
        assert_eq!(
            names,
            vec![VarId::new("V1").unwrap(), VarId::new("V2").unwrap()]
        );
    }

    #[test]
    fn topo_order_of_worked_example() {
        let mut g = Graph::new();
        let v1 = g.variable("V1").unwrap();
        let v2 = g.variable("V2").unwrap();
        let p = g.mul(v1, v2).unwrap();
        let q = g.cos(p).unwrap();
        let r = g.exp(q).unwrap();
        assert_eq!(g.topo_order(&[v1]).unwrap(), vec![v1]);
        assert_eq!(g.topo_order(&[r]).unwrap(), vec![v1, v2, p, q, r]);
    }
}
