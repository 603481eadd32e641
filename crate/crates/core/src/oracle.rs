//! Reference derivatives computed by routes that share nothing with the
//! backward sweep: forward propagation of truncated multivariate Taylor
//! polynomials (jets), and central finite differences.

use std::collections::HashMap;
use std::sync::Arc;

use crate::calc_tree::storage_class;
use crate::error::{Error, Result};
use crate::graph::{Graph, Node, NodeRef, UnaryOp, VarId};
use crate::kernels::univariate_coeffs;
use crate::request::MultiIndex;

/// Monomial basis of truncated polynomials in `vars` up to total degree
/// `order`, with a precomputed product table.
#[derive(Debug)]
pub struct JetSpace {
    vars: Vec<VarId>,
    order: u32,
    exps: Vec<Vec<u32>>,
    index: HashMap<Vec<u32>, usize>,
    // (i, j, k): basis_i * basis_j = basis_k
    products: Vec<(u32, u32, u32)>,
}

impl JetSpace {
    pub fn new(vars: &[VarId], order: u32) -> Arc<Self> {
        let mut exps = vec![vec![0; vars.len()]];
        for d in 1..=order {
            let mut cur = vec![0; vars.len()];
            push_degree(&mut exps, &mut cur, 0, d);
        }
        let index: HashMap<Vec<u32>, usize> = exps
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), i))
            .collect();
        let mut products = Vec::new();
        for (i, a) in exps.iter().enumerate() {
            for (j, b) in exps.iter().enumerate() {
                let sum: Vec<u32> = a.iter().zip(b).map(|(x, y)| x + y).collect();
                if let Some(&k) = index.get(&sum) {
                    products.push((i as u32, j as u32, k as u32));
                }
            }
        }
        Arc::new(JetSpace {
            vars: vars.to_vec(),
            order,
            exps,
            index,
            products,
        })
    }

    pub fn vars(&self) -> &[VarId] {
        &self.vars
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.exps.len()
    }

    fn position(&self, m: &MultiIndex) -> Option<usize> {
        let mut e = vec![0; self.vars.len()];
        for (v, k) in m.entries() {
            let i = self.vars.iter().position(|x| x == v)?;
            e[i] = *k;
        }
        self.index.get(&e).copied()
    }
}

fn push_degree(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, pos: usize, left: u32) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    if cur.is_empty() {
        return;
    }
    for k in (0..=left).rev() {
        cur[pos] = k;
        push_degree(out, cur, pos + 1, left - k);
    }
    cur[pos] = 0;
}

/// Truncated multivariate Taylor polynomial.
#[derive(Clone, Debug)]
pub struct Jet {
    space: Arc<JetSpace>,
    coeffs: Vec<f64>,
}

impl Jet {
    pub fn constant(space: &Arc<JetSpace>, value: f64) -> Jet {
        let mut coeffs = vec![0.0; space.dim()];
        coeffs[0] = value;
        Jet {
            space: Arc::clone(space),
            coeffs,
        }
    }

    /// The jet of perturbation variable `var` at `value`.
    pub fn lift(space: &Arc<JetSpace>, var: &VarId, value: f64) -> Result<Jet> {
        let i = space
            .vars
            .iter()
            .position(|v| v == var)
            .ok_or_else(|| Error::UnknownVariable(var.to_string()))?;
        let mut jet = Jet::constant(space, value);
        if space.order > 0 {
            let mut e = vec![0; space.vars.len()];
            e[i] = 1;
            jet.coeffs[space.index[&e]] = 1.0;
        }
        Ok(jet)
    }

    fn same_space(&self, other: &Jet) -> Result<()> {
        if Arc::ptr_eq(&self.space, &other.space) {
            Ok(())
        } else {
            Err(Error::JetMismatch)
        }
    }

    pub fn value(&self) -> f64 {
        self.coeffs[0]
    }

    /// Taylor coefficient of `m`, zero outside the space.
    pub fn coeff(&self, m: &MultiIndex) -> f64 {
        self.space.position(m).map_or(0.0, |i| self.coeffs[i])
    }

    /// `coeff(m) * prod M(x)!`.
    pub fn derivative(&self, m: &MultiIndex) -> f64 {
        self.coeff(m) * m.factorial_product()
    }

    pub fn add(&self, other: &Jet) -> Result<Jet> {
        self.same_space(other)?;
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Jet {
            space: Arc::clone(&self.space),
            coeffs,
        })
    }

    pub fn sub(&self, other: &Jet) -> Result<Jet> {
        self.same_space(other)?;
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Jet {
            space: Arc::clone(&self.space),
            coeffs,
        })
    }

    pub fn mul(&self, other: &Jet) -> Result<Jet> {
        self.same_space(other)?;
        let mut coeffs = vec![0.0; self.coeffs.len()];
        for &(i, j, k) in &self.space.products {
            coeffs[k as usize] += self.coeffs[i as usize] * other.coeffs[j as usize];
        }
        Ok(Jet {
            space: Arc::clone(&self.space),
            coeffs,
        })
    }

    fn scale(&self, s: f64) -> Jet {
        Jet {
            space: Arc::clone(&self.space),
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    /// `f(a0 + h) = f(a0) + sum_k c_k h^k`, evaluated by Horner's rule.
    pub fn compose_univariate(&self, op: UnaryOp) -> Result<Jet> {
        let a0 = self.value();
        let f0 = op.apply(a0);
        let order = self.space.order as usize;
        let mut out = Jet::constant(&self.space, f0);
        if order == 0 {
            return Ok(out);
        }
        let stored = if storage_class(op).needs_output {
            f0
        } else {
            a0
        };
        let c = univariate_coeffs(op, stored, order)?;
        let mut h = self.clone();
        h.coeffs[0] = 0.0;
        let mut acc = Jet::constant(&self.space, c.get(order));
        for k in (1..order).rev() {
            acc = acc.mul(&h)?;
            acc.coeffs[0] += c.get(k);
        }
        acc = acc.mul(&h)?;
        for (o, a) in out.coeffs.iter_mut().zip(&acc.coeffs).skip(1) {
            *o = *a;
        }
        Ok(out)
    }
}

/// Forward jet propagation of `roots` in the perturbation variables `vars`
/// up to total order `order`.
pub fn jet_eval(
    graph: &Graph,
    roots: &[NodeRef],
    inputs: &HashMap<VarId, f64>,
    vars: &[VarId],
    order: u32,
) -> Result<Vec<Jet>> {
    let space = JetSpace::new(vars, order);
    let topo = graph.topo_order(roots)?;
    let missing: Vec<String> = topo
        .iter()
        .filter_map(|&n| match graph.get(n) {
            Node::Var(v) if !inputs.contains_key(v) => Some(v.to_string()),
            _ => None,
        })
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingInputs(missing));
    }
    let mut jets: HashMap<NodeRef, Jet> = HashMap::with_capacity(topo.len());
    for &n in &topo {
        let jet = match graph.node(n)? {
            Node::Var(v) => match inputs.get(v) {
                // inputs outside the perturbation set are held fixed
                Some(&x) if vars.contains(v) => Jet::lift(&space, v, x)?,
                Some(&x) => Jet::constant(&space, x),
                None => unreachable!("inputs checked above"),
            },
            Node::Const(c) => Jet::constant(&space, *c),
            Node::Unary(UnaryOp::Neg, c) => jets[c].scale(-1.0),
            Node::Unary(op, c) => jets[c].compose_univariate(*op).map_err(|e| match e {
                Error::Domain { op, point, .. } => Error::Domain {
                    op,
                    point,
                    node: Some(n.id()),
                },
                other => other,
            })?,
            Node::Binary(op, l, r) => {
                let (a, b) = (&jets[l], &jets[r]);
                match op {
                    crate::graph::BinaryOp::Add => a.add(b)?,
                    crate::graph::BinaryOp::Sub => a.sub(b)?,
                    crate::graph::BinaryOp::Mul => a.mul(b)?,
                }
            }
        };
        jets.insert(n, jet);
    }
    Ok(roots.iter().map(|r| jets[r].clone()).collect())
}

// (offset, weight) pairs of central stencils for orders 1..=3
fn stencil(k: u32) -> &'static [(i32, f64)] {
    match k {
        1 => &[(-1, -0.5), (1, 0.5)],
        2 => &[(-1, 1.0), (0, -2.0), (1, 1.0)],
        3 => &[(-2, -0.5), (-1, 1.0), (1, -1.0), (2, 0.5)],
        _ => panic!("finite-difference stencils stop at order 3"),
    }
}

/// Default relative step for a derivative of total order `order`.
pub fn fd_step(order: u32) -> f64 {
    match order {
        1 => 1e-4,
        2 => 1e-3,
        _ => 5e-3,
    }
}

/// Central finite-difference estimate of the mixed partial `m` of `root`.
///
/// Uses a tensor product of per-variable stencils with step
/// `h_x = base * max(1, |x|)`. Supports per-variable orders up to 3.
pub fn finite_difference(
    graph: &Graph,
    root: NodeRef,
    inputs: &HashMap<VarId, f64>,
    m: &MultiIndex,
    base: Option<f64>,
) -> Result<f64> {
    let base = base.unwrap_or_else(|| fd_step(m.total_order()));
    // (variable, step, stencil offsets and weights)
    type Axis<'a> = (VarId, f64, &'a [(i32, f64)]);
    let axes: Vec<Axis> = m
        .entries()
        .iter()
        .map(|(v, k)| {
            let x = inputs
                .get(v)
                .copied()
                .ok_or_else(|| Error::MissingInputs(vec![v.to_string()]))?;
            Ok((v.clone(), base * x.abs().max(1.0), stencil(*k)))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut idx = vec![0usize; axes.len()];
    let mut point = inputs.clone();
    loop {
        let mut w = 1.0;
        for (a, &i) in axes.iter().zip(&idx) {
            let (off, wt) = a.2[i];
            w *= wt;
            point.insert(a.0.clone(), inputs[&a.0] + f64::from(off) * a.1);
        }
        total += w * graph.evaluate(&[root], &point)?[0];
        let mut d = 0;
        loop {
            if d == axes.len() {
                let denom: f64 = axes
                    .iter()
                    .zip(m.entries())
                    .map(|(a, (_, k))| a.1.powi(*k as i32))
                    .product();
                return Ok(total / denom);
            }
            idx[d] += 1;
            if idx[d] < axes[d].2.len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(pairs: &[(&str, f64)]) -> HashMap<VarId, f64> {
        pairs
            .iter()
            .map(|(n, v)| (VarId::new(n).unwrap(), *v))
            .collect()
    }

    #[test]
    fn basis_is_graded() {
        let vars = [VarId::new("a").unwrap(), VarId::new("b").unwrap()];
        let space = JetSpace::new(&vars, 3);
        assert_eq!(space.dim(), 10);
        assert_eq!(space.exps[1], vec![1, 0]);
        assert_eq!(space.exps[3], vec![2, 0]);
        assert_eq!(space.exps[9], vec![0, 3]);
    }

    #[test]
    fn jet_of_product_of_exponentials() {
        let mut g = Graph::new();
        let x = g.variable("x").unwrap();
        let y = g.variable("y").unwrap();
        let p = g.mul(x, y).unwrap();
        let e = g.exp(p).unwrap();
        let vals = inputs(&[("x", 0.3), ("y", 0.7)]);
        let vars: Vec<VarId> = g.variables().map(|(v, _)| v.clone()).collect();
        let jet = &jet_eval(&g, &[e], &vals, &vars, 3).unwrap()[0];
        let f = (0.21f64).exp();
        let m = MultiIndex::from_orders([(vars[0].clone(), 1), (vars[1].clone(), 1)]).unwrap();
        // d/dx d/dy exp(xy) = exp(xy)(1 + xy)
        assert!((jet.derivative(&m) - f * 1.21).abs() < 1e-14);
        let m = MultiIndex::from_orders([(vars[0].clone(), 2), (vars[1].clone(), 1)]).unwrap();
        // d2/dx2 d/dy = exp(xy) y (2 + xy)
        assert!((jet.derivative(&m) - f * 0.7 * 2.21).abs() < 1e-13);
    }

    #[test]
    fn lift_and_constant() {
        let x = VarId::new("x").unwrap();
        let space = JetSpace::new(std::slice::from_ref(&x), 2);
        let j = Jet::lift(&space, &x, 3.0).unwrap();
        assert_eq!(j.coeffs, vec![3.0, 1.0, 0.0]);
        assert_eq!(Jet::constant(&space, 0.5).coeffs, vec![0.5, 0.0, 0.0]);
        let y = VarId::new("y").unwrap();
        assert!(matches!(
            Jet::lift(&space, &y, 1.0),
            Err(Error::UnknownVariable(_))
        ));
    }

    #[test]
    fn product_of_lifts() {
        let (x, y) = (VarId::new("x").unwrap(), VarId::new("y").unwrap());
        let space = JetSpace::new(&[x.clone(), y.clone()], 2);
        let p = Jet::lift(&space, &x, 2.0)
            .unwrap()
            .mul(&Jet::lift(&space, &y, 3.0).unwrap())
            .unwrap();
        assert_eq!(p.value(), 6.0);
        assert_eq!(p.coeff(&MultiIndex::var("x", 1).unwrap()), 3.0);
        assert_eq!(p.coeff(&MultiIndex::var("y", 1).unwrap()), 2.0);
        assert_eq!(p.coeff(&"d(x)*d(y)".parse().unwrap()), 1.0);
        assert_eq!(p.coeff(&MultiIndex::var("x", 2).unwrap()), 0.0);
    }

    #[test]
    fn exp_cos_product_against_hand_derivatives() {
        let mut g = Graph::new();
        let [_, _, _, _, r] = crate::fixtures::exp_cos_product(&mut g).unwrap();
        let vals = inputs(&[("V1", 1.0), ("V2", 1.0)]);
        let vars: Vec<VarId> = g.variables().map(|(v, _)| v.clone()).collect();
        let jet = &jet_eval(&g, &[r], &vals, &vars, 2).unwrap()[0];
        // f = exp(cos p), p = xy: f_p = -sin p f, f_pp = (sin^2 p - cos p) f
        let (s, c) = (1f64.sin(), 1f64.cos());
        let f = c.exp();
        let fp = -s * f;
        let fpp = (s * s - c) * f;
        let d = |t: &str| jet.derivative(&t.parse().unwrap());
        assert!((d("d(V1)") - fp).abs() < 1e-12);
        assert!((d("d<2>(V1)") - fpp).abs() < 1e-12);
        assert!((d("d(V1)*d(V2)") - (fpp + fp)).abs() < 1e-12);
    }

    #[test]
    fn negation_and_constants() {
        let mut g = Graph::new();
        let x = g.variable("x").unwrap();
        let s = g.sin(x).unwrap();
        let n = g.neg(s).unwrap();
        let c = g.constant(2.5).unwrap();
        let vals = inputs(&[("x", 0.3)]);
        let vars = [VarId::new("x").unwrap()];
        let jets = jet_eval(&g, &[s, n, c], &vals, &vars, 3).unwrap();
        for (a, b) in jets[0].coeffs.iter().zip(&jets[1].coeffs) {
            assert_eq!(*a, -*b);
        }
        assert_eq!(jets[2].coeffs, vec![2.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn jets_from_different_spaces_do_not_mix() {
        let v = [VarId::new("x").unwrap()];
        let a = Jet::constant(&JetSpace::new(&v, 2), 1.0);
        let b = Jet::constant(&JetSpace::new(&v, 2), 1.0);
        assert_eq!(a.add(&b).unwrap_err(), Error::JetMismatch);
    }

    #[test]
    fn finite_difference_third_order() {
        let mut g = Graph::new();
        let x = g.variable("x").unwrap();
        let s = g.sin(x).unwrap();
        let vals = inputs(&[("x", 0.4)]);
        let m = MultiIndex::var("x", 3).unwrap();
        let fd = finite_difference(&g, s, &vals, &m, None).unwrap();
        assert!((fd + 0.4f64.cos()).abs() < 1e-4);
    }

    #[test]
    fn finite_difference_mixed() {
        let mut g = Graph::new();
        let x = g.variable("x").unwrap();
        let y = g.variable("y").unwrap();
        let p = g.mul(x, y).unwrap();
        let q = g.mul(p, x).unwrap();
        let vals = inputs(&[("x", 1.5), ("y", -2.0)]);
        let m =
            MultiIndex::from_orders([(VarId::new("x").unwrap(), 2), (VarId::new("y").unwrap(), 1)])
                .unwrap();
        let fd = finite_difference(&g, q, &vals, &m, None).unwrap();
        assert!((fd - 2.0).abs() < 1e-6);
    }
}
