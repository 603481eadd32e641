//! Fixtures and reference checks shared by the integration and acceptance
//! suites. Nothing here calls into the backward sweep's internals: the
//! closed forms are hand-written and the reachability audit expands
//! monomials structurally on its own.

use std::collections::{BTreeMap, HashMap, HashSet};

use adtool_core::{
    BackPropagator, CalcTree, Graph, MultiIndex, Node, NodeRef, RequestSet, StoragePlan, UnaryOp,
    VarId,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const MAX_NODES: usize = 12;

/// Cap on the rough polynomial degree of any node. Deep power towers like
/// `((x^2)^2)^3...` otherwise make central differences at the fixed step
/// size useless as a referee.
pub const MAX_DEGREE: u32 = 24;

/// A random graph with a single root and a sample point inside every
/// primitive's domain.
#[derive(Debug)]
pub struct Case {
    pub graph: Graph,
    pub root: NodeRef,
    pub inputs: HashMap<VarId, f64>,
    pub vars: Vec<VarId>,
}

const UNARY: [UnaryOp; 12] = [
    UnaryOp::Neg,
    UnaryOp::Exp,
    UnaryOp::Log,
    UnaryOp::Sqrt,
    UnaryOp::Sin,
    UnaryOp::Cos,
    UnaryOp::Tan,
    UnaryOp::Erfc,
    UnaryOp::Recip,
    UnaryOp::PowConst(-2),
    UnaryOp::PowConst(2),
    UnaryOp::PowConst(3),
];

const CONSTANTS: [f64; 4] = [0.5, 2.0, -1.5, 3.0];

fn unary_ok(op: UnaryOp, x: f64) -> bool {
    match op {
        UnaryOp::Log | UnaryOp::Sqrt => x > 0.1,
        UnaryOp::Recip | UnaryOp::PowConst(-2) => x.abs() > 0.2,
        UnaryOp::Tan => x.abs() < 1.2,
        UnaryOp::Exp => x < 2.5,
        _ => true,
    }
}

fn pick(rng: &mut ChaCha8Rng, pool: &[(NodeRef, f64)]) -> (NodeRef, f64) {
    if rng.gen_bool(0.5) {
        pool[pool.len() - 1]
    } else {
        pool[rng.gen_range(0..pool.len())]
    }
}

/// Draws one case: 1 to 4 variables in `[0.5, 1.5]`, at most
/// [`MAX_NODES`] nodes.
pub fn random_case(rng: &mut ChaCha8Rng) -> Case {
    loop {
        if let Some(case) = try_case(rng) {
            return case;
        }
    }
}

fn try_case(rng: &mut ChaCha8Rng) -> Option<Case> {
    let mut g = Graph::new();
    let nvars = rng.gen_range(1..=4);
    let mut pool = Vec::new();
    let mut inputs = HashMap::new();
    let mut vars = Vec::new();
    // rough polynomial degree per node index; bounds how steep the root can get
    let mut deg: HashMap<usize, u32> = HashMap::new();
    for i in 0..nvars {
        let name = format!("x{i}");
        let v = rng.gen_range(0.5..1.5);
        let n = g.variable(&name).unwrap();
        let id = VarId::new(&name).unwrap();
        inputs.insert(id.clone(), v);
        vars.push(id);
        deg.insert(n.index(), 1);
        pool.push((n, v));
    }
    let target = rng.gen_range((nvars + 3).min(MAX_NODES)..=MAX_NODES);
    for _ in 0..200 {
        if g.len() >= target {
            break;
        }
        let (a, va) = pick(rng, &pool);
        let made = if rng.gen_bool(0.55) {
            let op = UNARY[rng.gen_range(0..UNARY.len())];
            if !unary_ok(op, va) || g.len() + 1 > MAX_NODES {
                continue;
            }
            let d = match op {
                UnaryOp::PowConst(k) => k.unsigned_abs() * deg[&a.index()],
                _ => deg[&a.index()] + 1,
            };
            let n = g.unary(op, a).unwrap();
            deg.insert(n.index(), d);
            (n, op.apply(va))
        } else {
            let (b, vb) = if rng.gen_bool(0.15) {
                if g.len() + 2 > MAX_NODES {
                    continue;
                }
                let c = CONSTANTS[rng.gen_range(0..CONSTANTS.len())];
                let n = g.constant(c).unwrap();
                deg.insert(n.index(), 0);
                (n, c)
            } else {
                pick(rng, &pool)
            };
            let (a, b, va, vb) = if rng.gen_bool(0.5) {
                (a, b, va, vb)
            } else {
                (b, a, vb, va)
            };
            let (da, db) = (deg[&a.index()], deg[&b.index()]);
            let (n, v, d) = match rng.gen_range(0..4) {
                0 if g.len() < MAX_NODES => (g.add(a, b).unwrap(), va + vb, da.max(db)),
                1 if g.len() < MAX_NODES => (g.sub(a, b).unwrap(), va - vb, da.max(db)),
                2 if g.len() < MAX_NODES => (g.mul(a, b).unwrap(), va * vb, da + db),
                3 if vb.abs() > 0.2 && g.len() + 2 <= MAX_NODES => {
                    (g.div(a, b).unwrap(), va / vb, da + db)
                }
                _ => continue,
            };
            deg.insert(n.index(), d);
            (n, v)
        };
        if deg[&made.0.index()] > MAX_DEGREE {
            return None;
        }
        if !made.1.is_finite() || made.1.abs() > 50.0 {
            return None;
        }
        if !pool.iter().any(|p| p.0 == made.0) {
            pool.push(made);
        }
    }
    let root = pool.last().unwrap().0;
    if matches!(g.node(root).unwrap(), Node::Var(_)) {
        return None;
    }
    Some(Case {
        graph: g,
        root,
        inputs,
        vars,
    })
}

/// `count` cases from a fixed seed.
pub fn corpus(seed: u64, count: usize) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_case(&mut rng)).collect()
}

/// `|got - want| <= rel * |want|`, or `<= abs` when `|want| < small`.
pub fn close(got: f64, want: f64, rel: f64, abs: f64, small: f64) -> bool {
    if want.abs() < small {
        (got - want).abs() <= abs
    } else {
        (got - want).abs() <= rel * want.abs()
    }
}

/// Finite-difference agreement at relative `1e-4`. Derivatives that are
/// exactly zero come back from the stencil as rounding noise, so two
/// values both below `1e-8` also agree.
pub fn fd_strict(got: f64, fd: f64) -> bool {
    fd_zero(got, fd) || (got - fd).abs() <= 1e-4 * fd.abs()
}

pub fn fd_zero(got: f64, fd: f64) -> bool {
    got.abs() < 1e-8 && fd.abs() < 1e-8
}

/// [`fd_strict`], plus an absolute `1e-5` floor for small derivatives
/// where the `O(h^2)` stencil error from higher orders dominates.
pub fn fd_close(got: f64, fd: f64) -> bool {
    fd_strict(got, fd) || (got - fd).abs() <= 1e-5
}

/// Evaluates and backpropagates `root` for `requests` with seed 1,
/// returning values in request order.
pub fn run_engine(
    graph: &Graph,
    root: NodeRef,
    inputs: &HashMap<VarId, f64>,
    requests: &RequestSet,
    plan: StoragePlan,
) -> adtool_core::Result<Vec<f64>> {
    let mut ct = CalcTree::with_plan(graph, plan)?;
    for (v, x) in inputs {
        ct.set(v, *x)?;
    }
    ct.evaluate()?;
    let mut bp = BackPropagator::build(graph, &[root], requests)?;
    bp.set_seed(root, 1.0)?;
    bp.backpropagate(&ct)?;
    requests.iter().map(|m| bp.get(m)).collect()
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Closed-form Black–Scholes sensitivities of a call.
#[derive(Clone, Copy, Debug)]
pub struct Greeks {
    pub d1: f64,
    pub d2: f64,
    pub vega: f64,
    pub vanna: f64,
    pub volga: f64,
}

pub fn black_scholes_greeks(s: f64, k: f64, v: f64, t: f64, r: f64) -> Greeks {
    let tvol = v * t.sqrt();
    let d1 = ((s / k).ln() + (r + 0.5 * v * v) * t) / tvol;
    let d2 = d1 - tvol;
    Greeks {
        d1,
        d2,
        vega: s * norm_pdf(d1) * t.sqrt(),
        vanna: -norm_pdf(d1) * d2 / v,
        volga: s * norm_pdf(d1) * d1 * d2 * t / tvol,
    }
}

/// The five order-<=2 derivatives of `exp(cos(x1 x2))` from the
/// hand-expanded coefficients `alpha = f'(Q) * (-sin P)` and
/// `beta = f''/2` in `eps_P`, ordered `d(V1), d(V2), d<2>(V1),
/// d(V1)*d(V2), d<2>(V2)`.
pub fn exp_cos_derivatives(x1: f64, x2: f64) -> [f64; 5] {
    let p = x1 * x2;
    let q = p.cos();
    let e = q.exp();
    // R(P + eps) = R + alpha eps + beta eps^2
    let alpha = -e * p.sin();
    let beta = e * p.sin() * p.sin() / 2.0 - e * q / 2.0;
    [
        alpha * x2,
        alpha * x1,
        2.0 * beta * x2 * x2,
        alpha + 2.0 * beta * p,
        2.0 * beta * x1 * x1,
    ]
}

/// Structural reachability: can `eps` monomial `start` (node id ->
/// exponent) expand, through the graph below it, into one of `targets`?
///
/// Expands by the sparsity pattern of every primitive's local series,
/// ignoring numerical cancellation, so a `false` is a proof that the
/// monomial contributes nothing.
pub fn reaches(graph: &Graph, start: &BTreeMap<u32, u32>, targets: &[BTreeMap<u32, u32>]) -> bool {
    let nodes: Vec<(NodeRef, Node)> = graph.nodes().map(|(r, n)| (r, n.clone())).collect();
    let max_degree = targets
        .iter()
        .map(|t| t.values().sum::<u32>())
        .max()
        .unwrap_or(0);
    let targets: HashSet<Vec<(u32, u32)>> = targets
        .iter()
        .map(|t| t.iter().map(|(a, b)| (*a, *b)).collect())
        .collect();
    let is_var = |id: u32| matches!(nodes[id as usize].1, Node::Var(_));

    let mut frontier: HashSet<Vec<(u32, u32)>> = HashSet::new();
    frontier.insert(start.iter().map(|(a, b)| (*a, *b)).collect());
    loop {
        let next = frontier
            .iter()
            .flat_map(|m| m.iter().map(|f| f.0))
            .filter(|&id| !is_var(id))
            .max();
        let Some(w) = next else {
            return frontier.iter().any(|m| targets.contains(m));
        };
        let mut out = HashSet::new();
        for m in &frontier {
            let Some(pos) = m.iter().position(|f| f.0 == w) else {
                out.insert(m.clone());
                continue;
            };
            let a = m[pos].1;
            let mut rest: BTreeMap<u32, u32> = m.iter().copied().collect();
            rest.remove(&w);
            let rest_deg: u32 = rest.values().sum();
            let mut emit = |parts: &[(NodeRef, u32)]| {
                let mut t = rest.clone();
                for &(n, e) in parts {
                    if e == 0 {
                        continue;
                    }
                    if matches!(nodes[n.index()].1, Node::Const(_)) {
                        return;
                    }
                    *t.entry(n.id()).or_insert(0) += e;
                }
                if t.values().sum::<u32>() <= max_degree {
                    out.insert(t.into_iter().collect());
                }
            };
            match nodes[w as usize].1 {
                Node::Unary(UnaryOp::Neg, c) => emit(&[(c, a)]),
                Node::Unary(_, c) => {
                    for j in a..=max_degree.saturating_sub(rest_deg).max(a) {
                        emit(&[(c, j)]);
                    }
                }
                Node::Binary(adtool_core::BinaryOp::Mul, l, r) => {
                    for k in 0..=a {
                        for i in 0..=a - k {
                            emit(&[(l, i + k), (r, a - k - i + k)]);
                        }
                    }
                }
                Node::Binary(_, l, r) => {
                    for i in 0..=a {
                        emit(&[(l, i), (r, a - i)]);
                    }
                }
                // a constant's perturbation is zero
                Node::Const(_) => {}
                Node::Var(_) => unreachable!(),
            }
        }
        frontier = out;
    }
}

/// Request multi-indices as `var node id -> order` maps.
pub fn request_targets(graph: &Graph, requests: &RequestSet) -> Vec<BTreeMap<u32, u32>> {
    requests
        .iter()
        .filter_map(|m: &MultiIndex| {
            m.entries()
                .iter()
                .map(|(v, k)| graph.var_node_by_id(v).map(|n| (n.id(), *k)))
                .collect()
        })
        .collect()
}
