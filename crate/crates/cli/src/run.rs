//! The `eval`, `tensor` and `bench` commands, independent of argument
//! parsing so tests can drive them directly.

use std::collections::{BTreeMap, HashMap};
use std::hint::black_box;
use std::time::Instant;

use adtool_core::{
    enumerate_full_tensor, full_tensor_size, BackPropagator, CalcTree, Error, MultiIndex, NodeRef,
    RequestSet, StoragePlan, VarId,
};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::parse::{ParseError, Program};
use crate::report::{BenchRow, DerivativeRow, Report};

pub const DEFAULT_RNG_SEED: u64 = 0x5eed_ad70;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("parse error: {0}")]
    Parse(#[from] ParseError),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    MissingInput(String),
    #[error("{0}")]
    Domain(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) | CliError::Usage(_) => 2,
            CliError::MissingInput(_) => 3,
            CliError::Domain(_) => 4,
            CliError::Io(_) | CliError::Internal(_) => 1,
        }
    }

    fn from_core(e: Error, program: &Program) -> CliError {
        match e {
            Error::MissingInputs(_) => CliError::MissingInput(e.to_string()),
            Error::Domain { op, point, node } => CliError::Domain(match node {
                Some(n) => format!(
                    "{op} is not differentiable at {point} ({})",
                    program.describe(n)
                ),
                None => format!("{op} is not differentiable at {point}"),
            }),
            Error::NonFiniteValue { node, op, inputs } => CliError::Domain(format!(
                "{op} of {inputs:?} is not finite ({})",
                program.describe(node)
            )),
            Error::RequestSyntax { .. }
            | Error::ZeroOrder
            | Error::OrderCap { .. }
            | Error::UnknownVariable(_)
            | Error::InvalidName(_)
            | Error::Overflow
            | Error::NoOutputs => CliError::Usage(e.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// `NAME=VALUE`.
pub fn parse_assignment(s: &str) -> std::result::Result<(String, f64), String> {
    let (name, value) = s
        .split_once('=')
        .ok_or_else(|| format!("expected NAME=VALUE, got `{s}`"))?;
    let v: f64 = value
        .trim()
        .parse()
        .map_err(|_| format!("`{value}` is not a number"))?;
    Ok((name.trim().to_string(), v))
}

/// `S=90:110,V=0.1:0.2`.
pub fn parse_ranges(s: &str) -> std::result::Result<Vec<(String, f64, f64)>, String> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|part| {
            let (name, range) = part
                .split_once('=')
                .ok_or_else(|| format!("expected NAME=LO:HI, got `{part}`"))?;
            let (lo, hi) = range
                .split_once(':')
                .ok_or_else(|| format!("expected LO:HI, got `{range}`"))?;
            let lo: f64 = lo
                .trim()
                .parse()
                .map_err(|_| format!("`{lo}` is not a number"))?;
            let hi: f64 = hi
                .trim()
                .parse()
                .map_err(|_| format!("`{hi}` is not a number"))?;
            if lo >= hi || !lo.is_finite() || !hi.is_finite() {
                return Err(format!("empty range {lo}:{hi} for `{name}`"));
            }
            Ok((name.trim().to_string(), lo, hi))
        })
        .collect()
}

/// `0..5` (inclusive), `2..=4`, or a comma list.
pub fn parse_orders(s: &str) -> std::result::Result<Vec<u32>, String> {
    let bad = || format!("expected orders like 0..5 or 0,1,3, got `{s}`");
    let mut orders: Vec<u32> = if let Some((lo, hi)) = s.split_once("..") {
        let hi = hi.strip_prefix('=').unwrap_or(hi);
        let lo: u32 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u32 = hi.trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        (lo..=hi).collect()
    } else {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|_| bad()))
            .collect::<std::result::Result<_, _>>()?
    };
    orders.sort_unstable();
    orders.dedup();
    Ok(orders)
}

/// Output statements and their seeds.
///
/// With explicit seeds the seeded statements are the outputs. Without,
/// the program must have exactly one sink statement, seeded with 1.
pub fn resolve_outputs(
    program: &Program,
    seeds: &[(String, f64)],
) -> Result<Vec<(String, NodeRef, f64)>> {
    if seeds.is_empty() {
        let sinks = program.sinks();
        if sinks.len() != 1 {
            let names: Vec<String> = sinks.into_iter().map(|s| s.0).collect();
            return Err(CliError::Usage(format!(
                "several outputs ({}); choose with --seed NAME=VALUE",
                names.join(", ")
            )));
        }
        let (name, node) = sinks.into_iter().next().unwrap();
        return Ok(vec![(name, node, 1.0)]);
    }
    let mut out: Vec<(String, NodeRef, f64)> = Vec::new();
    for (name, s) in seeds {
        let node = program
            .node(name)
            .ok_or_else(|| CliError::Usage(format!("no statement named `{name}`")))?;
        match out.iter_mut().find(|o| o.0 == *name) {
            Some(o) => o.2 = *s,
            None => out.push((name.clone(), node, *s)),
        }
    }
    Ok(out)
}

fn input_map(program: &Program, set: &[(String, f64)]) -> Result<HashMap<VarId, f64>> {
    let mut map = HashMap::new();
    for (name, v) in set {
        if program.graph.var_node(name).is_none() {
            return Err(CliError::Usage(format!(
                "`{name}` is not an input variable"
            )));
        }
        map.insert(
            VarId::new(name).map_err(|e| CliError::Usage(e.to_string()))?,
            *v,
        );
    }
    Ok(map)
}

fn parse_requests(requests: &[String]) -> Result<RequestSet> {
    let mut set = RequestSet::default();
    for r in requests {
        let m: MultiIndex = r
            .parse()
            .map_err(|e: Error| CliError::Usage(format!("request `{r}`: {e}")))?;
        set.insert(m);
    }
    Ok(set)
}

/// Evaluates the outputs and the seed-weighted derivatives in `requests`.
fn differentiate(
    program: &Program,
    outputs: &[(String, NodeRef, f64)],
    inputs: &HashMap<VarId, f64>,
    requests: &RequestSet,
) -> Result<Report> {
    let core = |e| CliError::from_core(e, program);
    let g = &program.graph;
    let nodes: Vec<NodeRef> = outputs.iter().map(|o| o.1).collect();
    let plan = if requests.is_empty() {
        StoragePlan::minimal(g, &nodes, 1)
    } else {
        StoragePlan::for_requests(g, &nodes, requests)
    }
    .map_err(core)?;
    let mut ct = CalcTree::with_plan(g, plan).map_err(core)?;
    for (v, x) in inputs {
        ct.set(v, *x).map_err(core)?;
    }
    ct.evaluate().map_err(core)?;
    let mut report = Report::default();
    for (name, node, _) in outputs {
        report
            .primal
            .insert(name.clone(), ct.get(*node).map_err(core)?);
    }
    if requests.is_empty() {
        return Ok(report);
    }
    let mut bp = BackPropagator::build(g, &nodes, requests).map_err(core)?;
    for (_, node, s) in outputs {
        bp.set_seed(*node, *s).map_err(core)?;
    }
    bp.backpropagate(&ct).map_err(core)?;
    for m in requests {
        report.derivatives.push(DerivativeRow {
            request: m.to_string(),
            value: bp.get(m).map_err(core)?,
        });
    }
    Ok(report)
}

pub fn eval(
    program: &Program,
    set: &[(String, f64)],
    requests: &[String],
    seeds: &[(String, f64)],
) -> Result<Report> {
    let outputs = resolve_outputs(program, seeds)?;
    let inputs = input_map(program, set)?;
    let requests = parse_requests(requests)?;
    differentiate(program, &outputs, &inputs, &requests)
}

fn active_vars(program: &Program, vars: Option<&[String]>) -> Result<Vec<VarId>> {
    match vars {
        None => Ok(program.graph.variables().map(|(v, _)| v.clone()).collect()),
        Some(names) => {
            let mut out: Vec<VarId> = Vec::new();
            for n in names {
                let Some(node) = program.graph.var_node(n) else {
                    return Err(CliError::Usage(format!("`{n}` is not an input variable")));
                };
                let (v, _) = program
                    .graph
                    .variables()
                    .find(|(_, r)| *r == node)
                    .expect("registered variable");
                if !out.contains(v) {
                    out.push(v.clone());
                }
            }
            Ok(out)
        }
    }
}

/// Every derivative of total order `1..=order` in `vars`, in one sweep.
pub fn tensor(
    program: &Program,
    set: &[(String, f64)],
    order: u32,
    vars: Option<&[String]>,
    seeds: &[(String, f64)],
) -> Result<Report> {
    let outputs = resolve_outputs(program, seeds)?;
    let inputs = input_map(program, set)?;
    let vars = active_vars(program, vars)?;
    let requests = if order == 0 {
        RequestSet::default()
    } else {
        RequestSet::new(
            enumerate_full_tensor(&vars, order).map_err(|e| CliError::from_core(e, program))?,
        )
    };
    differentiate(program, &outputs, &inputs, &requests)
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub orders: Vec<u32>,
    pub reps: usize,
    pub ranges: Vec<(String, f64, f64)>,
    pub vars: Option<Vec<String>>,
    pub rng_seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            orders: (0..=5).collect(),
            reps: 1000,
            ranges: Vec::new(),
            vars: None,
            rng_seed: DEFAULT_RNG_SEED,
        }
    }
}

const BATCHES: usize = 10;

/// Median over batches of the mean time per repetition, in nanoseconds.
fn time_reps<F>(reps: usize, mut f: F) -> Result<f64>
where
    F: FnMut(usize) -> Result<()>,
{
    // warm-up outside the clock
    f(0)?;
    let batches = reps.min(BATCHES);
    let mut means = Vec::with_capacity(batches);
    let mut next = 1;
    for b in 0..batches {
        let n = reps / batches + usize::from(b < reps % batches);
        let start = Instant::now();
        for _ in 0..n {
            f(next)?;
            next += 1;
        }
        means.push(start.elapsed().as_nanos() as f64 / n as f64);
    }
    means.sort_by(f64::total_cmp);
    let mid = means.len() / 2;
    Ok(if means.len() % 2 == 1 {
        means[mid]
    } else {
        0.5 * (means[mid - 1] + means[mid])
    })
}

/// Times primal evaluation and each full-tensor order.
pub fn bench(
    program: &Program,
    set: &[(String, f64)],
    seeds: &[(String, f64)],
    opts: &BenchOptions,
) -> Result<Report> {
    if opts.reps == 0 {
        return Err(CliError::Usage("--reps must be at least 1".into()));
    }
    let core = |e| CliError::from_core(e, program);
    let g = &program.graph;
    let outputs = resolve_outputs(program, seeds)?;
    let nodes: Vec<NodeRef> = outputs.iter().map(|o| o.1).collect();
    let vars = active_vars(program, opts.vars.as_deref())?;

    let mut base = input_map(program, set)?;
    let mut ranged: Vec<(VarId, Uniform<f64>)> = Vec::new();
    for (name, lo, hi) in &opts.ranges {
        let v = input_map(program, &[(name.clone(), 0.5 * (lo + hi))])?
            .into_keys()
            .next()
            .expect("one entry");
        base.entry(v.clone()).or_insert(0.5 * (lo + hi));
        ranged.push((v, Uniform::new(*lo, *hi)));
    }
    let mut report = differentiate(program, &outputs, &base, &RequestSet::default())?;

    let var_ids: Vec<VarId> = g.variables().map(|(v, _)| v.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.rng_seed);
    // reps + 1 draws: the first feeds the warm-up run
    let draws: Vec<Vec<f64>> = (0..=opts.reps)
        .map(|_| {
            let mut point = base.clone();
            for (v, dist) in &ranged {
                point.insert(v.clone(), dist.sample(&mut rng));
            }
            var_ids
                .iter()
                .map(|v| point.get(v).copied().unwrap_or(f64::NAN))
                .collect()
        })
        .collect();
    if let Some(missing) = var_ids.iter().find(|v| !base.contains_key(*v)) {
        return Err(CliError::MissingInput(format!(
            "missing value for input variable {missing}"
        )));
    }

    let mut means: BTreeMap<u32, f64> = BTreeMap::new();
    let mut wanted = opts.orders.clone();
    if !wanted.contains(&0) {
        wanted.insert(0, 0);
    }
    for &d in &wanted {
        let mean = if d == 0 {
            let mut ct = CalcTree::new(g, &nodes).map_err(core)?;
            time_reps(opts.reps, |i| {
                for (v, x) in var_ids.iter().zip(&draws[i]) {
                    ct.set(v, *x).map_err(core)?;
                }
                ct.evaluate().map_err(core)?;
                for n in &nodes {
                    black_box(ct.get(*n).map_err(core)?);
                }
                Ok(())
            })?
        } else {
            let requests = RequestSet::new(enumerate_full_tensor(&vars, d).map_err(core)?);
            let plan = StoragePlan::for_requests(g, &nodes, &requests).map_err(core)?;
            let mut ct = CalcTree::with_plan(g, plan).map_err(core)?;
            let mut bp = BackPropagator::build(g, &nodes, &requests).map_err(core)?;
            for (_, node, s) in &outputs {
                bp.set_seed(*node, *s).map_err(core)?;
            }
            time_reps(opts.reps, |i| {
                for (v, x) in var_ids.iter().zip(&draws[i]) {
                    ct.set(v, *x).map_err(core)?;
                }
                ct.evaluate().map_err(core)?;
                bp.backpropagate(&ct).map_err(core)?;
                black_box(bp.results().map_err(core)?);
                Ok(())
            })?
        };
        means.insert(d, mean);
    }

    let primal = means[&0];
    for &d in &opts.orders {
        let mean = means[&d];
        report.bench.push(BenchRow {
            order: d,
            outputs: full_tensor_size(vars.len() as u64, u64::from(d)).map_err(core)?,
            mean_ns: mean,
            r: if d == 0 { 1.0 } else { mean / primal },
            rr: d
                .checked_sub(1)
                .and_then(|p| means.get(&p))
                .map(|prev| mean / prev),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignments_and_ranges() {
        assert_eq!(parse_assignment("S=100").unwrap(), ("S".into(), 100.0));
        assert_eq!(parse_assignment(" V = 0.15").unwrap(), ("V".into(), 0.15));
        assert!(parse_assignment("S").is_err());
        assert!(parse_assignment("S=abc").is_err());
        let r = parse_ranges("S=90:110,V=0.1:0.2").unwrap();
        assert_eq!(r, vec![("S".into(), 90.0, 110.0), ("V".into(), 0.1, 0.2)]);
        assert!(parse_ranges("S=2:1").is_err());
        assert!(parse_ranges("S=1").is_err());
    }

    #[test]
    fn order_lists() {
        assert_eq!(parse_orders("0..5").unwrap(), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(parse_orders("1..=2").unwrap(), vec![1, 2]);
        assert_eq!(parse_orders("3,0,3").unwrap(), vec![0, 3]);
        assert!(parse_orders("5..1").is_err());
        assert!(parse_orders("x").is_err());
    }

    #[test]
    fn outputs_follow_seeds_or_single_sink() {
        let p = crate::parse::parse("a = x * y; b = a + 1; c = sin(a);").unwrap();
        assert!(matches!(resolve_outputs(&p, &[]), Err(CliError::Usage(_))));
        let o = resolve_outputs(&p, &[("c".into(), 2.0), ("a".into(), 1.0)]).unwrap();
        assert_eq!(
            o.iter().map(|x| x.0.as_str()).collect::<Vec<_>>(),
            ["c", "a"]
        );
        assert!(resolve_outputs(&p, &[("z".into(), 1.0)]).is_err());
        let q = crate::parse::parse("a = x * y; b = a + 1;").unwrap();
        assert_eq!(resolve_outputs(&q, &[]).unwrap()[0].0, "b");
    }

    #[test]
    fn median_of_batch_means() {
        let mut calls = 0;
        time_reps(25, |_| {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 26);
    }
}
