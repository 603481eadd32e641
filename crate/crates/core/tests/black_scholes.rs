use std::collections::{BTreeMap, HashMap};

use adtool_core::fixtures::{BlackScholes, BLACK_SCHOLES_POINT};
use adtool_core::oracle::{finite_difference, jet_eval};
use adtool_core::{
    contribution_filter, enumerate_full_tensor, BackPropagator, BackpropTrace, CalcTree, Graph,
    MultiIndex, RequestSet, StoragePlan, VarId,
};
use adtool_testkit::{black_scholes_greeks, close, reaches, request_targets, run_engine};

fn setup() -> (Graph, BlackScholes, HashMap<VarId, f64>) {
    let mut g = Graph::new();
    let bs = BlackScholes::build(&mut g).unwrap();
    let inputs = BLACK_SCHOLES_POINT
        .iter()
        .map(|(n, v)| (VarId::new(n).unwrap(), *v))
        .collect();
    (g, bs, inputs)
}

fn reqs(list: &[&str]) -> RequestSet {
    RequestSet::new(list.iter().map(|r| r.parse::<MultiIndex>().unwrap()))
}

fn vars(names: &[&str]) -> Vec<VarId> {
    names.iter().map(|n| VarId::new(n).unwrap()).collect()
}

#[test]
fn greeks_match_closed_forms() {
    let (g, bs, inputs) = setup();
    let rs = reqs(&["d(V)", "d<2>(V)", "d(V)*d(S)"]);
    let plan = StoragePlan::for_requests(&g, &[bs.price], &rs).unwrap();
    let got = run_engine(&g, bs.price, &inputs, &rs, plan).unwrap();
    let want = black_scholes_greeks(100.0, 102.0, 0.15, 0.5, 0.01);
    assert!(
        close(got[0], want.vega, 1e-9, 0.0, 0.0),
        "{} {}",
        got[0],
        want.vega
    );
    assert!(
        close(got[1], want.volga, 1e-9, 0.0, 0.0),
        "{} {}",
        got[1],
        want.volga
    );
    assert!(
        close(got[2], want.vanna, 1e-9, 0.0, 0.0),
        "{} {}",
        got[2],
        want.vanna
    );
}

#[test]
fn shared_d1_node() {
    let (g, bs, _) = setup();
    assert_ne!(bs.d1, bs.d2);
    let topo = g.topo_order(&[bs.price]).unwrap();
    assert!(topo.contains(&bs.d1));
    // d1 feeds both cdf_n(d1) and d2
    let users = g
        .nodes()
        .filter(|(_, n)| n.children().any(|c| c == bs.d1))
        .count();
    assert_eq!(users, 2);
}

#[test]
fn jet_vega_and_fd_delta() {
    let (g, bs, inputs) = setup();
    let jet = &jet_eval(&g, &[bs.price], &inputs, &vars(&["S", "V"]), 2).unwrap()[0];
    let want = black_scholes_greeks(100.0, 102.0, 0.15, 0.5, 0.01);
    assert!(close(
        jet.derivative(&MultiIndex::var("V", 1).unwrap()),
        want.vega,
        1e-9,
        0.0,
        0.0
    ));
    let ds = MultiIndex::var("S", 1).unwrap();
    let fd = finite_difference(&g, bs.price, &inputs, &ds, None).unwrap();
    assert!(close(fd, jet.derivative(&ds), 1e-5, 0.0, 0.0));
}

#[test]
fn full_order_five_tensor_in_one_pass() {
    let (g, bs, inputs) = setup();
    let active = vars(&["S", "V", "T", "R"]);
    let rs = RequestSet::new(enumerate_full_tensor(&active, 5).unwrap());
    assert_eq!(rs.len(), 125);
    let mut ct = CalcTree::new(&g, &[bs.price]).unwrap();
    for (v, x) in &inputs {
        ct.set(v, *x).unwrap();
    }
    ct.evaluate().unwrap();
    let mut bp = BackPropagator::build(&g, &[bs.price], &rs).unwrap();
    bp.set_seed(bs.price, 1.0).unwrap();
    let mut trace = BackpropTrace::default();
    bp.backpropagate_traced(&ct, &mut trace).unwrap();
    let order = bp.plan().elimination_order();
    for (i, &count) in trace.eliminations.iter().enumerate() {
        let expected = u32::from(order.iter().any(|n| n.index() == i));
        assert_eq!(count, expected, "node #{i}");
    }
    assert_eq!(trace.peak_live, bp.plan().buffer_size());

    let jet = &jet_eval(&g, &[bs.price], &inputs, &active, 5).unwrap()[0];
    for m in &rs {
        let want = jet.derivative(m);
        assert!(close(bp.get(m).unwrap(), want, 1e-8, 1e-10, 1e-6), "{m}");
    }
}

#[test]
fn passive_strike_changes_nothing() {
    let (g, bs, inputs) = setup();
    let with_k = reqs(&["d(S)", "d<2>(S)", "d(V)", "d(K)", "d(K)*d(S)"]);
    let without = reqs(&["d(S)", "d<2>(S)", "d(V)"]);
    let a = run_engine(
        &g,
        bs.price,
        &inputs,
        &with_k,
        StoragePlan::for_requests(&g, &[bs.price], &with_k).unwrap(),
    )
    .unwrap();
    let b = run_engine(
        &g,
        bs.price,
        &inputs,
        &without,
        StoragePlan::for_requests(&g, &[bs.price], &without).unwrap(),
    )
    .unwrap();
    for (i, m) in without.iter().enumerate() {
        let j = with_k.iter().position(|x| x == m).unwrap();
        assert_eq!(a[j].to_bits(), b[i].to_bits(), "{m}");
    }

    let plan = adtool_core::make_plan(&g, &[bs.price], &without).unwrap();
    for set in plan.active_sets() {
        for m in set {
            assert_eq!(m.exponent(bs.k), 0);
        }
    }
}

#[test]
fn selective_request_audit() {
    let (g, bs, _) = setup();
    let rs = reqs(&["d<2>(V)*d(S)"]);
    let plan = adtool_core::make_plan(&g, &[bs.price], &rs).unwrap();
    for set in plan.active_sets() {
        for m in set {
            assert!(contribution_filter(&g, m, &rs).unwrap(), "{m:?}");
        }
    }
    let targets = request_targets(&g, &rs);
    let mut dropped = 0;
    for step in plan.dropped() {
        for m in step {
            let start: BTreeMap<u32, u32> = m.factors().collect();
            assert!(
                !reaches(&g, &start, &targets),
                "dropped {m:?} can reach a request"
            );
            dropped += 1;
        }
    }
    assert!(dropped > 0);
}
