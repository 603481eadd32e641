use std::collections::BTreeMap;

use adtool_core::{
    contribution_filter, enumerate_full_tensor, make_plan, Graph, Monomial, RequestSet,
};
use adtool_testkit::{corpus, reaches, request_targets};

fn audit(g: &Graph, root: adtool_core::NodeRef, rs: &RequestSet) {
    let plan = make_plan(g, &[root], rs).unwrap();
    for set in plan.active_sets() {
        for m in set {
            assert!(contribution_filter(g, m, rs).unwrap(), "{m:?}");
        }
    }
    let targets = request_targets(g, rs);
    for step in plan.dropped() {
        for m in step {
            let start: BTreeMap<u32, u32> = m.factors().collect();
            assert!(!reaches(g, &start, &targets), "dropped {m:?}\n{g:?}");
        }
    }
}

#[test]
fn mixed_third_order_skips_its_mirror() {
    let mut g = Graph::new();
    let x1 = g.variable("x1").unwrap();
    let x2 = g.variable("x2").unwrap();
    let s = g.sin(x1).unwrap();
    let a = g.mul(s, x2).unwrap();
    let b = g.mul(x1, x2).unwrap();
    let c = g.add(a, b).unwrap();
    let f = g.exp(c).unwrap();
    let rs: RequestSet = RequestSet::new(["d<2>(x1)*d(x2)".parse().unwrap()]);
    let plan = make_plan(&g, &[f], &rs).unwrap();
    for set in plan.active_sets() {
        for m in set {
            assert!(m.exponent(x2) <= 1, "{m:?}");
        }
    }
    assert_eq!(
        plan.active_sets().last().unwrap(),
        &vec![Monomial::new(&[(x1, 2), (x2, 1)])]
    );
    audit(&g, f, &rs);
}

#[test]
fn corpus_audit() {
    for case in corpus(17, 60) {
        let all = enumerate_full_tensor(&case.vars, 3).unwrap();
        // one mixed request plus the full tensor
        let single = RequestSet::new(all.iter().rev().take(1).cloned());
        audit(&case.graph, case.root, &single);
        audit(&case.graph, case.root, &RequestSet::new(all));
    }
}
