//! Ready-made graphs used by tests, examples and the benchmark driver.

use crate::error::Result;
use crate::graph::{Graph, NodeRef};

/// Black–Scholes call price with intermediates exposed.
#[derive(Clone, Copy, Debug)]
pub struct BlackScholes {
    pub s: NodeRef,
    pub k: NodeRef,
    pub v: NodeRef,
    pub t: NodeRef,
    pub r: NodeRef,
    pub tvol: NodeRef,
    pub d1: NodeRef,
    pub d2: NodeRef,
    pub price: NodeRef,
}

/// Default evaluation point `(S, K, V, T, R)`.
pub const BLACK_SCHOLES_POINT: [(&str, f64); 5] = [
    ("S", 100.0),
    ("K", 102.0),
    ("V", 0.15),
    ("T", 0.5),
    ("R", 0.01),
];

impl BlackScholes {
    pub fn build(g: &mut Graph) -> Result<Self> {
        let s = g.variable("S")?;
        let k = g.variable("K")?;
        let v = g.variable("V")?;
        let t = g.variable("T")?;
        let r = g.variable("R")?;

        let sqrt_t = g.sqrt(t)?;
        let tvol = g.mul(v, sqrt_t)?;
        let moneyness = g.div(s, k)?;
        let log_m = g.log(moneyness)?;
        let half = g.constant(0.5)?;
        let half_v = g.mul(half, v)?;
        let half_vv = g.mul(half_v, v)?;
        let drift = g.add(r, half_vv)?;
        let drift_t = g.mul(drift, t)?;
        let num = g.add(log_m, drift_t)?;
        let d1 = g.div(num, tvol)?;
        let d2 = g.sub(d1, tvol)?;

        let n1 = g.cdf_n(d1)?;
        let n2 = g.cdf_n(d2)?;
        let rt = g.mul(r, t)?;
        let neg_rt = g.neg(rt)?;
        let disc = g.exp(neg_rt)?;
        let call = g.mul(s, n1)?;
        let kn2 = g.mul(k, n2)?;
        let put_leg = g.mul(kn2, disc)?;
        let price = g.sub(call, put_leg)?;
        Ok(BlackScholes {
            s,
            k,
            v,
            t,
            r,
            tvol,
            d1,
            d2,
            price,
        })
    }
}

/// `exp(cos(V1 * V2))`, returning `(V1, V2, product, cos, exp)`.
pub fn exp_cos_product(g: &mut Graph) -> Result<[NodeRef; 5]> {
    let v1 = g.variable("V1")?;
    let v2 = g.variable("V2")?;
    let p = g.mul(v1, v2)?;
    let c = g.cos(p)?;
    let e = g.exp(c)?;
    Ok([v1, v2, p, c, e])
}
