//! Local Taylor expansions of the primitives.
//!
//! A univariate node `y = f(x)` contributes the perturbation series
//! `eps_y = sum_{k>=1} c_k eps_x^k` with `c_k = f^(k)(x) / k!`. The
//! bivariate primitives have exact finite expansions: `mul(u, v)` gives
//! `v eps_u + u eps_v + eps_u eps_v`, `add` and `sub` are linear.

use std::sync::OnceLock;

use crate::calc_tree::{storage_class, CalcTree};
use crate::error::{Error, Result};
use crate::graph::{BinaryOp, Node, NodeRef, UnaryOp};
use crate::request::MAX_ORDER_CAP;

const TWO_OVER_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// Taylor coefficients `c_1..c_N` of a univariate perturbation series.
#[derive(Clone, Debug, PartialEq)]
pub struct UnivariateCoeffs {
    coeffs: Vec<f64>,
}

impl UnivariateCoeffs {
    pub fn order(&self) -> usize {
        self.coeffs.len()
    }

    /// `c_k` for `1 <= k <= order`.
    pub fn get(&self, k: usize) -> f64 {
        self.coeffs[k - 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coeffs
    }
}

/// Coefficients of `op` at a point, given the stored value its storage
/// class calls for (the input for log/erfc/sin/..., the output for
/// exp/sqrt/tan).
pub fn univariate_coeffs(op: UnaryOp, stored: f64, order: usize) -> Result<UnivariateCoeffs> {
    if order == 0 || order > MAX_ORDER_CAP as usize {
        return Err(Error::OrderCap {
            order: order as u32,
            cap: MAX_ORDER_CAP,
        });
    }
    let mut buf = vec![0.0; order + 1];
    fill_coeffs(op, stored, &mut buf)?;
    buf.remove(0);
    Ok(UnivariateCoeffs { coeffs: buf })
}

/// Writes `c_k` into `out[k]` for `k in 1..out.len()`; `out[0]` is set to 0.
pub(crate) fn fill_coeffs(op: UnaryOp, stored: f64, out: &mut [f64]) -> Result<()> {
    let n = out.len() - 1;
    let domain = || Error::Domain {
        op: op.name(),
        point: stored,
        node: None,
    };
    if !stored.is_finite() {
        return Err(domain());
    }
    out[0] = 0.0;
    match op {
        UnaryOp::Neg => {
            out[1..].fill(0.0);
            out[1] = -1.0;
        }
        UnaryOp::Exp => {
            let mut c = stored;
            for (k, o) in out.iter_mut().enumerate().skip(1) {
                c /= k as f64;
                *o = c;
            }
        }
        UnaryOp::Log => {
            if stored <= 0.0 {
                return Err(domain());
            }
            let inv = 1.0 / stored;
            let mut p = 1.0;
            for (k, o) in out.iter_mut().enumerate().skip(1) {
                p *= -inv;
                *o = -p / k as f64;
            }
        }
        UnaryOp::Recip => {
            if stored == 0.0 {
                return Err(domain());
            }
            let inv = 1.0 / stored;
            let mut p = inv;
            for o in out.iter_mut().skip(1) {
                p *= -inv;
                *o = p;
            }
        }
        UnaryOp::Sqrt => {
            // stored is the output y = sqrt(x)
            if stored <= 0.0 {
                return Err(domain());
            }
            let inv_x = 1.0 / (stored * stored);
            let mut binom = 1.0;
            let mut p = stored;
            for (k, o) in out.iter_mut().enumerate().skip(1) {
                binom *= (0.5 - (k - 1) as f64) / k as f64;
                p *= inv_x;
                *o = binom * p;
            }
        }
        UnaryOp::Sin | UnaryOp::Cos => {
            let (s, c) = stored.sin_cos();
            // derivative cycles, starting at f' for k = 1
            let cycle = if op == UnaryOp::Sin {
                [c, -s, -c, s]
            } else {
                [-s, -c, s, c]
            };
            let mut fact = 1.0;
            for (k, o) in out.iter_mut().enumerate().skip(1) {
                fact *= k as f64;
                *o = cycle[(k - 1) % 4] / fact;
            }
        }
        UnaryOp::Tan => {
            // stored is the output y = tan(x); t' = 1 + t^2 on the series
            let mut t = [0.0; MAX_ORDER_CAP as usize + 1];
            t[0] = stored;
            for k in 0..n {
                let mut acc = if k == 0 { 1.0 } else { 0.0 };
                for j in 0..=k {
                    acc += t[j] * t[k - j];
                }
                t[k + 1] = acc / (k + 1) as f64;
            }
            out[1..].copy_from_slice(&t[1..=n]);
        }
        UnaryOp::Erfc => {
            let polys = erfc_polys();
            let g = -TWO_OVER_SQRT_PI * (-stored * stored).exp();
            let mut fact = 1.0;
            for (k, o) in out.iter_mut().enumerate().skip(1) {
                fact *= k as f64;
                let p = polys[k - 1]
                    .iter()
                    .rev()
                    .fold(0.0, |acc, &a| acc * stored + a as f64);
                *o = g * p / fact;
            }
        }
        UnaryOp::PowConst(m) => {
            if stored == 0.0 && m < 0 {
                return Err(domain());
            }
            let m = m as f64;
            let mut binom = 1.0;
            for (k, o) in out.iter_mut().enumerate().skip(1) {
                binom *= (m - (k - 1) as f64) / k as f64;
                *o = if binom == 0.0 {
                    0.0
                } else {
                    binom * stored.powi((m as i32) - k as i32)
                };
            }
        }
    }
    Ok(())
}

/// `p_j` with `d^{j+1}/dx^{j+1} erfc(x) = -(2/sqrt(pi)) p_j(x) exp(-x^2)`,
/// coefficients in ascending powers.
fn erfc_polys() -> &'static [Vec<i128>] {
    static POLYS: OnceLock<Vec<Vec<i128>>> = OnceLock::new();
    POLYS.get_or_init(|| {
        let mut polys: Vec<Vec<i128>> = vec![vec![1]];
        for j in 0..MAX_ORDER_CAP as usize {
            let p = &polys[j];
            // p' - 2x p
            let mut next = vec![0i128; p.len() + 1];
            for (i, &a) in p.iter().enumerate() {
                if i > 0 {
                    next[i - 1] += a * i as i128;
                }
                next[i + 1] -= 2 * a;
            }
            polys.push(next);
        }
        polys
    })
}

/// Monomial over the operand perturbations of one node.
pub type LocalMonomial = Vec<(NodeRef, u32)>;

/// The perturbation of a node expressed in its operands' perturbations.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalExpansion {
    pub terms: Vec<(LocalMonomial, f64)>,
}

/// Builds the local expansion of `node` from the values held by `ct`.
pub fn local_expansion(ct: &CalcTree<'_>, node: NodeRef, order: usize) -> Result<LocalExpansion> {
    let graph = ct.graph();
    let terms = match *graph.node(node)? {
        Node::Var(_) | Node::Const(_) => Vec::new(),
        Node::Unary(op, child) => {
            let src = if storage_class(op).needs_output {
                node
            } else {
                child
            };
            let c = univariate_coeffs(op, ct.value(src)?, order)?;
            (1..=order)
                .map(|k| (vec![(child, k as u32)], c.get(k)))
                .collect()
        }
        Node::Binary(BinaryOp::Add, l, r) => vec![(vec![(l, 1)], 1.0), (vec![(r, 1)], 1.0)],
        Node::Binary(BinaryOp::Sub, l, r) => vec![(vec![(l, 1)], 1.0), (vec![(r, 1)], -1.0)],
        Node::Binary(BinaryOp::Mul, l, r) => vec![
            (vec![(l, 1)], ct.value(r)?),
            (vec![(r, 1)], ct.value(l)?),
            (vec![(l, 1), (r, 1)], 1.0),
        ],
    };
    Ok(LocalExpansion { terms })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300) || (a - b).abs() < 1e-300
    }

    #[test]
    fn exp_at_zero_is_taylor_not_raw_derivatives() {
        let c = univariate_coeffs(UnaryOp::Exp, 1.0, 3).unwrap();
        assert_eq!(c.as_slice(), &[1.0, 0.5, 1.0 / 6.0]);
    }

    #[test]
    fn log_closed_form() {
        let c = univariate_coeffs(UnaryOp::Log, 2.0, 2).unwrap();
        assert_eq!(c.as_slice(), &[0.5, -0.125]);
    }

    #[test]
    fn recip_at_one() {
        let c = univariate_coeffs(UnaryOp::Recip, 1.0, 3).unwrap();
        assert_eq!(c.as_slice(), &[-1.0, 1.0, -1.0]);
    }

    #[test]
    fn erfc_at_zero() {
        let c = univariate_coeffs(UnaryOp::Erfc, 0.0, 2).unwrap();
        assert!(close(c.get(1), -TWO_OVER_SQRT_PI, 1e-15));
        assert_eq!(c.get(2), 0.0);
        // central difference cross-check
        let h = 1e-5;
        let fd = (libm::erfc(h) - libm::erfc(-h)) / (2.0 * h);
        assert!(close(c.get(1), fd, 1e-8));
    }

    #[test]
    fn erfc_polynomials_are_signed_hermite() {
        let p = erfc_polys();
        assert_eq!(p[1], vec![0, -2]);
        assert_eq!(p[2], vec![-2, 0, 4]);
        assert_eq!(p[3], vec![0, 12, 0, -8]);
    }

    #[test]
    fn cos_at_zero() {
        let c = univariate_coeffs(UnaryOp::Cos, 0.0, 2).unwrap();
        assert_eq!(c.get(1), 0.0);
        assert_eq!(c.get(2), -0.5);
    }

    #[test]
    fn tan_at_zero_matches_series() {
        // tan x = x + x^3/3 + 2x^5/15
        let c = univariate_coeffs(UnaryOp::Tan, 0.0, 5).unwrap();
        assert!(close(c.get(1), 1.0, 1e-15));
        assert_eq!(c.get(2), 0.0);
        assert!(close(c.get(3), 1.0 / 3.0, 1e-15));
        assert_eq!(c.get(4), 0.0);
        assert!(close(c.get(5), 2.0 / 15.0, 1e-15));
    }

    #[test]
    fn sqrt_from_output() {
        // sqrt(4 + e) = 2 + e/4 - e^2/64 + ...
        let c = univariate_coeffs(UnaryOp::Sqrt, 2.0, 2).unwrap();
        assert_eq!(c.as_slice(), &[0.25, -1.0 / 64.0]);
    }

    #[test]
    fn pow_const_terminates() {
        let c = univariate_coeffs(UnaryOp::PowConst(3), 2.0, 5).unwrap();
        assert_eq!(c.as_slice(), &[12.0, 6.0, 1.0, 0.0, 0.0]);
        let c = univariate_coeffs(UnaryOp::PowConst(2), 0.0, 3).unwrap();
        assert_eq!(c.as_slice(), &[0.0, 1.0, 0.0]);
        let c = univariate_coeffs(UnaryOp::PowConst(-1), 2.0, 2).unwrap();
        assert_eq!(c.as_slice(), &[-0.25, 0.125]);
    }

    #[test]
    fn neg_is_linear() {
        let c = univariate_coeffs(UnaryOp::Neg, 3.0, 3).unwrap();
        assert_eq!(c.as_slice(), &[-1.0, 0.0, 0.0]);
    }

    #[test]
    fn domain_errors() {
        for (op, x) in [
            (UnaryOp::Log, 0.0),
            (UnaryOp::Log, -1.0),
            (UnaryOp::Recip, 0.0),
            (UnaryOp::Sqrt, 0.0),
            (UnaryOp::PowConst(-2), 0.0),
            (UnaryOp::Exp, f64::NAN),
        ] {
            assert!(
                matches!(univariate_coeffs(op, x, 2), Err(Error::Domain { .. })),
                "{op:?} at {x}"
            );
        }
    }

    #[test]
    fn order_bounds() {
        assert!(univariate_coeffs(UnaryOp::Exp, 1.0, 0).is_err());
        assert!(univariate_coeffs(UnaryOp::Exp, 1.0, MAX_ORDER_CAP as usize + 1).is_err());
    }
}
