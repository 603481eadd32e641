//! Derivative selectors: `d(x)`, `d<2>(x)`, products thereof, and the
//! counting combinatorics of full derivative tensors.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::graph::{is_identifier, VarId};

pub const DEFAULT_ORDER_CAP: u32 = 16;
/// Hard ceiling for [`set_order_cap`]; the erfc kernel tables are sized for it.
pub const MAX_ORDER_CAP: u32 = 32;

static ORDER_CAP: AtomicU32 = AtomicU32::new(DEFAULT_ORDER_CAP);

/// Largest total derivative order accepted anywhere.
pub fn order_cap() -> u32 {
    ORDER_CAP.load(Ordering::Relaxed)
}

pub fn set_order_cap(cap: u32) -> Result<()> {
    if cap == 0 {
        return Err(Error::ZeroOrder);
    }
    if cap > MAX_ORDER_CAP {
        return Err(Error::OrderCap {
            order: cap,
            cap: MAX_ORDER_CAP,
        });
    }
    ORDER_CAP.store(cap, Ordering::Relaxed);
    Ok(())
}

fn check_cap(order: u32) -> Result<()> {
    let cap = order_cap();
    if order > cap {
        Err(Error::OrderCap { order, cap })
    } else {
        Ok(())
    }
}

/// Derivative orders per input variable, e.g. `{S: 2, V: 1}`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MultiIndex {
    // sorted by variable, no zero entries
    entries: Vec<(VarId, u32)>,
}

impl MultiIndex {
    /// `d<order>(var)`.
    pub fn d(var: VarId, order: u32) -> Result<Self> {
        if order == 0 {
            return Err(Error::ZeroOrder);
        }
        check_cap(order)?;
        Ok(MultiIndex {
            entries: vec![(var, order)],
        })
    }

    /// `d<order>(name)` for a variable given by name.
    pub fn var(name: &str, order: u32) -> Result<Self> {
        Self::d(VarId::new(name)?, order)
    }

    /// Builds a multi-index from `(variable, order)` pairs; repeated
    /// variables accumulate and zero orders are dropped.
    pub fn from_orders<I>(orders: I) -> Result<Self>
    where
        I: IntoIterator<Item = (VarId, u32)>,
    {
        let mut entries: Vec<(VarId, u32)> = Vec::new();
        for (v, k) in orders {
            if k == 0 {
                continue;
            }
            match entries.binary_search_by(|(e, _)| e.cmp(&v)) {
                Ok(i) => entries[i].1 += k,
                Err(i) => entries.insert(i, (v, k)),
            }
        }
        if entries.is_empty() {
            return Err(Error::ZeroOrder);
        }
        let m = MultiIndex { entries };
        check_cap(m.total_order())?;
        Ok(m)
    }

    /// Merges two selectors by adding orders per variable.
    pub fn product(&self, other: &MultiIndex) -> Result<MultiIndex> {
        Self::from_orders(self.entries.iter().chain(&other.entries).cloned())
    }

    pub fn total_order(&self) -> u32 {
        self.entries.iter().map(|(_, k)| k).sum()
    }

    pub fn order_of(&self, var: &VarId) -> u32 {
        self.entries
            .iter()
            .find(|(v, _)| v == var)
            .map_or(0, |(_, k)| *k)
    }

    pub fn entries(&self) -> &[(VarId, u32)] {
        &self.entries
    }

    pub fn vars(&self) -> impl Iterator<Item = &VarId> {
        self.entries.iter().map(|(v, _)| v)
    }

    /// `prod_x M(x)!`, the factor turning a Taylor coefficient into a
    /// derivative.
    pub fn factorial_product(&self) -> f64 {
        self.entries
            .iter()
            .map(|&(_, k)| (1..=k).map(f64::from).product::<f64>())
            .product()
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (v, k)) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str("*")?;
            }
            if *k == 1 {
                write!(f, "d({v})")?;
            } else {
                write!(f, "d<{k}>({v})")?;
            }
        }
        Ok(())
    }
}

impl fmt::Debug for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for MultiIndex {
    type Err = Error;

    /// `request := term ('*' term)* ; term := 'd' ['<' INT '>'] '(' IDENT ')'`
    fn from_str(s: &str) -> Result<Self> {
        let mut p = RequestParser { src: s, pos: 0 };
        let mut terms = vec![p.term()?];
        loop {
            p.skip_ws();
            if p.eat('*') {
                terms.push(p.term()?);
            } else if p.pos == s.len() {
                break;
            } else {
                return Err(p.error("expected `*` or end of request"));
            }
        }
        MultiIndex::from_orders(terms).map_err(|e| match e {
            Error::OrderCap { .. } => e,
            other => p.error(&other.to_string()),
        })
    }
}

struct RequestParser<'a> {
    src: &'a str,
    pos: usize,
}

impl RequestParser<'_> {
    fn error(&self, message: &str) -> Error {
        Error::RequestSyntax {
            column: self.pos + 1,
            message: message.to_string(),
        }
    }

    fn rest(&self) -> &str {
        &self.src[self.pos..]
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.src.len() - trimmed.len();
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.rest().starts_with(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.error(&format!("expected `{c}`")))
        }
    }

    fn take_while(&mut self, f: impl Fn(char) -> bool) -> &str {
        self.skip_ws();
        let start = self.pos;
        let len = self.rest().find(|c| !f(c)).unwrap_or(self.rest().len());
        self.pos += len;
        &self.src[start..start + len]
    }

    fn term(&mut self) -> Result<(VarId, u32)> {
        self.expect('d')?;
        let mut order = 1;
        if self.eat('<') {
            self.skip_ws();
            let at = self.pos;
            let digits = self.take_while(|c| c.is_ascii_digit()).to_string();
            order = digits.parse::<u32>().map_err(|_| {
                self.pos = at;
                self.error("expected a positive integer order")
            })?;
            if order == 0 {
                self.pos = at;
                return Err(self.error("derivative order must be at least 1"));
            }
            self.expect('>')?;
        }
        self.expect('(')?;
        self.skip_ws();
        let at = self.pos;
        let name = self
            .take_while(|c| c.is_ascii_alphanumeric() || c == '_')
            .to_string();
        if !is_identifier(&name) {
            self.pos = at;
            return Err(self.error("expected a variable name"));
        }
        self.expect(')')?;
        Ok((VarId::new(&name)?, order))
    }
}

/// A deduplicated collection of requested multi-indices, in first-seen
/// order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RequestSet {
    requests: Vec<MultiIndex>,
}

impl RequestSet {
    pub fn new<I: IntoIterator<Item = MultiIndex>>(requests: I) -> Self {
        let mut set = RequestSet::default();
        for m in requests {
            set.insert(m);
        }
        set
    }

    pub fn insert(&mut self, m: MultiIndex) -> bool {
        if self.requests.contains(&m) {
            false
        } else {
            self.requests.push(m);
            true
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, MultiIndex> {
        self.requests.iter()
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn contains(&self, m: &MultiIndex) -> bool {
        self.requests.contains(m)
    }

    /// Variables appearing in at least one request; all others are passive.
    pub fn active_vars(&self) -> BTreeSet<VarId> {
        self.requests
            .iter()
            .flat_map(|m| m.vars().cloned())
            .collect()
    }

    pub fn max_order(&self) -> u32 {
        self.requests
            .iter()
            .map(MultiIndex::total_order)
            .max()
            .unwrap_or(0)
    }
}

impl<'a> IntoIterator for &'a RequestSet {
    type Item = &'a MultiIndex;
    type IntoIter = std::slice::Iter<'a, MultiIndex>;

    fn into_iter(self) -> Self::IntoIter {
        self.requests.iter()
    }
}

fn binomial(n: u64, k: u64) -> Result<u64> {
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * u128::from(n - i) / u128::from(i + 1);
        if r > u128::from(u64::MAX) {
            return Err(Error::Overflow);
        }
    }
    Ok(r as u64)
}

/// Number of distinct derivatives of order `k` in `n` variables,
/// `C(n + k - 1, k)`.
pub fn multiset_count(n: u64, k: u64) -> Result<u64> {
    if n == 0 {
        return Ok(u64::from(k == 0));
    }
    let top = (n - 1).checked_add(k).ok_or(Error::Overflow)?;
    binomial(top, k)
}

/// Number of values in a full tensor up to order `d` including the primal,
/// `C(n + d, d)`.
pub fn full_tensor_size(n: u64, d: u64) -> Result<u64> {
    let top = n.checked_add(d).ok_or(Error::Overflow)?;
    binomial(top, d)
}

/// All multi-indices with `1 <= |M| <= max_order` over `vars`, graded
/// by order, then lexicographic with earlier variables taking higher
/// powers first.
pub fn enumerate_full_tensor(vars: &[VarId], max_order: u32) -> Result<Vec<MultiIndex>> {
    check_cap(max_order)?;
    let mut out = Vec::new();
    let mut exps = vec![0u32; vars.len()];
    for k in 1..=max_order {
        compositions(vars, &mut exps, 0, k, &mut out)?;
    }
    Ok(out)
}

fn compositions(
    vars: &[VarId],
    exps: &mut [u32],
    at: usize,
    remaining: u32,
    out: &mut Vec<MultiIndex>,
) -> Result<()> {
    if at + 1 == vars.len() {
        exps[at] = remaining;
        out.push(MultiIndex::from_orders(
            vars.iter().cloned().zip(exps.iter().copied()),
        )?);
        return Ok(());
    }
    for e in (0..=remaining).rev() {
        exps[at] = e;
        compositions(vars, exps, at + 1, remaining - e, out)?;
    }
    Ok(())
}
