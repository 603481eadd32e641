//! Arbitrary-order mixed partial derivatives of scalar computation graphs
//! by a single backward sweep of Taylor-series substitution.
//!
//! ```
//! use adtool_core::{BackPropagator, CalcTree, Graph, MultiIndex, RequestSet};
//!
//! let mut g = Graph::new();
//! let x = g.variable("x")?;
//! let y = g.variable("y")?;
//! let xy = g.mul(x, y)?;
//! let f = g.exp(xy)?;
//!
//! let fxy: MultiIndex = "d(x)*d(y)".parse()?;
//! let requests = RequestSet::new([MultiIndex::var("x", 2)?, fxy.clone()]);
//! let mut ct = CalcTree::new(&g, &[f])?;
//! ct.set_by_name("x", 0.5)?;
//! ct.set_by_name("y", 2.0)?;
//! ct.evaluate()?;
//!
//! let mut bp = BackPropagator::build(&g, &[f], &requests)?;
//! bp.set_seed(f, 1.0)?;
//! bp.backpropagate(&ct)?;
//! let fxx = bp.get(&MultiIndex::var("x", 2)?)?;
//! assert!((fxx - 4.0 * 1f64.exp()).abs() < 1e-12);
//! // d/dx d/dy exp(xy) = (1 + xy) exp(xy)
//! assert!((bp.get(&fxy)? - 2.0 * 1f64.exp()).abs() < 1e-12);
//! # Ok::<(), adtool_core::Error>(())
//! ```

pub mod backprop;
pub mod calc_tree;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod kernels;
pub mod oracle;
pub mod request;

pub use backprop::{
    contribution_filter, make_plan, BackPropagator, BackpropPlan, BackpropTrace, Monomial,
};
pub use calc_tree::{plan_storage, storage_class, CalcTree, StorageClass, StoragePlan};
pub use error::{Error, Result};
pub use graph::{BinaryOp, Graph, Node, NodeRef, UnaryOp, VarId};
pub use kernels::{local_expansion, univariate_coeffs, LocalExpansion, UnivariateCoeffs};
pub use request::{
    enumerate_full_tensor, full_tensor_size, multiset_count, order_cap, set_order_cap, MultiIndex,
    RequestSet,
};
