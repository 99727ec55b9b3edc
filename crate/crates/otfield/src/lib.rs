//! Gaussian process surrogates for node signals on variable-size
//! attributed graphs.
//!
//! Graphs are lifted to point clouds with a continuous Weisfeiler-Lehman
//! smoothing, coupled to a shared reference support by entropy-regularized
//! optimal transport, and compressed with PCA; independent Gaussian
//! processes over sliced-Wasserstein graph embeddings predict the
//! compressed coefficients with analytic uncertainties that are pushed
//! back onto the nodes of any query graph.

// Validation deliberately writes `!(x > 0.0)` and friends: the negated
// form rejects NaN together with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cache;
pub mod dataset;
pub mod dimred;
pub mod error;
pub mod gp;
pub mod graph;
pub mod ot;
pub mod persist;
pub mod pipeline;
pub mod reference;
pub mod util;

pub use error::{Error, ErrorCategory, Result};
