//! Generalized least squares for noisy hierarchical measurements on rooted
//! trees.
//!
//! Every vertex `g` carries a histogram `β(g) ∈ ℝⁿ` observed through
//! `y(g) = S(g)β(g) + u(g)`, and each parent's histogram is the sum of its
//! children's. [`run_two_pass`] computes the best linear unbiased estimate of
//! every `β(g)` in two sweeps over the tree; [`compute_covariance`] and
//! [`estimate_query`] then answer covariance and interval questions about
//! arbitrary vertices and leaf regions. The [`oracle`] module solves the same
//! problem densely for verification.

pub mod covariance;
pub mod error;
pub mod hay;
pub mod io;
pub mod linalg;
pub mod model;
pub mod normal;
pub mod oracle;
pub mod query;
pub mod sim;
pub mod spine;
pub mod synth;
pub mod twopass;

pub use covariance::{compute_covariance, path_a_product, CovarianceEngine};
pub use error::{Error, ErrorKind, Result};
pub use io::{Dataset, LabeledStore};
pub use linalg::{Matrix, Vector};
pub use model::{add_soft_constraints, local_gls, LocalEstimate, NoiseVar, VertexMeasurements};
pub use normal::{normal_cdf, normal_quantile};
pub use query::{
    aggregate_region, collapse_region, combine_runs, estimate_query, CIResult, RegionQuery,
};
pub use sim::{coverage_experiment, CoverageReport, NoiseKind, SimConfig, SimQuery};
pub use spine::{Tree, VertexId};
pub use twopass::{run_two_pass, run_two_pass_with, Parallelism, StateStore, VertexState};
