//! Propensity score estimation by tailored scoring rules.
//!
//! Fitting a logistic propensity model by maximizing a member of the Beta
//! family of proper scoring rules (instead of the Bernoulli likelihood)
//! yields inverse-probability weights that exactly balance the regressors.
//! Regularized, kernel and boosted variants trade exact balance for bounded
//! imbalance, which in turn bounds the conditional bias of the weighted
//! effect estimator.

pub mod balance;
pub mod boost;
pub mod data;
pub mod error;
pub mod estimators;
pub mod glm;
pub mod inference;
pub mod kernel;
pub mod regularized;
pub mod scoring;
pub mod simulate;

pub use balance::{Provenance, WeightSet};
pub use data::{Dataset, Design, FeatureMap};
pub use error::{Error, Result};
pub use scoring::{Estimand, ScoringRule};

/// Maps `f` over `items`, in parallel when the `parallel` feature is on.
/// Output order always matches input order.
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}
