//! Price-sensitivity estimation toolkit for airline sales transactions.
//!
//! The crate covers the whole offline workflow: a revenue-management
//! simulator producing confounded booking histories ([`simcore`]), feature
//! engineering and CSV I/O ([`features`]), cross-fitted random-forest
//! nuisance models ([`firststage`]), a sequential Bayesian dynamic Poisson
//! GLM for the orthogonalized second stage ([`dglm`]), a directly trained
//! Wide & Deep Poisson network ([`direct`]), pricing policies ([`policy`])
//! and evaluation ([`metrics`]).

pub mod config;
pub mod dglm;
pub mod direct;
pub mod error;
pub mod features;
pub mod firststage;
pub mod metrics;
pub mod pipeline;
pub mod policy;
pub mod simcore;
pub mod specfun;

pub use error::{Error, Result};
