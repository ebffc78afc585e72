//! Variational Bayesian convolutional networks trained by Bayes by backprop,
//! with Monte-Carlo uncertainty decomposition, uncertainty-based triage and
//! a t-SNE embedding for inspecting uncertain inputs.
//!
//! The crate is self-contained: [`tensor`] and [`autodiff`] provide the
//! numerical core the network is built on.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod triage;
pub mod tsne;
pub mod uncertainty;
pub mod variational;

pub use error::{Error, Result};
pub use network::{BayesianNetwork, NetworkSpec};
pub use tensor::Tensor;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "BVAR_THREADS";

/// Sizes the global thread pool from `BVAR_THREADS` if set. Results do not
/// depend on the thread count. Later calls are no-ops.
pub fn init_thread_pool() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Input(format!("{THREADS_ENV} must be a positive integer, got `{value}`")))?;
    // a pool that is already initialized keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
