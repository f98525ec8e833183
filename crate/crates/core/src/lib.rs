//! Volumetric tumor segmentation with a frozen, adapter-tuned transformer
//! encoder, an attention prompter and a feature enhanced decoder, built on a
//! small reverse-mode autodiff engine.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod error;
pub mod gradsuite;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Tensor};

/// Environment variable fixing the worker thread count.
pub const THREADS_ENV: &str = "DEAP_THREADS";

/// Sizes the global worker pool from `DEAP_THREADS` if set. Kernel results do
/// not depend on the thread count; the variable only pins resource use.
/// Returns the thread count in effect.
pub fn init_threads() -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
        // A pool that already exists keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}
