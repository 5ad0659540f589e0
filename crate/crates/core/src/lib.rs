//! Center-point instance segmentation: local shapes times global saliency.

pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
mod kernels;
pub mod losses;
pub mod mask;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod render;
pub mod targets;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use kernels::sigmoid;
pub use tensor::{DType, Float, Tensor};

/// Sizes the global thread pool from `CENTERMASK_THREADS` when set.
pub fn init_threads_from_env() -> Result<()> {
    let Ok(v) = std::env::var("CENTERMASK_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("CENTERMASK_THREADS must be a positive integer, got `{v}`")))?;
    // A pool built earlier in the process wins.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
