//! Filter tagging for convolutional networks.
//!
//! Every filter of a CNN is tagged with the classes whose images activate it
//! most. A classification is then explained by the tags of the filters the
//! input activates, ranked by how often each class occurs among them.
//!
//! The pipeline runs in stages, each usable on its own:
//!
//! 1. [`infer`] runs a small CNN and exposes every conv layer's output.
//! 2. [`ingest`] stores those outputs as a sharded dump and splits the
//!    images into a tagging set and a test set.
//! 3. [`tagging`] scales and averages the activations and builds a
//!    [`tagging::TagStore`].
//! 4. [`explain`] explains images, measures Hits@n and reports errors.
//!
//! [`cli`] wires the stages into the `filtag` binary and [`synthetic`]
//! builds a stripe-detector model with known ground truth.

pub mod cli;
pub mod error;
pub mod explain;
pub mod infer;
pub mod ingest;
pub mod synthetic;
pub mod tagging;
pub mod tensor;

pub use error::{Error, Result};

/// Rayon pool with `threads` workers; 0 picks the number of CPUs.
pub(crate) fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()?)
}
