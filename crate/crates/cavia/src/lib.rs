//! Meta-learning via context-parameter adaptation, on a purpose-built
//! reverse-mode autodiff core that supports gradients of gradients.
//!
//! The crate implements two gradient-based meta-learners over a shared model
//! family: context adaptation (a small context vector is adapted per task in
//! the inner loop while the network body is meta-trained in the outer loop)
//! and a full-network-adaptation baseline. Task suites cover sine regression,
//! coordinate-to-color image completion, synthetic N-way K-shot
//! classification, and a 2-D goal navigation environment trained with a
//! reward-to-go policy gradient.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod metarl;
pub mod metasup;
pub mod models;
pub mod optim;
pub mod tasks;
pub mod util;

pub use error::{CaviaError, Result};
