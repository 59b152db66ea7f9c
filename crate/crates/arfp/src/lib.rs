//! Key-conditioned reversible image protection.
//!
//! The crate implements a protection pipeline in which a generator adds a
//! key- and nonce-conditioned perturbation to an image, a recovery network
//! restores the original under the correct key, a lightweight decoder reads
//! the embedded nonce back as a fragile integrity signal, and a surrogate
//! restoration adversary participates in training so that the learned
//! protection resists post-hoc restoration attacks. Evaluation tooling
//! (protection success rate, image quality metrics, key-sensitivity and
//! tamper suites) and a discrete information-theoretic oracle round out the
//! artifact.

pub mod adversary;
pub mod condnet;
pub mod error;
pub mod frmetrics;
pub mod keymat;
pub mod leakage;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod recovery;

pub use error::{Error, Result};
