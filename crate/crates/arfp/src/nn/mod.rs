//! Minimal tensor/autodiff machinery shared by every network in the crate.

pub mod adam;
pub mod graph;
pub mod layers;
pub mod tensor;

pub use adam::AdamState;
pub use graph::{Grads, Graph, NodeId};
pub use layers::{derive_seed, seeded_rng, Conv2d, Dense, FilmHead, ParamVisit};
pub use tensor::{check_image, Tensor};
