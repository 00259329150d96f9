//! Graph-based prototype alignment for cross-domain detection.
//!
//! The library builds relation graphs over region proposals, propagates
//! features and confidences through the degree-normalized adjacency,
//! merges the result into per-class prototypes, and aligns the prototypes
//! of two domains with a class-reweighted contrastive loss. A toy
//! two-stage detector and a synthetic two-domain scene generator make the
//! whole pipeline runnable end to end at desk scale.

pub mod align;
pub mod config;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod model;
pub mod pca;
pub mod prototype;
pub mod sim;
pub mod svg;
pub mod trainer;

pub use error::{Error, Result};

// Re-exported so downstream crates and tests build against the same versions.
pub use ndarray;
pub use rand;
pub use rand_chacha;
