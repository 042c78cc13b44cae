//! Core library for a soft-tissue deformation surrogate pipeline.
//!
//! The pipeline runs in stages, each backed by a module here:
//!
//! 1. [`geometry`] builds synthetic multi-region phantoms (background, gland,
//!    inner gland zone, bone) as labelled tetrahedral meshes, and resamples
//!    trained-on geometries into cuboid tessellations.
//! 2. [`fesolver`] computes ground-truth displacement fields with a static
//!    total-Lagrangian finite-element solver using compressible neo-Hookean
//!    tetrahedra, and batch-generates simulation datasets.
//! 3. [`features`] assembles per-node feature vectors (position, boundary
//!    condition, material) consumed by the network.
//! 4. [`tensorcore`] is a small dense f64 tensor type plus a reverse-mode
//!    automatic differentiation tape.
//! 5. [`network`] implements a permutation-invariant point-cloud regression
//!    network with learned input transforms and a global feature vector.
//! 6. [`training`] trains network ensembles with bootstrap-sampled point
//!    subsets and Adam.
//! 7. [`inference`] covers arbitrarily sized point clouds with bootstrap
//!    passes and averages per-point predictions.
//! 8. [`evaluation`] computes displacement-error statistics, paired t-tests
//!    and latency benchmarks, and renders report tables.

pub mod error;
pub mod evaluation;
pub mod features;
pub mod fesolver;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod network;
pub mod rng;
pub mod tensorcore;
pub mod training;

pub use error::{Error, Result};
