//! Self-evolving single-image-to-3D scene reconstruction.
//!
//! The engine cycles three coupled stages: a confidence-weighted point-cloud
//! prior built by multi-view depth voting, prior-constrained occupancy
//! completion with test-time photometric refinement, and geometry-guided
//! novel-view synthesis along orbital trajectories. Synthesized views feed
//! the next cycle, so geometry and appearance refine each other until the
//! scene is complete enough to extract a textured mesh.
//!
//! All neural generators sit behind the [`backends`] traits; deterministic
//! analytic implementations bound to [`synthbench`] scenes make the full
//! loop runnable and verifiable offline.

pub mod backends;
pub mod completion;
pub(crate) mod dda;
pub mod error;
pub mod geometry;
pub mod imagebuf;
pub mod meshing;
pub mod metrics;
pub mod occupancy;
pub mod pipeline;
pub mod prior;
pub mod rendering;
pub mod rng;
pub mod synthbench;
pub mod trajectory;

pub use error::EvoError;
