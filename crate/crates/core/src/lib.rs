//! Anchor-and-track reconstruction of a hand-held rigid object's 6D trajectory.
//!
//! The engine takes per-frame observations (masks, metric depth, hand estimates and
//! optional dense features), recovers metric scale with constrained trimmed ICP, anchors
//! the object at the interaction onset frame and propagates the pose through the
//! sequence in both directions with a silhouette + feature + interaction objective.

pub mod align;
pub mod cli;
pub mod data;
pub mod error;
pub mod geometry;
pub mod init;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod raster;
pub mod sdf;
pub mod spatial;
pub mod synth;
pub mod tracker;

pub use error::{Error, Result};
