//! Biologically inspired LiDAR global localization.
//!
//! A 3D pose cell attractor network holds many pose hypotheses at once.
//! Odometry shifts the activity, LiDAR scans reweight it against an occupancy
//! grid, and local view cells re-inject activity when a stored landmark is
//! seen again. A Monte Carlo localization baseline and a maze simulator are
//! included for head-to-head runs.

pub mod error;
pub mod geometry;
pub mod grid_map;
pub mod harness;
pub mod local_view;
pub mod localizer;
pub mod mcl;
pub mod observation;
pub mod pose_cells;
pub mod simulator;

pub use error::{Error, Result};
