//! Markerless shape tracking for piecewise-constant-curvature soft robots.
//!
//! A static [`refmodel::ReferenceModel`] of surface points carrying
//! multi-scale appearance descriptors is matched against every incoming
//! RGB-D observation. Matched points are grouped into rigid partitions,
//! and the per-partition motions drive a backbone fit that yields the
//! robot configuration for the frame.
//!
//! Module map:
//!
//! - [`kinematics`]: PCC forward kinematics, surface point kinematics,
//!   backbone-driven inverse kinematics, pressure to length regression.
//! - [`refmodel`]: reference model construction (FPS, descriptor
//!   aggregation, structural coordinates, partitions) and its file format.
//! - [`camera`]: pinhole camera and splatted z-buffer visibility.
//! - [`matching`]: visibility, score matrix, assignment, descriptor update.
//! - [`reconstruct`]: per-partition registration, global backbone fit and
//!   the per-frame pipeline.
//! - [`sim`]: synthetic RGB-D ground truth generator.
//! - [`control`]: closed-loop shape and tip control against the simulator.

pub mod camera;
pub mod control;
pub mod error;
pub mod kinematics;
pub mod matching;
pub mod reconstruct;
pub mod refmodel;
pub mod sim;

pub use error::{Error, Result};

/// 3-vector in meters, world frame unless stated otherwise.
pub type Vec3 = nalgebra::Vector3<f64>;
