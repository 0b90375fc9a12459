//! Planar SLAM back-end for ambiguity-prone scenes.
//!
//! The crate provides the per-frame pipeline of a plane-based SLAM system:
//! plane observation processing (re-fitting, edge lines, vertices, semantic
//! tagging), multi-cue plane data association (geometric gates, projection
//! IoU, and a tie-corrected Mann-Whitney rank test over associated map
//! points), a six-factor pose optimizer, plane map maintenance with fusion,
//! plus a synthetic desk-scene simulator and trajectory-error evaluator used
//! to benchmark all of it without a camera front-end.
//!
//! The numeric core is generic over the scalar type (`f32`/`f64`) through
//! [`scalar::Real`]; the pipeline, simulator, and I/O layers run on `f64`
//! through the aliases below.

pub mod association;
pub mod config;
pub mod factor_graph;
pub mod geometry;
pub mod io;
pub mod map;
pub mod pipeline;
pub mod processing;
pub mod sim;
pub mod scalar;
pub mod testing;

pub use scalar::Real;

/// `f64` aliases used by the pipeline layers.
pub type Plane64 = geometry::Plane<f64>;
pub type Line64 = geometry::Line3D<f64>;
pub type Pose64 = geometry::RigidTransform<f64>;
pub type Intrinsics64 = geometry::CameraIntrinsics<f64>;
pub type PixelBox64 = geometry::PixelBox<f64>;

/// `f32` aliases for callers that want single precision geometry.
pub type Plane32 = geometry::Plane<f32>;
pub type Line32 = geometry::Line3D<f32>;
pub type Pose32 = geometry::RigidTransform<f32>;
pub type Intrinsics32 = geometry::CameraIntrinsics<f32>;
pub type PixelBox32 = geometry::PixelBox<f32>;
