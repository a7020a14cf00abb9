//! Snippet-based multi-person pose estimation, forecasting and tracking.
//!
//! The crate processes short video snippets (`T` observed frames plus `T_f`
//! forecast frames) with a deformable spatiotemporal attention encoder and a
//! query-based decoder that emits one 2.5D pose trajectory per person slot.
//! Trajectories from overlapping snippets are stitched into tracks, and the
//! whole pipeline runs on CPU at desk scale: a built-in synthetic stick-figure
//! dataset, a reverse-mode tape for gradients, and deterministic seeded runs.
//!
//! Layers:
//!
//! * [`tensor`] — the autodiff tape and its operator set
//! * [`geometry`] — camera model, 2.5D poses, offset normalization
//! * [`attention`] — deformable attention over feature volumes (three variants)
//! * [`model`] — backbone stub, encoder, trajectory decoder
//! * [`matching`] — Hungarian assignment and the training loss
//! * [`tracking`] — snippet-overlap association into long tracks
//! * [`metrics`] — MPJPE / PCK / F1 / MOTA / forecast path error
//! * [`synth`] — synthetic scenes, rendering, dataset serialization
//!
//! Core math is generic over the scalar type via [`scalar::Scalar`]; the
//! aliases below pin the default 64-bit precision used by the shipped tools.

pub mod attention;
pub mod geometry;
pub mod gradcheck;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod tracking;

pub use scalar::Scalar;

/// Default-precision autodiff tape.
pub type Tape = tensor::Tape<f64>;
/// Default-precision parameter store.
pub type ParamStore = tensor::ParamStore<f64>;
/// Default-precision optimizer.
pub type Optimizer = tensor::Optimizer<f64>;
/// Default-precision camera intrinsics.
pub type Camera = geometry::Camera<f64>;
/// Default-precision pose.
pub type Pose = geometry::Pose<f64>;
/// Default-precision trajectory.
pub type Trajectory = geometry::Trajectory<f64>;
