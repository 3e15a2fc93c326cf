//! Orientation-only 3D human pose estimation.
//!
//! A pose is never regressed joint by joint. Instead a small fully
//! convolutional network predicts, per limb, a confidence map and 2D/3D
//! orientation maps over a limb-shaped region. Limb directions are read off
//! by confidence-weighted voting and chained through a fixed-length skeleton
//! to obtain joints, and a residual MLP fills in limbs the image does not
//! show. Everything from pixels to joints is differentiable on the built-in
//! [`grad`] tape.

pub mod exec;
pub mod extract;
pub mod geom;
pub mod grad;
pub mod loss;
pub mod metrics;
pub mod mapcodec;
pub mod net;
pub mod perturb;
pub mod skeleton;
pub mod synthdata;
pub mod train;
