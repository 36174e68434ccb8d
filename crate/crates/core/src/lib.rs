//! Animatable Gaussian head avatars reconstructed from a single reference
//! render.
//!
//! The pipeline alternates between refreshing a synthetic video dataset with
//! a guided generator and fitting a mesh-rigged Gaussian avatar to that
//! dataset, under a front-to-side then relaxed-to-exaggerated curriculum.
//!
//! Module map:
//!
//! - [`headmodel`]: procedural blendshape head, cameras, landmark maps.
//! - [`avatar`]: Gaussians bound to head triangles, deformation, PLY I/O.
//! - [`render`]: differentiable splatting renderer (forward + backward).
//! - [`optimize`]: reconstruction loss and Adam.
//! - [`oracle`]: generator stand-in holding hidden ground truth.
//! - [`curriculum`]: camera/expression samplers and the stage schedule.
//! - [`symgen`]: dataset store and the mutual-enhancement training loop.
//! - [`metrics`]: PSNR, identity proxy, motion stability, render speed.
//! - [`config`] and [`experiment`]: experiment files, runs and comparisons.

pub mod avatar;
pub mod config;
pub mod curriculum;
pub mod error;
pub mod experiment;
pub mod headmodel;
pub mod metrics;
pub mod optimize;
pub mod oracle;
pub mod render;
pub mod seed;
pub mod symgen;

pub use error::{Error, Result};
