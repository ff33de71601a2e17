//! Keypoint-based multi-object 6D pose estimation formulated as set
//! prediction.
//!
//! The crate covers the geometric and learning building blocks of such a
//! pipeline:
//!
//! - [`geometry`]: rotations, the 6D rotation representation, pinhole
//!   projection and cross-ratios.
//! - [`keypoints`]: interpolated bounding-box (IBB) keypoints and farthest
//!   point sampling.
//! - [`matching`]: no-object padding, optimal bipartite matching and the
//!   Hungarian loss.
//! - [`losses`]: class, box (GIoU + ℓ1), keypoint, cross-ratio and pose losses
//!   with analytic gradients.
//! - [`pnp`]: EPnP and RANSAC.
//! - [`rotest`]: a learned rotation head and translation head with their
//!   training loop.
//! - [`attention`]: scaled dot-product and multi-head attention.
//! - [`metrics`]: ADD, ADD-S, AUC and cardinality error.
//! - [`synth`]: a synthetic scene generator.
//!
//! ```
//! use setpose::geometry::{CameraIntrinsics, Pose, RotationMatrix};
//! use setpose::keypoints::{ibb_keypoints, project_keypoints, BBox3D};
//! use setpose::pnp::{epnp_solve, Correspondences};
//! use nalgebra::Vector3;
//!
//! let cam = CameraIntrinsics::default();
//! let bbox = BBox3D::new(0.05, 0.03, 0.02)?;
//! let kps = ibb_keypoints(&bbox);
//! let gt = Pose::new(RotationMatrix::from_axis_angle(&Vector3::y(), 0.4), Vector3::new(0.02, -0.01, 0.8));
//! let pixels = project_keypoints(&kps, &gt, &cam)?;
//!
//! let corr = Correspondences::new(kps.points().to_vec(), pixels.to_vec())?;
//! let pose = epnp_solve(&corr, &cam)?;
//! assert!((pose.translation - gt.translation).norm() < 1e-6);
//! # Ok::<(), setpose::Error>(())
//! ```

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod error;
pub mod geometry;
pub mod keypoints;
pub mod losses;
pub mod matching;
pub mod mesh;
pub mod metrics;
pub mod pnp;
pub mod rotest;
pub mod synth;

mod nn;

pub use error::{Error, Result};

// The guide's code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/keypoints.md")]
    mod keypoints {}
    #[doc = include_str!("../../../book/src/matching.md")]
    mod matching {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/pnp.md")]
    mod pnp {}
    #[doc = include_str!("../../../book/src/rotest.md")]
    mod rotest {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/synth.md")]
    mod synth {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
pub use nn::{nearest_brute_force, Metric, PointGrid};
