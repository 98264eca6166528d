//! Pixel-aligned 3D Gaussian splatting reconstruction.
//!
//! The crate covers the whole desk-scale reconstruction stage: orbital camera
//! rigs, an analytic capsule humanoid used as ground truth, per-pixel Gaussian
//! decoding from ray-embedded feature maps, a tile-based differentiable
//! splatting renderer with an analytic backward pass, the composite training
//! objective, Adam with cosine annealing, synthetic occlusion, view providers,
//! weak-perspective pose projection, and image/geometry metrics.
//!
//! Data-parallel loops go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod exec;
pub mod gaussian;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod image;
pub mod kdtree;
pub mod loss;
pub mod metrics;
pub mod occlusion;
pub mod optim;
pub mod ply;
pub mod pose;
pub mod provider;
pub mod render;
pub mod rig;
pub mod scene;

pub use error::{Error, Result};
pub use exec::ExecMode;
pub use gaussian::{Gaussian3D, GaussianSet, PixelGaussianGrid};
pub use geometry::{Camera, CameraIntrinsics, Ray, UnitQuat, Vec3};
pub use image::{GrayImage, RgbImage};
pub use render::{RenderConfig, RenderedImage};
pub use rig::{CameraRig, RigSpec};
pub use scene::CapsuleScene;
