//! Depth from motion for rotation-free ("stabilized") monocular video.
//!
//! The crate bundles everything needed to go from a procedural scene to a
//! trained depth network:
//!
//! * [`geometry`]: pinhole projection, focus of expansion, analytic flow and
//!   the closed-form disparity/depth conversions for pure translation;
//! * [`scenegen`]: random box scenes made of primitives and a small ray caster;
//! * [`dataset`]: on-disk layout, shift augmentation and target pooling;
//! * [`gradkit`]: a tape-based autodiff with the layers DepthNet needs;
//! * [`depthnet`]: the encoder/decoder network, multi-scale loss and training;
//! * [`baseline`]: block matching, FOE estimation and flow-based depth;
//! * [`inference`]: metrics, velocity scaling and multi-shift inference.

pub mod baseline;
pub mod dataset;
pub mod depthnet;
pub mod geometry;
pub mod gradkit;
pub mod inference;
pub mod scenegen;

pub use geometry::{DepthMap, FlowField, Foe, MotionSense, PinholeCamera, PixelPoint, Translation};
