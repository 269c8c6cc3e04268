//! Core library for `bevscan`: a small, dependency-light stack for multi-view
//! bird's-eye-view vehicle segmentation on synthetic scenes.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] — reverse-mode autodiff on a flat tape (f64 throughout).
//! * [`geometry`] — the BEV grid, pinhole cameras, the parameter-free
//!   camera-to-BEV lift and point-cloud rasterization.
//! * [`ebc`] — distance-band serialization of BEV patches and the selective
//!   state-space compressor block built on top of it.
//! * [`nn`] — parameter store, layers and the full segmentation network.
//! * [`train`] — losses, uncertainty weighting, AdamW, one-cycle schedule and
//!   the training loop.
//! * [`scene`] — procedural scene generation, ray-cast rendering and the
//!   simulated LiDAR / radar sweeps.
//! * [`metrics`] — intersection-over-union reporting with visibility and
//!   distance-band breakdowns.
//! * [`config`] — `key = value` run configuration files.
//! * [`export`] — portable artifact writers (PPM / PGM images, XYZ clouds,
//!   text reports).

pub mod config;
pub mod ebc;
pub mod export;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod scene;
pub mod tensor;
pub mod train;
