//! Sparse-view neural avatars: a body-anchored radiance field fused with
//! image-based rendering, plus the synthetic data, training and evaluation
//! harness around it.

pub mod body;
pub mod geometry;
pub mod data;
pub mod imaging;
pub mod nn;
pub mod backbone;
pub mod nerf;
pub mod blend;
pub mod repose;
pub mod render;
pub mod model;
pub mod train;
pub mod eval;
pub mod config;
pub mod ablation;
