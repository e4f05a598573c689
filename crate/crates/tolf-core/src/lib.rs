//! Bounding-box localization under annotation noise.
//!
//! The crate bundles the pieces needed to study how localization losses
//! behave when training labels are corrupted: box/anchor geometry and
//! target encoding ([`boxgeom`]), a small reverse-mode autodiff tape
//! ([`gradcore`]), an invertible coupling-layer density over prediction
//! residuals ([`flowdist`]), the losses themselves ([`locloss`]),
//! parametric annotation-noise models ([`noisegen`]), a synthetic
//! tiny-object benchmark with a trainable regression head ([`synthbench`]),
//! and evaluation metrics ([`evalmetrics`]).

pub mod boxgeom;
pub mod evalmetrics;
pub mod flowdist;
pub mod gradcore;
pub mod locloss;
pub mod noisegen;
pub mod synthbench;
