//! Toolkit for RGB-NIR cross-modality image registration.
//!
//! The crate is organized bottom-up:
//!
//! * [`image`] holds intensity images, PGM/PPM/PNG I/O and per-pixel gradients.
//! * [`gradient`] models patch gradients, the inconsistency score `Q`, end-point
//!   error and the statistics used to compare modalities.
//! * [`geometry`] provides homography algebra, normalized DLT, RANSAC and the
//!   corner-error / AUC evaluation metrics.
//! * [`matcher`] is a gradient-histogram descriptor matcher together with the
//!   dual-softmax score matrix and ground-truth assignment matrix.
//! * [`semantic`] contains the semantic injection operator and the loss terms.
//! * [`irap`] is the annotation pipeline: seed and residual homographies,
//!   cross-modality transfer, pseudo-NIR synthesis and the dataset manifest.
//!
//! Data-parallel inner loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled (the default) and plain iterators otherwise.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > t)` also rejects NaN

pub mod geometry;
pub mod gradient;
pub mod image;
pub mod irap;
pub mod matcher;
pub mod par;
pub mod semantic;
pub mod warp;

pub use geometry::{Correspondence, Homography, RansacConfig, RansacResult};
pub use gradient::{GradientDistribution, InconsistencyCurve, PatchGradient};
pub use image::{GradientField, Image, PixelCoord};
