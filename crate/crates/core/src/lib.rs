//! Loop closure detection for 3D LiDAR scans.
//!
//! A scan is projected into a Cartesian birds'-eye-view height image, sliced
//! into level masks, and summarized as per-level contour statistics. Place
//! recognition then runs in two stages: a discrete consensus check over
//! constellations of contours around anchor contours, followed by a continuous
//! correlation optimization between 2.5D Gaussian mixtures that refines the
//! planar transform. Low-dimensional yaw-invariant keys indexed in per-level
//! KD-trees keep candidate retrieval fast.
//!
//! The [`pipeline`] module wires the stages together for online operation;
//! [`dataset`] reads KITTI-format scans and generates synthetic scenes;
//! [`eval`] scores prediction logs against ground-truth poses.

pub mod bev;
pub mod cli;
pub mod constellation;
pub mod contour;
pub mod dataset;
pub mod eval;
pub mod gmm;
pub mod pipeline;
pub mod retrieval;

pub use bev::{BevConfig, BevImage, Level, LevelMask, PointCloud};
pub use constellation::{Constellation, Se2Transform, ThresholdSet};
pub use contour::{ContourAbstraction, RawContour};
pub use gmm::{CorrelationResult, Gmm25D};
pub use pipeline::{LoopResult, Pipeline, PipelineConfig, ScanDescriptor};
pub use retrieval::{LayeredDatabase, RetrievalKey};
