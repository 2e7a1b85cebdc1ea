//! Data, warping, clustering and evaluation primitives for adapting labelled
//! face photos into caricature-like training pairs.
//!
//! Everything here is pure Rust with no learning framework: image/label
//! rasters, the 17-point landmark scheme and its rasterization, the
//! differentiable backward warp (with analytic gradients), k-means and
//! agglomerative clustering, normalization-statistics style features,
//! confusion-matrix IoU, and a procedural toy-face generator.
//!
//! Hot loops take an [`Exec`] policy; with the default `rayon` feature they
//! run data-parallel, otherwise sequentially with identical results.

pub mod cluster;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod landmarks;
pub mod metrics;
pub mod raster;
pub mod style;
pub mod toy;
pub mod warp;

pub use cluster::{cluster_shapes, Linkage, ShapeSet};
pub use dataset::{
    load_caricature_dataset, load_photo_dataset, CaricatureSample, PhotoSample, CLASS_NAMES, NUM_CLASSES,
};
pub use error::{CoreError, Result};
pub use exec::Exec;
pub use landmarks::{rasterize_landmark_map, LandmarkGrouping, LandmarkMap, LandmarkSet};
pub use metrics::{iou_report, render_table, ConfusionMatrix, IoUReport};
pub use raster::{Image, LabelMap, Planar};
pub use style::{cluster_styles, extract_style_feature, StyleExtractor, StyleFeature, StyleReferenceSet};
pub use toy::{generate_toy_face_dataset, Domain};
pub use warp::{dense_flow_from_control, sample_bilinear, sample_nearest, ControlGrid, DenseFlow};
