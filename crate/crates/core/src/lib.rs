pub mod annotations;
pub mod attention;
pub mod classes;
pub mod config;
pub mod embedding;
pub mod error;
pub mod features;
pub mod geometry;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod neighbors;
pub mod page;
pub mod pipeline;
pub mod postprocess;
pub mod regions;
pub mod seeds;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{expand, iou, union_bbox, BBox};
