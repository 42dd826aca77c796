//! Saliency-guided object tracking with an ensemble of convolutional
//! regression heads.
//!
//! The pipeline per frame: a color prior picks a search window, backbone
//! features are reduced to the channels that matter for the target, five
//! small heads regress heat maps for the whole object and its quadrants,
//! the part maps vote on which peak is the target, and a particle search
//! over position and scale produces the box. Heads are refreshed from a
//! pool of confident past frames.

pub mod config;
pub mod convnet;
pub mod error;
pub mod features;
pub mod geometry;
pub mod image;
pub mod prior;
pub mod tracker;
pub mod update;

pub use config::{CenterPenalty, TrackerConfig};
pub use error::{Result, SdtError};
pub use geometry::{center_error, gaussian_map, iou, BoundingBox, RoiTransform};
pub use image::{HeatMap, Image};
