//! Unsupervised RGB-to-thermal distillation for a two-head tracker.
//!
//! A small backbone feeds a target-center-location head (a correlation
//! filter predicted from reference features) and a bounding-box-estimation
//! head (modulated test features regressed to a box state). An RGB teacher
//! is pretrained on labeled synthetic data, and its thermal-facing branches
//! are then distilled on aligned RGB/TIR patch pairs without annotations.

pub mod backbone;
pub mod bbe;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod examples;
pub mod geometry;
pub mod imaging;
pub mod labels;
pub mod matrix;
pub mod model;
pub mod nn;
pub mod params;
pub mod patchgen;
mod pretrain;
pub mod tcl;
pub mod tracker;
pub mod trainer;

pub use backbone::{extract, BackboneParams, FeatureMap};
pub use error::{Error, Result};
pub use geometry::{cle, decode_box_state, encode_box_state, iou, normalized_cle, BBox, BoxState, FrameError, Point};
pub use imaging::Modality;
pub use labels::{argmax_to_image, gaussian_label, ScoreMap};
pub use model::Model;
pub use params::Group;
pub use patchgen::{BatchLayout, Mixing, PairedSample, Strategy};
pub use trainer::{config_from_setting, DistillConfig, Setting, TrainState};
