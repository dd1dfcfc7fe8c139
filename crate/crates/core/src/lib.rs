//! Crossmodal image-to-LiDAR knowledge distillation at desk scale.
//!
//! The crate trains a sparse-voxel 3D network from a 2D image network using
//! paired camera and LiDAR data, in two flavours:
//!
//! * unsupervised feature distillation over SLIC superpixels with an InfoNCE
//!   objective ([`distill::train_udakd`]), and
//! * feature plus semantic distillation from a labelled 2D segmenter through a
//!   classifier shared by both modalities ([`distill::train_fskd`]).
//!
//! The 3D student reaches the 2D feature space through a domain-adaptation
//! module built from sparse 3D self-calibrated convolutions
//! ([`models::DaModule`]). Sharing the classifier lets a 2D classifier
//! retrained on new classes be plugged onto the 3D network without touching
//! its parameters ([`models::swap_classifier`]).
//!
//! All data comes from a procedural paired camera/LiDAR scene generator
//! ([`scenegen`]).

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod distill;
pub mod geometry;
pub mod gradcheck;
pub mod models;
pub mod optim;
pub mod scenegen;
pub mod sparse3d;
pub mod superpixel;
pub mod tensor;

pub use error::{Error, Result};

/// Version string embedded in every artifact: crate version plus `git describe`.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("XMD_GIT_DESCRIBE"));
