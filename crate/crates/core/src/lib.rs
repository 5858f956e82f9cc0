//! Monocular distance estimation for pedestrians from 2D keypoints.
//!
//! A small residual MLP maps zero-centered, camera-normalized COCO keypoints
//! to a distance and the log of a Laplace spread. MC dropout adds epistemic
//! uncertainty on top of the predicted aleatoric spread, and the analytic
//! height-variation model gives the error floor any monocular method faces.

pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod geo_baseline;
pub mod geometry;
pub mod height_model;
pub mod net;
pub mod quadrature;
pub mod rng;
pub mod synthgen;
pub mod uncertainty;

pub use error::{Error, Result};
