//! Online multi-object tracking with mutually trained detection and
//! sequence representations.
//!
//! The crate is organised bottom-up: [`geometry`] and [`mot_io`] hold boxes
//! and file formats, [`features`] and [`loss`] the representation maths,
//! [`tape`], [`model`] and [`trainer`] the desk-scale training loop, and
//! [`associator`], [`tracker`] and [`metrics`] the online tracking pipeline.

pub mod assignment;
pub mod associator;
pub mod error;
pub mod features;
pub mod geometry;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod mot_io;
pub mod synthetic;
pub mod tape;
pub mod tracker;
pub mod trainer;

pub use error::{Error, Result};
