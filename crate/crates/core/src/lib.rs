//! Multi-view object pose estimation with line-of-sight feature encoding.

pub mod audit;
pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod par;
pub mod params;
pub mod scene;

pub use error::{Error, Result};
