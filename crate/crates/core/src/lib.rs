//! Storage-budgeted soft-label supervision lab.
//!
//! The crate trains small students from a finite pool of crop-level teacher
//! soft labels, calibrates them with a hard-label phase (the soft–hard–soft
//! schedule), measures local-view drift, and checks the supporting
//! probability bounds by Monte Carlo.

pub mod augment;
pub mod desk;
pub mod diagnostics;
mod binio;
pub mod error;
pub mod simplex;
pub mod softlabel;
pub mod synthdata;
pub mod theory;
pub mod train;
pub mod tinynet;

pub use error::{LabError, Result};
