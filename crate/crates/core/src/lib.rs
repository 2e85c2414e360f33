//! Two-stage (sketch, then refine) conditional adversarial networks that
//! predict a PET-derived myelin map from four MRI-derived channels, with
//! region-weighted losses, synthetic phantom cohorts and the global and
//! voxel-wise evaluation protocols.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod losses;
pub mod manifest;
pub mod nets;
pub mod phantom;
pub mod plots;
pub mod report;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
