//! Intensity inversion of MR volumes for CT-trained segmentation models,
//! with a pluggable segmentation backend and Dice-based evaluation.
//!
//! The typical flow is [`preprocess::preprocess_case`] on each volume,
//! [`backend::run_backend`] to obtain a label mask, and
//! [`evaluation::dice_all`] plus [`evaluation::summarize_variant`] to score
//! it. [`pipeline::run`] drives all of this over a manifest of cases.

pub mod backend;
pub mod error;
pub mod evaluation;
pub mod nifti;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod report;
pub mod volume;

pub use error::{Error, Result};
pub use preprocess::{Mode, PreprocessSpec};
pub use volume::{ClassMap, Grid, LabelVolume, Volume3D};
