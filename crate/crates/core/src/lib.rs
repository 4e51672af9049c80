//! Video synopsis, forensic alarms and evaluation for fixed-camera footage.

// Negated comparisons reject NaN in config validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bgmodel;
pub mod config;
pub mod error;
pub mod eval;
pub mod flow;
pub mod forensics;
pub mod geometry;
pub mod regions;
pub mod summary;
pub mod synopsis;
pub mod synthgen;
pub mod tracker;
pub mod video_io;

pub use config::Config;
pub use error::{Error, Result};
pub use geometry::{BBox, Point};
pub use summary::RunSummary;
pub use video_io::{Frame, StreamMeta};
