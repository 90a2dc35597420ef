//! Gap filling for optical satellite image time series guided by radar.

pub mod config;
pub mod container;
pub mod date;
pub mod error;
pub mod evaluation;
pub mod laplace_head;
pub mod model;
pub mod nn;
pub mod spatial_encoder;
pub mod synthscene;
pub mod temporal_fusion;
pub mod timecode;
pub mod training;

pub use date::CalendarDate;
pub use error::{Error, Result};
