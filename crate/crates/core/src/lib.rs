//! Multi-mode vehicle trajectory prediction lab.
//!
//! The pipeline: synthetic vector scenes ([`scenegen`]) are rasterized into
//! single and composite bird's-eye-view layers ([`raster`]); one small
//! convolutional backbone per layer produces independent hypothesis sets
//! which a set-attention block fuses into the final modes ([`net`]); the
//! model is trained with the MTP or angle-scaled loss ([`loss`], [`train`])
//! and scored with the usual motion-forecasting metrics ([`metrics`]).
//! [`harness`] wires it into the `trajlab` command line.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod geom;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod raster;
pub mod scenegen;
pub mod train;

pub use error::{Error, Result};
pub use geom::Vec2;
