//! Single-object LIDAR tracking with bird-eye-view region proposals ranked by
//! a point-cloud Siamese network.

pub mod bev;
pub mod error;
pub mod evalrep;
pub mod fsutil;
pub mod geom;
pub mod harness;
pub mod model;
pub mod net;
pub mod rpn2d;
pub mod search;
pub mod sim3d;
pub mod track;
pub mod train;

pub use error::{Error, Result};
