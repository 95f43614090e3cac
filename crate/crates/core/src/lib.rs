pub mod cli;
pub mod cluster;
pub mod error;
pub mod geom;
pub mod numerics;
pub mod offsetnet;
pub mod pipeline;
pub mod proxy;
pub mod reshape;
pub mod verify;
mod rng;

pub use error::{Error, Result};
