pub mod calibration;
pub mod controller;
pub mod driver;
pub mod dynamics;
pub mod error;
pub mod metrics;
pub mod qp;
pub mod sim;
pub mod tree;

pub use error::{Error, Result};
