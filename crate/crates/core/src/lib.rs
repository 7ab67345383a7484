//! Desk-scale visuo-tactile imitation learning.

pub mod error;
pub mod math;
pub mod sim;
pub mod tactile;
pub mod encoders;
pub mod data;
pub mod contrastive;
pub mod policy;
pub mod harness;

pub use error::{Error, Result};
