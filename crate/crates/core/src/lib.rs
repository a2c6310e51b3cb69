//! Dynamic-Net: a network trained for one objective, plus residual
//! tuning-blocks trained for a second objective, whose contribution is
//! scaled at inference time to move between the two.

pub mod config;
pub mod data;
pub mod dynet;
pub mod error;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod selfcheck;
pub mod sweep;
pub mod tensor;

pub use error::{Error, Result};
