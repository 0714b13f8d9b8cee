//! Files, training driver, evaluation tables, CLI and HTTP service around
//! [`headlift_core`].

pub use headlift_core as core;

pub mod calibrate;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod formats;
pub mod manifest;
pub mod run;
pub mod service;
pub mod tables;

pub use error::{Error, Result};
