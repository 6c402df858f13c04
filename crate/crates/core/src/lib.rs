// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod detectors;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod pipeline;
pub mod series;
pub mod supervised;
pub mod stats;

pub use error::{Result, YmirError};
