// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared fixtures for the criterion benchmarks.

use ymir_core::pipeline::{generate_synthetic, SynthData, SynthProfile};

/// Seeded synthetic series of `len` rows, 6 metrics, daily period of 288.
pub fn fixture(len: usize) -> SynthData {
    generate_synthetic(&SynthProfile { len, seed: 1, ..SynthProfile::default() }).expect("valid bench profile")
}
