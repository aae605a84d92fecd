// SPDX-License-Identifier: MIT OR Apache-2.0

//! Library side of the `qsieve` binary: config loading, stage
//! orchestration and the CSV / SVG emitters.

pub mod config;
pub mod pipeline;
pub mod svg;

pub use config::{derive_seed, RunConfig, Stage, StageSeeds, SyntheticSpec};
pub use pipeline::{Run, RunManifest, StageError};
