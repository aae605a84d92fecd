// SPDX-License-Identifier: MIT OR Apache-2.0

//! Locate-then-analyze tooling for attention circuits.
//!
//! The pipeline localizes a critical layer by causal tracing
//! ([`tracer`]), probes every head at that layer with a logistic-regression
//! sieve ([`sieve`]), embeds the surviving coordinates as product `R_y`
//! states and compares heads through state fidelity ([`qkernel`]), and
//! finally labels heads by ablation and checks the labels statistically
//! ([`analysis`]).
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below are what the command-line pipeline uses.

// `!(x > y)` is how NaN gets rejected alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod model;
pub mod prompts;
pub mod qkernel;
pub mod scalar;
pub mod sieve;
pub mod store;
pub mod tracer;

pub use analysis::{
    ablate_and_measure, classify_mechanism, cross_trace_correlation, spearman, welch_t_test,
    AblationKind, AblationReport, Mechanism, StatsReport, WelchResult,
};
pub use error::{Error, Result};
pub use model::{
    build_synthetic_model, AblationMode, ForwardTrace, Intervention, Model, ModelConfig, PlantSpec,
    TokenId,
};
pub use prompts::{extract_activations, make_prompt_pairs, PromptPair};
pub use qkernel::{
    angle_embed, fidelity, head_interaction_matrix, layer_coherence, product_fidelity_oracle,
    KernelMatrix, QuantumState, SampleSet,
};
pub use scalar::Scalar;
pub use sieve::{
    apply_sieve, fit_scaler, select_top_k, sieve_head, sieve_layer, train_probe, ProbeConfig,
    ProbeFit, SieveResult, SievedVector,
};
pub use store::{
    load_dataset, save_dataset, ActivationDataset, ActivationSample, DatasetInfo, DatasetManifest,
    SampleLabel,
};
pub use tracer::{
    layer_scan, layer_scan_with, recovery_score, select_critical_layer, PatchSite, RecoveryProfile,
    TraceOptions,
};

pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
pub type ForwardTrace64 = ForwardTrace<f64>;
pub type RecoveryProfile64 = RecoveryProfile<f64>;
pub type SieveResult64 = SieveResult<f64>;
pub type SieveResult32 = SieveResult<f32>;
pub type SievedVector64 = SievedVector<f64>;
pub type QuantumState64 = QuantumState<f64>;
pub type KernelMatrix64 = KernelMatrix<f64>;
pub type KernelMatrix32 = KernelMatrix<f32>;
pub type AblationReport64 = AblationReport<f64>;
pub type StatsReport64 = StatsReport<f64>;
