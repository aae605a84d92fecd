// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer localization by clean / corrupted / restored runs.
//!
//! For every layer `l` the recovery score
//!
//! ```text
//! R(l) = (P_restored(l) - P_corrupted) / (P_clean - P_corrupted)
//! ```
//!
//! is averaged over informative prompt pairs, and the critical layer is the
//! argmax of the averaged profile (lowest index on ties).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Intervention, Model};
use crate::prompts::PromptPair;
use crate::scalar::Scalar;

/// Smallest `|P_clean - P_corrupted|` for which a pair counts as informative.
pub const DEFAULT_DENOM_EPSILON: f64 = 1e-9;

/// Recovery score with the default denominator guard.
pub fn recovery_score<T: Scalar>(p_clean: T, p_corrupted: T, p_restored: T) -> Result<T> {
    recovery_score_with_epsilon(p_clean, p_corrupted, p_restored, DEFAULT_DENOM_EPSILON)
}

pub fn recovery_score_with_epsilon<T: Scalar>(
    p_clean: T,
    p_corrupted: T,
    p_restored: T,
    epsilon: f64,
) -> Result<T> {
    let denom = p_clean - p_corrupted;
    if !(denom.abs().to_f64_lossy() >= epsilon) {
        return Err(Error::UninformativePair {
            gap: denom.abs().to_f64_lossy(),
            epsilon,
        });
    }
    Ok((p_restored - p_corrupted) / denom)
}

/// Where clean activations are patched into the corrupted run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSite {
    /// Replace layer `l`'s residual write at the final position.
    #[default]
    FinalLayerOutput,
    /// Overwrite the residual stream after layer `l` at the subject position.
    ///
    /// Under causal attention the subject position depends only on the
    /// prompt prefix, so restoring it at any layer before the first reader
    /// recovers the full clean behaviour. Profiles from this site plateau
    /// instead of peaking at the reading layer.
    SubjectResidual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceOptions {
    pub site: PatchSite,
    pub denom_epsilon: f64,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions {
            site: PatchSite::default(),
            denom_epsilon: DEFAULT_DENOM_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryProfile<T> {
    /// Mean `R(l)` per layer.
    pub scores: Vec<T>,
    pub critical_layer: usize,
    pub p_clean: T,
    pub p_corrupted: T,
    /// Pairs that contributed (informative ones).
    pub n_pairs: usize,
}

impl<T: Scalar> RecoveryProfile<T> {
    /// `layer,mean_R,n_pairs` rows, one per layer.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,mean_R,n_pairs\n");
        for (l, r) in self.scores.iter().enumerate() {
            writeln!(s, "{l},{r},{}", self.n_pairs).unwrap();
        }
        s
    }
}

/// Argmax of `scores`, lowest index on ties. NaN entries never win.
pub fn select_critical_layer<T: Scalar>(scores: &[T]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] || (scores[best].is_nan() && !s.is_nan()) {
            best = i;
        }
    }
    best
}

fn restore_at<T: Scalar>(
    clean: &ForwardTrace<T>,
    pair: &PromptPair,
    layer: usize,
    site: PatchSite,
) -> Intervention<T> {
    match site {
        PatchSite::FinalLayerOutput => {
            let position = pair.final_position();
            Intervention::RestoreLayerOutput {
                layer,
                position,
                vector: clean.layer_outputs[layer][position].clone(),
            }
        }
        PatchSite::SubjectResidual => {
            let position = pair.subject_position;
            Intervention::RestoreResidual {
                layer,
                position,
                vector: clean.residual_states[layer + 1][position].clone(),
            }
        }
    }
}

struct PairRuns<T> {
    clean: ForwardTrace<T>,
    p_clean: T,
    p_corrupted: T,
}

fn informative_runs<'a, T: Scalar>(
    model: &Model<T>,
    pairs: &'a [PromptPair],
    epsilon: f64,
) -> Result<Vec<(&'a PromptPair, PairRuns<T>)>> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData(
            "layer scan needs prompt pairs".into(),
        ));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        pair.validate()?;
        let clean = model.forward(&pair.reference_tokens, &[])?;
        let corrupted = model.forward(&pair.noise_tokens, &[])?;
        let p_clean = clean.prob(pair.target_token);
        let p_corrupted = corrupted.prob(pair.target_token);
        let gap = (p_clean - p_corrupted).abs().to_f64_lossy();
        if !(gap >= epsilon) {
            log::warn!("excluding uninformative pair {i}: |p_clean - p_corrupted| = {gap:e}");
            continue;
        }
        out.push((
            pair,
            PairRuns {
                clean,
                p_clean,
                p_corrupted,
            },
        ));
    }
    if out.is_empty() {
        return Err(Error::AllPairsUninformative(pairs.len()));
    }
    Ok(out)
}

/// Recovery profile with default options.
pub fn layer_scan<T: Scalar>(model: &Model<T>, pairs: &[PromptPair]) -> Result<RecoveryProfile<T>> {
    layer_scan_with(model, pairs, &TraceOptions::default())
}

pub fn layer_scan_with<T: Scalar>(
    model: &Model<T>,
    pairs: &[PromptPair],
    options: &TraceOptions,
) -> Result<RecoveryProfile<T>> {
    let runs = informative_runs(model, pairs, options.denom_epsilon)?;
    let n = T::from_usize_lossy(runs.len());
    let mut scores = vec![T::zero(); model.n_layers()];
    for (pair, r) in &runs {
        for (layer, score) in scores.iter_mut().enumerate() {
            let patch = restore_at(&r.clean, pair, layer, options.site);
            let p_restored = model
                .forward(&pair.noise_tokens, &[patch])?
                .prob(pair.target_token);
            *score = *score
                + recovery_score_with_epsilon(
                    r.p_clean,
                    r.p_corrupted,
                    p_restored,
                    options.denom_epsilon,
                )?;
        }
    }
    scores.iter_mut().for_each(|s| *s = *s / n);
    let p_clean = runs.iter().map(|(_, r)| r.p_clean).sum::<T>() / n;
    let p_corrupted = runs.iter().map(|(_, r)| r.p_corrupted).sum::<T>() / n;
    if !(p_clean > p_corrupted) {
        return Err(Error::validation(
            "prompt pairs",
            format!("mean clean probability {p_clean} does not exceed corrupted {p_corrupted}"),
        ));
    }
    Ok(RecoveryProfile {
        critical_layer: select_critical_layer(&scores),
        scores,
        p_clean,
        p_corrupted,
        n_pairs: runs.len(),
    })
}

/// Diagnostic: mean recovery when every layer is restored at once.
/// Should be 1 for any patch site that covers the whole causal path.
pub fn all_layer_restoration<T: Scalar>(
    model: &Model<T>,
    pairs: &[PromptPair],
    options: &TraceOptions,
) -> Result<T> {
    let runs = informative_runs(model, pairs, options.denom_epsilon)?;
    let mut total = T::zero();
    for (pair, r) in &runs {
        let patches: Vec<_> = (0..model.n_layers())
            .map(|l| restore_at(&r.clean, pair, l, options.site))
            .collect();
        let p_restored = model
            .forward(&pair.noise_tokens, &patches)?
            .prob(pair.target_token);
        total = total
            + recovery_score_with_epsilon(
                r.p_clean,
                r.p_corrupted,
                p_restored,
                options.denom_epsilon,
            )?;
    }
    Ok(total / T::from_usize_lossy(runs.len()))
}
