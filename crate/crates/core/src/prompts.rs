// SPDX-License-Identifier: MIT OR Apache-2.0

//! Contrastive prompt pairs and activation extraction from the synthetic
//! model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, TokenId};
use crate::scalar::Scalar;
use crate::store::{ActivationDataset, ActivationSample, DatasetInfo, SampleLabel};

/// A reference prompt and its subject-corrupted twin.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptPair {
    pub reference_tokens: Vec<TokenId>,
    pub noise_tokens: Vec<TokenId>,
    pub subject_position: usize,
    pub target_token: TokenId,
}

impl PromptPair {
    pub fn validate(&self) -> Result<()> {
        let n = self.reference_tokens.len();
        if n != self.noise_tokens.len() {
            return Err(Error::DimensionMismatch {
                what: "prompt pair",
                left: n,
                right: self.noise_tokens.len(),
            });
        }
        if self.subject_position >= n {
            return Err(Error::IndexOutOfRange {
                what: "subject_position",
                index: self.subject_position,
                limit: n,
            });
        }
        let differs: Vec<usize> = (0..n)
            .filter(|&i| self.reference_tokens[i] != self.noise_tokens[i])
            .collect();
        if differs != [self.subject_position] {
            return Err(Error::validation(
                "noise_tokens",
                format!(
                    "must differ from the reference exactly at position {}, differ at {differs:?}",
                    self.subject_position
                ),
            ));
        }
        Ok(())
    }

    pub fn final_position(&self) -> usize {
        self.reference_tokens.len() - 1
    }
}

/// Generates `n_pairs` distinct prompt pairs.
///
/// Each reference prompt is `prompt_len - 1` filler tokens with one replaced
/// by a fact-table subject, followed by the query token. The noise twin swaps
/// the subject for a filler token.
pub fn make_prompt_pairs<T: Scalar>(
    model: &Model<T>,
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<PromptPair>> {
    let plant = model.plant();
    let subjects = plant.subjects();
    if subjects.is_empty() {
        return Err(Error::validation("fact_table", "must not be empty"));
    }
    let fillers = model.filler_tokens();
    let len = model.config().prompt_len;
    let n_slots = len - 1;

    // Mixed-radix layout of one pair index, least significant first:
    // fact, subject position, one filler per non-subject slot, noise token.
    let mut radices = vec![subjects.len(), n_slots];
    radices.extend(std::iter::repeat_n(fillers.len(), n_slots - 1));
    radices.push(fillers.len());
    let capacity = radices
        .iter()
        .try_fold(1usize, |acc, &r| acc.checked_mul(r))
        .unwrap_or(usize::MAX);
    if n_pairs > capacity {
        return Err(Error::PromptCapacity {
            requested: n_pairs,
            capacity,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, capacity, n_pairs);
    let pairs = picks
        .into_iter()
        .map(|mut idx| {
            let mut digit = |radix: usize| {
                let d = idx % radix;
                idx /= radix;
                d
            };
            let subject = subjects[digit(subjects.len())];
            let subject_position = digit(n_slots);
            let mut reference_tokens = Vec::with_capacity(len);
            for slot in 0..n_slots {
                if slot == subject_position {
                    reference_tokens.push(subject);
                } else {
                    reference_tokens.push(fillers[digit(fillers.len())]);
                }
            }
            reference_tokens.push(plant.query_token);
            let mut noise_tokens = reference_tokens.clone();
            noise_tokens[subject_position] = fillers[digit(fillers.len())];
            PromptPair {
                reference_tokens,
                noise_tokens,
                subject_position,
                target_token: plant.fact_table[&subject],
            }
        })
        .collect();
    Ok(pairs)
}

/// Records every head's final-position output at `layer` for the reference
/// and noise prompt of each pair.
pub fn extract_activations<T: Scalar>(
    model: &Model<T>,
    pairs: &[PromptPair],
    layer: usize,
    seed: u64,
) -> Result<ActivationDataset> {
    if layer >= model.n_layers() {
        return Err(Error::IndexOutOfRange {
            what: "layer",
            index: layer,
            limit: model.n_layers(),
        });
    }
    let sample = |tokens: &[TokenId], label, prompt_id: usize| -> Result<ActivationSample> {
        let trace = model.forward(tokens, &[])?;
        let last = tokens.len() - 1;
        Ok(ActivationSample {
            label,
            prompt_id: prompt_id as i64,
            head_vectors: trace.head_outputs[layer]
                .iter()
                .map(|positions| positions[last].iter().map(|x| x.to_f32_lossy()).collect())
                .collect(),
        })
    };
    let mut samples = Vec::with_capacity(2 * pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        samples.push(sample(&p.reference_tokens, SampleLabel::Reference, i)?);
    }
    for (i, p) in pairs.iter().enumerate() {
        samples.push(sample(&p.noise_tokens, SampleLabel::Noise, i)?);
    }
    ActivationDataset::new(
        DatasetInfo {
            model_name: format!("synthetic-seed{}", model.config().seed),
            layer_index: layer,
            seed,
        },
        samples,
    )
}
