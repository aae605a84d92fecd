// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic synthetic transformer with plantable circuits.
//!
//! The model is a pre-LN-free decoder: token + positional embedding, then
//! `n_layers` blocks of causal multi-head attention followed by a ReLU MLP,
//! each writing additively into the residual stream, then an unembedding
//! and softmax at the last position.
//!
//! Every weight is seeded low-magnitude noise except the planted pieces:
//!
//! - **Recall head** at `(recall_layer, recall_head)`: attends from the query
//!   token to the subject token and writes `recall_gain` along the fact's
//!   attribute unembedding direction.
//! - **Suppression head** at `(suppression_layer, suppression_head)`: same
//!   read pattern, writes `-suppression_strength` along that direction.
//!
//! The residual basis reserves coordinates for these mechanisms:
//!
//! ```text
//! 0                 subject flag (present on every subject token)
//! 1                 query flag   (present on the query token)
//! 2 .. 2+F          subject identity, one per fact
//! 2+F .. 2+2F       attribute readout, one per fact
//! 2+2F .. d_model   free coordinates (seeded token/position features)
//! ```

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{dot, matvec, softmax, Scalar};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    /// Hidden width of each MLP block.
    pub d_mlp: usize,
    pub max_seq_len: usize,
    /// Length of prompts produced by [`make_prompt_pairs`](crate::make_prompt_pairs).
    pub prompt_len: usize,
    /// Standard deviation of the non-planted attention and MLP weights.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 32,
            vocab_size: 64,
            d_mlp: 64,
            max_seq_len: 16,
            prompt_len: 6,
            noise_scale: 0.01,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
            ("d_mlp", self.d_mlp),
            ("max_seq_len", self.max_seq_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::validation(field, "must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::validation(
                "d_model",
                format!(
                    "{} is not divisible by n_heads = {}",
                    self.d_model, self.n_heads
                ),
            ));
        }
        if self.prompt_len < 2 || self.prompt_len > self.max_seq_len {
            return Err(Error::validation(
                "prompt_len",
                format!("must lie in [2, max_seq_len = {}]", self.max_seq_len),
            ));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(Error::validation("noise_scale", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantSpec {
    pub recall_layer: usize,
    pub recall_head: usize,
    /// Logit contributed to the attribute token by the recall head.
    pub recall_gain: f64,
    pub suppression_layer: usize,
    pub suppression_head: usize,
    /// Logit removed from the attribute token. Zero leaves the head unplanted.
    pub suppression_strength: f64,
    /// Subject token -> attribute token.
    pub fact_table: BTreeMap<TokenId, TokenId>,
    /// Token placed at the final position of every prompt.
    pub query_token: TokenId,
    /// Attention logit the planted heads assign to the subject position.
    pub attention_sharpness: f64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        PlantSpec {
            recall_layer: 2,
            recall_head: 1,
            recall_gain: 5.0,
            suppression_layer: 2,
            suppression_head: 3,
            suppression_strength: 0.1,
            fact_table: (0..4).map(|i| (10 + i, 40 + i)).collect(),
            query_token: 0,
            attention_sharpness: 12.0,
        }
    }
}

impl PlantSpec {
    /// Subject tokens in ascending order. A fact's index in this list selects
    /// its reserved residual coordinates.
    pub fn subjects(&self) -> Vec<TokenId> {
        self.fact_table.keys().copied().collect()
    }

    pub fn attribute_of(&self, subject: TokenId) -> Option<TokenId> {
        self.fact_table.get(&subject).copied()
    }

    pub fn has_suppression(&self) -> bool {
        self.suppression_strength > 0.0
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let n_facts = self.fact_table.len();
        let check = |what: &'static str, index: usize, limit: usize| {
            if index >= limit {
                Err(Error::IndexOutOfRange { what, index, limit })
            } else {
                Ok(())
            }
        };
        check("recall_layer", self.recall_layer, config.n_layers)?;
        check("recall_head", self.recall_head, config.n_heads)?;
        check("suppression_layer", self.suppression_layer, config.n_layers)?;
        check("suppression_head", self.suppression_head, config.n_heads)?;
        if self.has_suppression()
            && (self.recall_layer, self.recall_head)
                == (self.suppression_layer, self.suppression_head)
        {
            return Err(Error::validation(
                "suppression_head",
                "recall and suppression plants share a head",
            ));
        }
        if !(self.recall_gain.is_finite() && self.recall_gain > 0.0) {
            return Err(Error::validation("recall_gain", "must be finite and > 0"));
        }
        if !(self.suppression_strength.is_finite() && self.suppression_strength >= 0.0) {
            return Err(Error::validation(
                "suppression_strength",
                "must be finite and >= 0",
            ));
        }
        if !(self.attention_sharpness.is_finite() && self.attention_sharpness >= 0.0) {
            return Err(Error::validation(
                "attention_sharpness",
                "must be finite and >= 0",
            ));
        }
        if n_facts == 0 {
            return Err(Error::validation("fact_table", "must not be empty"));
        }
        if n_facts > config.d_head() {
            return Err(Error::validation(
                "fact_table",
                format!("{n_facts} facts exceed d_head = {}", config.d_head()),
            ));
        }
        if 2 + 2 * n_facts >= config.d_model {
            return Err(Error::validation(
                "fact_table",
                format!(
                    "{n_facts} facts leave no free residual coordinates in d_model = {}",
                    config.d_model
                ),
            ));
        }
        let vocab = config.vocab_size;
        let mut seen = BTreeSet::new();
        let tokens = std::iter::once(self.query_token)
            .chain(self.fact_table.keys().copied())
            .chain(self.fact_table.values().copied());
        for t in tokens {
            if t as usize >= vocab {
                return Err(Error::TokenOutOfVocab {
                    token: t,
                    vocab_size: vocab,
                });
            }
            if !seen.insert(t) {
                return Err(Error::validation(
                    "fact_table",
                    format!("token {t} plays more than one role (subject, attribute, query)"),
                ));
            }
        }
        if seen.len() >= vocab {
            return Err(Error::validation(
                "vocab_size",
                "no filler tokens left after subjects, attributes and query",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AblationMode<T> {
    Zero,
    /// Replace the head output with this calibration mean (`d_head` values).
    Mean(Vec<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Intervention<T> {
    /// Overwrite the residual stream after `layer` at `position`.
    RestoreResidual {
        layer: usize,
        position: usize,
        vector: Vec<T>,
    },
    /// Replace what `layer` writes into the residual stream at `position`
    /// (attention plus MLP contribution), leaving the incoming residual
    /// untouched.
    RestoreLayerOutput {
        layer: usize,
        position: usize,
        vector: Vec<T>,
    },
    /// Replace one head's output at every position before the output
    /// projection.
    AblateHead {
        layer: usize,
        head: usize,
        mode: AblationMode<T>,
    },
}

impl<T> Intervention<T> {
    pub fn layer(&self) -> usize {
        match self {
            Intervention::RestoreResidual { layer, .. }
            | Intervention::RestoreLayerOutput { layer, .. }
            | Intervention::AblateHead { layer, .. } => *layer,
        }
    }
}

/// Every hook point recorded during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    /// `[n_layers + 1][seq_len][d_model]`; index 0 is the embedding.
    pub residual_states: Vec<Vec<Vec<T>>>,
    /// `[n_layers][seq_len][d_model]`: each layer's additive write, as applied
    /// (after any `RestoreLayerOutput`).
    pub layer_outputs: Vec<Vec<Vec<T>>>,
    /// `[n_layers][n_heads][seq_len][d_head]`, after ablation.
    pub head_outputs: Vec<Vec<Vec<Vec<T>>>>,
    /// Softmax over the last position's logits.
    pub final_probabilities: Vec<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn prob(&self, token: TokenId) -> T {
        self.final_probabilities[token as usize]
    }

    pub fn seq_len(&self) -> usize {
        self.residual_states[0].len()
    }
}

#[derive(Debug, Clone)]
struct HeadWeights<T> {
    /// `d_head x d_model`
    w_q: Vec<T>,
    w_k: Vec<T>,
    w_v: Vec<T>,
    /// `d_model x d_head`
    w_o: Vec<T>,
}

#[derive(Debug, Clone)]
struct Block<T> {
    heads: Vec<HeadWeights<T>>,
    /// `d_mlp x d_model`
    mlp_in: Vec<T>,
    mlp_bias: Vec<T>,
    /// `d_model x d_mlp`
    mlp_out: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    plant: PlantSpec,
    /// `vocab_size x d_model`
    token_embed: Vec<T>,
    /// `max_seq_len x d_model`
    pos_embed: Vec<T>,
    blocks: Vec<Block<T>>,
    /// `vocab_size x d_model`
    unembed: Vec<T>,
}

const FLAG_DIM: usize = 0;
const QUERY_DIM: usize = 1;

struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    fn normals<T: Scalar>(&mut self, n: usize, std: f64) -> Vec<T> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                T::lit(z * std)
            })
            .collect()
    }
}

/// Builds the synthetic model. Identical `(config, plant)` always yields
/// bitwise-identical weights.
pub fn build_synthetic_model<T: Scalar>(config: ModelConfig, plant: PlantSpec) -> Result<Model<T>> {
    config.validate()?;
    plant.validate(&config)?;

    let d = config.d_model;
    let dh = config.d_head();
    let n_facts = plant.fact_table.len();
    let free_start = 2 + 2 * n_facts;
    let n_free = d - free_start;
    let mut s = Sampler {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };

    // Seeded features live only in the free coordinates.
    let free_rows = |rows: usize, std: f64, s: &mut Sampler| -> Vec<T> {
        let mut m = vec![T::zero(); rows * d];
        for r in 0..rows {
            let vals: Vec<T> = s.normals(n_free, std);
            m[r * d + free_start..(r + 1) * d].copy_from_slice(&vals);
        }
        m
    };
    let free_std = 1.0 / (n_free as f64).sqrt();
    let mut token_embed = free_rows(config.vocab_size, free_std, &mut s);
    let pos_embed = free_rows(config.max_seq_len, 0.1 * free_std, &mut s);
    let mut unembed = free_rows(config.vocab_size, 0.5 * free_std, &mut s);

    let ns = config.noise_scale;
    let mut blocks: Vec<Block<T>> = (0..config.n_layers)
        .map(|_| Block {
            heads: (0..config.n_heads)
                .map(|_| HeadWeights {
                    w_q: s.normals(dh * d, ns),
                    w_k: s.normals(dh * d, ns),
                    w_v: s.normals(dh * d, ns),
                    w_o: s.normals(d * dh, ns),
                })
                .collect(),
            mlp_in: s.normals(config.d_mlp * d, ns),
            mlp_bias: vec![T::zero(); config.d_mlp],
            mlp_out: s.normals(d * config.d_mlp, ns),
        })
        .collect();

    for (i, (&subject, &attribute)) in plant.fact_table.iter().enumerate() {
        let row = subject as usize * d;
        token_embed[row + FLAG_DIM] = T::one();
        token_embed[row + 2 + i] = T::one();
        unembed[attribute as usize * d + 2 + n_facts + i] = T::one();
    }
    token_embed[plant.query_token as usize * d + QUERY_DIM] = T::one();

    // q.k / sqrt(d_head) == attention_sharpness between query and subject.
    let qk = (plant.attention_sharpness * (dh as f64).sqrt()).sqrt();
    let planted_head = |write_gain: f64| {
        let mut h = HeadWeights {
            w_q: vec![T::zero(); dh * d],
            w_k: vec![T::zero(); dh * d],
            w_v: vec![T::zero(); dh * d],
            w_o: vec![T::zero(); d * dh],
        };
        h.w_q[QUERY_DIM] = T::lit(qk);
        h.w_k[FLAG_DIM] = T::lit(qk);
        for i in 0..n_facts {
            // value code of fact i is head-space axis i
            h.w_v[i * d + 2 + i] = T::one();
            h.w_o[(2 + n_facts + i) * dh + i] = T::lit(write_gain);
        }
        h
    };
    blocks[plant.recall_layer].heads[plant.recall_head] = planted_head(plant.recall_gain);
    if plant.has_suppression() {
        blocks[plant.suppression_layer].heads[plant.suppression_head] =
            planted_head(-plant.suppression_strength);
    }

    Ok(Model {
        config,
        plant,
        token_embed,
        pos_embed,
        blocks,
        unembed,
    })
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plant(&self) -> &PlantSpec {
        &self.plant
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.config.n_heads
    }

    /// Tokens that are neither subjects, attributes nor the query token.
    pub fn filler_tokens(&self) -> Vec<TokenId> {
        let reserved: BTreeSet<TokenId> = std::iter::once(self.plant.query_token)
            .chain(self.plant.fact_table.keys().copied())
            .chain(self.plant.fact_table.values().copied())
            .collect();
        (0..self.config.vocab_size as TokenId)
            .filter(|t| !reserved.contains(t))
            .collect()
    }

    /// Copy of this model with one head's output projection zeroed.
    pub fn with_dead_head(&self, layer: usize, head: usize) -> Result<Self> {
        self.check_head(layer, head)?;
        let mut m = self.clone();
        m.blocks[layer].heads[head].w_o.fill(T::zero());
        Ok(m)
    }

    fn check_head(&self, layer: usize, head: usize) -> Result<()> {
        if layer >= self.config.n_layers {
            return Err(Error::IndexOutOfRange {
                what: "layer",
                index: layer,
                limit: self.config.n_layers,
            });
        }
        if head >= self.config.n_heads {
            return Err(Error::IndexOutOfRange {
                what: "head",
                index: head,
                limit: self.config.n_heads,
            });
        }
        Ok(())
    }

    fn check_intervention(&self, iv: &Intervention<T>, seq_len: usize) -> Result<()> {
        let d = self.config.d_model;
        match iv {
            Intervention::RestoreResidual {
                layer,
                position,
                vector,
            }
            | Intervention::RestoreLayerOutput {
                layer,
                position,
                vector,
            } => {
                if *layer >= self.config.n_layers {
                    return Err(Error::IndexOutOfRange {
                        what: "layer",
                        index: *layer,
                        limit: self.config.n_layers,
                    });
                }
                if *position >= seq_len {
                    return Err(Error::IndexOutOfRange {
                        what: "position",
                        index: *position,
                        limit: seq_len,
                    });
                }
                if vector.len() != d {
                    return Err(Error::DimensionMismatch {
                        what: "restore vector",
                        left: vector.len(),
                        right: d,
                    });
                }
            }
            Intervention::AblateHead { layer, head, mode } => {
                self.check_head(*layer, *head)?;
                if let AblationMode::Mean(mean) = mode {
                    if mean.len() != self.config.d_head() {
                        return Err(Error::DimensionMismatch {
                            what: "ablation mean",
                            left: mean.len(),
                            right: self.config.d_head(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Runs the model over `tokens`, applying `interventions` at their hook
    /// points, and records every intermediate state.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        interventions: &[Intervention<T>],
    ) -> Result<ForwardTrace<T>> {
        let cfg = &self.config;
        let (d, dh) = (cfg.d_model, cfg.d_head());
        let seq = tokens.len();
        if seq == 0 {
            return Err(Error::validation("tokens", "empty sequence"));
        }
        if seq > cfg.max_seq_len {
            return Err(Error::IndexOutOfRange {
                what: "sequence length",
                index: seq,
                limit: cfg.max_seq_len + 1,
            });
        }
        for &t in tokens {
            if t as usize >= cfg.vocab_size {
                return Err(Error::TokenOutOfVocab {
                    token: t,
                    vocab_size: cfg.vocab_size,
                });
            }
        }
        for iv in interventions {
            self.check_intervention(iv, seq)?;
        }

        let mut x: Vec<Vec<T>> = tokens
            .iter()
            .enumerate()
            .map(|(p, &t)| {
                let te = &self.token_embed[t as usize * d..(t as usize + 1) * d];
                let pe = &self.pos_embed[p * d..(p + 1) * d];
                te.iter().zip(pe).map(|(&a, &b)| a + b).collect()
            })
            .collect();

        let mut residual_states = Vec::with_capacity(cfg.n_layers + 1);
        let mut layer_outputs = Vec::with_capacity(cfg.n_layers);
        let mut head_outputs = Vec::with_capacity(cfg.n_layers);
        residual_states.push(x.clone());
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();

        for (l, block) in self.blocks.iter().enumerate() {
            let mut layer_heads = Vec::with_capacity(cfg.n_heads);
            for (h, hw) in block.heads.iter().enumerate() {
                let q: Vec<Vec<T>> = x.iter().map(|r| matvec(&hw.w_q, r, dh)).collect();
                let k: Vec<Vec<T>> = x.iter().map(|r| matvec(&hw.w_k, r, dh)).collect();
                let v: Vec<Vec<T>> = x.iter().map(|r| matvec(&hw.w_v, r, dh)).collect();
                let mut out: Vec<Vec<T>> = (0..seq)
                    .map(|i| {
                        let scores: Vec<T> = (0..=i).map(|j| dot(&q[i], &k[j]) * scale).collect();
                        let attn = softmax(&scores);
                        let mut o = vec![T::zero(); dh];
                        for (j, &a) in attn.iter().enumerate() {
                            for (oc, &vc) in o.iter_mut().zip(&v[j]) {
                                *oc = *oc + a * vc;
                            }
                        }
                        o
                    })
                    .collect();
                for iv in interventions {
                    if let Intervention::AblateHead { layer, head, mode } = iv {
                        if *layer == l && *head == h {
                            let fill = match mode {
                                AblationMode::Zero => vec![T::zero(); dh],
                                AblationMode::Mean(m) => m.clone(),
                            };
                            out.iter_mut().for_each(|o| o.clone_from(&fill));
                        }
                    }
                }
                layer_heads.push(out);
            }

            let mut delta: Vec<Vec<T>> = (0..seq)
                .map(|p| {
                    let mut a = vec![T::zero(); d];
                    for (hw, out) in block.heads.iter().zip(&layer_heads) {
                        let w = matvec(&hw.w_o, &out[p], d);
                        for (ac, wc) in a.iter_mut().zip(w) {
                            *ac = *ac + wc;
                        }
                    }
                    let mid: Vec<T> = x[p].iter().zip(&a).map(|(&r, &ac)| r + ac).collect();
                    let hidden: Vec<T> = matvec(&block.mlp_in, &mid, cfg.d_mlp)
                        .into_iter()
                        .zip(&block.mlp_bias)
                        .map(|(z, &b)| (z + b).max(T::zero()))
                        .collect();
                    let m = matvec(&block.mlp_out, &hidden, d);
                    a.iter().zip(m).map(|(&ac, mc)| ac + mc).collect()
                })
                .collect();

            for iv in interventions {
                if let Intervention::RestoreLayerOutput {
                    layer,
                    position,
                    vector,
                } = iv
                {
                    if *layer == l {
                        delta[*position].clone_from(vector);
                    }
                }
            }
            let mut next: Vec<Vec<T>> = x
                .iter()
                .zip(&delta)
                .map(|(r, dl)| r.iter().zip(dl).map(|(&a, &b)| a + b).collect())
                .collect();
            for iv in interventions {
                if let Intervention::RestoreResidual {
                    layer,
                    position,
                    vector,
                } = iv
                {
                    if *layer == l {
                        next[*position].clone_from(vector);
                    }
                }
            }

            head_outputs.push(layer_heads);
            layer_outputs.push(delta);
            residual_states.push(next.clone());
            x = next;
        }

        let last = &x[seq - 1];
        let logits = matvec(&self.unembed, last, cfg.vocab_size);
        let final_probabilities = softmax(&logits);

        Ok(ForwardTrace {
            residual_states,
            layer_outputs,
            head_outputs,
            final_probabilities,
        })
    }

    /// Mean output of every head over all positions of a calibration batch,
    /// indexed `[layer][head][dim]`.
    pub fn head_means(&self, batch: &[Vec<TokenId>]) -> Result<Vec<Vec<Vec<T>>>> {
        if batch.is_empty() {
            return Err(Error::InsufficientData(
                "mean ablation needs a non-empty calibration batch".into(),
            ));
        }
        let dh = self.config.d_head();
        let mut sums = vec![vec![vec![T::zero(); dh]; self.config.n_heads]; self.config.n_layers];
        let mut count = 0usize;
        for tokens in batch {
            let trace = self.forward(tokens, &[])?;
            count += tokens.len();
            for (l, layer) in trace.head_outputs.iter().enumerate() {
                for (h, positions) in layer.iter().enumerate() {
                    for o in positions {
                        for (s, &v) in sums[l][h].iter_mut().zip(o) {
                            *s = *s + v;
                        }
                    }
                }
            }
        }
        let n = T::from_usize_lossy(count);
        for layer in &mut sums {
            for head in layer {
                head.iter_mut().for_each(|s| *s = *s / n);
            }
        }
        Ok(sums)
    }
}
