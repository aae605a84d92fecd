// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration and per-stage seed derivation.

use std::fs;
use std::path::{Path, PathBuf};

use qsieve::{AblationKind, Error, ModelConfig, PlantSpec, ProbeConfig, SampleSet, TraceOptions};
use serde::{Deserialize, Serialize};

/// The synthetic model section. `config.seed` is ignored on load and
/// replaced by the seed derived for [`Stage::Model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default)]
    pub config: ModelConfig,
    #[serde(default)]
    pub plant: PlantSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<SyntheticSpec>,
    /// Directory holding `manifest.json` plus the activation tensor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_pairs")]
    pub n_prompt_pairs: usize,
    #[serde(default)]
    pub probe: ProbeConfig,
    /// Qubits per head. Overrides `probe.k` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qubits: Option<usize>,
    #[serde(default)]
    pub sample_set: SampleSet,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub ablation_mode: AblationKind,
    #[serde(default)]
    pub trace: TraceOptions,
    /// Heads ablated jointly for the statistics stage, ranked by mean
    /// selected probe weight.
    #[serde(default = "default_driver_heads")]
    pub driver_heads: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_pairs() -> usize {
    32
}

fn default_tau() -> f64 {
    qsieve::analysis::DEFAULT_TAU
}

fn default_driver_heads() -> usize {
    2
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("qsieve-out")
}

impl RunConfig {
    pub fn synthetic(spec: SyntheticSpec) -> Self {
        RunConfig {
            model: Some(spec),
            dataset: None,
            n_prompt_pairs: default_pairs(),
            probe: ProbeConfig::default(),
            qubits: None,
            sample_set: SampleSet::default(),
            tau: default_tau(),
            ablation_mode: AblationKind::default(),
            trace: TraceOptions::default(),
            driver_heads: default_driver_heads(),
            output_dir: default_output_dir(),
            seed: 0,
        }
    }

    /// Reads and validates a config. Relative dataset paths resolve against
    /// the config file's directory.
    pub fn load(path: &Path) -> qsieve::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::validation("config", format!("cannot read {}: {e}", path.display()))
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        if let (Some(d), Some(base)) = (cfg.dataset.as_mut(), path.parent()) {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
        cfg.finalize()?;
        Ok(cfg)
    }

    /// Applies `qubits` and the derived model seed, then validates.
    pub fn finalize(&mut self) -> qsieve::Result<()> {
        if let Some(q) = self.qubits {
            self.probe.k = q;
        }
        self.probe.seed = derive_seed(self.seed, Stage::Probe);
        let model_seed = derive_seed(self.seed, Stage::Model);
        if let Some(m) = self.model.as_mut() {
            m.config.seed = model_seed;
        }
        self.validate()
    }

    pub fn validate(&self) -> qsieve::Result<()> {
        match (&self.model, &self.dataset) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::validation(
                    "model/dataset",
                    "exactly one of `model` and `dataset` must be set",
                ))
            }
            (Some(m), None) => {
                m.config.validate()?;
                m.plant.validate(&m.config)?;
                self.probe.validate(m.config.d_head())?;
            }
            (None, Some(_)) => {}
        }
        if self.n_prompt_pairs < 2 {
            return Err(Error::validation("n_prompt_pairs", "must be >= 2"));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::validation("tau", "must be finite and > 0"));
        }
        if self.driver_heads == 0 {
            return Err(Error::validation("driver_heads", "must be >= 1"));
        }
        if !(self.trace.denom_epsilon.is_finite() && self.trace.denom_epsilon > 0.0) {
            return Err(Error::validation(
                "trace.denom_epsilon",
                "must be finite and > 0",
            ));
        }
        Ok(())
    }
}

/// Pipeline stages that draw randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Model = 1,
    Prompts = 2,
    Probe = 3,
}

/// SplitMix64 over `master + stage * golden`: each stage gets an
/// independent stream that does not shift when other stages change.
pub fn derive_seed(master: u64, stage: Stage) -> u64 {
    let mut z = master.wrapping_add((stage as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub model: u64,
    pub prompts: u64,
    pub probe: u64,
}

impl StageSeeds {
    pub fn from_master(master: u64) -> Self {
        StageSeeds {
            model: derive_seed(master, Stage::Model),
            prompts: derive_seed(master, Stage::Prompts),
            probe: derive_seed(master, Stage::Probe),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> qsieve::Result<RunConfig> {
        let mut c: RunConfig = serde_json::from_str(s)?;
        c.finalize()?;
        Ok(c)
    }

    #[test]
    fn minimal_synthetic() {
        let c = parse(r#"{"model": {}, "seed": 7}"#).unwrap();
        assert_eq!(c.n_prompt_pairs, 32);
        assert_eq!(c.model.unwrap().config.seed, derive_seed(7, Stage::Model));
    }

    #[test]
    fn exactly_one_source() {
        let e = parse(r#"{}"#).unwrap_err();
        assert!(e.to_string().contains("model/dataset"));
        let e = parse(r#"{"model": {}, "dataset": "x"}"#).unwrap_err();
        assert!(e.is_validation());
    }

    #[test]
    fn field_names_in_errors() {
        let e = parse(r#"{"model": {}, "tau": 0}"#).unwrap_err();
        assert!(e.to_string().contains("tau"), "{e}");
        let e = parse(r#"{"model": {}, "qubits": 99}"#).unwrap_err();
        assert!(e.to_string().contains("probe.k"), "{e}");
        let e = parse(r#"{"model": {}, "bogus": 1}"#).unwrap_err();
        assert!(e.is_validation(), "{e}");
    }

    #[test]
    fn qubits_override_k() {
        let c = parse(r#"{"model": {}, "qubits": 3}"#).unwrap();
        assert_eq!(c.probe.k, 3);
    }

    #[test]
    fn stage_seeds_differ() {
        let s = StageSeeds::from_master(0);
        assert_ne!(s.model, s.prompts);
        assert_ne!(s.prompts, s.probe);
        assert_eq!(s, StageSeeds::from_master(0));
        assert_ne!(s, StageSeeds::from_master(1));
    }
}
