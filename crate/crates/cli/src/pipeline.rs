// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stage orchestration. Each stage runs at most once per [`Run`] and later
//! stages pull earlier results on demand, so every subcommand is just "ask
//! for the last stage it needs".

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use qsieve::{
    ablate_and_measure, build_synthetic_model, cross_trace_correlation, extract_activations,
    head_interaction_matrix, layer_coherence, layer_scan_with, load_dataset, make_prompt_pairs,
    save_dataset, sieve_layer, welch_t_test, AblationReport64, ActivationDataset, Error,
    KernelMatrix64, Mechanism, Model64, PromptPair, RecoveryProfile64, SieveResult64,
    StatsReport64,
};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, StageSeeds};
use crate::svg;

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const LAYER_SCAN_CSV: &str = "layer_scan.csv";
pub const LAYER_SCAN_SVG: &str = "layer_scan.svg";
pub const COHERENCE_CSV: &str = "coherence_per_layer.csv";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_DROPS_CSV: &str = "ablation_drops.csv";
pub const STATS_JSON: &str = "stats.json";

pub fn kernel_csv_name(layer: usize) -> String {
    format!("kernel_layer{layer}.csv")
}

pub fn kernel_svg_name(layer: usize) -> String {
    format!("kernel_layer{layer}.svg")
}

pub fn sieve_json_name(layer: usize) -> String {
    format!("sieve_layer{layer}.json")
}

pub fn dataset_dir_name(layer: usize) -> String {
    format!("activations_layer{layer}")
}

/// An error tagged with the stage that raised it.
#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct StageError {
    pub stage: &'static str,
    #[source]
    pub source: Error,
}

impl StageError {
    /// 1 for bad input, 2 for runtime failures.
    pub fn exit_code(&self) -> u8 {
        if self.source.is_validation() {
            1
        } else {
            2
        }
    }
}

type StageResult<T> = Result<T, StageError>;

fn at<T>(stage: &'static str, r: qsieve::Result<T>) -> StageResult<T> {
    r.map_err(|source| StageError { stage, source })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieveSummary {
    pub head: usize,
    pub train_accuracy: f64,
    pub selected_indices: Vec<usize>,
    /// Mean `|coefficient|` over the selected coordinates.
    pub selected_weight: f64,
}

impl From<&SieveResult64> for SieveSummary {
    fn from(s: &SieveResult64) -> Self {
        SieveSummary {
            head: s.head_index,
            train_accuracy: s.train_accuracy,
            selected_indices: s.selected_indices.clone(),
            selected_weight: s.selected_weight(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SieveStage {
    pub layer: usize,
    pub dataset: ActivationDataset,
    pub sieves: Vec<SieveResult64>,
}

impl SieveStage {
    /// The `n` heads with the largest selected probe weight, ascending.
    pub fn driver_heads(&self, n: usize) -> Vec<usize> {
        let mut ranked: Vec<(usize, f64)> = self
            .sieves
            .iter()
            .map(|s| (s.head_index, s.selected_weight()))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut heads: Vec<usize> = ranked.into_iter().take(n).map(|(h, _)| h).collect();
        heads.sort_unstable();
        heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerKernel {
    pub layer: usize,
    pub coherence: f64,
    pub csv: String,
    pub heatmap: String,
    #[serde(skip)]
    pub matrix: Option<KernelMatrix64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadAblation {
    pub head: usize,
    pub p_before: f64,
    pub p_after: f64,
    pub drop: f64,
    pub mechanism: Mechanism,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationStage {
    pub layer: usize,
    /// One head at a time.
    pub per_head: Vec<HeadAblation>,
    /// The driver heads ablated together; its per-prompt drops feed the
    /// t-test.
    pub drivers: AblationReport64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsStage {
    #[serde(flatten)]
    pub report: StatsReport64,
    pub t_test_population: String,
    pub coherence_per_layer: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: RunConfig,
    pub seeds: StageSeeds,
    pub critical_layer: usize,
    pub recovery_scores: Vec<f64>,
    pub p_clean: f64,
    pub p_corrupted: f64,
    pub n_informative_pairs: usize,
    pub sieve_summaries: Vec<SieveSummary>,
    pub driver_heads: Vec<usize>,
    pub kernels: Vec<LayerKernel>,
    pub ablation: AblationStage,
    pub stats: StatsStage,
    /// Every file written by the run, relative to the output directory.
    pub artifacts: Vec<String>,
    pub timings_ms: BTreeMap<String, f64>,
}

enum Source {
    Synthetic {
        model: Box<Model64>,
        pairs: Vec<PromptPair>,
    },
    Dataset(ActivationDataset),
}

/// One pipeline invocation rooted at an output directory.
pub struct Run {
    config: RunConfig,
    seeds: StageSeeds,
    out: PathBuf,
    source: Option<Source>,
    artifacts: Vec<String>,
    timings: BTreeMap<String, f64>,
    trace: Option<RecoveryProfile64>,
    sieve: Option<SieveStage>,
    kernels: Option<Vec<LayerKernel>>,
    ablation: Option<AblationStage>,
    stats: Option<StatsStage>,
}

impl Run {
    /// `config` must already be finalized (see [`RunConfig::finalize`]).
    pub fn new(config: RunConfig) -> StageResult<Self> {
        at("config", config.validate())?;
        let out = config.output_dir.clone();
        at("config", fs::create_dir_all(&out).map_err(Error::from))?;
        Ok(Run {
            seeds: StageSeeds::from_master(config.seed),
            config,
            out,
            source: None,
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
            trace: None,
            sieve: None,
            kernels: None,
            ablation: None,
            stats: None,
        })
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    pub fn artifacts(&self) -> &[String] {
        &self.artifacts
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let start = Instant::now();
        let r = f(self);
        *self.timings.entry(stage.to_string()).or_insert(0.0) +=
            start.elapsed().as_secs_f64() * 1e3;
        r
    }

    fn write(&mut self, stage: &'static str, name: &str, contents: &[u8]) -> StageResult<()> {
        at(
            stage,
            fs::write(self.out.join(name), contents).map_err(Error::from),
        )?;
        self.record(name);
        Ok(())
    }

    fn record(&mut self, name: &str) {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
    }

    fn source(&mut self, stage: &'static str) -> StageResult<&Source> {
        if self.source.is_none() {
            let src = if let Some(spec) = &self.config.model {
                let model = at(
                    stage,
                    build_synthetic_model::<f64>(spec.config.clone(), spec.plant.clone()),
                )?;
                let pairs = at(
                    stage,
                    make_prompt_pairs(&model, self.config.n_prompt_pairs, self.seeds.prompts),
                )?;
                Source::Synthetic {
                    model: Box::new(model),
                    pairs,
                }
            } else {
                let dir = self.config.dataset.clone().expect("validated config");
                Source::Dataset(at(stage, load_dataset(&dir))?)
            };
            self.source = Some(src);
        }
        Ok(self.source.as_ref().expect("just set"))
    }

    fn synthetic(
        &mut self,
        stage: &'static str,
        what: &str,
    ) -> StageResult<(&Model64, &[PromptPair])> {
        match self.source(stage)? {
            Source::Synthetic { model, pairs } => Ok((model, pairs)),
            Source::Dataset(_) => Err(StageError {
                stage,
                source: Error::validation("model", format!("{what} requires a model")),
            }),
        }
    }

    /// Layer scan; writes the CSV and line plot.
    pub fn trace(&mut self) -> StageResult<RecoveryProfile64> {
        if let Some(t) = &self.trace {
            return Ok(t.clone());
        }
        let profile = self.timed("trace", |run| -> StageResult<_> {
            let options = run.config.trace;
            let (model, pairs) = run.synthetic("trace", "tracing")?;
            at("trace", layer_scan_with(model, pairs, &options))
        })?;
        self.write("trace", LAYER_SCAN_CSV, profile.to_csv().as_bytes())?;
        let plot = svg::line_plot(
            &profile.scores,
            &format!(
                "Recovery score by layer (critical layer {})",
                profile.critical_layer
            ),
            "layer",
            "mean R(l)",
        );
        self.write("trace", LAYER_SCAN_SVG, plot.as_bytes())?;
        self.trace = Some(profile.clone());
        Ok(profile)
    }

    fn extract_and_sieve(&mut self, layer: usize) -> StageResult<SieveStage> {
        let probe = self.config.probe.clone();
        let seed = self.seeds.prompts;
        let dataset = match self.source("sieve")? {
            Source::Synthetic { model, pairs } => {
                at("sieve", extract_activations(model, pairs, layer, seed))?
            }
            Source::Dataset(d) => d.clone(),
        };
        let sieves = at("sieve", sieve_layer::<f64>(&dataset, &probe))?;
        Ok(SieveStage {
            layer,
            dataset,
            sieves,
        })
    }

    /// Probes every head at the critical layer. For a synthetic source the
    /// extracted activations are saved in the dataset format as well.
    pub fn sieve(&mut self) -> StageResult<SieveStage> {
        if let Some(s) = &self.sieve {
            return Ok(s.clone());
        }
        let layer = match self.source("sieve")? {
            Source::Dataset(d) => d.manifest().layer_index,
            Source::Synthetic { .. } => self.trace()?.critical_layer,
        };
        let stage = self.timed("sieve", |run| run.extract_and_sieve(layer))?;
        if matches!(self.source, Some(Source::Synthetic { .. })) {
            let dir = dataset_dir_name(layer);
            at("sieve", save_dataset(&stage.dataset, &self.out.join(&dir)))?;
            self.record(&dir);
        }
        let json = at(
            "sieve",
            serde_json::to_vec_pretty(&stage.sieves).map_err(Error::from),
        )?;
        self.write("sieve", &sieve_json_name(layer), &json)?;
        self.sieve = Some(stage.clone());
        Ok(stage)
    }

    fn emit_kernel(&mut self, layer: usize, k: &KernelMatrix64) -> StageResult<LayerKernel> {
        at("kernel", k.validate())?;
        let coherence = at("kernel", layer_coherence(k))?;
        let csv = kernel_csv_name(layer);
        let heatmap = kernel_svg_name(layer);
        self.write("kernel", &csv, k.to_csv().as_bytes())?;
        let plot = svg::heatmap(
            &k.rows(),
            &format!("Head interaction matrix, layer {layer}"),
        );
        self.write("kernel", &heatmap, plot.as_bytes())?;
        Ok(LayerKernel {
            layer,
            coherence,
            csv,
            heatmap,
            matrix: Some(k.clone()),
        })
    }

    /// Kernel at the critical layer, or at every layer when `all_layers`
    /// (synthetic sources only). The sweep also writes the coherence table.
    pub fn kernel(&mut self, all_layers: bool) -> StageResult<Vec<LayerKernel>> {
        if let Some(k) = &self.kernels {
            if !all_layers || k.len() > 1 {
                return Ok(k.clone());
            }
        }
        let critical = self.sieve()?;
        let sample_set = self.config.sample_set;
        let layers: Vec<usize> = if all_layers {
            let (model, _) = self.synthetic("kernel", "an all-layers sweep")?;
            (0..model.n_layers()).collect()
        } else {
            vec![critical.layer]
        };
        let kernels = self.timed("kernel", |run| -> StageResult<_> {
            let mut out = Vec::with_capacity(layers.len());
            for &layer in &layers {
                let stage = if layer == critical.layer {
                    critical.clone()
                } else {
                    run.extract_and_sieve(layer)?
                };
                let k = at(
                    "kernel",
                    head_interaction_matrix(&stage.dataset, &stage.sieves, sample_set),
                )?;
                out.push(run.emit_kernel(layer, &k)?);
            }
            Ok(out)
        })?;
        if all_layers {
            let mut csv = String::from("layer,coherence\n");
            for k in &kernels {
                writeln!(csv, "{},{}", k.layer, k.coherence).unwrap();
            }
            self.write("kernel", COHERENCE_CSV, csv.as_bytes())?;
        }
        self.kernels = Some(kernels.clone());
        Ok(kernels)
    }

    /// Single-head ablations at the critical layer plus one joint ablation
    /// of the driver heads.
    pub fn ablate(&mut self) -> StageResult<AblationStage> {
        if let Some(a) = &self.ablation {
            return Ok(a.clone());
        }
        self.synthetic("ablate", "ablation")?;
        let sieve = self.sieve()?;
        let drivers = sieve.driver_heads(self.config.driver_heads);
        let (mode, tau, layer) = (self.config.ablation_mode, self.config.tau, sieve.layer);
        let stage = self.timed("ablate", |run| -> StageResult<_> {
            let (model, pairs) = run.synthetic("ablate", "ablation")?;
            let mut per_head = Vec::with_capacity(model.n_heads());
            for head in 0..model.n_heads() {
                let r = at(
                    "ablate",
                    ablate_and_measure(model, pairs, layer, &[head], mode, tau),
                )?;
                per_head.push(HeadAblation {
                    head,
                    p_before: r.p_before,
                    p_after: r.p_after,
                    drop: r.drop,
                    mechanism: r.mechanism,
                });
            }
            let drivers = at(
                "ablate",
                ablate_and_measure(model, pairs, layer, &drivers, mode, tau),
            )?;
            Ok(AblationStage {
                layer,
                per_head,
                drivers,
            })
        })?;
        let json = at(
            "ablate",
            serde_json::to_vec_pretty(&stage).map_err(Error::from),
        )?;
        self.write("ablate", ABLATION_JSON, &json)?;
        self.write(
            "ablate",
            ABLATION_DROPS_CSV,
            stage.drivers.drops_csv().as_bytes(),
        )?;
        self.ablation = Some(stage.clone());
        Ok(stage)
    }

    /// Welch test of driver-ablation drops against control-token drops, and
    /// rank correlation of the recovery profile with per-layer coherence.
    pub fn stats(&mut self) -> StageResult<StatsStage> {
        if let Some(s) = &self.stats {
            return Ok(s.clone());
        }
        let ablation = self.ablate()?;
        let profile = self.trace()?;
        let kernels = self.kernel(true)?;
        let stage = self.timed("stats", |_| -> StageResult<_> {
            let welch = at(
                "stats",
                welch_t_test(&ablation.drivers.per_prompt_drops, &ablation.drivers.control_drops),
            )?;
            let coherence: Vec<f64> = kernels.iter().map(|k| k.coherence).collect();
            let rho = at("stats", cross_trace_correlation(&profile, &coherence))?;
            Ok(StatsStage {
                report: StatsReport64::new(welch, rho),
                t_test_population:
                    "per-prompt target drops vs per-prompt control-token drops under driver ablation"
                        .into(),
                coherence_per_layer: coherence,
            })
        })?;
        let json = at(
            "stats",
            serde_json::to_vec_pretty(&stage).map_err(Error::from),
        )?;
        self.write("stats", STATS_JSON, &json)?;
        self.stats = Some(stage.clone());
        Ok(stage)
    }

    /// Runs every stage in order, then writes the manifest last via a
    /// temporary file and a rename.
    pub fn run_all(&mut self) -> StageResult<RunManifest> {
        let trace = self.trace()?;
        let sieve = self.sieve()?;
        let kernels = self.kernel(true)?;
        let ablation = self.ablate()?;
        let stats = self.stats()?;
        let manifest = RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config.clone(),
            seeds: self.seeds,
            critical_layer: trace.critical_layer,
            recovery_scores: trace.scores.clone(),
            p_clean: trace.p_clean,
            p_corrupted: trace.p_corrupted,
            n_informative_pairs: trace.n_pairs,
            sieve_summaries: sieve.sieves.iter().map(SieveSummary::from).collect(),
            driver_heads: ablation.drivers.heads.clone(),
            kernels,
            ablation,
            stats,
            artifacts: self.artifacts.clone(),
            timings_ms: self.timings.clone(),
        };
        for a in &manifest.artifacts {
            if !self.out.join(a).exists() {
                return Err(StageError {
                    stage: "manifest",
                    source: Error::InsufficientData(format!("artifact {a} missing")),
                });
            }
        }
        let json = at(
            "manifest",
            serde_json::to_vec_pretty(&manifest).map_err(Error::from),
        )?;
        let tmp = self.out.join(format!("{MANIFEST_FILE}.tmp"));
        at("manifest", fs::write(&tmp, json).map_err(Error::from))?;
        at(
            "manifest",
            fs::rename(&tmp, self.out.join(MANIFEST_FILE)).map_err(Error::from),
        )?;
        Ok(manifest)
    }
}
