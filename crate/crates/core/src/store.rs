// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk activation datasets.
//!
//! A dataset directory holds two files:
//!
//! - `manifest.json`: UTF-8 JSON describing shapes, counts and provenance.
//! - the tensor file named by `manifest.tensor_file` (conventionally
//!   `activations.bin`): row-major `[sample][head][dim]` little-endian
//!   IEEE-754 `f32`, no header, no padding.
//!
//! Samples are ordered with every `Reference` sample first, followed by
//! every `Noise` sample, so labels are implied by position and never stored
//! in the binary payload.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Component, Path};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_TENSOR_FILE: &str = "activations.bin";
pub const DTYPE_F32LE: &str = "f32le";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SampleLabel {
    Reference,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub model_name: String,
    pub layer_index: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub n_reference: usize,
    pub n_noise: usize,
    pub dtype: String,
    pub tensor_file: String,
    pub seed: u64,
    /// Per-sample prompt ids in storage order. When absent each sample's id
    /// is its index within its label group.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_ids: Option<Vec<i64>>,
}

impl DatasetManifest {
    pub fn n_samples(&self) -> usize {
        self.n_reference + self.n_noise
    }

    /// Expected tensor payload size in bytes, `None` on overflow.
    pub fn expected_tensor_bytes(&self) -> Option<u64> {
        (self.n_samples() as u64)
            .checked_mul(self.n_heads as u64)?
            .checked_mul(self.d_head as u64)?
            .checked_mul(4)
    }

    /// Checks every manifest-level invariant that does not need the payload.
    pub fn validate(&self) -> Result<()> {
        if self.n_reference < 1 {
            return Err(Error::validation("n_reference", "must be at least 1"));
        }
        if self.n_noise < 1 {
            return Err(Error::validation("n_noise", "must be at least 1"));
        }
        if self.n_heads < 1 {
            return Err(Error::validation("n_heads", "must be positive"));
        }
        if self.d_head < 1 {
            return Err(Error::validation("d_head", "must be positive"));
        }
        if self.dtype != DTYPE_F32LE {
            return Err(Error::validation(
                "dtype",
                format!("expected \"{DTYPE_F32LE}\", found \"{}\"", self.dtype),
            ));
        }
        validate_relative_path(&self.tensor_file)?;
        if self.expected_tensor_bytes().is_none() {
            return Err(Error::validation("n_heads", "tensor size overflows u64"));
        }
        if let Some(ids) = &self.prompt_ids {
            if ids.len() != self.n_samples() {
                return Err(Error::validation(
                    "prompt_ids",
                    format!("expected {} entries, found {}", self.n_samples(), ids.len()),
                ));
            }
        }
        Ok(())
    }
}

fn validate_relative_path(p: &str) -> Result<()> {
    let path = Path::new(p);
    if p.is_empty() {
        return Err(Error::validation("tensor_file", "empty path"));
    }
    let ok = path
        .components()
        .all(|c| matches!(c, Component::Normal(_) | Component::CurDir));
    if !ok {
        return Err(Error::validation(
            "tensor_file",
            format!("\"{p}\" must be a relative path inside the dataset directory"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationSample {
    pub label: SampleLabel,
    pub prompt_id: i64,
    /// `n_heads` vectors of `d_head` values each.
    pub head_vectors: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    manifest: DatasetManifest,
    samples: Vec<ActivationSample>,
}

/// Provenance fields a caller supplies; counts and shapes are derived from
/// the samples.
#[derive(Debug, Clone)]
pub struct DatasetInfo {
    pub model_name: String,
    pub layer_index: usize,
    pub seed: u64,
}

impl ActivationDataset {
    /// Builds a dataset from samples already in storage order and validates it.
    pub fn new(info: DatasetInfo, samples: Vec<ActivationSample>) -> Result<Self> {
        let n_reference = samples
            .iter()
            .take_while(|s| s.label == SampleLabel::Reference)
            .count();
        let n_noise = samples.len() - n_reference;
        let n_heads = samples.first().map_or(0, |s| s.head_vectors.len());
        let d_head = samples
            .first()
            .and_then(|s| s.head_vectors.first())
            .map_or(0, Vec::len);
        let manifest = DatasetManifest {
            model_name: info.model_name,
            layer_index: info.layer_index,
            n_heads,
            d_head,
            n_reference,
            n_noise,
            dtype: DTYPE_F32LE.to_string(),
            tensor_file: DEFAULT_TENSOR_FILE.to_string(),
            seed: info.seed,
            prompt_ids: Some(samples.iter().map(|s| s.prompt_id).collect()),
        };
        let ds = ActivationDataset { manifest, samples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn samples(&self) -> &[ActivationSample] {
        &self.samples
    }

    pub fn n_heads(&self) -> usize {
        self.manifest.n_heads
    }

    pub fn d_head(&self) -> usize {
        self.manifest.d_head
    }

    pub fn reference(&self) -> &[ActivationSample] {
        &self.samples[..self.manifest.n_reference]
    }

    pub fn noise(&self) -> &[ActivationSample] {
        &self.samples[self.manifest.n_reference..]
    }

    /// Binary labels in storage order: `Reference` is 1, `Noise` is 0.
    pub fn binary_labels(&self) -> Vec<bool> {
        self.samples
            .iter()
            .map(|s| s.label == SampleLabel::Reference)
            .collect()
    }

    /// All samples' vectors for one head, in storage order.
    pub fn head_rows(&self, head: usize) -> Vec<&[f32]> {
        self.samples
            .iter()
            .map(|s| s.head_vectors[head].as_slice())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        m.validate()?;
        if self.samples.len() != m.n_samples() {
            return Err(Error::validation(
                "samples",
                format!(
                    "manifest declares {} samples, dataset holds {}",
                    m.n_samples(),
                    self.samples.len()
                ),
            ));
        }
        for (i, s) in self.samples.iter().enumerate() {
            let expected = if i < m.n_reference {
                SampleLabel::Reference
            } else {
                SampleLabel::Noise
            };
            if s.label != expected {
                return Err(Error::validation(
                    "label",
                    format!("sample {i} is {:?}, expected {expected:?}", s.label),
                ));
            }
            if s.head_vectors.len() != m.n_heads {
                return Err(Error::validation(
                    "n_heads",
                    format!("sample {i} has {} heads", s.head_vectors.len()),
                ));
            }
            for (h, v) in s.head_vectors.iter().enumerate() {
                if v.len() != m.d_head {
                    return Err(Error::validation(
                        "d_head",
                        format!("sample {i} head {h} has {} entries", v.len()),
                    ));
                }
                if let Some(d) = v.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteActivation {
                        sample: i,
                        head: h,
                        dim: d,
                    });
                }
            }
        }
        if let Some(ids) = &m.prompt_ids {
            if let Some(i) = ids
                .iter()
                .zip(&self.samples)
                .position(|(id, s)| *id != s.prompt_id)
            {
                return Err(Error::validation(
                    "prompt_ids",
                    format!("sample {i} id disagrees with manifest"),
                ));
            }
        }
        Ok(())
    }
}

/// Writes `manifest.json` and the tensor file into `directory`, creating it
/// if needed.
pub fn save_dataset(dataset: &ActivationDataset, directory: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(directory)?;
    let m = dataset.manifest();

    let tensor_path = directory.join(&m.tensor_file);
    if let Some(parent) = tensor_path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(&tensor_path)?);
    for s in dataset.samples() {
        for v in &s.head_vectors {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;

    let json = serde_json::to_string_pretty(m)?;
    fs::write(directory.join(MANIFEST_FILE), json + "\n")?;
    Ok(())
}

/// Reads and fully validates a dataset directory.
pub fn load_dataset(directory: &Path) -> Result<ActivationDataset> {
    let manifest_path = directory.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::ManifestNotFound(directory.to_path_buf()));
    }
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    manifest.validate()?;

    let tensor_path = directory.join(&manifest.tensor_file);
    if !tensor_path.is_file() {
        return Err(Error::TensorNotFound(tensor_path));
    }
    let bytes = fs::read(&tensor_path)?;
    let expected = manifest
        .expected_tensor_bytes()
        .expect("checked by manifest validation");
    if bytes.len() as u64 != expected {
        return Err(Error::TensorLengthMismatch {
            expected,
            found: bytes.len() as u64,
        });
    }

    let (n_heads, d_head) = (manifest.n_heads, manifest.d_head);
    let mut floats = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut samples = Vec::with_capacity(manifest.n_samples());
    for i in 0..manifest.n_samples() {
        let (label, group_index) = if i < manifest.n_reference {
            (SampleLabel::Reference, i)
        } else {
            (SampleLabel::Noise, i - manifest.n_reference)
        };
        let mut head_vectors = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let v: Vec<f32> = floats.by_ref().take(d_head).collect();
            if let Some(d) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteActivation {
                    sample: i,
                    head: h,
                    dim: d,
                });
            }
            head_vectors.push(v);
        }
        let prompt_id = manifest
            .prompt_ids
            .as_ref()
            .map_or(group_index as i64, |ids| ids[i]);
        samples.push(ActivationSample {
            label,
            prompt_id,
            head_vectors,
        });
    }

    let ds = ActivationDataset { manifest, samples };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ActivationDataset {
        let sample = |label, id, base: f32| ActivationSample {
            label,
            prompt_id: id,
            head_vectors: vec![vec![base, base + 1.0, base + 2.0], vec![-base, 0.5, 1e-30]],
        };
        ActivationDataset::new(
            DatasetInfo {
                model_name: "tiny".into(),
                layer_index: 1,
                seed: 7,
            },
            vec![
                sample(SampleLabel::Reference, 0, 1.0),
                sample(SampleLabel::Noise, 0, -3.25),
            ],
        )
        .unwrap()
    }

    #[test]
    fn two_samples_two_heads_three_dims_is_48_bytes() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        let len = fs::metadata(dir.path().join(DEFAULT_TENSOR_FILE))
            .unwrap()
            .len();
        assert_eq!(len, 48);
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn truncated_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        let mut m: DatasetManifest =
            serde_json::from_slice(&fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        m.n_heads = 4;
        fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_vec(&m).unwrap(),
        )
        .unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("tensor length mismatch"), "{err}");
    }

    #[test]
    fn nan_is_reported_with_coordinates() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny(), dir.path()).unwrap();
        let path = dir.path().join(DEFAULT_TENSOR_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[..4].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert_eq!(err.to_string(), "non-finite activation at (0, 0, 0)");
    }

    #[test]
    fn empty_directory_has_no_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().starts_with("manifest not found"), "{err}");
    }

    #[test]
    fn labels_must_be_grouped() {
        let mut ds = tiny();
        ds.samples.swap(0, 1);
        assert!(matches!(ds.validate(), Err(Error::Validation { .. })));
    }

    #[test]
    fn absolute_tensor_path_is_rejected() {
        let mut m = tiny().manifest().clone();
        m.tensor_file = "/etc/passwd".into();
        assert!(m.validate().is_err());
        m.tensor_file = "../up.bin".into();
        assert!(m.validate().is_err());
    }
}
