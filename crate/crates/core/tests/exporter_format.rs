// SPDX-License-Identifier: MIT OR Apache-2.0

//! The on-disk format shared with the external activation exporter. These
//! tests write directories byte by byte, the way a foreign writer would,
//! rather than through `save_dataset`.

use std::fs;
use std::path::Path;

use half::f16;
use qsieve::{
    head_interaction_matrix, load_dataset, sieve_layer, ProbeConfig, SampleLabel, SampleSet,
};
use serde_json::json;

fn write_exported(
    dir: &Path,
    heads: usize,
    dims: usize,
    payload: &[f32],
    extra: serde_json::Value,
) {
    let mut manifest = json!({
        "model_name": "tiny-causal-lm",
        "layer_index": 1,
        "n_heads": heads,
        "d_head": dims,
        "n_reference": 2,
        "n_noise": 2,
        "dtype": "f32le",
        "tensor_file": "activations.bin",
        "seed": 0
    });
    for (k, v) in extra.as_object().unwrap() {
        manifest[k] = v.clone();
    }
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )
    .unwrap();
    let bytes: Vec<u8> = payload.iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(dir.join("activations.bin"), bytes).unwrap();
}

#[test]
fn exported_directory_loads_and_runs_sieve_and_kernel() {
    let (heads, dims) = (2, 4);
    // sample-major, then head, then dim
    let payload: Vec<f32> = (0..4 * heads * dims)
        .map(|i| {
            let sample = i / (heads * dims);
            let sign = if sample < 2 { 1.0 } else { -1.0 };
            sign * (1.0 + (i % dims) as f32 * 0.25) + (i as f32 * 0.37).sin() * 0.1
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    write_exported(
        dir.path(),
        heads,
        dims,
        &payload,
        json!({"prompt_ids": [7, 8, 7, 8]}),
    );

    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.manifest().n_reference, 2);
    assert_eq!(ds.manifest().n_noise, 2);
    assert_eq!(ds.d_head(), dims);
    assert_eq!(ds.samples()[2].label, SampleLabel::Noise);
    assert_eq!(ds.samples()[3].prompt_id, 8);
    // byte offset of (sample 1, head 1, dim 2)
    let offset = (heads * dims) + dims + 2;
    assert_eq!(ds.samples()[1].head_vectors[1][2], payload[offset]);

    let probe = ProbeConfig {
        k: 2,
        ..ProbeConfig::default()
    };
    let sieves = sieve_layer::<f64>(&ds, &probe).unwrap();
    let k = head_interaction_matrix(&ds, &sieves, SampleSet::ReferenceOnly).unwrap();
    k.validate().unwrap();
}

#[test]
fn unknown_dtype_from_exporter_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_exported(dir.path(), 1, 2, &[0.0; 8], json!({"dtype": "f16"}));
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("dtype"), "{err}");
}

#[test]
fn every_finite_half_survives_the_f32_store() {
    let halves: Vec<f16> = (0..=u16::MAX)
        .map(f16::from_bits)
        .filter(|h| h.is_finite())
        .collect();
    assert_eq!(halves.len(), 63_488);
    let per_sample = halves.len() / 4;
    let payload: Vec<f32> = halves.iter().map(|h| h.to_f32()).collect();
    let dir = tempfile::tempdir().unwrap();
    write_exported(dir.path(), 1, per_sample, &payload, json!({}));

    let ds = load_dataset(dir.path()).unwrap();
    let loaded: Vec<f32> = ds
        .samples()
        .iter()
        .flat_map(|s| s.head_vectors[0].iter().copied())
        .collect();
    for (h, x) in halves.iter().zip(&loaded) {
        assert_eq!(f16::from_f32(*x).to_bits(), h.to_bits());
    }
}
