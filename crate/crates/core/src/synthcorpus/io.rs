//! Corpus persistence.
//!
//! Layout under a dataset directory (documented in docs/dataset.md):
//!   manifest.json       — spec, label names, per-sample records
//!   tensors.bin         — one record per sample: 8-byte shape header
//!                         (4 × u16 LE: channels, height, width, reserved 0)
//!                         followed by c·h·w little-endian f32 values
//!   hidden_labels.json  — target-train labels, evaluation-only side file
//!
//! Tensors round-trip bitwise: pixels are stored exactly as the f32 values
//! produced by the renderer.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{CaptionedImage, Corpus, Dataset, DatasetSpec, Domain, EmotionLabel};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_FILE: &str = "tensors.bin";
pub const HIDDEN_LABELS_FILE: &str = "hidden_labels.json";

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    domain: Domain,
    caption: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
    tensor_file: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    spec: DatasetSpec,
    label_names: Vec<String>,
    samples: Vec<SampleRecord>,
}

fn write_tensor(buf: &mut Vec<u8>, t: &Array3<f32>) {
    let (c, h, w) = t.dim();
    for d in [c as u16, h as u16, w as u16, 0u16] {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(data: &[u8], offset: usize) -> Result<Array3<f32>> {
    let header = data
        .get(offset..offset + 8)
        .ok_or_else(|| Error::Data("tensor record header out of bounds".into()))?;
    let dim = |i: usize| u16::from_le_bytes([header[2 * i], header[2 * i + 1]]) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let n = c * h * w;
    let body = data
        .get(offset + 8..offset + 8 + 4 * n)
        .ok_or_else(|| Error::Data("tensor record body out of bounds".into()))?;
    let mut values = Vec::with_capacity(n);
    for chunk in body.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    Array3::from_shape_vec((c, h, w), values)
        .map_err(|e| Error::Data(format!("bad tensor shape: {e}")))
}

/// Write a corpus to `dir` (created if missing).
pub fn save_dataset(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors: Vec<u8> = Vec::new();
    let mut records: Vec<SampleRecord> = Vec::new();
    for split in [
        &corpus.source_train,
        &corpus.target_train,
        &corpus.source_test,
        &corpus.target_test,
    ] {
        for s in &split.samples {
            let offset = tensors.len() as u64;
            write_tensor(&mut tensors, &s.pixels);
            records.push(SampleRecord {
                id: s.id.clone(),
                domain: s.domain,
                caption: s.caption.clone(),
                label: s.label.map(|l| l.index),
                tensor_file: TENSOR_FILE.to_string(),
                offset,
            });
        }
    }
    let manifest = Manifest {
        format_version: 1,
        spec: corpus.spec.clone(),
        label_names: super::LABEL_NAMES[..corpus.spec.k]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        samples: records,
    };
    let mut f = fs::File::create(dir.join(TENSOR_FILE))?;
    f.write_all(&tensors)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    let hidden: Vec<(String, usize)> = corpus
        .target_train
        .samples
        .iter()
        .zip(corpus.eval_only_target_train_labels())
        .map(|(s, &l)| (s.id.clone(), l))
        .collect();
    fs::write(
        dir.join(HIDDEN_LABELS_FILE),
        serde_json::to_vec_pretty(&hidden)?,
    )?;
    Ok(())
}

/// Load a corpus from `dir`, partitioning samples by id prefix.
pub fn load_dataset(dir: &Path) -> Result<Corpus> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let mut tensor_data = Vec::new();
    fs::File::open(dir.join(TENSOR_FILE))?.read_to_end(&mut tensor_data)?;

    let mut source_train = Dataset::default();
    let mut target_train = Dataset::default();
    let mut source_test = Dataset::default();
    let mut target_test = Dataset::default();
    for r in manifest.samples {
        let pixels = read_tensor(&tensor_data, r.offset as usize)?;
        let sample = CaptionedImage {
            id: r.id.clone(),
            pixels,
            caption: r.caption,
            domain: r.domain,
            label: r.label.map(|index| EmotionLabel { index }),
        };
        let split = if r.id.starts_with("source-train") {
            &mut source_train
        } else if r.id.starts_with("target-train") {
            &mut target_train
        } else if r.id.starts_with("source-test") {
            &mut source_test
        } else if r.id.starts_with("target-test") {
            &mut target_test
        } else {
            return Err(Error::Data(format!("unknown split for sample id {}", r.id)));
        };
        split.samples.push(sample);
    }

    let hidden: Vec<(String, usize)> =
        serde_json::from_slice(&fs::read(dir.join(HIDDEN_LABELS_FILE))?)?;
    if hidden.len() != target_train.len() {
        return Err(Error::Data(
            "hidden label count does not match target-train split".into(),
        ));
    }
    let target_train_labels = hidden.into_iter().map(|(_, l)| l).collect();

    Ok(Corpus {
        spec: manifest.spec,
        source_train,
        target_train,
        source_test,
        target_test,
        target_train_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::super::generate_dataset;
    use super::*;

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let spec = DatasetSpec {
            n_source: 10,
            n_target: 10,
            seed: 3,
            ..DatasetSpec::default()
        };
        let corpus = generate_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&corpus, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();

        assert_eq!(corpus.source_train.len(), loaded.source_train.len());
        assert_eq!(corpus.target_test.len(), loaded.target_test.len());
        for (a, b) in corpus
            .source_train
            .samples
            .iter()
            .chain(&corpus.target_train.samples)
            .zip(loaded.source_train.samples.iter().chain(&loaded.target_train.samples))
        {
            assert_eq!(a.id, b.id);
            assert_eq!(a.pixels, b.pixels); // bitwise f32 equality
            assert_eq!(a.caption, b.caption);
            assert_eq!(a.domain, b.domain);
            assert_eq!(a.label, b.label);
        }
        assert_eq!(
            corpus.eval_only_target_train_labels(),
            loaded.eval_only_target_train_labels()
        );
    }

    #[test]
    fn target_train_records_have_no_label_on_disk() {
        let spec = DatasetSpec {
            n_source: 6,
            n_target: 6,
            ..DatasetSpec::default()
        };
        let corpus = generate_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&corpus, dir.path()).unwrap();
        let manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap())
                .unwrap();
        for s in manifest["samples"].as_array().unwrap() {
            let id = s["id"].as_str().unwrap();
            if id.starts_with("target-train") {
                assert!(s.get("label").is_none(), "label leaked for {id}");
            } else {
                assert!(s.get("label").is_some(), "label missing for {id}");
            }
        }
    }
}
