//! Labelled sample sets stored as a JSON manifest plus one tensor file per
//! sample.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// One sample without a batch axis.
    pub tensor: Tensor,
    pub label: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    name: String,
    samples: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    tensor: String,
    label: i64,
}

impl Dataset {
    /// Checks the shared-shape and f32 invariants; empty sets are rejected.
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Dataset("dataset has no samples".into()));
        };
        let shape = first.tensor.shape().to_vec();
        for (i, s) in samples.iter().enumerate() {
            if s.tensor.dtype() != DType::F32 {
                return Err(Error::Dataset(format!(
                    "sample {i} is {}, expected f32",
                    s.tensor.dtype()
                )));
            }
            if s.tensor.shape() != shape.as_slice() {
                return Err(Error::Dataset(format!(
                    "sample {i} has shape {:?}, expected {shape:?}",
                    s.tensor.shape()
                )));
            }
        }
        Ok(Dataset {
            name: name.into(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.samples[0].tensor.shape()
    }

    /// Stacks the chosen samples into one batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let picked = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .map(|s| &s.tensor)
                    .ok_or_else(|| Error::Dataset(format!("sample index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&picked)
    }

    /// The first `n` samples (all of them if fewer) as one batch.
    pub fn head(&self, n: usize) -> Result<Tensor> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.batch(&idx)
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<u32> {
        indices.iter().map(|&i| self.samples[i].label).collect()
    }
}

pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let path = manifest_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let label = u32::try_from(entry.label)
            .map_err(|_| Error::Dataset(format!("label {} is not a class index", entry.label)))?;
        samples.push(Sample {
            tensor: Tensor::read_file(root.join(&entry.tensor))?,
            label,
        });
    }
    Dataset::new(manifest.name, samples)
}

/// Writes `manifest.json` and `sNNN.qtt` files into `dir`.
pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let file = format!("s{i:03}.qtt");
        s.tensor.write_file(dir.join(&file))?;
        entries.push(ManifestEntry {
            tensor: file,
            label: s.label.into(),
        });
    }
    let manifest = Manifest {
        name: ds.name.clone(),
        samples: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(shape: Vec<usize>, v: f32, label: u32) -> Sample {
        let n = shape.iter().product();
        Sample {
            tensor: Tensor::from_f32(shape, vec![v; n]).unwrap(),
            label,
        }
    }

    #[test]
    fn round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new("d", vec![sample(vec![2, 2], 1.0, 0), sample(vec![2, 2], 2.0, 3)]).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path().join("manifest.json")).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.batch(&[1]).unwrap().shape(), &[1, 2, 2]);
        assert_eq!(back.head(5).unwrap().shape(), &[2, 2, 2]);
    }

    #[test]
    fn empty_and_mixed_shapes_are_rejected() {
        assert!(matches!(Dataset::new("d", vec![]), Err(Error::Dataset(_))));
        let mixed = vec![sample(vec![3, 8, 8], 0.0, 0), sample(vec![1, 8, 8], 0.0, 0)];
        assert!(matches!(Dataset::new("d", mixed), Err(Error::Dataset(_))));
    }

    #[test]
    fn missing_tensor_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, r#"{"name":"d","samples":[{"tensor":"nope.qtt","label":0}]}"#).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Io { .. })));
    }

    #[test]
    fn negative_labels_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new("d", vec![sample(vec![1], 0.0, 0)]).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, r#"{"name":"d","samples":[{"tensor":"s000.qtt","label":-1}]}"#).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Dataset(_))));
    }
}
