//! The run report and its canonical JSON form.
//!
//! Canonical means sorted object keys and every float rounded to six
//! significant digits, so identical content always yields identical bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::pareto::ParetoResult;
use crate::quant::QuantMode;
use crate::sensitivity::LayerErrorRecord;
use crate::sweep::VariantRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub model: String,
    pub mode: QuantMode,
    pub seed: u64,
    pub dataset_size: usize,
    pub calib_samples: usize,
    /// Dataset positions of the evaluation subset, ascending.
    pub eval_indices: Vec<usize>,
    pub top_k: usize,
    pub config_hash: String,
    pub timestamp: String,
}

/// Objectives of one variant scaled to `[0, 100]` across the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedObjectives {
    pub variant_index: usize,
    pub top1_mismatch: f64,
    pub size_bytes: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub metadata: ReportMetadata,
    pub layer_errors: Vec<LayerErrorRecord>,
    pub variants: Vec<VariantRecord>,
    pub pareto: ParetoResult,
    pub normalized_objectives: Vec<NormalizedObjectives>,
}

impl SweepReport {
    /// Variants complete and numbered from 0; Pareto indices refer to them.
    pub fn validate(&self) -> Result<()> {
        for (i, v) in self.variants.iter().enumerate() {
            if v.variant_index != i || !v.is_done() {
                return Err(Error::Argument(format!("report variant {i} is missing or incomplete")));
            }
        }
        let n = self.variants.len();
        let in_range = self
            .pareto
            .fronts
            .iter()
            .flatten()
            .chain(&self.pareto.top_candidates)
            .all(|&i| i < n);
        if !in_range {
            return Err(Error::Argument("Pareto result names an unknown variant".into()));
        }
        Ok(())
    }
}

fn round_sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

fn canonicalize(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = round_sig6(n.as_f64().expect("checked f64"));
            serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
        }
        Value::Array(items) => Value::Array(items.into_iter().map(canonicalize).collect()),
        // serde_json's default map is ordered by key
        Value::Object(map) => Value::Object(map.into_iter().map(|(k, v)| (k, canonicalize(v))).collect()),
        other => other,
    }
}

/// Canonical JSON text of any serializable value, newline-terminated.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Argument(e.to_string()))?;
    let mut text = serde_json::to_string_pretty(&canonicalize(v)).map_err(|e| Error::Argument(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers see either the old or the new file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_report(r: &SweepReport, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), canonical_json(r)?.as_bytes())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<SweepReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// `layer_errors.json`: the records in topological order.
pub fn write_layer_errors(records: &[LayerErrorRecord], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), canonical_json(&records)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(round_sig6(0.123456789), 0.123457);
        assert_eq!(round_sig6(123456789.0), 123457000.0);
        assert_eq!(round_sig6(1.0 / 3.0), 0.333333);
        assert_eq!(round_sig6(0.0), 0.0);
        assert_eq!(round_sig6(2.5e-13), 2.5e-13);
    }

    #[test]
    fn keys_are_sorted_and_floats_rounded() {
        let v = serde_json::json!({"b": 1.0 / 3.0, "a": [2u64, 0.5], "c": {"z": 1, "y": 1e-7 / 3.0}});
        let text = canonical_json(&v).unwrap();
        let compact: String = text.split_whitespace().collect();
        assert_eq!(compact, r#"{"a":[2,0.5],"b":0.333333,"c":{"y":3.33333e-8,"z":1}}"#);
        // canonical output is a fixed point
        let back: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(canonical_json(&back).unwrap(), text);
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
