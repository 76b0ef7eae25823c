//! Sweep configuration read from a TOML file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::encode_model;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::quant::QuantMode;
use crate::sensitivity::MetricWeights;

fn default_calib_samples() -> usize {
    50
}
fn default_eval_samples() -> usize {
    300
}
fn default_chunk_size() -> usize {
    32
}
fn default_top_k() -> usize {
    5
}
fn default_candidates() -> usize {
    3
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("tuneqn-out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// `.qtm` container or `.onnx` file.
    pub model: PathBuf,
    /// Manifest of the evaluation set.
    pub dataset: PathBuf,
    /// Manifest used for calibration and analysis; defaults to `dataset`.
    #[serde(default)]
    pub calib_dataset: Option<PathBuf>,
    pub mode: QuantMode,
    #[serde(default = "default_calib_samples")]
    pub calib_samples: usize,
    /// Evaluation subset size when the dataset is larger.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "default_chunk_size")]
    pub chunk_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Explicit exclusion list; when set, the sweep evaluates only this
    /// variant.
    #[serde(default)]
    pub excluded_layers: Option<Vec<String>>,
    /// K of the top-K mismatch, clamped to the class count.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Number of Pareto candidates to select.
    #[serde(default = "default_candidates")]
    pub candidates: usize,
    #[serde(default)]
    pub weights: MetricWeights,
    /// Report timestamp; falls back to `SOURCE_DATE_EPOCH`, then the clock.
    #[serde(default)]
    pub timestamp: Option<String>,
}

impl SweepConfig {
    /// Defaults for everything but the three required fields.
    pub fn new(model: impl Into<PathBuf>, dataset: impl Into<PathBuf>, mode: QuantMode) -> Self {
        SweepConfig {
            model: model.into(),
            dataset: dataset.into(),
            calib_dataset: None,
            mode,
            calib_samples: default_calib_samples(),
            eval_samples: default_eval_samples(),
            chunk_size: default_chunk_size(),
            seed: 0,
            output_dir: default_output_dir(),
            excluded_layers: None,
            top_k: default_top_k(),
            candidates: default_candidates(),
            weights: MetricWeights::default(),
            timestamp: None,
        }
    }

    /// Parses a config file. Relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: SweepConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_relative_to(base);
        Ok(cfg)
    }

    pub fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.model);
        fix(&mut self.dataset);
        if let Some(p) = self.calib_dataset.as_mut() {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn calib_dataset_path(&self) -> &Path {
        self.calib_dataset.as_deref().unwrap_or(&self.dataset)
    }

    /// Value ranges and input paths.
    pub fn validate(&self) -> Result<()> {
        for (what, path) in [
            ("model", self.model.as_path()),
            ("dataset", self.dataset.as_path()),
            ("calibration dataset", self.calib_dataset_path()),
        ] {
            if !path.is_file() {
                return Err(Error::Config(format!("{what} not found: {}", path.display())));
            }
        }
        for (what, v) in [
            ("calib_samples", self.calib_samples),
            ("eval_samples", self.eval_samples),
            ("chunk_size", self.chunk_size),
            ("top_k", self.top_k),
            ("candidates", self.candidates),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{what} must be at least 1")));
            }
        }
        let w = self.weights;
        if !(w.xmodel.is_finite() && w.qdq.is_finite() && w.xmodel >= 0.0 && w.qdq >= 0.0) {
            return Err(Error::Config("metric weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Digest of everything that can change results: the result-affecting
    /// settings, the model bytes and both datasets. Chunk size, output
    /// location and timestamp are left out.
    pub fn digest(&self, model: &Graph, eval: &Dataset, calib: &Dataset) -> Result<String> {
        let settings = serde_json::json!({
            "mode": self.mode,
            "calib_samples": self.calib_samples,
            "eval_samples": self.eval_samples,
            "seed": self.seed,
            "excluded_layers": self.excluded_layers,
            "top_k": self.top_k,
            "candidates": self.candidates,
            "weights": [self.weights.xmodel, self.weights.qdq],
        });
        let mut h = Sha256::new();
        h.update(settings.to_string().as_bytes());
        h.update(encode_model(model)?);
        for ds in [eval, calib] {
            h.update((ds.len() as u64).to_le_bytes());
            for s in &ds.samples {
                h.update(s.label.to_le_bytes());
                h.update(s.tensor.encode());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_defaults_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tuneqn.toml");
        fs::write(&path, "model = \"m.qtm\"\ndataset = \"d/manifest.json\"\nmode = \"dynamic\"\n").unwrap();
        let cfg = SweepConfig::load(&path).unwrap();
        assert_eq!(cfg.mode, QuantMode::Dynamic);
        assert_eq!(cfg.calib_samples, 50);
        assert_eq!(cfg.eval_samples, 300);
        assert_eq!(cfg.model, dir.path().join("m.qtm"));
        assert_eq!(cfg.calib_dataset_path(), dir.path().join("d/manifest.json"));
        // inputs do not exist
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("m.qtm")));
    }

    #[test]
    fn bad_values_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "model = \"m\"\ndataset = \"d\"\nmode = \"fast\"\n").unwrap();
        assert!(matches!(SweepConfig::load(&path), Err(Error::Config(_))));
        fs::write(&path, "model = \"m\"\ndataset = \"d\"\nmode = \"static\"\nbogus = 1\n").unwrap();
        assert!(matches!(SweepConfig::load(&path), Err(Error::Config(_))));
        assert!(matches!(SweepConfig::load(dir.path().join("none.toml")), Err(Error::Config(_))));
    }
}
