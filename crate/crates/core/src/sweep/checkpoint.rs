//! Resumable sweep state, rewritten after every variant.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantMode;
use crate::report::write_atomic;
use crate::sensitivity::LayerErrorRecord;

use super::{VariantRecord, VariantStatus};

pub const CHECKPOINT_FILE: &str = "sweep_state.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCheckpoint {
    pub model_name: String,
    pub mode: QuantMode,
    pub ranking: Vec<String>,
    pub layer_errors: Vec<LayerErrorRecord>,
    pub variants: Vec<VariantRecord>,
    pub config_hash: String,
    pub rng_seed: u64,
}

impl SweepCheckpoint {
    /// Prefix rule: variant `i` excludes exactly `ranking[..i]`, and there
    /// is one variant per prefix.
    pub fn validate(&self) -> Result<()> {
        if self.variants.len() != self.ranking.len() + 1 {
            return Err(Error::Checkpoint(format!(
                "{} variants for a ranking of {} layers",
                self.variants.len(),
                self.ranking.len()
            )));
        }
        for (i, v) in self.variants.iter().enumerate() {
            if v.variant_index != i || v.excluded_layers != self.ranking[..i] {
                return Err(Error::Checkpoint(format!("variant {i} breaks the prefix rule")));
            }
            if v.status == VariantStatus::Done && !v.is_done() {
                return Err(Error::Checkpoint(format!("variant {i} is done but has no results")));
            }
        }
        Ok(())
    }

    /// Index of the first variant still to evaluate.
    pub fn next_pending(&self) -> Option<usize> {
        self.variants.iter().position(|v| v.status != VariantStatus::Done)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        text.push('\n');
        write_atomic(path.as_ref(), text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cp: SweepCheckpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        cp.validate()?;
        Ok(cp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sweep::plan_sweep;

    fn checkpoint() -> SweepCheckpoint {
        let ranking: Vec<String> = vec!["a".into(), "c".into(), "b".into()];
        SweepCheckpoint {
            model_name: "m".into(),
            mode: QuantMode::Static,
            variants: plan_sweep(&ranking),
            ranking,
            layer_errors: vec![],
            config_hash: "00".into(),
            rng_seed: 7,
        }
    }

    #[test]
    fn field_names_are_fixed() {
        let v = serde_json::to_value(checkpoint()).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(
            keys,
            ["config_hash", "layer_errors", "mode", "model_name", "ranking", "rng_seed", "variants"]
        );
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(CHECKPOINT_FILE);
        let cp = checkpoint();
        cp.save(&p).unwrap();
        assert_eq!(SweepCheckpoint::load(&p).unwrap(), cp);
        assert_eq!(cp.next_pending(), Some(0));
    }

    #[test]
    fn truncated_or_inconsistent_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(CHECKPOINT_FILE);
        checkpoint().save(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, &text[..text.len() / 2]).unwrap();
        assert!(matches!(SweepCheckpoint::load(&p), Err(Error::Checkpoint(_))));
        let mut cp = checkpoint();
        cp.variants[2].excluded_layers = vec!["c".into(), "a".into()];
        cp.save(&p).unwrap();
        assert!(matches!(SweepCheckpoint::load(&p), Err(Error::Checkpoint(_))));
    }
}
