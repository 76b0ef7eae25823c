//! The decremental exclusion sweep.
//!
//! Variant `k` keeps the `k` most sensitive layers in f32 and quantizes the
//! rest. Variants are evaluated in index order and the checkpoint is
//! rewritten after each one, so an interrupted run always leaves a prefix of
//! completed variants behind.

mod checkpoint;
mod config;

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{encode_model, load_model_container};
use crate::dataset::{load_dataset, Dataset};
use crate::engine::{execute, top_k, ExecutionOptions};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::onnx::import_onnx;
use crate::pareto::{normalize_objectives, pareto, ObjectivePoint};
use crate::plot::{plot_layer_errors, plot_objectives};
use crate::quant::{calibrate, selective_quantize, Calibration, QuantMode, QuantRecipe};
use crate::report::{write_layer_errors, write_report, NormalizedObjectives, ReportMetadata, SweepReport};
use crate::sensitivity::{analyze, AnalysisOptions};
use crate::tensor::Tensor;

pub use checkpoint::{SweepCheckpoint, CHECKPOINT_FILE};
pub use config::SweepConfig;

pub const REPORT_FILE: &str = "report.json";
pub const LAYER_ERRORS_FILE: &str = "layer_errors.json";
pub const LAYER_ERRORS_SVG: &str = "layer_errors.svg";
pub const OBJECTIVES_SVG: &str = "objectives.svg";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantStatus {
    Pending,
    Done,
    /// Evaluation raised an error; retried on resume.
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRecord {
    pub variant_index: usize,
    pub excluded_layers: Vec<String>,
    pub status: VariantStatus,
    pub size_bytes: Option<u64>,
    /// Fraction of evaluation samples whose top-1 class differs from the
    /// f32 model's.
    pub top1_mismatch: Option<f64>,
    /// Fraction whose top-K class set shares nothing with the f32 model's.
    pub topk_mismatch: Option<f64>,
    /// Agreement with the dataset labels.
    pub top1_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl VariantRecord {
    pub fn pending(variant_index: usize, excluded_layers: Vec<String>) -> Self {
        VariantRecord {
            variant_index,
            excluded_layers,
            status: VariantStatus::Pending,
            size_bytes: None,
            top1_mismatch: None,
            topk_mismatch: None,
            top1_accuracy: None,
            error: None,
        }
    }

    pub fn is_done(&self) -> bool {
        self.status == VariantStatus::Done
            && self.size_bytes.is_some()
            && self.top1_mismatch.is_some()
            && self.topk_mismatch.is_some()
    }

    /// `[top1_mismatch, size_bytes]`, the minimized objectives.
    pub fn objectives(&self) -> Option<ObjectivePoint> {
        Some(ObjectivePoint::new(
            self.variant_index,
            vec![self.top1_mismatch?, self.size_bytes? as f64],
        ))
    }
}

/// One pending variant per ranking prefix, `ranking.len() + 1` in all.
pub fn plan_sweep(ranking: &[String]) -> Vec<VariantRecord> {
    (0..=ranking.len())
        .map(|k| VariantRecord::pending(k, ranking[..k].to_vec()))
        .collect()
}

/// Loads a `.onnx` file through the importer and anything else as a QTM
/// container.
pub fn load_model(path: impl AsRef<Path>) -> Result<Graph> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("onnx")) {
        import_onnx(path)
    } else {
        load_model_container(path)
    }
}

/// Everything needed to score a variant against the f32 baseline.
#[derive(Clone, Debug)]
pub struct EvalContext {
    pub mode: QuantMode,
    pub calibration: Option<Calibration>,
    pub batch: Tensor,
    pub labels: Vec<u32>,
    pub baseline_top1: Vec<usize>,
    pub baseline_topk: Vec<Vec<usize>>,
    pub top_k: usize,
    pub chunk_size: usize,
}

impl EvalContext {
    /// Runs the f32 model once to fix the baseline predictions. `top_k` is
    /// clamped to the class count.
    pub fn new(
        g: &Graph,
        mode: QuantMode,
        calibration: Option<Calibration>,
        batch: Tensor,
        labels: Vec<u32>,
        top_k_request: usize,
        chunk_size: usize,
    ) -> Result<Self> {
        let out = execute(g, &batch, &ExecutionOptions::with_chunk_size(chunk_size))?.into_output();
        let classes = out.shape().get(1).copied().unwrap_or(0);
        let k = top_k_request.clamp(1, classes.max(1));
        Ok(EvalContext {
            mode,
            calibration,
            baseline_top1: top_k(&out, 1)?.into_iter().map(|v| v[0]).collect(),
            baseline_topk: top_k(&out, k)?,
            batch,
            labels,
            top_k: k,
            chunk_size,
        })
    }
}

/// Quantizes, sizes and scores one variant.
pub fn evaluate_variant(g: &Graph, v: &VariantRecord, ctx: &EvalContext) -> Result<VariantRecord> {
    let recipe = QuantRecipe::new(ctx.mode, v.excluded_layers.clone(), ctx.calibration.clone());
    let q = selective_quantize(g, &recipe)?;
    let size = encode_model(&q)?.len() as u64;
    let out = execute(&q, &ctx.batch, &ExecutionOptions::with_chunk_size(ctx.chunk_size))?.into_output();
    let top1: Vec<usize> = top_k(&out, 1)?.into_iter().map(|t| t[0]).collect();
    let topk = top_k(&out, ctx.top_k)?;
    let n = top1.len() as f64;
    let mismatched = top1.iter().zip(&ctx.baseline_top1).filter(|(a, b)| a != b).count();
    let disjoint = topk
        .iter()
        .zip(&ctx.baseline_topk)
        .filter(|(a, b)| !a.iter().any(|c| b.contains(c)))
        .count();
    let correct = top1
        .iter()
        .zip(&ctx.labels)
        .filter(|(&p, &l)| p == l as usize)
        .count();
    Ok(VariantRecord {
        variant_index: v.variant_index,
        excluded_layers: v.excluded_layers.clone(),
        status: VariantStatus::Done,
        size_bytes: Some(size),
        top1_mismatch: Some(mismatched as f64 / n),
        topk_mismatch: Some(disjoint as f64 / n),
        top1_accuracy: Some(correct as f64 / n),
        error: None,
    })
}

/// Hooks into the sweep loop; returning `Break` stops the run as if the
/// process had been killed at that point.
pub trait SweepObserver {
    /// Before variant `index` is evaluated.
    fn on_evaluate(&mut self, _index: usize) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }

    /// After `record` has been committed to the checkpoint.
    fn on_commit(&mut self, _record: &VariantRecord) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }
}

/// Observer that never interrupts.
pub struct Unobserved;

impl SweepObserver for Unobserved {}

#[derive(Clone, Debug, PartialEq)]
pub enum SweepOutcome {
    Complete(Box<SweepReport>),
    /// Stopped by the observer; `completed` variants are committed.
    Interrupted { completed: usize },
}

impl SweepOutcome {
    pub fn into_report(self) -> Option<SweepReport> {
        match self {
            SweepOutcome::Complete(r) => Some(*r),
            SweepOutcome::Interrupted { .. } => None,
        }
    }
}

/// Inputs shared by fresh and resumed runs.
struct Prepared {
    graph: Graph,
    calib: Dataset,
    dataset_size: usize,
    eval_indices: Vec<usize>,
    eval_batch: Tensor,
    labels: Vec<u32>,
    config_hash: String,
}

fn prepare(config: &SweepConfig) -> Result<Prepared> {
    config.validate()?;
    let graph = load_model(&config.model)?;
    let eval = load_dataset(&config.dataset)?;
    let calib = if config.calib_dataset_path() == config.dataset {
        eval.clone()
    } else {
        load_dataset(config.calib_dataset_path())?
    };
    let config_hash = config.digest(&graph, &eval, &calib)?;
    let eval_indices = eval_subset(eval.len(), config.eval_samples, config.seed);
    Ok(Prepared {
        eval_batch: eval.batch(&eval_indices)?,
        labels: eval.labels(&eval_indices),
        dataset_size: eval.len(),
        eval_indices,
        graph,
        calib,
        config_hash,
    })
}

/// All positions when the dataset fits, otherwise `wanted` positions drawn
/// from a ChaCha8 stream seeded with `seed`, ascending.
pub fn eval_subset(len: usize, wanted: usize, seed: u64) -> Vec<usize> {
    if len <= wanted {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, len, wanted).into_vec();
    picked.sort_unstable();
    picked
}

fn checkpoint_path(config: &SweepConfig) -> PathBuf {
    config.output_dir.join(CHECKPOINT_FILE)
}

fn context(config: &SweepConfig, p: &Prepared, calibration: Option<Calibration>) -> Result<EvalContext> {
    EvalContext::new(
        &p.graph,
        config.mode,
        calibration,
        p.eval_batch.clone(),
        p.labels.clone(),
        config.top_k,
        config.chunk_size,
    )
}

/// Full pipeline: analysis, ranking, every variant, Pareto selection and
/// the report with both plots.
pub fn run_sweep(config: &SweepConfig) -> Result<SweepReport> {
    match run_sweep_observed(config, &mut Unobserved)? {
        SweepOutcome::Complete(r) => Ok(*r),
        SweepOutcome::Interrupted { .. } => unreachable!("unobserved runs are never interrupted"),
    }
}

pub fn run_sweep_observed(config: &SweepConfig, observer: &mut dyn SweepObserver) -> Result<SweepOutcome> {
    if config.excluded_layers.is_some() {
        return Err(Error::Config(
            "an explicit exclusion list selects a single variant; use run_explicit".into(),
        ));
    }
    let p = prepare(config)?;
    let analysis = analyze(
        &p.graph,
        &p.calib,
        &AnalysisOptions {
            mode: config.mode,
            samples: config.calib_samples,
            chunk_size: config.chunk_size,
            weights: config.weights,
        },
    )?;
    let checkpoint = SweepCheckpoint {
        model_name: p.graph.name.clone(),
        mode: config.mode,
        variants: plan_sweep(&analysis.ranking),
        ranking: analysis.ranking,
        layer_errors: analysis.records,
        config_hash: p.config_hash.clone(),
        rng_seed: config.seed,
    };
    checkpoint.save(checkpoint_path(config))?;
    let ctx = context(config, &p, analysis.calibration)?;
    continue_sweep(config, &p, checkpoint, &ctx, observer)
}

/// Picks up the checkpoint at `checkpoint_path`; completed variants are not
/// evaluated again. The configuration must hash to the recorded digest.
pub fn resume_sweep(config: &SweepConfig, checkpoint_path: impl AsRef<Path>) -> Result<SweepReport> {
    match resume_sweep_observed(config, checkpoint_path, &mut Unobserved)? {
        SweepOutcome::Complete(r) => Ok(*r),
        SweepOutcome::Interrupted { .. } => unreachable!("unobserved runs are never interrupted"),
    }
}

pub fn resume_sweep_observed(
    config: &SweepConfig,
    checkpoint_path: impl AsRef<Path>,
    observer: &mut dyn SweepObserver,
) -> Result<SweepOutcome> {
    let checkpoint = SweepCheckpoint::load(checkpoint_path)?;
    let p = prepare(config)?;
    if checkpoint.config_hash != p.config_hash {
        return Err(Error::Resume(format!(
            "configuration digest {} does not match the checkpoint's {}",
            p.config_hash, checkpoint.config_hash
        )));
    }
    let calibration = match (config.mode, checkpoint.next_pending()) {
        (QuantMode::Static, Some(_)) => Some(calibrate(&p.graph, &p.calib, config.calib_samples)?),
        _ => None,
    };
    let ctx = context(config, &p, calibration)?;
    continue_sweep(config, &p, checkpoint, &ctx, observer)
}

fn continue_sweep(
    config: &SweepConfig,
    p: &Prepared,
    mut checkpoint: SweepCheckpoint,
    ctx: &EvalContext,
    observer: &mut dyn SweepObserver,
) -> Result<SweepOutcome> {
    let path = checkpoint_path(config);
    while let Some(i) = checkpoint.next_pending() {
        if observer.on_evaluate(i).is_break() {
            return Ok(SweepOutcome::Interrupted { completed: i });
        }
        log::info!("evaluating variant {i} of {}", checkpoint.variants.len() - 1);
        match evaluate_variant(&p.graph, &checkpoint.variants[i], ctx) {
            Ok(done) => checkpoint.variants[i] = done,
            Err(e) => {
                let v = &mut checkpoint.variants[i];
                v.status = VariantStatus::Failed;
                v.error = Some(e.to_string());
                checkpoint.save(&path)?;
                return Err(e);
            }
        }
        checkpoint.save(&path)?;
        if observer.on_commit(&checkpoint.variants[i]).is_break() {
            return Ok(SweepOutcome::Interrupted { completed: i + 1 });
        }
    }
    let report = build_report(config, p, &checkpoint)?;
    emit_artifacts(&report, &config.output_dir)?;
    Ok(SweepOutcome::Complete(Box::new(report)))
}

fn timestamp(config: &SweepConfig) -> String {
    if let Some(t) = &config.timestamp {
        return t.clone();
    }
    if let Ok(t) = std::env::var("SOURCE_DATE_EPOCH") {
        return t;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
        .to_string()
}

fn build_report(config: &SweepConfig, p: &Prepared, cp: &SweepCheckpoint) -> Result<SweepReport> {
    let points: Vec<ObjectivePoint> = cp
        .variants
        .iter()
        .map(|v| v.objectives().ok_or_else(|| Error::Checkpoint(format!("variant {} has no results", v.variant_index))))
        .collect::<Result<_>>()?;
    let normalized_objectives = normalize_objectives(&points)
        .into_iter()
        .map(|q| NormalizedObjectives {
            variant_index: q.variant_index,
            top1_mismatch: q.objectives[0],
            size_bytes: q.objectives[1],
        })
        .collect();
    Ok(SweepReport {
        metadata: ReportMetadata {
            model: cp.model_name.clone(),
            mode: cp.mode,
            seed: cp.rng_seed,
            dataset_size: p.dataset_size,
            calib_samples: config.calib_samples.min(p.calib.len()),
            eval_indices: p.eval_indices.clone(),
            top_k: config.top_k,
            config_hash: cp.config_hash.clone(),
            timestamp: timestamp(config),
        },
        layer_errors: cp.layer_errors.clone(),
        variants: cp.variants.clone(),
        pareto: pareto(&points, config.candidates)?,
        normalized_objectives,
    })
}

/// Writes `report.json`, `layer_errors.json` and both plots into `dir`.
pub fn emit_artifacts(report: &SweepReport, dir: &Path) -> Result<()> {
    write_report(report, dir.join(REPORT_FILE))?;
    write_layer_errors(&report.layer_errors, dir.join(LAYER_ERRORS_FILE))?;
    if !report.layer_errors.is_empty() {
        plot_layer_errors(&report.layer_errors, dir.join(LAYER_ERRORS_SVG))?;
    }
    plot_objectives(report, dir.join(OBJECTIVES_SVG))
}

/// Evaluates the single variant named by `config.excluded_layers` (an empty
/// list means fully quantized), bypassing the ranking.
pub fn run_explicit(config: &SweepConfig) -> Result<(VariantRecord, Graph)> {
    let excluded = config
        .excluded_layers
        .clone()
        .ok_or_else(|| Error::Config("no explicit exclusion list given".into()))?;
    let p = prepare(config)?;
    let calibration = match config.mode {
        QuantMode::Static => Some(calibrate(&p.graph, &p.calib, config.calib_samples)?),
        QuantMode::Dynamic => None,
    };
    let ctx = context(config, &p, calibration)?;
    let v = evaluate_variant(&p.graph, &VariantRecord::pending(0, excluded), &ctx)?;
    let recipe = QuantRecipe::new(config.mode, v.excluded_layers.clone(), ctx.calibration);
    let q = selective_quantize(&p.graph, &recipe)?;
    Ok((v, q))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_follows_prefix_rule() {
        let ranking: Vec<String> = ["a", "c", "b"].map(String::from).to_vec();
        let plan = plan_sweep(&ranking);
        let sets: Vec<Vec<String>> = plan.iter().map(|v| v.excluded_layers.clone()).collect();
        assert_eq!(sets, [vec![], vec!["a"], vec!["a", "c"], vec!["a", "c", "b"]]);
        assert!(plan.iter().all(|v| v.status == VariantStatus::Pending));
        assert_eq!(plan_sweep(&[]).len(), 1);
    }

    #[test]
    fn eval_subset_is_seeded_and_sorted() {
        assert_eq!(eval_subset(10, 300, 1), (0..10).collect::<Vec<_>>());
        let a = eval_subset(200, 50, 42);
        assert_eq!(a.len(), 50);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a, eval_subset(200, 50, 42));
        assert_ne!(a, eval_subset(200, 50, 43));
    }
}
