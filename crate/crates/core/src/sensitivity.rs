//! Per-layer quantization sensitivity.
//!
//! Two relative errors are measured for every quantizable layer: the QDQ
//! error (only that layer fake-quantized) and the cross-model error (the
//! layer's output inside the fully quantized model). Both are min-max
//! normalized over layers and blended into one metric that orders the sweep.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::engine::{execute, ActivationTrace, ExecutionOptions};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::quant::{calibrate, qdq_simulate_layer, selective_quantize, Calibration, QuantMode, QuantRecipe};
use crate::tensor::Tensor;

/// Guards the relative error against an all-zero reference.
pub const EPSILON: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerErrorRecord {
    pub node_id: String,
    /// Position of the node in the graph's topological order.
    pub topo_index: usize,
    pub qdq_err: f64,
    pub xmodel_err: f64,
    pub norm_qdq_err: f64,
    pub norm_xmodel_err: f64,
    pub error_metric: f64,
    /// 0-based position in the descending ranking.
    pub rank: usize,
}

/// Blend of the two normalized errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricWeights {
    pub xmodel: f64,
    pub qdq: f64,
}

impl Default for MetricWeights {
    fn default() -> Self {
        MetricWeights { xmodel: 0.5, qdq: 0.5 }
    }
}

/// `Σ|reference - other| / (Σ|reference| + ε)` accumulated in f64.
pub fn relative_l1(reference: &[f32], other: &[f32]) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&r, &o) in reference.iter().zip(other) {
        num += (r as f64 - o as f64).abs();
        den += (r as f64).abs();
    }
    num / (den + EPSILON)
}

fn traced<'a>(trace: &'a ActivationTrace, node_id: &str, which: &str) -> Result<&'a Tensor> {
    trace
        .get(node_id)
        .ok_or_else(|| Error::Analysis(format!("{which} trace has no activation for {node_id}")))
}

fn compare(reference: &Tensor, other: &Tensor, node_id: &str) -> Result<f64> {
    if reference.shape() != other.shape() {
        return Err(Error::Analysis(format!(
            "activation shapes of {node_id} differ: {:?} vs {:?}",
            reference.shape(),
            other.shape()
        )));
    }
    Ok(relative_l1(reference.as_f32()?, other.as_f32()?))
}

/// Relative error of `node_id`'s output in the quantized run against the
/// f32 run.
pub fn compute_xmodel_err(fp32: &ActivationTrace, quant: &ActivationTrace, node_id: &str) -> Result<f64> {
    let a = traced(fp32, node_id, "reference")?;
    let b = traced(quant, node_id, "quantized")?;
    compare(a, b, node_id)
}

/// Relative error of `node_id`'s output when only that layer is
/// fake-quantized, over the first `max_samples` samples.
pub fn compute_qdq_err(
    g: &Graph,
    node_id: &str,
    calib_data: &Dataset,
    max_samples: usize,
    calibration: Option<&Calibration>,
) -> Result<f64> {
    let batch = calib_data.head(max_samples)?;
    let opts = ExecutionOptions::default().capture_only([node_id]);
    let reference = execute(g, &batch, &opts)?.trace;
    let simulated = execute(&qdq_simulate_layer(g, node_id, calibration)?, &batch, &opts)?.trace;
    compute_xmodel_err(&reference, &simulated, node_id)
}

/// Min-max normalization to `[0, 1]`; a constant list maps to zeros.
pub fn normalize_errors(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    values
        .iter()
        .map(|&v| if span > 0.0 { (v - min) / span } else { 0.0 })
        .collect()
}

fn by_metric(a: &LayerErrorRecord, b: &LayerErrorRecord) -> Ordering {
    b.error_metric
        .total_cmp(&a.error_metric)
        .then(a.topo_index.cmp(&b.topo_index))
}

/// Node ids by descending `error_metric`, earlier nodes first on ties.
pub fn rank_layers(records: &[LayerErrorRecord]) -> Vec<String> {
    let mut sorted: Vec<&LayerErrorRecord> = records.iter().collect();
    sorted.sort_by(|a, b| by_metric(a, b));
    sorted.into_iter().map(|r| r.node_id.clone()).collect()
}

/// Raw errors of one layer before normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RawLayerError {
    pub node_id: String,
    pub topo_index: usize,
    pub qdq_err: f64,
    pub xmodel_err: f64,
}

/// Normalizes, blends and ranks raw errors. Records keep input order.
pub fn build_records(raw: &[RawLayerError], weights: MetricWeights) -> Vec<LayerErrorRecord> {
    if raw.is_empty() {
        return Vec::new();
    }
    let nq = normalize_errors(&raw.iter().map(|r| r.qdq_err).collect::<Vec<_>>());
    let nx = normalize_errors(&raw.iter().map(|r| r.xmodel_err).collect::<Vec<_>>());
    let mut records: Vec<LayerErrorRecord> = raw
        .iter()
        .zip(nq.iter().zip(&nx))
        .map(|(r, (&q, &x))| LayerErrorRecord {
            node_id: r.node_id.clone(),
            topo_index: r.topo_index,
            qdq_err: r.qdq_err,
            xmodel_err: r.xmodel_err,
            norm_qdq_err: q,
            norm_xmodel_err: x,
            error_metric: weights.xmodel * x + weights.qdq * q,
            rank: 0,
        })
        .collect();
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| by_metric(&records[a], &records[b]));
    for (rank, i) in order.into_iter().enumerate() {
        records[i].rank = rank;
    }
    records
}

/// Everything the layer analysis produces.
#[derive(Clone, Debug, PartialEq)]
pub struct Analysis {
    /// Present in static mode only.
    pub calibration: Option<Calibration>,
    /// One record per quantizable node, in topological order.
    pub records: Vec<LayerErrorRecord>,
    pub ranking: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnalysisOptions {
    pub mode: QuantMode,
    pub samples: usize,
    pub chunk_size: usize,
    pub weights: MetricWeights,
}

/// Calibrates (static mode), measures both errors for every quantizable
/// layer on the first `opts.samples` samples and ranks the layers.
pub fn analyze(g: &Graph, data: &Dataset, opts: &AnalysisOptions) -> Result<Analysis> {
    let ids = g.quantizable_ids();
    let calibration = match opts.mode {
        QuantMode::Static => Some(calibrate(g, data, opts.samples)?),
        QuantMode::Dynamic => None,
    };
    let batch = data.head(opts.samples)?;
    let capture = ExecutionOptions::with_chunk_size(opts.chunk_size).capture_only(ids.iter().cloned());
    let reference = execute(g, &batch, &capture)?.trace;
    let full = selective_quantize(g, &QuantRecipe::new(opts.mode, Vec::new(), calibration.clone()))?;
    let quantized = execute(&full, &batch, &capture)?.trace;

    let mut raw = Vec::with_capacity(ids.len());
    for id in &ids {
        let one = ExecutionOptions::with_chunk_size(opts.chunk_size).capture_only([id.as_str()]);
        let simulated = execute(&qdq_simulate_layer(g, id, calibration.as_ref())?, &batch, &one)?.trace;
        raw.push(RawLayerError {
            node_id: id.clone(),
            topo_index: g.node_index(id).expect("id comes from the graph"),
            qdq_err: compute_xmodel_err(&reference, &simulated, id)?,
            xmodel_err: compute_xmodel_err(&reference, &quantized, id)?,
        });
    }
    let records = build_records(&raw, opts.weights);
    let ranking = rank_layers(&records);
    Ok(Analysis {
        calibration,
        records,
        ranking,
    })
}
