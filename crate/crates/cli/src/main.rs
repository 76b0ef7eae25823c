//! `tuneqn` command-line driver.
//!
//! Diagnostics go to stderr; stdout receives exactly one JSON summary line.
//! Exit codes: 0 on success, 2 for configuration problems, 3 when the
//! pipeline itself fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use tuneqn::pareto::{normalize_objectives, pareto, ObjectivePoint};
use tuneqn::plot::{plot_layer_errors, plot_objectives};
use tuneqn::report::{write_layer_errors, NormalizedObjectives};
use tuneqn::sensitivity::{analyze, AnalysisOptions};
use tuneqn::sweep::{
    load_model, run_explicit, CHECKPOINT_FILE, LAYER_ERRORS_FILE, LAYER_ERRORS_SVG, OBJECTIVES_SVG,
    REPORT_FILE,
};
use tuneqn::{
    load_dataset, read_report, resume_sweep, run_sweep, serialize_model, write_report, Error, QuantMode, SweepConfig,
};

#[derive(Parser)]
#[command(name = "tuneqn", version, about = "Selective int8 quantization tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank layers by quantization sensitivity.
    Analyze(Common),
    /// Write one selectively quantized model (needs --exclude).
    Quantize(Common),
    /// Run the full exclusion sweep, or a single variant with --exclude.
    Sweep(Common),
    /// Recompute Pareto fronts of an existing report.
    Pareto(Common),
    /// Re-render both plots from an existing report.
    Plot(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    mode: Option<QuantMode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Comma-separated node ids to keep in f32; an empty string excludes
    /// nothing.
    #[arg(long)]
    exclude: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    /// The config file with flag values layered on top.
    fn config(&self) -> tuneqn::Result<SweepConfig> {
        let mut cfg = SweepConfig::load(&self.config)?;
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(list) = &self.exclude {
            cfg.excluded_layers = Some(
                list.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect(),
            );
        }
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Recipe(_) | Error::Resume(_) => 2,
        _ => 3,
    }
}

fn show(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_analyze(a: &Common) -> tuneqn::Result<Value> {
    let cfg = a.config()?;
    cfg.validate()?;
    let g = load_model(&cfg.model)?;
    let calib = load_dataset(cfg.calib_dataset_path())?;
    let analysis = analyze(
        &g,
        &calib,
        &AnalysisOptions {
            mode: cfg.mode,
            samples: cfg.calib_samples,
            chunk_size: cfg.chunk_size,
            weights: cfg.weights,
        },
    )?;
    let json_path = cfg.output_dir.join(LAYER_ERRORS_FILE);
    write_layer_errors(&analysis.records, &json_path)?;
    if !analysis.records.is_empty() {
        plot_layer_errors(&analysis.records, cfg.output_dir.join(LAYER_ERRORS_SVG))?;
    }
    Ok(json!({
        "command": "analyze",
        "mode": cfg.mode,
        "layers": analysis.records.len(),
        "ranking": analysis.ranking,
        "layer_errors": show(&json_path),
    }))
}

fn cmd_quantize(a: &Common) -> tuneqn::Result<Value> {
    let cfg = a.config()?;
    if cfg.excluded_layers.is_none() {
        return Err(Error::Config("quantize needs --exclude (or excluded_layers in the config)".into()));
    }
    let (v, q) = run_explicit(&cfg)?;
    let stem = cfg.model.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    let path = cfg.output_dir.join(format!("{stem}.{}.qtm", cfg.mode));
    let size = serialize_model(&q, &path)?;
    Ok(json!({
        "command": "quantize",
        "mode": cfg.mode,
        "excluded_layers": v.excluded_layers,
        "size_bytes": size,
        "top1_mismatch": v.top1_mismatch,
        "model": show(&path),
    }))
}

fn cmd_sweep(a: &Common) -> tuneqn::Result<Value> {
    let cfg = a.config()?;
    if cfg.excluded_layers.is_some() {
        let mut single = cmd_quantize(a)?;
        single["command"] = json!("sweep");
        return Ok(single);
    }
    let checkpoint = cfg.output_dir.join(CHECKPOINT_FILE);
    let report = if a.resume && checkpoint.is_file() {
        resume_sweep(&cfg, &checkpoint)?
    } else {
        if a.resume {
            log::warn!("no checkpoint at {}, starting a fresh sweep", checkpoint.display());
        }
        run_sweep(&cfg)?
    };
    Ok(json!({
        "command": "sweep",
        "mode": cfg.mode,
        "variants": report.variants.len(),
        "top_candidates": report.pareto.top_candidates,
        "report": show(&cfg.output_dir.join(REPORT_FILE)),
    }))
}

fn cmd_pareto(a: &Common) -> tuneqn::Result<Value> {
    let cfg = a.config()?;
    let path = cfg.output_dir.join(REPORT_FILE);
    let mut report = read_report(&path)?;
    let points: Vec<ObjectivePoint> = report
        .variants
        .iter()
        .map(|v| {
            v.objectives()
                .ok_or_else(|| Error::Format(format!("variant {} has no results", v.variant_index)))
        })
        .collect::<tuneqn::Result<_>>()?;
    report.pareto = pareto(&points, cfg.candidates)?;
    report.normalized_objectives = normalize_objectives(&points)
        .into_iter()
        .map(|p| NormalizedObjectives {
            variant_index: p.variant_index,
            top1_mismatch: p.objectives[0],
            size_bytes: p.objectives[1],
        })
        .collect();
    report.validate()?;
    write_report(&report, &path)?;
    Ok(json!({
        "command": "pareto",
        "fronts": report.pareto.fronts,
        "top_candidates": report.pareto.top_candidates,
        "report": show(&path),
    }))
}

fn cmd_plot(a: &Common) -> tuneqn::Result<Value> {
    let cfg = a.config()?;
    let report = read_report(cfg.output_dir.join(REPORT_FILE))?;
    plot_objectives(&report, cfg.output_dir.join(OBJECTIVES_SVG))?;
    if !report.layer_errors.is_empty() {
        plot_layer_errors(&report.layer_errors, cfg.output_dir.join(LAYER_ERRORS_SVG))?;
    }
    Ok(json!({
        "command": "plot",
        "objectives": show(&cfg.output_dir.join(OBJECTIVES_SVG)),
        "layer_errors": show(&cfg.output_dir.join(LAYER_ERRORS_SVG)),
    }))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Pareto(a) => cmd_pareto(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(summary) => {
            println!("{}", json!({"status": "ok", "result": summary}));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("tuneqn: {e}");
            println!("{}", json!({"status": "error", "exit_code": code, "message": e.to_string()}));
            ExitCode::from(code)
        }
    }
}
