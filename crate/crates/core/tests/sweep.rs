mod common;

use std::fs;
use std::ops::ControlFlow;

use common::{fixture, MODELS};
use tuneqn::quant::QuantMode;
use tuneqn::sweep::{
    resume_sweep_observed, run_explicit, run_sweep, run_sweep_observed, SweepObserver, SweepOutcome,
    CHECKPOINT_FILE, REPORT_FILE,
};
use tuneqn::{Error, SweepConfig};

fn config(model: &str, mode: QuantMode, out: &std::path::Path) -> SweepConfig {
    let mut c = SweepConfig::new(
        fixture(&format!("{model}.qtm")),
        fixture("data10/manifest.json"),
        mode,
    );
    c.output_dir = out.to_path_buf();
    c.top_k = 2;
    c.timestamp = Some("0".into());
    c
}

struct StopAfter(usize);

impl SweepObserver for StopAfter {
    fn on_commit(&mut self, r: &tuneqn::sweep::VariantRecord) -> ControlFlow<()> {
        if r.variant_index == self.0 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    }
}

#[test]
fn full_sweep_writes_every_artifact() {
    for m in MODELS {
        for mode in [QuantMode::Static, QuantMode::Dynamic] {
            let dir = tempfile::tempdir().unwrap();
            let r = run_sweep(&config(m, mode, dir.path())).unwrap();
            eprintln!("{m} {mode}: {:?}", r.variants.iter().map(|v| (v.size_bytes.unwrap(), v.top1_mismatch.unwrap())).collect::<Vec<_>>());
            let n = r.layer_errors.len();
            assert_eq!(r.variants.len(), n + 1);
            assert_eq!(r.variants[n].top1_mismatch, Some(0.0));
            for f in [REPORT_FILE, CHECKPOINT_FILE, "layer_errors.json", "layer_errors.svg", "objectives.svg"] {
                assert!(dir.path().join(f).is_file(), "{f} missing");
            }
            let sizes: Vec<u64> = r.variants.iter().map(|v| v.size_bytes.unwrap()).collect();
            assert!(sizes.windows(2).all(|w| w[0] <= w[1]), "{sizes:?}");
        }
    }
}

#[test]
fn interrupted_run_resumes_to_identical_report() {
    let full = tempfile::tempdir().unwrap();
    run_sweep(&config("tiny_cnn", QuantMode::Static, full.path())).unwrap();
    let expected = fs::read(full.path().join(REPORT_FILE)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("tiny_cnn", QuantMode::Static, dir.path());
    let out = run_sweep_observed(&cfg, &mut StopAfter(0)).unwrap();
    assert_eq!(out, SweepOutcome::Interrupted { completed: 1 });
    assert!(!dir.path().join(REPORT_FILE).exists());
    let cp = dir.path().join(CHECKPOINT_FILE);
    let done = resume_sweep_observed(&cfg, &cp, &mut StopAfter(usize::MAX)).unwrap();
    assert!(matches!(done, SweepOutcome::Complete(_)));
    assert_eq!(fs::read(dir.path().join(REPORT_FILE)).unwrap(), expected);
}

#[test]
fn resume_rejects_a_changed_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config("tiny_cnn", QuantMode::Dynamic, dir.path());
    run_sweep_observed(&cfg, &mut StopAfter(0)).unwrap();
    cfg.seed = 9;
    let err = tuneqn::resume_sweep(&cfg, dir.path().join(CHECKPOINT_FILE)).unwrap_err();
    assert!(matches!(err, Error::Resume(_)), "{err}");
}

#[test]
fn explicit_exclusion_evaluates_one_variant() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config("tiny_cnn", QuantMode::Static, dir.path());
    cfg.excluded_layers = Some(vec!["conv1".into(), "fc".into()]);
    assert!(matches!(run_sweep(&cfg), Err(Error::Config(_))));
    let (v, _) = run_explicit(&cfg).unwrap();
    assert_eq!(v.top1_mismatch, Some(0.0));
    cfg.excluded_layers = Some(vec!["nope".into()]);
    assert!(matches!(run_explicit(&cfg), Err(Error::Recipe(_))));
}
