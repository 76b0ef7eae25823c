mod common;

use std::fs;

use common::fixture;
use tuneqn::plot::{plot_layer_errors, plot_objectives, x_pixel};
use tuneqn::sensitivity::LayerErrorRecord;
use tuneqn::sweep::REPORT_FILE;
use tuneqn::{read_report, run_sweep, write_report, QuantMode, SweepConfig, SweepReport};

fn report() -> SweepReport {
    let dir = tempfile::tempdir().unwrap();
    let mut c = SweepConfig::new(fixture("tiny_cnn.qtm"), fixture("data10/manifest.json"), QuantMode::Dynamic);
    c.output_dir = dir.path().to_path_buf();
    c.timestamp = Some("1700000000".into());
    run_sweep(&c).unwrap();
    read_report(dir.path().join(REPORT_FILE)).unwrap()
}

#[test]
fn report_round_trips_and_is_byte_stable() {
    let r = report();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    write_report(&r, &a).unwrap();
    write_report(&r, &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(read_report(&a).unwrap(), r);
    assert!(r.validate().is_ok());
    assert_eq!(r.metadata.timestamp, "1700000000");
}

#[test]
fn single_layer_plot_has_one_marker_per_series() {
    let rec = LayerErrorRecord {
        node_id: "fc".into(),
        topo_index: 0,
        qdq_err: 0.1,
        xmodel_err: 0.2,
        norm_qdq_err: 0.0,
        norm_xmodel_err: 0.0,
        error_metric: 0.0,
        rank: 0,
    };
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("l.svg");
    plot_layer_errors(&[rec], &p).unwrap();
    let text = fs::read_to_string(&p).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    let markers: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("circle")).collect();
    assert_eq!(markers.len(), 2);
    assert!(markers.iter().all(|m| m.attribute("cx") == Some("400.00")));
    assert!(plot_layer_errors(&[], &p).is_err());
}

#[test]
fn objective_plot_marks_every_candidate() {
    let r = report();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("o.svg");
    plot_objectives(&r, &p).unwrap();
    let text = fs::read_to_string(&p).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    let xs: Vec<f64> = doc
        .descendants()
        .filter(|n| n.has_tag_name("line") && n.attribute("class") == Some("pareto"))
        .map(|n| n.attribute("x1").unwrap().parse().unwrap())
        .collect();
    let want: Vec<f64> = r.pareto.top_candidates.iter().map(|&c| x_pixel(c, r.variants.len())).collect();
    assert_eq!(xs.len(), 3);
    for (x, w) in xs.iter().zip(&want) {
        assert!((x - w).abs() < 0.01);
    }
    let mut broken = r.clone();
    broken.pareto.top_candidates.push(99);
    assert!(plot_objectives(&broken, &p).is_err());
}
