use proptest::prelude::*;

use tuneqn::pareto::{dominates, non_dominated_sort, pareto, ObjectivePoint};
use tuneqn::quant::{compute_qparams, QuantDType};
use tuneqn::report::canonical_json;
use tuneqn::sensitivity::{build_records, normalize_errors, rank_layers, MetricWeights, RawLayerError};
use tuneqn::{top_k, Tensor};

fn dtype() -> impl Strategy<Value = QuantDType> {
    prop_oneof![Just(QuantDType::U8), Just(QuantDType::I8)]
}

fn points() -> impl Strategy<Value = Vec<ObjectivePoint>> {
    (2usize..=4).prop_flat_map(|m| {
        prop::collection::vec(prop::collection::vec(0u8..6, m), 1..30).prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, r)| ObjectivePoint::new(i, r.into_iter().map(f64::from).collect()))
                .collect()
        })
    })
}

fn raw_errors() -> impl Strategy<Value = Vec<RawLayerError>> {
    prop::collection::vec((0.0f64..5.0, 0.0f64..5.0), 1..12).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (q, x))| RawLayerError {
                node_id: format!("n{i}"),
                topo_index: i,
                qdq_err: q,
                xmodel_err: x,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn zero_is_exact_and_grid_bound_holds(lo in -100.0f32..0.0, hi in 0.0f32..100.0, t in 0.0f32..=1.0, d in dtype()) {
        let p = compute_qparams(lo, hi, d);
        prop_assert_eq!(p.fake_quantize(0.0), 0.0);
        let (a, b) = p.representable_range();
        let x = a + (b - a) * t;
        let err = (x as f64 - p.fake_quantize(x) as f64).abs();
        let ulp = (x.abs().max(b.abs()).next_up() - x.abs().max(b.abs())) as f64;
        prop_assert!(err <= p.scale / 2.0 + ulp);
    }

    #[test]
    fn out_of_range_values_saturate(lo in -10.0f32..0.0, hi in 0.1f32..10.0, d in dtype()) {
        let p = compute_qparams(lo, hi, d);
        let (qmin, qmax) = d.bounds();
        prop_assert_eq!(p.quantize_value(1e9), qmax);
        prop_assert_eq!(p.quantize_value(-1e9), qmin);
    }

    #[test]
    fn fronts_partition_and_respect_dominance(pts in points()) {
        let fronts = non_dominated_sort(&pts).unwrap();
        let mut all: Vec<usize> = fronts.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..pts.len()).collect::<Vec<_>>());
        for (r, front) in fronts.iter().enumerate() {
            for &i in front {
                for &j in front {
                    prop_assert!(!dominates(&pts[i], &pts[j]).unwrap());
                }
                if r > 0 {
                    prop_assert!(fronts[r - 1].iter().any(|&j| dominates(&pts[j], &pts[i]).unwrap()));
                }
            }
        }
    }

    #[test]
    fn candidates_come_from_the_best_fronts(pts in points(), k in 1usize..5) {
        let r = pareto(&pts, k).unwrap();
        prop_assert_eq!(r.top_candidates.len(), k.min(pts.len()));
        let rank = |i: usize| r.fronts.iter().position(|f| f.contains(&i)).unwrap();
        prop_assert!(r.top_candidates.windows(2).all(|w| rank(w[0]) <= rank(w[1])));
        prop_assert_eq!(rank(r.top_candidates[0]), 0);
    }

    #[test]
    fn ranking_ignores_positive_rescaling(raw in raw_errors(), s in 0.01f64..100.0) {
        let scaled: Vec<RawLayerError> = raw
            .iter()
            .map(|r| RawLayerError { qdq_err: r.qdq_err * s, xmodel_err: r.xmodel_err * s, ..r.clone() })
            .collect();
        let a = build_records(&raw, MetricWeights::default());
        let b = build_records(&scaled, MetricWeights::default());
        // normalization may differ by rounding only
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.error_metric - y.error_metric).abs() < 1e-9);
        }
        let ra = rank_layers(&a);
        prop_assert_eq!(ra.len(), raw.len());
        let mut sorted = ra.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), raw.len());
    }

    #[test]
    fn normalization_stays_in_unit_interval(v in prop::collection::vec(-1e6f64..1e6, 1..50)) {
        let n = normalize_errors(&v);
        prop_assert!(n.iter().all(|x| (0.0..=1.0).contains(x)));
        for (i, j) in (0..v.len()).flat_map(|i| (0..v.len()).map(move |j| (i, j))) {
            if v[i] < v[j] {
                prop_assert!(n[i] <= n[j]);
            }
        }
    }

    #[test]
    fn canonical_json_is_a_fixed_point(xs in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 0..20)) {
        let text = canonical_json(&xs).unwrap();
        let back: serde_json::Value = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(canonical_json(&back).unwrap(), text);
    }

    #[test]
    fn top_k_is_sorted_by_score(row in prop::collection::vec(-10.0f32..10.0, 1..20), k in 1usize..20) {
        let k = k.min(row.len());
        let t = Tensor::from_f32(vec![1, row.len()], row.clone()).unwrap();
        let picks = &top_k(&t, k).unwrap()[0];
        prop_assert_eq!(picks.len(), k);
        prop_assert!(picks.windows(2).all(|w| row[w[0]] > row[w[1]] || (row[w[0]] == row[w[1]] && w[0] < w[1])));
        let min_picked = picks.iter().map(|&i| row[i]).fold(f32::INFINITY, f32::min);
        prop_assert!(row.iter().enumerate().all(|(i, &v)| picks.contains(&i) || v <= min_picked));
    }
}
