//! Non-dominated sorting and candidate selection over minimized objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectivePoint {
    pub variant_index: usize,
    /// Values to minimize.
    pub objectives: Vec<f64>,
}

impl ObjectivePoint {
    pub fn new(variant_index: usize, objectives: Vec<f64>) -> Self {
        ObjectivePoint {
            variant_index,
            objectives,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoResult {
    /// Fronts by rank, each listing variant indices in ascending order.
    pub fronts: Vec<Vec<usize>>,
    pub top_candidates: Vec<usize>,
}

/// `a` is no worse than `b` everywhere and strictly better somewhere.
pub fn dominates(a: &ObjectivePoint, b: &ObjectivePoint) -> Result<bool> {
    if a.objectives.len() != b.objectives.len() {
        return Err(Error::Argument(format!(
            "objective arity differs: {} vs {}",
            a.objectives.len(),
            b.objectives.len()
        )));
    }
    Ok(dominates_unchecked(&a.objectives, &b.objectives))
}

fn dominates_unchecked(a: &[f64], b: &[f64]) -> bool {
    let mut strictly = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        strictly |= x < y;
    }
    strictly
}

fn check(points: &[ObjectivePoint]) -> Result<usize> {
    let arity = points.first().map_or(0, |p| p.objectives.len());
    for p in points {
        if p.objectives.len() != arity {
            return Err(Error::Argument("points have differing objective counts".into()));
        }
        if p.objectives.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument(format!(
                "variant {} has a non-finite objective",
                p.variant_index
            )));
        }
    }
    Ok(arity)
}

/// Fast non-dominated sort. Returns fronts of positions into `points`,
/// each ascending.
fn sort_positions(points: &[ObjectivePoint]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by_count = vec![0usize; n];
    let mut dominates_list: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (&points[i].objectives, &points[j].objectives);
            if dominates_unchecked(a, b) {
                dominates_list[i].push(j);
                dominated_by_count[j] += 1;
            } else if dominates_unchecked(b, a) {
                dominates_list[j].push(i);
                dominated_by_count[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by_count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominates_list[i] {
                dominated_by_count[j] -= 1;
                if dominated_by_count[j] == 0 {
                    next.push(j);
                }
            }
        }
        fronts.push(current);
        next.sort_unstable();
        current = next;
    }
    fronts
}

/// Ranks points into fronts of variant indices. Front members are sorted
/// ascending.
pub fn non_dominated_sort(points: &[ObjectivePoint]) -> Result<Vec<Vec<usize>>> {
    if points.is_empty() {
        return Err(Error::Argument("cannot sort an empty point set".into()));
    }
    check(points)?;
    Ok(sort_positions(points)
        .into_iter()
        .map(|front| {
            let mut ids: Vec<usize> = front.into_iter().map(|i| points[i].variant_index).collect();
            ids.sort_unstable();
            ids
        })
        .collect())
}

/// Scales each objective to `[0, 100]` over the set; constant objectives
/// become 0.
pub fn normalize_objectives(points: &[ObjectivePoint]) -> Vec<ObjectivePoint> {
    let arity = points.first().map_or(0, |p| p.objectives.len());
    let mut out = points.to_vec();
    for k in 0..arity {
        let min = points.iter().map(|p| p.objectives[k]).fold(f64::INFINITY, f64::min);
        let max = points.iter().map(|p| p.objectives[k]).fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        for p in out.iter_mut() {
            let v = p.objectives[k];
            p.objectives[k] = if span > 0.0 { (v - min) / span * 100.0 } else { 0.0 };
        }
    }
    out
}

/// Walks fronts in rank order; inside a front, lower normalized-objective
/// sums come first and ties go to the lower variant index.
pub fn select_top_candidates(fronts: &[Vec<usize>], points: &[ObjectivePoint], k: usize) -> Vec<usize> {
    let normalized = normalize_objectives(points);
    let score = |index: usize| -> f64 {
        normalized
            .iter()
            .find(|p| p.variant_index == index)
            .map_or(f64::INFINITY, |p| p.objectives.iter().sum())
    };
    let mut picked = Vec::with_capacity(k);
    for front in fronts {
        let mut members: Vec<(f64, usize)> = front.iter().map(|&i| (score(i), i)).collect();
        members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, i) in members {
            if picked.len() == k {
                return picked;
            }
            picked.push(i);
        }
    }
    picked
}

/// Fronts plus the first `k` candidates.
pub fn pareto(points: &[ObjectivePoint], k: usize) -> Result<ParetoResult> {
    let fronts = non_dominated_sort(points)?;
    let top_candidates = select_top_candidates(&fronts, points, k);
    Ok(ParetoResult {
        fronts,
        top_candidates,
    })
}
