//! Brute-force metric oracles shared by the oracle and acceptance tests.
//! The oracles never call into the metric implementations.
#![allow(dead_code)]

use std::collections::HashMap;

use procshift::eval::Segment;
use rand::Rng;

/// Random labeling of `t` frames with at most `max_segments` runs over
/// `labels` labels, adjacent runs distinct.
pub fn random_labeling(rng: &mut impl Rng, t: usize, max_segments: usize, labels: usize) -> Vec<usize> {
    let n = if labels < 2 {
        1
    } else {
        rng.random_range(1..=max_segments.min(t))
    };
    let mut cuts: Vec<usize> = Vec::new();
    while cuts.len() < n - 1 {
        let c = rng.random_range(1..t);
        if !cuts.contains(&c) {
            cuts.push(c);
        }
    }
    cuts.sort_unstable();
    cuts.push(t);
    let mut out = Vec::with_capacity(t);
    let mut prev = usize::MAX;
    let mut start = 0;
    for end in cuts {
        let mut l = rng.random_range(0..labels);
        while l == prev {
            l = rng.random_range(0..labels);
        }
        out.extend(std::iter::repeat_n(l, end - start));
        prev = l;
        start = end;
    }
    out
}

/// Runs as (label, start, end) by a direct scan.
pub fn runs(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out: Vec<(usize, usize, usize)> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(r) if r.0 == l => r.2 = i + 1,
            _ => out.push((l, i, i + 1)),
        }
    }
    out
}

pub fn as_segments(r: &[(usize, usize, usize)]) -> Vec<Segment> {
    r.iter()
        .map(|&(label, start, end)| Segment { label, start, end })
        .collect()
}

/// IoU by counting frames.
pub fn frame_iou(a: (usize, usize, usize), b: (usize, usize, usize)) -> f64 {
    let t = a.2.max(b.2);
    let (mut inter, mut union) = (0, 0);
    for f in 0..t {
        let ia = (a.1..a.2).contains(&f);
        let ib = (b.1..b.2).contains(&f);
        inter += usize::from(ia && ib);
        union += usize::from(ia || ib);
    }
    inter as f64 / union as f64
}

/// Every one-to-one matching over same-label pairs with IoU ≥ k.
fn all_matchings(
    pred: &[(usize, usize, usize)],
    gt: &[(usize, usize, usize)],
    k: f64,
) -> Vec<Vec<(usize, usize, f64)>> {
    let mut edges = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            if p.0 == g.0 {
                let iou = frame_iou(*p, *g);
                if iou >= k {
                    edges.push((i, j, iou));
                }
            }
        }
    }
    fn extend(
        i: usize,
        n_pred: usize,
        edges: &[(usize, usize, f64)],
        used: &mut Vec<usize>,
        cur: &mut Vec<(usize, usize, f64)>,
        out: &mut Vec<Vec<(usize, usize, f64)>>,
    ) {
        if i == n_pred {
            out.push(cur.clone());
            return;
        }
        extend(i + 1, n_pred, edges, used, cur, out);
        for e in edges.iter().filter(|e| e.0 == i) {
            if used.contains(&e.1) {
                continue;
            }
            used.push(e.1);
            cur.push(*e);
            extend(i + 1, n_pred, edges, used, cur, out);
            cur.pop();
            used.pop();
        }
    }
    let mut out = Vec::new();
    extend(0, pred.len(), &edges, &mut Vec::new(), &mut Vec::new(), &mut out);
    out
}

fn f1(tp: usize, np: usize, ng: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        let (p, r) = (tp as f64 / np as f64, tp as f64 / ng as f64);
        200.0 * p * r / (p + r)
    }
}

/// Priority key of an edge: higher IoU first, then lower pred index, then
/// lower gt index.
fn edge_key(e: &(usize, usize, f64)) -> (std::cmp::Reverse<u64>, usize, usize) {
    (std::cmp::Reverse(e.2.to_bits()), e.0, e.1)
}

/// F1 of the matching that is lexicographically best under the priority
/// order: compare matchings by their edges sorted by priority, position by
/// position, a strict extension beating its prefix.
pub fn f1_priority_oracle(pred_labels: &[usize], gt_labels: &[usize], k: f64) -> f64 {
    let (pred, gt) = (runs(pred_labels), runs(gt_labels));
    let best = all_matchings(&pred, &gt, k)
        .into_iter()
        .map(|mut m| {
            m.sort_by_key(edge_key);
            m
        })
        .min_by(|a, b| {
            for (x, y) in a.iter().zip(b) {
                let o = edge_key(x).cmp(&edge_key(y));
                if o != std::cmp::Ordering::Equal {
                    return o;
                }
            }
            b.len().cmp(&a.len())
        })
        .unwrap_or_default();
    f1(best.len(), pred.len(), gt.len())
}

/// F1 of a maximum-cardinality matching.
pub fn f1_max_cardinality(pred_labels: &[usize], gt_labels: &[usize], k: f64) -> f64 {
    let (pred, gt) = (runs(pred_labels), runs(gt_labels));
    let tp = all_matchings(&pred, &gt, k).iter().map(Vec::len).max().unwrap_or(0);
    f1(tp, pred.len(), gt.len())
}

/// Levenshtein distance by memoized recursion on suffixes.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    fn go(a: &[usize], b: &[usize], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            1 + go(a, b, i + 1, j, memo)
                .min(go(a, b, i, j + 1, memo))
                .min(go(a, b, i + 1, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

pub fn edit_oracle(pred_labels: &[usize], gt_labels: &[usize]) -> f64 {
    let a: Vec<usize> = runs(pred_labels).iter().map(|r| r.0).collect();
    let b: Vec<usize> = runs(gt_labels).iter().map(|r| r.0).collect();
    100.0 * (1.0 - edit_distance(&a, &b) as f64 / a.len().max(b.len()) as f64)
}

/// AP over a top-k relevance list from its definition.
pub fn ap_oracle(relevant: &[bool]) -> f64 {
    let ranks: Vec<usize> = relevant
        .iter()
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(i, _)| i + 1)
        .collect();
    if ranks.is_empty() {
        return 0.0;
    }
    ranks
        .iter()
        .enumerate()
        .map(|(n, &r)| (n + 1) as f64 / r as f64)
        .sum::<f64>()
        / ranks.len() as f64
}

/// Unit vector at angle `theta` in the first two coordinates of `d`.
pub fn angle_vec(theta: f64, d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[0] = theta.cos();
    v[1] = theta.sin();
    v
}

/// Results of comparing the metrics with the oracles on random instances.
#[derive(Debug, Default)]
pub struct OracleSweep {
    pub instances: usize,
    pub f1_mismatches: usize,
    pub edit_mismatches: usize,
    pub monotonicity_violations: usize,
    /// (instance, threshold) pairs where greedy found fewer matches than a
    /// maximum matching.
    pub greedy_below_max: usize,
    pub greedy_above_max: usize,
    pub max_mismatches_at_half: usize,
}

pub const THRESHOLDS: [f64; 3] = [0.10, 0.25, 0.50];

/// Checks `f1_at_k` and `edit_score` on `n` random instances with at most
/// six segments per side.
pub fn oracle_sweep(seed: u64, n: usize) -> OracleSweep {
    use procshift::eval::{edit_score, f1_at_k};
    let mut rng = procshift::seed::rng(seed);
    let mut s = OracleSweep::default();
    for _ in 0..n {
        let t = rng.random_range(1..=24);
        let labels = rng.random_range(1..=3);
        let gt = random_labeling(&mut rng, t, 6, labels);
        let pred = random_labeling(&mut rng, t, 6, labels);
        let (ps, gs) = (as_segments(&runs(&pred)), as_segments(&runs(&gt)));
        let mut scores = [0.0; 3];
        for (i, k) in THRESHOLDS.into_iter().enumerate() {
            let got = f1_at_k(&ps, &gs, k).expect("valid instance");
            scores[i] = got;
            if got != f1_priority_oracle(&pred, &gt, k) {
                s.f1_mismatches += 1;
            }
            let max = f1_max_cardinality(&pred, &gt, k);
            if got < max {
                s.greedy_below_max += 1;
            }
            if got > max {
                s.greedy_above_max += 1;
            }
            if k >= 0.5 && got != max {
                s.max_mismatches_at_half += 1;
            }
        }
        if !(scores[2] <= scores[1] && scores[1] <= scores[0]) {
            s.monotonicity_violations += 1;
        }
        if edit_score(&ps, &gs).expect("valid instance") != edit_oracle(&pred, &gt) {
            s.edit_mismatches += 1;
        }
        s.instances += 1;
    }
    s
}
