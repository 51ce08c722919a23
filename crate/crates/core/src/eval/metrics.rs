//! Segmentation, error-detection and retrieval metrics.

use crate::encoders::cosine;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Segment {
    pub label: usize,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn iou(&self, other: &Segment) -> f64 {
        let inter = self.end.min(other.end).saturating_sub(self.start.max(other.start));
        let union = self.end.max(other.end) - self.start.min(other.start);
        inter as f64 / union as f64
    }
}

/// Maximal runs of equal labels.
pub fn to_segments(labels: &[usize]) -> Result<Vec<Segment>> {
    let Some(&first) = labels.first() else {
        return Err(Error::invalid("cannot segment an empty labeling"));
    };
    let mut out = Vec::new();
    let mut cur = Segment {
        label: first,
        start: 0,
        end: 1,
    };
    for (i, &l) in labels.iter().enumerate().skip(1) {
        if l == cur.label {
            cur.end = i + 1;
        } else {
            out.push(cur);
            cur = Segment {
                label: l,
                start: i,
                end: i + 1,
            };
        }
    }
    out.push(cur);
    Ok(out)
}

pub fn expand(segments: &[Segment]) -> Vec<usize> {
    segments
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.label, s.len()))
        .collect()
}

fn total_len(segments: &[Segment]) -> usize {
    segments.last().map_or(0, |s| s.end)
}

/// Pairs matched by the greedy rule: candidate (pred, gt) pairs with equal
/// labels and IoU ≥ `k`, taken in descending IoU order (ties by pred then gt
/// index), each segment used at most once.
pub fn greedy_matches(pred: &[Segment], gt: &[Segment], k: f64) -> Vec<(usize, usize)> {
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            if p.label == g.label {
                let iou = p.iou(g);
                if iou >= k {
                    cands.push((iou, i, j));
                }
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut out = Vec::new();
    for (_, i, j) in cands {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            out.push((i, j));
        }
    }
    out
}

pub fn f1_from_counts(tp: usize, n_pred: usize, n_gt: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / n_pred as f64;
    let r = tp as f64 / n_gt as f64;
    200.0 * p * r / (p + r)
}

/// Segmental F1 at IoU threshold `k`, as a percentage.
pub fn f1_at_k(pred: &[Segment], gt: &[Segment], k: f64) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::invalid("segment lists must be non-empty"));
    }
    if total_len(pred) != total_len(gt) {
        return Err(Error::shape(
            "f1_at_k",
            format!(
                "prediction covers {} frames, ground truth {}",
                total_len(pred),
                total_len(gt)
            ),
        ));
    }
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::invalid(format!("IoU threshold must be in [0, 1], got {k}")));
    }
    let tp = greedy_matches(pred, gt, k).len();
    Ok(f1_from_counts(tp, pred.len(), gt.len()))
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `100·(1 − lev/max(|pred|, |gt|))` over segment label sequences.
pub fn edit_score(pred: &[Segment], gt: &[Segment]) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::invalid("segment lists must be non-empty"));
    }
    let a: Vec<usize> = pred.iter().map(|s| s.label).collect();
    let b: Vec<usize> = gt.iter().map(|s| s.label).collect();
    let d = levenshtein(&a, &b);
    Ok(100.0 * (1.0 - d as f64 / a.len().max(b.len()) as f64))
}

pub fn frame_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::shape(
            "frame_accuracy",
            format!("lengths {} and {} must match and be positive", pred.len(), gt.len()),
        ));
    }
    let hits = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / gt.len() as f64)
}

/// Macro-balanced accuracy over {error, normal}, as a percentage.
pub fn eda(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "eda",
            format!("lengths {} and {} differ", pred.len(), gt.len()),
        ));
    }
    let pos = gt.iter().filter(|&&g| g).count();
    let neg = gt.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("ground truth needs both error and normal frames"));
    }
    let tp = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count();
    let tn = pred.iter().zip(gt).filter(|(p, g)| !**p && !**g).count();
    Ok(50.0 * (tp as f64 / pos as f64 + tn as f64 / neg as f64))
}

/// Mean average precision over the top 10 gallery items by cosine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapResult {
    pub map: f64,
    pub queries: usize,
    /// Queries without any same-label gallery item.
    pub excluded: usize,
}

pub fn average_precision(relevant: &[bool]) -> f64 {
    let mut hits = 0;
    let mut acc = 0.0;
    for (r, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            acc += hits as f64 / (r + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        acc / hits as f64
    }
}

pub fn map_at_10(
    queries: &[Vec<f64>],
    query_labels: &[usize],
    gallery: &[Vec<f64>],
    gallery_labels: &[usize],
) -> Result<MapResult> {
    if queries.len() != query_labels.len() || gallery.len() != gallery_labels.len() {
        return Err(Error::shape("map_at_10", "features and labels differ in count"));
    }
    if gallery.len() < 10 {
        return Err(Error::invalid(format!(
            "gallery needs at least 10 items, has {}",
            gallery.len()
        )));
    }
    let mut total = 0.0;
    let mut counted = 0;
    for (q, &ql) in queries.iter().zip(query_labels) {
        if !gallery_labels.contains(&ql) {
            continue;
        }
        let mut order: Vec<(f64, usize)> = gallery.iter().enumerate().map(|(i, g)| (cosine(q, g), i)).collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let rel: Vec<bool> = order.iter().take(10).map(|&(_, i)| gallery_labels[i] == ql).collect();
        total += average_precision(&rel);
        counted += 1;
    }
    Ok(MapResult {
        map: if counted == 0 { 0.0 } else { total / counted as f64 },
        queries: counted,
        excluded: queries.len() - counted,
    })
}

/// Flags clip `i` when its cosine to the prototype of `predicted[i]` is
/// below `threshold`. `prototypes[a]` is `None` for unseen actions.
pub fn error_detect(
    clip_feats: &[Vec<f64>],
    predicted: &[usize],
    prototypes: &[Option<Vec<f64>>],
    threshold: f64,
) -> Result<Vec<bool>> {
    if clip_feats.len() != predicted.len() {
        return Err(Error::shape(
            "error_detect",
            "one predicted action per clip is required",
        ));
    }
    clip_feats
        .iter()
        .zip(predicted)
        .map(|(c, &a)| match prototypes.get(a) {
            Some(Some(p)) => Ok(cosine(c, p) < threshold),
            _ => Err(Error::invalid(format!("no prototype for action {a}"))),
        })
        .collect()
}

/// Threshold maximizing EDA when items scoring below it are flagged.
/// Candidates sit midway between consecutive distinct scores, plus one
/// below and one above all scores; ties keep the lowest threshold.
pub fn select_threshold(scores: &[f64], gt: &[bool]) -> Result<(f64, f64)> {
    if scores.len() != gt.len() || scores.is_empty() {
        return Err(Error::shape(
            "select_threshold",
            "scores and labels must match and be non-empty",
        ));
    }
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut cands = vec![s[0] - 1.0];
    cands.extend(s.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    cands.push(s[s.len() - 1] + 1.0);
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for t in cands {
        let pred: Vec<bool> = scores.iter().map(|&x| x < t).collect();
        let e = eda(&pred, gt)?;
        if e > best.1 {
            best = (t, e);
        }
    }
    Ok(best)
}

/// Macro F1 (percentage) over the classes appearing in `gt` or `pred`.
pub fn macro_f1(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::shape("macro_f1", "lengths must match and be positive"));
    }
    let mut classes: Vec<usize> = pred.iter().chain(gt).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let mut total = 0.0;
    for &c in &classes {
        let tp = pred.iter().zip(gt).filter(|(p, g)| **p == c && **g == c).count();
        let fp = pred.iter().zip(gt).filter(|(p, g)| **p == c && **g != c).count();
        let fneg = pred.iter().zip(gt).filter(|(p, g)| **p != c && **g == c).count();
        let denom = 2 * tp + fp + fneg;
        total += if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        };
    }
    Ok(100.0 * total / classes.len() as f64)
}
