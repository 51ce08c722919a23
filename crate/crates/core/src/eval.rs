//! Evaluation: segmentation metrics, error detection, probes, retrieval and
//! the summary-vs-counterfactual ranking, plus the pipeline that runs them
//! all on a trained model.

pub mod metrics;
pub mod probe;
pub mod report;

use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use metrics::{
    average_precision, eda, edit_score, error_detect, expand, f1_at_k, frame_accuracy, greedy_matches, levenshtein,
    macro_f1, map_at_10, select_threshold, to_segments, MapResult, Segment,
};
pub use probe::{phase_probe, LinearProbe, ProbeConfig};
pub use report::{compare, delta_table, Delta, MetricReport, META_KEYS, REPORT_HEADER, REPORT_KEYS};

use crate::config::Config;
use crate::encoders::{cosine, ClipEmbedding, Model, TextTable};
use crate::error::{Error, Result};
use crate::seed;
use crate::world::{VideoRecord, VideoSample, World};

/// Frame, clip and video embeddings of one rendered video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    pub frames: Vec<Vec<f64>>,
    pub clips: Vec<Vec<f64>>,
    pub video: Vec<f64>,
}

pub fn video_features(model: &Model, sample: &VideoSample) -> Result<VideoFeatures> {
    let flat: Vec<&[f64]> = sample.frames().collect();
    let frames = model.encoder.encode_frames(&flat)?;
    let (clips, video) = model.embed_video(&sample.clips)?;
    Ok(VideoFeatures {
        frames,
        clips: clips.into_iter().map(|c| c.vector).collect(),
        video: video.vector,
    })
}

pub fn split_features(model: &Model, samples: &[&VideoSample]) -> Result<Vec<VideoFeatures>> {
    samples.par_iter().map(|s| video_features(model, s)).collect()
}

/// Percentage of videos whose embedding is closer to the true summary than
/// to every stored counterfactual of that summary.
pub fn ranking_accuracy(model: &Model, text: &TextTable, records: &[VideoRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("ranking needs at least one video"));
    }
    let wins = records
        .par_iter()
        .map(|r| {
            let (_, v) = model.embed_video(&r.video.clips)?;
            let pos = cosine(&v.vector, &text.embed(&r.activity.summary_tokens)?);
            for cf in &r.cfs {
                if cosine(&v.vector, &text.embed(&cf.tokens)?) >= pos {
                    return Ok(false);
                }
            }
            Ok(true)
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(100.0 * wins.iter().filter(|&&w| w).count() as f64 / records.len() as f64)
}

/// Per-action centroids; `None` for actions never seen.
pub fn centroids<'a>(
    items: impl IntoIterator<Item = (usize, &'a [f64])>,
    n_actions: usize,
    dim: usize,
) -> Vec<Option<Vec<f64>>> {
    let mut sums = vec![vec![0.0; dim]; n_actions];
    let mut counts = vec![0usize; n_actions];
    for (a, v) in items {
        counts[a] += 1;
        sums[a].iter_mut().zip(v).for_each(|(s, x)| *s += x);
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|x| x / c as f64).collect()))
        .collect()
}

/// Nearest prototype by cosine and the similarity to it; ties keep the
/// lowest action id.
pub fn nearest_prototype(v: &[f64], prototypes: &[Option<Vec<f64>>]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (a, p) in prototypes.iter().enumerate() {
        if let Some(p) = p {
            let c = cosine(v, p);
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((a, c));
            }
        }
    }
    best.ok_or_else(|| Error::invalid("no prototypes"))
}

/// Early-half (0) or late-half (1) label of frame `f` in a clip of `k`.
pub fn phase_label(f: usize, k: usize) -> usize {
    usize::from(f >= k / 2)
}

/// Phase probes trained separately for each action on train-split frames and
/// scored on test-split frames; returns the mean macro F1 over actions that
/// occur in both splits.
pub fn phase_f1(
    train: &[VideoRecord],
    train_feats: &[VideoFeatures],
    test: &[VideoRecord],
    test_feats: &[VideoFeatures],
    n_actions: usize,
    cfg: ProbeConfig,
) -> Result<f64> {
    type Rows = (Vec<Vec<f64>>, Vec<usize>);
    let collect = |records: &[VideoRecord], feats: &[VideoFeatures]| -> Vec<Rows> {
        let mut by_action: Vec<Rows> = vec![(Vec::new(), Vec::new()); n_actions];
        for (r, f) in records.iter().zip(feats) {
            let k = r.video.frames_per_clip();
            for (c, step) in r.activity.steps.iter().enumerate() {
                for j in 0..k {
                    by_action[step.action].0.push(f.frames[c * k + j].clone());
                    by_action[step.action].1.push(phase_label(j, k));
                }
            }
        }
        by_action
    };
    let tr = collect(train, train_feats);
    let te = collect(test, test_feats);
    let scores = (0..n_actions)
        .into_par_iter()
        .filter(|&a| !tr[a].0.is_empty() && !te[a].0.is_empty())
        .map(|a| {
            let c = ProbeConfig {
                seed: seed::derive_indexed(cfg.seed, "probe.action", a as u64),
                ..cfg
            };
            phase_probe(&tr[a].0, &tr[a].1, &te[a].0, &te[a].1, c)
        })
        .collect::<Result<Vec<f64>>>()?;
    if scores.is_empty() {
        return Err(Error::invalid("no action occurs in both splits"));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Corrupts `fraction` of all clips of a split, chosen by a seeded shuffle.
pub fn corrupt_split(
    world: &World,
    records: &[VideoRecord],
    fraction: f64,
    seed_value: u64,
) -> Result<Vec<VideoSample>> {
    let mut slots: Vec<(usize, usize)> = records
        .iter()
        .enumerate()
        .flat_map(|(v, r)| (0..r.activity.len()).map(move |c| (v, c)))
        .collect();
    slots.shuffle(&mut seed::rng(seed::derive(seed_value, "pick")));
    let n = (fraction * slots.len() as f64).round() as usize;
    let mut chosen: Vec<Vec<usize>> = vec![Vec::new(); records.len()];
    for &(v, c) in &slots[..n] {
        chosen[v].push(c);
    }
    chosen.iter_mut().for_each(|c| c.sort_unstable());
    records
        .par_iter()
        .enumerate()
        .map(|(v, r)| {
            world.inject_errors(
                &r.video,
                &r.activity,
                &chosen[v],
                seed::derive_indexed(seed_value, "video", v as u64),
            )
        })
        .collect()
}

/// Per-frame view of a corrupted split: the clip embedding each frame
/// inherits, the nearest clip prototype and its cosine, and the truth flag.
struct FrameScores {
    clip_feats: Vec<Vec<f64>>,
    predicted: Vec<usize>,
    scores: Vec<f64>,
    truth: Vec<bool>,
}

/// Which action's prototype a clip is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActionSource {
    /// The nearest clip prototype.
    #[default]
    Predicted,
    /// The clip's true step; an analysis upper bound, not a detector.
    Reference,
}

fn frame_scores(
    model: &Model,
    records: &[VideoRecord],
    samples: &[VideoSample],
    prototypes: &[Option<Vec<f64>>],
    source: ActionSource,
) -> Result<FrameScores> {
    let per_video = records
        .par_iter()
        .zip(samples)
        .map(|(r, s)| {
            let refs: Vec<&[Vec<f64>]> = s.clips.iter().map(Vec::as_slice).collect();
            let clips: Vec<ClipEmbedding> = model.encoder.encode_clips(&refs)?;
            let k = s.frames_per_clip();
            let mut out = FrameScores {
                clip_feats: Vec::new(),
                predicted: Vec::new(),
                scores: Vec::new(),
                truth: s.error_flags.clone(),
            };
            for (c, step) in clips.into_iter().zip(&r.activity.steps) {
                let (a, sim) = match source {
                    ActionSource::Predicted => nearest_prototype(&c.vector, prototypes)?,
                    ActionSource::Reference => {
                        let p = prototypes[step.action]
                            .as_ref()
                            .ok_or_else(|| Error::invalid(format!("no prototype for action {}", step.action)))?;
                        (step.action, cosine(&c.vector, p))
                    }
                };
                out.predicted.extend(std::iter::repeat_n(a, k));
                out.scores.extend(std::iter::repeat_n(sim, k));
                out.clip_feats.extend(std::iter::repeat_n(c.vector, k));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut all = FrameScores {
        clip_feats: Vec::new(),
        predicted: Vec::new(),
        scores: Vec::new(),
        truth: Vec::new(),
    };
    for v in per_video {
        all.clip_feats.extend(v.clip_feats);
        all.predicted.extend(v.predicted);
        all.scores.extend(v.scores);
        all.truth.extend(v.truth);
    }
    Ok(all)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorDetection {
    pub threshold: f64,
    pub val_eda: f64,
    pub test_eda: f64,
}

/// Builds clip prototypes from clean training clips, picks the threshold
/// on a corrupted validation split and scores a corrupted test split.
#[allow(clippy::too_many_arguments)]
pub fn error_detection(
    model: &Model,
    world: &World,
    train_feats: &[VideoFeatures],
    train: &[VideoRecord],
    val: &[VideoRecord],
    test: &[VideoRecord],
    fraction: f64,
    seed_value: u64,
    source: ActionSource,
) -> Result<ErrorDetection> {
    let dim = model.encoder.embed_dim();
    let prototypes = centroids(
        train.iter().zip(train_feats).flat_map(|(r, f)| {
            r.activity
                .steps
                .iter()
                .map(|s| s.action)
                .zip(f.clips.iter().map(Vec::as_slice))
        }),
        world.config().n_actions,
        dim,
    );
    let val_c = corrupt_split(world, val, fraction, seed::derive(seed_value, "val"))?;
    let test_c = corrupt_split(world, test, fraction, seed::derive(seed_value, "test"))?;
    let v = frame_scores(model, val, &val_c, &prototypes, source)?;
    let (threshold, val_eda) = select_threshold(&v.scores, &v.truth)?;
    let t = frame_scores(model, test, &test_c, &prototypes, source)?;
    let flags = error_detect(&t.clip_feats, &t.predicted, &prototypes, threshold)?;
    Ok(ErrorDetection {
        threshold,
        val_eda,
        test_eda: eda(&flags, &t.truth)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationScores {
    pub f1: [f64; 3],
    pub edit: f64,
    pub frame_acc: f64,
}

pub const F1_THRESHOLDS: [f64; 3] = [0.10, 0.25, 0.50];

/// Labels every test frame with its nearest per-action frame prototype
/// (train-split centroids). F1 and edit are averaged over videos, accuracy
/// is pooled over frames.
pub fn segmentation(
    train: &[VideoRecord],
    train_feats: &[VideoFeatures],
    test: &[VideoRecord],
    test_feats: &[VideoFeatures],
    n_actions: usize,
) -> Result<SegmentationScores> {
    let dim = train_feats.first().map_or(0, |f| f.video.len());
    let prototypes = centroids(
        train.iter().zip(train_feats).flat_map(|(r, f)| {
            r.video
                .step_labels
                .iter()
                .copied()
                .zip(f.frames.iter().map(Vec::as_slice))
        }),
        n_actions,
        dim,
    );
    let mut f1 = [0.0; 3];
    let mut edit = 0.0;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (r, f) in test.iter().zip(test_feats) {
        let pred = f
            .frames
            .iter()
            .map(|x| nearest_prototype(x, &prototypes).map(|p| p.0))
            .collect::<Result<Vec<_>>>()?;
        let gt = &r.video.step_labels;
        let ps = to_segments(&pred)?;
        let gs = to_segments(gt)?;
        for (slot, &k) in f1.iter_mut().zip(&F1_THRESHOLDS) {
            *slot += f1_at_k(&ps, &gs, k)?;
        }
        edit += edit_score(&ps, &gs)?;
        hits += pred.iter().zip(gt).filter(|(a, b)| a == b).count();
        total += gt.len();
    }
    let n = test.len() as f64;
    Ok(SegmentationScores {
        f1: f1.map(|x| x / n),
        edit: edit / n,
        frame_acc: 100.0 * hits as f64 / total as f64,
    })
}

/// Frame retrieval: test frames query train frames; a match shares both the
/// action and the early/late phase.
pub fn frame_retrieval(
    train: &[VideoRecord],
    train_feats: &[VideoFeatures],
    test: &[VideoRecord],
    test_feats: &[VideoFeatures],
) -> Result<MapResult> {
    let flatten = |records: &[VideoRecord], feats: &[VideoFeatures]| {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (r, f) in records.iter().zip(feats) {
            let k = r.video.frames_per_clip();
            for (i, (&a, v)) in r.video.step_labels.iter().zip(&f.frames).enumerate() {
                x.push(v.clone());
                y.push(2 * a + phase_label(i % k, k));
            }
        }
        (x, y)
    };
    let (gx, gy) = flatten(train, train_feats);
    let (qx, qy) = flatten(test, test_feats);
    map_at_10(&qx, &qy, &gx, &gy)
}

/// Identifiers recorded in the report metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportIds {
    pub dataset: String,
    pub model: String,
}

/// Runs the full battery. Features are computed once per split; the
/// evaluation split is `eval_split`, the validation split is used only to
/// pick the error-detection threshold.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    config: &Config,
    world: &World,
    model: &Model,
    text: &TextTable,
    train: &[VideoRecord],
    val: &[VideoRecord],
    eval_split: &[VideoRecord],
    ids: &ReportIds,
) -> Result<MetricReport> {
    if train.is_empty() || val.is_empty() || eval_split.is_empty() {
        return Err(Error::invalid(
            "evaluation needs non-empty train, validation and evaluation splits",
        ));
    }
    let n_actions = world.config().n_actions;
    let tr: Vec<&VideoSample> = train.iter().map(|r| &r.video).collect();
    let ev: Vec<&VideoSample> = eval_split.iter().map(|r| &r.video).collect();
    let train_feats = split_features(model, &tr)?;
    let eval_feats = split_features(model, &ev)?;
    let probe = ProbeConfig {
        steps: config.eval.probe_steps,
        lr: config.eval.probe_lr,
        seed: seed::derive(config.seed, "eval.probe"),
    };

    let mut r = MetricReport::default();
    r.insert("ranking_acc", ranking_accuracy(model, text, eval_split)?)?;
    r.insert(
        "phase_f1",
        phase_f1(train, &train_feats, eval_split, &eval_feats, n_actions, probe)?,
    )?;
    let det = error_detection(
        model,
        world,
        &train_feats,
        train,
        val,
        eval_split,
        config.eval.error_fraction,
        seed::derive(config.seed, "eval.errors"),
        ActionSource::Predicted,
    )?;
    r.insert("eda", det.test_eda)?;
    let seg = segmentation(train, &train_feats, eval_split, &eval_feats, n_actions)?;
    r.insert("f1@10", seg.f1[0])?;
    r.insert("f1@25", seg.f1[1])?;
    r.insert("f1@50", seg.f1[2])?;
    r.insert("edit", seg.edit)?;
    r.insert("frame_acc", seg.frame_acc)?;
    let map = frame_retrieval(train, &train_feats, eval_split, &eval_feats)?;
    r.insert("map@10", map.map)?;
    r.meta.insert("dataset".into(), ids.dataset.clone());
    r.meta.insert("model".into(), ids.model.clone());
    r.meta.insert("seed".into(), config.seed.to_string());
    r.meta.insert("map_excluded_queries".into(), map.excluded.to_string());
    Ok(r)
}
