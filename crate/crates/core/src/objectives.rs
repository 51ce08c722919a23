//! Contrastive objectives at the frame, clip and video levels.
//!
//! Similarities are dot products of unit-norm embeddings (cosines). All
//! losses are built on a [`Tape`] so they backpropagate into the encoders;
//! text embeddings enter as constants.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DenominatorMode {
    /// `Σ_{n∈N(i)} exp(s_n/τ)` only.
    #[default]
    NegativesOnly,
    /// Adds the positive's own `exp(s_p/τ)` to the denominator (SupCon form).
    NegativesPlusPositive,
}

impl DenominatorMode {
    pub fn name(self) -> &'static str {
        match self {
            DenominatorMode::NegativesOnly => "negatives_only",
            DenominatorMode::NegativesPlusPositive => "negatives_plus_positive",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "negatives_only" => Some(DenominatorMode::NegativesOnly),
            "negatives_plus_positive" => Some(DenominatorMode::NegativesPlusPositive),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    /// τ for the frame and clip losses.
    pub temperature: f64,
    /// λ weighting the before/after terms in the child loss.
    pub lambda_state: f64,
    /// W: counterfactual summaries per video.
    pub num_counterfactuals: usize,
    pub denominator_mode: DenominatorMode,
    /// Temperature of the video-level loss; 1 evaluates it without one.
    pub parent_temperature: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            temperature: 0.07,
            lambda_state: 0.5,
            num_counterfactuals: 2,
            denominator_mode: DenominatorMode::NegativesOnly,
            parent_temperature: 1.0,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.parent_temperature > 0.0 && self.parent_temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "parent temperature must be positive, got {}",
                self.parent_temperature
            )));
        }
        if !(self.lambda_state >= 0.0 && self.lambda_state.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda must be non-negative, got {}",
                self.lambda_state
            )));
        }
        if self.num_counterfactuals == 0 {
            return Err(Error::invalid("at least one counterfactual per summary is required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Before,
    After,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Before => "L_before",
            Role::After => "L_after",
        }
    }
}

/// One embedding a frame anchor is contrasted with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContrastRef {
    /// Another frame of the same clip.
    Frame(usize),
    BeforeText,
    AfterText,
    /// A state-change counterfactual description.
    ScCf(usize),
}

/// `P(i)` and `N(i)` for one frame anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastSets {
    pub anchor_index: usize,
    pub positives: Vec<ContrastRef>,
    pub negatives: Vec<ContrastRef>,
}

impl ContrastSets {
    pub fn validate(&self) -> Result<()> {
        if self.positives.is_empty() || self.negatives.is_empty() {
            return Err(Error::invalid(format!(
                "anchor {} needs at least one positive and one negative",
                self.anchor_index
            )));
        }
        let anchor = ContrastRef::Frame(self.anchor_index);
        if self.positives.contains(&anchor) || self.negatives.contains(&anchor) {
            return Err(Error::invalid(format!(
                "anchor {} contrasts with itself",
                self.anchor_index
            )));
        }
        if let Some(r) = self.positives.iter().find(|r| self.negatives.contains(r)) {
            return Err(Error::invalid(format!("{r:?} is both positive and negative")));
        }
        Ok(())
    }
}

/// Before-state, after-state and wrong-outcome descriptions of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTextBundle {
    pub before_text: Vec<f64>,
    pub after_text: Vec<f64>,
    pub sc_cf_texts: Vec<Vec<f64>>,
}

impl StateTextBundle {
    fn rows(&self) -> impl Iterator<Item = &[f64]> {
        [self.before_text.as_slice(), self.after_text.as_slice()]
            .into_iter()
            .chain(self.sc_cf_texts.iter().map(Vec::as_slice))
    }
}

/// Positive/negative sets for every anchor of a `k`-frame clip.
///
/// Frames `[0, k/2)` are earlier in time, `[k/2, k)` later. Before-anchors
/// pull the other early frames and the before text together and push away
/// late frames, the after text and every SC-CF text; after-anchors mirror
/// this.
pub fn build_frame_sets(k: usize, role: Role, bundle: &StateTextBundle) -> Result<Vec<ContrastSets>> {
    if k < 2 || !k.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "frames per clip must be even and at least 2, got {k}"
        )));
    }
    let half = k / 2;
    let early: Vec<usize> = (0..half).collect();
    let late: Vec<usize> = (half..k).collect();
    let (anchors, others, own_text, other_text) = match role {
        Role::Before => (&early, &late, ContrastRef::BeforeText, ContrastRef::AfterText),
        Role::After => (&late, &early, ContrastRef::AfterText, ContrastRef::BeforeText),
    };
    let sets = anchors
        .iter()
        .map(|&a| {
            let mut positives: Vec<ContrastRef> = anchors
                .iter()
                .filter(|&&j| j != a)
                .map(|&j| ContrastRef::Frame(j))
                .collect();
            positives.push(own_text);
            let mut negatives: Vec<ContrastRef> = others.iter().map(|&j| ContrastRef::Frame(j)).collect();
            negatives.push(other_text);
            negatives.extend((0..bundle.sc_cf_texts.len()).map(ContrastRef::ScCf));
            ContrastSets {
                anchor_index: a,
                positives,
                negatives,
            }
        })
        .collect();
    Ok(sets)
}

fn column(r: ContrastRef, k: usize, n_cf: usize) -> Result<usize> {
    let col = match r {
        ContrastRef::Frame(i) if i < k => i,
        ContrastRef::BeforeText => k,
        ContrastRef::AfterText => k + 1,
        ContrastRef::ScCf(j) if j < n_cf => k + 2 + j,
        _ => return Err(Error::invalid(format!("reference {r:?} is out of range"))),
    };
    Ok(col)
}

/// Per-anchor frame-loss term from a vector of scaled logits; `pos` and
/// `neg` index into `row`.
pub fn anchor_loss(tape: &mut Tape, row: Var, pos: &[usize], neg: &[usize], mode: DenominatorMode) -> Result<Var> {
    let pos_logits = tape.gather(row, pos)?;
    match mode {
        DenominatorMode::NegativesOnly => {
            // −(1/|P|) Σ_p [s_p − lse(N)] = lse(N) − mean(s_P)
            let neg_logits = tape.gather(row, neg)?;
            let lse = tape.log_sum_exp(neg_logits)?;
            let mean_pos = tape.mean(pos_logits);
            tape.sub(lse, mean_pos)
        }
        DenominatorMode::NegativesPlusPositive => {
            let width = neg.len() + 1;
            let mut idx = Vec::with_capacity(pos.len() * width);
            for &p in pos {
                idx.extend_from_slice(neg);
                idx.push(p);
            }
            let denom = tape.gather(row, &idx)?;
            let denom = tape.reshape(denom, vec![pos.len(), width])?;
            let lse = tape.log_sum_exp(denom)?;
            let diff = tape.sub(lse, pos_logits)?;
            Ok(tape.mean(diff))
        }
    }
}

/// Sum over anchors of the per-anchor frame terms for one clip, plus the
/// anchor count. `frames` is `[K, d]`.
pub fn frame_state_terms(
    tape: &mut Tape,
    frames: Var,
    bundle: &StateTextBundle,
    sets: &[ContrastSets],
    params: &LossParams,
) -> Result<(Var, usize)> {
    let (k, d) = match tape.shape(frames) {
        [k, d] => (*k, *d),
        s => {
            return Err(Error::shape(
                "frame_state_loss",
                format!("expected [K, d] frames, got {s:?}"),
            ))
        }
    };
    if sets.is_empty() {
        return Err(Error::invalid("no anchors"));
    }
    let n_cf = bundle.sc_cf_texts.len();
    let mut text = Vec::with_capacity((2 + n_cf) * d);
    for row in bundle.rows() {
        if row.len() != d {
            return Err(Error::shape(
                "frame_state_loss",
                "text embedding width differs from frames",
            ));
        }
        text.extend_from_slice(row);
    }
    let text = tape.constant(vec![2 + n_cf, d], text)?;
    let candidates = tape.concat_rows(&[frames, text])?;
    let ct = tape.transpose(candidates)?;
    let sims = tape.matmul(frames, ct)?;
    let logits = tape.scale(sims, 1.0 / params.temperature);
    let width = k + 2 + n_cf;
    let flat = tape.reshape(logits, vec![k * width])?;

    let mut total: Option<Var> = None;
    for set in sets {
        set.validate()?;
        if set.anchor_index >= k {
            return Err(Error::invalid(format!(
                "anchor {} out of range for {k} frames",
                set.anchor_index
            )));
        }
        let offset = set.anchor_index * width;
        let pos = set
            .positives
            .iter()
            .map(|&r| column(r, k, n_cf).map(|c| offset + c))
            .collect::<Result<Vec<_>>>()?;
        let neg = set
            .negatives
            .iter()
            .map(|&r| column(r, k, n_cf).map(|c| offset + c))
            .collect::<Result<Vec<_>>>()?;
        let term = anchor_loss(tape, flat, &pos, &neg, params.denominator_mode)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok((total.expect("sets is non-empty"), sets.len()))
}

/// Frame-level state loss for one clip with explicit sets, averaged over
/// anchors.
pub fn frame_state_loss_with_sets(
    tape: &mut Tape,
    frames: Var,
    bundle: &StateTextBundle,
    sets: &[ContrastSets],
    params: &LossParams,
) -> Result<Var> {
    let (sum, n) = frame_state_terms(tape, frames, bundle, sets, params)?;
    Ok(tape.scale(sum, 1.0 / n as f64))
}

/// `L_before` or `L_after` over a batch of clips: the mean over every anchor
/// in the batch of `−(1/|P(i)|) Σ_p log(exp(s_p/τ) / Σ_n exp(s_n/τ))`.
pub fn frame_state_loss(
    tape: &mut Tape,
    clips: &[(Var, &StateTextBundle)],
    role: Role,
    params: &LossParams,
) -> Result<Var> {
    if clips.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut total: Option<Var> = None;
    let mut anchors = 0;
    for &(frames, bundle) in clips {
        let k = tape.shape(frames)[0];
        let sets = build_frame_sets(k, role, bundle)?;
        let (sum, n) = frame_state_terms(tape, frames, bundle, &sets, params)?;
        anchors += n;
        total = Some(match total {
            Some(t) => tape.add(t, sum)?,
            None => sum,
        });
    }
    Ok(tape.scale(total.expect("non-empty batch"), 1.0 / anchors as f64))
}

/// Clip-to-narration InfoNCE in the video→text direction only.
///
/// `clips` is `[B, d]`; `narrations[i]` pairs with clip `i`.
pub fn clip_v2t_loss(tape: &mut Tape, clips: Var, narrations: &[Vec<f64>], params: &LossParams) -> Result<Var> {
    let (b, d) = match tape.shape(clips) {
        [b, d] => (*b, *d),
        s => return Err(Error::shape("clip_v2t_loss", format!("expected [B, d], got {s:?}"))),
    };
    if b < 2 {
        return Err(Error::invalid(format!("v2t needs a batch of at least 2, got {b}")));
    }
    if narrations.len() != b {
        return Err(Error::shape(
            "clip_v2t_loss",
            format!("{b} clips but {} narrations", narrations.len()),
        ));
    }
    let mut text = Vec::with_capacity(b * d);
    for t in narrations {
        if t.len() != d {
            return Err(Error::shape("clip_v2t_loss", "narration width differs from clips"));
        }
        text.extend_from_slice(t);
    }
    let text = tape.constant(vec![b, d], text)?;
    let tt = tape.transpose(text)?;
    let sims = tape.matmul(clips, tt)?;
    let logits = tape.scale(sims, 1.0 / params.temperature);
    let lse = tape.log_sum_exp(logits)?;
    let flat = tape.reshape(logits, vec![b * b])?;
    let diag: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let pos = tape.gather(flat, &diag)?;
    let diff = tape.sub(lse, pos)?;
    Ok(tape.mean(diff))
}

/// `L_v2t + λ(L_before + L_after)`.
pub fn child_loss(tape: &mut Tape, v2t: Var, before: Var, after: Var, params: &LossParams) -> Result<Var> {
    let state = tape.add(before, after)?;
    let weighted = tape.scale(state, params.lambda_state);
    tape.add(v2t, weighted)
}

/// Positive and negative summary indices for one video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoSets {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Own summary positive, every summary of a different activity negative.
pub fn default_video_sets(activity_ids: &[u64]) -> Result<Vec<VideoSets>> {
    activity_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let negatives: Vec<usize> = activity_ids
                .iter()
                .enumerate()
                .filter(|(_, other)| *other != id)
                .map(|(j, _)| j)
                .collect();
            if negatives.is_empty() {
                return Err(Error::invalid(format!(
                    "video {i} has no negative summary in the batch"
                )));
            }
            Ok(VideoSets {
                positives: vec![i],
                negatives,
            })
        })
        .collect()
}

/// Video-level loss against summaries and their counterfactuals.
///
/// For video `i` with aggregated embedding `V_i` the term is
/// `−log[Σ_{p∈P} e^{V·S_p/t} / (Σ_{n∈N} (e^{V·S_n/t} + Σ_w e^{V·S^cf_{n,w}/t}) + Σ_{p∈P} Σ_w e^{V·S^cf_{p,w}/t})]`:
/// counterfactuals of negative summaries and of the video's own summary all
/// sit in the denominator. Terms are summed over the batch. `videos` is
/// `[B, d]`; `counterfactuals[j]` lists the counterfactual embeddings of
/// `summaries[j]` and may be empty.
pub fn parent_loss(
    tape: &mut Tape,
    videos: Var,
    summaries: &[Vec<f64>],
    counterfactuals: &[Vec<Vec<f64>>],
    sets: &[VideoSets],
    params: &LossParams,
) -> Result<Var> {
    let (b, d) = match tape.shape(videos) {
        [b, d] => (*b, *d),
        s => return Err(Error::shape("parent_loss", format!("expected [B, d], got {s:?}"))),
    };
    if sets.len() != b {
        return Err(Error::shape(
            "parent_loss",
            format!("{b} videos but {} contrast sets", sets.len()),
        ));
    }
    if counterfactuals.len() != summaries.len() {
        return Err(Error::shape(
            "parent_loss",
            format!(
                "{} summaries but {} counterfactual lists",
                summaries.len(),
                counterfactuals.len()
            ),
        ));
    }
    let mut rows = Vec::new();
    let mut cf_cols: Vec<Vec<usize>> = Vec::with_capacity(summaries.len());
    for s in summaries {
        if s.len() != d {
            return Err(Error::shape("parent_loss", "summary width differs from videos"));
        }
        rows.extend_from_slice(s);
    }
    let mut col = summaries.len();
    for cfs in counterfactuals {
        let mut cols = Vec::with_capacity(cfs.len());
        for cf in cfs {
            if cf.len() != d {
                return Err(Error::shape("parent_loss", "counterfactual width differs from videos"));
            }
            rows.extend_from_slice(cf);
            cols.push(col);
            col += 1;
        }
        cf_cols.push(cols);
    }
    let width = col;
    let cands = tape.constant(vec![width, d], rows)?;
    let ct = tape.transpose(cands)?;
    let sims = tape.matmul(videos, ct)?;
    let logits = tape.scale(sims, 1.0 / params.parent_temperature);
    let flat = tape.reshape(logits, vec![b * width])?;

    let mut total: Option<Var> = None;
    for (i, set) in sets.iter().enumerate() {
        if set.positives.is_empty() || set.negatives.is_empty() {
            return Err(Error::invalid(format!(
                "video {i} needs a positive and a negative summary"
            )));
        }
        if let Some(&bad) = set
            .positives
            .iter()
            .chain(&set.negatives)
            .find(|&&j| j >= summaries.len())
        {
            return Err(Error::invalid(format!("summary index {bad} out of range")));
        }
        let offset = i * width;
        let pos: Vec<usize> = set.positives.iter().map(|&p| offset + p).collect();
        let mut den: Vec<usize> = Vec::new();
        for &n in &set.negatives {
            den.push(offset + n);
            den.extend(cf_cols[n].iter().map(|c| offset + c));
        }
        for &p in &set.positives {
            den.extend(cf_cols[p].iter().map(|c| offset + c));
        }
        let pos_logits = tape.gather(flat, &pos)?;
        let den_logits = tape.gather(flat, &den)?;
        let lse_pos = tape.log_sum_exp(pos_logits)?;
        let lse_den = tape.log_sum_exp(den_logits)?;
        let term = tape.sub(lse_den, lse_pos)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::invalid("empty video batch"))
}
