//! Synthetic procedural world.
//!
//! Each action has one canonical outcome state (state id == action id) and a
//! small, fixed set of wrong outcomes drawn from the auxiliary states
//! `[n_actions, n_states)`. Auxiliary states also serve as the initial scene
//! state of an activity. An activity is an ordered list of distinct actions
//! whose states chain: the after-state of step `i` is the before-state of
//! step `i + 1`.
//!
//! Frames are noisy copies of per-state prototypes. Token ids put actions at
//! `[0, n_actions)` and states at `[n_actions, n_actions + n_states)`.

use std::collections::HashSet;
use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub mod io;

pub const MIN_STEPS: usize = 3;
pub const MAX_STEPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_actions: usize,
    pub n_states: usize,
    pub min_steps: usize,
    pub max_steps: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noise_sigma: f64,
    pub frames_per_clip: usize,
    pub input_dim: usize,
    /// Wrong outcomes attached to every action.
    pub sc_cf_per_action: usize,
    /// Video-level counterfactuals stored per summary, alternating
    /// missing-step and misordered.
    pub cfs_per_summary: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_actions: 20,
            n_states: 40,
            min_steps: 5,
            max_steps: 8,
            n_train: 300,
            n_val: 60,
            n_test: 60,
            noise_sigma: 0.25,
            frames_per_clip: 4,
            input_dim: 48,
            sc_cf_per_action: 2,
            cfs_per_summary: 2,
        }
    }
}

impl WorldConfig {
    pub fn vocab_size(&self) -> usize {
        self.n_actions + self.n_states
    }

    pub fn state_token(&self, state: usize) -> usize {
        self.n_actions + state
    }

    /// Tokens for an (action, state) description.
    pub fn state_text_tokens(&self, action: usize, state: usize) -> Vec<usize> {
        vec![action, self.state_token(state)]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.n_actions == 0 {
            return fail("n_actions must be positive".into());
        }
        if self.n_states < self.n_actions + self.sc_cf_per_action.max(1) {
            return fail(format!(
                "n_states ({}) must leave at least {} auxiliary states beyond the {} outcomes",
                self.n_states,
                self.sc_cf_per_action.max(1),
                self.n_actions
            ));
        }
        if self.n_states > self.input_dim {
            return fail(format!(
                "{} orthogonal state prototypes do not fit in input_dim {}",
                self.n_states, self.input_dim
            ));
        }
        if self.sc_cf_per_action == 0 {
            return fail("sc_cf_per_action must be at least 1".into());
        }
        if self.cfs_per_summary == 0 {
            return fail("cfs_per_summary must be at least 1".into());
        }
        if self.min_steps < MIN_STEPS || self.max_steps > MAX_STEPS || self.min_steps > self.max_steps {
            return fail(format!(
                "step range [{}, {}] must lie within [{MIN_STEPS}, {MAX_STEPS}]",
                self.min_steps, self.max_steps
            ));
        }
        if self.max_steps > self.n_actions {
            return Err(Error::VocabExhausted(format!(
                "{} distinct actions per activity but only {} actions",
                self.max_steps, self.n_actions
            )));
        }
        if self.frames_per_clip < 2 || !self.frames_per_clip.is_multiple_of(2) {
            return fail(format!(
                "frames_per_clip must be even and >= 2, got {}",
                self.frames_per_clip
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StepSpec {
    pub action: usize,
    pub before_state: usize,
    pub after_state: usize,
    pub sc_cf_states: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActivitySpec {
    pub id: u64,
    pub steps: Vec<StepSpec>,
    pub summary_tokens: Vec<usize>,
}

impl ActivitySpec {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CfKind {
    #[serde(rename = "SC_CF")]
    StateChange,
    #[serde(rename = "K_CF")]
    MissingStep,
    #[serde(rename = "M_CF")]
    Misordered,
}

impl fmt::Display for CfKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CfKind::StateChange => "SC_CF",
            CfKind::MissingStep => "K_CF",
            CfKind::Misordered => "M_CF",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualRecord {
    pub kind: CfKind,
    pub tokens: Vec<usize>,
    pub source_activity: u64,
}

/// One rendered video: `clips[c][f]` is frame `f` of the clip for step `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub clips: Vec<Vec<Vec<f64>>>,
    pub narration_tokens: Vec<Vec<usize>>,
    /// Action id of every frame, clip-major.
    pub step_labels: Vec<usize>,
    pub error_flags: Vec<bool>,
    pub seed: u64,
}

impl VideoSample {
    pub fn frames_per_clip(&self) -> usize {
        self.clips.first().map_or(0, Vec::len)
    }

    pub fn frame_count(&self) -> usize {
        self.clips.iter().map(Vec::len).sum()
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.clips.iter().flatten().map(Vec::as_slice)
    }
}

/// An activity, its clean rendering and its stored video-level counterfactuals.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub activity: ActivitySpec,
    pub video: VideoSample,
    pub cfs: Vec<CounterfactualRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<VideoRecord>,
    pub val: Vec<VideoRecord>,
    pub test: Vec<VideoRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[VideoRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Fixed world tables: state prototypes and each action's wrong outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    config: WorldConfig,
    seed: u64,
    prototypes: Vec<Vec<f64>>,
    sc_cf_table: Vec<Vec<usize>>,
}

/// Rows are orthonormal; a second Gram-Schmidt pass cleans up rounding.
fn orthonormal_rows(n: usize, dim: usize, rng: &mut seed::Rng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for r in &rows {
                let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows
}

impl World {
    pub fn new(config: WorldConfig, root_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(root_seed, "world.prototypes"));
        let prototypes = orthonormal_rows(config.n_states, config.input_dim, &mut rng);
        for i in 0..prototypes.len() {
            for j in 0..i {
                let c: f64 = prototypes[i].iter().zip(&prototypes[j]).map(|(a, b)| a * b).sum();
                if c.abs() >= 0.2 {
                    return Err(Error::invalid(format!("prototypes {i} and {j} have cosine {c}")));
                }
            }
        }
        let mut rng = seed::rng(seed::derive(root_seed, "world.sc_cf"));
        let aux: Vec<usize> = (config.n_actions..config.n_states).collect();
        let sc_cf_table = (0..config.n_actions)
            .map(|_| {
                aux.choose_multiple(&mut rng, config.sc_cf_per_action)
                    .copied()
                    .collect()
            })
            .collect();
        Ok(World {
            config,
            seed: root_seed,
            prototypes,
            sc_cf_table,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn prototype(&self, state: usize) -> Option<&[f64]> {
        self.prototypes.get(state).map(Vec::as_slice)
    }

    pub fn outcome_state(&self, action: usize) -> usize {
        action
    }

    pub fn sc_cf_states(&self, action: usize) -> &[usize] {
        &self.sc_cf_table[action]
    }

    pub fn action_token(&self, action: usize) -> usize {
        action
    }

    pub fn state_token(&self, state: usize) -> usize {
        self.config.state_token(state)
    }

    /// Tokens describing one clip: the action alone.
    pub fn narration_tokens(&self, step: &StepSpec) -> Vec<usize> {
        vec![self.action_token(step.action)]
    }

    /// Tokens for an (action, state) description.
    pub fn state_text_tokens(&self, action: usize, state: usize) -> Vec<usize> {
        self.config.state_text_tokens(action, state)
    }

    /// Draws an activity of `n_steps` distinct actions with chained states.
    pub fn gen_activity(&self, id: u64, seed_value: u64, n_steps: usize) -> Result<ActivitySpec> {
        if !(MIN_STEPS..=MAX_STEPS).contains(&n_steps) {
            return Err(Error::invalid(format!(
                "n_steps must be in [{MIN_STEPS}, {MAX_STEPS}], got {n_steps}"
            )));
        }
        if n_steps > self.config.n_actions {
            return Err(Error::VocabExhausted(format!(
                "{n_steps} distinct actions requested from {}",
                self.config.n_actions
            )));
        }
        let mut rng = seed::rng(seed_value);
        let mut actions: Vec<usize> = (0..self.config.n_actions).collect();
        let (chosen, _) = actions.partial_shuffle(&mut rng, n_steps);
        let chosen = chosen.to_vec();
        let mut state = rng.random_range(self.config.n_actions..self.config.n_states);
        let steps: Vec<StepSpec> = chosen
            .iter()
            .map(|&action| {
                let after = self.outcome_state(action);
                let step = StepSpec {
                    action,
                    before_state: state,
                    after_state: after,
                    sc_cf_states: self.sc_cf_table[action].clone(),
                };
                state = after;
                step
            })
            .collect();
        Ok(ActivitySpec {
            id,
            summary_tokens: chosen.iter().map(|&a| self.action_token(a)).collect(),
            steps,
        })
    }

    fn noisy(&self, state: usize, sigma: f64, rng: &mut seed::Rng) -> Vec<f64> {
        self.prototypes[state]
            .iter()
            .map(|&p| {
                let z: f64 = rng.sample(StandardNormal);
                p + sigma * z
            })
            .collect()
    }

    /// Renders one clip per step: the early half shows the before-state, the
    /// late half the after-state.
    pub fn render_video(
        &self,
        activity: &ActivitySpec,
        seed_value: u64,
        noise_sigma: f64,
        k: usize,
    ) -> Result<VideoSample> {
        if k < 2 || !k.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "frames per clip must be even and >= 2, got {k}"
            )));
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "noise_sigma must be finite and >= 0, got {noise_sigma}"
            )));
        }
        self.check_activity(activity)?;
        let mut rng = seed::rng(seed_value);
        let half = k / 2;
        let mut clips = Vec::with_capacity(activity.len());
        let mut step_labels = Vec::with_capacity(activity.len() * k);
        for step in &activity.steps {
            let clip: Vec<Vec<f64>> = (0..k)
                .map(|f| {
                    let state = if f < half { step.before_state } else { step.after_state };
                    self.noisy(state, noise_sigma, &mut rng)
                })
                .collect();
            clips.push(clip);
            step_labels.extend(std::iter::repeat_n(step.action, k));
        }
        Ok(VideoSample {
            clips,
            narration_tokens: activity.steps.iter().map(|s| self.narration_tokens(s)).collect(),
            error_flags: vec![false; step_labels.len()],
            step_labels,
            seed: seed_value,
        })
    }

    fn check_activity(&self, activity: &ActivitySpec) -> Result<()> {
        for (i, s) in activity.steps.iter().enumerate() {
            if s.action >= self.config.n_actions
                || s.before_state >= self.config.n_states
                || s.after_state >= self.config.n_states
                || s.sc_cf_states.iter().any(|&x| x >= self.config.n_states)
            {
                return Err(Error::invalid(format!(
                    "step {i} of activity {} is outside this world",
                    activity.id
                )));
            }
        }
        Ok(())
    }

    /// Re-renders the late half of each chosen clip from a wrong outcome and
    /// flags exactly those frames.
    pub fn inject_errors(
        &self,
        sample: &VideoSample,
        activity: &ActivitySpec,
        error_clips: &[usize],
        seed_value: u64,
    ) -> Result<VideoSample> {
        let mut out = sample.clone();
        let k = sample.frames_per_clip();
        let half = k / 2;
        let sigma = self.config.noise_sigma;
        for &c in error_clips {
            let (Some(step), Some(clip)) = (activity.steps.get(c), out.clips.get_mut(c)) else {
                return Err(Error::invalid(format!(
                    "error clip {c} out of range for {} clips",
                    sample.clips.len()
                )));
            };
            let mut rng = seed::rng(seed::derive_indexed(seed_value, "error.clip", c as u64));
            let wrong = make_sc_cf(step, rng.random())?;
            for frame in clip.iter_mut().skip(half) {
                *frame = self.noisy(wrong, sigma, &mut rng);
            }
            for flag in &mut out.error_flags[c * k + half..(c + 1) * k] {
                *flag = true;
            }
        }
        Ok(out)
    }

    /// Builds the stored video-level counterfactuals of an activity: missing
    /// step and adjacent swap, alternating, at seeded positions.
    pub fn make_video_cfs(&self, activity: &ActivitySpec, seed_value: u64) -> Result<Vec<CounterfactualRecord>> {
        let mut rng = seed::rng(seed_value);
        let n = activity.len();
        let mut out: Vec<CounterfactualRecord> = Vec::with_capacity(self.config.cfs_per_summary);
        let mut attempts = 0;
        while out.len() < self.config.cfs_per_summary {
            let cf = if out.len().is_multiple_of(2) {
                make_missing_cf(activity, rng.random_range(0..n))?
            } else {
                let i = rng.random_range(0..n - 1);
                make_misordered_cf(activity, i, i + 1)?
            };
            attempts += 1;
            // Distinct records when the space allows it.
            if !out.contains(&cf) || attempts > 64 {
                out.push(cf);
            }
        }
        Ok(out)
    }

    fn draw_activity(&self, root: u64, index: u64, attempt: u64) -> Result<ActivitySpec> {
        let base = seed::derive_indexed(root, "data.activity", index);
        let s = if attempt == 0 {
            base
        } else {
            seed::derive_indexed(base, "retry", attempt)
        };
        let n_steps = seed::rng(seed::derive(s, "length")).random_range(self.config.min_steps..=self.config.max_steps);
        self.gen_activity(index, s, n_steps)
    }

    /// Generates all three splits. Summaries are unique across the whole
    /// dataset; clashes are redrawn in index order so the result does not
    /// depend on thread scheduling.
    pub fn generate(&self, root: u64) -> Result<Dataset> {
        let c = &self.config;
        let total = c.n_train + c.n_val + c.n_test;
        let mut activities: Vec<ActivitySpec> = (0..total as u64)
            .into_par_iter()
            .map(|i| self.draw_activity(root, i, 0))
            .collect::<Result<_>>()?;
        let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(total);
        for (i, a) in activities.iter_mut().enumerate() {
            let mut attempt = 0;
            while seen.contains(&a.summary_tokens) {
                attempt += 1;
                if attempt > 10_000 {
                    return Err(Error::VocabExhausted("cannot draw enough distinct summaries".into()));
                }
                *a = self.draw_activity(root, i as u64, attempt)?;
            }
            seen.insert(a.summary_tokens.clone());
        }
        let records: Vec<VideoRecord> = activities
            .into_par_iter()
            .enumerate()
            .map(|(i, activity)| {
                let video = self.render_video(
                    &activity,
                    seed::derive_indexed(root, "data.render", i as u64),
                    c.noise_sigma,
                    c.frames_per_clip,
                )?;
                let cfs = self.make_video_cfs(&activity, seed::derive_indexed(root, "data.cf", i as u64))?;
                Ok(VideoRecord { activity, video, cfs })
            })
            .collect::<Result<_>>()?;
        let mut it = records.into_iter();
        let train = it.by_ref().take(c.n_train).collect();
        let val = it.by_ref().take(c.n_val).collect();
        let test = it.collect();
        Ok(Dataset { train, val, test })
    }
}

/// Picks one wrong outcome of `step`.
pub fn make_sc_cf(step: &StepSpec, rng_seed: u64) -> Result<usize> {
    let candidates: Vec<usize> = step
        .sc_cf_states
        .iter()
        .copied()
        .filter(|&s| s != step.after_state)
        .collect();
    candidates
        .choose(&mut seed::rng(rng_seed))
        .copied()
        .ok_or_else(|| Error::invalid("step has no wrong outcome distinct from its after-state"))
}

pub fn make_missing_cf(activity: &ActivitySpec, drop_index: usize) -> Result<CounterfactualRecord> {
    if drop_index >= activity.summary_tokens.len() {
        return Err(Error::invalid(format!(
            "drop index {drop_index} out of range for {} steps",
            activity.summary_tokens.len()
        )));
    }
    let mut tokens = activity.summary_tokens.clone();
    tokens.remove(drop_index);
    Ok(CounterfactualRecord {
        kind: CfKind::MissingStep,
        tokens,
        source_activity: activity.id,
    })
}

pub fn make_misordered_cf(activity: &ActivitySpec, i: usize, j: usize) -> Result<CounterfactualRecord> {
    let n = activity.summary_tokens.len();
    if i >= n || j >= n {
        return Err(Error::invalid(format!("swap ({i}, {j}) out of range for {n} steps")));
    }
    if i == j {
        return Err(Error::invalid(format!("swap ({i}, {j}) is the identity")));
    }
    if activity.summary_tokens[i] == activity.summary_tokens[j] {
        return Err(Error::invalid(format!("positions {i} and {j} hold the same token")));
    }
    let mut tokens = activity.summary_tokens.clone();
    tokens.swap(i, j);
    Ok(CounterfactualRecord {
        kind: CfKind::Misordered,
        tokens,
        source_activity: activity.id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::new(WorldConfig::default(), 7).unwrap()
    }

    fn abc() -> ActivitySpec {
        ActivitySpec {
            id: 1,
            steps: vec![],
            summary_tokens: vec![0, 1, 2],
        }
    }

    #[test]
    fn activity_is_deterministic_and_chained() {
        let w = world();
        for s in 0..50 {
            let a = w.gen_activity(s, s * 31 + 1, 3 + (s as usize % 6)).unwrap();
            assert_eq!(a, w.gen_activity(s, s * 31 + 1, 3 + (s as usize % 6)).unwrap());
            assert_eq!(a.summary_tokens.len(), a.steps.len());
            for pair in a.steps.windows(2) {
                assert_eq!(pair[0].after_state, pair[1].before_state);
            }
            for st in &a.steps {
                assert!(!st.sc_cf_states.contains(&st.after_state));
                assert_ne!(st.before_state, st.after_state);
            }
        }
        assert_eq!(w.gen_activity(0, 3, 3).unwrap().summary_tokens.len(), 3);
    }

    #[test]
    fn activity_length_bounds() {
        let w = world();
        assert!(w.gen_activity(0, 0, 2).is_err());
        assert!(w.gen_activity(0, 0, 11).is_err());
        let small = World::new(
            WorldConfig {
                n_actions: 4,
                n_states: 8,
                min_steps: 3,
                max_steps: 4,
                ..WorldConfig::default()
            },
            1,
        )
        .unwrap();
        assert!(matches!(small.gen_activity(0, 0, 5), Err(Error::VocabExhausted(_))));
    }

    #[test]
    fn prototypes_are_near_orthogonal() {
        let w = world();
        for i in 0..40 {
            for j in 0..i {
                let c: f64 = w.prototypes[i].iter().zip(&w.prototypes[j]).map(|(a, b)| a * b).sum();
                assert!(c.abs() < 0.2);
            }
        }
    }

    #[test]
    fn render_zero_noise() {
        let w = world();
        let a = w.gen_activity(0, 5, 5).unwrap();
        let v = w.render_video(&a, 9, 0.0, 4).unwrap();
        for (clip, step) in v.clips.iter().zip(&a.steps) {
            assert_eq!(clip[0], clip[1]);
            assert_eq!(clip[2], clip[3]);
            assert_ne!(clip[0], clip[2]);
            assert_eq!(clip[0], w.prototypes[step.before_state]);
        }
        assert_eq!(v.step_labels.len(), 20);
        assert!(v.error_flags.iter().all(|f| !f));
    }

    #[test]
    fn render_is_deterministic() {
        let w = world();
        let a = w.gen_activity(0, 5, 6).unwrap();
        assert_eq!(
            w.render_video(&a, 3, 0.1, 4).unwrap(),
            w.render_video(&a, 3, 0.1, 4).unwrap()
        );
        assert_ne!(
            w.render_video(&a, 3, 0.1, 4).unwrap(),
            w.render_video(&a, 4, 0.1, 4).unwrap()
        );
        assert!(w.render_video(&a, 3, 0.1, 3).is_err());
    }

    #[test]
    fn sc_cf_choice() {
        let step = StepSpec {
            action: 0,
            before_state: 30,
            after_state: 0,
            sc_cf_states: vec![25],
        };
        assert_eq!(make_sc_cf(&step, 1).unwrap(), 25);
        let w = world();
        let mut rng = seed::rng(3);
        for _ in 0..10_000 {
            let a = w.gen_activity(0, rng.random(), 5).unwrap();
            let st = &a.steps[rng.random_range(0..5)];
            let s: u64 = rng.random();
            let wrong = make_sc_cf(st, s).unwrap();
            assert_ne!(wrong, st.after_state);
            assert_eq!(wrong, make_sc_cf(st, s).unwrap());
        }
    }

    #[test]
    fn missing_step_cf() {
        let cf = make_missing_cf(&abc(), 1).unwrap();
        assert_eq!(cf.tokens, vec![0, 2]);
        assert_eq!(cf.kind, CfKind::MissingStep);
        assert!(make_missing_cf(&abc(), 3).is_err());
    }

    #[test]
    fn misordered_cf() {
        let cf = make_misordered_cf(&abc(), 0, 1).unwrap();
        assert_eq!(cf.tokens, vec![1, 0, 2]);
        assert_eq!(cf.kind, CfKind::Misordered);
        assert!(make_misordered_cf(&abc(), 0, 0).is_err());
        let mut dup = abc();
        dup.summary_tokens = vec![4, 4, 1];
        assert!(make_misordered_cf(&dup, 0, 1).is_err());
    }

    #[test]
    fn error_injection() {
        let w = world();
        let a = w.gen_activity(0, 11, 5).unwrap();
        let v = w.render_video(&a, 2, 0.0, 4).unwrap();
        assert_eq!(w.inject_errors(&v, &a, &[], 5).unwrap(), v);
        let e = w.inject_errors(&v, &a, &[2], 5).unwrap();
        let flagged: Vec<usize> = (0..e.error_flags.len()).filter(|&i| e.error_flags[i]).collect();
        assert_eq!(flagged, vec![10, 11]);
        assert_eq!(e.clips[2][0], v.clips[2][0]);
        assert_ne!(e.clips[2][2], v.clips[2][2]);
        assert!(w.inject_errors(&v, &a, &[5], 5).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(WorldConfig::default().validate().is_ok());
        let bad = |f: fn(&mut WorldConfig)| {
            let mut c = WorldConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.n_states = 21));
        assert!(bad(|c| c.input_dim = 30));
        assert!(bad(|c| c.frames_per_clip = 3));
        assert!(bad(|c| c.min_steps = 2));
        assert!(bad(|c| c.noise_sigma = -1.0));
        assert!(bad(|c| c.max_steps = 9 + 2));
    }
}
