//! Gradient checks of every loss and the aggregator on small seeded
//! problems, as run by `procshift gradcheck`.

use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{GradCheck, OpKind, Tape, Tensor, Var};
use crate::config::Config;
use crate::encoders::{Aggregator, FrameEncoder, Model};
use crate::error::Result;
use crate::objectives::{
    child_loss, clip_v2t_loss, default_video_sets, frame_state_loss, parent_loss, LossParams, Role, StateTextBundle,
};
use crate::seed::{self, Rng};

pub const COMPONENTS: [&str; 6] = ["L_before", "L_after", "L_v2t", "L_child", "L_parent", "aggregator"];
pub const TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
pub const DEFAULT_SEEDS: u64 = 20;

// Problem sizes: small enough that 20 seeds finish in well under a second.
const D_IN: usize = 6;
const D_HID: usize = 5;
const D_EMB: usize = 4;
const CLIPS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentResult {
    pub name: &'static str,
    /// Largest relative error over all seeds.
    pub max_rel_error: f64,
    pub worst_seed: u64,
}

impl ComponentResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub components: Vec<ComponentResult>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn failing(&self) -> Vec<&'static str> {
        self.components.iter().filter(|c| !c.passed()).map(|c| c.name).collect()
    }
}

fn unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

struct Problem {
    k: usize,
    frames: Vec<f64>,
    bundles: Vec<StateTextBundle>,
    narrations: Vec<Vec<f64>>,
    video_clips: Vec<usize>,
    summaries: Vec<Vec<f64>>,
    cfs: Vec<Vec<Vec<f64>>>,
    clip_inputs: Vec<f64>,
    probe: Vec<f64>,
    model: Model,
    params: LossParams,
}

impl Problem {
    fn new(config: &Config, seed_value: u64) -> Result<Problem> {
        let mut rng = seed::rng(seed_value);
        let k = config.world.frames_per_clip;
        let params = config.loss_params();
        let frames = (0..CLIPS * k * D_IN).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bundles = (0..CLIPS)
            .map(|_| StateTextBundle {
                before_text: unit(&mut rng, D_EMB),
                after_text: unit(&mut rng, D_EMB),
                sc_cf_texts: (0..2).map(|_| unit(&mut rng, D_EMB)).collect(),
            })
            .collect();
        let narrations = (0..CLIPS).map(|_| unit(&mut rng, D_EMB)).collect();
        let video_clips = vec![2, 3, 2];
        let summaries = (0..video_clips.len()).map(|_| unit(&mut rng, D_EMB)).collect();
        let cfs = (0..video_clips.len())
            .map(|_| (0..params.num_counterfactuals).map(|_| unit(&mut rng, D_EMB)).collect())
            .collect();
        let total: usize = video_clips.iter().sum();
        let clip_inputs = (0..CLIPS * D_EMB).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe = unit(&mut rng, D_EMB);
        let mut model = Model {
            encoder: FrameEncoder::new(D_IN, D_HID, D_EMB, &mut rng)?,
            aggregator: Aggregator::new(D_EMB, total.max(CLIPS), &mut rng)?,
        };
        model.encoder.normalize = config.model.normalize;
        model.aggregator.normalize = config.model.normalize;
        Ok(Problem {
            k,
            frames,
            bundles,
            narrations,
            video_clips,
            summaries,
            cfs,
            clip_inputs,
            probe,
            model,
            params,
        })
    }

    fn encoder_params(&self) -> Vec<Tensor> {
        self.model.encoder.params().iter().map(|(_, t)| (*t).clone()).collect()
    }

    fn child_terms(&self, t: &mut Tape, v: &[Var]) -> Result<[Var; 4]> {
        let enc = self.model.encoder.vars_from(v)?;
        let x = t.constant(vec![CLIPS * self.k, D_IN], self.frames.clone())?;
        let (emb, clips) = enc.encode_clips(t, x, self.k)?;
        let mut per_clip = Vec::with_capacity(CLIPS);
        for (c, b) in self.bundles.iter().enumerate() {
            let rows: Vec<usize> = (c * self.k..(c + 1) * self.k).collect();
            per_clip.push((t.gather(emb, &rows)?, b));
        }
        let v2t = clip_v2t_loss(t, clips, &self.narrations, &self.params)?;
        let before = frame_state_loss(t, &per_clip, Role::Before, &self.params)?;
        let after = frame_state_loss(t, &per_clip, Role::After, &self.params)?;
        let child = child_loss(t, v2t, before, after, &self.params)?;
        Ok([before, after, v2t, child])
    }

    fn parent(&self, t: &mut Tape, v: &[Var]) -> Result<Var> {
        let mv = self.model.vars_from(v)?;
        let pos = self.model.aggregator.positional_encoding();
        let total: usize = self.video_clips.iter().sum();
        let frames: Vec<f64> = self
            .frames
            .iter()
            .cycle()
            .take(total * self.k * D_IN)
            .copied()
            .collect();
        let x = t.constant(vec![total * self.k, D_IN], frames)?;
        let (_, clips) = mv.encoder.encode_clips(t, x, self.k)?;
        let mut videos = Vec::new();
        let mut row = 0;
        for &n in &self.video_clips {
            let rows: Vec<usize> = (row..row + n).collect();
            row += n;
            let c = t.gather(clips, &rows)?;
            videos.push(mv.aggregator.aggregate(t, c, pos)?);
        }
        let videos = t.concat_rows(&videos)?;
        let ids: Vec<u64> = (0..self.video_clips.len() as u64).collect();
        let sets = default_video_sets(&ids)?;
        parent_loss(t, videos, &self.summaries, &self.cfs, &sets, &self.params)
    }

    /// `probe · aggregate(clips)` with fixed clip inputs.
    fn aggregator(&self, t: &mut Tape, v: &[Var]) -> Result<Var> {
        let av = self.model.aggregator.vars_from(v)?;
        let x = t.constant(vec![CLIPS, D_EMB], self.clip_inputs.clone())?;
        let out = av.aggregate(t, x, self.model.aggregator.positional_encoding())?;
        let p = t.constant(vec![D_EMB], self.probe.clone())?;
        let prod = t.mul(out, p)?;
        Ok(t.sum(prod))
    }
}

/// Checks every component on `seeds` problems derived from `root_seed`.
/// `fault` corrupts one backward rule on the analytic tape.
pub fn run_suite(config: &Config, root_seed: u64, seeds: u64, fault: Option<OpKind>) -> Result<SuiteReport> {
    let started = Instant::now();
    let mut components: Vec<ComponentResult> = COMPONENTS
        .iter()
        .map(|&name| ComponentResult {
            name,
            max_rel_error: 0.0,
            worst_seed: 0,
        })
        .collect();
    let check = GradCheck::new(FD_STEP).with_fault(fault);
    for i in 0..seeds {
        let s = seed::derive_indexed(root_seed, "gradcheck", i);
        let p = Problem::new(config, s)?;
        let enc = p.encoder_params();
        let all: Vec<Tensor> = p.model.params().iter().map(|(_, t)| (*t).clone()).collect();
        let agg: Vec<Tensor> = p.model.aggregator.params().iter().map(|(_, t)| (*t).clone()).collect();
        let mut errs = [0.0; 6];
        for (j, e) in errs.iter_mut().enumerate().take(4) {
            *e = check.run(|t, v| Ok(p.child_terms(t, v)?[j]), &enc)?.max_rel_error;
        }
        errs[4] = check.run(|t, v| p.parent(t, v), &all)?.max_rel_error;
        errs[5] = check.run(|t, v| p.aggregator(t, v), &agg)?.max_rel_error;
        for (c, e) in components.iter_mut().zip(errs) {
            // NaN counts as a failure.
            if e > c.max_rel_error || e.is_nan() {
                c.max_rel_error = if e.is_nan() { f64::INFINITY } else { e };
                c.worst_seed = i;
            }
        }
    }
    Ok(SuiteReport {
        components,
        seconds: started.elapsed().as_secs_f64(),
    })
}
