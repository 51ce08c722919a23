//! Hierarchical training loop.
//!
//! Child steps (clip-to-narration plus before/after frame terms) walk the
//! clip pool in a seeded shuffled order; after every `schedule_ratio` child
//! steps one parent step aligns aggregated videos with their summaries.
//! Batch selection is a pure function of `(seed, step index)`, so a run
//! resumed from a checkpoint replays the same batches.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::Config;
use crate::encoders::{Model, TextTable};
use crate::error::{Error, Result};
use crate::objectives::{
    child_loss, clip_v2t_loss, default_video_sets, frame_state_loss, parent_loss, Role, StateTextBundle,
};
use crate::seed;
use crate::world::{VideoRecord, WorldConfig};

pub mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

/// Adam with one moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize], lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::shape("adam", format!("tensor {i} size changed")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (j, x) in p.values_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Child,
    Parent,
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// 1-based position in the interleaved child/parent sequence.
    pub step: u64,
    pub phase: Phase,
    pub child_step: u64,
    pub parent_step: u64,
    pub loss: f64,
    pub component_losses: BTreeMap<String, f64>,
    pub grad_norm: f64,
    pub clipped: bool,
    pub wallclock: f64,
}

/// Step counters carried across checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counters {
    pub child_steps: u64,
    pub parent_steps: u64,
    pub clip_events: u64,
}

impl Counters {
    pub fn global_steps(&self) -> u64 {
        self.child_steps + self.parent_steps
    }
}

/// Per-video text embeddings used by the losses.
#[derive(Debug, Clone)]
pub struct VideoTexts {
    pub narrations: Vec<Vec<f64>>,
    pub bundles: Vec<StateTextBundle>,
    pub summary: Vec<f64>,
    pub cfs: Vec<Vec<f64>>,
}

/// Embeds every text a video's losses need. With `ablate_cf` the SC-CF and
/// video counterfactual lists are left empty.
pub fn video_texts(
    record: &VideoRecord,
    world: &WorldConfig,
    text: &TextTable,
    num_counterfactuals: usize,
    ablate_cf: bool,
) -> Result<VideoTexts> {
    let narrations = record
        .video
        .narration_tokens
        .iter()
        .map(|t| text.embed(t))
        .collect::<Result<Vec<_>>>()?;
    let bundles = record
        .activity
        .steps
        .iter()
        .map(|s| {
            let sc_cf_texts = if ablate_cf {
                Vec::new()
            } else {
                s.sc_cf_states
                    .iter()
                    .map(|&w| text.embed(&world.state_text_tokens(s.action, w)))
                    .collect::<Result<Vec<_>>>()?
            };
            Ok(StateTextBundle {
                before_text: text.embed(&world.state_text_tokens(s.action, s.before_state))?,
                after_text: text.embed(&world.state_text_tokens(s.action, s.after_state))?,
                sc_cf_texts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cfs = if ablate_cf {
        Vec::new()
    } else {
        if record.cfs.len() < num_counterfactuals {
            return Err(Error::Schema(format!(
                "activity {} stores {} counterfactuals, training uses {num_counterfactuals}",
                record.activity.id,
                record.cfs.len()
            )));
        }
        record.cfs[..num_counterfactuals]
            .iter()
            .map(|c| text.embed(&c.tokens))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(VideoTexts {
        narrations,
        bundles,
        summary: text.embed(&record.activity.summary_tokens)?,
        cfs,
    })
}

pub fn text_table(config: &Config) -> Result<TextTable> {
    TextTable::new(
        config.world.vocab_size(),
        config.model.embed_dim,
        config.model.text_decay,
        seed::derive(config.seed, "text"),
    )
}

pub fn init_model(config: &Config) -> Result<Model> {
    let mut model = Model::new(
        config.world.input_dim,
        config.model.hidden_dim,
        config.model.embed_dim,
        config.model.max_clips,
        seed::derive(config.seed, "init"),
    )?;
    model.encoder.normalize = config.model.normalize;
    model.aggregator.normalize = config.model.normalize;
    Ok(model)
}

fn param_sizes(model: &Model) -> Vec<usize> {
    model.params().iter().map(|(_, t)| t.len()).collect()
}

/// Loss values of one child batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChildTerms {
    pub v2t: f64,
    pub before: f64,
    pub after: f64,
    pub child: f64,
}

pub struct Trainer<'a> {
    config: Config,
    model: Model,
    text: TextTable,
    opt: Adam,
    counters: Counters,
    records: &'a [VideoRecord],
    texts: Vec<VideoTexts>,
    clip_pool: Vec<(usize, usize)>,
    perm_cache: Option<(u64, Vec<usize>)>,
    log: Vec<LogRecord>,
    started: Instant,
}

/// Forward-pass domain errors (an overflowed norm, a log of zero) only arise
/// from runaway parameters, so they abort as a divergence of `term`.
fn overflow_as_divergence(e: Error, term: &'static str, step: u64) -> Error {
    match e {
        Error::Domain { .. } => Error::Divergence {
            term,
            step,
            value: f64::INFINITY,
        },
        other => other,
    }
}

fn check_finite(term: &'static str, step: u64, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { term, step, value })
    }
}

impl<'a> Trainer<'a> {
    /// Fresh model and optimizer for `records` (the training split).
    pub fn new(config: Config, records: &'a [VideoRecord]) -> Result<Self> {
        let model = init_model(&config)?;
        let opt = Adam::new(&param_sizes(&model), config.train.lr);
        Trainer::with_state(config, records, model, opt, Counters::default())
    }

    /// Continues from a checkpoint. The checkpoint's config is used.
    pub fn resume(ckpt: Checkpoint, records: &'a [VideoRecord]) -> Result<Self> {
        let Checkpoint {
            config,
            model,
            optimizer,
            counters,
        } = ckpt;
        Trainer::with_state(config, records, model, optimizer, counters)
    }

    fn with_state(
        config: Config,
        records: &'a [VideoRecord],
        model: Model,
        opt: Adam,
        counters: Counters,
    ) -> Result<Self> {
        config.validate()?;
        let text = text_table(&config)?;
        let k = config.world.frames_per_clip;
        let mut clip_pool = Vec::new();
        for (v, r) in records.iter().enumerate() {
            if r.video.frames_per_clip() != k {
                return Err(Error::Schema(format!(
                    "activity {} has {} frames per clip, config says {k}",
                    r.activity.id,
                    r.video.frames_per_clip()
                )));
            }
            if r.video.clips.len() > config.model.max_clips {
                return Err(Error::Schema(format!(
                    "activity {} has {} clips, aggregator holds {}",
                    r.activity.id,
                    r.video.clips.len(),
                    config.model.max_clips
                )));
            }
            clip_pool.extend((0..r.video.clips.len()).map(|c| (v, c)));
        }
        if clip_pool.len() < config.train.batch_size {
            return Err(Error::invalid(format!(
                "{} clips cannot fill a batch of {}",
                clip_pool.len(),
                config.train.batch_size
            )));
        }
        let mut ids: Vec<u64> = records.iter().map(|r| r.activity.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() < 2 {
            return Err(Error::invalid("parent steps need videos of at least two activities"));
        }
        let w = config.train.loss.num_counterfactuals;
        let texts = records
            .iter()
            .map(|r| video_texts(r, &config.world, &text, w, config.train.ablate_cf))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            config,
            model,
            text,
            opt,
            counters,
            records,
            texts,
            clip_pool,
            perm_cache: None,
            log: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn text_table(&self) -> &TextTable {
        &self.text
    }

    pub fn optimizer(&self) -> &Adam {
        &self.opt
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn texts(&self) -> &[VideoTexts] {
        &self.texts
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            optimizer: self.opt.clone(),
            counters: self.counters,
        }
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        if self.perm_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut p: Vec<usize> = (0..self.clip_pool.len()).collect();
            p.shuffle(&mut seed::rng(seed::derive_indexed(
                self.config.seed,
                "train.shuffle",
                epoch,
            )));
            self.perm_cache = Some((epoch, p));
        }
        self.perm_cache.as_ref().map_or(&[], |(_, p)| p.as_slice())
    }

    /// `(video, clip)` pairs of 0-based child step `step`.
    pub fn child_batch(&mut self, step: u64) -> Vec<(usize, usize)> {
        let b = self.config.train.batch_size as u64;
        let n = self.clip_pool.len() as u64;
        (0..b)
            .map(|j| {
                let pos = step * b + j;
                let idx = self.permutation(pos / n)[(pos % n) as usize];
                self.clip_pool[idx]
            })
            .collect()
    }

    /// Video indices of 0-based parent step `step`, drawn with replacement
    /// until at least two activities are present.
    pub fn parent_batch(&self, step: u64) -> Vec<usize> {
        let mut rng = seed::rng(seed::derive_indexed(self.config.seed, "train.parent", step));
        let n = self.records.len();
        loop {
            let batch: Vec<usize> = (0..self.config.train.batch_size)
                .map(|_| rng.random_range(0..n))
                .collect();
            let first = self.records[batch[0]].activity.id;
            if batch.iter().any(|&v| self.records[v].activity.id != first) {
                return batch;
            }
        }
    }

    /// Builds the child objective for `batch` on `tape`. Returns the model
    /// vars and the v2t, before, after and child loss vars.
    fn child_graph(
        &self,
        tape: &mut Tape,
        batch: &[(usize, usize)],
        frame_terms: bool,
    ) -> Result<(Vec<Var>, [Var; 4])> {
        let k = self.config.world.frames_per_clip;
        let params = self.config.loss_params();
        let (mv, _) = self.model.bind(tape);
        let frames: Vec<&[f64]> = batch
            .iter()
            .flat_map(|&(v, c)| self.records[v].video.clips[c].iter().map(Vec::as_slice))
            .collect();
        let x = mv.encoder.frames_input(tape, &frames)?;
        let (emb, pooled) = mv.encoder.encode_clips(tape, x, k)?;
        let narr: Vec<Vec<f64>> = batch
            .iter()
            .map(|&(v, c)| self.texts[v].narrations[c].clone())
            .collect();
        let v2t = clip_v2t_loss(tape, pooled, &narr, &params)?;
        if !frame_terms {
            return Ok((mv.vars(), [v2t, v2t, v2t, v2t]));
        }
        let mut clips = Vec::with_capacity(batch.len());
        for (i, &(v, c)) in batch.iter().enumerate() {
            let rows: Vec<usize> = (i * k..(i + 1) * k).collect();
            clips.push((tape.gather(emb, &rows)?, &self.texts[v].bundles[c]));
        }
        let before = frame_state_loss(tape, &clips, Role::Before, &params)?;
        let after = frame_state_loss(tape, &clips, Role::After, &params)?;
        let child = child_loss(tape, v2t, before, after, &params)?;
        Ok((mv.vars(), [v2t, before, after, child]))
    }

    /// Child loss terms of `batch` under the current parameters.
    pub fn child_terms(&self, batch: &[(usize, usize)]) -> Result<ChildTerms> {
        let mut tape = Tape::new();
        let (_, [v2t, before, after, child]) = self.child_graph(&mut tape, batch, true)?;
        Ok(ChildTerms {
            v2t: tape.scalar(v2t),
            before: tape.scalar(before),
            after: tape.scalar(after),
            child: tape.scalar(child),
        })
    }

    fn parent_graph(&self, tape: &mut Tape, batch: &[usize]) -> Result<(Vec<Var>, Var)> {
        let k = self.config.world.frames_per_clip;
        let (mv, pos) = self.model.bind(tape);
        let frames: Vec<&[f64]> = batch.iter().flat_map(|&v| self.records[v].video.frames()).collect();
        let x = mv.encoder.frames_input(tape, &frames)?;
        let (_, pooled) = mv.encoder.encode_clips(tape, x, k)?;
        let mut videos = Vec::with_capacity(batch.len());
        let mut row = 0;
        for &v in batch {
            let n = self.records[v].video.clips.len();
            let rows: Vec<usize> = (row..row + n).collect();
            row += n;
            let clips = tape.gather(pooled, &rows)?;
            videos.push(mv.aggregator.aggregate(tape, clips, pos)?);
        }
        let videos = tape.concat_rows(&videos)?;
        let summaries: Vec<Vec<f64>> = batch.iter().map(|&v| self.texts[v].summary.clone()).collect();
        let cfs: Vec<Vec<Vec<f64>>> = batch.iter().map(|&v| self.texts[v].cfs.clone()).collect();
        let ids: Vec<u64> = batch.iter().map(|&v| self.records[v].activity.id).collect();
        let sets = default_video_sets(&ids)?;
        let loss = parent_loss(tape, videos, &summaries, &cfs, &sets, &self.config.loss_params())?;
        Ok((mv.vars(), loss))
    }

    /// Parent loss of `batch` under the current parameters.
    pub fn parent_value(&self, batch: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let (_, loss) = self.parent_graph(&mut tape, batch)?;
        Ok(tape.scalar(loss))
    }

    /// Backpropagates `loss`, clips and applies one optimizer update.
    /// Non-finite parameters after the update are charged to `term`.
    fn apply(
        &mut self,
        tape: &mut Tape,
        vars: &[Var],
        loss: Var,
        term: &'static str,
        step: u64,
    ) -> Result<(f64, bool)> {
        tape.backward(loss)?;
        let mut grads: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
            })
            .collect();
        let norm = clip_global_norm(&mut grads, self.config.train.clip_norm);
        check_finite("gradient", step, norm)?;
        let clipped = norm > self.config.train.clip_norm;
        if clipped {
            self.counters.clip_events += 1;
        }
        let mut params: Vec<&mut Tensor> = self.model.params_mut().into_iter().map(|(_, t)| t).collect();
        self.opt.update(&mut params, &grads)?;
        if let Some(&bad) = params.iter().flat_map(|t| t.values()).find(|x| !x.is_finite()) {
            return Err(Error::Divergence { term, step, value: bad });
        }
        Ok((norm, clipped))
    }

    fn record(&mut self, phase: Phase, loss: f64, components: &[(&str, f64)], grad_norm: f64, clipped: bool) {
        self.log.push(LogRecord {
            step: self.counters.global_steps(),
            phase,
            child_step: self.counters.child_steps,
            parent_step: self.counters.parent_steps,
            loss,
            component_losses: components.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            grad_norm,
            clipped,
            wallclock: self.started.elapsed().as_secs_f64(),
        });
    }

    /// One child update on the next batch. Returns the pre-update loss.
    pub fn child_step(&mut self) -> Result<f64> {
        self.child_step_inner(true)
    }

    /// A child update using only the clip-to-narration term.
    pub fn v2t_step(&mut self) -> Result<f64> {
        self.child_step_inner(false)
    }

    fn child_step_inner(&mut self, frame_terms: bool) -> Result<f64> {
        let batch = self.child_batch(self.counters.child_steps);
        let step = self.counters.global_steps() + 1;
        let term = if frame_terms { "L_child" } else { "L_v2t" };
        let mut tape = Tape::new();
        let (vars, [v2t, before, after, child]) = self
            .child_graph(&mut tape, &batch, frame_terms)
            .map_err(|e| overflow_as_divergence(e, term, step))?;
        let values = [
            ("L_v2t", tape.scalar(v2t)),
            ("L_before", tape.scalar(before)),
            ("L_after", tape.scalar(after)),
            ("L_child", tape.scalar(child)),
        ];
        for (name, value) in values {
            check_finite(name, step, value)?;
        }
        let (norm, clipped) = self.apply(&mut tape, &vars, child, term, step)?;
        self.counters.child_steps += 1;
        let components: &[(&str, f64)] = if frame_terms { &values[..3] } else { &values[..1] };
        self.record(Phase::Child, values[3].1, components, norm, clipped);
        Ok(values[3].1)
    }

    /// One parent update. Returns the pre-update loss.
    pub fn parent_step(&mut self) -> Result<f64> {
        let batch = self.parent_batch(self.counters.parent_steps);
        let step = self.counters.global_steps() + 1;
        let mut tape = Tape::new();
        let (vars, loss) = self
            .parent_graph(&mut tape, &batch)
            .map_err(|e| overflow_as_divergence(e, "L_parent", step))?;
        let value = tape.scalar(loss);
        check_finite("L_parent", step, value)?;
        let (norm, clipped) = self.apply(&mut tape, &vars, loss, "L_parent", step)?;
        self.counters.parent_steps += 1;
        self.record(Phase::Parent, value, &[("L_parent", value)], norm, clipped);
        Ok(value)
    }

    /// Runs child steps until `child_steps` have been taken in total, with a
    /// parent step after every `schedule_ratio` of them.
    pub fn run_until(&mut self, child_steps: u64) -> Result<()> {
        let ratio = self.config.train.schedule_ratio;
        while self.counters.child_steps < child_steps {
            self.child_step()?;
            if self.counters.child_steps.is_multiple_of(ratio) {
                self.parent_step()?;
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.train.child_steps_total)
    }
}

/// Writes the run log as one JSON object per line, preceded by a header
/// line carrying the config and the counterfactual ablation flag.
pub fn log_to_jsonl(config: &Config, log: &[LogRecord]) -> Result<String> {
    let header = serde_json::json!({
        "phase": "config",
        "ablate_cf": config.train.ablate_cf,
        "seed": config.seed,
        "config": config.to_text(),
    });
    let mut out = header.to_string();
    out.push('\n');
    for r in log {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Schema(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}
