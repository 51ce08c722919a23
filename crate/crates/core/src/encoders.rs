//! Trainable frame encoder, clip pooling, the self-attention video
//! aggregator and the frozen text-embedding table.
//!
//! Each trainable module exists twice: as owned [`Tensor`] parameters, and
//! as a `*Vars` binding of those parameters onto a [`Tape`] for a forward
//! pass. Inference helpers (`encode_frame`, `encode_clip`, `aggregate`) run
//! the same tape code without calling `backward`.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

/// Where an embedding came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Clip { video: u64, clip: usize },
    Video(u64),
    Unspecified,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipEmbedding {
    pub vector: Vec<f64>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoEmbedding {
    pub vector: Vec<f64>,
    pub provenance: Provenance,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; zero vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = l2_norm(a) * l2_norm(b);
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

fn uniform_tensor(shape: Vec<usize>, bound: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, values, true).expect("finite init")
}

fn zero_param(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape, true).expect("positive dims")
}

/// `x·W + 1·bᵀ` for `x: [m, in]`, `W: [in, out]`, `b: [out]`.
fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let m = tape.shape(x)[0];
    let out = tape.shape(w)[1];
    let xw = tape.matmul(x, w)?;
    let ones = tape.constant(vec![m, 1], vec![1.0; m])?;
    let brow = tape.reshape(b, vec![1, out])?;
    let bias = tape.matmul(ones, brow)?;
    tape.add(xw, bias)
}

/// Two-layer tanh perceptron mapping a frame feature to a unit embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEncoder {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub normalize: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct FrameEncoderVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    input_dim: usize,
    normalize: bool,
}

impl FrameEncoder {
    /// Weights uniform in ±1/√fan_in, biases zero.
    pub fn new(input_dim: usize, hidden_dim: usize, embed_dim: usize, rng: &mut Rng) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || embed_dim == 0 {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        Ok(FrameEncoder {
            w1: uniform_tensor(vec![input_dim, hidden_dim], 1.0 / (input_dim as f64).sqrt(), rng),
            b1: zero_param(vec![hidden_dim]),
            w2: uniform_tensor(vec![hidden_dim, embed_dim], 1.0 / (hidden_dim as f64).sqrt(), rng),
            b2: zero_param(vec![embed_dim]),
            normalize: true,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn bind(&self, tape: &mut Tape) -> FrameEncoderVars {
        FrameEncoderVars {
            w1: tape.leaf(&self.w1),
            b1: tape.leaf(&self.b1),
            w2: tape.leaf(&self.w2),
            b2: tape.leaf(&self.b2),
            input_dim: self.input_dim(),
            normalize: self.normalize,
        }
    }

    /// Wraps tape leaves already holding this encoder's parameters, in
    /// `params()` order.
    pub fn vars_from(&self, vars: &[Var]) -> Result<FrameEncoderVars> {
        match vars {
            &[w1, b1, w2, b2] => Ok(FrameEncoderVars {
                w1,
                b1,
                w2,
                b2,
                input_dim: self.input_dim(),
                normalize: self.normalize,
            }),
            _ => Err(Error::invalid(format!(
                "frame encoder takes 4 vars, got {}",
                vars.len()
            ))),
        }
    }

    pub fn encode_frame(&self, frame: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = vars.frames_input(&mut tape, &[frame])?;
        let y = vars.encode_frames(&mut tape, x)?;
        Ok(tape.value(y).to_vec())
    }

    /// Encodes many frames in one pass; returns one embedding per frame.
    pub fn encode_frames(&self, frames: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = vars.frames_input(&mut tape, frames)?;
        let y = vars.encode_frames(&mut tape, x)?;
        let d = self.embed_dim();
        Ok(tape.value(y).chunks(d).map(<[f64]>::to_vec).collect())
    }

    /// Normalized mean of the frame embeddings of one clip.
    pub fn encode_clip(&self, frames: &[Vec<f64>]) -> Result<ClipEmbedding> {
        let clips = self.encode_clips(&[frames])?;
        Ok(clips.into_iter().next().expect("one clip in, one clip out"))
    }

    /// Encodes equal-length clips together.
    pub fn encode_clips(&self, clips: &[&[Vec<f64>]]) -> Result<Vec<ClipEmbedding>> {
        let k = clips.first().map_or(0, |c| c.len());
        if clips.iter().any(|c| c.len() != k) {
            return Err(Error::invalid("clips in one call must have the same frame count"));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let flat: Vec<&[f64]> = clips.iter().flat_map(|c| c.iter().map(Vec::as_slice)).collect();
        let x = vars.frames_input(&mut tape, &flat)?;
        let (_, pooled) = vars.encode_clips(&mut tape, x, k)?;
        let d = self.embed_dim();
        Ok(tape
            .value(pooled)
            .chunks(d)
            .map(|v| ClipEmbedding {
                vector: v.to_vec(),
                provenance: Provenance::Unspecified,
            })
            .collect())
    }

    pub fn params(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("encoder.w1", &self.w1),
            ("encoder.b1", &self.b1),
            ("encoder.w2", &self.w2),
            ("encoder.b2", &self.b2),
        ]
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("encoder.w1", &mut self.w1),
            ("encoder.b1", &mut self.b1),
            ("encoder.w2", &mut self.w2),
            ("encoder.b2", &mut self.b2),
        ]
    }
}

impl FrameEncoderVars {
    pub fn vars(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Stacks raw frame features into a `[n, input_dim]` constant.
    pub fn frames_input(&self, tape: &mut Tape, frames: &[&[f64]]) -> Result<Var> {
        if frames.is_empty() {
            return Err(Error::invalid("no frames to encode"));
        }
        let mut flat = Vec::with_capacity(frames.len() * self.input_dim);
        for (i, f) in frames.iter().enumerate() {
            if f.len() != self.input_dim {
                return Err(Error::shape(
                    "encode_frame",
                    format!("frame {i} has {} features, encoder expects {}", f.len(), self.input_dim),
                ));
            }
            flat.extend_from_slice(f);
        }
        tape.constant(vec![frames.len(), self.input_dim], flat)
    }

    /// `[n, input_dim] → [n, d]`, each row unit norm.
    pub fn encode_frames(&self, tape: &mut Tape, frames: Var) -> Result<Var> {
        let h = affine(tape, frames, self.w1, self.b1)?;
        let h = tape.tanh(h);
        let y = affine(tape, h, self.w2, self.b2)?;
        if self.normalize {
            tape.l2_normalize(y)
        } else {
            Ok(y)
        }
    }

    /// Encodes `[B·K, input_dim]` frames laid out clip by clip. Returns the
    /// frame embeddings `[B·K, d]` and pooled clip embeddings `[B, d]`.
    pub fn encode_clips(&self, tape: &mut Tape, frames: Var, k: usize) -> Result<(Var, Var)> {
        if k < 2 {
            return Err(Error::invalid(format!("a clip needs at least 2 frames, got {k}")));
        }
        let n = tape.shape(frames)[0];
        if !n.is_multiple_of(k) {
            return Err(Error::shape(
                "encode_clip",
                format!("{n} frames do not split into clips of {k}"),
            ));
        }
        let emb = self.encode_frames(tape, frames)?;
        let clips = n / k;
        let mut pool = vec![0.0; clips * n];
        for c in 0..clips {
            for j in 0..k {
                pool[c * n + c * k + j] = 1.0 / k as f64;
            }
        }
        let pool = tape.constant(vec![clips, n], pool)?;
        let mean = tape.matmul(pool, emb)?;
        let pooled = if self.normalize { tape.l2_normalize(mean)? } else { mean };
        Ok((emb, pooled))
    }
}

/// Standard sinusoidal positions: `sin`/`cos` pairs at geometric rates.
pub fn sinusoidal_table(max_positions: usize, dim: usize) -> Vec<f64> {
    let mut table = vec![0.0; max_positions * dim];
    for p in 0..max_positions {
        let row = &mut table[p * dim..(p + 1) * dim];
        for (i, x) in row.iter_mut().enumerate() {
            let pair = (i / 2) as f64;
            let rate = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let angle = p as f64 * rate;
            *x = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    table
}

/// One single-head self-attention block pooled to a video embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregator {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pos_enc: Vec<f64>,
    max_clips: usize,
    pub normalize: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct AggregatorVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    dim: usize,
    max_clips: usize,
    normalize: bool,
}

impl Aggregator {
    pub fn new(dim: usize, max_clips: usize, rng: &mut Rng) -> Result<Self> {
        if dim == 0 || max_clips == 0 {
            return Err(Error::invalid("aggregator dimensions must be positive"));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        Ok(Aggregator {
            wq: uniform_tensor(vec![dim, dim], bound, rng),
            bq: zero_param(vec![dim]),
            wk: uniform_tensor(vec![dim, dim], bound, rng),
            bk: zero_param(vec![dim]),
            wv: uniform_tensor(vec![dim, dim], bound, rng),
            bv: zero_param(vec![dim]),
            wo: uniform_tensor(vec![dim, dim], bound, rng),
            bo: zero_param(vec![dim]),
            pos_enc: sinusoidal_table(max_clips, dim),
            max_clips,
            normalize: true,
        })
    }

    /// Identity projections and zero biases.
    pub fn identity(dim: usize, max_clips: usize) -> Self {
        let mut eye = vec![0.0; dim * dim];
        (0..dim).for_each(|i| eye[i * dim + i] = 1.0);
        let w = || Tensor::new(vec![dim, dim], eye.clone(), true).expect("identity");
        Aggregator {
            wq: w(),
            bq: zero_param(vec![dim]),
            wk: w(),
            bk: zero_param(vec![dim]),
            wv: w(),
            bv: zero_param(vec![dim]),
            wo: w(),
            bo: zero_param(vec![dim]),
            pos_enc: sinusoidal_table(max_clips, dim),
            max_clips,
            normalize: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn max_clips(&self) -> usize {
        self.max_clips
    }

    pub fn positional_encoding(&self) -> &[f64] {
        &self.pos_enc
    }

    /// Zeroes the positional table, making the block order-blind.
    pub fn zero_positional_encoding(&mut self) {
        self.pos_enc.iter_mut().for_each(|x| *x = 0.0);
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape) -> (AggregatorVars, &'a [f64]) {
        let vars = AggregatorVars {
            wq: tape.leaf(&self.wq),
            bq: tape.leaf(&self.bq),
            wk: tape.leaf(&self.wk),
            bk: tape.leaf(&self.bk),
            wv: tape.leaf(&self.wv),
            bv: tape.leaf(&self.bv),
            wo: tape.leaf(&self.wo),
            bo: tape.leaf(&self.bo),
            dim: self.dim(),
            max_clips: self.max_clips,
            normalize: self.normalize,
        };
        (vars, &self.pos_enc)
    }

    /// Wraps tape leaves already holding this block's parameters, in
    /// `params()` order.
    pub fn vars_from(&self, vars: &[Var]) -> Result<AggregatorVars> {
        match vars {
            &[wq, bq, wk, bk, wv, bv, wo, bo] => Ok(AggregatorVars {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                dim: self.dim(),
                max_clips: self.max_clips,
                normalize: self.normalize,
            }),
            _ => Err(Error::invalid(format!("aggregator takes 8 vars, got {}", vars.len()))),
        }
    }

    pub fn aggregate(&self, clips: &[ClipEmbedding]) -> Result<VideoEmbedding> {
        let mut tape = Tape::new();
        let (vars, pos) = self.bind(&mut tape);
        let d = self.dim();
        let mut flat = Vec::with_capacity(clips.len() * d);
        for c in clips {
            if c.vector.len() != d {
                return Err(Error::shape("aggregate_video", "clip embedding width differs from d"));
            }
            flat.extend_from_slice(&c.vector);
        }
        if clips.is_empty() {
            return Err(Error::invalid("cannot aggregate an empty clip list"));
        }
        let x = tape.constant(vec![clips.len(), d], flat)?;
        let v = vars.aggregate(&mut tape, x, pos)?;
        Ok(VideoEmbedding {
            vector: tape.value(v).to_vec(),
            provenance: Provenance::Unspecified,
        })
    }

    pub fn params(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("aggregator.wq", &self.wq),
            ("aggregator.bq", &self.bq),
            ("aggregator.wk", &self.wk),
            ("aggregator.bk", &self.bk),
            ("aggregator.wv", &self.wv),
            ("aggregator.bv", &self.bv),
            ("aggregator.wo", &self.wo),
            ("aggregator.bo", &self.bo),
        ]
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Tensor); 8] {
        [
            ("aggregator.wq", &mut self.wq),
            ("aggregator.bq", &mut self.bq),
            ("aggregator.wk", &mut self.wk),
            ("aggregator.bk", &mut self.bk),
            ("aggregator.wv", &mut self.wv),
            ("aggregator.bv", &mut self.bv),
            ("aggregator.wo", &mut self.wo),
            ("aggregator.bo", &mut self.bo),
        ]
    }
}

impl AggregatorVars {
    pub fn vars(&self) -> [Var; 8] {
        [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]
    }

    /// `[n, d]` ordered clip embeddings → `[d]` video embedding.
    ///
    /// Adds positions, applies scaled dot-product self-attention and the
    /// output projection, mean-pools over positions, then normalizes.
    pub fn aggregate(&self, tape: &mut Tape, clips: Var, pos_enc: &[f64]) -> Result<Var> {
        let d = self.dim;
        let n = match tape.shape(clips) {
            [n, w] if *w == d => *n,
            s => {
                return Err(Error::shape(
                    "aggregate_video",
                    format!("expected [n, {d}] clip embeddings, got {s:?}"),
                ))
            }
        };
        if n > self.max_clips {
            return Err(Error::invalid(format!(
                "{n} clips exceed the aggregator capacity of {}",
                self.max_clips
            )));
        }
        let pos = tape.constant(vec![n, d], pos_enc[..n * d].to_vec())?;
        let x = tape.add(clips, pos)?;
        let q = affine(tape, x, self.wq, self.bq)?;
        let k = affine(tape, x, self.wk, self.bk)?;
        let v = affine(tape, x, self.wv, self.bv)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = tape.softmax(scores)?;
        let mixed = tape.matmul(attn, v)?;
        let out = affine(tape, mixed, self.wo, self.bo)?;
        let avg = tape.constant(vec![1, n], vec![1.0 / n as f64; n])?;
        let pooled = tape.matmul(avg, out)?;
        let pooled = tape.reshape(pooled, vec![d])?;
        if self.normalize {
            tape.l2_normalize(pooled)
        } else {
            Ok(pooled)
        }
    }
}

/// Fixed token-embedding table standing in for a frozen text encoder.
///
/// A token sequence embeds as the normalized weighted mean of its rows, with
/// weight `decay^p` at position `p`. `decay = 1` is the plain mean; any other
/// value makes the embedding order-sensitive while a single token (or a
/// repeated token) still maps to its row exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TextTable {
    vocab_size: usize,
    dim: usize,
    rows: Vec<f64>,
    position_decay: f64,
}

impl TextTable {
    pub fn new(vocab_size: usize, dim: usize, position_decay: f64, seed: u64) -> Result<Self> {
        if vocab_size == 0 || dim == 0 {
            return Err(Error::invalid("text table dimensions must be positive"));
        }
        if !(position_decay > 0.0 && position_decay.is_finite()) {
            return Err(Error::invalid(format!(
                "position decay must be positive, got {position_decay}"
            )));
        }
        let mut rng = seed::rng(seed);
        let mut rows = Vec::with_capacity(vocab_size * dim);
        for _ in 0..vocab_size {
            let mut row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = l2_norm(&row);
            row.iter_mut().for_each(|x| *x /= n);
            rows.extend(row);
        }
        Ok(TextTable {
            vocab_size,
            dim,
            rows,
            position_decay,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn position_decay(&self) -> f64 {
        self.position_decay
    }

    pub fn row(&self, token: usize) -> Option<&[f64]> {
        (token < self.vocab_size).then(|| &self.rows[token * self.dim..(token + 1) * self.dim])
    }

    /// The raw table, for frozen-parameter audits.
    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    pub fn embed(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::invalid("cannot embed an empty token list"));
        }
        if tokens.iter().all(|&t| t == tokens[0]) {
            let row = self.row(tokens[0]).ok_or_else(|| {
                Error::invalid(format!("token {} outside vocabulary of {}", tokens[0], self.vocab_size))
            })?;
            return Ok(row.to_vec());
        }
        let mut acc = vec![0.0; self.dim];
        let mut weight = 1.0;
        for &t in tokens {
            let row = self
                .row(t)
                .ok_or_else(|| Error::invalid(format!("token {t} outside vocabulary of {}", self.vocab_size)))?;
            acc.iter_mut().zip(row).for_each(|(a, r)| *a += weight * r);
            weight *= self.position_decay;
        }
        let n = l2_norm(&acc);
        if n == 0.0 {
            return Err(Error::domain("embed_text", "tokens cancel to a zero vector"));
        }
        acc.iter_mut().for_each(|x| *x /= n);
        Ok(acc)
    }
}

/// Trainable parameters: the frame encoder and the video aggregator.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: FrameEncoder,
    pub aggregator: Aggregator,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub encoder: FrameEncoderVars,
    pub aggregator: AggregatorVars,
}

impl Model {
    pub fn new(input_dim: usize, hidden_dim: usize, embed_dim: usize, max_clips: usize, seed: u64) -> Result<Self> {
        let mut rng = seed::rng(seed);
        let encoder = FrameEncoder::new(input_dim, hidden_dim, embed_dim, &mut rng)?;
        let aggregator = Aggregator::new(embed_dim, max_clips, &mut rng)?;
        Ok(Model { encoder, aggregator })
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape) -> (ModelVars, &'a [f64]) {
        let encoder = self.encoder.bind(tape);
        let (aggregator, pos) = self.aggregator.bind(tape);
        (ModelVars { encoder, aggregator }, pos)
    }

    /// Encoder vars first, then aggregator vars, as in `params()`.
    pub fn vars_from(&self, vars: &[Var]) -> Result<ModelVars> {
        if vars.len() != 12 {
            return Err(Error::invalid(format!("model takes 12 vars, got {}", vars.len())));
        }
        Ok(ModelVars {
            encoder: self.encoder.vars_from(&vars[..4])?,
            aggregator: self.aggregator.vars_from(&vars[4..])?,
        })
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v: Vec<_> = self.encoder.params().into_iter().collect();
        v.extend(self.aggregator.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut v: Vec<_> = self.encoder.params_mut().into_iter().collect();
        v.extend(self.aggregator.params_mut());
        v
    }

    /// Embeds a whole video: clips (each `K` frames) → video embedding.
    pub fn embed_video(&self, clips: &[Vec<Vec<f64>>]) -> Result<(Vec<ClipEmbedding>, VideoEmbedding)> {
        let refs: Vec<&[Vec<f64>]> = clips.iter().map(Vec::as_slice).collect();
        let clip_embs = self.encoder.encode_clips(&refs)?;
        let video = self.aggregator.aggregate(&clip_embs)?;
        Ok((clip_embs, video))
    }
}

impl ModelVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.encoder.vars().to_vec();
        v.extend(self.aggregator.vars());
        v
    }
}
