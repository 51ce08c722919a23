//! Run configuration: one flat `key = value` text file.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and
//! falls back to its default; unknown or repeated keys are errors that name
//! the line and field. [`Config::to_text`] writes every key in a fixed order,
//! so the text doubles as a canonical snapshot.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::objectives::{DenominatorMode, LossParams};
use crate::world::WorldConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub max_clips: usize,
    /// Weight ratio between consecutive tokens in a text embedding.
    pub text_decay: f64,
    pub normalize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 64,
            embed_dim: 32,
            max_clips: 10,
            text_decay: 0.8,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossParams,
    pub schedule_ratio: u64,
    pub child_steps_total: u64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Drops every counterfactual term (SC-CF texts and video CFs).
    pub ablate_cf: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            lr: 1e-3,
            loss: LossParams::default(),
            schedule_ratio: 5,
            child_steps_total: 2000,
            clip_norm: 10.0,
            ablate_cf: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Share of clips corrupted for error detection.
    pub error_fraction: f64,
    pub probe_steps: usize,
    pub probe_lr: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            error_fraction: 0.2,
            probe_steps: 500,
            probe_lr: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 7,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

pub const KEYS: [&str; 32] = [
    "seed",
    "n_actions",
    "n_states",
    "min_steps",
    "max_steps",
    "n_train",
    "n_val",
    "n_test",
    "noise_sigma",
    "frames_per_clip",
    "input_dim",
    "sc_cf_per_action",
    "num_counterfactuals",
    "hidden_dim",
    "embed_dim",
    "max_clips",
    "text_decay",
    "normalize",
    "batch_size",
    "lr",
    "temperature",
    "lambda_state",
    "denominator_mode",
    "parent_temperature",
    "schedule_ratio",
    "child_steps_total",
    "clip_norm",
    "ablate_cf",
    "error_fraction",
    "probe_steps",
    "probe_lr",
    "version",
];

/// Format tag accepted by the `version` key.
pub const CONFIG_VERSION: u32 = 1;

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn positive_real(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = parse_num(v)?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("must be a positive finite number, got {v}"))
    }
}

fn non_negative_real(v: &str) -> std::result::Result<f64, String> {
    let x: f64 = parse_num(v)?;
    if x >= 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(format!("must be a non-negative finite number, got {v}"))
    }
}

fn positive_int<T: std::str::FromStr + PartialOrd + Default>(v: &str) -> std::result::Result<T, String> {
    let x: T = parse_num(v)?;
    if x > T::default() {
        Ok(x)
    } else {
        Err(format!("must be a positive integer, got {v}"))
    }
}

impl Config {
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let w = &mut self.world;
        let m = &mut self.model;
        let t = &mut self.train;
        let e = &mut self.eval;
        match key {
            "seed" => self.seed = parse_num(v)?,
            "n_actions" => w.n_actions = positive_int(v)?,
            "n_states" => w.n_states = positive_int(v)?,
            "min_steps" => w.min_steps = positive_int(v)?,
            "max_steps" => w.max_steps = positive_int(v)?,
            "n_train" => w.n_train = positive_int(v)?,
            "n_val" => w.n_val = positive_int(v)?,
            "n_test" => w.n_test = positive_int(v)?,
            "noise_sigma" => w.noise_sigma = non_negative_real(v)?,
            "frames_per_clip" => {
                let k: usize = positive_int(v)?;
                if k < 2 || !k.is_multiple_of(2) {
                    return Err(format!("must be even and at least 2, got {k}"));
                }
                w.frames_per_clip = k;
            }
            "input_dim" => w.input_dim = positive_int(v)?,
            "sc_cf_per_action" => w.sc_cf_per_action = positive_int(v)?,
            "num_counterfactuals" => {
                let n = positive_int(v)?;
                w.cfs_per_summary = n;
                t.loss.num_counterfactuals = n;
            }
            "hidden_dim" => m.hidden_dim = positive_int(v)?,
            "embed_dim" => m.embed_dim = positive_int(v)?,
            "max_clips" => m.max_clips = positive_int(v)?,
            "text_decay" => m.text_decay = positive_real(v)?,
            "normalize" => m.normalize = parse_bool(v)?,
            "batch_size" => {
                let b: usize = parse_num(v)?;
                if b < 2 {
                    return Err(format!("must be at least 2, got {b}"));
                }
                t.batch_size = b;
            }
            "lr" => t.lr = positive_real(v)?,
            "temperature" => t.loss.temperature = positive_real(v)?,
            "lambda_state" => t.loss.lambda_state = non_negative_real(v)?,
            "denominator_mode" => {
                t.loss.denominator_mode = DenominatorMode::from_name(v)
                    .ok_or_else(|| format!("expected negatives_only or negatives_plus_positive, got {v:?}"))?
            }
            "parent_temperature" => t.loss.parent_temperature = positive_real(v)?,
            "schedule_ratio" => t.schedule_ratio = positive_int(v)?,
            "child_steps_total" => t.child_steps_total = parse_num(v)?,
            "clip_norm" => t.clip_norm = positive_real(v)?,
            "ablate_cf" => t.ablate_cf = parse_bool(v)?,
            "error_fraction" => {
                let f = non_negative_real(v)?;
                if f > 1.0 {
                    return Err(format!("must lie in [0, 1], got {v}"));
                }
                e.error_fraction = f;
            }
            "probe_steps" => e.probe_steps = positive_int(v)?,
            "probe_lr" => e.probe_lr = positive_real(v)?,
            "version" => {
                let found: u32 = parse_num(v)?;
                if found != CONFIG_VERSION {
                    return Err(format!("unsupported config version {found}, expected {CONFIG_VERSION}"));
                }
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut seen: Vec<(&str, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(Error::Config {
                    line,
                    field: body.to_string(),
                    detail: "expected `key = value`".into(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            let err = |detail: String| Error::Config {
                line,
                field: key.to_string(),
                detail,
            };
            if let Some((_, first)) = seen.iter().find(|(k, _)| *k == key) {
                return Err(err(format!("repeated key, first set on line {first}")));
            }
            cfg.set(key, value).map_err(err)?;
            seen.push((key, line));
        }
        cfg.validate().map_err(|e| {
            let detail = match e {
                Error::InvalidArgument(d) | Error::VocabExhausted(d) => d,
                other => other.to_string(),
            };
            // Point at the last line that set a key named in the message.
            let line = seen
                .iter()
                .rev()
                .find(|(k, _)| detail.contains(*k))
                .map_or(0, |(_, l)| *l);
            Error::Config {
                line,
                field: "config".into(),
                detail,
            }
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    /// Checks cross-field constraints.
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.loss.validate()?;
        if self.world.cfs_per_summary != self.train.loss.num_counterfactuals {
            return Err(Error::invalid(format!(
                "num_counterfactuals disagrees: world stores {}, loss uses {}",
                self.world.cfs_per_summary, self.train.loss.num_counterfactuals
            )));
        }
        if self.model.max_clips < self.world.max_steps {
            return Err(Error::invalid(format!(
                "max_clips ({}) is below max_steps ({})",
                self.model.max_clips, self.world.max_steps
            )));
        }
        if self.train.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        Ok(())
    }

    pub fn loss_params(&self) -> LossParams {
        self.train.loss
    }

    /// Every key with its value, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let w = &self.world;
        let m = &self.model;
        let t = &self.train;
        let e = &self.eval;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("version", CONFIG_VERSION.to_string());
        put("seed", self.seed.to_string());
        put("n_actions", w.n_actions.to_string());
        put("n_states", w.n_states.to_string());
        put("min_steps", w.min_steps.to_string());
        put("max_steps", w.max_steps.to_string());
        put("n_train", w.n_train.to_string());
        put("n_val", w.n_val.to_string());
        put("n_test", w.n_test.to_string());
        put("noise_sigma", format!("{:?}", w.noise_sigma));
        put("frames_per_clip", w.frames_per_clip.to_string());
        put("input_dim", w.input_dim.to_string());
        put("sc_cf_per_action", w.sc_cf_per_action.to_string());
        put("num_counterfactuals", t.loss.num_counterfactuals.to_string());
        put("hidden_dim", m.hidden_dim.to_string());
        put("embed_dim", m.embed_dim.to_string());
        put("max_clips", m.max_clips.to_string());
        put("text_decay", format!("{:?}", m.text_decay));
        put("normalize", m.normalize.to_string());
        put("batch_size", t.batch_size.to_string());
        put("lr", format!("{:?}", t.lr));
        put("temperature", format!("{:?}", t.loss.temperature));
        put("lambda_state", format!("{:?}", t.loss.lambda_state));
        put("denominator_mode", t.loss.denominator_mode.name().to_string());
        put("parent_temperature", format!("{:?}", t.loss.parent_temperature));
        put("schedule_ratio", t.schedule_ratio.to_string());
        put("child_steps_total", t.child_steps_total.to_string());
        put("clip_norm", format!("{:?}", t.clip_norm));
        put("ablate_cf", t.ablate_cf.to_string());
        put("error_fraction", format!("{:?}", e.error_fraction));
        put("probe_steps", e.probe_steps.to_string());
        put("probe_lr", format!("{:?}", e.probe_lr));
        s
    }
}
