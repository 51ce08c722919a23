//! Command implementations behind the `procshift` binary.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use procshift::autodiff::OpKind;
use procshift::checks::{self, SuiteReport};
use procshift::config::Config;
use procshift::eval::{self, MetricReport, ReportIds};
use procshift::trainer::{self, load_checkpoint, save_checkpoint, Trainer};
use procshift::world::io::{read_dataset, sha256_hex, write_dataset, MANIFEST_FILE};
use procshift::world::World;
use procshift::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_SCHEMA: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;
pub const EXIT_GRADCHECK: u8 = 5;
/// Internal errors that no input should be able to trigger.
pub const EXIT_INTERNAL: u8 = 1;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RUN_LOG_FILE: &str = "run_log.jsonl";
pub const VAL_REPORT_FILE: &str = "val_report.txt";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

const AFTER_HELP: &str = "\
EXIT CODES:
  0  success
  2  config, schema or version error (including report key mismatch in compare)
  3  I/O error (the message names the path)
  4  numerical divergence during training (the message names the loss term)
  5  gradient check failure (the message lists failing components)

CONFIG FILES:
  Flat `key = value` lines; `#` starts a comment. Unknown keys, duplicate keys
  and out-of-range values are rejected with the offending line and field.
  Omitted keys keep their defaults. configs/default.conf lists every key.

REPORT SCHEMA:
  A metric report is a text file:
    # procshift metric report
    meta.dataset = <sha256 of the dataset manifest>
    meta.map_excluded_queries = <queries with no relevant gallery item>
    meta.model = <sha256 of the checkpoint file>
    meta.seed = <config seed>
    eda = <error detection accuracy, percent>
    edit = <segmental edit score, percent>
    f1@10 = <segmental F1 at IoU 0.10, percent>
    f1@25 = <segmental F1 at IoU 0.25, percent>
    f1@50 = <segmental F1 at IoU 0.50, percent>
    frame_acc = <frame-wise accuracy, percent>
    map@10 = <frame retrieval mean average precision at 10, in [0, 1]>
    phase_f1 = <early/late phase probe macro F1, percent>
    ranking_acc = <percent of videos closer to their summary than to every stored counterfactual>
  Keys are sorted; metric values carry six decimals.";

#[derive(Debug, Parser)]
#[command(
    name = "procshift",
    version,
    about = "Hierarchical state-change and counterfactual contrastive pretraining on a synthetic procedural world",
    after_long_help = AFTER_HELP
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train/val/test splits and their manifest.
    GenData(GenDataArgs),
    /// Train a model; writes checkpoint.bin, run_log.jsonl, val_report.txt and run_manifest.json.
    Train(TrainArgs),
    /// Compare analytic and finite-difference gradients of every loss and the aggregator.
    Gradcheck(GradcheckArgs),
    /// Evaluate a checkpoint and write a metric report.
    Eval(EvalArgs),
    /// Print per-metric deltas (B - A) between two reports.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Config file. Built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory; created if missing. Receives train.jsonl, val.jsonl, test.jsonl and manifest.json.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// World seed. Overrides the config `seed`.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Config file. Built-in defaults when omitted. Its world keys must match the dataset.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Dataset directory written by gen-data.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output directory; created if missing.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Drop every counterfactual term (state-change and video-level) from training.
    #[arg(long)]
    pub ablate_cf: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Config file supplying frames per clip and loss parameters. Built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root seed of the check problems. Defaults to the config `seed`.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Number of seeded problems per component.
    #[arg(long, value_name = "N", default_value_t = checks::DEFAULT_SEEDS)]
    pub seeds: u64,
    /// Corrupt the backward rule of one op (test fixture).
    #[arg(long, value_name = "OP", hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by train.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Dataset directory written by gen-data.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Report file to write.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Split to score. The validation split always picks the error-detection threshold.
    #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
    pub split: EvalSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSplit {
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Baseline report (A).
    pub report_a: PathBuf,
    /// Report compared against the baseline (B).
    pub report_b: PathBuf,
}

/// A failed command: exit code plus diagnostic. `output` is any regular
/// output produced before the failure.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Failure {
    pub code: u8,
    pub message: String,
    pub output: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. }
        | Error::Schema(_)
        | Error::VersionMismatch { .. }
        | Error::Corrupt { .. }
        | Error::InvalidArgument(_)
        | Error::VocabExhausted(_) => EXIT_SCHEMA,
        Error::Io { .. } => EXIT_IO,
        Error::Divergence { .. } | Error::NonFinite(_) => EXIT_DIVERGENCE,
        Error::Shape { .. } | Error::Domain { .. } | Error::NonScalarLoss(_) => EXIT_INTERNAL,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(&e),
            message: e.to_string(),
            ..Default::default()
        }
    }
}

type CmdResult = std::result::Result<String, Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_IO,
        message: format!("i/o error on {}: {e}", path.display()),
        ..Default::default()
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| io_failure(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| io_failure(path, e))
}

fn load_config(path: Option<&Path>) -> Result<(Config, Vec<u8>), Failure> {
    let Some(path) = path else {
        let c = Config::default();
        let text = c.to_text().into_bytes();
        return Ok((c, text));
    };
    let bytes = read(path)?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| Failure {
        code: EXIT_SCHEMA,
        message: format!("{}: config is not UTF-8", path.display()),
        ..Default::default()
    })?;
    let c = Config::parse(&text).map_err(|e| Failure {
        code: exit_code(&e),
        message: format!("{}: {e}", path.display()),
        ..Default::default()
    })?;
    Ok((c, bytes))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

/// Inputs and outputs of one run. Re-running with an identical manifest
/// reproduces every output except wallclock fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub dataset_path: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub ablate_cf: bool,
    /// sha256 over length-prefixed input blobs, as git hashes objects.
    pub input_hash: String,
}

/// Hash of named blobs, each framed as `name <len>\0<bytes>`.
pub fn content_hash(blobs: &[(&str, &[u8])]) -> String {
    let mut buf = Vec::new();
    for (name, bytes) in blobs {
        buf.extend_from_slice(format!("{name} {}\0", bytes.len()).as_bytes());
        buf.extend_from_slice(bytes);
    }
    sha256_hex(&buf)
}

fn dataset_id(dir: &Path) -> Result<(String, Vec<u8>), Failure> {
    let bytes = read(&dir.join(MANIFEST_FILE))?;
    Ok((sha256_hex(&bytes), bytes))
}

fn check_world(config: &Config, world: &World, data: &Path) -> Result<(), Failure> {
    if config.world != *world.config() {
        return Err(Failure {
            code: EXIT_SCHEMA,
            message: format!(
                "dataset {} was generated with a different world config than the one supplied \
                 (vocabulary, sizes or rendering keys differ)",
                data.display()
            ),
            ..Default::default()
        });
    }
    Ok(())
}

pub fn gen_data(args: &GenDataArgs) -> CmdResult {
    let (config, _) = load_config(args.config.as_deref())?;
    let seed = args.seed.unwrap_or(config.seed);
    let world = World::new(config.world.clone(), seed)?;
    let data = world.generate(seed)?;
    let m = write_dataset(&args.out, &world, &data)?;
    Ok(format!(
        "wrote {} ({} train, {} val, {} test videos, seed {seed})\n",
        args.out.display(),
        m.train.records,
        m.val.records,
        m.test.records
    ))
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let (mut config, config_bytes) = load_config(args.config.as_deref())?;
    config.train.ablate_cf |= args.ablate_cf;
    config.validate()?;
    let (world, data) = read_dataset(&args.data)?;
    check_world(&config, &world, &args.data)?;
    let (dataset, manifest_bytes) = dataset_id(&args.data)?;
    create_dir(&args.out)?;

    let flag = [u8::from(config.train.ablate_cf)];
    let run = RunManifest {
        command: "train".into(),
        config_path: args.config.clone(),
        dataset_path: args.data.clone(),
        output_dir: args.out.clone(),
        seed: config.seed,
        ablate_cf: config.train.ablate_cf,
        input_hash: content_hash(&[
            ("config", &config_bytes),
            ("dataset", &manifest_bytes),
            ("ablate_cf", &flag),
        ]),
    };
    let run_json = serde_json::to_string_pretty(&run).map_err(|e| Failure {
        code: EXIT_INTERNAL,
        message: e.to_string(),
        ..Default::default()
    })?;
    write(&args.out.join(RUN_MANIFEST_FILE), format!("{run_json}\n").as_bytes())?;

    let mut t = Trainer::new(config.clone(), &data.train)?;
    let outcome = t.run();
    // The log is written even on divergence so the failing step can be inspected.
    let log = trainer::log_to_jsonl(&config, t.log())?;
    write(&args.out.join(RUN_LOG_FILE), log.as_bytes())?;
    outcome?;

    let ckpt_path = args.out.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt_path, &t.checkpoint())?;
    let ids = ReportIds {
        dataset,
        model: sha256_hex(&read(&ckpt_path)?),
    };
    let report = eval::evaluate(
        &config,
        &world,
        t.model(),
        t.text_table(),
        &data.train,
        &data.val,
        &data.val,
        &ids,
    )?;
    write(&args.out.join(VAL_REPORT_FILE), report.to_text().as_bytes())?;
    let c = t.counters();
    Ok(format!(
        "trained {} child + {} parent steps ({} clipped); wrote {}\n{}",
        c.child_steps,
        c.parent_steps,
        c.clip_events,
        args.out.display(),
        report.to_text()
    ))
}

pub fn format_suite(r: &SuiteReport) -> String {
    let mut s = String::new();
    for c in &r.components {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        s.push_str(&format!(
            "{:<11} max_rel_error {:.6e}  worst_seed {:>3}  {verdict}\n",
            c.name, c.max_rel_error, c.worst_seed
        ));
    }
    s.push_str(&format!("tolerance {:.1e}, {:.2} s\n", checks::TOLERANCE, r.seconds));
    s
}

pub fn gradcheck(args: &GradcheckArgs) -> CmdResult {
    let (config, _) = load_config(args.config.as_deref())?;
    config.validate()?;
    let fault = match &args.inject_fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Failure {
            code: EXIT_SCHEMA,
            message: format!("unknown op `{name}` for --inject-fault"),
            ..Default::default()
        })?),
    };
    if args.seeds == 0 {
        return Err(Failure {
            code: EXIT_SCHEMA,
            message: "--seeds must be at least 1".into(),
            ..Default::default()
        });
    }
    let report = checks::run_suite(&config, args.seed.unwrap_or(config.seed), args.seeds, fault)?;
    let mut text = format_suite(&report);
    let failing = report.failing();
    if failing.is_empty() {
        if let Some(op) = fault {
            text.push_str(&format!(
                "note: the corrupted `{}` rule is not reached by any checked component\n",
                op.name()
            ));
        }
        return Ok(text);
    }
    let cause = fault
        .map(|op| format!(" (backward rule of `{}` was corrupted)", op.name()))
        .unwrap_or_default();
    Err(Failure {
        code: EXIT_GRADCHECK,
        message: format!("gradcheck failed: {}{cause}", failing.join(", ")),
        output: text,
    })
}

pub fn evaluate(args: &EvalArgs) -> CmdResult {
    let ckpt_bytes = read(&args.checkpoint)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let (world, data) = read_dataset(&args.data)?;
    check_world(&ckpt.config, &world, &args.data)?;
    let (dataset, _) = dataset_id(&args.data)?;
    let text = trainer::text_table(&ckpt.config)?;
    let split = match args.split {
        EvalSplit::Val => &data.val,
        EvalSplit::Test => &data.test,
    };
    let ids = ReportIds {
        dataset,
        model: sha256_hex(&ckpt_bytes),
    };
    let report = eval::evaluate(
        &ckpt.config,
        &world,
        &ckpt.model,
        &text,
        &data.train,
        &data.val,
        split,
        &ids,
    )?;
    let body = report.to_text();
    write(&args.out, body.as_bytes())?;
    Ok(body)
}

fn read_report(path: &Path) -> Result<MetricReport, Failure> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Failure {
        code: EXIT_SCHEMA,
        message: format!("{}: report is not UTF-8", path.display()),
        ..Default::default()
    })?;
    MetricReport::parse(&text).map_err(|e| Failure {
        code: exit_code(&e),
        message: format!("{}: {e}", path.display()),
        ..Default::default()
    })
}

pub fn compare(args: &CompareArgs) -> CmdResult {
    let a = read_report(&args.report_a)?;
    let b = read_report(&args.report_b)?;
    let deltas = eval::compare(&a, &b)?;
    Ok(eval::delta_table(&deltas))
}

/// Runs one command, returning its stdout text or a failure.
pub fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Eval(a) => evaluate(a),
        Command::Compare(a) => compare(a),
    }
}
