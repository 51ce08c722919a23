use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use procshift::eval::MetricReport;
use tempfile::TempDir;

const SMOKE: &str = "\
seed = 3
n_train = 24
n_val = 12
n_test = 12
child_steps_total = 20
probe_steps = 100
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_procshift"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn procshift")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Fixture {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("smoke.conf"), SMOKE).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("smoke.conf")
    }

    fn gen(&self, out: &str) -> PathBuf {
        let d = self.path(out);
        let o = run(&["gen-data", "--config", s(&self.config()), "--out", s(&d)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        d
    }

    fn train(&self, data: &Path, out: &str, extra: &[&str]) -> PathBuf {
        let d = self.path(out);
        let cfg = self.config();
        let mut args = vec!["train", "--config", s(&cfg), "--data", s(data), "--out", s(&d)];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        d
    }
}

/// Log lines with the wallclock field removed.
fn log_without_wallclock(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wallclock");
            v
        })
        .collect()
}

#[test]
fn gen_data_writes_splits_and_is_deterministic() {
    let f = Fixture::new();
    let a = f.gen("a");
    let b = f.gen("b");
    for file in ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"] {
        let x = fs::read(a.join(file)).unwrap();
        assert!(!x.is_empty(), "{file}");
        assert_eq!(x, fs::read(b.join(file)).unwrap(), "{file} differs between runs");
    }
    let c = f.path("c");
    let o = run(&["gen-data", "--config", s(&f.config()), "--out", s(&c), "--seed", "4"]);
    assert_eq!(code(&o), 0);
    assert_ne!(
        fs::read(a.join("train.jsonl")).unwrap(),
        fs::read(c.join("train.jsonl")).unwrap()
    );
}

#[test]
fn gen_data_with_default_config() {
    let f = Fixture::new();
    let d = f.path("default");
    let o = run(&["gen-data", "--out", s(&d)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for file in ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"] {
        assert!(d.join(file).is_file(), "{file}");
    }
}

#[test]
fn malformed_config_exits_2_with_line_and_field() {
    let f = Fixture::new();
    let bad = f.path("bad.conf");
    fs::write(&bad, "n_train = 24\nnoise_sigma = loud\n").unwrap();
    let o = run(&["gen-data", "--config", s(&bad), "--out", s(&f.path("x"))]);
    assert_eq!(code(&o), 2);
    let e = stderr(&o);
    assert!(e.contains("line 2") && e.contains("noise_sigma"), "{e}");
}

#[test]
fn missing_config_exits_3() {
    let f = Fixture::new();
    let o = run(&[
        "gen-data",
        "--config",
        s(&f.path("nope.conf")),
        "--out",
        s(&f.path("x")),
    ]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("nope.conf"));
}

#[test]
fn unwritable_output_exits_3() {
    let f = Fixture::new();
    let file = f.path("file");
    fs::write(&file, "x").unwrap();
    let o = run(&["gen-data", "--config", s(&f.config()), "--out", s(&file.join("sub"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn train_smoke_is_fast_and_reproducible() {
    let f = Fixture::new();
    let data = f.gen("data");
    let t = Instant::now();
    let a = f.train(&data, "run_a", &[]);
    let secs = t.elapsed().as_secs_f64();
    assert!(secs < 10.0, "smoke training took {secs:.1} s");
    let b = f.train(&data, "run_b", &[]);
    for file in ["checkpoint.bin", "run_log.jsonl", "val_report.txt", "run_manifest.json"] {
        assert!(a.join(file).is_file(), "{file}");
    }
    assert_eq!(
        fs::read(a.join("checkpoint.bin")).unwrap(),
        fs::read(b.join("checkpoint.bin")).unwrap()
    );
    assert_eq!(
        log_without_wallclock(&a.join("run_log.jsonl")),
        log_without_wallclock(&b.join("run_log.jsonl"))
    );
    assert_eq!(
        fs::read(a.join("val_report.txt")).unwrap(),
        fs::read(b.join("val_report.txt")).unwrap()
    );

    // Same output directory twice: every output identical apart from wallclock.
    let c1 = fs::read(a.join("run_manifest.json")).unwrap();
    f.train(&data, "run_a", &[]);
    assert_eq!(c1, fs::read(a.join("run_manifest.json")).unwrap());

    let report = MetricReport::parse(&fs::read_to_string(a.join("val_report.txt")).unwrap()).unwrap();
    assert!(report.has_standard_schema());
    let log = log_without_wallclock(&a.join("run_log.jsonl"));
    // Header plus 20 child and 4 parent records.
    assert_eq!(log.len(), 25);
    assert_eq!(log[0]["ablate_cf"], false);
}

#[test]
fn ablate_cf_is_recorded() {
    let f = Fixture::new();
    let data = f.gen("data");
    let a = f.train(&data, "full", &[]);
    let b = f.train(&data, "ablated", &["--ablate-cf"]);
    let log = log_without_wallclock(&b.join("run_log.jsonl"));
    assert_eq!(log[0]["ablate_cf"], true);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(b.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["ablate_cf"], true);
    let full: serde_json::Value = serde_json::from_slice(&fs::read(a.join("run_manifest.json")).unwrap()).unwrap();
    assert_ne!(manifest["input_hash"], full["input_hash"]);
    assert_ne!(
        fs::read(a.join("checkpoint.bin")).unwrap(),
        fs::read(b.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn train_rejects_mismatched_world() {
    let f = Fixture::new();
    let data = f.gen("data");
    let other = f.path("other.conf");
    fs::write(&other, SMOKE.replace("n_train = 24", "n_train = 30")).unwrap();
    let o = run(&[
        "train",
        "--config",
        s(&other),
        "--data",
        s(&data),
        "--out",
        s(&f.path("r")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn divergence_exits_4_naming_the_term() {
    let f = Fixture::new();
    let cfg = f.path("hot.conf");
    fs::write(&cfg, format!("{SMOKE}lr = 1e300\n")).unwrap();
    let data = f.gen("data");
    let out = f.path("r");
    let o = run(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("term L_"), "{}", stderr(&o));
    assert!(out.join("run_log.jsonl").is_file());
    assert!(!out.join("checkpoint.bin").exists());
}

#[test]
fn gradcheck_passes_with_one_line_per_component() {
    let o = run(&["gradcheck", "--seed", "1", "--seeds", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    for c in procshift::checks::COMPONENTS {
        let lines: Vec<&str> = out.lines().filter(|l| l.split_whitespace().next() == Some(c)).collect();
        assert_eq!(lines.len(), 1, "{c}: {out}");
        let err = lines[0].split_whitespace().nth(2).unwrap();
        assert!(err.contains('e'), "not scientific: {err}");
        assert!(err.parse::<f64>().unwrap() < 1e-4);
    }
}

#[test]
fn gradcheck_fault_exits_5_naming_the_op() {
    let o = run(&["gradcheck", "--seeds", "2", "--inject-fault", "log_sum_exp"]);
    assert_eq!(code(&o), 5);
    let e = stderr(&o);
    assert!(e.contains("`log_sum_exp`") && e.contains("L_"), "{e}");
    assert!(stdout(&o).contains("FAIL"));

    let o = run(&["gradcheck", "--seeds", "2", "--inject-fault", "no_such_op"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_and_compare() {
    let f = Fixture::new();
    let data = f.gen("data");
    let run_dir = f.train(&data, "run", &[]);
    let ckpt = run_dir.join("checkpoint.bin");
    let report = f.path("test_report.txt");
    let o = run(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = MetricReport::parse(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r.has_standard_schema(), "{r:?}");
    assert_eq!(
        r.meta["model"],
        procshift::world::io::sha256_hex(&fs::read(&ckpt).unwrap())
    );

    // Scoring the val split reproduces the report written by train.
    let val = f.path("val_report.txt");
    let o = run(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&val),
        "--split",
        "val",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(&val).unwrap(),
        fs::read(run_dir.join("val_report.txt")).unwrap()
    );

    let o = run(&["compare", s(&report), s(&report)]);
    assert_eq!(code(&o), 0);
    let table = stdout(&o);
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), procshift::eval::REPORT_KEYS.len());
    assert!(rows.iter().all(|l| l.trim_end().ends_with("0.000000")), "{table}");

    let partial = f.path("partial.txt");
    let text: String = fs::read_to_string(&report)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with("edit"))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&partial, text).unwrap();
    let o = run(&["compare", s(&report), s(&partial)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("edit"), "{}", stderr(&o));
}

#[test]
fn eval_missing_or_bad_checkpoint() {
    let f = Fixture::new();
    let data = f.gen("data");
    let missing = f.path("missing.bin");
    let o = run(&[
        "eval",
        "--checkpoint",
        s(&missing),
        "--data",
        s(&data),
        "--out",
        s(&f.path("r.txt")),
    ]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));

    let junk = f.path("junk.bin");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let o = run(&[
        "eval",
        "--checkpoint",
        s(&junk),
        "--data",
        s(&data),
        "--out",
        s(&f.path("r.txt")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn compare_rejects_garbage() {
    let f = Fixture::new();
    let g = f.path("g.txt");
    fs::write(&g, "edit = lots\n").unwrap();
    let o = run(&["compare", s(&g), s(&g)]);
    assert_eq!(code(&o), 2);
    let o = run(&["compare", s(&f.path("none.txt")), s(&g)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn help_documents_flags_and_schema() {
    let top = stdout(&run(&["--help"]));
    for key in procshift::eval::REPORT_KEYS {
        assert!(top.contains(key), "{key}");
    }
    for (cmd, flags) in [
        ("gen-data", &["--config", "--out", "--seed"][..]),
        ("train", &["--config", "--data", "--out", "--ablate-cf"]),
        ("gradcheck", &["--config", "--seed", "--seeds"]),
        ("eval", &["--checkpoint", "--data", "--out", "--split"]),
    ] {
        let h = stdout(&run(&[cmd, "--help"]));
        for flag in flags {
            assert!(h.contains(flag), "{cmd} {flag}");
        }
    }
    assert!(!stdout(&run(&["gradcheck", "--help"])).contains("inject"));
}
