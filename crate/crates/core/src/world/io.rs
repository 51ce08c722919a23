//! Line-delimited dataset files.
//!
//! One record per line:
//!
//! ```text
//! {"activity": {"id", "steps": [{"action", "before_state", "after_state", "sc_cf_states"}],
//!               "summary_tokens", "render_seed"},
//!  "clips": [[[f64; input_dim]; K]; n_steps],
//!  "narrations": [[token]; n_steps],
//!  "cfs": [{"kind": "K_CF" | "M_CF" | "SC_CF", "tokens", "source_activity"}],
//!  "labels": {"steps": [action per frame], "errors": [bool per frame]}}
//! ```
//!
//! Floats are written with 17 significant digits, which reads back to the
//! same bits. The directory holds `train.jsonl`, `val.jsonl`, `test.jsonl` and
//! `manifest.json` with the world config, the seed and a SHA-256 per split.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

use super::{
    ActivitySpec, CounterfactualRecord, Dataset, Split, StepSpec, VideoRecord, VideoSample, World, WorldConfig,
};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "procshift-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// A float serialized with 17 significant digits.
struct F17(f64);

impl Serialize for F17 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let raw = RawValue::from_string(format!("{:.16e}", self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

#[derive(Serialize)]
struct ActivityOut<'a> {
    id: u64,
    steps: &'a [StepSpec],
    summary_tokens: &'a [usize],
    render_seed: u64,
}

#[derive(Serialize)]
struct LabelsOut<'a> {
    steps: &'a [usize],
    errors: &'a [bool],
}

#[derive(Serialize)]
struct RecordOut<'a> {
    activity: ActivityOut<'a>,
    clips: Vec<Vec<Vec<F17>>>,
    narrations: &'a [Vec<usize>],
    cfs: &'a [CounterfactualRecord],
    labels: LabelsOut<'a>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ActivityIn {
    id: u64,
    steps: Vec<StepSpec>,
    summary_tokens: Vec<usize>,
    render_seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelsIn {
    steps: Vec<usize>,
    errors: Vec<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordIn {
    activity: ActivityIn,
    clips: Vec<Vec<Vec<f64>>>,
    narrations: Vec<Vec<usize>>,
    cfs: Vec<CounterfactualRecord>,
    labels: LabelsIn,
}

pub fn record_to_line(r: &VideoRecord) -> Result<String> {
    let out = RecordOut {
        activity: ActivityOut {
            id: r.activity.id,
            steps: &r.activity.steps,
            summary_tokens: &r.activity.summary_tokens,
            render_seed: r.video.seed,
        },
        clips: r
            .video
            .clips
            .iter()
            .map(|c| c.iter().map(|f| f.iter().map(|&x| F17(x)).collect()).collect())
            .collect(),
        narrations: &r.video.narration_tokens,
        cfs: &r.cfs,
        labels: LabelsOut {
            steps: &r.video.step_labels,
            errors: &r.video.error_flags,
        },
    };
    serde_json::to_string(&out).map_err(|e| Error::Schema(e.to_string()))
}

/// Parses one record and checks it against `config`.
pub fn record_from_line(line: &str, config: &WorldConfig) -> Result<VideoRecord> {
    let r: RecordIn = serde_json::from_str(line).map_err(|e| Error::Schema(e.to_string()))?;
    let n = r.activity.steps.len();
    let k = config.frames_per_clip;
    let bad = |m: String| Err(Error::Schema(format!("activity {}: {m}", r.activity.id)));
    if r.activity.summary_tokens.len() != n || r.clips.len() != n || r.narrations.len() != n {
        return bad("steps, summary, clips and narrations disagree in length".into());
    }
    if r.labels.steps.len() != n * k || r.labels.errors.len() != n * k {
        return bad(format!("expected {} frame labels", n * k));
    }
    for clip in &r.clips {
        if clip.len() != k || clip.iter().any(|f| f.len() != config.input_dim) {
            return bad(format!("clips must hold {k} frames of dimension {}", config.input_dim));
        }
        if clip.iter().flatten().any(|x| !x.is_finite()) {
            return bad("non-finite frame value".into());
        }
    }
    let vocab = config.vocab_size();
    let tokens = r
        .activity
        .summary_tokens
        .iter()
        .chain(r.narrations.iter().flatten())
        .chain(r.cfs.iter().flat_map(|c| c.tokens.iter()));
    if tokens.clone().any(|&t| t >= vocab) {
        return bad(format!("token outside vocabulary of {vocab}"));
    }
    for s in &r.activity.steps {
        if s.action >= config.n_actions
            || s.before_state >= config.n_states
            || s.after_state >= config.n_states
            || s.sc_cf_states.iter().any(|&x| x >= config.n_states)
        {
            return bad("step refers to an unknown action or state".into());
        }
    }
    Ok(VideoRecord {
        activity: ActivitySpec {
            id: r.activity.id,
            steps: r.activity.steps,
            summary_tokens: r.activity.summary_tokens,
        },
        video: VideoSample {
            clips: r.clips,
            narration_tokens: r.narrations,
            step_labels: r.labels.steps,
            error_flags: r.labels.errors,
            seed: r.activity.render_seed,
        },
        cfs: r.cfs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub file: String,
    pub records: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub world: WorldConfig,
    pub train: SplitEntry,
    pub val: SplitEntry,
    pub test: SplitEntry,
}

impl DatasetManifest {
    pub fn entry(&self, split: Split) -> &SplitEntry {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn split_bytes(records: &[VideoRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in records {
        buf.extend_from_slice(record_to_line(r)?.as_bytes());
        buf.push(b'\n');
    }
    Ok(buf)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Writes every split and the manifest into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, world: &World, data: &Dataset) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(3);
    for split in Split::ALL {
        let bytes = split_bytes(data.split(split))?;
        let file = format!("{}.jsonl", split.name());
        write_file(&dir.join(&file), &bytes)?;
        entries.push(SplitEntry {
            file,
            records: data.split(split).len(),
            sha256: sha256_hex(&bytes),
        });
    }
    let mut it = entries.into_iter();
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        seed: world.seed(),
        world: world.config().clone(),
        train: it.next().unwrap_or_else(|| unreachable!()),
        val: it.next().unwrap_or_else(|| unreachable!()),
        test: it.next().unwrap_or_else(|| unreachable!()),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Schema(e.to_string()))?;
    write_file(&dir.join(MANIFEST_FILE), format!("{text}\n").as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    if m.format != DATASET_FORMAT {
        return Err(Error::Schema(format!(
            "{}: unknown format {:?}",
            path.display(),
            m.format
        )));
    }
    if m.version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            found: m.version,
            expected: DATASET_VERSION,
        });
    }
    m.world.validate()?;
    Ok(m)
}

/// Reads one split, verifying its checksum against the manifest.
pub fn read_split(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<VideoRecord>> {
    let entry = manifest.entry(split);
    let path: PathBuf = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let digest = sha256_hex(&bytes);
    if digest != entry.sha256 {
        return Err(Error::Corrupt {
            path,
            detail: format!("sha256 {digest} does not match manifest {}", entry.sha256),
        });
    }
    let mut out = Vec::with_capacity(entry.records);
    for (i, line) in BufReader::new(bytes.as_slice()).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = record_from_line(&line, &manifest.world)
            .map_err(|e| Error::Schema(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    if out.len() != entry.records {
        return Err(Error::Corrupt {
            path,
            detail: format!("{} records, manifest says {}", out.len(), entry.records),
        });
    }
    Ok(out)
}

/// Reads the manifest, rebuilds the world and loads all splits.
pub fn read_dataset(dir: &Path) -> Result<(World, Dataset)> {
    let manifest = read_manifest(dir)?;
    let world = World::new(manifest.world.clone(), manifest.seed)?;
    let data = Dataset {
        train: read_split(dir, &manifest, Split::Train)?,
        val: read_split(dir, &manifest, Split::Val)?,
        test: read_split(dir, &manifest, Split::Test)?,
    };
    Ok((world, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (World, Dataset) {
        let cfg = WorldConfig {
            n_train: 6,
            n_val: 2,
            n_test: 2,
            ..WorldConfig::default()
        };
        let w = World::new(cfg, 3).unwrap();
        let d = w.generate(3).unwrap();
        (w, d)
    }

    #[test]
    fn record_round_trip_is_bit_exact() {
        let (w, d) = small();
        for r in &d.train {
            let line = record_to_line(r).unwrap();
            let back = record_from_line(&line, w.config()).unwrap();
            assert_eq!(&back, r);
            for (a, b) in back.video.frames().zip(r.video.frames()) {
                for (x, y) in a.iter().zip(b) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn awkward_floats_round_trip() {
        let (w, d) = small();
        let mut r = d.train[0].clone();
        let specials = [0.1, -0.0, 1e-300, f64::MIN_POSITIVE, 5e-324, 1.0 / 3.0, -123456.789e10];
        for (i, x) in specials.iter().enumerate() {
            r.video.clips[0][0][i] = *x;
        }
        let back = record_from_line(&record_to_line(&r).unwrap(), w.config()).unwrap();
        for (i, x) in specials.iter().enumerate() {
            assert_eq!(back.video.clips[0][0][i].to_bits(), x.to_bits());
        }
    }

    #[test]
    fn schema_violations_are_reported() {
        let (w, d) = small();
        let line = record_to_line(&d.train[0]).unwrap();
        assert!(matches!(record_from_line("{}", w.config()), Err(Error::Schema(_))));
        let extra = line.replacen("{\"activity\"", "{\"bogus\":1,\"activity\"", 1);
        assert!(record_from_line(&extra, w.config()).is_err());
        let narrow = WorldConfig {
            input_dim: 40,
            ..w.config().clone()
        };
        assert!(record_from_line(&line, &narrow).is_err());
    }

    #[test]
    fn dataset_round_trip_and_checksum() {
        let (w, d) = small();
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), &w, &d).unwrap();
        assert_eq!(m.train.records, 6);
        let (w2, d2) = read_dataset(dir.path()).unwrap();
        assert_eq!(w2, w);
        assert_eq!(d2, d);
        let path = dir.path().join("val.jsonl");
        let mut bytes = fs::read(&path).unwrap();
        bytes[10] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Corrupt { .. })));
    }
}
