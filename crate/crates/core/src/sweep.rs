//! One-axis-at-a-time sweeps over the default configuration, with an
//! append-only result store that makes sweeps restartable.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::save_checkpoint;
use crate::corpus::load_corpus;
use crate::embeddings::SgnsConfig;
use crate::error::{Error, Result};
use crate::eval::EvaluationReport;
use crate::pipeline::{run_experiment, EmbeddingSource, RunConfig};

/// The swept hyperparameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Recompute,
    Reweight,
    DeltaRatio,
    WindowCount,
    VocabSize,
    TopicCount,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Axis {
    pub const ALL: [Axis; 6] = [
        Axis::Recompute,
        Axis::Reweight,
        Axis::DeltaRatio,
        Axis::WindowCount,
        Axis::VocabSize,
        Axis::TopicCount,
    ];

    /// The default grid for the axis.
    pub fn grid(self) -> Vec<AxisValue> {
        match self {
            Axis::Recompute | Axis::Reweight => vec![AxisValue::Bool(false), AxisValue::Bool(true)],
            Axis::DeltaRatio => [1.0 / 9.0, 1.0 / 3.0, 1.0, 3.0, 9.0].into_iter().map(AxisValue::Real).collect(),
            Axis::WindowCount => [2, 4, 8, 16, 32].into_iter().map(AxisValue::Int).collect(),
            Axis::VocabSize => [5000, 20000, 80000].into_iter().map(AxisValue::Int).collect(),
            Axis::TopicCount => [2, 5, 10, 20, 40, 80, 160].into_iter().map(AxisValue::Int).collect(),
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Axis::Recompute => "Recompute",
            Axis::Reweight => "Reweight",
            Axis::DeltaRatio => "Delta ratio",
            Axis::WindowCount => "Window count",
            Axis::VocabSize => "Vocab size",
            Axis::TopicCount => "Topic count",
        }
    }

    /// The name used in plan files.
    pub fn name(self) -> &'static str {
        match self {
            Axis::Recompute => "recompute",
            Axis::Reweight => "reweight",
            Axis::DeltaRatio => "delta_ratio",
            Axis::WindowCount => "window_count",
            Axis::VocabSize => "vocab_size",
            Axis::TopicCount => "topic_count",
        }
    }

    fn check(self, value: &AxisValue) -> Result<()> {
        let ok = match (self, value) {
            (Axis::Recompute | Axis::Reweight, AxisValue::Bool(_)) => true,
            (Axis::DeltaRatio, v) => v.as_f64().is_some_and(|r| r > 0.0 && r.is_finite()),
            (Axis::WindowCount, AxisValue::Int(n)) => *n >= 2,
            (Axis::VocabSize, AxisValue::Int(n)) => *n >= 1,
            (Axis::TopicCount, AxisValue::Int(n)) => *n >= 2,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("{value} is not a valid {} value", self.title().to_lowercase())))
        }
    }

    /// Parses a column label or CLI value (`True`, `1/3`, `5000`, `0.5`).
    pub fn parse_value(self, label: &str) -> Result<AxisValue> {
        let label = label.trim();
        let bad = || Error::Parse(format!("cannot read {label:?} as a {} value", self.title().to_lowercase()));
        let value = match self {
            Axis::Recompute | Axis::Reweight => match label.to_ascii_lowercase().as_str() {
                "true" => AxisValue::Bool(true),
                "false" => AxisValue::Bool(false),
                _ => return Err(bad()),
            },
            Axis::DeltaRatio => {
                let r = match label.split_once('/') {
                    Some((n, d)) => {
                        let n: f64 = n.trim().parse().map_err(|_| bad())?;
                        let d: f64 = d.trim().parse().map_err(|_| bad())?;
                        n / d
                    }
                    None => label.parse().map_err(|_| bad())?,
                };
                AxisValue::Real(r)
            }
            Axis::WindowCount | Axis::VocabSize | Axis::TopicCount => AxisValue::Int(label.parse().map_err(|_| bad())?),
        };
        self.check(&value)?;
        Ok(value)
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &AxisValue) -> Result<RunConfig> {
        self.check(value)?;
        let mut cfg = base.clone();
        match (self, value) {
            (Axis::Recompute, AxisValue::Bool(b)) => cfg.recompute = *b,
            (Axis::Reweight, AxisValue::Bool(b)) => cfg.reweight = *b,
            (Axis::DeltaRatio, v) => cfg.delta_ratio = v.as_f64().expect("checked"),
            (Axis::WindowCount, AxisValue::Int(n)) => cfg.window_count = *n as usize,
            (Axis::VocabSize, AxisValue::Int(n)) => cfg.vocab_size = *n as usize,
            (Axis::TopicCount, AxisValue::Int(n)) => cfg.topic_count = *n as usize,
            _ => unreachable!("checked above"),
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValue {
    Bool(bool),
    Int(u64),
    Real(f64),
}

impl AxisValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            AxisValue::Bool(_) => None,
            AxisValue::Int(n) => Some(*n as f64),
            AxisValue::Real(r) => Some(*r),
        }
    }

    /// Sort key: `false < true`, numbers by value.
    fn order_key(&self) -> f64 {
        match self {
            AxisValue::Bool(b) => f64::from(u8::from(*b)),
            other => other.as_f64().expect("numeric"),
        }
    }
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisValue::Bool(true) => write!(f, "True"),
            AxisValue::Bool(false) => write!(f, "False"),
            AxisValue::Int(n) => write!(f, "{n}"),
            AxisValue::Real(r) => {
                // show the usual ratio grid as fractions
                for d in [9.0f64, 3.0] {
                    if (r * d - 1.0).abs() < 1e-9 {
                        return write!(f, "1/{d}");
                    }
                }
                if r.fract() == 0.0 {
                    write!(f, "{r:.0}")
                } else {
                    write!(f, "{r}")
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub id: String,
    pub path: PathBuf,
    /// Pretrained embeddings; trained with the plan's settings when absent.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_concurrency() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPlan {
    pub id: String,
    pub corpora: Vec<CorpusEntry>,
    pub axis: Axis,
    /// Defaults to the axis grid.
    #[serde(default)]
    pub values: Option<Vec<AxisValue>>,
    #[serde(default)]
    pub base: RunConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub embedding: SgnsConfig,
    #[serde(default = "default_concurrency")]
    pub max_concurrent: usize,
}

impl SweepPlan {
    pub fn values(&self) -> Vec<AxisValue> {
        self.values.clone().unwrap_or_else(|| self.axis.grid())
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidArgument("plan id must be nonempty".into()));
        }
        if self.corpora.is_empty() || self.seeds.is_empty() || self.values().is_empty() {
            return Err(Error::InvalidArgument("plan needs corpora, values and seeds".into()));
        }
        let mut ids = HashSet::new();
        for c in &self.corpora {
            if !ids.insert(&c.id) {
                return Err(Error::DuplicateId(c.id.clone()));
            }
        }
        if self.max_concurrent == 0 {
            return Err(Error::InvalidArgument("max_concurrent must be at least 1".into()));
        }
        let labels: HashSet<String> = self.values().iter().map(|v| v.to_string()).collect();
        if labels.len() != self.values().len() {
            return Err(Error::InvalidArgument("axis values must be distinct".into()));
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return Err(Error::InvalidArgument("seeds must be distinct".into()));
        }
        for v in self.values() {
            self.axis.apply(&self.base, &v)?.validate()?;
        }
        Ok(())
    }

    /// Reads a plan, resolving relative corpus and embedding paths against
    /// the plan file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut plan: SweepPlan = serde_json::from_str(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for c in &mut plan.corpora {
            if c.path.is_relative() {
                c.path = dir.join(&c.path);
            }
            if let Some(e) = c.embeddings.as_mut().filter(|e| e.is_relative()) {
                *e = dir.join(&*e);
            }
        }
        plan.validate()?;
        Ok(plan)
    }

    /// One job per (corpus, value, seed), in that nesting order.
    pub fn jobs(&self) -> Result<Vec<Job>> {
        self.validate()?;
        let mut out = Vec::new();
        for corpus in &self.corpora {
            for value in self.values() {
                for &seed in &self.seeds {
                    let mut config = self.axis.apply(&self.base, &value)?;
                    config.seed = seed;
                    let embeddings = match &corpus.embeddings {
                        Some(p) => EmbeddingSource::File(p.clone()),
                        None => EmbeddingSource::Train(SgnsConfig { seed, ..self.embedding.clone() }),
                    };
                    let mut job = Job {
                        key: String::new(),
                        plan_id: self.id.clone(),
                        corpus: corpus.clone(),
                        axis: self.axis,
                        value,
                        seed,
                        config,
                        embeddings,
                    };
                    job.key = job.content_key();
                    out.push(job);
                }
            }
        }
        Ok(out)
    }
}

/// A single train-and-evaluate run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Job {
    pub key: String,
    pub plan_id: String,
    pub corpus: CorpusEntry,
    pub axis: Axis,
    pub value: AxisValue,
    pub seed: u64,
    pub config: RunConfig,
    pub embeddings: EmbeddingSource,
}

impl Job {
    fn content_key(&self) -> String {
        let content = serde_json::json!({
            "plan": self.plan_id,
            "corpus": self.corpus,
            "axis": self.axis,
            "value": self.value.to_string(),
            "seed": self.seed,
            "config": self.config,
            "embeddings": self.embeddings,
        });
        hex::encode(Sha256::digest(content.to_string().as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    pub key: String,
    pub plan_id: String,
    pub corpus: String,
    pub axis: Axis,
    pub value: AxisValue,
    pub seed: u64,
    #[serde(default)]
    pub report: Option<EvaluationReport>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub error: Option<String>,
}

impl ResultRecord {
    pub fn for_job(job: &Job, outcome: std::result::Result<JobOutput, String>) -> Self {
        let (report, checkpoint, error) = match outcome {
            Ok(out) => (Some(out.report), out.checkpoint, None),
            Err(e) => (None, None, Some(e)),
        };
        ResultRecord {
            key: job.key.clone(),
            plan_id: job.plan_id.clone(),
            corpus: job.corpus.id.clone(),
            axis: job.axis,
            value: job.value,
            seed: job.seed,
            report,
            checkpoint,
            error,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.report.is_some()
    }
}

pub const RESULTS_FILE: &str = "results.jsonl";

/// Append-only JSON-lines records, unique by job key.
#[derive(Debug, Default)]
pub struct ResultStore {
    path: Option<PathBuf>,
    records: Vec<ResultRecord>,
    keys: HashSet<String>,
}

impl ResultStore {
    pub fn in_memory() -> Self {
        ResultStore::default()
    }

    /// Opens `dir/results.jsonl` for appending, creating it if needed. A
    /// final line cut short by a crash is discarded.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESULTS_FILE);
        let mut store = ResultStore {
            path: Some(path.clone()),
            ..ResultStore::default()
        };
        if !path.exists() {
            return Ok(store);
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let complete = store.load_lines(&bytes, &path)?;
        if complete < bytes.len() {
            let f = OpenOptions::new().write(true).open(&path).map_err(|e| Error::io(&path, e))?;
            f.set_len(complete as u64).map_err(|e| Error::io(&path, e))?;
        }
        Ok(store)
    }

    /// Read-only view of a results file, or of `results.jsonl` in a directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path.push(RESULTS_FILE);
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut store = ResultStore::in_memory();
        store.load_lines(&bytes, &path)?;
        Ok(store)
    }

    /// Parses every newline-terminated line; returns the byte length they cover.
    fn load_lines(&mut self, bytes: &[u8], path: &Path) -> Result<usize> {
        let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        for (i, line) in BufReader::new(&bytes[..complete]).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ResultRecord =
                serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
            self.insert(rec)?;
        }
        Ok(complete)
    }

    fn insert(&mut self, rec: ResultRecord) -> Result<()> {
        if !self.keys.insert(rec.key.clone()) {
            return Err(Error::DuplicateId(rec.key));
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.keys.contains(key)
    }

    pub fn records(&self) -> &[ResultRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends and flushes one record.
    pub fn push(&mut self, rec: ResultRecord) -> Result<()> {
        if self.contains(&rec.key) {
            return Err(Error::DuplicateId(rec.key));
        }
        if let Some(path) = &self.path {
            let mut line = serde_json::to_string(&rec)?;
            line.push('\n');
            let mut f: File = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
            f.sync_data().map_err(|e| Error::io(path, e))?;
        }
        self.insert(rec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobOutput {
    pub report: EvaluationReport,
    pub checkpoint: Option<PathBuf>,
}

/// Executes one job. Implementations must be callable from several
/// threads at once.
pub trait JobRunner: Sync {
    fn run(&self, job: &Job) -> Result<JobOutput>;
}

/// Runs jobs inside the current process, optionally saving checkpoints to
/// `checkpoint_dir/<key>.json`.
#[derive(Clone, Debug, Default)]
pub struct InProcessRunner {
    pub checkpoint_dir: Option<PathBuf>,
}

pub fn execute_job(job: &Job, checkpoint_dir: Option<&Path>) -> Result<JobOutput> {
    let corpus = load_corpus(&job.corpus.path)?;
    let outcome = run_experiment(&corpus, &job.config, &job.embeddings)?;
    let checkpoint = match checkpoint_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(format!("{}.json", job.key));
            save_checkpoint(&outcome.checkpoint, &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(JobOutput {
        report: outcome.report,
        checkpoint,
    })
}

impl JobRunner for InProcessRunner {
    fn run(&self, job: &Job) -> Result<JobOutput> {
        execute_job(job, self.checkpoint_dir.as_deref())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SweepSummary {
    pub completed: usize,
    pub failed: usize,
    /// Jobs whose key was already in the store.
    pub skipped: usize,
}

/// Runs every job of `plan` not yet in `store`, at most `max_concurrent` at
/// a time. Workers only compute; this thread alone appends to the store.
pub fn run_sweep(plan: &SweepPlan, runner: &dyn JobRunner, store: &mut ResultStore) -> Result<SweepSummary> {
    let jobs = plan.jobs()?;
    let mut summary = SweepSummary::default();
    let pending: VecDeque<Job> = jobs
        .into_iter()
        .filter(|j| {
            let done = store.contains(&j.key);
            summary.skipped += usize::from(done);
            !done
        })
        .collect();
    if pending.is_empty() {
        return Ok(summary);
    }
    let workers = plan.max_concurrent.min(pending.len());
    let queue = Mutex::new(pending);
    let (tx, rx) = mpsc::channel::<ResultRecord>();
    let mut write_error = None;
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let queue = &queue;
            scope.spawn(move || loop {
                let Some(job) = queue.lock().expect("queue lock").pop_front() else { break };
                let outcome = runner.run(&job).map_err(|e| e.to_string());
                if tx.send(ResultRecord::for_job(&job, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for rec in rx {
            if rec.succeeded() {
                summary.completed += 1;
            } else {
                summary.failed += 1;
            }
            if let Err(e) = store.push(rec) {
                write_error.get_or_insert(e);
                // stop handing out work; in-flight jobs finish and are dropped
                queue.lock().expect("queue lock").clear();
            }
        }
    });
    match write_error {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

/// Mean score per (corpus, value label) over seeds, successful runs only.
pub fn scores_by_cell(records: &[ResultRecord]) -> HashMap<(Axis, String, String), Vec<f64>> {
    let mut out: HashMap<(Axis, String, String), Vec<f64>> = HashMap::new();
    for r in records {
        if let Some(rep) = &r.report {
            out.entry((r.axis, r.corpus.clone(), r.value.to_string())).or_default().push(rep.per_word_nll);
        }
    }
    out
}

pub(crate) fn sort_values(values: &mut Vec<AxisValue>) {
    values.sort_by(|a, b| a.order_key().total_cmp(&b.order_key()));
    values.dedup_by(|a, b| a.to_string() == b.to_string());
}
