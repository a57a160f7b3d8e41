//! Task streams and the per-task solve-evolve loop: stream loading and
//! shuffling, run configuration, synthetic stream generators, the runner,
//! and the append-only event log.

mod events;
pub mod gen;
mod runner;

pub use events::{
    raw_event_lines, read_events, EventBody, EventLogReader, EventLogWriter, EventSink, LogHeader,
    MemoryLog, RunEvent, SCHEMA_VERSION,
};
pub use runner::{build_backbone, build_embedder, new_pool_from, run_stream, RunSummary};

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{
    Embedder, GraderBinding, GraderKind, HttpConfig, SimConfig, TokenBudgets,
};
use crate::codream::CoDreamParams;
use crate::evolve::EvolutionParams;
use crate::lifecycle::LifecycleParams;
use crate::select::SelectionWeights;
use crate::state::NicheLabel;
use crate::{Error, Result};

/// One stream item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub niche: NicheLabel,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
    pub grader: GraderKind,
    /// Filled at load time from the prompt; never serialized.
    #[serde(skip)]
    pub embedding: Vec<f64>,
}

/// Which backbone the run talks to.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BackboneMode {
    Sim {
        #[serde(default)]
        config: SimConfig,
    },
    Http {
        config: HttpConfig,
    },
}

impl BackboneMode {
    pub fn is_sim(&self) -> bool {
        matches!(self, BackboneMode::Sim { .. })
    }
}

/// Embedding provider selection.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EmbedderMode {
    #[default]
    Hashing,
    Remote {
        config: crate::backends::RemoteEmbedderConfig,
    },
}

/// Independent ablation switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    #[serde(default)]
    pub no_codream: bool,
    #[serde(default)]
    pub symmetric_broadcast: bool,
    #[serde(default)]
    pub force_voting: bool,
    #[serde(default)]
    pub random_team: bool,
}

fn default_pool_size() -> usize {
    20
}
fn default_seed() -> u64 {
    42
}
fn default_persona() -> String {
    "a careful, helpful problem-solving assistant".to_string()
}
fn default_retrieval_k() -> usize {
    5
}
fn default_backbone() -> BackboneMode {
    BackboneMode::Sim { config: SimConfig::default() }
}

/// Full run configuration. Every field has a default, so partial config
/// files are valid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_persona")]
    pub persona: String,
    #[serde(default)]
    pub evolution: EvolutionParams,
    #[serde(default)]
    pub weights: SelectionWeights,
    #[serde(default)]
    pub codream: CoDreamParams,
    #[serde(default)]
    pub lifecycle: LifecycleParams,
    #[serde(default = "default_backbone")]
    pub backbone: BackboneMode,
    #[serde(default)]
    pub embedder: EmbedderMode,
    #[serde(default)]
    pub budgets: TokenBudgets,
    /// Top-k for leadership-bank retrieval.
    #[serde(default = "default_retrieval_k")]
    pub retrieval_k: usize,
    #[serde(default)]
    pub ablation: AblationFlags,
    /// Per-niche grader overrides (e.g. external commands); tasks fall back
    /// to their declared grader kind.
    #[serde(default)]
    pub graders: std::collections::BTreeMap<String, GraderBinding>,
    /// Directory of prompt-template overrides.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_dir: Option<std::path::PathBuf>,
    /// Sampling temperature passed to the backbone.
    #[serde(default)]
    pub temperature: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pool_size: default_pool_size(),
            seed: default_seed(),
            persona: default_persona(),
            evolution: EvolutionParams::default(),
            weights: SelectionWeights::default(),
            codream: CoDreamParams::default(),
            lifecycle: LifecycleParams::default(),
            backbone: default_backbone(),
            embedder: EmbedderMode::default(),
            budgets: TokenBudgets::default(),
            retrieval_k: default_retrieval_k(),
            ablation: AblationFlags::default(),
            graders: std::collections::BTreeMap::new(),
            prompt_dir: None,
            temperature: 0.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_size < 3 {
            return Err(Error::Config(format!(
                "pool_size must be at least 3, got {}",
                self.pool_size
            )));
        }
        self.evolution.validate()?;
        self.weights.validate()?;
        self.codream.validate()?;
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config file {path:?}: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Grader binding for a task: the per-niche override when present,
    /// otherwise the task's declared kind.
    pub fn grader_for(&self, task: &TaskRecord) -> GraderBinding {
        self.graders
            .get(task.niche.as_str())
            .cloned()
            .unwrap_or_else(|| GraderBinding::from(task.grader))
    }
}

/// Read a line-delimited stream file, validate it, and embed prompts.
pub fn load_stream(path: &Path, embedder: &dyn Embedder) -> Result<Vec<TaskRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut tasks = Vec::new();
    let mut seen_ids: BTreeSet<String> = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut task: TaskRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Load { line: line_no, msg: format!("malformed task record: {e}") })?;
        if task.id.is_empty() {
            return Err(Error::Load { line: line_no, msg: "task id must be non-empty".into() });
        }
        if task.niche.as_str().is_empty() {
            return Err(Error::Load { line: line_no, msg: "niche must be non-empty".into() });
        }
        if !seen_ids.insert(task.id.clone()) {
            return Err(Error::Load {
                line: line_no,
                msg: format!("duplicate task id {:?}", task.id),
            });
        }
        let needs_gold = matches!(
            task.grader,
            GraderKind::ExactMatch | GraderKind::F1 | GraderKind::SimOracle
        );
        if needs_gold && task.gold.is_none() {
            return Err(Error::Load {
                line: line_no,
                msg: format!("task {:?} grader needs a gold answer", task.id),
            });
        }
        task.embedding = embedder.embed(&task.prompt)?;
        tasks.push(task);
    }
    Ok(tasks)
}

/// Write a stream file (one JSON record per line, embeddings omitted).
pub fn write_stream(path: &Path, tasks: &[TaskRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for task in tasks {
        serde_json::to_writer(&mut out, task)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Fill embeddings on in-memory tasks (the loader does this for files).
pub fn embed_tasks(tasks: &mut [TaskRecord], embedder: &dyn Embedder) -> Result<()> {
    for task in tasks {
        task.embedding = embedder.embed(&task.prompt)?;
    }
    Ok(())
}

/// Deterministic Fisher-Yates permutation of a task stream.
pub fn shuffle_stream(tasks: &[TaskRecord], seed: u64) -> Vec<TaskRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = tasks.to_vec();
    for i in (1..out.len()).rev() {
        let j = rng.gen_range(0..=i);
        out.swap(i, j);
    }
    out
}
