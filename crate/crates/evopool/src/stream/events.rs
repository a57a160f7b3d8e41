//! Append-only run log: one JSON record per line behind a schema-versioned
//! header line. The reader tolerates a trailing partial line (crash tail) by
//! stopping before it.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codream::{PhaseTranscript, TriggerReason};
use crate::lifecycle::LifecycleKind;
use crate::state::{AgentId, InsightLevel, NicheLabel, StructureKind};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema_version: u32,
    pub pool_size: usize,
    pub seed: u64,
}

/// One append-only log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub task_index: u64,
    pub task_id: String,
    /// Intra-task sequence number.
    pub seq: u32,
    /// Pool RNG draw counter at emission time; monotone over the run.
    pub rng_cursor: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    TeamSelected {
        anchor: AgentId,
        complement: AgentId,
        scout: AgentId,
        niche: NicheLabel,
    },
    StructureChosen {
        structure: StructureKind,
        forced: bool,
        fallback: Option<String>,
        retrieved: u32,
    },
    MemberAnswer {
        agent: AgentId,
        role: String,
        answer: Option<String>,
    },
    OutcomeGraded {
        reward: f64,
        final_answer: String,
        disagreement: bool,
        structure: StructureKind,
        degraded: bool,
    },
    ReflectionStored {
        agent: AgentId,
        lesson_stored: bool,
        meta_stored: bool,
    },
    CodreamSession {
        reason: TriggerReason,
        candidates: u32,
        aborted: Option<String>,
        phases: Vec<PhaseTranscript>,
    },
    InsightRouted {
        giver: AgentId,
        level: InsightLevel,
        scope: Option<NicheLabel>,
        /// Gate statistic per roster agent at routing time, plus the median
        /// they were compared against; the audit trail for asymmetry.
        gate: Vec<(AgentId, f64)>,
        median: f64,
        recipients: Vec<AgentId>,
    },
    InsightInjected {
        giver: AgentId,
        recipient: AgentId,
        level: InsightLevel,
        scope: Option<NicheLabel>,
    },
    Lifecycle {
        op: LifecycleKind,
        subjects: Vec<AgentId>,
        reason: String,
        applied: bool,
    },
    Error {
        stage: String,
        message: String,
    },
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::TeamSelected { .. } => "team_selected",
            EventBody::StructureChosen { .. } => "structure_chosen",
            EventBody::MemberAnswer { .. } => "member_answer",
            EventBody::OutcomeGraded { .. } => "outcome_graded",
            EventBody::ReflectionStored { .. } => "reflection_stored",
            EventBody::CodreamSession { .. } => "codream_session",
            EventBody::InsightRouted { .. } => "insight_routed",
            EventBody::InsightInjected { .. } => "insight_injected",
            EventBody::Lifecycle { .. } => "lifecycle",
            EventBody::Error { .. } => "error",
        }
    }
}

/// Destination for run events.
pub trait EventSink {
    fn emit(&mut self, event: RunEvent) -> Result<()>;
}

/// Durable line-per-event writer; every event is flushed so a crash loses at
/// most the line being written.
pub struct EventLogWriter {
    out: BufWriter<File>,
}

impl EventLogWriter {
    pub fn create(path: &Path, header: &LogHeader) -> Result<Self> {
        let file = File::create(path)?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer(&mut out, header)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(EventLogWriter { out })
    }
}

impl EventSink for EventLogWriter {
    fn emit(&mut self, event: RunEvent) -> Result<()> {
        serde_json::to_writer(&mut self.out, &event)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// In-memory sink for tests and the library API.
#[derive(Debug, Default)]
pub struct MemoryLog {
    pub events: Vec<RunEvent>,
}

impl EventSink for MemoryLog {
    fn emit(&mut self, event: RunEvent) -> Result<()> {
        self.events.push(event);
        Ok(())
    }
}

/// Parsed log: header, events in order, and whether a partial crash tail
/// was dropped.
#[derive(Debug)]
pub struct EventLogReader {
    pub header: LogHeader,
    pub truncated_tail: bool,
    events: std::vec::IntoIter<RunEvent>,
}

impl Iterator for EventLogReader {
    type Item = RunEvent;

    fn next(&mut self) -> Option<RunEvent> {
        self.events.next()
    }
}

/// Open a log, check the schema version, and iterate its events. A final
/// line without a terminating newline is treated as a crash tail and
/// skipped; a malformed complete line is an error.
pub fn read_events(path: &Path) -> Result<EventLogReader> {
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();

    let n = reader.read_line(&mut line)?;
    if n == 0 {
        return Err(Error::Decode("event log is empty, missing header".into()));
    }
    if !line.ends_with('\n') {
        return Err(Error::Decode("event log header line is incomplete".into()));
    }
    let header: LogHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Decode(format!("bad log header: {e}")))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaMismatch {
            found: header.schema_version,
            supported: SCHEMA_VERSION,
        });
    }

    let mut events = Vec::new();
    let mut truncated_tail = false;
    let mut line_no = 1usize;
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if !line.ends_with('\n') {
            // Crash tail: stop before the partial record.
            truncated_tail = true;
            break;
        }
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            continue;
        }
        let event: RunEvent = serde_json::from_str(trimmed).map_err(|e| Error::Load {
            line: line_no,
            msg: format!("malformed event record: {e}"),
        })?;
        events.push(event);
    }
    Ok(EventLogReader { header, truncated_tail, events: events.into_iter() })
}

/// The event lines of a log file (header excluded), for byte-level
/// comparisons between runs.
pub fn raw_event_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().map(str::to_string);
    let _header = lines.next();
    Ok(lines.collect())
}
