//! Graders. Exact match and token F1 run in-process; pass@1-style code
//! execution rides an external command so the engine never embeds a sandbox;
//! the simulation oracle checks the task's correct token.

use std::io::Write;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraderKind {
    ExactMatch,
    F1,
    ExternalCommand,
    SimOracle,
}

/// A grader kind plus, for external commands, the argv to spawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraderBinding {
    pub kind: GraderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
}

impl From<GraderKind> for GraderBinding {
    fn from(kind: GraderKind) -> Self {
        GraderBinding { kind, command: None }
    }
}

/// Canonicalize an answer for comparison: trim, case-fold, strip trailing
/// punctuation, and collapse numeric forms ("42." == "42.0" == "42").
pub fn normalize_answer(raw: &str) -> String {
    let trimmed = raw
        .trim()
        .trim_end_matches(['.', '!', '?', ',', ';', ':'])
        .trim();
    let lower = trimmed.to_lowercase();
    if let Ok(value) = lower.parse::<f64>() {
        if value.is_finite() {
            return format!("{value}");
        }
    }
    lower
}

/// Token-level F1 between a gold string and an answer, over normalized
/// whitespace tokens with multiset overlap.
pub fn token_f1(gold: &str, answer: &str) -> f64 {
    let gold_tokens: Vec<String> =
        normalize_answer(gold).split_whitespace().map(str::to_string).collect();
    let answer_tokens: Vec<String> =
        normalize_answer(answer).split_whitespace().map(str::to_string).collect();
    if gold_tokens.is_empty() && answer_tokens.is_empty() {
        return 1.0;
    }
    if gold_tokens.is_empty() || answer_tokens.is_empty() {
        return 0.0;
    }
    let mut counts = std::collections::BTreeMap::new();
    for t in &gold_tokens {
        *counts.entry(t.clone()).or_insert(0i64) += 1;
    }
    let mut overlap = 0i64;
    for t in &answer_tokens {
        let c = counts.entry(t.clone()).or_insert(0);
        if *c > 0 {
            overlap += 1;
            *c -= 1;
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    2.0 * overlap as f64 / (gold_tokens.len() + answer_tokens.len()) as f64
}

/// Score an answer in [0,1].
pub fn grade(task_id: &str, gold: Option<&str>, answer: &str, binding: &GraderBinding) -> Result<f64> {
    match binding.kind {
        GraderKind::ExactMatch => {
            let gold = gold.ok_or_else(|| {
                Error::Grading(format!("task {task_id}: exact_match needs a gold answer"))
            })?;
            Ok(if normalize_answer(gold) == normalize_answer(answer) { 1.0 } else { 0.0 })
        }
        GraderKind::F1 => {
            let gold = gold
                .ok_or_else(|| Error::Grading(format!("task {task_id}: f1 needs a gold answer")))?;
            Ok(token_f1(gold, answer))
        }
        GraderKind::SimOracle => {
            let gold = gold.ok_or_else(|| {
                Error::Grading(format!("task {task_id}: sim_oracle needs the correct token"))
            })?;
            Ok(if answer.trim() == gold.trim() { 1.0 } else { 0.0 })
        }
        GraderKind::ExternalCommand => {
            let argv = binding
                .command
                .as_ref()
                .filter(|argv| !argv.is_empty())
                .ok_or_else(|| {
                    Error::Grading(format!("task {task_id}: external grader has no command"))
                })?;
            run_external(task_id, gold, answer, argv)
        }
    }
}

fn run_external(task_id: &str, gold: Option<&str>, answer: &str, argv: &[String]) -> Result<f64> {
    let record = serde_json::json!({
        "task_id": task_id,
        "answer": answer,
        "gold": gold,
    });
    let mut child = Command::new(&argv[0])
        .args(&argv[1..])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| Error::Grading(format!("task {task_id}: spawn {:?}: {e}", argv[0])))?;
    {
        let stdin = child
            .stdin
            .as_mut()
            .ok_or_else(|| Error::Grading(format!("task {task_id}: grader stdin unavailable")))?;
        let mut line = record.to_string();
        line.push('\n');
        stdin
            .write_all(line.as_bytes())
            .map_err(|e| Error::Grading(format!("task {task_id}: write to grader: {e}")))?;
    }
    let output = child
        .wait_with_output()
        .map_err(|e| Error::Grading(format!("task {task_id}: grader wait: {e}")))?;
    if !output.status.success() {
        return Err(Error::Grading(format!(
            "task {task_id}: grader exited with {}",
            output.status
        )));
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    let first_line = stdout.lines().next().unwrap_or("").trim();
    let reward: f64 = first_line.parse().map_err(|_| {
        Error::Grading(format!(
            "task {task_id}: grader output not a decimal reward: {first_line:?}"
        ))
    })?;
    if !(0.0..=1.0).contains(&reward) {
        return Err(Error::Grading(format!(
            "task {task_id}: grader reward {reward} outside [0,1]"
        )));
    }
    Ok(reward)
}
