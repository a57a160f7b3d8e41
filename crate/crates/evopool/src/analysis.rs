//! Post-hoc analytics over event logs: anchor counts per niche, insight
//! flow, rolling anchor share, and the specialization-index series. Reads
//! only the log, never live pool state, so reports are reproducible from
//! artifacts alone.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::evolve::specialization_index;
use crate::state::{AgentId, NicheLabel};
use crate::stream::{read_events, EventBody};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub pool_size: usize,
    pub seed: u64,
    pub window_w: usize,
    pub task_count: usize,
    /// Agents observed anywhere in the log, ascending by id.
    pub agents: Vec<AgentId>,
    /// Niches observed, lexicographic.
    pub niches: Vec<NicheLabel>,
    /// Anchor assignments per (agent, niche).
    pub anchor_matrix: BTreeMap<AgentId, BTreeMap<NicheLabel, u64>>,
    /// Verified-insight injections per (giver, recipient); diagonal empty.
    pub flow_matrix: BTreeMap<AgentId, BTreeMap<AgentId, u64>>,
    pub anchors_by_task: Vec<AgentId>,
    pub niches_by_task: Vec<NicheLabel>,
    pub rewards_by_task: Vec<f64>,
    /// Specialization index over the trailing window, one value per task.
    pub spec_index_series: Vec<f64>,
    /// Trailing-window anchor share per agent, one series per agent.
    pub rolling_share: BTreeMap<AgentId, Vec<f64>>,
    /// Cumulative anchor count per agent, one series per agent.
    pub cumulative_anchor: BTreeMap<AgentId, Vec<u64>>,
    pub unique_anchors: usize,
    pub mean_spec_index: f64,
    pub max_spec_index: f64,
    pub injected_count: u64,
}

impl AnalysisReport {
    /// Column-normalized anchor matrix: shares per niche sum to 1 for every
    /// niche that appears.
    pub fn normalized_anchor_columns(&self) -> BTreeMap<NicheLabel, BTreeMap<AgentId, f64>> {
        let mut out: BTreeMap<NicheLabel, BTreeMap<AgentId, f64>> = BTreeMap::new();
        for niche in &self.niches {
            let total: u64 = self
                .anchor_matrix
                .values()
                .map(|row| row.get(niche).copied().unwrap_or(0))
                .sum();
            if total == 0 {
                continue;
            }
            let column = out.entry(niche.clone()).or_default();
            for (agent, row) in &self.anchor_matrix {
                let count = row.get(niche).copied().unwrap_or(0);
                if count > 0 {
                    column.insert(*agent, count as f64 / total as f64);
                }
            }
        }
        out
    }

    /// Mean reward over the final `n` tasks (or all, when shorter).
    pub fn final_mean_reward(&self, n: usize) -> f64 {
        let take = n.min(self.rewards_by_task.len());
        if take == 0 {
            return 0.0;
        }
        let tail = &self.rewards_by_task[self.rewards_by_task.len() - take..];
        tail.iter().sum::<f64>() / take as f64
    }
}

/// Single pass over a log producing the full report.
pub fn analyze(log_path: &Path, window_w: usize) -> Result<AnalysisReport> {
    let reader = read_events(log_path)?;
    let header = reader.header;

    let mut anchors_by_task: Vec<AgentId> = Vec::new();
    let mut niches_by_task: Vec<NicheLabel> = Vec::new();
    let mut rewards_by_task: Vec<f64> = Vec::new();
    let mut anchor_matrix: BTreeMap<AgentId, BTreeMap<NicheLabel, u64>> = BTreeMap::new();
    let mut flow_matrix: BTreeMap<AgentId, BTreeMap<AgentId, u64>> = BTreeMap::new();
    let mut agents: std::collections::BTreeSet<AgentId> = std::collections::BTreeSet::new();
    let mut niches: std::collections::BTreeSet<NicheLabel> = std::collections::BTreeSet::new();
    let mut injected_count = 0u64;

    for event in reader {
        match event.body {
            EventBody::TeamSelected { anchor, complement, scout, niche } => {
                anchors_by_task.push(anchor);
                niches_by_task.push(niche.clone());
                *anchor_matrix
                    .entry(anchor)
                    .or_default()
                    .entry(niche.clone())
                    .or_insert(0) += 1;
                agents.extend([anchor, complement, scout]);
                niches.insert(niche);
            }
            EventBody::OutcomeGraded { reward, .. } => {
                rewards_by_task.push(reward);
            }
            EventBody::InsightInjected { giver, recipient, .. } => {
                *flow_matrix.entry(giver).or_default().entry(recipient).or_insert(0) += 1;
                agents.insert(giver);
                agents.insert(recipient);
                injected_count += 1;
            }
            _ => {}
        }
    }

    let n_pool = header.pool_size.max(2);
    let mut spec_index_series = Vec::with_capacity(anchors_by_task.len());
    for t in 0..anchors_by_task.len() {
        let start = (t + 1).saturating_sub(window_w);
        let window = &anchors_by_task[start..=t];
        spec_index_series.push(specialization_index(window, n_pool)?);
    }

    let agents: Vec<AgentId> = agents.into_iter().collect();
    let mut rolling_share: BTreeMap<AgentId, Vec<f64>> = BTreeMap::new();
    let mut cumulative_anchor: BTreeMap<AgentId, Vec<u64>> = BTreeMap::new();
    for &agent in &agents {
        let mut shares = Vec::with_capacity(anchors_by_task.len());
        let mut cumulative = Vec::with_capacity(anchors_by_task.len());
        let mut total = 0u64;
        for t in 0..anchors_by_task.len() {
            let start = (t + 1).saturating_sub(window_w);
            let window = &anchors_by_task[start..=t];
            let hits = window.iter().filter(|a| **a == agent).count();
            shares.push(hits as f64 / window.len() as f64);
            if anchors_by_task[t] == agent {
                total += 1;
            }
            cumulative.push(total);
        }
        rolling_share.insert(agent, shares);
        cumulative_anchor.insert(agent, cumulative);
    }

    let unique_anchors = anchors_by_task
        .iter()
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let mean_spec_index = if spec_index_series.is_empty() {
        0.0
    } else {
        spec_index_series.iter().sum::<f64>() / spec_index_series.len() as f64
    };
    let max_spec_index = spec_index_series.iter().copied().fold(0.0, f64::max);

    Ok(AnalysisReport {
        pool_size: header.pool_size,
        seed: header.seed,
        window_w,
        task_count: anchors_by_task.len(),
        agents,
        niches: niches.into_iter().collect(),
        anchor_matrix,
        flow_matrix,
        anchors_by_task,
        niches_by_task,
        rewards_by_task,
        spec_index_series,
        rolling_share,
        cumulative_anchor,
        unique_anchors,
        mean_spec_index,
        max_spec_index,
        injected_count,
    })
}

fn agent_header(agents: &[AgentId]) -> Vec<String> {
    agents.iter().map(|a| a.to_string()).collect()
}

/// Write the report as CSV files plus a structured `report.json`, one file
/// per matrix or series, with stable row/column ordering.
pub fn export(report: &AnalysisReport, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let json_path = dir.join("report.json");
    std::fs::write(&json_path, serde_json::to_vec_pretty(report)?)?;
    written.push(json_path);

    // Anchor counts and the column-normalized view: agents x niches.
    for (name, normalized) in [("anchor_matrix.csv", false), ("anchor_matrix_normalized.csv", true)]
    {
        let path = dir.join(name);
        let mut writer = csv::Writer::from_path(&path)?;
        let mut header = vec!["agent".to_string()];
        header.extend(report.niches.iter().map(|n| n.to_string()));
        writer.write_record(&header)?;
        let normalized_columns = report.normalized_anchor_columns();
        for agent in &report.agents {
            let mut row = vec![agent.to_string()];
            for niche in &report.niches {
                if normalized {
                    let share = normalized_columns
                        .get(niche)
                        .and_then(|col| col.get(agent))
                        .copied()
                        .unwrap_or(0.0);
                    row.push(format!("{share}"));
                } else {
                    let count = report
                        .anchor_matrix
                        .get(agent)
                        .and_then(|r| r.get(niche))
                        .copied()
                        .unwrap_or(0);
                    row.push(count.to_string());
                }
            }
            writer.write_record(&row)?;
        }
        writer.flush()?;
        written.push(path);
    }

    // Insight flow: givers x recipients.
    {
        let path = dir.join("flow_matrix.csv");
        let mut writer = csv::Writer::from_path(&path)?;
        let mut header = vec!["giver".to_string()];
        header.extend(agent_header(&report.agents));
        writer.write_record(&header)?;
        for giver in &report.agents {
            let mut row = vec![giver.to_string()];
            for recipient in &report.agents {
                let count = report
                    .flow_matrix
                    .get(giver)
                    .and_then(|r| r.get(recipient))
                    .copied()
                    .unwrap_or(0);
                row.push(count.to_string());
            }
            writer.write_record(&row)?;
        }
        writer.flush()?;
        written.push(path);
    }

    // Specialization-index series.
    {
        let path = dir.join("spec_index.csv");
        let mut writer = csv::Writer::from_path(&path)?;
        writer.write_record(["task_index", "spec_index"])?;
        for (t, value) in report.spec_index_series.iter().enumerate() {
            writer.write_record([(t + 1).to_string(), format!("{value}")])?;
        }
        writer.flush()?;
        written.push(path);
    }

    // Rolling share and cumulative anchors: tasks x agents.
    for (name, is_share) in [("rolling_share.csv", true), ("cumulative_anchor.csv", false)] {
        let path = dir.join(name);
        let mut writer = csv::Writer::from_path(&path)?;
        let mut header = vec!["task_index".to_string()];
        header.extend(agent_header(&report.agents));
        writer.write_record(&header)?;
        for t in 0..report.task_count {
            let mut row = vec![(t + 1).to_string()];
            for agent in &report.agents {
                if is_share {
                    let v = report.rolling_share.get(agent).map_or(0.0, |s| s[t]);
                    row.push(format!("{v}"));
                } else {
                    let v = report.cumulative_anchor.get(agent).map_or(0, |s| s[t]);
                    row.push(v.to_string());
                }
            }
            writer.write_record(&row)?;
        }
        writer.flush()?;
        written.push(path);
    }

    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{EventLogWriter, EventSink, LogHeader, RunEvent, SCHEMA_VERSION};
    use approx::assert_relative_eq;

    fn write_log(
        dir: &Path,
        pool_size: usize,
        anchors: &[(u32, &str, f64)],
        injections: &[(u32, u32)],
    ) -> std::path::PathBuf {
        let path = dir.join("events.jsonl");
        let header = LogHeader { schema_version: SCHEMA_VERSION, pool_size, seed: 1 };
        let mut writer = EventLogWriter::create(&path, &header).unwrap();
        for (i, (anchor, niche, reward)) in anchors.iter().enumerate() {
            let task_index = i as u64 + 1;
            let task_id = format!("t{task_index}");
            writer
                .emit(RunEvent {
                    task_index,
                    task_id: task_id.clone(),
                    seq: 0,
                    rng_cursor: task_index,
                    body: EventBody::TeamSelected {
                        anchor: AgentId(*anchor),
                        complement: AgentId(anchor + 100),
                        scout: AgentId(anchor + 200),
                        niche: NicheLabel::new(*niche),
                    },
                })
                .unwrap();
            writer
                .emit(RunEvent {
                    task_index,
                    task_id,
                    seq: 1,
                    rng_cursor: task_index,
                    body: EventBody::OutcomeGraded {
                        reward: *reward,
                        final_answer: "a".into(),
                        disagreement: false,
                        structure: crate::state::StructureKind::Voting,
                        degraded: false,
                    },
                })
                .unwrap();
        }
        for (i, (giver, recipient)) in injections.iter().enumerate() {
            writer
                .emit(RunEvent {
                    task_index: anchors.len() as u64,
                    task_id: "tinj".into(),
                    seq: 2 + i as u32,
                    rng_cursor: anchors.len() as u64,
                    body: EventBody::InsightInjected {
                        giver: AgentId(*giver),
                        recipient: AgentId(*recipient),
                        level: crate::state::InsightLevel::Subdomain,
                        scope: Some(NicheLabel::new("z")),
                    },
                })
                .unwrap();
        }
        path
    }

    #[test]
    fn single_anchor_log_converges_to_full_specialization() {
        let dir = tempfile::tempdir().unwrap();
        let anchors: Vec<(u32, &str, f64)> = (0..64).map(|_| (3u32, "z", 1.0)).collect();
        let path = write_log(dir.path(), 20, &anchors, &[]);
        let report = analyze(&path, 32).unwrap();
        assert_eq!(report.task_count, 64);
        assert_relative_eq!(*report.spec_index_series.last().unwrap(), 1.0);
        assert_eq!(report.unique_anchors, 1);
        assert!(report.flow_matrix.is_empty(), "no injections, empty flow");
        assert_eq!(report.rewards_by_task.len(), 64);
    }

    #[test]
    fn planted_half_and_half_window_matches_hand_entropy() {
        let dir = tempfile::tempdir().unwrap();
        // 16 tasks anchored by agent 1, then 16 by agent 2, W = 32.
        let mut anchors: Vec<(u32, &str, f64)> = vec![(1, "z", 1.0); 16];
        anchors.extend(vec![(2, "z", 1.0); 16]);
        let path = write_log(dir.path(), 20, &anchors, &[]);
        let report = analyze(&path, 32).unwrap();
        let expected = 1.0 - (2.0f64).ln() / (20.0f64).ln();
        assert_relative_eq!(*report.spec_index_series.last().unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn flow_matrix_counts_injections_with_zero_diagonal() {
        let dir = tempfile::tempdir().unwrap();
        let anchors = vec![(1u32, "z", 0.5)];
        let injections = vec![(1u32, 2u32), (1, 2), (1, 3), (4, 2)];
        let path = write_log(dir.path(), 10, &anchors, &injections);
        let report = analyze(&path, 32).unwrap();
        assert_eq!(report.injected_count, 4);
        let total: u64 = report.flow_matrix.values().flat_map(|r| r.values()).sum();
        assert_eq!(total, 4);
        assert_eq!(report.flow_matrix[&AgentId(1)][&AgentId(2)], 2);
        for (giver, row) in &report.flow_matrix {
            assert!(!row.contains_key(giver), "diagonal must be empty");
        }
    }

    #[test]
    fn analyze_is_pure() {
        let dir = tempfile::tempdir().unwrap();
        let anchors: Vec<(u32, &str, f64)> =
            (0..40).map(|i| ((i % 3) as u32, "z", 0.5)).collect();
        let path = write_log(dir.path(), 6, &anchors, &[(0, 1)]);
        let a = analyze(&path, 16).unwrap();
        let b = analyze(&path, 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn normalized_columns_sum_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let anchors = vec![
            (1u32, "z", 1.0),
            (1, "z", 1.0),
            (2, "z", 1.0),
            (3, "y", 1.0),
        ];
        let path = write_log(dir.path(), 8, &anchors, &[]);
        let report = analyze(&path, 4).unwrap();
        for (niche, column) in report.normalized_anchor_columns() {
            let sum: f64 = column.values().sum();
            assert!((sum - 1.0).abs() < 1e-9, "column {niche} sums to {sum}");
        }
    }

    #[test]
    fn export_writes_all_files_and_round_trips_the_anchor_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let anchors = vec![(1u32, "z", 1.0), (2, "z", 0.0), (1, "y", 1.0)];
        let path = write_log(dir.path(), 8, &anchors, &[(1, 2)]);
        let report = analyze(&path, 2).unwrap();
        let out_dir = dir.path().join("report");
        let files = export(&report, &out_dir).unwrap();
        assert_eq!(files.len(), 7);
        for file in &files {
            assert!(file.exists(), "{file:?} missing");
        }

        // Parse the exported anchor matrix back and compare.
        let mut reader = csv::Reader::from_path(out_dir.join("anchor_matrix.csv")).unwrap();
        let headers: Vec<String> =
            reader.headers().unwrap().iter().map(str::to_string).collect();
        assert_eq!(headers[0], "agent");
        let mut parsed: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
        for row in reader.records() {
            let row = row.unwrap();
            let agent = row[0].to_string();
            for (i, niche) in headers[1..].iter().enumerate() {
                let count: u64 = row[i + 1].parse().unwrap();
                if count > 0 {
                    parsed.entry(agent.clone()).or_default().insert(niche.clone(), count);
                }
            }
        }
        assert_eq!(parsed["a1"]["z"], 1);
        assert_eq!(parsed["a1"]["y"], 1);
        assert_eq!(parsed["a2"]["z"], 1);

        // Series lengths match the task count.
        let spec_rows = std::fs::read_to_string(out_dir.join("spec_index.csv")).unwrap();
        assert_eq!(spec_rows.lines().count(), 1 + report.task_count);
    }

    #[test]
    fn empty_log_exports_header_only_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_log(dir.path(), 5, &[], &[]);
        let report = analyze(&path, 32).unwrap();
        assert_eq!(report.task_count, 0);
        let out_dir = dir.path().join("report");
        export(&report, &out_dir).unwrap();
        let spec_rows = std::fs::read_to_string(out_dir.join("spec_index.csv")).unwrap();
        assert_eq!(spec_rows.lines().count(), 1, "header only");
    }
}
