//! Post-task knowledge distillation: a five-phase session triggered by team
//! failure or disagreement, a verification-by-re-attempt gate, asymmetric
//! below-median routing, and dedup-guarded injection. Per-agent
//! self-reflection shares the injection path.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backends::{
    grade, Backbone, BackboneOp, BackboneRequest, CoDreamPhase, Embedder, GraderBinding,
    TokenBudgets,
};
use crate::collab::{MemberCall, TaskContext, TeamOutcome};
use crate::evolve::cosine;
use crate::state::{
    Agent, AgentId, ExperienceEntry, Insight, InsightLevel, NicheLabel, Origin, Pool,
    TeamAssignment,
};
use crate::templates::Templates;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoDreamParams {
    /// Team-reward threshold below which a session fires.
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Cosine at or above which a new entry counts as a near-duplicate.
    #[serde(default = "default_dedup_cos")]
    pub dedup_cos: f64,
    /// Top-k for experience retrieval.
    #[serde(default = "default_retrieval_k")]
    pub retrieval_k: usize,
}

fn default_theta() -> f64 {
    0.6
}
fn default_dedup_cos() -> f64 {
    0.85
}
fn default_retrieval_k() -> usize {
    5
}

impl Default for CoDreamParams {
    fn default() -> Self {
        CoDreamParams { theta: 0.6, dedup_cos: 0.85, retrieval_k: 5 }
    }
}

impl CoDreamParams {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(crate::Error::Config(format!("theta must be in (0,1), got {}", self.theta)));
        }
        if !(self.dedup_cos > 0.0 && self.dedup_cos < 1.0) {
            return Err(crate::Error::Config(format!(
                "dedup cosine must be in (0,1), got {}",
                self.dedup_cos
            )));
        }
        if self.retrieval_k < 1 {
            return Err(crate::Error::Config("retrieval_k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerReason {
    LowReward,
    Disagreement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTranscript {
    pub phase: String,
    pub entries: Vec<(AgentId, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoDreamSession {
    pub task_id: String,
    pub trigger_reason: TriggerReason,
    pub phase_transcripts: Vec<PhaseTranscript>,
    pub candidate_insights: Vec<Insight>,
    pub accepted_insights: Vec<Insight>,
    /// Set when a backbone failure aborted the session mid-phase; no
    /// candidates survive an abort.
    pub aborted: Option<String>,
}

/// Low reward takes precedence over disagreement when both hold.
pub fn should_trigger(outcome: &TeamOutcome, params: &CoDreamParams) -> Option<TriggerReason> {
    if outcome.reward < params.theta {
        Some(TriggerReason::LowReward)
    } else if outcome.disagreement {
        Some(TriggerReason::Disagreement)
    } else {
        None
    }
}

fn phase_call(
    pool: &mut Pool,
    backbone: &dyn Backbone,
    budgets: &TokenBudgets,
    member: &MemberCall,
    phase: CoDreamPhase,
    prompt: String,
    peers: Vec<String>,
) -> Result<String> {
    let mut request =
        BackboneRequest::new(BackboneOp::Codream(phase), member.persona.clone(), prompt)
            .with_peers(peers);
    request.max_tokens = budgets.for_tag(request.tag);
    if let Some(sim) = &member.sim {
        request = request.with_sim(sim.clone());
    }
    backbone.invoke(&request, &mut pool.rng)
}

struct Proposal {
    owner: AgentId,
    raw: String,
}

fn parse_proposals(owner: AgentId, text: &str) -> Vec<Proposal> {
    text.lines()
        .filter_map(|line| {
            let trimmed = line.trim();
            let body = trimmed.strip_prefix("PROPOSAL:")?;
            let (text, _tag) = match body.rsplit_once("| NICHE:") {
                Some((t, tag)) => (t.trim(), tag.trim()),
                None => (body.trim(), "*"),
            };
            if text.is_empty() {
                return None;
            }
            Some(Proposal { owner, raw: trimmed.to_string() })
        })
        .collect()
}

fn parse_keep_votes(text: &str, n: usize) -> Vec<usize> {
    let Some((_, list)) = text.split_once("KEEP:") else {
        return Vec::new();
    };
    list.split(',')
        .filter_map(|part| part.trim().parse::<usize>().ok())
        .filter(|i| (1..=n).contains(i))
        .map(|i| i - 1)
        .collect()
}

fn parse_insight_lines(
    text: &str,
    fallback_scope: &NicheLabel,
) -> Vec<(String, InsightLevel, Option<NicheLabel>)> {
    text.lines()
        .filter_map(|line| {
            let trimmed = line.trim();
            let body = trimmed.strip_prefix("INSIGHT:")?;
            let mut parts = body.split('|');
            let text = parts.next()?.trim().to_string();
            if text.is_empty() {
                return None;
            }
            let mut level = InsightLevel::Subdomain;
            let mut scope_raw = String::new();
            for part in parts {
                let part = part.trim();
                if let Some(value) = part.strip_prefix("LEVEL:") {
                    let value = value.trim().to_lowercase();
                    level = if value.contains("cross") {
                        InsightLevel::CrossDomain
                    } else if value.contains("task") {
                        InsightLevel::TaskLocal
                    } else {
                        InsightLevel::Subdomain
                    };
                } else if let Some(value) = part.strip_prefix("SCOPE:") {
                    scope_raw = value.trim().to_string();
                }
            }
            let scope = match level {
                InsightLevel::CrossDomain => None,
                _ => {
                    if scope_raw.is_empty() || scope_raw == "-" || scope_raw == "*" {
                        Some(fallback_scope.clone())
                    } else {
                        Some(NicheLabel::new(scope_raw))
                    }
                }
            };
            Some((text, level, scope))
        })
        .collect()
}

/// Run the five phases and crystallize candidate insights. Candidates come
/// back unverified and unrouted; the caller owns the verify/route/inject
/// pipeline. A backbone failure aborts the session, keeping the transcripts
/// gathered so far and producing no candidates.
#[allow(clippy::too_many_arguments)]
pub fn run_session(
    pool: &mut Pool,
    team: &TeamAssignment,
    members: &[MemberCall; 3],
    task: &TaskContext,
    outcome: &TeamOutcome,
    trigger_reason: TriggerReason,
    backbone: &dyn Backbone,
    embedder: &dyn Embedder,
    templates: &Templates,
    budgets: &TokenBudgets,
    grader: &GraderBinding,
    params: &CoDreamParams,
) -> CoDreamSession {
    let mut session = CoDreamSession {
        task_id: task.id.to_string(),
        trigger_reason,
        phase_transcripts: Vec::new(),
        candidate_insights: Vec::new(),
        accepted_insights: Vec::new(),
        aborted: None,
    };

    // Per-member success: each member's own answer, graded with the task
    // grader; missing answers fail outright.
    let member_reward = |id: AgentId| -> f64 {
        outcome
            .per_member_answers
            .get(&id)
            .and_then(|a| a.as_ref())
            .map(|answer| grade(task.id, task.gold, answer, grader).unwrap_or(0.0))
            .unwrap_or(0.0)
    };
    let succeeded: Vec<AgentId> = team
        .members()
        .iter()
        .copied()
        .filter(|id| member_reward(*id) >= params.theta)
        .collect();
    let failed: Vec<AgentId> = team
        .members()
        .iter()
        .copied()
        .filter(|id| !succeeded.contains(id))
        .collect();
    let call_of = |id: AgentId| members.iter().find(|m| m.agent == id).expect("team member call");
    let answer_of = |id: AgentId| -> String {
        outcome
            .per_member_answers
            .get(&id)
            .and_then(|a| a.clone())
            .unwrap_or_default()
    };
    let trace_of = |id: AgentId| -> String {
        outcome.per_member_traces.get(&id).cloned().unwrap_or_default()
    };

    // Phase 1 - Reflect: private diagnosis by every member.
    let mut reflections = Vec::new();
    let mut transcript = PhaseTranscript { phase: "reflect".into(), entries: Vec::new() };
    for member in members {
        let prompt = templates.render(
            "codream_reflect",
            &[
                ("task_id", task.id),
                ("niche", task.niche.as_str()),
                ("trace", &trace_of(member.agent)),
            ],
        );
        match phase_call(
            pool,
            backbone,
            budgets,
            member,
            CoDreamPhase::Reflect,
            prompt,
            vec![answer_of(member.agent)],
        ) {
            Ok(text) => {
                reflections.push(text.clone());
                transcript.entries.push((member.agent, text));
            }
            Err(e) => {
                session.phase_transcripts.push(transcript);
                session.aborted = Some(format!("reflect phase: {e}"));
                return session;
            }
        }
    }
    session.phase_transcripts.push(transcript);

    // Phase 2 - Contrast: failing members extract deltas from successful
    // ones, or from the gold answer when nobody succeeded. With neither,
    // the phase is skipped and the reflections feed Imagine directly.
    let mut deltas = Vec::new();
    let mut transcript = PhaseTranscript { phase: "contrast".into(), entries: Vec::new() };
    let mut contrast_inputs: Vec<(AgentId, String)> = Vec::new();
    if !failed.is_empty() && !succeeded.is_empty() {
        for f in &failed {
            for s in &succeeded {
                contrast_inputs.push((
                    *f,
                    format!("answer by {s}: {}\ntrace: {}", answer_of(*s), trace_of(*s)),
                ));
            }
        }
    } else if !failed.is_empty() {
        if let Some(gold) = task.gold {
            for f in &failed {
                contrast_inputs.push((*f, format!("reference answer: {gold}")));
            }
        }
    }
    for (agent, success_text) in contrast_inputs {
        let prompt = templates.render(
            "codream_contrast",
            &[
                ("task_id", task.id),
                ("niche", task.niche.as_str()),
                ("success", &success_text),
                ("failure", &trace_of(agent)),
            ],
        );
        match phase_call(
            pool,
            backbone,
            budgets,
            call_of(agent),
            CoDreamPhase::Contrast,
            prompt,
            vec![answer_of(agent)],
        ) {
            Ok(text) => {
                deltas.push(text.clone());
                transcript.entries.push((agent, text));
            }
            Err(e) => {
                session.phase_transcripts.push(transcript);
                session.aborted = Some(format!("contrast phase: {e}"));
                return session;
            }
        }
    }
    session.phase_transcripts.push(transcript);

    // Phase 3 - Imagine: deltas (or reflections, when contrast was skipped)
    // become tagged strategy proposals.
    let imagine_input = if deltas.is_empty() { reflections.clone() } else { deltas.clone() };
    let input_text = imagine_input
        .iter()
        .enumerate()
        .map(|(i, d)| format!("{}. {}", i + 1, d))
        .collect::<Vec<_>>()
        .join("\n");
    let mut proposals: Vec<Proposal> = Vec::new();
    let mut transcript = PhaseTranscript { phase: "imagine".into(), entries: Vec::new() };
    for member in members {
        let prompt = templates.render(
            "codream_imagine",
            &[("task_id", task.id), ("niche", task.niche.as_str()), ("deltas", &input_text)],
        );
        match phase_call(
            pool,
            backbone,
            budgets,
            member,
            CoDreamPhase::Imagine,
            prompt,
            imagine_input.clone(),
        ) {
            Ok(text) => {
                proposals.extend(parse_proposals(member.agent, &text));
                transcript.entries.push((member.agent, text));
            }
            Err(e) => {
                session.phase_transcripts.push(transcript);
                session.aborted = Some(format!("imagine phase: {e}"));
                return session;
            }
        }
    }
    session.phase_transcripts.push(transcript);

    // Phase 4 - Debate: cross-critique; proposals failing a majority
    // keep-vote are dropped.
    let proposal_lines: Vec<String> = proposals.iter().map(|p| p.raw.clone()).collect();
    let mut votes = vec![0usize; proposals.len()];
    let mut transcript = PhaseTranscript { phase: "debate".into(), entries: Vec::new() };
    if !proposals.is_empty() {
        let listing = proposal_lines
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{}. {}", i + 1, p))
            .collect::<Vec<_>>()
            .join("\n");
        for member in members {
            let prompt = templates.render("codream_debate", &[("proposals", &listing)]);
            match phase_call(
                pool,
                backbone,
                budgets,
                member,
                CoDreamPhase::Debate,
                prompt,
                proposal_lines.clone(),
            ) {
                Ok(text) => {
                    for idx in parse_keep_votes(&text, proposals.len()) {
                        votes[idx] += 1;
                    }
                    transcript.entries.push((member.agent, text));
                }
                Err(e) => {
                    session.phase_transcripts.push(transcript);
                    session.aborted = Some(format!("debate phase: {e}"));
                    return session;
                }
            }
        }
    }
    session.phase_transcripts.push(transcript);
    let survivors: Vec<&Proposal> = proposals
        .iter()
        .enumerate()
        .filter(|(i, _)| votes[*i] >= 2)
        .map(|(_, p)| p)
        .collect();

    // Phase 5 - Crystallize: each member converts its surviving proposals
    // into structured insights.
    let mut transcript = PhaseTranscript { phase: "crystallize".into(), entries: Vec::new() };
    for member in members {
        let own: Vec<&&Proposal> = survivors.iter().filter(|p| p.owner == member.agent).collect();
        if own.is_empty() {
            continue;
        }
        let listing: Vec<String> = own.iter().map(|p| p.raw.clone()).collect();
        let prompt = templates.render("codream_crystallize", &[("survivors", &listing.join("\n"))]);
        match phase_call(
            pool,
            backbone,
            budgets,
            member,
            CoDreamPhase::Crystallize,
            prompt,
            listing,
        ) {
            Ok(text) => {
                for (insight_text, level, scope) in parse_insight_lines(&text, task.niche) {
                    let embedding = match embedder.embed(&insight_text) {
                        Ok(v) => v,
                        Err(_) => continue,
                    };
                    session.candidate_insights.push(Insight {
                        entry: ExperienceEntry {
                            text: insight_text,
                            embedding,
                            source_task: task.id.to_string(),
                            source_niche: Some(task.niche.clone()),
                            level,
                            niche_scope: scope,
                            origin: Origin::Codream,
                            giver: Some(member.agent),
                        },
                        recipients: Vec::new(),
                        verified: false,
                    });
                }
                transcript.entries.push((member.agent, text));
            }
            Err(e) => {
                session.phase_transcripts.push(transcript);
                session.aborted = Some(format!("crystallize phase: {e}"));
                session.candidate_insights.clear();
                return session;
            }
        }
    }
    session.phase_transcripts.push(transcript);
    let _ = &proposals;
    session
}

/// Gate statistic for deficit routing: competence on the scoped niche, or
/// the recent-reward mean (0.5 prior when empty) for cross-domain insights.
pub fn gate_stat(agent: &Agent, scope: Option<&NicheLabel>) -> f64 {
    match scope {
        Some(niche) => agent.q(niche),
        None => agent.window_mean().unwrap_or(0.5),
    }
}

/// Lower-middle median of the roster's gate statistics.
fn pool_median(stats: &[(AgentId, f64)]) -> f64 {
    let mut values: Vec<f64> = stats.iter().map(|(_, s)| *s).collect();
    values.sort_by(f64::total_cmp);
    values[(values.len() - 1) / 2]
}

/// The agent that re-attempts the task during verification: the weakest
/// candidate on the insight's scope, giver excluded. Independent of the
/// routing gate so ablations that change routing leave verification intact.
pub fn designated_verifier(pool: &Pool, insight: &Insight) -> Option<AgentId> {
    let giver = insight.entry.giver;
    pool.agents()
        .filter(|a| Some(a.id) != giver)
        .map(|a| (a.id, gate_stat(a, insight.entry.niche_scope.as_ref())))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(id, _)| id)
}

/// One designated deficit agent re-attempts the task with the insight
/// prepended; the insight verifies iff the re-attempt strictly beats the
/// original team reward. Backend or grader failures leave it unverified.
#[allow(clippy::too_many_arguments)]
pub fn verify_insight(
    pool: &mut Pool,
    verifier: &MemberCall,
    insight: &Insight,
    task: &TaskContext,
    original_reward: f64,
    backbone: &dyn Backbone,
    templates: &Templates,
    budgets: &TokenBudgets,
    grader: &GraderBinding,
) -> bool {
    let prompt = templates.render(
        "solve",
        &[("niche", task.niche.as_str()), ("prompt", task.prompt)],
    );
    let mut request = BackboneRequest::new(BackboneOp::Solve, verifier.persona.clone(), prompt)
        .with_experience(vec![insight.entry.text.clone()]);
    request.max_tokens = budgets.for_tag(request.tag);
    if let Some(sim) = &verifier.sim {
        request = request.with_sim(sim.clone());
    }
    let answer = match backbone.invoke(&request, &mut pool.rng) {
        Ok(a) => a,
        Err(_) => return false,
    };
    match grade(task.id, task.gold, &answer, grader) {
        Ok(reward) => reward > original_reward,
        Err(_) => false,
    }
}

/// Routing decision with the audit data that justifies it.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub recipients: Vec<AgentId>,
    pub gate: Vec<(AgentId, f64)>,
    pub median: f64,
}

/// Recipients are the roster agents strictly below the pool median on the
/// insight's gate statistic, giver excluded. Under the symmetric-broadcast
/// ablation the gate is bypassed: everyone but the giver receives.
pub fn route_insight(pool: &Pool, insight: &Insight, symmetric_broadcast: bool) -> RoutingDecision {
    let scope = insight.entry.niche_scope.as_ref();
    let gate: Vec<(AgentId, f64)> =
        pool.agents().map(|a| (a.id, gate_stat(a, scope))).collect();
    let median = pool_median(&gate);
    let giver = insight.entry.giver;
    let recipients: Vec<AgentId> = if symmetric_broadcast {
        gate.iter().map(|(id, _)| *id).filter(|id| Some(*id) != giver).collect()
    } else {
        gate.iter()
            .filter(|(id, stat)| Some(*id) != giver && *stat < median)
            .map(|(id, _)| *id)
            .collect()
    };
    RoutingDecision { recipients, gate, median }
}

/// Append an entry to the agent's niche bucket or meta pool unless a
/// near-duplicate (cosine >= dedup threshold) is already stored. Returns
/// whether the entry was stored.
pub fn inject_insight(agent: &mut Agent, entry: &ExperienceEntry, dedup_cos: f64) -> bool {
    debug_assert!(entry.scope_consistent(), "insight scope/level mismatch");
    let store: &Vec<ExperienceEntry> = match &entry.niche_scope {
        Some(niche) => {
            if let Some(bucket) = agent.niche_lessons.get(niche) {
                bucket
            } else {
                agent.niche_lessons.entry(niche.clone()).or_default();
                agent.niche_lessons.get(niche).unwrap()
            }
        }
        None => &agent.meta_insights,
    };
    let duplicate = store
        .iter()
        .any(|existing| cosine(&existing.embedding, &entry.embedding) >= dedup_cos);
    if duplicate {
        return false;
    }
    match &entry.niche_scope {
        Some(niche) => agent.niche_lessons.get_mut(niche).unwrap().push(entry.clone()),
        None => agent.meta_insights.push(entry.clone()),
    }
    true
}

/// Result of one self-reflection: whether the niche lesson and the
/// meta-insight survived dedup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReflectionOutcome {
    pub lesson_stored: bool,
    pub meta_stored: bool,
}

/// One backbone call per participant producing a niche-indexed lesson and a
/// cross-domain meta-insight, both injected into the agent's own stores
/// through the dedup gate.
#[allow(clippy::too_many_arguments)]
pub fn self_reflect(
    pool: &mut Pool,
    member: &MemberCall,
    task: &TaskContext,
    outcome: &TeamOutcome,
    backbone: &dyn Backbone,
    embedder: &dyn Embedder,
    templates: &Templates,
    budgets: &TokenBudgets,
    params: &CoDreamParams,
) -> Result<ReflectionOutcome> {
    let trace = outcome
        .per_member_traces
        .get(&member.agent)
        .cloned()
        .unwrap_or_default();
    let prompt = templates.render(
        "reflect",
        &[
            ("task_id", task.id),
            ("niche", task.niche.as_str()),
            ("trace", &trace),
            ("final_answer", &outcome.final_answer),
            ("reward", &format!("{:.3}", outcome.reward)),
        ],
    );
    let mut request = BackboneRequest::new(BackboneOp::Reflect, member.persona.clone(), prompt);
    request.max_tokens = budgets.for_tag(request.tag);
    if let Some(sim) = &member.sim {
        request = request.with_sim(sim.clone());
    }
    let text = backbone.invoke(&request, &mut pool.rng)?;

    let mut lesson: Option<String> = None;
    let mut meta: Option<String> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix("LESSON:") {
            lesson.get_or_insert_with(|| rest.trim().to_string());
        } else if let Some(rest) = trimmed.strip_prefix("META:") {
            meta.get_or_insert_with(|| rest.trim().to_string());
        }
    }

    let mut result = ReflectionOutcome { lesson_stored: false, meta_stored: false };
    if let Some(lesson_text) = lesson.filter(|t| !t.is_empty()) {
        let entry = ExperienceEntry {
            embedding: embedder.embed(&lesson_text)?,
            text: lesson_text,
            source_task: task.id.to_string(),
            source_niche: Some(task.niche.clone()),
            level: InsightLevel::Subdomain,
            niche_scope: Some(task.niche.clone()),
            origin: Origin::SelfReflection,
            giver: None,
        };
        result.lesson_stored =
            inject_insight(pool.agent_mut(member.agent)?, &entry, params.dedup_cos);
    }
    if let Some(meta_text) = meta.filter(|t| !t.is_empty()) {
        let entry = ExperienceEntry {
            embedding: embedder.embed(&meta_text)?,
            text: meta_text,
            source_task: task.id.to_string(),
            source_niche: Some(task.niche.clone()),
            level: InsightLevel::CrossDomain,
            niche_scope: None,
            origin: Origin::SelfReflection,
            giver: None,
        };
        result.meta_stored =
            inject_insight(pool.agent_mut(member.agent)?, &entry, params.dedup_cos);
    }
    Ok(result)
}

/// Top-k entries from the niche bucket plus top-k from the meta pool, both
/// ranked by cosine against the task embedding; ties keep insertion order.
pub fn retrieve_experience(
    agent: &Agent,
    task_embedding: &[f64],
    niche: &NicheLabel,
    k: usize,
) -> Vec<ExperienceEntry> {
    fn top_k(entries: &[ExperienceEntry], query: &[f64], k: usize) -> Vec<ExperienceEntry> {
        let mut scored: Vec<(usize, f64)> = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i, cosine(query, &e.embedding)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.into_iter().take(k).map(|(i, _)| entries[i].clone()).collect()
    }
    let empty = Vec::new();
    let bucket = agent.niche_lessons.get(niche).unwrap_or(&empty);
    let mut out = top_k(bucket, task_embedding, k);
    out.extend(top_k(&agent.meta_insights, task_embedding, k));
    out
}

/// Audit helper: true when every recipient sits strictly below the median
/// recorded in the routing decision.
pub fn routing_is_asymmetric(decision: &RoutingDecision) -> bool {
    let stats: BTreeMap<AgentId, f64> = decision.gate.iter().copied().collect();
    decision
        .recipients
        .iter()
        .all(|id| stats.get(id).is_some_and(|s| *s < decision.median))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{GraderKind, HashingEmbedder, SimBackbone, SimConfig, SimContext};
    use crate::state::{Pool, StructureKind};
    use crate::testutil::ScriptedBackbone;

    fn niche(s: &str) -> NicheLabel {
        NicheLabel::new(s)
    }

    fn entry_with(text: &str, scope: Option<&str>, embedder: &HashingEmbedder) -> ExperienceEntry {
        ExperienceEntry {
            embedding: embedder.embed(text).unwrap(),
            text: text.to_string(),
            source_task: "t0".into(),
            source_niche: Some(niche("z")),
            level: if scope.is_some() { InsightLevel::Subdomain } else { InsightLevel::CrossDomain },
            niche_scope: scope.map(niche),
            origin: Origin::Codream,
            giver: Some(AgentId(0)),
        }
    }

    fn outcome_with(reward: f64, disagreement: bool) -> TeamOutcome {
        TeamOutcome {
            final_answer: "x".into(),
            per_member_answers: BTreeMap::new(),
            per_member_traces: BTreeMap::new(),
            structure: StructureKind::Voting,
            reward,
            disagreement,
        }
    }

    #[test]
    fn trigger_rules() {
        let params = CoDreamParams::default();
        assert_eq!(
            should_trigger(&outcome_with(0.0, false), &params),
            Some(TriggerReason::LowReward)
        );
        assert_eq!(should_trigger(&outcome_with(1.0, false), &params), None);
        assert_eq!(
            should_trigger(&outcome_with(0.8, true), &params),
            Some(TriggerReason::Disagreement)
        );
        // Low reward wins when both hold.
        assert_eq!(
            should_trigger(&outcome_with(0.1, true), &params),
            Some(TriggerReason::LowReward)
        );
    }

    fn session_fixture() -> (Pool, TeamAssignment, [MemberCall; 3], NicheLabel) {
        let pool = Pool::new_pool(3, "p", 1).unwrap();
        let ids = pool.agent_ids();
        let z = niche("z");
        let team =
            TeamAssignment { anchor: ids[0], complement: ids[1], scout: ids[2], niche: z.clone() };
        let members = [
            MemberCall { agent: ids[0], persona: "p".into(), injected_texts: vec![], sim: None },
            MemberCall { agent: ids[1], persona: "p".into(), injected_texts: vec![], sim: None },
            MemberCall { agent: ids[2], persona: "p".into(), injected_texts: vec![], sim: None },
        ];
        (pool, team, members, z)
    }

    fn graded_outcome(team: &TeamAssignment, answers: [&str; 3]) -> TeamOutcome {
        let mut per_member_answers = BTreeMap::new();
        let mut traces = BTreeMap::new();
        for (id, a) in team.members().into_iter().zip(answers) {
            per_member_answers.insert(id, Some(a.to_string()));
            traces.insert(id, format!("tried {a}"));
        }
        TeamOutcome {
            final_answer: answers[0].to_string(),
            per_member_answers,
            per_member_traces: traces,
            structure: StructureKind::Voting,
            reward: 0.0,
            disagreement: false,
        }
    }

    #[test]
    fn one_success_two_failures_yields_two_contrast_calls() {
        let (mut pool, team, members, z) = session_fixture();
        let task = TaskContext { id: "t1", prompt: "solve", niche: &z, gold: Some("G") };
        // Anchor succeeded (answer G); other two failed.
        let outcome = graded_outcome(&team, ["G", "bad", "bad"]);
        // Script: 3 reflect + 2 contrast + 3 imagine + 0 debate (no proposals).
        let backbone = ScriptedBackbone::ok([
            "DIAGNOSIS: fine",
            "DIAGNOSIS: missed",
            "DIAGNOSIS: missed",
            "DELTA: checked the base case",
            "DELTA: checked the base case",
            "no proposals",
            "no proposals",
            "no proposals",
        ]);
        let session = run_session(
            &mut pool,
            &team,
            &members,
            &task,
            &outcome,
            TriggerReason::LowReward,
            &backbone,
            &HashingEmbedder::default(),
            &Templates::default(),
            &TokenBudgets::default(),
            &GraderBinding::from(GraderKind::ExactMatch),
            &CoDreamParams::default(),
        );
        assert!(session.aborted.is_none());
        let contrast = session
            .phase_transcripts
            .iter()
            .find(|t| t.phase == "contrast")
            .unwrap();
        assert_eq!(contrast.entries.len(), 2);
        // Both contrast calls belong to the failing members.
        assert!(contrast.entries.iter().all(|(id, _)| *id != team.anchor));
    }

    #[test]
    fn all_failed_without_gold_skips_contrast() {
        let (mut pool, team, members, z) = session_fixture();
        let task = TaskContext { id: "t1", prompt: "solve", niche: &z, gold: None };
        let outcome = graded_outcome(&team, ["a", "b", "c"]);
        let backbone = ScriptedBackbone::ok([
            "DIAGNOSIS: x",
            "DIAGNOSIS: y",
            "DIAGNOSIS: z",
            "nothing",
            "nothing",
            "nothing",
        ]);
        let session = run_session(
            &mut pool,
            &team,
            &members,
            &task,
            &outcome,
            TriggerReason::LowReward,
            &backbone,
            &HashingEmbedder::default(),
            &Templates::default(),
            &TokenBudgets::default(),
            &GraderBinding::from(GraderKind::SimOracle),
            &CoDreamParams::default(),
        );
        assert!(session.aborted.is_none());
        let contrast = session
            .phase_transcripts
            .iter()
            .find(|t| t.phase == "contrast")
            .unwrap();
        assert!(contrast.entries.is_empty());
    }

    #[test]
    fn debate_majority_prunes_proposals_before_crystallize() {
        let (mut pool, team, members, z) = session_fixture();
        let task = TaskContext { id: "t1", prompt: "solve", niche: &z, gold: Some("G") };
        let outcome = graded_outcome(&team, ["bad1", "bad2", "bad3"]);
        // 3 reflect; 3 contrast (vs gold); imagine: anchor emits 3 proposals,
        // others none; debate: all three keep only 1 and 2; crystallize: one
        // call for the anchor (owner of survivors) emitting two insights.
        let backbone = ScriptedBackbone::ok([
            "DIAGNOSIS: a",
            "DIAGNOSIS: b",
            "DIAGNOSIS: c",
            "DELTA: d1",
            "DELTA: d2",
            "DELTA: d3",
            "PROPOSAL: strategy one | NICHE: z\nPROPOSAL: strategy two | NICHE: z\nPROPOSAL: strategy three | NICHE: z",
            "no proposals from me",
            "none here",
            "KEEP: 1,2",
            "KEEP: 1,2",
            "KEEP: 1,2",
            "INSIGHT: strategy one | LEVEL: subdomain | SCOPE: z\nINSIGHT: strategy two | LEVEL: cross_domain | SCOPE: -",
        ]);
        let session = run_session(
            &mut pool,
            &team,
            &members,
            &task,
            &outcome,
            TriggerReason::LowReward,
            &backbone,
            &HashingEmbedder::default(),
            &Templates::default(),
            &TokenBudgets::default(),
            &GraderBinding::from(GraderKind::ExactMatch),
            &CoDreamParams::default(),
        );
        assert!(session.aborted.is_none());
        assert_eq!(session.candidate_insights.len(), 2);
        let scoped = &session.candidate_insights[0];
        assert_eq!(scoped.entry.level, InsightLevel::Subdomain);
        assert_eq!(scoped.entry.niche_scope, Some(niche("z")));
        assert_eq!(scoped.entry.giver, Some(team.anchor));
        let cross = &session.candidate_insights[1];
        assert_eq!(cross.entry.level, InsightLevel::CrossDomain);
        assert_eq!(cross.entry.niche_scope, None);
        assert!(session.candidate_insights.iter().all(|c| c.entry.scope_consistent()));
    }

    #[test]
    fn backbone_failure_aborts_session_with_partial_transcripts() {
        let (mut pool, team, members, z) = session_fixture();
        let task = TaskContext { id: "t1", prompt: "solve", niche: &z, gold: Some("G") };
        let outcome = graded_outcome(&team, ["bad", "bad", "bad"]);
        let backbone = ScriptedBackbone::new(vec![
            Ok("DIAGNOSIS: one".to_string()),
            Err("backend down".to_string()),
        ]);
        let session = run_session(
            &mut pool,
            &team,
            &members,
            &task,
            &outcome,
            TriggerReason::LowReward,
            &backbone,
            &HashingEmbedder::default(),
            &Templates::default(),
            &TokenBudgets::default(),
            &GraderBinding::from(GraderKind::ExactMatch),
            &CoDreamParams::default(),
        );
        assert!(session.aborted.is_some());
        assert!(session.candidate_insights.is_empty());
        assert_eq!(session.phase_transcripts.len(), 1);
        assert_eq!(session.phase_transcripts[0].entries.len(), 1);
    }

    #[test]
    fn verification_passes_only_on_strict_improvement() {
        let (mut pool, _team, _members, z) = session_fixture();
        let embedder = HashingEmbedder::default();
        let insight = Insight {
            entry: entry_with("check the base case first", Some("z"), &embedder),
            recipients: vec![],
            verified: false,
        };
        let task = TaskContext { id: "t1", prompt: "solve", niche: &z, gold: Some("G") };
        let verifier = MemberCall {
            agent: pool.agent_ids()[1],
            persona: "p".into(),
            injected_texts: vec![],
            sim: None,
        };
        let grader = GraderBinding::from(GraderKind::ExactMatch);
        // Re-attempt answers correctly: 1.0 > 0.0.
        let good = ScriptedBackbone::ok(["G"]);
        assert!(verify_insight(
            &mut pool,
            &verifier,
            &insight,
            &task,
            0.0,
            &good,
            &Templates::default(),
            &TokenBudgets::default(),
            &grader,
        ));
        // Re-attempt fails again: tie at 0.0 fails the gate.
        let bad = ScriptedBackbone::ok(["nope"]);
        assert!(!verify_insight(
            &mut pool,
            &verifier,
            &insight,
            &task,
            0.0,
            &bad,
            &Templates::default(),
            &TokenBudgets::default(),
            &grader,
        ));
        // Backbone failure leaves the insight unverified.
        let down = ScriptedBackbone::new(vec![Err("down".to_string())]);
        assert!(!verify_insight(
            &mut pool,
            &verifier,
            &insight,
            &task,
            0.0,
            &down,
            &Templates::default(),
            &TokenBudgets::default(),
            &grader,
        ));
    }

    #[test]
    fn verification_correlates_with_insight_relevance_in_sim() {
        // A sim agent improves only when the injected insight is relevant:
        // verification should pass more often for the relevant insight.
        let embedder = HashingEmbedder::default();
        let z = niche("z");
        let relevant = Insight {
            entry: entry_with("use the niche trick", Some("z"), &embedder),
            recipients: vec![],
            verified: false,
        };
        let irrelevant = Insight {
            entry: entry_with("use some other trick", Some("other"), &embedder),
            recipients: vec![],
            verified: false,
        };
        let mut config = SimConfig { base_ability: 0.0, ..SimConfig::default() };
        config.uplift = Some(crate::backends::UpliftConfig {
            delta: 0.9,
            cap: 0.95,
            count_self_lessons: true,
        });
        let backbone = SimBackbone::new(config);
        let grader = GraderBinding::from(GraderKind::SimOracle);
        let mut passes = [0usize; 2];
        for seed in 0..60 {
            for (slot, insight) in [&relevant, &irrelevant].into_iter().enumerate() {
                let mut pool = Pool::new_pool(3, "p", seed).unwrap();
                let verifier_id = pool.agent_ids()[1];
                let verifier = MemberCall {
                    agent: verifier_id,
                    persona: "p".into(),
                    injected_texts: vec![insight.entry.text.clone()],
                    sim: Some(SimContext {
                        agent: verifier_id,
                        root_index: 1,
                        niche: z.clone(),
                        task_id: "t1".into(),
                        correct_token: Some("K".into()),
                        injected: vec![crate::backends::InjectedMeta {
                            level: insight.entry.level,
                            niche_scope: insight.entry.niche_scope.clone(),
                            origin: insight.entry.origin,
                            source_niche: insight.entry.source_niche.clone(),
                        }],
                    }),
                };
                let task = TaskContext { id: "t1", prompt: "solve", niche: &z, gold: Some("K") };
                if verify_insight(
                    &mut pool,
                    &verifier,
                    insight,
                    &task,
                    0.0,
                    &backbone,
                    &Templates::default(),
                    &TokenBudgets::default(),
                    &grader,
                ) {
                    passes[slot] += 1;
                }
            }
        }
        assert!(
            passes[0] > passes[1] + 20,
            "relevant {} vs irrelevant {}",
            passes[0],
            passes[1]
        );
        assert_eq!(passes[1], 0, "irrelevant insight cannot lift a 0-ability agent");
    }

    fn pool_with_scoped_q(qs: &[f64]) -> (Pool, NicheLabel) {
        let mut pool = Pool::new_pool(qs.len().max(3), "p", 1).unwrap();
        let z = niche("z");
        let ids = pool.agent_ids();
        for (i, q) in qs.iter().enumerate() {
            pool.agent_mut(ids[i]).unwrap().set_q(&z, *q);
        }
        (pool, z)
    }

    #[test]
    fn routing_targets_strictly_below_median() {
        let (pool, _z) = pool_with_scoped_q(&[0.9, 0.7, 0.5, 0.3, 0.1]);
        let ids = pool.agent_ids();
        let embedder = HashingEmbedder::default();
        let mut insight = Insight {
            entry: entry_with("tip", Some("z"), &embedder),
            recipients: vec![],
            verified: true,
        };
        insight.entry.giver = Some(ids[0]);
        let decision = route_insight(&pool, &insight, false);
        assert_eq!(decision.median, 0.5);
        assert_eq!(decision.recipients, vec![ids[3], ids[4]]);
        assert!(routing_is_asymmetric(&decision));
    }

    #[test]
    fn routing_with_equal_stats_selects_nobody() {
        let (pool, _z) = pool_with_scoped_q(&[0.5, 0.5, 0.5, 0.5]);
        let embedder = HashingEmbedder::default();
        let insight = Insight {
            entry: entry_with("tip", Some("z"), &embedder),
            recipients: vec![],
            verified: true,
        };
        let decision = route_insight(&pool, &insight, false);
        assert!(decision.recipients.is_empty());
    }

    #[test]
    fn giver_is_excluded_even_when_below_median() {
        let (pool, _z) = pool_with_scoped_q(&[0.9, 0.7, 0.5, 0.3, 0.1]);
        let ids = pool.agent_ids();
        let embedder = HashingEmbedder::default();
        let mut insight = Insight {
            entry: entry_with("tip", Some("z"), &embedder),
            recipients: vec![],
            verified: true,
        };
        insight.entry.giver = Some(ids[4]);
        let decision = route_insight(&pool, &insight, false);
        assert_eq!(decision.recipients, vec![ids[3]]);
    }

    #[test]
    fn symmetric_broadcast_reaches_everyone_but_the_giver() {
        let (pool, _z) = pool_with_scoped_q(&[0.9, 0.7, 0.5, 0.3, 0.1]);
        let ids = pool.agent_ids();
        let embedder = HashingEmbedder::default();
        let mut insight = Insight {
            entry: entry_with("tip", Some("z"), &embedder),
            recipients: vec![],
            verified: true,
        };
        insight.entry.giver = Some(ids[0]);
        let decision = route_insight(&pool, &insight, true);
        assert_eq!(decision.recipients.len(), pool.roster_len() - 1);
        assert!(!decision.recipients.contains(&ids[0]));
    }

    #[test]
    fn cross_domain_routing_uses_window_means_with_neutral_prior() {
        let mut pool = Pool::new_pool(4, "p", 1).unwrap();
        let ids = pool.agent_ids();
        let cap = pool.window_cap();
        // Two agents with history, two at the 0.5 prior.
        for _ in 0..5 {
            pool.agent_mut(ids[0]).unwrap().push_reward(1, 1.0, cap);
            pool.agent_mut(ids[1]).unwrap().push_reward(1, 0.0, cap);
        }
        let embedder = HashingEmbedder::default();
        let insight = Insight {
            entry: entry_with("general tip", None, &embedder),
            recipients: vec![],
            verified: true,
        };
        // Stats: 1.0, 0.0, 0.5, 0.5 -> sorted 0.0, 0.5, 0.5, 1.0;
        // lower-middle median = 0.5; strictly below: only the 0.0 agent.
        let decision = route_insight(&pool, &insight, false);
        assert_eq!(decision.median, 0.5);
        assert_eq!(decision.recipients, vec![ids[1]]);
    }

    #[test]
    fn injection_dedups_by_cosine() {
        let mut pool = Pool::new_pool(3, "p", 1).unwrap();
        let id = pool.agent_ids()[0];
        let embedder = HashingEmbedder::default();
        let entry = entry_with("use inclusion exclusion on the divisor sets", Some("z"), &embedder);
        assert!(inject_insight(pool.agent_mut(id).unwrap(), &entry, 0.85));
        // Identical text: cosine 1.0, dropped.
        assert!(!inject_insight(pool.agent_mut(id).unwrap(), &entry, 0.85));
        assert_eq!(pool.agent(id).unwrap().store_size(), 1);
        // A clearly different entry lands.
        let other = entry_with("sketch the geometry before assigning coordinates", Some("z"), &embedder);
        assert!(inject_insight(pool.agent_mut(id).unwrap(), &other, 0.85));
        assert_eq!(pool.agent(id).unwrap().store_size(), 2);
    }

    #[test]
    fn injection_threshold_separates_measured_cosines() {
        // Construct one pair above and one pair below the 0.85 threshold and
        // check the dedup decision tracks the measured cosine.
        let embedder = HashingEmbedder::default();
        let base = "when the modulus is composite, split it into prime power factors \
                    and solve each congruence separately before recombining";
        let near = "when the modulus is composite, split it into prime power factors \
                    and solve each congruence separately before recombining the parts";
        let far = "prefer breadth first search when edge weights are uniform";
        let near_cos = crate::backends::cosine_of(&embedder, base, near).unwrap();
        let far_cos = crate::backends::cosine_of(&embedder, base, far).unwrap();
        assert!(near_cos >= 0.85, "near pair measured {near_cos}");
        assert!(far_cos < 0.85, "far pair measured {far_cos}");

        let mut pool = Pool::new_pool(3, "p", 1).unwrap();
        let id = pool.agent_ids()[0];
        let base_entry = entry_with(base, Some("z"), &embedder);
        let near_entry = entry_with(near, Some("z"), &embedder);
        let far_entry = entry_with(far, Some("z"), &embedder);
        assert!(inject_insight(pool.agent_mut(id).unwrap(), &base_entry, 0.85));
        assert!(!inject_insight(pool.agent_mut(id).unwrap(), &near_entry, 0.85));
        assert!(inject_insight(pool.agent_mut(id).unwrap(), &far_entry, 0.85));
    }

    #[test]
    fn self_reflection_fills_both_stores_with_dedup_bounded_growth() {
        let mut pool = Pool::new_pool(3, "p", 1).unwrap();
        let ids = pool.agent_ids();
        let z = niche("math/alg");
        let team =
            TeamAssignment { anchor: ids[0], complement: ids[1], scout: ids[2], niche: z.clone() };
        let outcome = graded_outcome(&team, ["a", "a", "a"]);
        let backbone = SimBackbone::new(SimConfig::default());
        let embedder = HashingEmbedder::default();
        let member = MemberCall {
            agent: ids[0],
            persona: "p".into(),
            injected_texts: vec![],
            sim: Some(SimContext {
                agent: ids[0],
                root_index: 0,
                niche: z.clone(),
                task_id: "t-same".into(),
                correct_token: Some("K".into()),
                injected: vec![],
            }),
        };
        let task = TaskContext { id: "t-same", prompt: "solve", niche: &z, gold: Some("K") };
        for _ in 0..20 {
            let result = self_reflect(
                &mut pool,
                &member,
                &task,
                &outcome,
                &backbone,
                &embedder,
                &Templates::default(),
                &TokenBudgets::default(),
                &CoDreamParams::default(),
            )
            .unwrap();
            let _ = result;
        }
        let agent = pool.agent(ids[0]).unwrap();
        let lessons = agent.niche_lessons.get(&z).map(Vec::len).unwrap_or(0);
        let metas = agent.meta_insights.len();
        assert!(lessons >= 1, "at least one lesson stored");
        assert!(metas >= 1, "at least one meta-insight stored");
        // 20 identical tasks, up to 40 entries without dedup; growth must be
        // sublinear.
        assert!(
            lessons + metas < 40,
            "dedup should bound growth, got {lessons} + {metas}"
        );
    }

    #[test]
    fn retrieval_ranks_by_cosine_and_respects_k() {
        let mut pool = Pool::new_pool(3, "p", 1).unwrap();
        let id = pool.agent_ids()[0];
        let z = niche("z");
        let embedder = HashingEmbedder::default();
        // Empty stores: empty retrieval.
        let probe = embedder.embed("target text about lattice counting").unwrap();
        assert!(retrieve_experience(pool.agent(id).unwrap(), &probe, &z, 5).is_empty());

        let texts = [
            "target text about lattice counting",
            "unrelated remark on sorting networks",
            "another note code paths and caches",
            "lattice counting details for targets",
            "completely different cooking recipe",
            "graph coloring heuristics overview",
            "target text about lattice counting techniques",
            "miscellaneous debugging checklist",
            "numbers station broadcast transcript",
            "lattice target counting text",
        ];
        for text in texts {
            let entry = entry_with(text, Some("z"), &embedder);
            inject_insight(pool.agent_mut(id).unwrap(), &entry, 0.999999).then_some(()).unwrap_or(());
        }
        let agent = pool.agent(id).unwrap();
        let got = retrieve_experience(agent, &probe, &z, 3);
        assert_eq!(got.len(), 3);
        // Brute-force oracle: exhaustive cosine sort.
        let bucket = agent.niche_lessons.get(&z).unwrap();
        let mut oracle: Vec<(f64, &str)> = bucket
            .iter()
            .map(|e| (cosine(&probe, &e.embedding), e.text.as_str()))
            .collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0));
        let expected: Vec<&str> = oracle.iter().take(3).map(|(_, t)| *t).collect();
        let actual: Vec<&str> = got.iter().map(|e| e.text.as_str()).collect();
        assert_eq!(actual, expected);
        // The exact-match entry ranks first.
        assert_eq!(actual[0], "target text about lattice counting");
    }

    #[test]
    fn retrieval_concatenates_niche_bucket_and_meta_pool() {
        let mut pool = Pool::new_pool(3, "p", 1).unwrap();
        let id = pool.agent_ids()[0];
        let embedder = HashingEmbedder::default();
        let scoped = entry_with("niche scoped entry", Some("z"), &embedder);
        let meta = entry_with("general meta entry", None, &embedder);
        inject_insight(pool.agent_mut(id).unwrap(), &scoped, 0.85);
        inject_insight(pool.agent_mut(id).unwrap(), &meta, 0.85);
        let probe = embedder.embed("anything").unwrap();
        let got = retrieve_experience(pool.agent(id).unwrap(), &probe, &niche("z"), 5);
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].text, "niche scoped entry");
        assert_eq!(got[1].text, "general meta entry");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn dedup_is_idempotent(seed in 0u64..200, words in 3usize..12) {
                let embedder = HashingEmbedder::default();
                let text: Vec<String> = (0..words).map(|i| format!("w{}", (seed + i as u64 * 7) % 23)).collect();
                let text = text.join(" ");
                let entry = entry_with(&text, Some("z"), &embedder);
                let mut pool = Pool::new_pool(3, "p", seed).unwrap();
                let id = pool.agent_ids()[0];
                let before = pool.agent(id).unwrap().store_size();
                inject_insight(pool.agent_mut(id).unwrap(), &entry, 0.85);
                inject_insight(pool.agent_mut(id).unwrap(), &entry, 0.85);
                let after = pool.agent(id).unwrap().store_size();
                prop_assert!(after - before <= 1);
            }

            #[test]
            fn recipients_never_include_giver_and_sit_below_median(
                qs in proptest::collection::vec(0.0..=1.0f64, 3..12),
                giver_idx in 0usize..12,
                symmetric in proptest::bool::ANY,
            ) {
                let (pool, _z) = pool_with_scoped_q(&qs);
                let ids = pool.agent_ids();
                let giver = ids[giver_idx % ids.len()];
                let embedder = HashingEmbedder::default();
                let mut insight = Insight {
                    entry: entry_with("tip text", Some("z"), &embedder),
                    recipients: vec![],
                    verified: true,
                };
                insight.entry.giver = Some(giver);
                let decision = route_insight(&pool, &insight, symmetric);
                prop_assert!(!decision.recipients.contains(&giver));
                if !symmetric {
                    prop_assert!(routing_is_asymmetric(&decision));
                }
            }
        }
    }
}
