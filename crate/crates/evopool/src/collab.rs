//! The four collaboration structures a team can execute, plus the leader's
//! online structure selection over the pool-shared bank of past leadership
//! rounds. Each protocol has a fixed invocation budget so cost accounting
//! stays deterministic.

use std::collections::BTreeMap;

use crate::backends::{
    normalize_answer, Backbone, BackboneOp, BackboneRequest, SimContext, StructureExemplar,
    TokenBudgets,
};
use crate::evolve::cosine;
use crate::state::{
    AgentId, LeadershipRecord, NicheLabel, Pool, PoolRng, StructureKind, TeamAssignment,
};
use crate::templates::Templates;
use crate::Result;

/// The task fields the collaboration and distillation layers need.
#[derive(Debug, Clone, Copy)]
pub struct TaskContext<'a> {
    pub id: &'a str,
    pub prompt: &'a str,
    pub niche: &'a NicheLabel,
    pub gold: Option<&'a str>,
}

/// Everything needed to invoke one team member: persona, the experience
/// retrieved for this task, and (in simulation mode) the ground-truth
/// context for that member.
#[derive(Debug, Clone)]
pub struct MemberCall {
    pub agent: AgentId,
    pub persona: String,
    pub injected_texts: Vec<String>,
    pub sim: Option<SimContext>,
}

/// Joint result of one structure execution. `per_member_answers` holds each
/// member's own answer-like output (`None` when the member's invocation
/// failed); for multi-round structures these are the round-1 answers, which
/// is also what the disagreement flag is computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct TeamOutcome {
    pub final_answer: String,
    pub per_member_answers: BTreeMap<AgentId, Option<String>>,
    pub per_member_traces: BTreeMap<AgentId, String>,
    pub structure: StructureKind,
    pub reward: f64,
    pub disagreement: bool,
}

/// Outcome plus execution bookkeeping for the event log.
#[derive(Debug, Clone)]
pub struct ExecutionReport {
    pub outcome: TeamOutcome,
    pub faults: Vec<String>,
    /// Set when an unexecutable structure degraded to voting.
    pub degraded_from: Option<StructureKind>,
}

/// True when no normalized answer value is shared by at least two members.
pub fn disagreement_from_answers<'a>(answers: impl IntoIterator<Item = &'a str>) -> bool {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for answer in answers {
        *counts.entry(normalize_answer(answer)).or_insert(0) += 1;
    }
    !counts.values().any(|c| *c >= 2)
}

struct Exec<'a> {
    backbone: &'a dyn Backbone,
    budgets: &'a TokenBudgets,
}

impl<'a> Exec<'a> {
    fn call(
        &self,
        rng: &mut PoolRng,
        member: &MemberCall,
        op: BackboneOp,
        prompt: String,
        peers: Vec<String>,
    ) -> Result<String> {
        let mut request = BackboneRequest::new(op, member.persona.clone(), prompt)
            .with_experience(member.injected_texts.clone())
            .with_peers(peers);
        request.max_tokens = self.budgets.for_tag(request.tag);
        if let Some(sim) = &member.sim {
            request = request.with_sim(sim.clone());
        }
        self.backbone.invoke(&request, rng)
    }
}

fn numbered(list: &[String]) -> String {
    if list.is_empty() {
        return "(none)".to_string();
    }
    list.iter()
        .enumerate()
        .map(|(i, item)| format!("{}. {}", i + 1, item))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Majority resolution over present answers. A value shared by >= 2 members
/// wins; an all-distinct split resolves to the first present member in role
/// order (the anchor when it answered).
fn resolve_majority(
    team: &TeamAssignment,
    answers: &BTreeMap<AgentId, Option<String>>,
) -> (String, bool) {
    let present: Vec<(AgentId, &String)> = team
        .members()
        .iter()
        .filter_map(|id| answers.get(id).and_then(|a| a.as_ref()).map(|a| (*id, a)))
        .collect();
    if present.is_empty() {
        return (String::new(), true);
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for (_, answer) in &present {
        *counts.entry(normalize_answer(answer)).or_insert(0) += 1;
    }
    let disagreement = !counts.values().any(|c| *c >= 2);
    if let Some((winner, _)) = counts.iter().find(|(_, c)| **c >= 2) {
        let original = present
            .iter()
            .find(|(_, a)| &normalize_answer(a) == winner)
            .map(|(_, a)| (*a).clone())
            .unwrap_or_default();
        return (original, disagreement);
    }
    // All distinct: the anchor's answer stands (first present in role order).
    (present[0].1.clone(), disagreement)
}

/// Three independent answers, majority wins. 3 invocations.
pub fn execute_voting(
    team: &TeamAssignment,
    members: &[MemberCall; 3],
    task: &TaskContext,
    backbone: &dyn Backbone,
    templates: &Templates,
    budgets: &TokenBudgets,
    rng: &mut PoolRng,
) -> ExecutionReport {
    let exec = Exec { backbone, budgets };
    let prompt = templates.render(
        "solve",
        &[("niche", task.niche.as_str()), ("prompt", task.prompt)],
    );
    let mut answers = BTreeMap::new();
    let mut traces = BTreeMap::new();
    let mut faults = Vec::new();
    for member in members {
        match exec.call(rng, member, BackboneOp::Solve, prompt.clone(), Vec::new()) {
            Ok(answer) => {
                traces.insert(member.agent, format!("answer: {answer}"));
                answers.insert(member.agent, Some(answer));
            }
            Err(e) => {
                faults.push(format!("member {} solve failed: {e}", member.agent));
                traces.insert(member.agent, format!("error: {e}"));
                answers.insert(member.agent, None);
            }
        }
    }
    let (final_answer, disagreement) = resolve_majority(team, &answers);
    ExecutionReport {
        outcome: TeamOutcome {
            final_answer,
            per_member_answers: answers,
            per_member_traces: traces,
            structure: StructureKind::Voting,
            reward: 0.0,
            disagreement,
        },
        faults,
        degraded_from: None,
    }
}

/// Two fixed rounds: independent answers, then revision with all round-1
/// answers visible. The leader's round-2 answer is final. 6 invocations.
pub fn execute_debate(
    team: &TeamAssignment,
    members: &[MemberCall; 3],
    task: &TaskContext,
    backbone: &dyn Backbone,
    templates: &Templates,
    budgets: &TokenBudgets,
    rng: &mut PoolRng,
) -> ExecutionReport {
    let exec = Exec { backbone, budgets };
    let solve_prompt = templates.render(
        "solve",
        &[("niche", task.niche.as_str()), ("prompt", task.prompt)],
    );
    let mut round1: BTreeMap<AgentId, Option<String>> = BTreeMap::new();
    let mut traces: BTreeMap<AgentId, String> = BTreeMap::new();
    let mut faults = Vec::new();
    for member in members {
        match exec.call(rng, member, BackboneOp::Solve, solve_prompt.clone(), Vec::new()) {
            Ok(answer) => {
                traces.insert(member.agent, format!("round 1: {answer}"));
                round1.insert(member.agent, Some(answer));
            }
            Err(e) => {
                faults.push(format!("member {} round 1 failed: {e}", member.agent));
                traces.insert(member.agent, format!("round 1 error: {e}"));
                round1.insert(member.agent, None);
            }
        }
    }
    let visible: Vec<String> = team
        .members()
        .iter()
        .filter_map(|id| round1.get(id).and_then(|a| a.clone()))
        .collect();
    let revise_prompt = templates.render(
        "debate_revise",
        &[
            ("niche", task.niche.as_str()),
            ("prompt", task.prompt),
            ("peer_answers", &numbered(&visible)),
        ],
    );
    let mut round2: BTreeMap<AgentId, Option<String>> = BTreeMap::new();
    for member in members {
        match exec.call(
            rng,
            member,
            BackboneOp::DebateRevise,
            revise_prompt.clone(),
            visible.clone(),
        ) {
            Ok(answer) => {
                let t = traces.entry(member.agent).or_default();
                t.push_str(&format!("\nround 2: {answer}"));
                round2.insert(member.agent, Some(answer));
            }
            Err(e) => {
                faults.push(format!("member {} round 2 failed: {e}", member.agent));
                traces
                    .entry(member.agent)
                    .or_default()
                    .push_str(&format!("\nround 2 error: {e}"));
                round2.insert(member.agent, None);
            }
        }
    }
    // Final: leader's round-2 answer, then any member's round-2 answer in
    // role order, then the leader's round-1 answer.
    let final_answer = round2
        .get(&team.leader())
        .and_then(|a| a.clone())
        .or_else(|| {
            team.members()
                .iter()
                .find_map(|id| round2.get(id).and_then(|a| a.clone()))
        })
        .or_else(|| round1.get(&team.leader()).and_then(|a| a.clone()))
        .unwrap_or_default();
    let disagreement = disagreement_from_answers(
        round1.values().flatten().map(String::as_str),
    ) || round1.values().all(Option::is_none);
    ExecutionReport {
        outcome: TeamOutcome {
            final_answer,
            per_member_answers: round1,
            per_member_traces: traces,
            structure: StructureKind::Debate,
            reward: 0.0,
            disagreement,
        },
        faults,
        degraded_from: None,
    }
}

/// Anchor drafts, complement critiques, anchor revises once, scout verifies.
/// The revision is final. 4 invocations; the revision pass always runs.
pub fn execute_generator_critic(
    _team: &TeamAssignment,
    members: &[MemberCall; 3],
    task: &TaskContext,
    backbone: &dyn Backbone,
    templates: &Templates,
    budgets: &TokenBudgets,
    rng: &mut PoolRng,
) -> ExecutionReport {
    let exec = Exec { backbone, budgets };
    let (anchor, complement, scout) = (&members[0], &members[1], &members[2]);
    let mut faults = Vec::new();
    let mut traces: BTreeMap<AgentId, String> = BTreeMap::new();

    let draft = match exec.call(
        rng,
        anchor,
        BackboneOp::Solve,
        templates.render("solve", &[("niche", task.niche.as_str()), ("prompt", task.prompt)]),
        Vec::new(),
    ) {
        Ok(d) => d,
        Err(e) => {
            faults.push(format!("anchor draft failed: {e}"));
            String::new()
        }
    };
    traces.insert(anchor.agent, format!("draft: {draft}"));

    let critique = match exec.call(
        rng,
        complement,
        BackboneOp::Critique,
        templates.render(
            "critique",
            &[("niche", task.niche.as_str()), ("prompt", task.prompt), ("draft", &draft)],
        ),
        vec![draft.clone()],
    ) {
        Ok(c) => c,
        Err(e) => {
            faults.push(format!("critique failed: {e}"));
            "OK: critique unavailable".to_string()
        }
    };
    traces.insert(complement.agent, format!("critique: {critique}"));

    let revision = match exec.call(
        rng,
        anchor,
        BackboneOp::ReviseDraft,
        templates.render(
            "revise",
            &[
                ("niche", task.niche.as_str()),
                ("prompt", task.prompt),
                ("draft", &draft),
                ("critique", &critique),
            ],
        ),
        vec![draft.clone(), critique.clone()],
    ) {
        Ok(r) => r,
        Err(e) => {
            faults.push(format!("revision failed: {e}"));
            draft.clone()
        }
    };
    traces
        .entry(anchor.agent)
        .or_default()
        .push_str(&format!("\nrevision: {revision}"));

    let verification = match exec.call(
        rng,
        scout,
        BackboneOp::VerifyDraft,
        templates.render(
            "verify",
            &[("niche", task.niche.as_str()), ("prompt", task.prompt), ("revision", &revision)],
        ),
        vec![revision.clone()],
    ) {
        Ok(v) => v,
        Err(e) => {
            faults.push(format!("verification failed: {e}"));
            "FLAG: verification unavailable".to_string()
        }
    };
    traces.insert(scout.agent, format!("verification: {verification}"));

    let mut answers = BTreeMap::new();
    answers.insert(anchor.agent, Some(revision.clone()));
    answers.insert(complement.agent, Some(critique));
    answers.insert(scout.agent, Some(verification));
    ExecutionReport {
        outcome: TeamOutcome {
            final_answer: revision,
            per_member_answers: answers,
            per_member_traces: traces,
            structure: StructureKind::GeneratorCritic,
            reward: 0.0,
            // No parallel comparable answers in this protocol.
            disagreement: false,
        },
        faults,
        degraded_from: None,
    }
}

fn parse_subtasks(text: &str) -> Vec<String> {
    text.lines()
        .filter_map(|line| {
            let trimmed = line.trim();
            let rest = trimmed.strip_prefix("SUBTASK")?;
            let (_, instruction) = rest.split_once(':')?;
            let instruction = instruction.trim();
            if instruction.is_empty() {
                None
            } else {
                Some(instruction.to_string())
            }
        })
        .collect()
}

/// Leader splits the task into 2-3 subtasks assigned round-robin, members
/// solve them, leader composes. 2 + #subtasks invocations. An unparsable
/// split degrades to voting.
pub fn execute_decompose(
    team: &TeamAssignment,
    members: &[MemberCall; 3],
    task: &TaskContext,
    backbone: &dyn Backbone,
    templates: &Templates,
    budgets: &TokenBudgets,
    rng: &mut PoolRng,
) -> ExecutionReport {
    let exec = Exec { backbone, budgets };
    let leader = &members[0];
    let split = exec.call(
        rng,
        leader,
        BackboneOp::SplitTask,
        templates.render("split", &[("niche", task.niche.as_str()), ("prompt", task.prompt)]),
        Vec::new(),
    );
    let mut subtasks = match &split {
        Ok(text) => parse_subtasks(text),
        Err(_) => Vec::new(),
    };
    subtasks.truncate(3);
    if subtasks.len() < 2 {
        let mut report = execute_voting(team, members, task, backbone, templates, budgets, rng);
        report.degraded_from = Some(StructureKind::Decompose);
        report.faults.push(match split {
            Ok(text) => format!("unparsable split output, degraded to voting: {text:?}"),
            Err(e) => format!("split call failed, degraded to voting: {e}"),
        });
        return report;
    }

    let mut traces: BTreeMap<AgentId, String> = BTreeMap::new();
    let mut answers: BTreeMap<AgentId, Option<String>> = BTreeMap::new();
    for member in members {
        answers.insert(member.agent, None);
        traces.insert(member.agent, String::new());
    }
    traces.insert(leader.agent, format!("split into {} subtasks", subtasks.len()));

    let mut faults = Vec::new();
    let mut sub_answers = Vec::new();
    for (i, subtask) in subtasks.iter().enumerate() {
        let member = &members[i % 3];
        let prompt = templates.render(
            "solve",
            &[
                ("niche", task.niche.as_str()),
                ("prompt", &format!("{} (part of: {})", subtask, task.prompt)),
            ],
        );
        match exec.call(rng, member, BackboneOp::Solve, prompt, Vec::new()) {
            Ok(answer) => {
                traces
                    .entry(member.agent)
                    .or_default()
                    .push_str(&format!("\nsubtask {}: {answer}", i + 1));
                let slot = answers.entry(member.agent).or_default();
                *slot = Some(match slot.take() {
                    Some(existing) => format!("{existing}; {answer}"),
                    None => answer.clone(),
                });
                sub_answers.push(answer);
            }
            Err(e) => {
                faults.push(format!("subtask {} by {} failed: {e}", i + 1, member.agent));
                traces
                    .entry(member.agent)
                    .or_default()
                    .push_str(&format!("\nsubtask {} error: {e}", i + 1));
                sub_answers.push(String::new());
            }
        }
    }

    let final_answer = match exec.call(
        rng,
        leader,
        BackboneOp::Compose,
        templates.render(
            "compose",
            &[
                ("niche", task.niche.as_str()),
                ("prompt", task.prompt),
                ("sub_answers", &numbered(&sub_answers)),
            ],
        ),
        sub_answers,
    ) {
        Ok(answer) => {
            traces
                .entry(leader.agent)
                .or_default()
                .push_str(&format!("\ncomposed: {answer}"));
            answer
        }
        Err(e) => {
            faults.push(format!("compose failed: {e}"));
            String::new()
        }
    };

    ExecutionReport {
        outcome: TeamOutcome {
            final_answer,
            per_member_answers: answers,
            per_member_traces: traces,
            structure: StructureKind::Decompose,
            reward: 0.0,
            disagreement: false,
        },
        faults,
        degraded_from: None,
    }
}

/// Dispatch one structure execution.
#[allow(clippy::too_many_arguments)]
pub fn execute_structure(
    structure: StructureKind,
    team: &TeamAssignment,
    members: &[MemberCall; 3],
    task: &TaskContext,
    backbone: &dyn Backbone,
    templates: &Templates,
    budgets: &TokenBudgets,
    rng: &mut PoolRng,
) -> ExecutionReport {
    match structure {
        StructureKind::Voting => {
            execute_voting(team, members, task, backbone, templates, budgets, rng)
        }
        StructureKind::Debate => {
            execute_debate(team, members, task, backbone, templates, budgets, rng)
        }
        StructureKind::GeneratorCritic => {
            execute_generator_critic(team, members, task, backbone, templates, budgets, rng)
        }
        StructureKind::Decompose => {
            execute_decompose(team, members, task, backbone, templates, budgets, rng)
        }
    }
}

/// Query vector for leadership retrieval: a one-hot over the niches seen so
/// far (stable first-seen order) concatenated with the team's sorted
/// competence triple on the task niche.
pub fn leadlearn_query(pool: &Pool, team: &TeamAssignment) -> Vec<f64> {
    let mut query: Vec<f64> = pool
        .seen_niches()
        .iter()
        .map(|z| if z == &team.niche { 1.0 } else { 0.0 })
        .collect();
    let mut triple = [
        pool.q(team.anchor, &team.niche),
        pool.q(team.complement, &team.niche),
        pool.q(team.scout, &team.niche),
    ];
    triple.sort_by(f64::total_cmp);
    query.extend_from_slice(&triple);
    query
}

/// Top-k bank entries by cosine against a query vector. Shorter embeddings
/// compare as zero-padded; ties resolve to older entries.
pub fn rank_bank(pool: &Pool, query: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = pool
        .lead_bank
        .iter()
        .enumerate()
        .map(|(i, record)| (i, cosine(query, &record.query_embedding)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Outcome of a structure-selection round.
#[derive(Debug, Clone)]
pub struct StructureChoice {
    pub structure: StructureKind,
    pub query: Vec<f64>,
    pub retrieved: usize,
    /// Set when the choice came from a fallback rather than the backbone:
    /// "nearest_record", "voting_default", or "backend_error".
    pub fallback: Option<&'static str>,
}

/// The leader retrieves similar past leadership rounds and proposes a
/// structure. Unparsable output falls back to the nearest retrieved
/// record's structure, then to voting; backbone failure yields voting.
#[allow(clippy::too_many_arguments)]
pub fn choose_structure(
    pool: &mut Pool,
    team: &TeamAssignment,
    task: &TaskContext,
    leader: &MemberCall,
    backbone: &dyn Backbone,
    templates: &Templates,
    budgets: &TokenBudgets,
    retrieval_k: usize,
) -> StructureChoice {
    let query = leadlearn_query(pool, team);
    let ranked = rank_bank(pool, &query, retrieval_k);
    let exemplars: Vec<StructureExemplar> = ranked
        .iter()
        .map(|(i, _)| {
            let record = &pool.lead_bank[*i];
            StructureExemplar { structure: record.structure, outcome: record.outcome }
        })
        .collect();
    let exemplar_lines: Vec<String> = ranked
        .iter()
        .map(|(i, score)| {
            let record = &pool.lead_bank[*i];
            format!(
                "structure={} reward={:.3} similarity={:.3} note={}",
                record.structure, record.outcome, score, record.reflection
            )
        })
        .collect();
    let profile = format!(
        "{:.3}, {:.3}, {:.3}",
        pool.q(team.anchor, &team.niche),
        pool.q(team.complement, &team.niche),
        pool.q(team.scout, &team.niche)
    );
    let prompt = templates.render(
        "choose_structure",
        &[
            ("task_id", task.id),
            ("niche", task.niche.as_str()),
            ("profile", &profile),
            ("exemplars", &numbered(&exemplar_lines)),
        ],
    );
    let mut request = BackboneRequest::new(BackboneOp::ChooseStructure, leader.persona.clone(), prompt)
        .with_exemplars(exemplars)
        .with_profile(vec![
            pool.q(team.anchor, &team.niche),
            pool.q(team.complement, &team.niche),
            pool.q(team.scout, &team.niche),
        ]);
    request.max_tokens = budgets.for_tag(request.tag);
    if let Some(sim) = &leader.sim {
        request = request.with_sim(sim.clone());
    }
    let nearest = ranked.first().map(|(i, _)| pool.lead_bank[*i].structure);
    match backbone.invoke(&request, &mut pool.rng) {
        Ok(text) => match StructureKind::parse(&text) {
            Some(structure) => {
                StructureChoice { structure, query, retrieved: ranked.len(), fallback: None }
            }
            None => match nearest {
                Some(structure) => StructureChoice {
                    structure,
                    query,
                    retrieved: ranked.len(),
                    fallback: Some("nearest_record"),
                },
                None => StructureChoice {
                    structure: StructureKind::Voting,
                    query,
                    retrieved: ranked.len(),
                    fallback: Some("voting_default"),
                },
            },
        },
        Err(_) => StructureChoice {
            structure: StructureKind::Voting,
            query,
            retrieved: ranked.len(),
            fallback: Some("backend_error"),
        },
    }
}

/// Append one leadership round to the shared bank.
#[allow(clippy::too_many_arguments)]
pub fn record_leadership(
    pool: &mut Pool,
    team: &TeamAssignment,
    task_embedding: &[f64],
    structure: StructureKind,
    outcome: f64,
    reflection: String,
    query_embedding: Vec<f64>,
) {
    let record = LeadershipRecord {
        team_profile: vec![
            (team.anchor, pool.q(team.anchor, &team.niche)),
            (team.complement, pool.q(team.complement, &team.niche)),
            (team.scout, pool.q(team.scout, &team.niche)),
        ],
        niche: team.niche.clone(),
        task_embedding: task_embedding.to_vec(),
        structure,
        outcome,
        reflection,
        query_embedding,
    };
    pool.lead_bank.push(record);
}
