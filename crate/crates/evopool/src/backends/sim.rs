//! Deterministic simulated-agent backbone. Every invocation is a pure
//! function of the request, the configured agent model, and the pool RNG, so
//! whole runs are reproducible and the engine's evolutionary mechanisms can
//! be verified against ground truth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::state::{InsightLevel, NicheLabel, Origin, PoolRng, StructureKind};
use crate::{Error, Result};

use super::{Backbone, BackboneOp, BackboneRequest, CoDreamPhase, SimContext};

/// Answer emitted by a simulated agent when its ability draw fails. Wrong
/// answers coincide across agents, which is what makes plain majority voting
/// collapse at low per-agent accuracy.
pub const WRONG_TOKEN: &str = "WRONG";

/// Competence above which the scripted leader model stops voting and drafts
/// for itself under a critic.
pub const CONFIDENT_LEADER_Q: f64 = 0.7;

/// Additive ability bonus from relevant injected insights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpliftConfig {
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_cap")]
    pub cap: f64,
    /// When false, only distilled insights received from other agents count;
    /// an agent's own reflection lessons carry no ability uplift.
    #[serde(default = "default_true")]
    pub count_self_lessons: bool,
}

fn default_delta() -> f64 {
    0.05
}
fn default_cap() -> f64 {
    0.95
}
fn default_true() -> bool {
    true
}

impl Default for UpliftConfig {
    fn default() -> Self {
        UpliftConfig { delta: 0.05, cap: 0.95, count_self_lessons: true }
    }
}

/// Ground-truth ability model for the simulated pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Fallback ability for niches not listed anywhere.
    #[serde(default = "default_base_ability")]
    pub base_ability: f64,
    /// Per-niche ability applied to every agent without an override.
    #[serde(default)]
    pub niche_ability: BTreeMap<String, f64>,
    /// Per-agent overrides, keyed by the id of the agent's fork-lineage
    /// root (initial agents are their own roots, ids 0..N-1).
    #[serde(default)]
    pub agent_abilities: BTreeMap<u32, BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uplift: Option<UpliftConfig>,
    /// Probability that an invocation errors out, for failure-path tests.
    #[serde(default)]
    pub failure_rate: f64,
    /// Exploration rate of the scripted structure-choice policy: with this
    /// probability the leader tries a uniformly random structure instead of
    /// the best-scoring retrieved one.
    #[serde(default = "default_structure_explore")]
    pub structure_explore: f64,
}

fn default_base_ability() -> f64 {
    0.5
}

fn default_structure_explore() -> f64 {
    0.15
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            base_ability: 0.5,
            niche_ability: BTreeMap::new(),
            agent_abilities: BTreeMap::new(),
            uplift: None,
            failure_rate: 0.0,
            structure_explore: default_structure_explore(),
        }
    }
}

impl SimConfig {
    pub fn base_ability_for(&self, root: u32, niche: &NicheLabel) -> f64 {
        if let Some(per_agent) = self.agent_abilities.get(&root) {
            if let Some(p) = per_agent.get(niche.as_str()) {
                return *p;
            }
        }
        self.niche_ability
            .get(niche.as_str())
            .copied()
            .unwrap_or(self.base_ability)
    }

    /// Ability after insight uplift: base + delta per relevant injected
    /// entry, capped. Uplift never decreases ability.
    pub fn effective_ability(&self, ctx: &SimContext) -> f64 {
        let base = self.base_ability_for(ctx.root_index, &ctx.niche);
        let Some(uplift) = &self.uplift else {
            return base;
        };
        let relevant = ctx
            .injected
            .iter()
            .filter(|meta| {
                let counted = uplift.count_self_lessons || meta.origin == Origin::Codream;
                counted && entry_relevant(meta, &ctx.niche)
            })
            .count();
        (base + uplift.delta * relevant as f64).min(uplift.cap.max(base)).clamp(0.0, 1.0)
    }
}

/// An injected entry applies to a task when its niche scope matches the task
/// niche, or when it is cross-domain knowledge from the same domain.
pub fn entry_relevant(meta: &super::InjectedMeta, task_niche: &NicheLabel) -> bool {
    if meta.niche_scope.as_ref() == Some(task_niche) {
        return true;
    }
    meta.level == InsightLevel::CrossDomain
        && meta
            .source_niche
            .as_ref()
            .is_some_and(|src| src.domain() == task_niche.domain())
}

// Phrase tables for scripted text output. Entries are deliberately worded
// apart so the hashing embedder keeps distinct lessons below the dedup
// threshold while identical draws dedup exactly.
const TECHNIQUES: [&str; 8] = [
    "decompose the problem into independent cases and count each separately",
    "work backwards from the required quantity toward the given values",
    "exploit symmetry to cut the search space in half before enumerating",
    "translate the statement into modular form before manipulating terms",
    "bound the answer with small examples before generalizing the argument",
    "rewrite sums as telescoping differences so adjacent terms cancel",
    "check boundary inputs first since edge behavior exposes wrong formulas",
    "convert word constraints into equations one clause at a time",
];

const META_PRINCIPLES: [&str; 8] = [
    "restate the goal in your own words before attempting a solution",
    "verify each intermediate result against a quick magnitude estimate",
    "prefer the representation that makes the invariants explicit",
    "when stuck, enumerate small instances and look for a pattern",
    "separate what is known from what is assumed before reasoning",
    "identify the hardest subgoal and spend effort there first",
    "name intermediate quantities so later steps stay consistent",
    "after solving, re-read the question to confirm the asked quantity",
];

const STRATEGIES: [&str; 10] = [
    "maintain a running table of partial results to avoid recomputation",
    "identify the governing recurrence before attempting closed forms",
    "normalize units and scales before comparing any two quantities",
    "cross-check the final expression by substituting degenerate values",
    "split rare failure cases from the main path and handle them explicitly",
    "prefer counting complements when direct enumeration explodes",
    "linearize nested conditions into a single decision sequence",
    "cache verified sub-results and reuse them across similar subgoals",
    "map the task onto a known archetype before doing custom reasoning",
    "estimate the expected magnitude first to catch arithmetic slips",
];

const DIAGNOSES: [&str; 6] = [
    "rushed the final arithmetic step",
    "misread one constraint in the statement",
    "picked an unsuitable representation early on",
    "skipped validating an intermediate result",
    "overlooked a boundary case",
    "lost track of a derived quantity mid-way",
];

/// Deterministic simulated backbone.
#[derive(Debug, Clone, Default)]
pub struct SimBackbone {
    pub config: SimConfig,
}

impl SimBackbone {
    pub fn new(config: SimConfig) -> Self {
        SimBackbone { config }
    }

    fn ctx<'a>(request: &'a BackboneRequest) -> Result<&'a SimContext> {
        request
            .sim
            .as_ref()
            .ok_or_else(|| Error::Backend("sim backbone needs a sim context".into()))
    }

    fn draw_answer(&self, ctx: &SimContext, rng: &mut PoolRng) -> String {
        let ability = self.config.effective_ability(ctx);
        let token = ctx.correct_token.clone().unwrap_or_else(|| "UNKNOWN".into());
        if rng.next_f64() < ability {
            token
        } else {
            WRONG_TOKEN.to_string()
        }
    }
}

impl Backbone for SimBackbone {
    fn invoke(&self, request: &BackboneRequest, rng: &mut PoolRng) -> Result<String> {
        if self.config.failure_rate > 0.0 && rng.next_f64() < self.config.failure_rate {
            return Err(Error::Backend("injected simulated failure".into()));
        }
        let ctx = Self::ctx(request)?;
        let out = match request.op {
            BackboneOp::Solve => self.draw_answer(ctx, rng),
            BackboneOp::DebateRevise => {
                // Confidence-weighted conformity: keep an own answer with
                // probability equal to ability, otherwise adopt the round-1
                // majority when one exists (or answer afresh).
                let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                for answer in &request.peer_answers {
                    *counts.entry(answer.trim()).or_insert(0) += 1;
                }
                let majority = counts
                    .iter()
                    .max_by_key(|(_, c)| **c)
                    .filter(|(_, c)| **c >= 2)
                    .map(|(a, _)| a.to_string());
                let ability = self.config.effective_ability(ctx);
                let keep_own = rng.next_f64() < ability;
                if keep_own {
                    self.draw_answer(ctx, rng)
                } else {
                    majority.unwrap_or_else(|| self.draw_answer(ctx, rng))
                }
            }
            BackboneOp::Critique => {
                let draft = request.peer_answers.first().map(String::as_str).unwrap_or("");
                let wrong = ctx
                    .correct_token
                    .as_deref()
                    .is_some_and(|token| draft.trim() != token.trim());
                let ability = self.config.effective_ability(ctx);
                if wrong && rng.next_f64() < ability {
                    format!("ISSUE: the draft answer looks wrong ({})", DIAGNOSES[rng.pick(DIAGNOSES.len())])
                } else {
                    "OK: no issues found".to_string()
                }
            }
            BackboneOp::ReviseDraft => {
                let draft = request.peer_answers.first().cloned().unwrap_or_default();
                let critique = request.peer_answers.get(1).map(String::as_str).unwrap_or("");
                if critique.trim_start().starts_with("ISSUE") {
                    self.draw_answer(ctx, rng)
                } else {
                    draft
                }
            }
            BackboneOp::VerifyDraft => {
                let revision = request.peer_answers.first().map(String::as_str).unwrap_or("");
                let ok = ctx
                    .correct_token
                    .as_deref()
                    .is_some_and(|token| revision.trim() == token.trim());
                if ok {
                    "VERIFIED".to_string()
                } else {
                    "FLAG: the revision may still be incorrect".to_string()
                }
            }
            BackboneOp::SplitTask => {
                let parts = 2 + rng.pick(2);
                let mut lines = Vec::new();
                for i in 1..=parts {
                    lines.push(format!("SUBTASK {i}: handle part {i} of {}", ctx.task_id));
                }
                lines.join("\n")
            }
            BackboneOp::Compose => {
                let token = ctx.correct_token.clone().unwrap_or_else(|| "UNKNOWN".into());
                let all_good = !request.peer_answers.is_empty()
                    && request.peer_answers.iter().all(|a| a.trim() == token.trim());
                if all_good {
                    token
                } else {
                    WRONG_TOKEN.to_string()
                }
            }
            BackboneOp::Reflect => {
                let lesson = TECHNIQUES[rng.pick(TECHNIQUES.len())];
                let meta = META_PRINCIPLES[rng.pick(META_PRINCIPLES.len())];
                format!("LESSON: for {} tasks: {lesson}\nMETA: {meta}", ctx.niche)
            }
            BackboneOp::Codream(phase) => self.codream_phase(phase, ctx, request, rng),
            BackboneOp::ChooseStructure => {
                let explore = self.config.structure_explore > 0.0
                    && rng.next_f64() < self.config.structure_explore;
                let confident_leader =
                    request.profile.first().copied().unwrap_or(0.0) >= CONFIDENT_LEADER_Q;
                if explore {
                    StructureKind::ALL[rng.pick(StructureKind::ALL.len())].to_string()
                } else if confident_leader {
                    // A leader that clearly knows the niche drafts and lets a
                    // critic check it, rather than diluting its answer in a
                    // vote.
                    StructureKind::GeneratorCritic.to_string()
                } else if request.exemplars.is_empty() {
                    StructureKind::ALL[rng.pick(StructureKind::ALL.len())].to_string()
                } else {
                    // Pick the structure with the best mean outcome among the
                    // retrieved exemplars; enum order breaks exact ties.
                    let mut best = StructureKind::ALL[0];
                    let mut best_mean = f64::NEG_INFINITY;
                    for kind in StructureKind::ALL {
                        let scores: Vec<f64> = request
                            .exemplars
                            .iter()
                            .filter(|e| e.structure == kind)
                            .map(|e| e.outcome)
                            .collect();
                        if scores.is_empty() {
                            continue;
                        }
                        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
                        if mean > best_mean {
                            best_mean = mean;
                            best = kind;
                        }
                    }
                    best.to_string()
                }
            }
            BackboneOp::LeadershipNote => {
                let seen = request.peer_answers.first().map(String::as_str).unwrap_or("?");
                format!(
                    "note: structure {seen} on this profile; reuse when the team shape repeats [{}]",
                    rng.nonce()
                )
            }
            BackboneOp::PersonaMutation => {
                format!(
                    "Specialist in {} tasks; leans on: {} [{}]",
                    ctx.niche,
                    STRATEGIES[rng.pick(STRATEGIES.len())],
                    rng.nonce()
                )
            }
        };
        Ok(out)
    }
}

impl SimBackbone {
    fn codream_phase(
        &self,
        phase: CoDreamPhase,
        ctx: &SimContext,
        request: &BackboneRequest,
        rng: &mut PoolRng,
    ) -> String {
        match phase {
            CoDreamPhase::Reflect => {
                let own = request.peer_answers.first().map(String::as_str).unwrap_or("");
                let hit = ctx
                    .correct_token
                    .as_deref()
                    .is_some_and(|token| own.trim() == token.trim());
                let verdict = if hit { "the approach held up" } else { "the attempt failed" };
                format!(
                    "DIAGNOSIS: {verdict}; likely cause: {} [{}]",
                    DIAGNOSES[rng.pick(DIAGNOSES.len())],
                    rng.nonce()
                )
            }
            CoDreamPhase::Contrast => format!(
                "DELTA: the working attempt chose to {} while the failing one did not [{}]",
                STRATEGIES[rng.pick(STRATEGIES.len())],
                rng.nonce()
            ),
            CoDreamPhase::Imagine => {
                let proposals = 1 + rng.pick(2);
                let mut lines = Vec::new();
                for _ in 0..proposals {
                    let strategy = STRATEGIES[rng.pick(STRATEGIES.len())];
                    let cross = rng.next_f64() < 0.25;
                    let scope = if cross { "*".to_string() } else { ctx.niche.to_string() };
                    lines.push(format!(
                        "PROPOSAL: for {} work, {strategy} [{}] | NICHE: {scope}",
                        ctx.niche.domain(),
                        rng.nonce()
                    ));
                }
                lines.join("\n")
            }
            CoDreamPhase::Debate => {
                let mut kept = Vec::new();
                for i in 1..=request.peer_answers.len() {
                    if rng.next_f64() < 0.7 {
                        kept.push(i.to_string());
                    }
                }
                format!("KEEP: {}", kept.join(","))
            }
            CoDreamPhase::Crystallize => {
                let mut lines = Vec::new();
                for proposal in &request.peer_answers {
                    let (text, scope) = match proposal.rsplit_once("| NICHE:") {
                        Some((text, scope)) => (text.trim(), scope.trim()),
                        None => (proposal.trim(), "*"),
                    };
                    let text = text.trim_start_matches("PROPOSAL:").trim();
                    let (level, scope_out) = if scope == "*" {
                        ("cross_domain".to_string(), "-".to_string())
                    } else if rng.next_f64() < 0.2 {
                        ("task_local".to_string(), scope.to_string())
                    } else {
                        ("subdomain".to_string(), scope.to_string())
                    };
                    lines.push(format!("INSIGHT: {text} | LEVEL: {level} | SCOPE: {scope_out}"));
                }
                lines.join("\n")
            }
        }
    }
}
