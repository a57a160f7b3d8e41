//! Periodic roster editing: prune persistent underperformers, merge
//! near-duplicate agents, seed coverage gaps, fork top performers, and
//! sharpen dominant personas in place. Operators run in a fixed order every
//! tau tasks, each seeing the roster as edited by its predecessors.

use serde::{Deserialize, Serialize};

use crate::backends::{Backbone, BackboneOp, BackboneRequest, SimContext, TokenBudgets};
use crate::codream::inject_insight;
use crate::evolve::style_overlap;
use crate::state::{Agent, AgentId, Lineage, LineageOp, NicheLabel, Pool};
use crate::templates::Templates;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifecycleParams {
    #[serde(default = "default_tau")]
    pub tau: u64,
    #[serde(default = "default_fork_top_frac")]
    pub fork_top_frac: f64,
    /// Minimum reward-window fill before fork/specialize eligibility.
    #[serde(default = "default_fork_min_window")]
    pub fork_min_window: usize,
    #[serde(default = "default_merge_cos")]
    pub merge_cos: f64,
    #[serde(default = "default_merge_min_tasks")]
    pub merge_min_tasks: u64,
    #[serde(default = "default_prune_ratio")]
    pub prune_ratio: f64,
    #[serde(default = "default_prune_streak")]
    pub prune_streak: usize,
    #[serde(default = "default_genesis_min_pool")]
    pub genesis_min_pool: usize,
    #[serde(default = "default_genesis_affinity")]
    pub genesis_affinity: f64,
    /// Dominant-niche lead over the second-best niche required before a
    /// persona is specialized in place.
    #[serde(default = "default_specialize_margin")]
    pub specialize_margin: f64,
}

fn default_tau() -> u64 {
    10
}
fn default_fork_top_frac() -> f64 {
    0.10
}
fn default_fork_min_window() -> usize {
    5
}
fn default_merge_cos() -> f64 {
    0.95
}
fn default_merge_min_tasks() -> u64 {
    10
}
fn default_prune_ratio() -> f64 {
    0.8
}
fn default_prune_streak() -> usize {
    10
}
fn default_genesis_min_pool() -> usize {
    15
}
fn default_genesis_affinity() -> f64 {
    0.4
}
fn default_specialize_margin() -> f64 {
    0.2
}

impl Default for LifecycleParams {
    fn default() -> Self {
        LifecycleParams {
            tau: 10,
            fork_top_frac: 0.10,
            fork_min_window: 5,
            merge_cos: 0.95,
            merge_min_tasks: 10,
            prune_ratio: 0.8,
            prune_streak: 10,
            genesis_min_pool: 15,
            genesis_affinity: 0.4,
            specialize_margin: 0.2,
        }
    }
}

/// Hard floor on the roster: selection needs a full team.
pub const POOL_FLOOR: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifecycleKind {
    Genesis,
    Fork,
    Merge,
    Prune,
    Specialize,
}

impl std::fmt::Display for LifecycleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LifecycleKind::Genesis => "genesis",
            LifecycleKind::Fork => "fork",
            LifecycleKind::Merge => "merge",
            LifecycleKind::Prune => "prune",
            LifecycleKind::Specialize => "specialize",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifecycleEvent {
    pub kind: LifecycleKind,
    pub subjects: Vec<AgentId>,
    pub reason: String,
    /// False for suppressed operations that changed nothing.
    pub applied: bool,
}

/// Shared context for the operators.
pub struct LifecycleCtx<'a> {
    pub backbone: &'a dyn Backbone,
    pub templates: &'a Templates,
    pub budgets: &'a TokenBudgets,
    /// Attach simulated-agent context to persona calls.
    pub sim_mode: bool,
    /// Dedup threshold used when merging stores.
    pub dedup_cos: f64,
}

impl<'a> LifecycleCtx<'a> {
    fn persona_call(
        &self,
        pool: &mut Pool,
        agent: AgentId,
        template: &str,
        vars: &[(&str, &str)],
        niche: &NicheLabel,
    ) -> Option<String> {
        let prompt = self.templates.render(template, vars);
        let mut request = BackboneRequest::new(BackboneOp::PersonaMutation, String::new(), prompt);
        request.max_tokens = self.budgets.for_tag(request.tag);
        if self.sim_mode {
            request = request.with_sim(SimContext {
                agent,
                root_index: pool.sim_ability_root(agent).0,
                niche: niche.clone(),
                task_id: "lifecycle".into(),
                correct_token: None,
                injected: Vec::new(),
            });
        }
        self.backbone.invoke(&request, &mut pool.rng).ok()
    }
}

/// No-op off the tau schedule; otherwise run prune, merge, genesis, fork,
/// specialize in that order (shrinking operators first so the genesis size
/// trigger sees the cleaned-up roster).
pub fn maybe_run(
    pool: &mut Pool,
    task_index: u64,
    last_niche: Option<&NicheLabel>,
    params: &LifecycleParams,
    ctx: &LifecycleCtx,
) -> Vec<LifecycleEvent> {
    if task_index == 0 || task_index % params.tau != 0 {
        return Vec::new();
    }
    let mut events = Vec::new();
    events.extend(op_prune(pool, params));
    events.extend(op_merge(pool, params, ctx));
    events.extend(op_genesis(pool, params, last_niche, ctx));
    events.extend(op_fork(pool, params, ctx));
    events.extend(op_specialize(pool, params, ctx));
    events
}

/// Retire agents whose last `prune_streak` rewards all sit below
/// `prune_ratio` times the pool mean reward. Agents with shorter histories
/// are immune; the roster never shrinks below the floor.
pub fn op_prune(pool: &mut Pool, params: &LifecycleParams) -> Vec<LifecycleEvent> {
    let all_rewards: Vec<f64> = pool
        .agents()
        .flat_map(|a| a.reward_window().iter().map(|s| s.reward))
        .collect();
    if all_rewards.is_empty() {
        return Vec::new();
    }
    let pool_mean = all_rewards.iter().sum::<f64>() / all_rewards.len() as f64;
    let threshold = params.prune_ratio * pool_mean;

    let mut candidates: Vec<(AgentId, f64)> = pool
        .agents()
        .filter(|a| a.reward_window().len() >= params.prune_streak)
        .filter(|a| {
            a.reward_window()
                .iter()
                .rev()
                .take(params.prune_streak)
                .all(|s| s.reward < threshold)
        })
        .map(|a| (a.id, a.window_mean().unwrap_or(0.0)))
        .collect();
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));

    let mut events = Vec::new();
    for (id, mean) in candidates {
        if pool.roster_len() <= POOL_FLOOR {
            events.push(LifecycleEvent {
                kind: LifecycleKind::Prune,
                subjects: vec![id],
                reason: format!(
                    "suppressed: pruning would shrink the pool below {POOL_FLOOR} agents"
                ),
                applied: false,
            });
            continue;
        }
        pool.retire_agent(id).expect("prune candidate must be active");
        events.push(LifecycleEvent {
            kind: LifecycleKind::Prune,
            subjects: vec![id],
            reason: format!(
                "last {} rewards below {:.3} ({}x pool mean {:.3}); window mean {:.3}",
                params.prune_streak, threshold, params.prune_ratio, pool_mean, mean
            ),
            applied: true,
        });
    }
    events
}

/// Consolidate pairs whose competence profiles exceed the merge cosine with
/// enough own history. Highest-cosine pairs first; each agent merges at most
/// once per cycle. The survivor keeps the better recent record, takes
/// elementwise-max competence and summed exposure, and inherits the
/// retiree's stores through the dedup gate.
pub fn op_merge(pool: &mut Pool, params: &LifecycleParams, ctx: &LifecycleCtx) -> Vec<LifecycleEvent> {
    let ids = pool.agent_ids();
    let mut pairs: Vec<(AgentId, AgentId, f64)> = Vec::new();
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            let agent_a = pool.agent(a).unwrap();
            let agent_b = pool.agent(b).unwrap();
            if agent_a.tasks_participated < params.merge_min_tasks
                || agent_b.tasks_participated < params.merge_min_tasks
            {
                continue;
            }
            let cos = style_overlap(agent_a, agent_b);
            if cos > params.merge_cos {
                pairs.push((a, b, cos));
            }
        }
    }
    pairs.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));

    let mut used: Vec<AgentId> = Vec::new();
    let mut events = Vec::new();
    for (a, b, cos) in pairs {
        if used.contains(&a) || used.contains(&b) {
            continue;
        }
        if pool.roster_len() <= POOL_FLOOR {
            events.push(LifecycleEvent {
                kind: LifecycleKind::Merge,
                subjects: vec![a, b],
                reason: format!(
                    "suppressed: merging would shrink the pool below {POOL_FLOOR} agents"
                ),
                applied: false,
            });
            continue;
        }
        let mean_a = pool.agent(a).unwrap().window_mean().unwrap_or(0.0);
        let mean_b = pool.agent(b).unwrap().window_mean().unwrap_or(0.0);
        let (survivor, retired) = if mean_a >= mean_b { (a, b) } else { (b, a) };
        let removed = pool.retire_agent(retired).unwrap();

        let keeper = pool.agent_mut(survivor).unwrap();
        for (niche, q) in removed.competence_map() {
            if *q > keeper.q(niche) {
                keeper.set_q(niche, *q);
            }
        }
        let exposures: Vec<(NicheLabel, u64)> =
            removed.exposure_map().iter().map(|(z, n)| (z.clone(), *n)).collect();
        for (niche, n) in exposures {
            for _ in 0..n {
                keeper.bump_exposure(&niche);
            }
        }
        for entry in removed.all_entries() {
            inject_insight(keeper, entry, ctx.dedup_cos);
        }
        used.push(a);
        used.push(b);
        events.push(LifecycleEvent {
            kind: LifecycleKind::Merge,
            subjects: vec![survivor, retired],
            reason: format!("profile cosine {cos:.4} with at least {} own tasks each", params.merge_min_tasks),
            applied: true,
        });
    }
    events
}

fn most_generalist(pool: &Pool) -> Option<AgentId> {
    let union: Vec<NicheLabel> = pool.seen_niches().to_vec();
    pool.agents()
        .map(|a| {
            let values: Vec<f64> = union.iter().map(|z| a.q(z)).collect();
            let variance = if values.is_empty() {
                0.0
            } else {
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64
            };
            (a.id, variance)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(id, _)| id)
}

/// Seed a fresh agent when the pool is small or the latest niche has no
/// agent above the affinity threshold. The newcomer gets a generated
/// persona and empty stores; the most generalist agent is recorded as
/// lineage parent but nothing is inherited.
pub fn op_genesis(
    pool: &mut Pool,
    params: &LifecycleParams,
    last_niche: Option<&NicheLabel>,
    ctx: &LifecycleCtx,
) -> Vec<LifecycleEvent> {
    let size_trigger = pool.roster_len() < params.genesis_min_pool;
    let affinity_trigger = last_niche.and_then(|niche| {
        let best = pool
            .agents()
            .map(|a| a.q(niche))
            .fold(f64::NEG_INFINITY, f64::max);
        (best < params.genesis_affinity).then(|| (niche.clone(), best))
    });
    let reason = if let Some((niche, best)) = &affinity_trigger {
        format!("coverage gap for niche {niche}: max affinity {best:.3} below {}", params.genesis_affinity)
    } else if size_trigger {
        format!("pool size {} below {}", pool.roster_len(), params.genesis_min_pool)
    } else {
        return Vec::new();
    };

    let target = affinity_trigger
        .as_ref()
        .map(|(niche, _)| niche.clone())
        .or_else(|| last_niche.cloned())
        .or_else(|| pool.seen_niches().first().cloned())
        .unwrap_or_else(|| NicheLabel::new("general"));
    let parent = most_generalist(pool).expect("non-empty roster");
    let persona = ctx
        .persona_call(
            pool,
            parent,
            "persona_genesis",
            &[("niche", target.as_str())],
            &target,
        )
        .unwrap_or_else(|| format!("Problem-solving agent specializing in {target} tasks"));
    let fresh = pool.spawn_agent(persona, Some(Lineage { parent, op: LineageOp::Genesis }));
    vec![LifecycleEvent {
        kind: LifecycleKind::Genesis,
        subjects: vec![fresh, parent],
        reason,
        applied: true,
    }]
}

/// Agents ranked by rolling mean reward, restricted to those with enough
/// window fill. Returns the top `ceil(frac * roster)` ids.
fn top_performers(pool: &Pool, frac: f64, min_window: usize) -> Vec<AgentId> {
    let quota = ((frac * pool.roster_len() as f64).ceil() as usize).max(1);
    let mut ranked: Vec<(AgentId, f64)> = pool
        .agents()
        .filter(|a| a.reward_window().len() >= min_window)
        .map(|a| (a.id, a.window_mean().unwrap_or(0.0)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(quota).map(|(id, _)| id).collect()
}

fn dominant_niche(agent: &Agent) -> Option<(NicheLabel, f64)> {
    agent
        .competence_map()
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(z, q)| (z.clone(), *q))
}

/// Clone sustained top performers. The clone gets a persona mutation aimed
/// at the parent's dominant niche, a full copy of both stores, competence
/// and exposure, a fresh reward history, and a new id. The parent is
/// untouched.
pub fn op_fork(pool: &mut Pool, params: &LifecycleParams, ctx: &LifecycleCtx) -> Vec<LifecycleEvent> {
    let mut events = Vec::new();
    for parent_id in top_performers(pool, params.fork_top_frac, params.fork_min_window) {
        let parent = pool.agent(parent_id).unwrap();
        let Some((niche, _)) = dominant_niche(parent) else {
            continue;
        };
        let parent_persona = parent.persona.clone();
        let mut clone = parent.clone();
        let persona = ctx
            .persona_call(
                pool,
                parent_id,
                "persona_fork",
                &[("persona", &parent_persona), ("niche", niche.as_str())],
                &niche,
            )
            .unwrap_or_else(|| format!("{parent_persona} (specializing further in {niche})"));
        clone.persona = persona;
        clone.lineage = Some(Lineage { parent: parent_id, op: LineageOp::Fork });
        // The accumulated-task count rides along with the copied competence
        // profile, keeping an undiverged clone merge-eligible; the reward
        // window is the clone's own record and starts empty.
        clone.clear_reward_window();
        let child = pool.adopt_agent(clone);
        events.push(LifecycleEvent {
            kind: LifecycleKind::Fork,
            subjects: vec![parent_id, child],
            reason: format!("top performer cloned toward dominant niche {niche}"),
            applied: true,
        });
    }
    events
}

/// Nudge a sustained top performer's persona toward its dominant niche when
/// that niche clearly dominates the second best. In-place: no roster change.
pub fn op_specialize(
    pool: &mut Pool,
    params: &LifecycleParams,
    ctx: &LifecycleCtx,
) -> Vec<LifecycleEvent> {
    let mut events = Vec::new();
    for id in top_performers(pool, params.fork_top_frac, params.fork_min_window) {
        let agent = pool.agent(id).unwrap();
        let Some((niche, best_q)) = dominant_niche(agent) else {
            continue;
        };
        let second = agent
            .competence_map()
            .iter()
            .filter(|(z, _)| **z != niche)
            .map(|(_, q)| *q)
            .fold(f64::NEG_INFINITY, f64::max);
        let second = if second.is_finite() { second } else { crate::state::DEFAULT_COMPETENCE };
        // Tolerant comparison so a margin sitting exactly at the threshold
        // qualifies despite floating-point rounding.
        if best_q - second < params.specialize_margin - 1e-9 {
            continue;
        }
        let persona = agent.persona.clone();
        let Some(mutated) = ctx.persona_call(
            pool,
            id,
            "persona_specialize",
            &[("persona", &persona), ("niche", niche.as_str())],
            &niche,
        ) else {
            continue;
        };
        pool.agent_mut(id).unwrap().persona = mutated;
        events.push(LifecycleEvent {
            kind: LifecycleKind::Specialize,
            subjects: vec![id],
            reason: format!(
                "dominant niche {niche} at {best_q:.3} leads second-best {second:.3} by >= {}",
                params.specialize_margin
            ),
            applied: true,
        });
    }
    events
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{Embedder, SimBackbone, SimConfig};
    use crate::state::{ExperienceEntry, InsightLevel, Origin};

    fn niche(s: &str) -> NicheLabel {
        NicheLabel::new(s)
    }

    fn sim_ctx<'a>(backbone: &'a SimBackbone, templates: &'a Templates, budgets: &'a TokenBudgets) -> LifecycleCtx<'a> {
        LifecycleCtx { backbone: backbone as &dyn Backbone, templates, budgets, sim_mode: true, dedup_cos: 0.85 }
    }

    fn fill_window(pool: &mut Pool, id: AgentId, rewards: &[f64]) {
        let cap = pool.window_cap();
        let agent = pool.agent_mut(id).unwrap();
        for (i, r) in rewards.iter().enumerate() {
            agent.push_reward(i as u64, *r, cap);
            agent.tasks_participated += 1;
        }
    }

    #[test]
    fn off_schedule_cycles_do_nothing() {
        let backbone = SimBackbone::new(SimConfig::default());
        let templates = Templates::default();
        let budgets = TokenBudgets::default();
        let ctx = sim_ctx(&backbone, &templates, &budgets);
        let mut pool = Pool::new_pool(20, "p", 1).unwrap();
        assert!(maybe_run(&mut pool, 7, None, &LifecycleParams::default(), &ctx).is_empty());
        assert!(maybe_run(&mut pool, 0, None, &LifecycleParams::default(), &ctx).is_empty());
    }

    #[test]
    fn quiet_pool_produces_no_events() {
        let backbone = SimBackbone::new(SimConfig::default());
        let templates = Templates::default();
        let budgets = TokenBudgets::default();
        let ctx = sim_ctx(&backbone, &templates, &budgets);
        let mut pool = Pool::new_pool(20, "p", 1).unwrap();
        let z = niche("z");
        pool.note_niche(&z);
        // Mid rewards, no streaks, no duplicates, pool large, affinity fine.
        let ids = pool.agent_ids();
        for (i, id) in ids.iter().enumerate() {
            fill_window(&mut pool, *id, &[0.4 + 0.01 * i as f64; 4]);
        }
        let events = maybe_run(&mut pool, 10, Some(&z), &LifecycleParams::default(), &ctx);
        assert!(events.is_empty(), "unexpected events: {events:?}");
    }

    #[test]
    fn prune_requires_the_full_streak() {
        let backbone = SimBackbone::new(SimConfig::default());
        let templates = Templates::default();
        let budgets = TokenBudgets::default();
        let ctx = sim_ctx(&backbone, &templates, &budgets);
        let _ = &ctx;
        let mut pool = Pool::new_pool(6, "p", 1).unwrap();
        let ids = pool.agent_ids();
        // Healthy pool averaging 0.8.
        for &id in &ids[..4] {
            fill_window(&mut pool, id, &[0.8; 12]);
        }
        // One agent with a full losing streak, one a single reward short.
        fill_window(&mut pool, ids[4], &[0.0; 10]);
        fill_window(&mut pool, ids[5], &[0.0; 9]);
        let events = op_prune(&mut pool, &LifecycleParams::default());
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].subjects, vec![ids[4]]);
        assert!(events[0].applied);
        assert!(!pool.contains(ids[4]));
        assert!(pool.contains(ids[5]), "9-task streak is immune");
    }

    #[test]
    fn prune_is_blocked_at_the_pool_floor() {
        let backbone = SimBackbone::new(SimConfig::default());
        let templates = Templates::default();
        let budgets = TokenBudgets::default();
        let _ctx = sim_ctx(&backbone, &templates, &budgets);
        let mut pool = Pool::new_pool(3, "p", 1).unwrap();
        let ids = pool.agent_ids();
        fill_window(&mut pool, ids[0], &[0.9; 12]);
        fill_window(&mut pool, ids[1], &[0.9; 12]);
        fill_window(&mut pool, ids[2], &[0.0; 12]);
        let events = op_prune(&mut pool, &LifecycleParams::default());
        assert_eq!(events.len(), 1);
        assert!(!events[0].applied);
        assert!(events[0].reason.contains("suppressed"));
        assert_eq!(pool.roster_len(), 3);
    }

    #[test]
    fn boundary_reward_exactly_at_threshold_is_not_pruned() {
        // Pool mean 0.8 -> threshold 0.64. A streak sitting exactly at the
        // threshold does not satisfy the strict "below" rule.
        let backbone = SimBackbone::new(SimConfig::default());
        let templates = Templates::default();
        let budgets = TokenBudgets::default();
        let _ctx = sim_ctx(&backbone, &templates, &budgets);
        let mut pool = Pool::new_pool(5, "p", 1).unwrap();
        let ids = pool.agent_ids();
        for &id in &ids[..4] {
            fill_window(&mut pool, id, &[0.9; 10]);
        }
        // Pool mean with this agent's rewards: (36 + 10 * x) / 50.
        // x chosen so x == 0.8 * mean exactly: x = 36 * 0.8 / (50 - 8) ~ 0.6857...
        let x = 36.0 * 0.8 / 42.0;
        fill_window(&mut pool, ids[4], &[x; 10]);
        let events = op_prune(&mut pool, &LifecycleParams::default());
        assert!(events.is_empty(), "agent exactly at threshold must survive: {events:?}");
    }

    fn make_near_clones(pool: &mut Pool, a: AgentId, b: AgentId, tasks: u64) {
        let z1 = niche("z1");
        let z2 = niche("z2");
        for &id in &[a, b] {
            let agent = pool.agent_mut(id).unwrap();
            agent.set_q(&z1, 0.8);
            agent.set_q(&z2, 0.6);
            agent.tasks_participated = tasks;
        }
        let cap = pool.window_cap();
        pool.agent_mut(a).unwrap().push_reward(0, 0.9, cap);
        pool.agent_mut(b).unwrap().push_reward(0, 0.4, cap);
    }

    #[test]
    fn identical_profiles_with_enough_tasks_merge_once() {
        let backbone = SimBackbone::new(SimConfig::default());
        let templates = Templates::default();
        let budgets = TokenBudgets::default();
        let ctx = sim_ctx(&backbone, &templates, &budgets);
        let mut pool = Pool::new_pool(5, "p", 1).unwrap();
        let ids = pool.agent_ids();
        make_near_clones(&mut pool, ids[0], ids[1], 10);
        let events = op_merge(&mut pool, &LifecycleParams::default(), &ctx);
        assert_eq!(events.len(), 1);
        // Survivor is the better recent performer.
        assert_eq!(events[0].subjects, vec![ids[0], ids[1]]);
        assert!(pool.contains(ids[0]));
        assert!(!pool.contains(ids[1]));
    }

    #[test]
    fn merge_requires_enough_own_tasks() {
        let backbone = SimBackbone::new(SimConfig::default());
        let templates = Templates::default();
        let budgets = TokenBudgets::default();
        let ctx = sim_ctx(&backbone, &templates, &budgets);
        let mut pool = Pool::new_pool(5, "p", 1).unwrap();
        let ids = pool.agent_ids();
        make_near_clones(&mut pool, ids[0], ids[1], 9);
        let events = op_merge(&mut pool, &LifecycleParams::default(), &ctx);
        assert!(events.is_empty());
    }

    #[test]
    fn cosine_at_the_threshold_does_not_merge() {
        // Profiles built for an exact cosine of 0.95: (1, 0) vs
        // (0.95, sqrt(1 - 0.95^2)). "Exceeds" is strict.
        let backbone = SimBackbone::new(SimConfig::default());
        let templates = Templates::default();
        let budgets = TokenBudgets::default();
        let ctx = sim_ctx(&backbone, &templates, &budgets);
        let mut pool = Pool::new_pool(5, "p", 1).unwrap();
        let ids = pool.agent_ids();
        let z1 = niche("z1");
        let z2 = niche("z2");
        {
            let a = pool.agent_mut(ids[0]).unwrap();
            a.set_q(&z1, 1.0);
            a.set_q(&z2, 0.0);
            a.tasks_participated = 20;
        }
        {
            let b = pool.agent_mut(ids[1]).unwrap();
            b.set_q(&z1, 0.95);
            b.set_q(&z2, (1.0f64 - 0.95 * 0.95).sqrt());
            b.tasks_participated = 20;
        }
        let overlap = style_overlap(pool.agent(ids[0]).unwrap(), pool.agent(ids[1]).unwrap());
        assert!((overlap - 0.95).abs() < 1e-12);
        let events = op_merge(&mut pool, &LifecycleParams::default(), &ctx);
        assert!(events.is_empty(), "cosine exactly 0.95 must not merge");
    }

    #[test]
    fn merge_consolidates_competence_exposure_and_stores() {
        let backbone = SimBackbone::new(SimConfig::default());
        let templates = Templates::default();
        let budgets = TokenBudgets::default();
        let ctx = sim_ctx(&backbone, &templates, &budgets);
        let embedder = crate::backends::HashingEmbedder::default();
        let mut pool = Pool::new_pool(5, "p", 1).unwrap();
        let ids = pool.agent_ids();
        make_near_clones(&mut pool, ids[0], ids[1], 10);
        let z1 = niche("z1");
        // Divergent detail: retiree is stronger on z1 and carries a store.
        pool.agent_mut(ids[1]).unwrap().set_q(&z1, 0.81);
        for _ in 0..7 {
            pool.agent_mut(ids[1]).unwrap().bump_exposure(&z1);
        }
        pool.agent_mut(ids[0]).unwrap().bump_exposure(&z1);
        let entry = ExperienceEntry {
            embedding: embedder.embed("retiree wisdom about z1").unwrap(),
            text: "retiree wisdom about z1".into(),
            source_task: "t".into(),
            source_niche: Some(z1.clone()),
            level: InsightLevel::Subdomain,
            niche_scope: Some(z1.clone()),
            origin: Origin::Codream,
            giver: None,
        };
        pool.agent_mut(ids[1]).unwrap().niche_lessons.entry(z1.clone()).or_default().push(entry);

        let events = op_merge(&mut pool, &LifecycleParams::default(), &ctx);
        assert_eq!(events.len(), 1);
        let survivor = pool.agent(ids[0]).unwrap();
        assert!((survivor.q(&z1) - 0.81).abs() < 1e-12, "elementwise max");
        assert_eq!(survivor.exposure(&z1), 8, "summed exposure");
        assert_eq!(survivor.store_size(), 1, "store inherited");
    }

    #[test]
    fn three_near_identical_agents_merge_pairwise_once_per_cycle() {
        let backbone = SimBackbone::new(SimConfig::default());
        let templates = Templates::default();
        let budgets = TokenBudgets::default();
        let ctx = sim_ctx(&backbone, &templates, &budgets);
        let mut pool = Pool::new_pool(6, "p", 1).unwrap();
        let ids = pool.agent_ids();
        for &id in &ids[..3] {
            let z = niche("z");
            let agent = pool.agent_mut(id).unwrap();
            agent.set_q(&z, 0.7);
            agent.tasks_participated = 15;
            let cap = 20;
            agent.push_reward(0, 0.5, cap);
        }
        let events = op_merge(&mut pool, &LifecycleParams::default(), &ctx);
        // One merge only: the survivor is already "used" this cycle.
        assert_eq!(events.iter().filter(|e| e.applied).count(), 1);
        assert_eq!(pool.roster_len(), 5);
    }

    #[test]
    fn genesis_fires_on_small_pools() {
        let backbone = SimBackbone::new(SimConfig::default());
        let templates = Templates::default();
        let budgets = TokenBudgets::default();
        let ctx = sim_ctx(&backbone, &templates, &budgets);
        let mut pool = Pool::new_pool(14, "p", 1).unwrap();
        let z = niche("z");
        pool.note_niche(&z);
        let events = op_genesis(&mut pool, &LifecycleParams::default(), Some(&z), &ctx);
        assert_eq!(events.len(), 1);
        assert_eq!(pool.roster_len(), 15);
        let fresh = events[0].subjects[0];
        let newcomer = pool.agent(fresh).unwrap();
        assert_eq!(newcomer.store_size(), 0, "genesis agents start empty");
        assert!(newcomer.competence_map().is_empty(), "default competence");
        assert_eq!(newcomer.lineage.as_ref().unwrap().op, LineageOp::Genesis);
    }

    #[test]
    fn default_competence_does_not_trip_the_affinity_trigger() {
        let backbone = SimBackbone::new(SimConfig::default());
        let templates = Templates::default();
        let budgets = TokenBudgets::default();
        let ctx = sim_ctx(&backbone, &templates, &budgets);
        let mut pool = Pool::new_pool(20, "p", 1).unwrap();
        let z = niche("new-niche");
        pool.note_niche(&z);
        // All q read as 0.5 >= 0.4.
        let events = op_genesis(&mut pool, &LifecycleParams::default(), Some(&z), &ctx);
        assert!(events.is_empty());
    }

    #[test]
    fn decayed_affinity_triggers_genesis_with_niche_in_reason() {
        let backbone = SimBackbone::new(SimConfig::default());
        let templates = Templates::default();
        let budgets = TokenBudgets::default();
        let ctx = sim_ctx(&backbone, &templates, &budgets);
        let mut pool = Pool::new_pool(20, "p", 1).unwrap();
        let z = niche("hard-niche");
        pool.note_niche(&z);
        for id in pool.agent_ids() {
            pool.agent_mut(id).unwrap().set_q(&z, 0.35);
        }
        let events = op_genesis(&mut pool, &LifecycleParams::default(), Some(&z), &ctx);
        assert_eq!(events.len(), 1);
        assert!(events[0].reason.contains("hard-niche"));
        assert_eq!(pool.roster_len(), 21);
    }

    #[test]
    fn affinity_exactly_at_threshold_does_not_trigger() {
        let backbone = SimBackbone::new(SimConfig::default());
        let templates = Templates::default();
        let budgets = TokenBudgets::default();
        let ctx = sim_ctx(&backbone, &templates, &budgets);
        let mut pool = Pool::new_pool(20, "p", 1).unwrap();
        let z = niche("edge-niche");
        pool.note_niche(&z);
        for id in pool.agent_ids() {
            pool.agent_mut(id).unwrap().set_q(&z, 0.4);
        }
        let events = op_genesis(&mut pool, &LifecycleParams::default(), Some(&z), &ctx);
        assert!(events.is_empty(), "max affinity == threshold is not a gap");
    }

    #[test]
    fn genesis_parent_is_the_most_generalist() {
        let backbone = SimBackbone::new(SimConfig::default());
        let templates = Templates::default();
        let budgets = TokenBudgets::default();
        let ctx = sim_ctx(&backbone, &templates, &budgets);
        let mut pool = Pool::new_pool(14, "p", 1).unwrap();
        let ids = pool.agent_ids();
        let z1 = niche("z1");
        let z2 = niche("z2");
        pool.note_niche(&z1);
        pool.note_niche(&z2);
        // A spiky specialist and a flat generalist.
        pool.agent_mut(ids[0]).unwrap().set_q(&z1, 0.95);
        pool.agent_mut(ids[0]).unwrap().set_q(&z2, 0.1);
        pool.agent_mut(ids[1]).unwrap().set_q(&z1, 0.55);
        pool.agent_mut(ids[1]).unwrap().set_q(&z2, 0.5);
        let events = op_genesis(&mut pool, &LifecycleParams::default(), None, &ctx);
        assert_eq!(events.len(), 1);
        let parent = events[0].subjects[1];
        assert_ne!(parent, ids[0], "the spiky specialist is not the generalist");
    }

    #[test]
    fn fork_targets_exactly_the_top_tenth() {
        let backbone = SimBackbone::new(SimConfig::default());
        let templates = Templates::default();
        let budgets = TokenBudgets::default();
        let ctx = sim_ctx(&backbone, &templates, &budgets);
        let mut pool = Pool::new_pool(20, "p", 1).unwrap();
        let ids = pool.agent_ids();
        let z = niche("z");
        for (i, &id) in ids.iter().enumerate() {
            fill_window(&mut pool, id, &[i as f64 / 20.0; 6]);
            pool.agent_mut(id).unwrap().set_q(&z, 0.5 + i as f64 / 100.0);
        }
        let events = op_fork(&mut pool, &LifecycleParams::default(), &ctx);
        // ceil(0.10 * 20) = 2 forks.
        assert_eq!(events.len(), 2);
        assert_eq!(pool.roster_len(), 22);
        let forked_parents: Vec<AgentId> = events.iter().map(|e| e.subjects[0]).collect();
        assert!(forked_parents.contains(&ids[19]));
        assert!(forked_parents.contains(&ids[18]));
    }

    #[test]
    fn fork_clone_copies_state_but_not_history_and_parent_is_untouched() {
        let backbone = SimBackbone::new(SimConfig::default());
        let templates = Templates::default();
        let budgets = TokenBudgets::default();
        let ctx = sim_ctx(&backbone, &templates, &budgets);
        let embedder = crate::backends::HashingEmbedder::default();
        let mut pool = Pool::new_pool(3, "p", 1).unwrap();
        let ids = pool.agent_ids();
        let z = niche("z");
        fill_window(&mut pool, ids[0], &[0.9; 6]);
        pool.agent_mut(ids[0]).unwrap().set_q(&z, 0.9);
        let entry = ExperienceEntry {
            embedding: embedder.embed("parent lesson").unwrap(),
            text: "parent lesson".into(),
            source_task: "t".into(),
            source_niche: Some(z.clone()),
            level: InsightLevel::Subdomain,
            niche_scope: Some(z.clone()),
            origin: Origin::SelfReflection,
            giver: None,
        };
        pool.agent_mut(ids[0])
            .unwrap()
            .niche_lessons
            .entry(z.clone())
            .or_default()
            .push(entry);
        let parent_snapshot = serde_json::to_vec(pool.agent(ids[0]).unwrap()).unwrap();

        let events = op_fork(&mut pool, &LifecycleParams::default(), &ctx);
        assert_eq!(events.len(), 1);
        let child_id = events[0].subjects[1];
        let child = pool.agent(child_id).unwrap();
        assert!((child.q(&z) - 0.9).abs() < 1e-12, "competence copied");
        assert_eq!(child.store_size(), 1, "stores copied");
        assert!(child.reward_window().is_empty(), "fresh reward history");
        assert_eq!(child.tasks_participated, pool.agent(ids[0]).unwrap().tasks_participated);
        assert_eq!(child.lineage.as_ref().unwrap().parent, ids[0]);
        // Parent byte-identical.
        let parent_after = serde_json::to_vec(pool.agent(ids[0]).unwrap()).unwrap();
        assert_eq!(parent_snapshot, parent_after);
    }

    #[test]
    fn specialize_needs_a_clear_dominance_margin() {
        let backbone = SimBackbone::new(SimConfig::default());
        let templates = Templates::default();
        let budgets = TokenBudgets::default();
        let ctx = sim_ctx(&backbone, &templates, &budgets);
        let mut pool = Pool::new_pool(3, "p", 1).unwrap();
        let ids = pool.agent_ids();
        let z1 = niche("z1");
        let z2 = niche("z2");
        fill_window(&mut pool, ids[0], &[0.9; 6]);
        {
            let a = pool.agent_mut(ids[0]).unwrap();
            a.set_q(&z1, 0.9);
            a.set_q(&z2, 0.3);
        }
        let before = pool.agent(ids[0]).unwrap().persona.clone();
        let events = op_specialize(&mut pool, &LifecycleParams::default(), &ctx);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].subjects, vec![ids[0]]);
        assert_ne!(pool.agent(ids[0]).unwrap().persona, before, "persona mutated in place");
        assert_eq!(pool.roster_len(), 3, "roster unchanged");
    }

    #[test]
    fn narrow_margin_blocks_specialization() {
        let backbone = SimBackbone::new(SimConfig::default());
        let templates = Templates::default();
        let budgets = TokenBudgets::default();
        let ctx = sim_ctx(&backbone, &templates, &budgets);
        let mut pool = Pool::new_pool(3, "p", 1).unwrap();
        let ids = pool.agent_ids();
        fill_window(&mut pool, ids[0], &[0.9; 6]);
        {
            let a = pool.agent_mut(ids[0]).unwrap();
            a.set_q(&niche("z1"), 0.6);
            a.set_q(&niche("z2"), 0.55);
        }
        let events = op_specialize(&mut pool, &LifecycleParams::default(), &ctx);
        assert!(events.is_empty(), "margin 0.05 is below 0.2");
    }

    #[test]
    fn single_niche_specialization_compares_against_the_prior() {
        let backbone = SimBackbone::new(SimConfig::default());
        let templates = Templates::default();
        let budgets = TokenBudgets::default();
        let ctx = sim_ctx(&backbone, &templates, &budgets);
        let mut pool = Pool::new_pool(3, "p", 1).unwrap();
        let ids = pool.agent_ids();
        fill_window(&mut pool, ids[0], &[0.9; 6]);
        pool.agent_mut(ids[0]).unwrap().set_q(&niche("only"), 0.72);
        // 0.72 - 0.5 >= 0.2: fires.
        let events = op_specialize(&mut pool, &LifecycleParams::default(), &ctx);
        assert_eq!(events.len(), 1);
    }

    #[test]
    fn margin_exactly_at_threshold_fires() {
        let backbone = SimBackbone::new(SimConfig::default());
        let templates = Templates::default();
        let budgets = TokenBudgets::default();
        let ctx = sim_ctx(&backbone, &templates, &budgets);
        let mut pool = Pool::new_pool(3, "p", 1).unwrap();
        let ids = pool.agent_ids();
        fill_window(&mut pool, ids[0], &[0.9; 6]);
        pool.agent_mut(ids[0]).unwrap().set_q(&niche("only"), 0.7);
        let events = op_specialize(&mut pool, &LifecycleParams::default(), &ctx);
        assert_eq!(events.len(), 1, "margin of exactly 0.2 qualifies");
    }

    #[test]
    fn all_triggers_fire_in_operator_order() {
        let backbone = SimBackbone::new(SimConfig::default());
        let templates = Templates::default();
        let budgets = TokenBudgets::default();
        let ctx = sim_ctx(&backbone, &templates, &budgets);
        let mut pool = Pool::new_pool(8, "p", 1).unwrap();
        let ids = pool.agent_ids();
        let z = niche("z");
        pool.note_niche(&z);
        // Prune target.
        fill_window(&mut pool, ids[0], &[0.0; 10]);
        // Merge pair.
        make_near_clones(&mut pool, ids[1], ids[2], 12);
        // Top performer for fork + specialize with clear dominance.
        fill_window(&mut pool, ids[3], &[1.0; 8]);
        pool.agent_mut(ids[3]).unwrap().set_q(&z, 0.95);
        // Others keep mid rewards so the pool mean stays up.
        for &id in &ids[4..] {
            fill_window(&mut pool, id, &[0.9; 6]);
        }
        let events = maybe_run(&mut pool, 10, Some(&z), &LifecycleParams::default(), &ctx);
        let kinds: Vec<LifecycleKind> = events.iter().map(|e| e.kind).collect();
        // Pool of 8 < 15, so genesis fires too.
        assert_eq!(
            kinds,
            vec![
                LifecycleKind::Prune,
                LifecycleKind::Merge,
                LifecycleKind::Genesis,
                LifecycleKind::Fork,
                LifecycleKind::Specialize,
            ]
        );
        assert!(pool.roster_len() >= POOL_FLOOR);
    }

    #[test]
    fn roster_stays_at_or_above_floor_after_any_cycle() {
        let backbone = SimBackbone::new(SimConfig::default());
        let templates = Templates::default();
        let budgets = TokenBudgets::default();
        let ctx = sim_ctx(&backbone, &templates, &budgets);
        for seed in 0..30 {
            let mut pool = Pool::new_pool(3, "p", seed).unwrap();
            let ids = pool.agent_ids();
            // Everyone is prune-worthy relative to a phantom high mean; the
            // floor must hold anyway.
            fill_window(&mut pool, ids[0], &[0.9; 12]);
            fill_window(&mut pool, ids[1], &[0.0; 12]);
            fill_window(&mut pool, ids[2], &[0.0; 12]);
            let _ = maybe_run(&mut pool, 10, None, &LifecycleParams::default(), &ctx);
            assert!(pool.roster_len() >= POOL_FLOOR);
        }
    }
}
