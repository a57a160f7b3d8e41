//! Scalar update rules and derived statistics: EWMA competence and synergy
//! updates, style overlap between agents, under-exposure weighting, the
//! pool-level specialization index, and the majority-vote collapse curve.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::state::{Agent, NicheLabel, Pool, TeamAssignment};
use crate::{Error, Result};

/// Decay and window parameters for the credit-assignment machinery.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolutionParams {
    /// EWMA decay for per-agent competence.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// EWMA decay for pair synergy. Synergy is updated analogously to
    /// competence, so it defaults to the same value.
    #[serde(default = "default_alpha")]
    pub beta: f64,
    /// Rolling-window size for anchor-share analytics.
    #[serde(default = "default_window_w")]
    pub window_w: usize,
}

fn default_alpha() -> f64 {
    0.3
}

fn default_window_w() -> usize {
    32
}

impl Default for EvolutionParams {
    fn default() -> Self {
        EvolutionParams { alpha: 0.3, beta: 0.3, window_w: 32 }
    }
}

impl EvolutionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must be in (0,1), got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!("beta must be in (0,1), got {}", self.beta)));
        }
        if self.window_w < 2 {
            return Err(Error::Config(format!(
                "window_w must be at least 2, got {}",
                self.window_w
            )));
        }
        Ok(())
    }
}

/// Exponentially weighted update: `(1 - alpha) * q + alpha * r`.
pub fn ewma_update(q: f64, r: f64, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Contract(format!("ewma value out of range: {q}")));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Contract(format!("ewma reward out of range: {r}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Contract(format!("ewma decay out of range: {alpha}")));
    }
    Ok((1.0 - alpha) * q + alpha * r)
}

/// Propagate a shared team reward: every member's competence and exposure on
/// the task niche update, every unordered member pair's synergy updates, and
/// each member's recent-reward window grows by one sample.
pub fn update_after_task(
    pool: &mut Pool,
    team: &TeamAssignment,
    reward: f64,
    params: &EvolutionParams,
) -> Result<()> {
    if !(0.0..=1.0).contains(&reward) {
        return Err(Error::Contract(format!("reward out of range: {reward}")));
    }
    let members = team.members();
    for id in members {
        if !pool.contains(id) {
            return Err(Error::State(format!("team member {id} not in roster")));
        }
    }
    let niche = team.niche.clone();
    let task_index = pool.task_counter + 1;
    let cap = pool.window_cap();
    for id in members {
        let agent = pool.agent_mut(id)?;
        let updated = ewma_update(agent.q(&niche), reward, params.alpha)?;
        agent.set_q(&niche, updated);
        agent.bump_exposure(&niche);
        agent.push_reward(task_index, reward, cap);
        agent.tasks_participated += 1;
    }
    for (a, b) in [
        (members[0], members[1]),
        (members[0], members[2]),
        (members[1], members[2]),
    ] {
        pool.synergy.update(a, b, &niche, reward, params.beta);
    }
    Ok(())
}

/// Cosine similarity; 0.0 when either vector is all-zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..n {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    for &x in &a[n..] {
        na += x * x;
    }
    for &y in &b[n..] {
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Style overlap: cosine of two agents' competence vectors aligned over the
/// union of their seen niches. A niche seen by only one agent contributes
/// zero on the missing side. Clamped to [0,1].
pub fn style_overlap(a: &Agent, b: &Agent) -> f64 {
    let mut union: Vec<&NicheLabel> = a.seen_niches().collect();
    for z in b.seen_niches() {
        if !union.contains(&z) {
            union.push(z);
        }
    }
    if union.is_empty() {
        return 0.0;
    }
    let va: Vec<f64> = union
        .iter()
        .map(|z| a.competence_map().get(*z).copied().unwrap_or(0.0))
        .collect();
    let vb: Vec<f64> = union
        .iter()
        .map(|z| b.competence_map().get(*z).copied().unwrap_or(0.0))
        .collect();
    cosine(&va, &vb).clamp(0.0, 1.0)
}

/// Exploration weight for an agent with `n` exposures on a niche: `1/(1+n)`.
pub fn under_exposure(n: u64) -> f64 {
    1.0 / (1.0 + n as f64)
}

/// Specialization index over a window of anchor assignments:
/// `1 - H(anchors) / ln(n_pool)`, entropy in nats, clamped to [0,1].
pub fn specialization_index(anchor_window: &[crate::state::AgentId], n_pool: usize) -> Result<f64> {
    if anchor_window.is_empty() {
        return Err(Error::Contract("specialization index needs a non-empty window".into()));
    }
    if n_pool < 2 {
        return Err(Error::Contract(format!(
            "specialization index needs n_pool >= 2, got {n_pool}"
        )));
    }
    let mut counts: BTreeMap<crate::state::AgentId, usize> = BTreeMap::new();
    for id in anchor_window {
        *counts.entry(*id).or_insert(0) += 1;
    }
    let total = anchor_window.len() as f64;
    let entropy: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    Ok((1.0 - entropy / (n_pool as f64).ln()).clamp(0.0, 1.0))
}

/// Probability that a strict majority of `k` independent voters, each correct
/// with probability `p`, is correct. `k` must be odd so no tie is possible.
pub fn majority_correct_prob(k: usize, p: f64) -> Result<f64> {
    if k < 3 || k % 2 == 0 {
        return Err(Error::Contract(format!(
            "majority probability needs odd k >= 3, got {k}"
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Contract(format!("probability out of range: {p}")));
    }
    let mut total = 0.0;
    for j in (k / 2 + 1)..=k {
        total += binomial(k, j) * p.powi(j as i32) * (1.0 - p).powi((k - j) as i32);
    }
    Ok(total)
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}
