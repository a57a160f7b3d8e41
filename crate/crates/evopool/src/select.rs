//! Niche-conditioned team selection: the anchor is the niche's best
//! performer, the complement supplies capability and stylistic distinctness,
//! the scout enforces exploration. Selection is greedy, one role at a time,
//! with seeded uniform tie-breaking.

use serde::{Deserialize, Serialize};

use crate::evolve::{style_overlap, under_exposure};
use crate::state::{AgentId, NicheLabel, Pool, TeamAssignment};
use crate::{Error, Result};

/// Scores within this distance of the maximum count as tied, so floating
/// point noise cannot make tie-breaking platform-dependent.
pub const TIE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionWeights {
    #[serde(default = "default_lambda_q")]
    pub lambda_q: f64,
    #[serde(default = "default_lambda_sigma")]
    pub lambda_sigma: f64,
    #[serde(default = "default_lambda_omega")]
    pub lambda_omega: f64,
    #[serde(default = "default_lambda_u")]
    pub lambda_u: f64,
    #[serde(default = "default_lambda_d")]
    pub lambda_d: f64,
}

fn default_lambda_q() -> f64 {
    1.0
}
fn default_lambda_sigma() -> f64 {
    0.3
}
fn default_lambda_omega() -> f64 {
    0.5
}
fn default_lambda_u() -> f64 {
    0.3
}
fn default_lambda_d() -> f64 {
    0.5
}

impl Default for SelectionWeights {
    fn default() -> Self {
        SelectionWeights {
            lambda_q: 1.0,
            lambda_sigma: 0.3,
            lambda_omega: 0.5,
            lambda_u: 0.3,
            lambda_d: 0.5,
        }
    }
}

impl SelectionWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_q,
            self.lambda_sigma,
            self.lambda_omega,
            self.lambda_u,
            self.lambda_d,
        ];
        if all.iter().any(|w| *w < 0.0) {
            return Err(Error::Config("selection weights must be non-negative".into()));
        }
        if self.lambda_q <= 0.0 && self.lambda_sigma <= 0.0 && self.lambda_omega <= 0.0 {
            return Err(Error::Config("at least one complement weight must be positive".into()));
        }
        if self.lambda_u <= 0.0 && self.lambda_d <= 0.0 {
            return Err(Error::Config("at least one scout weight must be positive".into()));
        }
        Ok(())
    }
}

/// Argmax over scored candidates; candidates within [`TIE_EPS`] of the top
/// score are tied and resolved uniformly at random from the pool RNG.
/// A unique maximum consumes no randomness.
fn argmax_tied(pool: &mut Pool, scored: &[(AgentId, f64)]) -> Result<AgentId> {
    let best = scored
        .iter()
        .map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    if best == f64::NEG_INFINITY {
        return Err(Error::State("selection over an empty candidate set".into()));
    }
    let tied: Vec<AgentId> = scored
        .iter()
        .filter(|(_, s)| *s >= best - TIE_EPS)
        .map(|(id, _)| *id)
        .collect();
    if tied.len() == 1 {
        Ok(tied[0])
    } else {
        Ok(tied[pool.rng.pick(tied.len())])
    }
}

/// The niche's current best performer; ties broken uniformly at random.
pub fn select_anchor(pool: &mut Pool, niche: &NicheLabel) -> Result<AgentId> {
    if pool.roster_len() == 0 {
        return Err(Error::State("cannot select an anchor from an empty roster".into()));
    }
    let scored: Vec<(AgentId, f64)> =
        pool.agents().map(|a| (a.id, a.q(niche))).collect();
    argmax_tied(pool, &scored)
}

/// Best remaining agent by own competence, synergy with the anchor, and
/// stylistic distinctness from the anchor.
pub fn select_complement(
    pool: &mut Pool,
    anchor: AgentId,
    niche: &NicheLabel,
    weights: &SelectionWeights,
) -> Result<AgentId> {
    if pool.roster_len() < 2 {
        return Err(Error::State("complement selection needs at least 2 agents".into()));
    }
    let anchor_agent = pool.agent(anchor)?;
    let scored: Vec<(AgentId, f64)> = pool
        .agents()
        .filter(|a| a.id != anchor)
        .map(|a| {
            let score = weights.lambda_q * a.q(niche)
                + weights.lambda_sigma * pool.synergy.get(a.id, anchor, niche)
                + weights.lambda_omega * (1.0 - style_overlap(a, anchor_agent));
            (a.id, score)
        })
        .collect();
    argmax_tied(pool, &scored)
}

/// Exploration pick: favors agents under-exposed on the niche and
/// stylistically distinct from the two already-selected members.
pub fn select_scout(
    pool: &mut Pool,
    anchor: AgentId,
    complement: AgentId,
    niche: &NicheLabel,
    weights: &SelectionWeights,
) -> Result<AgentId> {
    if pool.roster_len() < 3 {
        return Err(Error::State("scout selection needs at least 3 agents".into()));
    }
    let anchor_agent = pool.agent(anchor)?;
    let complement_agent = pool.agent(complement)?;
    let scored: Vec<(AgentId, f64)> = pool
        .agents()
        .filter(|a| a.id != anchor && a.id != complement)
        .map(|a| {
            let mean_overlap =
                (style_overlap(a, anchor_agent) + style_overlap(a, complement_agent)) / 2.0;
            let score = weights.lambda_u * under_exposure(a.exposure(niche))
                + weights.lambda_d * (1.0 - mean_overlap);
            (a.id, score)
        })
        .collect();
    argmax_tied(pool, &scored)
}

/// Greedy anchor -> complement -> scout composition. The anchor leads.
pub fn select_team(
    pool: &mut Pool,
    niche: &NicheLabel,
    weights: &SelectionWeights,
) -> Result<TeamAssignment> {
    let anchor = select_anchor(pool, niche)?;
    let complement = select_complement(pool, anchor, niche, weights)?;
    let scout = select_scout(pool, anchor, complement, niche, weights)?;
    Ok(TeamAssignment { anchor, complement, scout, niche: niche.clone() })
}

/// Ablation path: three distinct members drawn uniformly, roles in draw
/// order.
pub fn random_team(pool: &mut Pool, niche: &NicheLabel) -> Result<TeamAssignment> {
    if pool.roster_len() < 3 {
        return Err(Error::State("team selection needs at least 3 agents".into()));
    }
    let mut remaining = pool.agent_ids();
    let mut picked = Vec::with_capacity(3);
    for _ in 0..3 {
        let idx = pool.rng.pick(remaining.len());
        picked.push(remaining.remove(idx));
    }
    Ok(TeamAssignment {
        anchor: picked[0],
        complement: picked[1],
        scout: picked[2],
        niche: niche.clone(),
    })
}
