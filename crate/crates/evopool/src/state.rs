//! Persistent evolutionary state: the agent pool, per-agent archives and
//! competence, the pair synergy table, the shared leadership bank, and the
//! seeded RNG that drives every random choice in a run.
//!
//! All collections are ordered (`BTreeMap`/`Vec`) so that iteration order,
//! serialization, and therefore whole runs are deterministic.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Competence prior for a niche the agent has never been scored on.
pub const DEFAULT_COMPETENCE: f64 = 0.5;
/// Default cap on the per-agent recent-reward window.
pub const REWARD_WINDOW_CAP: usize = 20;
/// Pair synergy reads as 0 until the pair has co-participated this many
/// times on the niche.
pub const SYNERGY_GATE: u64 = 5;
/// Snapshot container version.
pub const SNAPSHOT_VERSION: u32 = 1;

/// Opaque task-subtype key. Niches index per-agent competence, exposure,
/// and lesson buckets. A `/` separates an optional domain prefix from the
/// subtype (e.g. `math/aime22` has domain `math`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NicheLabel(String);

impl NicheLabel {
    pub fn new(value: impl Into<String>) -> Self {
        let value = value.into();
        assert!(!value.is_empty(), "niche label must be non-empty");
        NicheLabel(value)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Domain prefix used to decide whether cross-domain knowledge applies.
    pub fn domain(&self) -> &str {
        self.0.split('/').next().unwrap_or(&self.0)
    }
}

impl fmt::Display for NicheLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Pool-unique agent identifier. Ids are assigned by a monotone counter and
/// never reused, including after retirement.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

/// Seeded RNG with a draw counter. The counter is what run events report as
/// `rng_cursor`; it only ever moves forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRng {
    rng: ChaCha8Rng,
    cursor: u64,
}

impl PoolRng {
    pub fn seeded(seed: u64) -> Self {
        PoolRng {
            rng: ChaCha8Rng::seed_from_u64(seed),
            cursor: 0,
        }
    }

    pub fn next_f64(&mut self) -> f64 {
        self.cursor += 1;
        self.rng.gen::<f64>()
    }

    /// Uniform index in `0..n`.
    pub fn pick(&mut self, n: usize) -> usize {
        assert!(n > 0, "pick from empty range");
        self.cursor += 1;
        self.rng.gen_range(0..n)
    }

    /// Short deterministic hex string, handy for varying generated text.
    pub fn nonce(&mut self) -> String {
        self.cursor += 1;
        format!("{:08x}", self.rng.gen::<u32>())
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }
}

/// Granularity of a stored lesson or insight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsightLevel {
    TaskLocal,
    Subdomain,
    CrossDomain,
}

impl fmt::Display for InsightLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            InsightLevel::TaskLocal => "task_local",
            InsightLevel::Subdomain => "subdomain",
            InsightLevel::CrossDomain => "cross_domain",
        };
        f.write_str(s)
    }
}

/// Where an experience entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    SelfReflection,
    Codream,
}

/// One unit of stored experience: a lesson from self-reflection or a
/// distilled insight received from another agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceEntry {
    pub text: String,
    pub embedding: Vec<f64>,
    pub source_task: String,
    /// Niche of the task that produced the entry. Kept for all levels so the
    /// simulator can ground cross-domain relevance; distinct from
    /// `niche_scope`, which is only present for niche-scoped levels.
    pub source_niche: Option<NicheLabel>,
    pub level: InsightLevel,
    pub niche_scope: Option<NicheLabel>,
    pub origin: Origin,
    pub giver: Option<AgentId>,
}

impl ExperienceEntry {
    /// Scope/level consistency: niche_scope present iff level is not
    /// cross-domain.
    pub fn scope_consistent(&self) -> bool {
        match self.level {
            InsightLevel::CrossDomain => self.niche_scope.is_none(),
            _ => self.niche_scope.is_some(),
        }
    }
}

/// A crystallized insight together with its routing outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Insight {
    pub entry: ExperienceEntry,
    pub recipients: Vec<AgentId>,
    pub verified: bool,
}

/// One of the four collaboration structures a team can execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureKind {
    Voting,
    Debate,
    GeneratorCritic,
    Decompose,
}

impl StructureKind {
    pub const ALL: [StructureKind; 4] = [
        StructureKind::Voting,
        StructureKind::Debate,
        StructureKind::GeneratorCritic,
        StructureKind::Decompose,
    ];

    pub fn parse(text: &str) -> Option<StructureKind> {
        let lower = text.to_lowercase();
        // First mention wins when several names appear.
        let mut best: Option<(usize, StructureKind)> = None;
        for (needle, kind) in [
            ("voting", StructureKind::Voting),
            ("debate", StructureKind::Debate),
            ("generator-critic", StructureKind::GeneratorCritic),
            ("generator_critic", StructureKind::GeneratorCritic),
            ("decompose", StructureKind::Decompose),
        ] {
            if let Some(pos) = lower.find(needle) {
                if best.map_or(true, |(p, _)| pos < p) {
                    best = Some((pos, kind));
                }
            }
        }
        best.map(|(_, k)| k)
    }
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StructureKind::Voting => "voting",
            StructureKind::Debate => "debate",
            StructureKind::GeneratorCritic => "generator_critic",
            StructureKind::Decompose => "decompose",
        };
        f.write_str(s)
    }
}

/// One past leadership round in the pool-shared bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadershipRecord {
    /// (agent, competence on the task niche) for anchor, complement, scout.
    pub team_profile: Vec<(AgentId, f64)>,
    pub niche: NicheLabel,
    pub task_embedding: Vec<f64>,
    pub structure: StructureKind,
    pub outcome: f64,
    pub reflection: String,
    pub query_embedding: Vec<f64>,
}

/// Reward observed at a logical time (task index).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSample {
    pub task_index: u64,
    pub reward: f64,
}

/// How an agent came to exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineageOp {
    Genesis,
    Fork,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub parent: AgentId,
    pub op: LineageOp,
}

/// A pool member: persona, experience stores, competence and exposure maps,
/// and a bounded window of recent rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: AgentId,
    pub persona: String,
    competence: BTreeMap<NicheLabel, f64>,
    exposure: BTreeMap<NicheLabel, u64>,
    pub niche_lessons: BTreeMap<NicheLabel, Vec<ExperienceEntry>>,
    pub meta_insights: Vec<ExperienceEntry>,
    reward_window: VecDeque<RewardSample>,
    /// Tasks this agent has participated in since its own creation
    /// (not inherited on fork).
    pub tasks_participated: u64,
    pub lineage: Option<Lineage>,
}

impl Agent {
    fn new(id: AgentId, persona: String, lineage: Option<Lineage>) -> Self {
        Agent {
            id,
            persona,
            competence: BTreeMap::new(),
            exposure: BTreeMap::new(),
            niche_lessons: BTreeMap::new(),
            meta_insights: Vec::new(),
            reward_window: VecDeque::new(),
            tasks_participated: 0,
            lineage,
        }
    }

    /// Competence on a niche; unseen niches read as the 0.5 prior without
    /// materializing an entry.
    pub fn q(&self, niche: &NicheLabel) -> f64 {
        self.competence
            .get(niche)
            .copied()
            .unwrap_or(DEFAULT_COMPETENCE)
    }

    pub fn set_q(&mut self, niche: &NicheLabel, value: f64) {
        debug_assert!((0.0..=1.0).contains(&value), "competence out of range");
        self.competence
            .insert(niche.clone(), value.clamp(0.0, 1.0));
    }

    /// Niches this agent has actually been scored on.
    pub fn seen_niches(&self) -> impl Iterator<Item = &NicheLabel> {
        self.competence.keys()
    }

    pub fn competence_map(&self) -> &BTreeMap<NicheLabel, f64> {
        &self.competence
    }

    pub fn exposure(&self, niche: &NicheLabel) -> u64 {
        self.exposure.get(niche).copied().unwrap_or(0)
    }

    pub fn bump_exposure(&mut self, niche: &NicheLabel) {
        *self.exposure.entry(niche.clone()).or_insert(0) += 1;
    }

    pub fn exposure_map(&self) -> &BTreeMap<NicheLabel, u64> {
        &self.exposure
    }

    pub fn push_reward(&mut self, task_index: u64, reward: f64, cap: usize) {
        self.reward_window.push_back(RewardSample { task_index, reward });
        while self.reward_window.len() > cap {
            self.reward_window.pop_front();
        }
    }

    pub fn reward_window(&self) -> &VecDeque<RewardSample> {
        &self.reward_window
    }

    pub fn clear_reward_window(&mut self) {
        self.reward_window.clear();
    }

    /// Mean of the recent-reward window; `None` when empty.
    pub fn window_mean(&self) -> Option<f64> {
        if self.reward_window.is_empty() {
            return None;
        }
        let sum: f64 = self.reward_window.iter().map(|s| s.reward).sum();
        Some(sum / self.reward_window.len() as f64)
    }

    /// All experience entries, niche buckets first, then the meta pool.
    pub fn all_entries(&self) -> impl Iterator<Item = &ExperienceEntry> {
        self.niche_lessons
            .values()
            .flatten()
            .chain(self.meta_insights.iter())
    }

    pub fn store_size(&self) -> usize {
        self.niche_lessons.values().map(Vec::len).sum::<usize>() + self.meta_insights.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SynergyCell {
    ewma: f64,
    co_count: u64,
}

/// Pair synergy per niche, keyed by unordered agent pairs. The raw EWMA
/// accumulates from the first co-participation but reads as 0 until the
/// pair clears [`SYNERGY_GATE`] co-participations on the niche.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynergyTable {
    entries: BTreeMap<(AgentId, AgentId, NicheLabel), SynergyCell>,
}

fn pair_key(a: AgentId, b: AgentId, niche: &NicheLabel) -> (AgentId, AgentId, NicheLabel) {
    if a <= b {
        (a, b, niche.clone())
    } else {
        (b, a, niche.clone())
    }
}

impl SynergyTable {
    /// Gated synergy: 0.0 until the pair has co-participated enough times.
    pub fn get(&self, a: AgentId, b: AgentId, niche: &NicheLabel) -> f64 {
        match self.entries.get(&pair_key(a, b, niche)) {
            Some(cell) if cell.co_count >= SYNERGY_GATE => cell.ewma,
            _ => 0.0,
        }
    }

    /// Raw EWMA and co-participation count, ungated.
    pub fn raw(&self, a: AgentId, b: AgentId, niche: &NicheLabel) -> Option<(f64, u64)> {
        self.entries
            .get(&pair_key(a, b, niche))
            .map(|c| (c.ewma, c.co_count))
    }

    pub fn update(&mut self, a: AgentId, b: AgentId, niche: &NicheLabel, reward: f64, beta: f64) {
        let cell = self
            .entries
            .entry(pair_key(a, b, niche))
            .or_insert(SynergyCell { ewma: 0.0, co_count: 0 });
        cell.ewma = (1.0 - beta) * cell.ewma + beta * reward;
        cell.co_count += 1;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

// JSON object keys must be strings, so the table serializes as a list of
// entries (in key order, keeping the bytes deterministic).
#[derive(Serialize, Deserialize)]
struct SynergyEntryRepr {
    a: AgentId,
    b: AgentId,
    niche: NicheLabel,
    ewma: f64,
    co_count: u64,
}

impl Serialize for SynergyTable {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let items: Vec<SynergyEntryRepr> = self
            .entries
            .iter()
            .map(|((a, b, niche), cell)| SynergyEntryRepr {
                a: *a,
                b: *b,
                niche: niche.clone(),
                ewma: cell.ewma,
                co_count: cell.co_count,
            })
            .collect();
        items.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SynergyTable {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let items = Vec::<SynergyEntryRepr>::deserialize(deserializer)?;
        let mut table = SynergyTable::default();
        for item in items {
            table.entries.insert(
                pair_key(item.a, item.b, &item.niche),
                SynergyCell { ewma: item.ewma, co_count: item.co_count },
            );
        }
        Ok(table)
    }
}

/// The three functional roles assigned for one task. The anchor doubles as
/// team leader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeamAssignment {
    pub anchor: AgentId,
    pub complement: AgentId,
    pub scout: AgentId,
    pub niche: NicheLabel,
}

impl TeamAssignment {
    pub fn members(&self) -> [AgentId; 3] {
        [self.anchor, self.complement, self.scout]
    }

    pub fn leader(&self) -> AgentId {
        self.anchor
    }

    pub fn contains(&self, id: AgentId) -> bool {
        self.members().contains(&id)
    }

    pub fn role_name(&self, id: AgentId) -> Option<&'static str> {
        if id == self.anchor {
            Some("anchor")
        } else if id == self.complement {
            Some("complement")
        } else if id == self.scout {
            Some("scout")
        } else {
            None
        }
    }
}

/// Stub kept for a retired agent so ids are never reused and lineage chains
/// stay resolvable after pruning or merging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetiredAgent {
    pub persona: String,
    pub lineage: Option<Lineage>,
}

/// The whole evolvable state: mutable roster, synergy table, shared
/// leadership bank, RNG, and bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pool {
    roster: BTreeMap<AgentId, Agent>,
    pub synergy: SynergyTable,
    pub lead_bank: Vec<LeadershipRecord>,
    pub rng: PoolRng,
    pub task_counter: u64,
    next_agent_id: u32,
    seen_niches: Vec<NicheLabel>,
    retired: BTreeMap<AgentId, RetiredAgent>,
    window_cap: usize,
}

impl Pool {
    /// Build a pool of `n` identically initialized agents.
    pub fn new_pool(n: usize, persona: &str, seed: u64) -> Result<Pool> {
        if n < 3 {
            return Err(Error::Config(format!(
                "pool size must be at least 3, got {n}"
            )));
        }
        let mut pool = Pool {
            roster: BTreeMap::new(),
            synergy: SynergyTable::default(),
            lead_bank: Vec::new(),
            rng: PoolRng::seeded(seed),
            task_counter: 0,
            next_agent_id: 0,
            seen_niches: Vec::new(),
            retired: BTreeMap::new(),
            window_cap: REWARD_WINDOW_CAP,
        };
        for _ in 0..n {
            pool.spawn_agent(persona.to_string(), None);
        }
        Ok(pool)
    }

    pub fn spawn_agent(&mut self, persona: String, lineage: Option<Lineage>) -> AgentId {
        let id = AgentId(self.next_agent_id);
        self.next_agent_id += 1;
        self.roster.insert(id, Agent::new(id, persona, lineage));
        id
    }

    /// Insert a fully built agent under a fresh id (fork clones).
    pub fn adopt_agent(&mut self, mut agent: Agent) -> AgentId {
        let id = AgentId(self.next_agent_id);
        self.next_agent_id += 1;
        agent.id = id;
        self.roster.insert(id, agent);
        id
    }

    pub fn retire_agent(&mut self, id: AgentId) -> Result<Agent> {
        let agent = self
            .roster
            .remove(&id)
            .ok_or_else(|| Error::State(format!("cannot retire unknown agent {id}")))?;
        self.retired.insert(
            id,
            RetiredAgent { persona: agent.persona.clone(), lineage: agent.lineage.clone() },
        );
        Ok(agent)
    }

    pub fn agent(&self, id: AgentId) -> Result<&Agent> {
        self.roster
            .get(&id)
            .ok_or_else(|| Error::State(format!("agent {id} not in roster")))
    }

    pub fn agent_mut(&mut self, id: AgentId) -> Result<&mut Agent> {
        self.roster
            .get_mut(&id)
            .ok_or_else(|| Error::State(format!("agent {id} not in roster")))
    }

    pub fn contains(&self, id: AgentId) -> bool {
        self.roster.contains_key(&id)
    }

    pub fn is_retired(&self, id: AgentId) -> bool {
        self.retired.contains_key(&id)
    }

    pub fn agents(&self) -> impl Iterator<Item = &Agent> {
        self.roster.values()
    }

    pub fn agent_ids(&self) -> Vec<AgentId> {
        self.roster.keys().copied().collect()
    }

    pub fn roster_len(&self) -> usize {
        self.roster.len()
    }

    pub fn retired_ids(&self) -> Vec<AgentId> {
        self.retired.keys().copied().collect()
    }

    /// Total agents ever created (active + retired).
    pub fn total_created(&self) -> u32 {
        self.next_agent_id
    }

    pub fn q(&self, id: AgentId, niche: &NicheLabel) -> f64 {
        self.roster
            .get(&id)
            .map(|a| a.q(niche))
            .unwrap_or(DEFAULT_COMPETENCE)
    }

    /// Record a niche the pool has encountered, preserving first-seen order.
    pub fn note_niche(&mut self, niche: &NicheLabel) {
        if !self.seen_niches.contains(niche) {
            self.seen_niches.push(niche.clone());
        }
    }

    pub fn seen_niches(&self) -> &[NicheLabel] {
        &self.seen_niches
    }

    pub fn window_cap(&self) -> usize {
        self.window_cap
    }

    fn lineage_of(&self, id: AgentId) -> Option<&Lineage> {
        if let Some(agent) = self.roster.get(&id) {
            agent.lineage.as_ref()
        } else {
            self.retired.get(&id).and_then(|r| r.lineage.as_ref())
        }
    }

    /// Follow fork lineage back to the ancestor whose simulated ability this
    /// agent inherits. Genesis agents are their own root.
    pub fn sim_ability_root(&self, id: AgentId) -> AgentId {
        let mut current = id;
        loop {
            match self.lineage_of(current) {
                Some(Lineage { parent, op: LineageOp::Fork }) => current = *parent,
                _ => return current,
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotEnvelope {
    version: u32,
    pool: Pool,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

/// Serialize the pool (RNG position included) into a versioned container.
pub fn snapshot(pool: &Pool) -> Result<Vec<u8>> {
    let envelope = SnapshotEnvelope { version: SNAPSHOT_VERSION, pool: pool.clone() };
    Ok(serde_json::to_vec(&envelope)?)
}

/// Rebuild a pool from snapshot bytes, checking the container version.
pub fn restore(bytes: &[u8]) -> Result<Pool> {
    let probe: VersionProbe = serde_json::from_slice(bytes)
        .map_err(|e| Error::Decode(format!("unreadable snapshot container: {e}")))?;
    if probe.version != SNAPSHOT_VERSION {
        return Err(Error::Decode(format!(
            "snapshot version {} not supported (expected {})",
            probe.version, SNAPSHOT_VERSION
        )));
    }
    let envelope: SnapshotEnvelope = serde_json::from_slice(bytes)
        .map_err(|e| Error::Decode(format!("malformed snapshot body: {e}")))?;
    Ok(envelope.pool)
}
