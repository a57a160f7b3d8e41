//! The agent-invocation boundary: a chat-completion HTTP client for
//! deployment, a deterministic simulated-agent model for verification, an
//! embedding provider, and graders.

mod embed;
mod grade;
mod http;
mod sim;

pub use embed::{
    cosine_of, Embedder, HashingEmbedder, RemoteEmbedder, RemoteEmbedderConfig, EMBED_DIM,
};
pub use grade::{grade, normalize_answer, token_f1, GraderBinding, GraderKind};
pub use http::{HttpBackbone, HttpConfig};
pub use sim::{SimBackbone, SimConfig, UpliftConfig};

use serde::{Deserialize, Serialize};

use crate::state::{AgentId, InsightLevel, NicheLabel, Origin, PoolRng, StructureKind};
use crate::Result;

/// Coarse request category; decides the prompt template family and the
/// token budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestTag {
    Solve,
    Reflect,
    CodreamPhase,
    Leadlearn,
    PersonaMutation,
}

/// The five phases of a post-task distillation session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoDreamPhase {
    Reflect,
    Contrast,
    Imagine,
    Debate,
    Crystallize,
}

impl std::fmt::Display for CoDreamPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CoDreamPhase::Reflect => "reflect",
            CoDreamPhase::Contrast => "contrast",
            CoDreamPhase::Imagine => "imagine",
            CoDreamPhase::Debate => "debate",
            CoDreamPhase::Crystallize => "crystallize",
        };
        f.write_str(s)
    }
}

/// Fine-grained protocol operation. The HTTP backbone only sees the rendered
/// prompt; the simulator keys its scripted behavior off this.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneOp {
    Solve,
    DebateRevise,
    Critique,
    ReviseDraft,
    VerifyDraft,
    SplitTask,
    Compose,
    Reflect,
    Codream(CoDreamPhase),
    ChooseStructure,
    LeadershipNote,
    PersonaMutation,
}

impl BackboneOp {
    pub fn tag(&self) -> RequestTag {
        match self {
            BackboneOp::Solve
            | BackboneOp::DebateRevise
            | BackboneOp::Critique
            | BackboneOp::ReviseDraft
            | BackboneOp::VerifyDraft
            | BackboneOp::SplitTask
            | BackboneOp::Compose => RequestTag::Solve,
            BackboneOp::Reflect => RequestTag::Reflect,
            BackboneOp::Codream(_) => RequestTag::CodreamPhase,
            BackboneOp::ChooseStructure | BackboneOp::LeadershipNote => RequestTag::Leadlearn,
            BackboneOp::PersonaMutation => RequestTag::PersonaMutation,
        }
    }
}

/// Output-token budgets per request tag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenBudgets {
    #[serde(default = "default_solve_tokens")]
    pub solve: u32,
    #[serde(default = "default_codream_tokens")]
    pub codream_phase: u32,
    #[serde(default = "default_reflect_tokens")]
    pub reflect: u32,
    #[serde(default = "default_leadlearn_tokens")]
    pub leadlearn: u32,
    #[serde(default = "default_persona_tokens")]
    pub persona_mutation: u32,
}

fn default_solve_tokens() -> u32 {
    4096
}
fn default_codream_tokens() -> u32 {
    2048
}
fn default_reflect_tokens() -> u32 {
    1024
}
fn default_leadlearn_tokens() -> u32 {
    512
}
fn default_persona_tokens() -> u32 {
    256
}

impl Default for TokenBudgets {
    fn default() -> Self {
        TokenBudgets {
            solve: 4096,
            codream_phase: 2048,
            reflect: 1024,
            leadlearn: 512,
            persona_mutation: 256,
        }
    }
}

impl TokenBudgets {
    pub fn for_tag(&self, tag: RequestTag) -> u32 {
        match tag {
            RequestTag::Solve => self.solve,
            RequestTag::Reflect => self.reflect,
            RequestTag::CodreamPhase => self.codream_phase,
            RequestTag::Leadlearn => self.leadlearn,
            RequestTag::PersonaMutation => self.persona_mutation,
        }
    }
}

/// Metadata of one experience entry injected into a prompt; the simulator
/// uses it to decide whether the entry is relevant to the task at hand.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectedMeta {
    pub level: InsightLevel,
    pub niche_scope: Option<NicheLabel>,
    pub origin: Origin,
    pub source_niche: Option<NicheLabel>,
}

/// Ground-truth context the runner attaches to requests in simulation mode.
/// The HTTP backbone ignores it and it never reaches a rendered prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct SimContext {
    pub agent: AgentId,
    /// Index of the ancestor whose configured ability this agent inherits.
    pub root_index: u32,
    pub niche: NicheLabel,
    pub task_id: String,
    pub correct_token: Option<String>,
    pub injected: Vec<InjectedMeta>,
}

/// One retrieved leadership exemplar handed to the structure chooser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureExemplar {
    pub structure: StructureKind,
    pub outcome: f64,
}

/// One agent invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneRequest {
    pub persona: String,
    pub injected_experience: Vec<String>,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub tag: RequestTag,
    pub op: BackboneOp,
    /// Peer outputs the call builds on (draft for a critique, round-1
    /// answers for a debate revision, sub-answers for composition, ...).
    pub peer_answers: Vec<String>,
    /// Retrieved leadership exemplars (structure-choice calls only).
    pub exemplars: Vec<StructureExemplar>,
    /// Team competence triple on the task niche, anchor first
    /// (structure-choice calls only).
    pub profile: Vec<f64>,
    pub sim: Option<SimContext>,
}

impl BackboneRequest {
    pub fn new(op: BackboneOp, persona: impl Into<String>, prompt: impl Into<String>) -> Self {
        let tag = op.tag();
        BackboneRequest {
            persona: persona.into(),
            injected_experience: Vec::new(),
            prompt: prompt.into(),
            max_tokens: TokenBudgets::default().for_tag(tag),
            temperature: 0.0,
            tag,
            op,
            peer_answers: Vec::new(),
            exemplars: Vec::new(),
            profile: Vec::new(),
            sim: None,
        }
    }

    pub fn with_experience(mut self, entries: Vec<String>) -> Self {
        self.injected_experience = entries;
        self
    }

    pub fn with_peers(mut self, peers: Vec<String>) -> Self {
        self.peer_answers = peers;
        self
    }

    pub fn with_exemplars(mut self, exemplars: Vec<StructureExemplar>) -> Self {
        self.exemplars = exemplars;
        self
    }

    pub fn with_profile(mut self, profile: Vec<f64>) -> Self {
        self.profile = profile;
        self
    }

    pub fn with_sim(mut self, ctx: SimContext) -> Self {
        self.sim = Some(ctx);
        self
    }
}

/// An agent backbone. All engine randomness, including the simulator's
/// draws, flows through the pool RNG handed in by the caller, which keeps
/// runs snapshot-replayable.
pub trait Backbone: Send + Sync {
    fn invoke(&self, request: &BackboneRequest, rng: &mut PoolRng) -> Result<String>;
}
