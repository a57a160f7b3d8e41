//! Bundled synthetic stream generators. Each mirrors one of the stream
//! shapes the engine is exercised on (a large niche plus small hard ones,
//! two niches with one hard, sequential domain blocks, an interleaved
//! specialization stream, and a single-niche transfer stream) together with
//! a matching simulated-agent configuration, so runs need no external data.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backends::{GraderKind, SimConfig, UpliftConfig};
use crate::state::NicheLabel;
use crate::{Error, Result};

use super::{BackboneMode, RunConfig, TaskRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorKind {
    /// 262 mainline tasks plus four 30-task hard blocks (5 niches, 382).
    HardMath,
    /// 257 moderate plus 165 hard tasks (2 niches, 422).
    HardCode,
    /// Six sequential 100-task domain blocks (600).
    Aflow,
    /// Five niches interleaved round-robin over 400 tasks.
    Specialization,
    /// One niche, 300 tasks, where only distilled insights raise ability.
    Transfer,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 5] = [
        GeneratorKind::HardMath,
        GeneratorKind::HardCode,
        GeneratorKind::Aflow,
        GeneratorKind::Specialization,
        GeneratorKind::Transfer,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            GeneratorKind::HardMath => "hard-math",
            GeneratorKind::HardCode => "hard-code",
            GeneratorKind::Aflow => "aflow",
            GeneratorKind::Specialization => "specialization",
            GeneratorKind::Transfer => "transfer",
        }
    }

    pub fn parse(name: &str) -> Result<GeneratorKind> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown generator {name:?}; expected one of {names:?}"))
            })
    }
}

const FILLER_NOUNS: [&str; 8] = [
    "sequence", "grid", "circuit", "ledger", "lattice", "pipeline", "tournament", "cipher",
];
const FILLER_VERBS: [&str; 8] = [
    "balance", "traverse", "partition", "reconcile", "compress", "rank", "stabilize", "decode",
];

struct StreamBuilder {
    rng: ChaCha8Rng,
    tasks: Vec<TaskRecord>,
}

impl StreamBuilder {
    fn new(seed: u64) -> Self {
        StreamBuilder { rng: ChaCha8Rng::seed_from_u64(seed), tasks: Vec::new() }
    }

    fn push_block(&mut self, niche: &str, count: usize) {
        let label = NicheLabel::new(niche);
        let tag = niche.replace('/', "-");
        for _ in 0..count {
            let serial = self.tasks.len() + 1;
            let id = format!("{tag}-{serial:04}");
            let noun = FILLER_NOUNS[self.rng.gen_range(0..FILLER_NOUNS.len())];
            let verb = FILLER_VERBS[self.rng.gen_range(0..FILLER_VERBS.len())];
            let nonce: u32 = self.rng.gen();
            let prompt = format!(
                "Task {id} ({niche}): {verb} the {noun} instance {nonce:08x} and report the key value."
            );
            let gold = format!("ANS-{id}-{:04x}", self.rng.gen::<u16>());
            self.tasks.push(TaskRecord {
                id,
                niche: label.clone(),
                prompt,
                gold: Some(gold),
                grader: GraderKind::SimOracle,
                embedding: Vec::new(),
            });
        }
    }
}

fn sim_backbone(
    niche_ability: &[(&str, f64)],
    uplift: Option<UpliftConfig>,
) -> BackboneMode {
    let mut map = BTreeMap::new();
    for (niche, p) in niche_ability {
        map.insert(niche.to_string(), *p);
    }
    BackboneMode::Sim {
        config: SimConfig { niche_ability: map, uplift, ..SimConfig::default() },
    }
}

/// Build a synthetic stream and the run configuration it is meant to be
/// driven with. Embeddings are left empty; fill them with
/// [`super::embed_tasks`] or by round-tripping through a stream file.
pub fn generate(kind: GeneratorKind, seed: u64) -> (Vec<TaskRecord>, RunConfig) {
    let mut builder = StreamBuilder::new(seed);
    let mut config = RunConfig { seed, ..RunConfig::default() };
    match kind {
        GeneratorKind::HardMath => {
            builder.push_block("math/hard", 262);
            for year in ["aime22", "aime23", "aime24", "aime25"] {
                builder.push_block(&format!("math/{year}"), 30);
            }
            config.backbone = sim_backbone(
                &[
                    ("math/hard", 0.45),
                    ("math/aime22", 0.2),
                    ("math/aime23", 0.2),
                    ("math/aime24", 0.2),
                    ("math/aime25", 0.2),
                ],
                Some(UpliftConfig::default()),
            );
        }
        GeneratorKind::HardCode => {
            builder.push_block("code/mbpp", 257);
            builder.push_block("code/contests", 165);
            config.backbone = sim_backbone(
                &[("code/mbpp", 0.75), ("code/contests", 0.15)],
                Some(UpliftConfig::default()),
            );
        }
        GeneratorKind::Aflow => {
            for (domain, _) in AFLOW_DOMAINS {
                builder.push_block(domain, 100);
            }
            config.backbone = sim_backbone(&AFLOW_DOMAINS, Some(UpliftConfig::default()));
        }
        GeneratorKind::Specialization => {
            // Interleaved round-robin so every niche stays live through the
            // final third of the stream.
            let niches = ["alg", "geo", "num", "logic", "comb"];
            let label_of: Vec<NicheLabel> =
                niches.iter().map(|n| NicheLabel::new(*n)).collect();
            for i in 0..400 {
                let n = i % niches.len();
                let _ = &label_of[n];
                builder.push_block(niches[n], 1);
            }
            config.backbone = sim_backbone(
                &niches.iter().map(|n| (*n, 0.35)).collect::<Vec<_>>(),
                Some(UpliftConfig::default()),
            );
        }
        GeneratorKind::Transfer => {
            builder.push_block("xfer", 300);
            config.backbone = sim_backbone(
                &[("xfer", 0.25)],
                Some(UpliftConfig { delta: 0.05, cap: 0.95, count_self_lessons: false }),
            );
        }
    }
    (builder.tasks, config)
}

const AFLOW_DOMAINS: [(&str, f64); 6] = [
    ("gsm8k", 0.9),
    ("hotpotqa", 0.6),
    ("mbpp", 0.65),
    ("math", 0.5),
    ("humaneval", 0.8),
    ("drop", 0.6),
];
