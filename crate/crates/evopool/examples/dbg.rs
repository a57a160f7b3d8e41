use std::collections::BTreeMap;
use evopool::backends::{HashingEmbedder, SimConfig, UpliftConfig};
use evopool::stream::gen::{generate, GeneratorKind};
use evopool::stream::*;
use evopool::state::AgentId;

fn main() {
    for (base, delta) in [(0.45, 0.05), (0.55, 0.05), (0.55, 0.08), (0.5, 0.05)] {
        let mut total_spec = 0;
        let mut idx_sum = 0.0;
        let mut info = String::new();
        for seed in [1u64, 2, 3] {
            let (mut tasks, mut config) = generate(GeneratorKind::Specialization, seed);
            embed_tasks(&mut tasks, &HashingEmbedder::default()).unwrap();
            config.seed = seed;
            let niches = ["alg", "geo", "num", "logic", "comb"];
            let mut sim = SimConfig::default();
            for n in niches { sim.niche_ability.insert(n.to_string(), base); }
            sim.uplift = Some(UpliftConfig { delta, cap: 0.95, count_self_lessons: true });
            config.backbone = BackboneMode::Sim { config: sim };
            let mut pool = new_pool_from(&config).unwrap();
            let backbone = build_backbone(&config).unwrap();
            let mut log = MemoryLog::default();
            run_stream(&config, &tasks, &mut pool, backbone.as_ref(), &HashingEmbedder::default(), &mut log).unwrap();
            let a: Vec<(AgentId, String)> = log.events.iter().filter_map(|e| match &e.body {
                EventBody::TeamSelected { anchor, niche, .. } => Some((*anchor, niche.to_string())), _ => None }).collect();
            let third = a.len() - a.len()/3;
            let mut per_niche: BTreeMap<String, BTreeMap<AgentId, usize>> = BTreeMap::new();
            for (id, niche) in &a[third..] {
                *per_niche.entry(niche.clone()).or_default().entry(*id).or_insert(0) += 1;
            }
            let mut specialists = 0;
            for (_niche, counts) in &per_niche {
                let total: usize = counts.values().sum();
                let top = counts.values().max().unwrap();
                if *top as f64 / total as f64 > 0.5 { specialists += 1; }
            }
            let anchor_ids: Vec<AgentId> = a.iter().map(|(id, _)| *id).collect();
            let mut series = vec![];
            for t in 0..anchor_ids.len() {
                let start = (t+1).saturating_sub(32);
                series.push(evopool::evolve::specialization_index(&anchor_ids[start..=t], 20).unwrap());
            }
            let mean_idx = series.iter().sum::<f64>() / series.len() as f64;
            total_spec += specialists;
            idx_sum += mean_idx;
            info.push_str(&format!("s{seed}:{specialists}/5@{mean_idx:.2}(roster {} created {}) ", pool.roster_len(), pool.total_created()));
        }
        println!("base {base} delta {delta}: total specialists {total_spec}/15 mean_idx {:.3}  {info}", idx_sum/3.0);
    }
}
