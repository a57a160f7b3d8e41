//! The per-task solve-evolve loop: select a team, choose a structure,
//! execute, grade, propagate the shared reward, reflect, distill, and run
//! the lifecycle. Every step appends to the event log; per-task backend and
//! grader failures degrade to a zero reward instead of aborting the run.

use crate::backends::{
    grade, Backbone, BackboneOp, BackboneRequest, Embedder, HashingEmbedder, HttpBackbone,
    InjectedMeta, RemoteEmbedder, SimBackbone, SimContext,
};
use crate::codream::{
    designated_verifier, route_insight, run_session, self_reflect, should_trigger, verify_insight,
    inject_insight,
};
use crate::collab::{choose_structure, execute_structure, record_leadership, MemberCall, TaskContext};
use crate::evolve::update_after_task;
use crate::lifecycle::{maybe_run, LifecycleCtx};
use crate::select::{random_team, select_team};
use crate::state::{AgentId, Pool, StructureKind, TeamAssignment};
use crate::templates::Templates;
use crate::{Error, Result};

use super::events::{EventBody, EventSink, RunEvent};
use super::{BackboneMode, EmbedderMode, RunConfig, TaskRecord};

/// Aggregate result of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub tasks_run: u64,
    pub cumulative_reward: f64,
}

impl RunSummary {
    pub fn mean_reward(&self) -> f64 {
        if self.tasks_run == 0 {
            0.0
        } else {
            self.cumulative_reward / self.tasks_run as f64
        }
    }
}

pub fn build_backbone(config: &RunConfig) -> Result<Box<dyn Backbone>> {
    Ok(match &config.backbone {
        BackboneMode::Sim { config } => Box::new(SimBackbone::new(config.clone())),
        BackboneMode::Http { config } => Box::new(HttpBackbone::new(config.clone())?),
    })
}

pub fn build_embedder(config: &RunConfig) -> Result<Box<dyn Embedder>> {
    Ok(match &config.embedder {
        EmbedderMode::Hashing => Box::new(HashingEmbedder::default()),
        EmbedderMode::Remote { config } => Box::new(RemoteEmbedder::new(config.clone())?),
    })
}

pub fn new_pool_from(config: &RunConfig) -> Result<Pool> {
    Pool::new_pool(config.pool_size, &config.persona, config.seed)
}

struct Emitter<'a> {
    sink: &'a mut dyn EventSink,
    seq: u32,
}

impl<'a> Emitter<'a> {
    fn emit(&mut self, pool: &Pool, task_index: u64, task_id: &str, body: EventBody) -> Result<()> {
        let event = RunEvent {
            task_index,
            task_id: task_id.to_string(),
            seq: self.seq,
            rng_cursor: pool.rng.cursor(),
            body,
        };
        self.seq += 1;
        self.sink.emit(event)
    }
}

fn member_call(pool: &Pool, config: &RunConfig, agent: AgentId, task: &TaskRecord) -> Result<MemberCall> {
    let agent_ref = pool.agent(agent)?;
    let retrieved = crate::codream::retrieve_experience(
        agent_ref,
        &task.embedding,
        &task.niche,
        config.codream.retrieval_k,
    );
    let injected_texts: Vec<String> = retrieved.iter().map(|e| e.text.clone()).collect();
    let sim = config.backbone.is_sim().then(|| SimContext {
        agent,
        root_index: pool.sim_ability_root(agent).0,
        niche: task.niche.clone(),
        task_id: task.id.clone(),
        correct_token: task.gold.clone(),
        injected: retrieved
            .iter()
            .map(|e| InjectedMeta {
                level: e.level,
                niche_scope: e.niche_scope.clone(),
                origin: e.origin,
                source_niche: e.source_niche.clone(),
            })
            .collect(),
    });
    Ok(MemberCall {
        agent,
        persona: agent_ref.persona.clone(),
        injected_texts,
        sim,
    })
}

/// Run (or resume) a stream. Tasks whose 1-based position is at or below
/// `pool.task_counter` are skipped, so passing a snapshot plus the full
/// stream continues exactly where the snapshot left off.
pub fn run_stream(
    config: &RunConfig,
    tasks: &[TaskRecord],
    pool: &mut Pool,
    backbone: &dyn Backbone,
    embedder: &dyn Embedder,
    sink: &mut dyn EventSink,
) -> Result<RunSummary> {
    config.validate()?;
    let templates = match &config.prompt_dir {
        Some(dir) => Templates::with_overrides(dir)?,
        None => Templates::default(),
    };
    let mut summary = RunSummary { tasks_run: 0, cumulative_reward: 0.0 };

    for (position, task) in tasks.iter().enumerate() {
        let task_index = position as u64 + 1;
        if task_index <= pool.task_counter {
            continue;
        }
        if task.embedding.is_empty() {
            return Err(Error::State(format!(
                "task {:?} has no embedding; load or embed the stream first",
                task.id
            )));
        }
        let mut emitter = Emitter { sink, seq: 0 };
        let reward =
            run_one_task(config, task, task_index, pool, backbone, embedder, &templates, &mut emitter)?;
        summary.tasks_run += 1;
        summary.cumulative_reward += reward;
        pool.task_counter = task_index;
    }
    Ok(summary)
}

#[allow(clippy::too_many_arguments)]
fn run_one_task(
    config: &RunConfig,
    task: &TaskRecord,
    task_index: u64,
    pool: &mut Pool,
    backbone: &dyn Backbone,
    embedder: &dyn Embedder,
    templates: &Templates,
    emitter: &mut Emitter<'_>,
) -> Result<f64> {
    pool.note_niche(&task.niche);
    let task_ctx = TaskContext {
        id: &task.id,
        prompt: &task.prompt,
        niche: &task.niche,
        gold: task.gold.as_deref(),
    };

    // Team selection.
    let team: TeamAssignment = if config.ablation.random_team {
        random_team(pool, &task.niche)?
    } else {
        select_team(pool, &task.niche, &config.weights)?
    };
    emitter.emit(
        pool,
        task_index,
        &task.id,
        EventBody::TeamSelected {
            anchor: team.anchor,
            complement: team.complement,
            scout: team.scout,
            niche: task.niche.clone(),
        },
    )?;

    let members: [MemberCall; 3] = [
        member_call(pool, config, team.anchor, task)?,
        member_call(pool, config, team.complement, task)?,
        member_call(pool, config, team.scout, task)?,
    ];

    // Structure choice (LeadLearn), unless voting is forced.
    let (structure, query, fallback, retrieved) = if config.ablation.force_voting {
        (StructureKind::Voting, Vec::new(), None, 0)
    } else {
        let choice = choose_structure(
            pool,
            &team,
            &task_ctx,
            &members[0],
            backbone,
            templates,
            &config.budgets,
            config.retrieval_k,
        );
        (choice.structure, choice.query, choice.fallback, choice.retrieved)
    };
    emitter.emit(
        pool,
        task_index,
        &task.id,
        EventBody::StructureChosen {
            structure,
            forced: config.ablation.force_voting,
            fallback: fallback.map(str::to_string),
            retrieved: retrieved as u32,
        },
    )?;
    if fallback == Some("backend_error") {
        emitter.emit(
            pool,
            task_index,
            &task.id,
            EventBody::Error {
                stage: "choose_structure".into(),
                message: "backbone failed; defaulted to voting".into(),
            },
        )?;
    }

    // Execution.
    let report = execute_structure(
        structure,
        &team,
        &members,
        &task_ctx,
        backbone,
        templates,
        &config.budgets,
        &mut pool.rng,
    );
    for fault in &report.faults {
        emitter.emit(
            pool,
            task_index,
            &task.id,
            EventBody::Error { stage: "execute".into(), message: fault.clone() },
        )?;
    }
    let mut outcome = report.outcome;
    for id in team.members() {
        emitter.emit(
            pool,
            task_index,
            &task.id,
            EventBody::MemberAnswer {
                agent: id,
                role: team.role_name(id).unwrap_or("member").to_string(),
                answer: outcome.per_member_answers.get(&id).cloned().flatten(),
            },
        )?;
    }

    // Grading; failures degrade to zero reward.
    let binding = config.grader_for(task);
    let reward = match grade(&task.id, task.gold.as_deref(), &outcome.final_answer, &binding) {
        Ok(r) => r,
        Err(e) => {
            emitter.emit(
                pool,
                task_index,
                &task.id,
                EventBody::Error { stage: "grade".into(), message: e.to_string() },
            )?;
            0.0
        }
    };
    outcome.reward = reward;
    emitter.emit(
        pool,
        task_index,
        &task.id,
        EventBody::OutcomeGraded {
            reward,
            final_answer: outcome.final_answer.clone(),
            disagreement: outcome.disagreement,
            structure: outcome.structure,
            degraded: report.degraded_from.is_some(),
        },
    )?;

    // Shared reward propagation.
    update_after_task(pool, &team, reward, &config.evolution)?;

    // Leadership bank append (disabled together with structure choice).
    if !config.ablation.force_voting {
        let note_prompt = templates.render(
            "leadership_note",
            &[
                ("task_id", &*task.id),
                ("niche", task.niche.as_str()),
                ("reward", &format!("{reward:.3}")),
                ("structure", &outcome.structure.to_string()),
            ],
        );
        let mut note_request = BackboneRequest::new(
            BackboneOp::LeadershipNote,
            members[0].persona.clone(),
            note_prompt,
        )
        .with_peers(vec![outcome.structure.to_string(), format!("{reward:.3}")]);
        note_request.max_tokens = config.budgets.for_tag(note_request.tag);
        if let Some(sim) = &members[0].sim {
            note_request = note_request.with_sim(sim.clone());
        }
        let note = match backbone.invoke(&note_request, &mut pool.rng) {
            Ok(text) => text,
            Err(e) => {
                emitter.emit(
                    pool,
                    task_index,
                    &task.id,
                    EventBody::Error { stage: "leadership_note".into(), message: e.to_string() },
                )?;
                format!("note unavailable; structure {} reward {reward:.3}", outcome.structure)
            }
        };
        record_leadership(pool, &team, &task.embedding, outcome.structure, reward, note, query);
    }

    // Self-reflection for every participant, regardless of outcome.
    for member in &members {
        match self_reflect(
            pool,
            member,
            &task_ctx,
            &outcome,
            backbone,
            embedder,
            templates,
            &config.budgets,
            &config.codream,
        ) {
            Ok(result) => emitter.emit(
                pool,
                task_index,
                &task.id,
                EventBody::ReflectionStored {
                    agent: member.agent,
                    lesson_stored: result.lesson_stored,
                    meta_stored: result.meta_stored,
                },
            )?,
            Err(e) => emitter.emit(
                pool,
                task_index,
                &task.id,
                EventBody::Error { stage: "reflect".into(), message: e.to_string() },
            )?,
        }
    }

    // Post-task distillation.
    if !config.ablation.no_codream {
        if let Some(reason) = should_trigger(&outcome, &config.codream) {
            let session = run_session(
                pool,
                &team,
                &members,
                &task_ctx,
                &outcome,
                reason,
                backbone,
                embedder,
                templates,
                &config.budgets,
                &binding,
                &config.codream,
            );
            emitter.emit(
                pool,
                task_index,
                &task.id,
                EventBody::CodreamSession {
                    reason,
                    candidates: session.candidate_insights.len() as u32,
                    aborted: session.aborted.clone(),
                    phases: session.phase_transcripts.clone(),
                },
            )?;
            if let Some(why) = &session.aborted {
                emitter.emit(
                    pool,
                    task_index,
                    &task.id,
                    EventBody::Error { stage: "codream".into(), message: why.clone() },
                )?;
            }
            for candidate in &session.candidate_insights {
                let Some(verifier_id) = designated_verifier(pool, candidate) else {
                    continue;
                };
                let verifier_agent = pool.agent(verifier_id)?;
                let verifier = MemberCall {
                    agent: verifier_id,
                    persona: verifier_agent.persona.clone(),
                    injected_texts: vec![candidate.entry.text.clone()],
                    sim: config.backbone.is_sim().then(|| SimContext {
                        agent: verifier_id,
                        root_index: pool.sim_ability_root(verifier_id).0,
                        niche: task.niche.clone(),
                        task_id: task.id.clone(),
                        correct_token: task.gold.clone(),
                        injected: vec![InjectedMeta {
                            level: candidate.entry.level,
                            niche_scope: candidate.entry.niche_scope.clone(),
                            origin: candidate.entry.origin,
                            source_niche: candidate.entry.source_niche.clone(),
                        }],
                    }),
                };
                let verified = verify_insight(
                    pool,
                    &verifier,
                    candidate,
                    &task_ctx,
                    reward,
                    backbone,
                    templates,
                    &config.budgets,
                    &binding,
                );
                if !verified {
                    continue;
                }
                let decision = route_insight(pool, candidate, config.ablation.symmetric_broadcast);
                let giver = candidate.entry.giver.unwrap_or(AgentId(u32::MAX));
                emitter.emit(
                    pool,
                    task_index,
                    &task.id,
                    EventBody::InsightRouted {
                        giver,
                        level: candidate.entry.level,
                        scope: candidate.entry.niche_scope.clone(),
                        gate: decision.gate.clone(),
                        median: decision.median,
                        recipients: decision.recipients.clone(),
                    },
                )?;
                for recipient in &decision.recipients {
                    let stored = inject_insight(
                        pool.agent_mut(*recipient)?,
                        &candidate.entry,
                        config.codream.dedup_cos,
                    );
                    if stored {
                        emitter.emit(
                            pool,
                            task_index,
                            &task.id,
                            EventBody::InsightInjected {
                                giver,
                                recipient: *recipient,
                                level: candidate.entry.level,
                                scope: candidate.entry.niche_scope.clone(),
                            },
                        )?;
                    }
                }
            }
        }
    }

    // Lifecycle editing on the tau schedule.
    let lifecycle_ctx = LifecycleCtx {
        backbone,
        templates,
        budgets: &config.budgets,
        sim_mode: config.backbone.is_sim(),
        dedup_cos: config.codream.dedup_cos,
    };
    let lifecycle_events = maybe_run(
        pool,
        task_index,
        Some(&task.niche),
        &config.lifecycle,
        &lifecycle_ctx,
    );
    for event in lifecycle_events {
        emitter.emit(
            pool,
            task_index,
            &task.id,
            EventBody::Lifecycle {
                op: event.kind,
                subjects: event.subjects,
                reason: event.reason,
                applied: event.applied,
            },
        )?;
    }

    Ok(reward)
}
