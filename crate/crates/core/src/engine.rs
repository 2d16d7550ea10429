//! The interleaved reasoning episode: turn → parse → (tool → observation | answer).
//!
//! One episode ranks one window. Each policy turn is logged verbatim and
//! becomes a reasoning step, optionally followed by a tool call and its
//! observation, or by the terminating answer. Turns that carry neither a
//! usable tool call nor a usable answer consume a turn and the loop continues.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::policy::{PolicyBackend, PolicyError, ReplayPolicy};
use crate::protocol::{
    normalize_ranklist, parse_turn, render_prompt, ContentPart, ImageSlot, Message,
    MessageSequence, PromptTemplate, ProtocolError, RankList, Role, ToolCall, ToolKind,
};
use crate::store::{Candidate, Query};
use crate::tools::{Observation, ToolError, VisualTools};
use crate::ENGINE_VERSION;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("cannot render prompt: {0}")]
    Prompt(#[from] ProtocolError),
    #[error("policy failed on turn {turn}: {source}")]
    Policy {
        turn: u32,
        #[source]
        source: PolicyError,
    },
    #[error("invalid episode limits: {0}")]
    Limits(String),
    #[error("candidate {0:?} appears twice in the window")]
    DuplicateCandidate(String),
    #[error("log written by engine {log}, this is {engine}")]
    Version { log: String, engine: String },
    #[error("replay diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeLimits {
    pub max_turns: u32,
    pub max_tool_calls: u32,
    pub turn_timeout_secs: u64,
}

impl Default for EpisodeLimits {
    fn default() -> Self {
        EpisodeLimits {
            max_turns: 6,
            max_tool_calls: 4,
            turn_timeout_secs: 120,
        }
    }
}

impl EpisodeLimits {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.max_turns == 0 || self.max_tool_calls == 0 || self.turn_timeout_secs == 0 {
            return Err(EngineError::Limits(format!("{self:?}: all limits must be positive")));
        }
        Ok(())
    }
}

/// Which role carries tool observations back to the policy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationRole {
    #[default]
    User,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolOutcome {
    Evidence(Observation),
    Error { tool: ToolKind, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectoryStep {
    Reasoning {
        text: Option<String>,
    },
    ToolCall {
        call: ToolCall,
    },
    Observation {
        outcome: ToolOutcome,
    },
    /// `raw` is the list as emitted; `normalized` completes it to a full permutation.
    Answer {
        raw: RankList,
        normalized: RankList,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub query_id: String,
    pub window_candidate_ids: Vec<String>,
    pub steps: Vec<TrajectoryStep>,
    /// Normalised final ranking over window positions.
    pub answer: Option<RankList>,
    pub raw_answer: Option<RankList>,
    pub tag_valid: bool,
    pub list_valid: bool,
    pub n_tool_valid: u32,
    pub n_tool_calls: u32,
    pub turns_used: u32,
    pub raw_turns: Vec<String>,
}

impl Trajectory {
    /// Checks the step sequence against
    /// `(reasoning (tool_call observation)*)* reasoning? answer?` with the
    /// answer, when present, terminating the sequence.
    pub fn check_grammar(&self) -> Result<(), String> {
        #[derive(Clone, Copy, PartialEq)]
        enum Prev {
            Start,
            Reasoning,
            ToolCall,
            Observation,
            Answer,
        }
        let mut prev = Prev::Start;
        for (i, step) in self.steps.iter().enumerate() {
            let next = match step {
                TrajectoryStep::Reasoning { .. } => Prev::Reasoning,
                TrajectoryStep::ToolCall { .. } => Prev::ToolCall,
                TrajectoryStep::Observation { .. } => Prev::Observation,
                TrajectoryStep::Answer { .. } => Prev::Answer,
            };
            let ok = match next {
                Prev::Reasoning | Prev::Answer => {
                    matches!(prev, Prev::Start | Prev::Reasoning | Prev::Observation)
                }
                Prev::ToolCall => matches!(prev, Prev::Reasoning | Prev::Observation),
                Prev::Observation => prev == Prev::ToolCall,
                Prev::Start => unreachable!(),
            };
            if !ok {
                return Err(format!("step {i} is out of order"));
            }
            prev = next;
        }
        if prev == Prev::ToolCall {
            return Err("tool call without observation".into());
        }
        if self.answer.is_some() != (prev == Prev::Answer) {
            return Err("answer field disagrees with the final step".into());
        }
        let observations = self
            .steps
            .iter()
            .filter(|s| {
                matches!(
                    s,
                    TrajectoryStep::Observation {
                        outcome: ToolOutcome::Evidence(_)
                    }
                )
            })
            .count();
        if observations != self.n_tool_valid as usize {
            return Err(format!(
                "n_tool_valid {} but {observations} successful observations",
                self.n_tool_valid
            ));
        }
        Ok(())
    }

    /// 1-based predicted rank of window position `pos` in the normalised answer.
    pub fn rank_of(&self, window_pos: usize) -> Option<usize> {
        self.answer.as_ref().and_then(|a| a.rank_of(window_pos))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub turn_ms: Vec<u64>,
    pub total_ms: u64,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub trajectory: Trajectory,
    /// Only recorded for live backends, so deterministic runs serialise identically.
    pub timing: Option<Timing>,
}

/// One line of a trajectory log: everything needed to score or replay an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLogRecord {
    pub engine_version: String,
    pub policy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub query: Query,
    pub window: Vec<Candidate>,
    pub limits: EpisodeLimits,
    #[serde(flatten)]
    pub trajectory: Trajectory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

const NO_ACTION_FEEDBACK: &str = "No valid tool call or answer was found in your last turn. \
Reply with <think>...</think> followed by exactly one <tool_call>...</tool_call> or <answer>...</answer>.";

#[derive(Clone)]
pub struct Engine {
    pub policy: Arc<dyn PolicyBackend>,
    pub template: PromptTemplate,
    pub tools: VisualTools,
    pub limits: EpisodeLimits,
    pub observation_role: ObservationRole,
}

impl Engine {
    pub fn new(policy: Arc<dyn PolicyBackend>) -> Self {
        Engine {
            policy,
            template: PromptTemplate::default(),
            tools: VisualTools::default(),
            limits: EpisodeLimits::default(),
            observation_role: ObservationRole::default(),
        }
    }

    pub fn with_limits(mut self, limits: EpisodeLimits) -> Self {
        self.limits = limits;
        self
    }

    pub fn with_tools(mut self, tools: VisualTools) -> Self {
        self.tools = tools;
        self
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = template;
        self
    }

    pub fn with_observation_role(mut self, role: ObservationRole) -> Self {
        self.observation_role = role;
        self
    }

    fn observation_message(&self, outcome: &ToolOutcome) -> Message {
        let role = match self.observation_role {
            ObservationRole::User => Role::User,
            ObservationRole::Tool => Role::Tool,
        };
        let mut parts = Vec::new();
        match outcome {
            ToolOutcome::Evidence(obs) => {
                parts.push(ContentPart::Text(format!("Observation: {}", obs.note)));
                for img in &obs.images {
                    if let Some(source) = &img.payload {
                        parts.push(ContentPart::Text(format!("\n[{}] ", img.label)));
                        parts.push(ContentPart::Image(ImageSlot {
                            label: img.label.clone(),
                            source: source.clone(),
                        }));
                    }
                }
            }
            ToolOutcome::Error { tool, message } => {
                parts.push(ContentPart::Text(format!("Tool error ({tool}): {message}")));
            }
        }
        Message { role, parts }
    }

    /// Runs one episode over `window`.
    pub fn run_episode(&self, query: &Query, window: &[Candidate]) -> Result<Episode, EngineError> {
        self.limits.validate()?;
        for (i, c) in window.iter().enumerate() {
            if window[..i].iter().any(|o| o.id == c.id) {
                return Err(EngineError::DuplicateCandidate(c.id.clone()));
            }
        }
        let mut ctx: MessageSequence = render_prompt(query, window, &self.template)?;
        let w = window.len();
        let live = self.policy.is_live();
        let started = Instant::now();

        let mut traj = Trajectory {
            query_id: query.id.clone(),
            window_candidate_ids: ctx.window_ids.clone(),
            steps: Vec::new(),
            answer: None,
            raw_answer: None,
            tag_valid: false,
            list_valid: false,
            n_tool_valid: 0,
            n_tool_calls: 0,
            turns_used: 0,
            raw_turns: Vec::new(),
        };
        let mut turn_ms = Vec::new();
        let mut all_tags_valid = true;

        while traj.turns_used < self.limits.max_turns {
            let t0 = Instant::now();
            let raw = self
                .policy
                .next_turn(&ctx)
                .map_err(|source| EngineError::Policy {
                    turn: traj.turns_used + 1,
                    source,
                })?;
            turn_ms.push(t0.elapsed().as_millis() as u64);
            traj.turns_used += 1;

            let parsed = parse_turn(&raw, w);
            all_tags_valid &= parsed.tag_valid;
            traj.steps.push(TrajectoryStep::Reasoning {
                text: parsed.reasoning.clone(),
            });
            ctx.messages.push(Message::text(Role::Assistant, raw.clone()));
            traj.raw_turns.push(raw);

            if let Some(call) = parsed.tool_call {
                traj.n_tool_calls += 1;
                let result = if traj.n_tool_calls > self.limits.max_tool_calls {
                    Err((
                        call.kind(),
                        ToolError::BudgetExhausted(self.limits.max_tool_calls).to_string(),
                    ))
                } else {
                    self.tools
                        .execute(&call, window, &mut traj.n_tool_valid)
                        .map_err(|e| (e.tool, e.source.to_string()))
                };
                let outcome = match result {
                    Ok(obs) => ToolOutcome::Evidence(obs),
                    Err((tool, message)) => ToolOutcome::Error { tool, message },
                };
                ctx.messages.push(self.observation_message(&outcome));
                traj.steps.push(TrajectoryStep::ToolCall { call });
                traj.steps.push(TrajectoryStep::Observation { outcome });
            } else if let Some(raw_list) = parsed.answer {
                let normalized = normalize_ranklist(raw_list.as_slice(), w)?;
                traj.steps.push(TrajectoryStep::Answer {
                    raw: raw_list.clone(),
                    normalized: normalized.clone(),
                });
                traj.answer = Some(normalized);
                traj.raw_answer = Some(raw_list);
                traj.list_valid = parsed.list_valid;
                break;
            } else {
                ctx.messages
                    .push(Message::text(Role::User, NO_ACTION_FEEDBACK));
            }
        }
        // The tag language is defined over complete trajectories, which end in an answer.
        traj.tag_valid = all_tags_valid && traj.answer.is_some();

        let timing = live.then(|| Timing {
            turn_ms,
            total_ms: started.elapsed().as_millis() as u64,
        });
        Ok(Episode {
            trajectory: traj,
            timing,
        })
    }

    /// Builds a log record for an episode run by this engine.
    pub fn log_record(
        &self,
        query: &Query,
        window: &[Candidate],
        episode: Episode,
        config_hash: Option<String>,
    ) -> TrajectoryLogRecord {
        TrajectoryLogRecord {
            engine_version: ENGINE_VERSION.to_owned(),
            policy: self.policy.identity(),
            config_hash,
            query: query.clone(),
            window: window.to_vec(),
            limits: self.limits,
            trajectory: episode.trajectory,
            timing: episode.timing,
        }
    }

    /// Re-runs a logged episode against its own raw turns and checks that the
    /// resulting trajectory serialises to the same bytes.
    pub fn replay_episode(&self, record: &TrajectoryLogRecord) -> Result<Trajectory, EngineError> {
        if record.engine_version != ENGINE_VERSION {
            return Err(EngineError::Version {
                log: record.engine_version.clone(),
                engine: ENGINE_VERSION.to_owned(),
            });
        }
        let replay = ReplayPolicy::new([(
            record.trajectory.query_id.clone(),
            record.trajectory.window_candidate_ids.clone(),
            record.trajectory.raw_turns.clone(),
        )]);
        let engine = Engine {
            policy: Arc::new(replay),
            limits: record.limits,
            ..self.clone()
        };
        let episode = engine
            .run_episode(&record.query, &record.window)
            .map_err(|e| match e {
                EngineError::Policy {
                    source: PolicyError::Divergence(msg),
                    ..
                } => EngineError::Divergence(msg),
                other => other,
            })?;
        let expected = serde_json::to_string(&record.trajectory).expect("trajectory serialises");
        let actual = serde_json::to_string(&episode.trajectory).expect("trajectory serialises");
        if expected != actual {
            return Err(EngineError::Divergence(format!(
                "replayed trajectory for query {:?} differs from the log",
                record.trajectory.query_id
            )));
        }
        Ok(episode.trajectory)
    }
}
