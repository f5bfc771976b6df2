//! Agent and critic step logic: participation probabilities, Bernoulli
//! activation, time-average updates, and the task/feedback exchange.
//!
//! Participants never export cost values or derivatives; only activation
//! bits, averages, responses, and feedback leave a participant.

use crate::coordinator::BroadcastRecord;
use crate::cost::{CostModel, CriticCostCoeffs, ScalarCost};
use crate::model::{ParticipantState, SystemConfig};
use crate::rng;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Result of one probability computation. `raw` is the unclamped value
/// `signal * average / derivative`; `sigma` is `raw` clamped into
/// `[clamp, 1 - clamp]`; `clamped` flags raw values outside the open
/// interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityEval {
    pub raw: f64,
    pub sigma: f64,
    pub clamped: bool,
}

fn clamp_probability(raw: f64, clamp: f64) -> ProbabilityEval {
    let sigma = raw.clamp(clamp, 1.0 - clamp);
    ProbabilityEval { raw, sigma, clamped: !(raw > clamp && raw < 1.0 - clamp) }
}

/// Agent participation probability for one modality:
/// `signal * x_j / max(partial_j f, floor)`, clamped.
pub fn agent_probability(
    signal: f64,
    averages: &[f64],
    modality: usize,
    cost: &dyn CostModel,
    clamp: f64,
    floor: f64,
) -> ProbabilityEval {
    let derivative = cost.partial(modality, averages).max(floor);
    clamp_probability(signal * averages[modality] / derivative, clamp)
}

/// Critic participation probability: `signal * y / max(dg/dy, floor)`, clamped.
pub fn critic_probability(signal: f64, average: f64, cost: &CriticCostCoeffs, clamp: f64, floor: f64) -> ProbabilityEval {
    let derivative = cost.derivative(average).max(floor);
    clamp_probability(signal * average / derivative, clamp)
}

/// One Bernoulli draw; advances the stream by exactly one `f64`.
pub fn sample_activation(sigma: f64, rng: &mut impl Rng) -> bool {
    rng.gen::<f64>() < sigma
}

/// Fold the next activation bit into a running average.
///
/// `average` holds the mean of bits observed through step `k` (k+1 bits,
/// counting the initial state); the result is the mean over k+2 bits:
/// `((k+1) * average + bit) / (k+2)`.
pub fn update_time_average(average: f64, k: u64, next_active: bool) -> f64 {
    let n = (k + 1) as f64;
    (n * average + if next_active { 1.0 } else { 0.0 }) / (n + 1.0)
}

/// Knobs shared by every participant step.
#[derive(Clone, Copy, Debug)]
pub struct ProtocolParams {
    pub sigma_clamp: f64,
    pub derivative_floor: f64,
    /// When set, feedback with a score at or above the threshold leaves the
    /// response unrevised.
    pub score_threshold: Option<f64>,
}

impl ProtocolParams {
    pub fn from_config(cfg: &SystemConfig) -> Self {
        Self { sigma_clamp: cfg.sigma_clamp, derivative_floor: cfg.derivative_floor, score_threshold: cfg.score_threshold }
    }
}

/// Critic feedback payload; the score is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub text: String,
    pub score: Option<f64>,
}

/// Task producer owned by an agent. Implementations must be deterministic
/// given (query, feedback).
pub trait TaskExecutor {
    fn produce(&self, query: &str) -> String;
    fn revise(&self, response: &str, feedback: &Feedback) -> String;
}

/// Response evaluator owned by a critic; deterministic for built-ins.
pub trait CriticEvaluator {
    fn evaluate(&self, query: &str, response: &str) -> Feedback;
}

/// Built-in executor that echoes the query; used by the generic simulation.
pub struct EchoExecutor;

impl TaskExecutor for EchoExecutor {
    fn produce(&self, query: &str) -> String {
        format!("response({query})")
    }

    fn revise(&self, response: &str, feedback: &Feedback) -> String {
        format!("{response}+rev({})", feedback.text)
    }
}

/// Built-in evaluator that acknowledges every response.
pub struct AckEvaluator;

impl CriticEvaluator for AckEvaluator {
    fn evaluate(&self, _query: &str, _response: &str) -> Feedback {
        Feedback { text: "ack".into(), score: None }
    }
}

/// Evaluator emitting a fixed score; exercises the score-threshold policy.
pub struct FixedScoreEvaluator {
    pub score: f64,
}

impl CriticEvaluator for FixedScoreEvaluator {
    fn evaluate(&self, _query: &str, _response: &str) -> Feedback {
        Feedback { text: "scored".into(), score: Some(self.score) }
    }
}

/// One task/feedback exchange of an active agent step. At most one feedback
/// round happens per active step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskExchange {
    pub response: String,
    pub feedback: Option<Feedback>,
    pub revision_count: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParticipantKind {
    Agent,
    Critic,
}

impl std::fmt::Display for ParticipantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Agent => write!(f, "agent"),
            Self::Critic => write!(f, "critic"),
        }
    }
}

/// Protocol events worth logging; the golden traces are rendered from these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ProtocolEvent {
    Clamped { kind: ParticipantKind, modality: usize, id: usize, raw: f64 },
    NoCritic { modality: usize, agent: usize },
    FeedbackRound { modality: usize, agent: usize, critic: usize, revised: bool },
}

impl std::fmt::Display for ProtocolEvent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Clamped { kind, modality, id, raw } => write!(f, "clamped {kind} m{modality} id{id} raw={raw:.6}"),
            Self::NoCritic { modality, agent } => write!(f, "no_critic m{modality} agent{agent}"),
            Self::FeedbackRound { modality, agent, critic, revised } => {
                write!(f, "feedback m{modality} agent{agent} critic{critic} revised={revised}")
            }
        }
    }
}

/// An agent's mutable protocol state plus its private cost and streams.
///
/// Per-modality activation bits drawn within a step are staged and folded
/// into the averages only once every modality has been stepped, so that all
/// of a step's probability computations read the same step-k averages.
pub struct AgentRuntime<C: CostModel> {
    pub id: usize,
    pub cost: C,
    pub state: ParticipantState,
    streams: Vec<ChaCha12Rng>,
    staged: Vec<Option<bool>>,
}

impl<C: CostModel> AgentRuntime<C> {
    pub fn new(id: usize, cost: C, modalities: usize, master_seed: u64) -> Self {
        let streams = (0..modalities).map(|j| rng::derive_rng(master_seed, &rng::agent_label(id, j))).collect();
        Self { id, cost, state: ParticipantState::new(modalities), streams, staged: vec![None; modalities] }
    }

    /// Compute this modality's probability and draw the activation bit
    /// without touching the averages.
    pub fn draw_activation(&mut self, modality: usize, broadcast: &BroadcastRecord, params: &ProtocolParams) -> (ProbabilityEval, bool) {
        let prob = agent_probability(
            broadcast.agent_signals[modality],
            &self.state.time_average,
            modality,
            &self.cost,
            params.sigma_clamp,
            params.derivative_floor,
        );
        let active = sample_activation(prob.sigma, &mut self.streams[modality]);
        (prob, active)
    }

    /// Fold one full step of activation bits (one per modality) into the
    /// averages.
    pub fn commit_step(&mut self, bits: &[bool]) {
        assert!(self.staged.iter().all(|s| s.is_none()), "commit_step interleaved with staged per-modality steps");
        self.state.advance(bits);
    }

    /// Stage a drawn bit; when every modality is staged, fold the bits into
    /// the averages and advance the step counter.
    fn stage_bit(&mut self, modality: usize, bit: bool) {
        assert!(self.staged[modality].is_none(), "modality {modality} stepped twice in one round");
        self.staged[modality] = Some(bit);
        if self.staged.iter().all(|s| s.is_some()) {
            let bits: Vec<bool> = self.staged.iter().map(|s| s.unwrap()).collect();
            self.state.advance(&bits);
            self.staged.iter_mut().for_each(|s| *s = None);
        }
    }
}

/// A critic's mutable protocol state (single modality).
pub struct CriticRuntime {
    pub id: usize,
    pub modality: usize,
    pub cost: CriticCostCoeffs,
    pub state: ParticipantState,
    stream: ChaCha12Rng,
}

impl CriticRuntime {
    pub fn new(id: usize, modality: usize, cost: CriticCostCoeffs, master_seed: u64) -> Self {
        Self {
            id,
            modality,
            cost,
            state: ParticipantState::new(1),
            stream: rng::derive_rng(master_seed, &rng::critic_label(modality, id)),
        }
    }

    pub fn time_average(&self) -> f64 {
        self.state.time_average[0]
    }

    /// Compute this step's probability and draw the activation bit without
    /// committing state; the caller commits after the exchange phase.
    pub fn draw_activation(&mut self, broadcast: &BroadcastRecord, params: &ProtocolParams) -> (ProbabilityEval, bool) {
        let prob = critic_probability(
            broadcast.critic_signals[self.modality],
            self.time_average(),
            &self.cost,
            params.sigma_clamp,
            params.derivative_floor,
        );
        let active = sample_activation(prob.sigma, &mut self.stream);
        (prob, active)
    }

    /// Fold the drawn activation into the running average.
    pub fn commit(&mut self, active: bool) {
        self.state.advance(&[active]);
    }
}

/// A response awaiting critic evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PendingResponse {
    pub agent: usize,
    pub query: String,
    pub response: String,
}

/// Round-robin dispenser over the critics active at the current step.
pub struct CriticPool<'a> {
    active: Vec<(usize, &'a dyn CriticEvaluator)>,
    cursor: usize,
}

impl<'a> CriticPool<'a> {
    pub fn new(active: Vec<(usize, &'a dyn CriticEvaluator)>) -> Self {
        Self { active, cursor: 0 }
    }

    pub fn empty() -> Self {
        Self { active: Vec::new(), cursor: 0 }
    }

    /// Next active critic in round-robin order, if any.
    pub fn next_active(&mut self) -> Option<(usize, &'a dyn CriticEvaluator)> {
        if self.active.is_empty() {
            return None;
        }
        let pick = self.active[self.cursor % self.active.len()];
        self.cursor += 1;
        Some(pick)
    }
}

/// Outcome of one agent step on one modality.
#[derive(Clone, Debug)]
pub struct AgentStepOutcome {
    pub probability: ProbabilityEval,
    pub active: bool,
    /// Final response with its feedback record; `None` when inactive.
    pub exchange: Option<TaskExchange>,
    pub events: Vec<ProtocolEvent>,
}

/// One agent step for one modality: probability from the broadcast signal and
/// the step-k averages, Bernoulli activation, and — when active — the task
/// exchange with at most one feedback/revision round. The drawn bit is the
/// next step's active state; it is staged on the runtime and folded into the
/// averages once all modalities of the step have run.
pub fn run_agent_step<C: CostModel>(
    agent: &mut AgentRuntime<C>,
    modality: usize,
    broadcast: &BroadcastRecord,
    query: &str,
    executor: &dyn TaskExecutor,
    critics: &mut CriticPool<'_>,
    params: &ProtocolParams,
) -> AgentStepOutcome {
    let mut events = Vec::new();
    let (probability, active) = agent.draw_activation(modality, broadcast, params);
    if probability.clamped {
        events.push(ProtocolEvent::Clamped { kind: ParticipantKind::Agent, modality, id: agent.id, raw: probability.raw });
    }

    let exchange = if active {
        let mut response = executor.produce(query);
        let mut feedback = None;
        let mut revision_count = 0;
        match critics.next_active() {
            Some((critic_id, evaluator)) => {
                let fb = evaluator.evaluate(query, &response);
                let revise = match (fb.score, params.score_threshold) {
                    (Some(score), Some(threshold)) => score < threshold,
                    _ => true,
                };
                if revise {
                    response = executor.revise(&response, &fb);
                    revision_count = 1;
                }
                events.push(ProtocolEvent::FeedbackRound { modality, agent: agent.id, critic: critic_id, revised: revise });
                feedback = Some(fb);
            }
            None => events.push(ProtocolEvent::NoCritic { modality, agent: agent.id }),
        }
        Some(TaskExchange { response, feedback, revision_count })
    } else {
        None
    };

    agent.stage_bit(modality, active);

    AgentStepOutcome { probability, active, exchange, events }
}

/// Outcome of one critic step.
#[derive(Clone, Debug)]
pub struct CriticStepOutcome {
    pub probability: ProbabilityEval,
    pub active: bool,
    /// (agent id, feedback) per evaluated response; empty when inactive.
    pub feedbacks: Vec<(usize, Feedback)>,
    pub events: Vec<ProtocolEvent>,
}

/// One critic step: probability, activation draw, and — when active — an
/// evaluation of every pending response assigned to this critic.
pub fn run_critic_step(
    critic: &mut CriticRuntime,
    broadcast: &BroadcastRecord,
    evaluator: &dyn CriticEvaluator,
    pending: &[PendingResponse],
    params: &ProtocolParams,
) -> CriticStepOutcome {
    let mut events = Vec::new();
    let (probability, active) = critic.draw_activation(broadcast, params);
    if probability.clamped {
        events.push(ProtocolEvent::Clamped {
            kind: ParticipantKind::Critic,
            modality: critic.modality,
            id: critic.id,
            raw: probability.raw,
        });
    }
    let feedbacks = if active {
        pending.iter().map(|p| (p.agent, evaluator.evaluate(&p.query, &p.response))).collect()
    } else {
        Vec::new()
    };
    critic.commit(active);
    CriticStepOutcome { probability, active, feedbacks, events }
}
