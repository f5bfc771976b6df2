//! Closed-loop simulation of the participation protocol, trace capture, and
//! the empirical diagnostics standing in for the convergence theory:
//! per-participant convergence to the oracle, capacity tracking, cost-ratio
//! behaviour, concentration-bound exceedance, and martingale bias checks.

use crate::coordinator::Coordinator;
use crate::cost::{AgentCostCoeffs, CostSet};
use crate::model::{step_size, validate_config, SystemConfig};
use crate::oracle::OracleSolution;
use crate::participants::{
    AckEvaluator, AgentRuntime, CriticPool, CriticRuntime, EchoExecutor, ParticipantKind, ProtocolEvent, ProtocolParams,
    run_agent_step,
};
use crate::rng::derive_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

/// Steps excluded from tail statistics.
pub const BURN_IN_STEPS: u64 = 1000;
/// Fraction of the run used as the tail window.
pub const TAIL_FRACTION: f64 = 0.1;
/// Convergence diagnostics are evaluated only for runs at least this long.
pub const MIN_DIAGNOSTIC_STEPS: u64 = 10_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

/// Aggregate state after one step; row 0 is the initial state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: u64,
    pub agent_signals: Vec<f64>,
    pub critic_signals: Vec<f64>,
    pub active_agents: Vec<u32>,
    pub active_critics: Vec<u32>,
    /// Sum of agent averages per modality (capacity-tracking quantity).
    pub agent_avg_sum: Vec<f64>,
    pub critic_avg_sum: Vec<f64>,
    /// Total cost evaluated at the time-average vector.
    pub total_cost: f64,
    /// Filled by [`SimulationTrace::attach_cost_ratio`].
    pub cost_ratio: Option<f64>,
    pub bits_total: u64,
    pub clamp_events: u32,
}

/// One participant-step record (long format).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantRow {
    pub step: u64,
    pub kind: ParticipantKind,
    pub id: u32,
    pub modality: u32,
    pub sigma_raw: f64,
    pub sigma: f64,
    pub active: bool,
    pub avg: f64,
}

/// Full record of one simulation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub num_agents: usize,
    pub critic_counts: Vec<usize>,
    /// `rows[k]` is the state after k steps.
    pub rows: Vec<StepRow>,
    /// Per-step participant records for steps >= 1.
    pub participants: Vec<ParticipantRow>,
}

impl SimulationTrace {
    pub fn modalities(&self) -> usize {
        self.critic_counts.len()
    }

    pub fn steps(&self) -> u64 {
        (self.rows.len() - 1) as u64
    }

    /// Final time-averages, `(agents[j][i], critics[j][v])`.
    pub fn final_averages(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let m = self.modalities();
        let mut agents = vec![vec![1.0; self.num_agents]; m];
        let mut critics: Vec<Vec<f64>> = self.critic_counts.iter().map(|&c| vec![1.0; c]).collect();
        let last = self.steps();
        for row in self.participants.iter().rev() {
            if row.step != last {
                break;
            }
            match row.kind {
                ParticipantKind::Agent => agents[row.modality as usize][row.id as usize] = row.avg,
                ParticipantKind::Critic => critics[row.modality as usize][row.id as usize] = row.avg,
            }
        }
        (agents, critics)
    }

    /// Attach the cost-ratio column given the oracle objective.
    pub fn attach_cost_ratio(&mut self, oracle_objective: f64) {
        for row in &mut self.rows {
            row.cost_ratio = Some(row.total_cost / oracle_objective);
        }
    }

    /// First row index of the tail window (last `TAIL_FRACTION` of steps).
    fn tail_start(&self) -> usize {
        let steps = self.steps() as f64;
        (steps - (steps * TAIL_FRACTION).ceil()).max(0.0) as usize + 1
    }
}

/// Broadcast overhead per step: 128 bits per modality.
pub fn comm_overhead(modalities: usize) -> u64 {
    128 * modalities as u64
}

/// Copy of the trace with participant rows thinned to every `stride`-th step
/// (the final step is always kept so end-state readers still work). Step
/// rows are never thinned.
pub fn thin_participants(trace: &SimulationTrace, stride: u64) -> SimulationTrace {
    if stride <= 1 {
        return trace.clone();
    }
    let last = trace.steps();
    let mut thinned = trace.clone();
    thinned.participants.retain(|row| row.step % stride == 0 || row.step == last);
    thinned
}

/// Run the closed loop for `steps` steps. Deterministic given the config's
/// master seed.
///
/// Panics if `cfg` fails [`validate_config`] or `costs` does not match the
/// config's counts; callers validate up front.
pub fn run_simulation(cfg: &SystemConfig, costs: &CostSet, steps: u64) -> SimulationTrace {
    run_simulation_with_events(cfg, costs, steps, &mut |_, _| {})
}

/// [`run_simulation`] with a protocol-event sink `(step, event)`.
pub fn run_simulation_with_events(
    cfg: &SystemConfig,
    costs: &CostSet,
    steps: u64,
    sink: &mut dyn FnMut(u64, &ProtocolEvent),
) -> SimulationTrace {
    let violations = validate_config(cfg);
    assert!(violations.is_empty(), "invalid config: {violations:?}");
    let m = cfg.modality_count();
    assert_eq!(costs.agents.len(), cfg.num_agents, "one agent cost per agent");
    assert_eq!(costs.critics.len(), m, "one critic pool per modality");
    for (j, pool) in costs.critics.iter().enumerate() {
        assert_eq!(pool.len(), cfg.modalities[j].critic_count, "critic pool size for modality {j}");
    }

    let params = ProtocolParams::from_config(cfg);
    let mut coordinator = Coordinator::new(cfg);
    let mut agents: Vec<AgentRuntime<AgentCostCoeffs>> = costs
        .agents
        .iter()
        .enumerate()
        .map(|(i, &c)| AgentRuntime::new(i, c, m, cfg.master_seed))
        .collect();
    let mut critics: Vec<Vec<CriticRuntime>> = costs
        .critics
        .iter()
        .enumerate()
        .map(|(j, pool)| pool.iter().enumerate().map(|(v, &c)| CriticRuntime::new(v, j, c, cfg.master_seed)).collect())
        .collect();
    let executor = EchoExecutor;
    let evaluator = AckEvaluator;

    let initial_cost = {
        let ones_x = vec![vec![1.0; cfg.num_agents]; m];
        let ones_y: Vec<Vec<f64>> = cfg.modalities.iter().map(|mc| vec![1.0; mc.critic_count]).collect();
        costs.total_cost(&ones_x, &ones_y)
    };
    let mut trace = SimulationTrace {
        num_agents: cfg.num_agents,
        critic_counts: cfg.modalities.iter().map(|mc| mc.critic_count).collect(),
        rows: vec![StepRow {
            step: 0,
            agent_signals: cfg.modalities.iter().map(|mc| mc.agent_signal_init).collect(),
            critic_signals: cfg.modalities.iter().map(|mc| mc.critic_signal_init).collect(),
            active_agents: vec![cfg.num_agents as u32; m],
            active_critics: cfg.modalities.iter().map(|mc| mc.critic_count as u32).collect(),
            agent_avg_sum: vec![cfg.num_agents as f64; m],
            critic_avg_sum: cfg.modalities.iter().map(|mc| mc.critic_count as f64).collect(),
            total_cost: initial_cost,
            cost_ratio: None,
            bits_total: 0,
            clamp_events: 0,
        }],
        participants: Vec::new(),
    };

    for k in 0..steps {
        let broadcast = coordinator.broadcast();
        let mut clamp_events = 0u32;
        let mut agent_counts = vec![0u32; m];
        let mut critic_counts = vec![0u32; m];
        let mut participant_rows = Vec::with_capacity(cfg.num_agents * m + cfg.total_critics());

        // Critics draw first so active pools are known; their evaluations
        // happen inside the agents' feedback rounds.
        let mut active_per_modality: Vec<Vec<usize>> = Vec::with_capacity(m);
        for (j, pool) in critics.iter_mut().enumerate() {
            let mut active_ids = Vec::new();
            for critic in pool.iter_mut() {
                let (prob, active) = critic.draw_activation(&broadcast, &params);
                if prob.clamped {
                    clamp_events += 1;
                    sink(k + 1, &ProtocolEvent::Clamped { kind: ParticipantKind::Critic, modality: j, id: critic.id, raw: prob.raw });
                }
                if active {
                    critic_counts[j] += 1;
                    active_ids.push(critic.id);
                }
                critic.commit(active);
                participant_rows.push(ParticipantRow {
                    step: k + 1,
                    kind: ParticipantKind::Critic,
                    id: critic.id as u32,
                    modality: j as u32,
                    sigma_raw: prob.raw,
                    sigma: prob.sigma,
                    active,
                    avg: critic.time_average(),
                });
            }
            active_per_modality.push(active_ids);
        }

        for j in 0..m {
            let mut pool = CriticPool::new(
                active_per_modality[j]
                    .iter()
                    .map(|&id| (id, &evaluator as &dyn crate::participants::CriticEvaluator))
                    .collect(),
            );
            let query = format!("m{j}/k{k}");
            for agent in agents.iter_mut() {
                let outcome = run_agent_step(agent, j, &broadcast, &query, &executor, &mut pool, &params);
                for event in &outcome.events {
                    if matches!(event, ProtocolEvent::Clamped { .. }) {
                        clamp_events += 1;
                    }
                    sink(k + 1, event);
                }
                if outcome.active {
                    agent_counts[j] += 1;
                }
                participant_rows.push(ParticipantRow {
                    step: k + 1,
                    kind: ParticipantKind::Agent,
                    id: agent.id as u32,
                    modality: j as u32,
                    sigma_raw: outcome.probability.raw,
                    sigma: outcome.probability.sigma,
                    active: outcome.active,
                    avg: f64::NAN, // averages settle after the last modality; patched below
                });
            }
        }
        // Patch in the settled averages.
        for row in participant_rows.iter_mut() {
            if row.kind == ParticipantKind::Agent {
                row.avg = agents[row.id as usize].state.time_average[row.modality as usize];
            }
        }

        coordinator.observe_counts(&agent_counts, &critic_counts);

        let x: Vec<Vec<f64>> = (0..m).map(|j| agents.iter().map(|a| a.state.time_average[j]).collect()).collect();
        let y: Vec<Vec<f64>> = critics.iter().map(|pool| pool.iter().map(|c| c.time_average()).collect()).collect();
        let state = coordinator.state();
        trace.rows.push(StepRow {
            step: k + 1,
            agent_signals: state.agent_signals.clone(),
            critic_signals: state.critic_signals.clone(),
            active_agents: agent_counts,
            active_critics: critic_counts,
            agent_avg_sum: x.iter().map(|block| block.iter().sum()).collect(),
            critic_avg_sum: y.iter().map(|block| block.iter().sum()).collect(),
            total_cost: costs.total_cost(&x, &y),
            cost_ratio: None,
            bits_total: state.broadcast_bits_total,
            clamp_events,
        });
        trace.participants.extend(participant_rows);
    }
    trace
}

/// Ratio of the trace's instantaneous total cost to the oracle objective,
/// per step.
pub fn cost_ratio_series(trace: &SimulationTrace, oracle: &OracleSolution) -> Vec<f64> {
    trace.rows.iter().map(|row| row.total_cost / oracle.objective).collect()
}

// ---------------------------------------------------------------------------
// Frozen-state replication checks
// ---------------------------------------------------------------------------

/// Participation probabilities of every participant at a fixed step.
struct FrozenStep {
    agent_sigmas: Vec<Vec<f64>>,  // [m][N]
    critic_sigmas: Vec<Vec<f64>>, // [m][C_j]
    agent_signals: Vec<f64>,
}

/// Replay the deterministic trajectory to step `k` and capture the sigmas
/// that decide step k+1.
fn freeze_at(cfg: &SystemConfig, costs: &CostSet, k: u64) -> FrozenStep {
    let trace = run_simulation(cfg, costs, k);
    let row = trace.rows.last().unwrap();
    let (agent_avgs, critic_avgs) = trace.final_averages();
    let params = ProtocolParams::from_config(cfg);
    let m = cfg.modality_count();
    let agent_sigmas = (0..m)
        .map(|j| {
            (0..cfg.num_agents)
                .map(|i| {
                    let column: Vec<f64> = (0..m).map(|jj| agent_avgs[jj][i]).collect();
                    crate::participants::agent_probability(
                        row.agent_signals[j],
                        &column,
                        j,
                        &costs.agents[i],
                        params.sigma_clamp,
                        params.derivative_floor,
                    )
                    .sigma
                })
                .collect()
        })
        .collect();
    let critic_sigmas = (0..m)
        .map(|j| {
            (0..cfg.modalities[j].critic_count)
                .map(|v| {
                    crate::participants::critic_probability(
                        row.critic_signals[j],
                        critic_avgs[j][v],
                        &costs.critics[j][v],
                        params.sigma_clamp,
                        params.derivative_floor,
                    )
                    .sigma
                })
                .collect()
        })
        .collect();
    FrozenStep { agent_sigmas, critic_sigmas, agent_signals: row.agent_signals.clone() }
}

/// Result of one concentration check on the agent signal of one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoeffdingCheck {
    pub modality: usize,
    pub k: u64,
    pub epsilon: f64,
    pub replications: u32,
    /// Frequency of `|signal' - mean| >= epsilon` over the replications.
    pub empirical_rate: f64,
    /// `2 exp(-2 ((decay_coeff k + 1)^decay_exp epsilon)^2 / (initial^2 N))`
    pub bound: f64,
}

/// Freeze the run at step `k`, then replay the single agent-signal update
/// `replications` times with independent activation draws.
pub fn hoeffding_exceedance(
    cfg: &SystemConfig,
    costs: &CostSet,
    modality: usize,
    k: u64,
    epsilon: f64,
    replications: u32,
    seed: u64,
) -> HoeffdingCheck {
    let frozen = freeze_at(cfg, costs, k);
    let sched = &cfg.modalities[modality].agent_schedule;
    let eta = step_size(sched, k);
    let capacity = cfg.modalities[modality].agent_capacity;
    let mut stream = derive_rng(seed, &format!("hoeffding/m{modality}/k{k}"));
    let sigmas = &frozen.agent_sigmas[modality];
    let mut samples = Vec::with_capacity(replications as usize);
    for _ in 0..replications {
        let count = sigmas.iter().filter(|&&s| stream.gen::<f64>() < s).count() as f64;
        samples.push(frozen.agent_signals[modality] - eta * (count - capacity));
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let exceed = samples.iter().filter(|&&s| (s - mean).abs() >= epsilon).count();
    let n = cfg.num_agents as f64;
    let scaled = (sched.decay_coeff * k as f64 + 1.0).powf(sched.decay_exp) * epsilon;
    let bound = 2.0 * (-2.0 * scaled * scaled / (sched.initial * sched.initial * n)).exp();
    HoeffdingCheck {
        modality,
        k,
        epsilon,
        replications,
        empirical_rate: exceed as f64 / replications as f64,
        bound,
    }
}

/// Bias of one participant's activation noise at a frozen step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleBias {
    pub kind: ParticipantKind,
    pub modality: usize,
    pub id: usize,
    pub sigma: f64,
    /// Mean of `X - sigma` over the replications.
    pub bias: f64,
    /// Binomial standard error `sqrt(sigma (1-sigma) / R)`.
    pub std_error: f64,
}

/// Per-modality sum bias `mean(sum sigma - sum X)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySumBias {
    pub kind: ParticipantKind,
    pub modality: usize,
    pub bias: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub k: u64,
    pub replications: u32,
    pub participants: Vec<MartingaleBias>,
    pub modality_sums: Vec<ModalitySumBias>,
}

/// Mean activation bias per sigma over `replications` draws; one stream
/// drives all draws in participant-major order.
fn replicate_bias(sigmas: &[f64], replications: u32, stream: &mut impl Rng) -> Vec<f64> {
    let mut sums = vec![0.0f64; sigmas.len()];
    for _ in 0..replications {
        for (i, &sigma) in sigmas.iter().enumerate() {
            let x = if stream.gen::<f64>() < sigma { 1.0 } else { 0.0 };
            sums[i] += x - sigma;
        }
    }
    sums.iter().map(|s| s / replications as f64).collect()
}

/// Freeze the run at step `k` and measure the conditional mean of the
/// activation noise for every participant over independent replications.
pub fn martingale_check(cfg: &SystemConfig, costs: &CostSet, k: u64, replications: u32, seed: u64) -> MartingaleReport {
    let frozen = freeze_at(cfg, costs, k);
    let mut participants = Vec::new();
    let mut modality_sums = Vec::new();
    for (kind, sigmas_by_modality) in
        [(ParticipantKind::Agent, &frozen.agent_sigmas), (ParticipantKind::Critic, &frozen.critic_sigmas)]
    {
        for (j, sigmas) in sigmas_by_modality.iter().enumerate() {
            let mut stream = derive_rng(seed, &format!("martingale/{kind}/m{j}/k{k}"));
            let biases = replicate_bias(sigmas, replications, &mut stream);
            let mut sum_bias = 0.0;
            let mut sum_var = 0.0;
            for (id, (&sigma, &bias)) in sigmas.iter().zip(&biases).enumerate() {
                let variance = sigma * (1.0 - sigma);
                participants.push(MartingaleBias {
                    kind,
                    modality: j,
                    id,
                    sigma,
                    bias,
                    std_error: (variance / replications as f64).sqrt(),
                });
                sum_bias -= bias; // sum(sigma - X) = -sum(X - sigma)
                sum_var += variance;
            }
            modality_sums.push(ModalitySumBias {
                kind,
                modality: j,
                bias: sum_bias,
                std_error: (sum_var / replications as f64).sqrt(),
            });
        }
    }
    MartingaleReport { k, replications, participants, modality_sums }
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

/// One named threshold check; `passed` is `None` when the run is too short
/// to evaluate it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticCheck {
    pub name: String,
    pub passed: Option<bool>,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    /// `|x(end) - x*|` per modality per agent.
    pub agent_errors: Vec<Vec<f64>>,
    pub critic_errors: Vec<Vec<f64>>,
    pub max_agent_error: f64,
    pub max_critic_error: f64,
    /// Tail mean of `|sum_i x_ji - capacity_j|` per modality.
    pub capacity_error_agent: Vec<f64>,
    pub capacity_error_critic: Vec<f64>,
    pub cost_ratio_tail_mean: f64,
    /// Clamp events per probability evaluation after burn-in.
    pub clamp_frequency: f64,
    pub signal_min: f64,
    pub signal_max: f64,
    pub hoeffding: Vec<HoeffdingCheck>,
    pub martingale: Vec<MartingaleReport>,
    pub checks: Vec<DiagnosticCheck>,
    /// True when every evaluated check passed.
    pub all_passed: bool,
}

impl DiagnosticsReport {
    /// The per-run convergence gates (participant convergence, capacity
    /// tracking, cost ratio). Clamp frequency, signal envelope, and the
    /// replication checks are reported but do not gate a run: boundary-optimum
    /// instances clamp legitimately, and the replication checks are
    /// statistical (validated at frozen seeds by the acceptance suite).
    pub fn convergence_passed(&self) -> bool {
        self.checks
            .iter()
            .filter(|c| matches!(c.name.as_str(), "participant_convergence" | "capacity_tracking" | "cost_ratio"))
            .all(|c| c.passed.unwrap_or(true))
    }
}

/// Knobs for the replication-based diagnostics.
#[derive(Clone, Debug)]
pub struct DiagnosticsOptions {
    pub hoeffding_ks: Vec<u64>,
    pub hoeffding_epsilons: Vec<f64>,
    pub martingale_ks: Vec<u64>,
    pub replications: u32,
    pub seed: u64,
}

impl Default for DiagnosticsOptions {
    fn default() -> Self {
        Self {
            hoeffding_ks: vec![0, 100, 1000],
            hoeffding_epsilons: vec![0.05, 0.1, 0.2],
            martingale_ks: vec![10, 1000],
            replications: 10_000,
            seed: 7,
        }
    }
}

pub const MAX_PARTICIPANT_ERROR: f64 = 0.05;
pub const MAX_AGENT_CAPACITY_ERROR: f64 = 0.5;
pub const MAX_CRITIC_CAPACITY_ERROR: f64 = 0.3;
pub const COST_RATIO_BAND: (f64, f64) = (0.95, 1.05);
pub const MAX_CLAMP_FREQUENCY: f64 = 0.01;
pub const SIGNAL_ENVELOPE: (f64, f64) = (-1.0, 40.0);

/// Evaluate every diagnostic against the pinned thresholds.
pub fn evaluate_diagnostics(
    trace: &SimulationTrace,
    oracle: &OracleSolution,
    cfg: &SystemConfig,
    costs: &CostSet,
    options: &DiagnosticsOptions,
) -> DiagnosticsReport {
    let m = trace.modalities();
    let steps = trace.steps();
    let long_enough = steps >= MIN_DIAGNOSTIC_STEPS;

    let (agent_avgs, critic_avgs) = trace.final_averages();
    let agent_errors: Vec<Vec<f64>> = (0..m)
        .map(|j| (0..trace.num_agents).map(|i| (agent_avgs[j][i] - oracle.agent_allocations[j][i]).abs()).collect())
        .collect();
    let critic_errors: Vec<Vec<f64>> = (0..m)
        .map(|j| (0..trace.critic_counts[j]).map(|v| (critic_avgs[j][v] - oracle.critic_allocations[j][v]).abs()).collect())
        .collect();
    let max_agent_error = agent_errors.iter().flatten().cloned().fold(0.0, f64::max);
    let max_critic_error = critic_errors.iter().flatten().cloned().fold(0.0, f64::max);

    let tail = &trace.rows[trace.tail_start()..];
    let tail_len = tail.len().max(1) as f64;
    let capacity_error_agent: Vec<f64> = (0..m)
        .map(|j| tail.iter().map(|r| (r.agent_avg_sum[j] - cfg.modalities[j].agent_capacity).abs()).sum::<f64>() / tail_len)
        .collect();
    let capacity_error_critic: Vec<f64> = (0..m)
        .map(|j| tail.iter().map(|r| (r.critic_avg_sum[j] - cfg.modalities[j].critic_capacity).abs()).sum::<f64>() / tail_len)
        .collect();
    let cost_ratio_tail_mean = tail.iter().map(|r| r.total_cost / oracle.objective).sum::<f64>() / tail_len;

    let evals_per_step = (trace.num_agents * m + trace.critic_counts.iter().sum::<usize>()) as f64;
    let post_burn: Vec<&StepRow> = trace.rows.iter().skip(1).filter(|r| r.step > BURN_IN_STEPS).collect();
    let clamp_frequency = if post_burn.is_empty() {
        0.0
    } else {
        post_burn.iter().map(|r| r.clamp_events as f64).sum::<f64>() / (post_burn.len() as f64 * evals_per_step)
    };

    let mut signal_min = f64::INFINITY;
    let mut signal_max = f64::NEG_INFINITY;
    for row in &trace.rows {
        for &s in row.agent_signals.iter().chain(&row.critic_signals) {
            signal_min = signal_min.min(s);
            signal_max = signal_max.max(s);
        }
    }

    let mut hoeffding = Vec::new();
    for &k in options.hoeffding_ks.iter().filter(|&&k| k <= steps) {
        for &eps in &options.hoeffding_epsilons {
            hoeffding.push(hoeffding_exceedance(cfg, costs, 0, k, eps, options.replications, options.seed));
        }
    }
    let martingale: Vec<MartingaleReport> = options
        .martingale_ks
        .iter()
        .filter(|&&k| k <= steps)
        .map(|&k| martingale_check(cfg, costs, k, options.replications, options.seed))
        .collect();

    let mut checks = Vec::new();
    let gate = |ok: bool| if long_enough { Some(ok) } else { None };
    checks.push(DiagnosticCheck {
        name: "participant_convergence".into(),
        passed: gate(max_agent_error <= MAX_PARTICIPANT_ERROR && max_critic_error <= MAX_PARTICIPANT_ERROR),
        detail: format!(
            "max agent error {max_agent_error:.4}, max critic error {max_critic_error:.4} (limit {MAX_PARTICIPANT_ERROR})"
        ),
    });
    checks.push(DiagnosticCheck {
        name: "capacity_tracking".into(),
        passed: gate(
            capacity_error_agent.iter().all(|&e| e <= MAX_AGENT_CAPACITY_ERROR)
                && capacity_error_critic.iter().all(|&e| e <= MAX_CRITIC_CAPACITY_ERROR),
        ),
        detail: format!(
            "agent tail errors {capacity_error_agent:?} (limit {MAX_AGENT_CAPACITY_ERROR}), critic {capacity_error_critic:?} (limit {MAX_CRITIC_CAPACITY_ERROR})"
        ),
    });
    checks.push(DiagnosticCheck {
        name: "cost_ratio".into(),
        passed: gate(cost_ratio_tail_mean >= COST_RATIO_BAND.0 && cost_ratio_tail_mean <= COST_RATIO_BAND.1),
        detail: format!("tail mean {cost_ratio_tail_mean:.4} (band [{}, {}])", COST_RATIO_BAND.0, COST_RATIO_BAND.1),
    });
    checks.push(DiagnosticCheck {
        name: "clamp_frequency".into(),
        passed: gate(clamp_frequency <= MAX_CLAMP_FREQUENCY),
        detail: format!("{clamp_frequency:.5} of evaluations after burn-in (limit {MAX_CLAMP_FREQUENCY})"),
    });
    checks.push(DiagnosticCheck {
        name: "signal_envelope".into(),
        passed: gate(signal_min >= SIGNAL_ENVELOPE.0 && signal_max <= SIGNAL_ENVELOPE.1),
        detail: format!(
            "signals in [{signal_min:.3}, {signal_max:.3}] (envelope [{}, {}])",
            SIGNAL_ENVELOPE.0, SIGNAL_ENVELOPE.1
        ),
    });
    let hoeffding_ok = hoeffding
        .iter()
        .all(|h| h.empirical_rate <= h.bound + 3.0 * (h.bound / h.replications as f64).sqrt());
    checks.push(DiagnosticCheck {
        name: "hoeffding_exceedance".into(),
        passed: Some(hoeffding_ok),
        detail: format!("{} (k, epsilon) combinations checked", hoeffding.len()),
    });
    let martingale_ok = martingale.iter().all(|r| {
        r.participants.iter().all(|b| bias_within(b.bias, b.std_error))
            && r.modality_sums.iter().all(|b| bias_within(b.bias, b.std_error))
    });
    checks.push(DiagnosticCheck {
        name: "martingale_bias".into(),
        passed: Some(martingale_ok),
        detail: format!("{} frozen steps checked", martingale.len()),
    });

    let all_passed = checks.iter().all(|c| c.passed.unwrap_or(true));
    DiagnosticsReport {
        agent_errors,
        critic_errors,
        max_agent_error,
        max_critic_error,
        capacity_error_agent,
        capacity_error_critic,
        cost_ratio_tail_mean,
        clamp_frequency,
        signal_min,
        signal_max,
        hoeffding,
        martingale,
        checks,
        all_passed,
    }
}

/// `|bias| <= 3 se`, with the zero-variance edge demanding an exact zero.
pub fn bias_within(bias: f64, std_error: f64) -> bool {
    if std_error == 0.0 {
        bias == 0.0
    } else {
        bias.abs() <= 3.0 * std_error
    }
}

// ---------------------------------------------------------------------------
// CSV export / import
// ---------------------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write `trace.csv` (per step and modality) and `participants.csv` (long
/// format) into `dir`.
pub fn export_trace(trace: &SimulationTrace, dir: &Path) -> Result<(), SimError> {
    let io_err = |path: &Path| {
        let p = path.display().to_string();
        move |source: std::io::Error| SimError::Io { path: p.clone(), source }
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;

    let trace_path = dir.join("trace.csv");
    let mut out = String::from(
        "step,modality,theta_agent,theta_critic,active_agents,active_critics,agent_avg_sum,critic_avg_sum,total_cost,cost_ratio,bits_total,clamp_events\n",
    );
    for row in &trace.rows {
        for j in 0..trace.modalities() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                row.step,
                j,
                row.agent_signals[j],
                row.critic_signals[j],
                row.active_agents[j],
                row.active_critics[j],
                row.agent_avg_sum[j],
                row.critic_avg_sum[j],
                row.total_cost,
                fmt_opt(row.cost_ratio),
                row.bits_total,
                row.clamp_events,
            ));
        }
    }
    let mut f = std::fs::File::create(&trace_path).map_err(io_err(&trace_path))?;
    f.write_all(out.as_bytes()).map_err(io_err(&trace_path))?;

    let part_path = dir.join("participants.csv");
    let mut out = String::from("step,kind,id,modality,sigma_raw,sigma,active,avg\n");
    for row in &trace.participants {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.step,
            row.kind,
            row.id,
            row.modality,
            row.sigma_raw,
            row.sigma,
            row.active as u8,
            row.avg,
        ));
    }
    let mut f = std::fs::File::create(&part_path).map_err(io_err(&part_path))?;
    f.write_all(out.as_bytes()).map_err(io_err(&part_path))?;
    Ok(())
}

/// Re-read a trace written by [`export_trace`].
pub fn import_trace(dir: &Path) -> Result<SimulationTrace, SimError> {
    let trace_path = dir.join("trace.csv");
    let text = std::fs::read_to_string(&trace_path)
        .map_err(|source| SimError::Io { path: trace_path.display().to_string(), source })?;
    let bad = |path: &Path, message: String| SimError::Format { path: path.display().to_string(), message };

    let mut rows: Vec<StepRow> = Vec::new();
    for line in text.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(bad(&trace_path, format!("expected 12 fields, got {}", f.len())));
        }
        let step: u64 = f[0].parse().map_err(|_| bad(&trace_path, format!("bad step `{}`", f[0])))?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&trace_path, format!("bad number `{s}`")));
        let int = |s: &str| s.parse::<u32>().map_err(|_| bad(&trace_path, format!("bad count `{s}`")));
        if rows.last().map(|r: &StepRow| r.step) != Some(step) {
            rows.push(StepRow {
                step,
                agent_signals: Vec::new(),
                critic_signals: Vec::new(),
                active_agents: Vec::new(),
                active_critics: Vec::new(),
                agent_avg_sum: Vec::new(),
                critic_avg_sum: Vec::new(),
                total_cost: num(f[8])?,
                cost_ratio: if f[9].is_empty() { None } else { Some(num(f[9])?) },
                bits_total: f[10].parse().map_err(|_| bad(&trace_path, format!("bad bits `{}`", f[10])))?,
                clamp_events: int(f[11])?,
            });
        }
        let row = rows.last_mut().unwrap();
        row.agent_signals.push(num(f[2])?);
        row.critic_signals.push(num(f[3])?);
        row.active_agents.push(int(f[4])?);
        row.active_critics.push(int(f[5])?);
        row.agent_avg_sum.push(num(f[6])?);
        row.critic_avg_sum.push(num(f[7])?);
    }
    if rows.is_empty() {
        return Err(bad(&trace_path, "no rows".into()));
    }

    let part_path = dir.join("participants.csv");
    let text = std::fs::read_to_string(&part_path)
        .map_err(|source| SimError::Io { path: part_path.display().to_string(), source })?;
    let mut participants = Vec::new();
    for line in text.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad(&part_path, format!("expected 8 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&part_path, format!("bad number `{s}`")));
        participants.push(ParticipantRow {
            step: f[0].parse().map_err(|_| bad(&part_path, format!("bad step `{}`", f[0])))?,
            kind: match f[1] {
                "agent" => ParticipantKind::Agent,
                "critic" => ParticipantKind::Critic,
                other => return Err(bad(&part_path, format!("bad kind `{other}`"))),
            },
            id: f[2].parse().map_err(|_| bad(&part_path, format!("bad id `{}`", f[2])))?,
            modality: f[3].parse().map_err(|_| bad(&part_path, format!("bad modality `{}`", f[3])))?,
            sigma_raw: num(f[4])?,
            sigma: num(f[5])?,
            active: f[6] == "1",
            avg: num(f[7])?,
        });
    }

    // Initial row is all-active, so counts there give the pool sizes.
    let num_agents = rows[0].active_agents[0] as usize;
    let critic_counts = rows[0].active_critics.iter().map(|&c| c as usize).collect();
    Ok(SimulationTrace { num_agents, critic_counts, rows, participants })
}
