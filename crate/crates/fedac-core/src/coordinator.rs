//! The central server: per-modality feedback signals for agents and critics,
//! updated from observed activation counts, plus broadcast-overhead
//! accounting.
//!
//! The coordinator sees only integer activation counts and capacities. Cost
//! functions, derivatives, and per-participant identities never cross this
//! interface.

use crate::model::{step_size, StepSchedule, SystemConfig};
use serde::{Deserialize, Serialize};

/// Coordinator-side signal state.
///
/// `broadcast_bits_total == 128 * modalities * step` at every step boundary:
/// one broadcast of `2 m` double-precision signals per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackState {
    pub agent_signals: Vec<f64>,
    pub critic_signals: Vec<f64>,
    pub step: u64,
    pub broadcast_bits_total: u64,
}

/// Immutable snapshot handed to participants; safe to share.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BroadcastRecord {
    pub step: u64,
    pub agent_signals: Vec<f64>,
    pub critic_signals: Vec<f64>,
    pub bits_total: u64,
}

/// One observed step of activation counts; the coordinator's full input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountObservation {
    pub step: u64,
    pub agent_counts: Vec<u32>,
    pub critic_counts: Vec<u32>,
}

/// Feedback-signal update for agents of one modality:
/// `signal - step_size(k) * (active_count - capacity)`. The signal itself is
/// never clamped; only participation probabilities are.
pub fn update_agent_signal(signal: f64, k: u64, active_count: u32, capacity: f64, sched: &StepSchedule) -> f64 {
    signal - step_size(sched, k) * (active_count as f64 - capacity)
}

/// Critic analogue of [`update_agent_signal`].
pub fn update_critic_signal(signal: f64, k: u64, active_count: u32, capacity: f64, sched: &StepSchedule) -> f64 {
    signal - step_size(sched, k) * (active_count as f64 - capacity)
}

/// The central server for one simulation run.
#[derive(Clone, Debug)]
pub struct Coordinator {
    state: FeedbackState,
    agent_capacities: Vec<f64>,
    critic_capacities: Vec<f64>,
    agent_schedules: Vec<StepSchedule>,
    critic_schedules: Vec<StepSchedule>,
    audit: Vec<CountObservation>,
    keep_audit: bool,
}

impl Coordinator {
    pub fn new(cfg: &SystemConfig) -> Self {
        Self {
            state: FeedbackState {
                agent_signals: cfg.modalities.iter().map(|m| m.agent_signal_init).collect(),
                critic_signals: cfg.modalities.iter().map(|m| m.critic_signal_init).collect(),
                step: 0,
                broadcast_bits_total: 0,
            },
            agent_capacities: cfg.modalities.iter().map(|m| m.agent_capacity).collect(),
            critic_capacities: cfg.modalities.iter().map(|m| m.critic_capacity).collect(),
            agent_schedules: cfg.modalities.iter().map(|m| m.agent_schedule).collect(),
            critic_schedules: cfg.modalities.iter().map(|m| m.critic_schedule).collect(),
            audit: Vec::new(),
            keep_audit: false,
        }
    }

    /// Record every observation for later auditing (tests, privacy checks).
    pub fn with_audit(mut self) -> Self {
        self.keep_audit = true;
        self
    }

    pub fn state(&self) -> &FeedbackState {
        &self.state
    }

    pub fn audit_log(&self) -> &[CountObservation] {
        &self.audit
    }

    /// Emit the current signals and account for `128 * m` broadcast bits
    /// (2 signals per modality, 64 bits each).
    pub fn broadcast(&mut self) -> BroadcastRecord {
        self.state.broadcast_bits_total += 128 * self.modalities() as u64;
        BroadcastRecord {
            step: self.state.step,
            agent_signals: self.state.agent_signals.clone(),
            critic_signals: self.state.critic_signals.clone(),
            bits_total: self.state.broadcast_bits_total,
        }
    }

    /// Fold the step's activation counts into the signals and advance the
    /// step counter. Counts must be per modality.
    pub fn observe_counts(&mut self, agent_counts: &[u32], critic_counts: &[u32]) {
        assert_eq!(agent_counts.len(), self.modalities());
        assert_eq!(critic_counts.len(), self.modalities());
        let k = self.state.step;
        if self.keep_audit {
            self.audit.push(CountObservation {
                step: k,
                agent_counts: agent_counts.to_vec(),
                critic_counts: critic_counts.to_vec(),
            });
        }
        for j in 0..self.modalities() {
            self.state.agent_signals[j] =
                update_agent_signal(self.state.agent_signals[j], k, agent_counts[j], self.agent_capacities[j], &self.agent_schedules[j]);
            self.state.critic_signals[j] =
                update_critic_signal(self.state.critic_signals[j], k, critic_counts[j], self.critic_capacities[j], &self.critic_schedules[j]);
        }
        self.state.step += 1;
        debug_assert_eq!(self.state.broadcast_bits_total, 128 * self.modalities() as u64 * self.state.step);
    }

    fn modalities(&self) -> usize {
        self.agent_capacities.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SystemConfig;
    use rand::Rng;

    #[test]
    fn agent_update_matches_direct_substitution() {
        // Initial values of the experiment setup: signal 0.1, 9 active vs
        // capacity 6, step size 0.034 at k = 0.
        let sched = StepSchedule::new(0.034, 0.14, 0.51).unwrap();
        let next = update_agent_signal(0.1, 0, 9, 6.0, &sched);
        assert!((next - (0.1 - 0.034 * 3.0)).abs() < 1e-15);
        assert!((next + 0.002).abs() < 1e-15);
    }

    #[test]
    fn critic_update_matches_direct_substitution() {
        let sched = StepSchedule::new(0.035, 0.15, 0.51).unwrap();
        let next = update_critic_signal(0.33, 0, 3, 2.0, &sched);
        assert!((next - 0.295).abs() < 1e-15);
    }

    #[test]
    fn count_at_capacity_is_fixed_point() {
        let sched = StepSchedule::new(0.034, 0.14, 0.51).unwrap();
        assert_eq!(update_agent_signal(0.7, 5, 6, 6.0, &sched), 0.7);
        assert_eq!(update_critic_signal(-0.3, 11, 2, 2.0, &sched), -0.3);
    }

    #[test]
    fn update_is_affine_in_count_with_step_size_slope() {
        let sched = StepSchedule::new(0.034, 0.14, 0.51).unwrap();
        for k in [0u64, 1, 10, 1000] {
            let base = update_agent_signal(0.42, k, 4, 6.0, &sched);
            let plus = update_agent_signal(0.42, k, 5, 6.0, &sched);
            assert!((plus - base + step_size(&sched, k)).abs() < 1e-15);
        }
    }

    #[test]
    fn random_replay_matches_independent_recurrence() {
        // Replay the recurrence through the Coordinator and compare with a
        // plain scalar fold computed separately.
        let cfg = SystemConfig::paper_preset(3, 100);
        let mut coordinator = Coordinator::new(&cfg);
        let mut stream = crate::rng::derive_rng(5, "coord-replay");
        let mut expected_agent: Vec<f64> = cfg.modalities.iter().map(|m| m.agent_signal_init).collect();
        let mut expected_critic: Vec<f64> = cfg.modalities.iter().map(|m| m.critic_signal_init).collect();
        for k in 0..5000u64 {
            let agent_counts: Vec<u32> = (0..2).map(|_| stream.gen_range(0..=9)).collect();
            let critic_counts: Vec<u32> = (0..2).map(|_| stream.gen_range(0..=3)).collect();
            coordinator.broadcast();
            coordinator.observe_counts(&agent_counts, &critic_counts);
            for j in 0..2 {
                let m = &cfg.modalities[j];
                expected_agent[j] -= step_size(&m.agent_schedule, k) * (agent_counts[j] as f64 - m.agent_capacity);
                expected_critic[j] -= step_size(&m.critic_schedule, k) * (critic_counts[j] as f64 - m.critic_capacity);
            }
        }
        for j in 0..2 {
            assert!((coordinator.state().agent_signals[j] - expected_agent[j]).abs() <= 1e-12);
            assert!((coordinator.state().critic_signals[j] - expected_critic[j]).abs() <= 1e-12);
        }
    }

    #[test]
    fn broadcast_accounting_is_exact() {
        let cfg = SystemConfig::paper_preset(1, 10);
        let mut coordinator = Coordinator::new(&cfg);
        let rec = coordinator.broadcast();
        assert_eq!(rec.bits_total, 256); // m = 2
        coordinator.observe_counts(&[0, 0], &[0, 0]);
        assert_eq!(coordinator.state().broadcast_bits_total, 128 * 2 * coordinator.state().step);

        let mut one = SystemConfig::paper_preset(1, 10);
        one.modalities.truncate(1);
        let mut c1 = Coordinator::new(&one);
        assert_eq!(c1.broadcast().bits_total, 128);

        let mut three = SystemConfig::paper_preset(1, 10);
        three.modalities.push(three.modalities[0].clone());
        let mut c3 = Coordinator::new(&three);
        for _ in 0..1000 {
            c3.broadcast();
            c3.observe_counts(&[0, 0, 0], &[0, 0, 0]);
        }
        assert_eq!(c3.state().broadcast_bits_total, 384_000);
    }

    #[test]
    fn audit_log_contains_only_counts() {
        let cfg = SystemConfig::paper_preset(1, 10);
        let mut coordinator = Coordinator::new(&cfg).with_audit();
        coordinator.broadcast();
        coordinator.observe_counts(&[3, 4], &[1, 2]);
        assert_eq!(
            coordinator.audit_log(),
            &[CountObservation { step: 0, agent_counts: vec![3, 4], critic_counts: vec![1, 2] }]
        );
    }
}
