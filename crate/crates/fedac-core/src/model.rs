//! Shared domain types: step-size schedules, per-modality configuration, the
//! full system configuration with validation, and per-participant state.

use crate::cost::{AgentCoeffRanges, CriticCoeffRanges, CriticCostForm};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Decaying step-size schedule `initial / (decay_coeff * k + 1)^decay_exp`.
///
/// With `decay_exp` in (1/2, 1) the sequence is square-summable but not
/// summable, and decays slower than the 1/(k+1) averaging timescale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub initial: f64,
    pub decay_coeff: f64,
    pub decay_exp: f64,
}

impl StepSchedule {
    /// Construct a schedule, rejecting out-of-range parameters.
    pub fn new(initial: f64, decay_coeff: f64, decay_exp: f64) -> Result<Self, ConfigError> {
        let s = Self { initial, decay_coeff, decay_exp };
        match s.violation() {
            None => Ok(s),
            Some(v) => Err(ConfigError::Invalid(v.message)),
        }
    }

    fn violation(&self) -> Option<Violation> {
        if !(self.initial > 0.0) {
            return Some(Violation::new("schedule.initial", format!("initial step size must be > 0, got {}", self.initial)));
        }
        if !(self.decay_coeff > 0.0) {
            return Some(Violation::new("schedule.decay_coeff", format!("decay coefficient must be > 0, got {}", self.decay_coeff)));
        }
        if !(self.decay_exp > 0.5 && self.decay_exp < 1.0) {
            return Some(Violation::new("schedule.decay_exp", format!("decay exponent must lie in (0.5, 1), got {}", self.decay_exp)));
        }
        None
    }
}

/// Step size at step `k`: `initial / (decay_coeff * k + 1)^decay_exp`.
pub fn step_size(sched: &StepSchedule, k: u64) -> f64 {
    sched.initial / (sched.decay_coeff * k as f64 + 1.0).powf(sched.decay_exp)
}

/// Configuration of one task modality: capacities, critic pool size, signal
/// initial values, and the two step-size schedules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityConfig {
    /// Desired number of simultaneously active agents for this modality.
    pub agent_capacity: f64,
    /// Number of critics evaluating this modality.
    pub critic_count: usize,
    /// Desired number of simultaneously active critics.
    pub critic_capacity: f64,
    pub agent_schedule: StepSchedule,
    pub critic_schedule: StepSchedule,
    /// Initial feedback-signal value broadcast to agents.
    pub agent_signal_init: f64,
    /// Initial feedback-signal value broadcast to critics.
    pub critic_signal_init: f64,
    /// Cost-function shape used by this modality's critics.
    pub critic_cost_form: CriticCostForm,
}

/// Full experiment definition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub num_agents: usize,
    pub modalities: Vec<ModalityConfig>,
    pub master_seed: u64,
    pub max_steps: u64,
    /// Participation probabilities are clamped into [sigma_clamp, 1 - sigma_clamp].
    pub sigma_clamp: f64,
    /// Cost-derivative denominators below this are floored before division.
    pub derivative_floor: f64,
    pub agent_ranges: AgentCoeffRanges,
    pub critic_ranges: CriticCoeffRanges,
    /// When set, an agent revises its response only if the critic's score is
    /// below this threshold. Disabled by default.
    pub score_threshold: Option<f64>,
}

impl SystemConfig {
    pub fn modality_count(&self) -> usize {
        self.modalities.len()
    }

    /// Total critic count across modalities.
    pub fn total_critics(&self) -> usize {
        self.modalities.iter().map(|m| m.critic_count).sum()
    }
}

/// One violated configuration invariant. Violations are data, not failures.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Machine-readable code, e.g. `agent_capacity.range`.
    pub code: String,
    pub message: String,
}

impl Violation {
    fn new(code: &str, message: String) -> Self {
        Self { code: code.to_string(), message }
    }
}

/// Check every type invariant of `cfg`; empty result means valid.
pub fn validate_config(cfg: &SystemConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    if cfg.num_agents == 0 {
        out.push(Violation::new("num_agents.zero", "num_agents must be >= 1".into()));
    }
    if cfg.modalities.is_empty() {
        out.push(Violation::new("modalities.empty", "at least one modality is required".into()));
    }
    if !(cfg.sigma_clamp > 0.0 && cfg.sigma_clamp < 0.5) {
        out.push(Violation::new("sigma_clamp.range", format!("sigma_clamp must lie in (0, 0.5), got {}", cfg.sigma_clamp)));
    }
    if !(cfg.derivative_floor > 0.0) {
        out.push(Violation::new("derivative_floor.range", format!("derivative_floor must be > 0, got {}", cfg.derivative_floor)));
    }
    for (j, m) in cfg.modalities.iter().enumerate() {
        let tag = |code: &str| format!("modality.{}.{}", j + 1, code);
        if !(m.agent_capacity > 0.0 && m.agent_capacity <= cfg.num_agents as f64) {
            out.push(Violation::new(&tag("agent_capacity.range"), format!("agent capacity {} must lie in (0, {}]", m.agent_capacity, cfg.num_agents)));
        }
        if m.critic_count == 0 {
            out.push(Violation::new(&tag("critic_count.zero"), "critic_count must be >= 1".into()));
        }
        if !(m.critic_capacity > 0.0 && m.critic_capacity <= m.critic_count as f64) {
            out.push(Violation::new(&tag("critic_capacity.range"), format!("critic capacity {} must lie in (0, {}]", m.critic_capacity, m.critic_count)));
        }
        for (schedule, which) in [(&m.agent_schedule, "agent_step"), (&m.critic_schedule, "critic_step")] {
            if let Some(v) = schedule.violation() {
                out.push(Violation::new(&tag(&format!("{which}.{}", v.code)), v.message));
            }
        }
    }
    for (value, code) in [
        (cfg.agent_ranges.a_max, "cost.agent.a_max"),
        (cfg.agent_ranges.b_max, "cost.agent.b_max"),
        (cfg.agent_ranges.c_max, "cost.agent.c_max"),
        (cfg.agent_ranges.d_max, "cost.agent.d_max"),
        (cfg.critic_ranges.p_max, "cost.critic.p_max"),
        (cfg.critic_ranges.q_max, "cost.critic.q_max"),
    ] {
        if !(value > 0.0) {
            out.push(Violation::new(&format!("{code}.range"), format!("coefficient range bound must be > 0, got {value}")));
        }
    }
    out
}

/// One participant's protocol state: activation bit, running average, and
/// step counter, per modality it serves. Critics carry exactly one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantState {
    pub active: Vec<bool>,
    pub time_average: Vec<f64>,
    pub step: u64,
}

impl ParticipantState {
    /// Initial state: active on every modality with average 1.
    pub fn new(modalities: usize) -> Self {
        Self { active: vec![true; modalities], time_average: vec![1.0; modalities], step: 0 }
    }

    /// Fold the next activation bits into the running averages and advance
    /// the step counter. `bits` must cover every modality.
    pub fn advance(&mut self, bits: &[bool]) {
        assert_eq!(bits.len(), self.active.len(), "one activation bit per modality");
        for (j, &bit) in bits.iter().enumerate() {
            self.time_average[j] = crate::participants::update_time_average(self.time_average[j], self.step, bit);
            self.active[j] = bit;
        }
        self.step += 1;
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing required key `{0}`")]
    MissingKey(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// Flat key-value configuration format
// ---------------------------------------------------------------------------
//
// One `key = value` pair per line, `#` starts a comment, dotted keys address
// modalities 1-based: `modality.1.agent_capacity = 6`. Full schema in the
// CLI's README section; `to_kv_string` emits every key it reads.

fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Parse { line: idx + 1, message: format!("expected `key = value`, got `{line}`") });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Parse { line: idx + 1, message: "empty key or value".into() });
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(ConfigError::Parse { line: idx + 1, message: format!("duplicate key `{key}`") });
        }
    }
    Ok(map)
}

struct KvReader {
    map: BTreeMap<String, String>,
}

impl KvReader {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn required<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, ConfigError> {
        let raw = self.take(key).ok_or_else(|| ConfigError::MissingKey(key.to_string()))?;
        raw.parse().map_err(|_| ConfigError::Invalid(format!("key `{key}`: cannot parse `{raw}`")))
    }

    fn optional<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| ConfigError::Invalid(format!("key `{key}`: cannot parse `{raw}`"))),
        }
    }
}

impl SystemConfig {
    /// Parse a configuration from the flat key-value text format.
    ///
    /// Values are read as written; semantic checks are left to
    /// [`validate_config`] so that an invalid-but-well-formed file can be
    /// reported violation by violation.
    pub fn from_kv_str(text: &str) -> Result<Self, ConfigError> {
        let mut r = KvReader { map: parse_kv(text)? };
        let num_agents: usize = r.required("num_agents")?;
        let master_seed: u64 = r.optional("master_seed", 0)?;
        let max_steps: u64 = r.optional("max_steps", 100_000)?;
        let sigma_clamp: f64 = r.optional("sigma_clamp", 1e-6)?;
        let derivative_floor: f64 = r.optional("derivative_floor", 1e-9)?;
        let score_threshold = match r.take("score_threshold") {
            None => None,
            Some(raw) => Some(raw.parse().map_err(|_| ConfigError::Invalid(format!("key `score_threshold`: cannot parse `{raw}`")))?),
        };
        let agent_ranges = AgentCoeffRanges {
            a_max: r.optional("cost.agent.a_max", 20.0)?,
            b_max: r.optional("cost.agent.b_max", 15.0)?,
            c_max: r.optional("cost.agent.c_max", 20.0)?,
            d_max: r.optional("cost.agent.d_max", 30.0)?,
        };
        let critic_ranges = CriticCoeffRanges {
            p_max: r.optional("cost.critic.p_max", 10.0)?,
            q_max: r.optional("cost.critic.q_max", 6.0)?,
        };

        let mut modalities = Vec::new();
        for j in 1.. {
            let prefix = format!("modality.{j}.");
            if !r.map.keys().any(|k| k.starts_with(&prefix)) {
                break;
            }
            let key = |name: &str| format!("{prefix}{name}");
            let default_form = if j == 1 { CriticCostForm::QuadQuartic } else { CriticCostForm::QuadQuarticHalf };
            modalities.push(ModalityConfig {
                agent_capacity: r.required(&key("agent_capacity"))?,
                critic_count: r.required(&key("critic_count"))?,
                critic_capacity: r.required(&key("critic_capacity"))?,
                agent_schedule: StepSchedule {
                    initial: r.required(&key("agent_step.initial"))?,
                    decay_coeff: r.required(&key("agent_step.decay_coeff"))?,
                    decay_exp: r.required(&key("agent_step.decay_exp"))?,
                },
                critic_schedule: StepSchedule {
                    initial: r.required(&key("critic_step.initial"))?,
                    decay_coeff: r.required(&key("critic_step.decay_coeff"))?,
                    decay_exp: r.required(&key("critic_step.decay_exp"))?,
                },
                agent_signal_init: r.required(&key("agent_signal_init"))?,
                critic_signal_init: r.required(&key("critic_signal_init"))?,
                critic_cost_form: r.optional(&key("critic_cost_form"), default_form)?,
            });
        }
        if let Some(key) = r.map.keys().next() {
            return Err(ConfigError::UnknownKey(key.clone()));
        }
        Ok(Self {
            num_agents,
            modalities,
            master_seed,
            max_steps,
            sigma_clamp,
            derivative_floor,
            agent_ranges,
            critic_ranges,
            score_threshold,
        })
    }

    /// Load a configuration file in the flat key-value format.
    pub fn from_kv_file(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_kv_str(&text)
    }

    /// Render the configuration back to the flat key-value format.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("num_agents", self.num_agents.to_string());
        push("master_seed", self.master_seed.to_string());
        push("max_steps", self.max_steps.to_string());
        push("sigma_clamp", self.sigma_clamp.to_string());
        push("derivative_floor", self.derivative_floor.to_string());
        if let Some(t) = self.score_threshold {
            push("score_threshold", t.to_string());
        }
        push("cost.agent.a_max", self.agent_ranges.a_max.to_string());
        push("cost.agent.b_max", self.agent_ranges.b_max.to_string());
        push("cost.agent.c_max", self.agent_ranges.c_max.to_string());
        push("cost.agent.d_max", self.agent_ranges.d_max.to_string());
        push("cost.critic.p_max", self.critic_ranges.p_max.to_string());
        push("cost.critic.q_max", self.critic_ranges.q_max.to_string());
        for (idx, m) in self.modalities.iter().enumerate() {
            let j = idx + 1;
            push(&format!("modality.{j}.agent_capacity"), m.agent_capacity.to_string());
            push(&format!("modality.{j}.critic_count"), m.critic_count.to_string());
            push(&format!("modality.{j}.critic_capacity"), m.critic_capacity.to_string());
            push(&format!("modality.{j}.agent_step.initial"), m.agent_schedule.initial.to_string());
            push(&format!("modality.{j}.agent_step.decay_coeff"), m.agent_schedule.decay_coeff.to_string());
            push(&format!("modality.{j}.agent_step.decay_exp"), m.agent_schedule.decay_exp.to_string());
            push(&format!("modality.{j}.critic_step.initial"), m.critic_schedule.initial.to_string());
            push(&format!("modality.{j}.critic_step.decay_coeff"), m.critic_schedule.decay_coeff.to_string());
            push(&format!("modality.{j}.critic_step.decay_exp"), m.critic_schedule.decay_exp.to_string());
            push(&format!("modality.{j}.agent_signal_init"), m.agent_signal_init.to_string());
            push(&format!("modality.{j}.critic_signal_init"), m.critic_signal_init.to_string());
            push(&format!("modality.{j}.critic_cost_form"), m.critic_cost_form.to_string());
        }
        out
    }

    /// The two-modality nine-agent experiment setup used throughout the
    /// built-in presets and the acceptance checks.
    pub fn paper_preset(master_seed: u64, max_steps: u64) -> Self {
        let agent_schedule = StepSchedule { initial: 0.034, decay_coeff: 0.14, decay_exp: 0.51 };
        let critic_schedule = StepSchedule { initial: 0.035, decay_coeff: 0.15, decay_exp: 0.51 };
        let modality = |agent_capacity: f64, form: CriticCostForm| ModalityConfig {
            agent_capacity,
            critic_count: 3,
            critic_capacity: 2.0,
            agent_schedule,
            critic_schedule,
            agent_signal_init: 0.1,
            critic_signal_init: 0.33,
            critic_cost_form: form,
        };
        Self {
            num_agents: 9,
            modalities: vec![
                modality(6.0, CriticCostForm::QuadQuartic),
                modality(7.0, CriticCostForm::QuadQuarticHalf),
            ],
            master_seed,
            max_steps,
            sigma_clamp: 1e-6,
            derivative_floor: 1e-9,
            agent_ranges: AgentCoeffRanges::default(),
            critic_ranges: CriticCoeffRanges::default(),
            score_threshold: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_cfg() -> SystemConfig {
        SystemConfig::paper_preset(42, 1000)
    }

    #[test]
    fn step_size_at_zero_is_initial() {
        let s = StepSchedule::new(0.034, 0.14, 0.51).unwrap();
        assert_eq!(step_size(&s, 0), 0.034);
        let unit = StepSchedule::new(1.0, 1.0, 0.51).unwrap();
        assert_eq!(step_size(&unit, 0), 1.0);
    }

    #[test]
    fn step_size_matches_high_precision_reference() {
        // 0.034 / 141^0.51 evaluated with 40-digit arithmetic.
        let s = StepSchedule::new(0.034, 0.14, 0.51).unwrap();
        let expected = 0.002725066906133390248;
        assert!((step_size(&s, 1000) - expected).abs() < 1e-18);
    }

    #[test]
    fn step_size_strictly_decreasing() {
        let s = StepSchedule::new(0.034, 0.14, 0.51).unwrap();
        let mut prev = step_size(&s, 0);
        for k in 1..10_000 {
            let cur = step_size(&s, k);
            assert!(cur < prev, "not decreasing at k={k}");
            assert!(cur > 0.0);
            prev = cur;
        }
    }

    #[test]
    fn step_size_square_series_bounded_and_series_diverges() {
        // Partial sums of the squared series stay below
        // initial^2 * (1 + 1/(decay_coeff*(2*decay_exp - 1))), while the
        // series itself exceeds the analytic integral lower bound
        // initial*((decay_coeff*K+1)^(1-exp) - 1)/(decay_coeff*(1-exp)).
        for (sched, sq_bound) in [
            (StepSchedule::new(0.034, 0.14, 0.51).unwrap(), 0.41401314285714286),
            (StepSchedule::new(0.035, 0.15, 0.51).unwrap(), 0.40955833333333333),
        ] {
            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            let mut prev_sq = 0.0f64;
            let k_max = 1_000_000u64;
            for k in 0..=k_max {
                let e = step_size(&sched, k);
                sum += e;
                sum_sq += e * e;
                assert!(sum_sq >= prev_sq);
                prev_sq = sum_sq;
            }
            assert!(sum_sq <= sq_bound + 1e-12, "square series exceeded bound: {sum_sq} > {sq_bound}");
            let a = sched.decay_coeff;
            let b = sched.decay_exp;
            let lower = sched.initial * ((a * k_max as f64 + 1.0).powf(1.0 - b) - 1.0) / (a * (1.0 - b));
            assert!(sum >= lower, "series partial sum {sum} below analytic lower bound {lower}");
            assert!(sum > 100.0);
        }
    }

    #[test]
    fn averaging_timescale_is_faster_than_signal_timescale() {
        // (1/(k+1)) / step_size(k) decreases monotonically and falls below
        // 1e-3 (checked at k = 1e9; at 1e8 the ratio is still ~1.3e-3 for
        // these schedules).
        for sched in [
            StepSchedule::new(0.034, 0.14, 0.51).unwrap(),
            StepSchedule::new(0.035, 0.15, 0.51).unwrap(),
        ] {
            let ratio = |k: u64| (1.0 / (k as f64 + 1.0)) / step_size(&sched, k);
            let mut prev = ratio(0);
            for k in [1u64, 10, 100, 1_000, 10_000, 100_000, 1_000_000, 10_000_000, 100_000_000, 1_000_000_000] {
                let cur = ratio(k);
                assert!(cur < prev, "timescale ratio not decreasing at k={k}");
                prev = cur;
            }
            assert!(ratio(1_000_000_000) < 1e-3);
        }
    }

    #[test]
    fn schedule_constructor_rejects_bad_parameters() {
        assert!(StepSchedule::new(0.0, 1.0, 0.6).is_err());
        assert!(StepSchedule::new(1.0, 0.0, 0.6).is_err());
        assert!(StepSchedule::new(1.0, 1.0, 0.5).is_err());
        assert!(StepSchedule::new(1.0, 1.0, 1.0).is_err());
        assert!(StepSchedule::new(1.0, 1.0, 0.4).is_err());
    }

    #[test]
    fn paper_preset_validates_clean() {
        assert_eq!(validate_config(&paper_cfg()), Vec::new());
    }

    #[test]
    fn capacity_exceeding_agent_count_is_flagged() {
        let mut cfg = paper_cfg();
        cfg.modalities[0].agent_capacity = 10.0;
        let violations = validate_config(&cfg);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].code, "modality.1.agent_capacity.range");
    }

    #[test]
    fn decay_exponent_out_of_range_is_flagged() {
        let mut cfg = paper_cfg();
        cfg.modalities[1].agent_schedule.decay_exp = 0.4;
        let violations = validate_config(&cfg);
        assert_eq!(violations.len(), 1);
        assert_eq!(violations[0].code, "modality.2.agent_step.schedule.decay_exp");
    }

    #[test]
    fn kv_round_trip() {
        let cfg = paper_cfg();
        let text = cfg.to_kv_string();
        let parsed = SystemConfig::from_kv_str(&text).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn kv_rejects_unknown_keys_and_missing_required() {
        let cfg = paper_cfg();
        let mut text = cfg.to_kv_string();
        text.push_str("modality.1.bogus = 3\n");
        assert!(matches!(SystemConfig::from_kv_str(&text), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(SystemConfig::from_kv_str("master_seed = 1\n"), Err(ConfigError::MissingKey(_))));
    }

    #[test]
    fn kv_parse_error_carries_line() {
        let err = SystemConfig::from_kv_str("num_agents = 9\nnot a pair\n").unwrap_err();
        match err {
            ConfigError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn participant_state_tracks_batch_mean() {
        let mut state = ParticipantState::new(1);
        let bits = [true, false, false, true, true, false, true];
        let mut history = vec![true]; // initial activation
        for &b in &bits {
            state.advance(&[b]);
            history.push(b);
        }
        let mean = history.iter().filter(|&&b| b).count() as f64 / history.len() as f64;
        assert!((state.time_average[0] - mean).abs() <= 1e-12);
        assert_eq!(state.step, bits.len() as u64);
    }
}
