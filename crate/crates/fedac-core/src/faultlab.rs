//! Two-stage fault-analysis harness on top of the participation protocol:
//! stage 1 detects faults with a pluggable detector (built-in: from-scratch
//! logistic regression), stage 2 classifies severity and summarizes the
//! cause with a pluggable reasoner (built-in: threshold rule engine). Both
//! stages schedule work through the agent/critic protocol.

use crate::coordinator::Coordinator;
use crate::cost::CostSet;
use crate::model::SystemConfig;
use crate::participants::{AgentRuntime, CriticRuntime, ProtocolParams};
use crate::rng;
use crate::telemetry::{LabeledDataset, TelemetryRecord};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FaultlabError {
    #[error("training set must contain both labels")]
    SingleClassTraining,
    #[error("prediction/truth length mismatch: {predictions} vs {truth}")]
    LengthMismatch { predictions: usize, truth: usize },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("scheduling did not finish within {0} protocol steps")]
    SchedulingStalled(u64),
    #[error("rule line {line}: {message}")]
    RuleParse { line: usize, message: String },
    #[error("too many sets for an intersection report: {0} (cap 16)")]
    TooManySets(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

// ---------------------------------------------------------------------------
// Features and the baseline detector
// ---------------------------------------------------------------------------

/// Numeric feature layout: selected columns, train-split standardization
/// statistics. Vectorization appends one missing-indicator per column and
/// imputes missing values at the (standardized) mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub columns: Vec<String>,
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl FeatureSpec {
    /// Fit standardization over the train split. Features default to every
    /// numeric column; `allowlist` restricts them.
    pub fn fit(train: &LabeledDataset, allowlist: Option<&[String]>) -> Self {
        let columns: Vec<String> = match allowlist {
            Some(list) => train.table.numeric_columns.iter().filter(|c| list.contains(c)).cloned().collect(),
            None => train.table.numeric_columns.clone(),
        };
        let mut means = vec![0.0; columns.len()];
        let mut stds = vec![0.0; columns.len()];
        for (idx, column) in columns.iter().enumerate() {
            let values: Vec<f64> = train.table.records.iter().filter_map(|r| r.numeric.get(column)).copied().collect();
            if values.is_empty() {
                stds[idx] = 1.0;
                continue;
            }
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
            means[idx] = mean;
            stds[idx] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Self { columns, means, stds }
    }

    /// `[standardized values..., missing indicators...]`
    pub fn vectorize(&self, record: &TelemetryRecord) -> Vec<f64> {
        let mut out = vec![0.0; self.columns.len() * 2];
        for (idx, column) in self.columns.iter().enumerate() {
            match record.numeric.get(column) {
                Some(&v) => out[idx] = (v - self.means[idx]) / self.stds[idx],
                None => out[self.columns.len() + idx] = 1.0,
            }
        }
        out
    }
}

/// Logistic model over standardized numeric features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub spec: FeatureSpec,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticModel {
    pub fn predict_proba(&self, record: &TelemetryRecord) -> f64 {
        let x = self.spec.vectorize(record);
        let z: f64 = self.bias + self.weights.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>();
        1.0 / (1.0 + (-z).exp())
    }

    pub fn predict(&self, record: &TelemetryRecord) -> bool {
        self.predict_proba(record) >= 0.5
    }
}

/// Train the built-in logistic baseline by full-batch gradient descent.
/// Deterministic given `seed` (which drives the tiny weight initialization).
pub fn train_baseline(
    train: &LabeledDataset,
    epochs: u32,
    learning_rate: f64,
    seed: u64,
) -> Result<LogisticModel, FaultlabError> {
    train_baseline_with(train, None, epochs, learning_rate, seed)
}

/// [`train_baseline`] with an optional feature-column allowlist.
pub fn train_baseline_with(
    train: &LabeledDataset,
    allowlist: Option<&[String]>,
    epochs: u32,
    learning_rate: f64,
    seed: u64,
) -> Result<LogisticModel, FaultlabError> {
    if train.is_empty() {
        return Err(FaultlabError::Empty("training set".into()));
    }
    let positives = train.fault_count();
    if positives == 0 || positives == train.len() {
        return Err(FaultlabError::SingleClassTraining);
    }
    let spec = FeatureSpec::fit(train, allowlist);
    let rows: Vec<Vec<f64>> = train.table.records.iter().map(|r| spec.vectorize(r)).collect();
    let dim = spec.columns.len() * 2;
    let mut stream = rng::derive_rng(seed, "baseline-init");
    let mut weights: Vec<f64> = (0..dim).map(|_| (stream.gen::<f64>() - 0.5) * 0.02).collect();
    let mut bias = 0.0;
    let n = rows.len() as f64;
    for _ in 0..epochs {
        let mut grad_w = vec![0.0; dim];
        let mut grad_b = 0.0;
        for (row, &label) in rows.iter().zip(&train.labels) {
            let z: f64 = bias + weights.iter().zip(row).map(|(w, v)| w * v).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - if label { 1.0 } else { 0.0 };
            for (g, v) in grad_w.iter_mut().zip(row) {
                *g += err * v;
            }
            grad_b += err;
        }
        for (w, g) in weights.iter_mut().zip(&grad_w) {
            *w -= learning_rate * g / n;
        }
        bias -= learning_rate * grad_b / n;
    }
    Ok(LogisticModel { spec, weights, bias })
}

/// Pluggable fault detector.
pub trait Detector {
    fn fit(&mut self, train: &LabeledDataset) -> Result<(), FaultlabError>;
    /// Deterministic given the fitted model.
    fn predict(&self, record: &TelemetryRecord) -> bool;
}

/// The built-in detector: logistic baseline behind the [`Detector`] contract.
pub struct BaselineDetector {
    pub epochs: u32,
    pub learning_rate: f64,
    pub seed: u64,
    pub allowlist: Option<Vec<String>>,
    model: Option<LogisticModel>,
}

impl BaselineDetector {
    pub fn new(epochs: u32, learning_rate: f64, seed: u64) -> Self {
        Self { epochs, learning_rate, seed, allowlist: None, model: None }
    }

    pub fn model(&self) -> Option<&LogisticModel> {
        self.model.as_ref()
    }
}

impl Detector for BaselineDetector {
    fn fit(&mut self, train: &LabeledDataset) -> Result<(), FaultlabError> {
        self.model = Some(train_baseline_with(train, self.allowlist.as_deref(), self.epochs, self.learning_rate, self.seed)?);
        Ok(())
    }

    fn predict(&self, record: &TelemetryRecord) -> bool {
        self.model.as_ref().expect("detector not fitted").predict(record)
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Binary-classification counts and derived scores. Ratios with zero
/// denominators are absent, never zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub true_positives: u64,
    pub true_negatives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

/// Harmonic mean of precision and recall.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    2.0 * precision * recall / (precision + recall)
}

pub fn compute_metrics(predictions: &[bool], truth: &[bool]) -> Result<Metrics, FaultlabError> {
    if predictions.len() != truth.len() {
        return Err(FaultlabError::LengthMismatch { predictions: predictions.len(), truth: truth.len() });
    }
    if predictions.is_empty() {
        return Err(FaultlabError::Empty("metrics input".into()));
    }
    let mut tp = 0u64;
    let mut tn = 0u64;
    let mut fp = 0u64;
    let mut fng = 0u64;
    for (&p, &t) in predictions.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fng += 1,
        }
    }
    let ratio = |num: u64, den: u64| if den == 0 { None } else { Some(num as f64 / den as f64) };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fng);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(f1_score(p, r)),
        _ => None,
    };
    Ok(Metrics {
        true_positives: tp,
        true_negatives: tn,
        false_positives: fp,
        false_negatives: fng,
        accuracy: (tp + tn) as f64 / predictions.len() as f64,
        precision,
        recall,
        f1,
    })
}

// ---------------------------------------------------------------------------
// Protocol-scheduled work assignment
// ---------------------------------------------------------------------------

/// How participation is decided while the harness walks its work queue.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheduling {
    /// Full stochastic protocol (signals, probabilities, Bernoulli draws).
    Protocol,
    /// Every agent and critic active at every step (degenerate reference
    /// mode; bypasses the protocol entirely).
    AllActive,
}

/// One work-assignment event: at `step`, `agent` claimed work item `item`
/// and an optional `critic` re-checked it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub step: u64,
    pub agent: usize,
    pub item: usize,
    pub critic: Option<usize>,
}

/// Walk the protocol until `items` work items have been claimed by active
/// agents (round-robin critics attached), or panic-free stall detection
/// after `max_steps`.
fn schedule_work(
    cfg: &SystemConfig,
    costs: &CostSet,
    scheduling: Scheduling,
    modality: usize,
    items: usize,
    with_critics: bool,
) -> Result<Vec<Assignment>, FaultlabError> {
    let mut assignments = Vec::with_capacity(items);
    if items == 0 {
        return Ok(assignments);
    }
    match scheduling {
        Scheduling::AllActive => {
            let mut critic_cursor = 0usize;
            let critic_count = cfg.modalities[modality].critic_count;
            for item in 0..items {
                let step = (item / cfg.num_agents) as u64 + 1;
                let agent = item % cfg.num_agents;
                let critic = if with_critics && critic_count > 0 {
                    let c = critic_cursor % critic_count;
                    critic_cursor += 1;
                    Some(c)
                } else {
                    None
                };
                assignments.push(Assignment { step, agent, item, critic });
            }
            Ok(assignments)
        }
        Scheduling::Protocol => {
            let m = cfg.modality_count();
            let params = ProtocolParams::from_config(cfg);
            let mut coordinator = Coordinator::new(cfg);
            let mut agents: Vec<AgentRuntime<crate::cost::AgentCostCoeffs>> = costs
                .agents
                .iter()
                .enumerate()
                .map(|(i, &c)| AgentRuntime::new(i, c, m, cfg.master_seed))
                .collect();
            let mut critics: Vec<Vec<CriticRuntime>> = costs
                .critics
                .iter()
                .enumerate()
                .map(|(j, pool)| {
                    pool.iter().enumerate().map(|(v, &c)| CriticRuntime::new(v, j, c, cfg.master_seed)).collect()
                })
                .collect();
            let mut next_item = 0usize;
            let max_steps = 10_000 + 200 * items as u64;
            for k in 0.. {
                if next_item >= items {
                    break;
                }
                if k >= max_steps {
                    return Err(FaultlabError::SchedulingStalled(max_steps));
                }
                let broadcast = coordinator.broadcast();
                let mut critic_counts = vec![0u32; m];
                let mut active_critics: Vec<Vec<usize>> = vec![Vec::new(); m];
                for (j, pool) in critics.iter_mut().enumerate() {
                    for critic in pool.iter_mut() {
                        let (_, active) = critic.draw_activation(&broadcast, &params);
                        if active {
                            critic_counts[j] += 1;
                            active_critics[j].push(critic.id);
                        }
                        critic.commit(active);
                    }
                }
                let mut agent_counts = vec![0u32; m];
                let mut bits = vec![vec![false; m]; cfg.num_agents];
                for j in 0..m {
                    for agent in agents.iter_mut() {
                        let (_, active) = agent.draw_activation(j, &broadcast, &params);
                        bits[agent.id][j] = active;
                        if active {
                            agent_counts[j] += 1;
                        }
                    }
                }
                // Active agents on the work modality claim items in index order.
                let mut critic_cursor = 0usize;
                for agent in 0..cfg.num_agents {
                    if bits[agent][modality] && next_item < items {
                        let critic = if with_critics && !active_critics[modality].is_empty() {
                            let pick = active_critics[modality][critic_cursor % active_critics[modality].len()];
                            critic_cursor += 1;
                            Some(pick)
                        } else {
                            None
                        };
                        assignments.push(Assignment { step: k + 1, agent, item: next_item, critic });
                        next_item += 1;
                    }
                }
                for agent in agents.iter_mut() {
                    let b = bits[agent.id].clone();
                    agent.commit_step(&b);
                }
                coordinator.observe_counts(&agent_counts, &critic_counts);
            }
            Ok(assignments)
        }
    }
}

// ---------------------------------------------------------------------------
// Stage 1: detection
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DetectionOptions {
    pub chunk_size: usize,
    pub scheduling: Scheduling,
    /// Modality whose agents carry the detection task.
    pub modality: usize,
    /// Adopt the critic's prediction when it flags Incorrect.
    pub accept_critic_feedback: bool,
}

impl Default for DetectionOptions {
    fn default() -> Self {
        Self { chunk_size: 16, scheduling: Scheduling::Protocol, modality: 0, accept_critic_feedback: true }
    }
}

/// Outcome of the scheduled detection stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRun {
    /// Final per-record predictions, in dataset order.
    pub predictions: Vec<bool>,
    /// Per-record critic verdict: `Some(true)` = Correct, `Some(false)` =
    /// Incorrect, `None` = no critic checked the record's chunk.
    pub critic_evals: Vec<Option<bool>>,
    pub metrics: Metrics,
    /// Chunk-to-agent/critic assignment log.
    pub assignments: Vec<Assignment>,
    pub flipped: Vec<usize>,
}

/// Chunked, protocol-scheduled fault detection.
///
/// Active agents claim test chunks in order and predict with the shared
/// fitted detector; when a critic detector is supplied and a critic is
/// active, it re-checks each record and flags Correct/Incorrect; flagged
/// predictions flip when feedback is accepted.
pub fn run_detection(
    test: &LabeledDataset,
    detector: &dyn Detector,
    critic_detector: Option<&dyn Detector>,
    cfg: &SystemConfig,
    options: &DetectionOptions,
) -> Result<DetectionRun, FaultlabError> {
    if test.is_empty() {
        return Err(FaultlabError::Empty("test set".into()));
    }
    let costs = CostSet::sample(cfg);
    let chunks = test.len().div_ceil(options.chunk_size);
    let assignments = schedule_work(cfg, &costs, options.scheduling, options.modality, chunks, critic_detector.is_some())?;

    let mut predictions = vec![false; test.len()];
    let mut critic_evals = vec![None; test.len()];
    let mut flipped = Vec::new();
    for assignment in &assignments {
        let start = assignment.item * options.chunk_size;
        let end = (start + options.chunk_size).min(test.len());
        for idx in start..end {
            let record = &test.table.records[idx];
            let mut prediction = detector.predict(record);
            if assignment.critic.is_some() {
                if let Some(critic_model) = critic_detector {
                    let check = critic_model.predict(record);
                    let correct = check == prediction;
                    critic_evals[idx] = Some(correct);
                    if !correct && options.accept_critic_feedback {
                        prediction = check;
                        flipped.push(idx);
                    }
                }
            }
            predictions[idx] = prediction;
        }
    }
    let metrics = compute_metrics(&predictions, &test.labels)?;
    Ok(DetectionRun { predictions, critic_evals, metrics, assignments, flipped })
}

// ---------------------------------------------------------------------------
// Stage 2: severity and cause
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Severity {
    Critical,
    NonCritical,
}

impl std::fmt::Display for Severity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Critical => write!(f, "Critical"),
            Self::NonCritical => write!(f, "Non-critical"),
        }
    }
}

impl std::str::FromStr for Severity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Critical" => Ok(Self::Critical),
            "Non-critical" => Ok(Self::NonCritical),
            other => Err(format!("unknown severity `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityVerdict {
    pub severity: Severity,
    pub cause_summary: String,
    pub feedback_rounds: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    Greater,
    GreaterEq,
    Less,
    LessEq,
    Equal,
}

impl Comparison {
    fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Self::Greater => value > threshold,
            Self::GreaterEq => value >= threshold,
            Self::Less => value < threshold,
            Self::LessEq => value <= threshold,
            Self::Equal => value == threshold,
        }
    }

    fn token(self) -> &'static str {
        match self {
            Self::Greater => ">",
            Self::GreaterEq => ">=",
            Self::Less => "<",
            Self::LessEq => "<=",
            Self::Equal => "=",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub column: String,
    pub op: Comparison,
    pub threshold: f64,
}

/// A named conjunction of clauses; any fully-satisfied rule makes the fault
/// Critical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub name: String,
    pub clauses: Vec<Clause>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    pub rules: Vec<Rule>,
}

impl Default for RuleSet {
    fn default() -> Self {
        let clause = |column: &str, op: Comparison, threshold: f64| Clause { column: column.into(), op, threshold };
        Self {
            rules: vec![
                Rule { name: "output-drops-exceeded".into(), clauses: vec![clause("output-drops", Comparison::Greater, 1e6)] },
                Rule {
                    name: "crc-with-input-errors".into(),
                    clauses: vec![
                        clause("crc-errors", Comparison::Greater, 0.0),
                        clause("input-errors", Comparison::Greater, 0.0),
                    ],
                },
                Rule { name: "carrier-transitions".into(), clauses: vec![clause("carrier-transitions", Comparison::Greater, 0.0)] },
            ],
        }
    }
}

impl RuleSet {
    /// Parse the rule file format: one rule per line,
    /// `name: column > value & column >= value`, `#` comments.
    pub fn parse(text: &str) -> Result<Self, FaultlabError> {
        let mut rules = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fail = |message: String| FaultlabError::RuleParse { line: idx + 1, message };
            let (name, body) = line.split_once(':').ok_or_else(|| fail("expected `name: clauses`".into()))?;
            let mut clauses = Vec::new();
            for chunk in body.split('&') {
                let tokens: Vec<&str> = chunk.split_whitespace().collect();
                if tokens.len() != 3 {
                    return Err(fail(format!("expected `column op value`, got `{}`", chunk.trim())));
                }
                let op = match tokens[1] {
                    ">" => Comparison::Greater,
                    ">=" => Comparison::GreaterEq,
                    "<" => Comparison::Less,
                    "<=" => Comparison::LessEq,
                    "=" => Comparison::Equal,
                    other => return Err(fail(format!("unknown operator `{other}`"))),
                };
                let threshold: f64 = tokens[2].parse().map_err(|_| fail(format!("bad threshold `{}`", tokens[2])))?;
                clauses.push(Clause { column: tokens[0].to_string(), op, threshold });
            }
            if clauses.is_empty() {
                return Err(fail("rule has no clauses".into()));
            }
            rules.push(Rule { name: name.trim().to_string(), clauses });
        }
        if rules.is_empty() {
            return Err(FaultlabError::Empty("rule set".into()));
        }
        Ok(Self { rules })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for rule in &self.rules {
            let body: Vec<String> =
                rule.clauses.iter().map(|c| format!("{} {} {}", c.column, c.op.token(), c.threshold)).collect();
            out.push_str(&format!("{}: {}\n", rule.name, body.join(" & ")));
        }
        out
    }
}

/// Fields extracted from a rendered query: the inverse of the query
/// renderer's `'key': 'value'` clause list.
pub fn parse_query_fields(query: &str) -> BTreeMap<String, String> {
    let mut fields = BTreeMap::new();
    let mut rest = query;
    while let Some(start) = rest.find('\'') {
        let after_key = &rest[start + 1..];
        let Some(key_end) = after_key.find("': '") else { break };
        let key = &after_key[..key_end];
        let after_value = &after_key[key_end + 4..];
        let Some(value_end) = after_value.find('\'') else { break };
        fields.insert(key.to_string(), after_value[..value_end].to_string());
        rest = &after_value[value_end + 1..];
    }
    fields
}

/// Deterministic severity classification over named query fields. Rules are
/// OR-ed; a rule fires when every clause column is present, parseable, and
/// satisfied. Missing evidence never makes a fault Critical.
pub fn classify_severity(fields: &BTreeMap<String, String>, rules: &RuleSet) -> SeverityVerdict {
    let mut missing: BTreeSet<String> = BTreeSet::new();
    for rule in &rules.rules {
        let mut satisfied = true;
        let mut values = Vec::new();
        for clause in &rule.clauses {
            match fields.get(&clause.column).and_then(|v| v.parse::<f64>().ok()) {
                Some(value) if clause.op.holds(value, clause.threshold) => values.push((clause, value)),
                Some(_) => {
                    satisfied = false;
                    break;
                }
                None => {
                    missing.insert(clause.column.clone());
                    satisfied = false;
                    break;
                }
            }
        }
        if satisfied {
            let detail: Vec<String> = values
                .iter()
                .map(|(c, v)| format!("{} = {v} ({} {})", c.column, c.op.token(), c.threshold))
                .collect();
            return SeverityVerdict {
                severity: Severity::Critical,
                cause_summary: format!("Rule {} triggered: {}.", rule.name, detail.join(", ")),
                feedback_rounds: 0,
            };
        }
    }
    let summary = if missing.is_empty() {
        "No severity rule triggered; counters within configured limits.".to_string()
    } else {
        format!(
            "No severity rule triggered; missing evidence for column(s) {}.",
            missing.into_iter().collect::<Vec<_>>().join(", ")
        )
    };
    SeverityVerdict { severity: Severity::NonCritical, cause_summary: summary, feedback_rounds: 0 }
}

/// Pluggable severity reasoner; the built-in applies a [`RuleSet`].
pub trait SeverityReasoner {
    fn assess(&self, fields: &BTreeMap<String, String>) -> SeverityVerdict;
}

pub struct RuleReasoner {
    pub rules: RuleSet,
}

impl SeverityReasoner for RuleReasoner {
    fn assess(&self, fields: &BTreeMap<String, String>) -> SeverityVerdict {
        classify_severity(fields, &self.rules)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityOutcome {
    pub id: String,
    pub query: String,
    pub verdict: SeverityVerdict,
}

/// Feedback log entry for the severity stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityFeedback {
    pub step: u64,
    pub agent: usize,
    pub critic: Option<usize>,
    pub id: String,
    pub revised: bool,
}

/// Protocol-scheduled severity analysis of stage-1 fault queries.
///
/// Active agents claim queries in order and assess them; an active critic
/// re-assesses, and on disagreement the agent adopts the critic's verdict
/// (one revision). `feedback_rounds` is 1 exactly when a critic evaluated.
pub fn run_severity(
    fault_queries: &[(String, String)],
    reasoner: &dyn SeverityReasoner,
    critic_reasoner: &dyn SeverityReasoner,
    cfg: &SystemConfig,
    scheduling: Scheduling,
    modality: usize,
) -> Result<(Vec<SeverityOutcome>, Vec<SeverityFeedback>), FaultlabError> {
    let costs = CostSet::sample(cfg);
    let assignments = schedule_work(cfg, &costs, scheduling, modality, fault_queries.len(), true)?;
    let mut outcomes = Vec::with_capacity(fault_queries.len());
    let mut feedback_log = Vec::new();
    for assignment in &assignments {
        let (id, query) = &fault_queries[assignment.item];
        let fields = parse_query_fields(query);
        let mut verdict = reasoner.assess(&fields);
        match assignment.critic {
            Some(critic) => {
                let check = critic_reasoner.assess(&fields);
                let revised = check.severity != verdict.severity;
                if revised {
                    verdict = check;
                }
                verdict.feedback_rounds = 1;
                feedback_log.push(SeverityFeedback {
                    step: assignment.step,
                    agent: assignment.agent,
                    critic: Some(critic),
                    id: id.clone(),
                    revised,
                });
            }
            None => {
                verdict.feedback_rounds = 0;
                feedback_log.push(SeverityFeedback {
                    step: assignment.step,
                    agent: assignment.agent,
                    critic: None,
                    id: id.clone(),
                    revised: false,
                });
            }
        }
        outcomes.push(SeverityOutcome { id: id.clone(), query: query.clone(), verdict });
    }
    // Items are claimed in input order, so outcomes already line up with
    // `fault_queries`.
    Ok((outcomes, feedback_log))
}

// ---------------------------------------------------------------------------
// Intersection report
// ---------------------------------------------------------------------------

/// Exact set algebra over named Critical-id sets: per-set sizes plus every
/// pairwise and higher-order intersection count, ordered by subset size.
pub fn intersection_report(sets: &[(String, BTreeSet<String>)]) -> Result<Vec<(String, usize)>, FaultlabError> {
    if sets.is_empty() {
        return Err(FaultlabError::Empty("verdict sets".into()));
    }
    if sets.len() > 16 {
        return Err(FaultlabError::TooManySets(sets.len()));
    }
    let n = sets.len();
    let mut rows: Vec<(usize, String, usize)> = Vec::new();
    for mask in 1u32..(1 << n) {
        let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let mut intersection: Option<BTreeSet<String>> = None;
        for &i in &members {
            intersection = Some(match intersection {
                None => sets[i].1.clone(),
                Some(acc) => acc.intersection(&sets[i].1).cloned().collect(),
            });
        }
        let label: Vec<&str> = members.iter().map(|&i| sets[i].0.as_str()).collect();
        rows.push((members.len(), label.join("&"), intersection.unwrap().len()));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(rows.into_iter().map(|(_, label, count)| (label, count)).collect())
}

// ---------------------------------------------------------------------------
// Stage output files
// ---------------------------------------------------------------------------

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, FaultlabError> {
    csv::Writer::from_path(path)
        .map_err(|e| FaultlabError::Io { path: path.display().to_string(), source: std::io::Error::other(e) })
}

/// Stage-1 output: `id,query,prediction,critic_eval` with `Fault`/`No Fault`
/// predictions and `Correct`/`Incorrect` critic verdicts. With `faults_only`
/// set, only predicted-fault rows are written (the stage-2 input file).
pub fn write_detection_csv(
    queries: &[(usize, String, bool)],
    run: &DetectionRun,
    path: &Path,
    faults_only: bool,
) -> Result<(), FaultlabError> {
    let mut writer = csv_writer(path)?;
    writer.write_record(["id", "query", "prediction", "critic_eval"])?;
    for (idx, (id, query, _)) in queries.iter().enumerate() {
        if faults_only && !run.predictions[idx] {
            continue;
        }
        let prediction = if run.predictions[idx] { "Fault" } else { "No Fault" };
        let critic = match run.critic_evals[idx] {
            Some(true) => "Correct",
            Some(false) => "Incorrect",
            None => "",
        };
        writer.write_record([id.to_string().as_str(), query, prediction, critic])?;
    }
    writer.flush().map_err(|source| FaultlabError::Io { path: path.display().to_string(), source })?;
    Ok(())
}

/// Read predicted-fault rows (`prediction == "Fault"`) back from a stage-1
/// CSV; returns `(id, query)` pairs.
pub fn read_fault_queries(path: &Path) -> Result<Vec<(String, String)>, FaultlabError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| FaultlabError::Io { path: path.display().to_string(), source: std::io::Error::other(e) })?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        if row.len() < 3 {
            continue;
        }
        if &row[2] == "Fault" {
            out.push((row[0].to_string(), row[1].to_string()));
        }
    }
    Ok(out)
}

/// Stage-2 output: `id,query,severity,cause_summary,feedback_rounds`.
pub fn write_severity_csv(outcomes: &[SeverityOutcome], path: &Path) -> Result<(), FaultlabError> {
    let mut writer = csv_writer(path)?;
    writer.write_record(["id", "query", "severity", "cause_summary", "feedback_rounds"])?;
    for outcome in outcomes {
        writer.write_record([
            outcome.id.as_str(),
            outcome.query.as_str(),
            &outcome.verdict.severity.to_string(),
            &outcome.verdict.cause_summary,
            &outcome.verdict.feedback_rounds.to_string(),
        ])?;
    }
    writer.flush().map_err(|source| FaultlabError::Io { path: path.display().to_string(), source })?;
    Ok(())
}

/// Read the Critical query ids from a stage-2 CSV.
pub fn read_critical_ids(path: &Path) -> Result<BTreeSet<String>, FaultlabError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| FaultlabError::Io { path: path.display().to_string(), source: std::io::Error::other(e) })?;
    let mut out = BTreeSet::new();
    for row in reader.records() {
        let row = row?;
        if row.len() >= 3 && &row[2] == "Critical" {
            out.insert(row[0].to_string());
        }
    }
    Ok(out)
}

/// Intersection report CSV: `combination,count`.
pub fn write_intersection_csv(rows: &[(String, usize)], path: &Path) -> Result<(), FaultlabError> {
    let mut writer = csv_writer(path)?;
    writer.write_record(["combination", "count"])?;
    for (combination, count) in rows {
        writer.write_record([combination.as_str(), &count.to_string()])?;
    }
    writer.flush().map_err(|source| FaultlabError::Io { path: path.display().to_string(), source })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::{parse_telemetry_csv_str, LabeledDataset};

    /// Linearly separable synthetic set over two features.
    fn separable_dataset(n_per_class: usize, flip: bool) -> LabeledDataset {
        let mut lines = vec!["time,Producer,f1,f2".to_string()];
        for i in 0..n_per_class {
            let offset = i as f64 * 0.01;
            lines.push(format!("{},leaf1,{},{}", i + 1, 2.0 + offset, 2.5 + offset));
            lines.push(format!("{},leaf1,{},{}", i + 1000, -2.0 - offset, -2.5 - offset));
        }
        let table = parse_telemetry_csv_str(&lines.join("\n")).unwrap();
        let labels = (0..2 * n_per_class).map(|i| (i % 2 == 0) ^ flip).collect();
        LabeledDataset { table, labels }
    }

    #[test]
    fn baseline_separates_synthetic_data() {
        let train = separable_dataset(50, false);
        let model = train_baseline(&train, 500, 0.5, 1).unwrap();
        let predictions: Vec<bool> = train.table.records.iter().map(|r| model.predict(r)).collect();
        let metrics = compute_metrics(&predictions, &train.labels).unwrap();
        assert!(metrics.accuracy >= 0.99, "training accuracy {}", metrics.accuracy);
    }

    #[test]
    fn flipped_labels_flip_predictions() {
        let train = separable_dataset(50, false);
        let flipped = separable_dataset(50, true);
        let model = train_baseline(&train, 500, 0.5, 1).unwrap();
        let anti = train_baseline(&flipped, 500, 0.5, 1).unwrap();
        for record in &train.table.records {
            assert_eq!(model.predict(record), !anti.predict(record));
        }
    }

    #[test]
    fn training_is_deterministic_and_rejects_single_class() {
        let train = separable_dataset(20, false);
        let a = train_baseline(&train, 100, 0.5, 7).unwrap();
        let b = train_baseline(&train, 100, 0.5, 7).unwrap();
        assert_eq!(a, b);
        let c = train_baseline(&train, 100, 0.5, 8).unwrap();
        assert_ne!(a.weights, c.weights);

        let mut single = separable_dataset(5, false);
        single.labels.iter_mut().for_each(|l| *l = true);
        assert!(matches!(train_baseline(&single, 10, 0.5, 1), Err(FaultlabError::SingleClassTraining)));
    }

    #[test]
    fn metrics_trivial_cases() {
        let m = compute_metrics(&[true, false, true], &[true, false, true]).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f1, Some(1.0));

        let all_pos = compute_metrics(&[true; 10], &[true, false, true, false, true, false, true, false, true, false]).unwrap();
        assert_eq!(all_pos.recall, Some(1.0));
        assert_eq!(all_pos.precision, Some(0.5));

        assert!(compute_metrics(&[true], &[true, false]).is_err());
        assert!(compute_metrics(&[], &[]).is_err());
    }

    #[test]
    fn f1_matches_published_reference_row() {
        // Precision/recall from the reference table row; harmonic mean to
        // 40-digit arithmetic is 0.9655677636344820.
        let f1 = f1_score(0.9397, 0.9929);
        assert!((f1 - 0.9656).abs() < 5e-5);
        assert!((f1 - 0.9655677636344820).abs() < 1e-12);
    }

    #[test]
    fn undefined_ratios_are_absent_not_zero() {
        // No positive predictions: precision undefined; no positive truth:
        // recall undefined.
        let m = compute_metrics(&[false, false], &[true, false]).unwrap();
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, Some(0.0));
        let m2 = compute_metrics(&[false, true], &[false, false]).unwrap();
        assert_eq!(m2.recall, None);
        assert_eq!(m2.precision, Some(0.0));
        assert_eq!(m2.f1, None);
    }

    fn detection_cfg() -> SystemConfig {
        let mut cfg = SystemConfig::paper_preset(11, 1000);
        cfg.master_seed = 11;
        cfg
    }

    #[test]
    fn degenerate_scheduling_equals_bare_detector() {
        let train = separable_dataset(30, false);
        let test = separable_dataset(40, false);
        let mut detector = BaselineDetector::new(300, 0.5, 2);
        detector.fit(&train).unwrap();

        let mut cfg = detection_cfg();
        cfg.num_agents = 1;
        let options = DetectionOptions { scheduling: Scheduling::AllActive, chunk_size: 7, ..Default::default() };
        let run = run_detection(&test, &detector, None, &cfg, &options).unwrap();
        let bare: Vec<bool> = test.table.records.iter().map(|r| detector.predict(r)).collect();
        assert_eq!(run.predictions, bare);
        assert!(run.critic_evals.iter().all(|e| e.is_none()));
        assert!(run.flipped.is_empty());
    }

    #[test]
    fn identical_critic_detector_never_flips() {
        let train = separable_dataset(30, false);
        let test = separable_dataset(25, false);
        let mut detector = BaselineDetector::new(300, 0.5, 2);
        detector.fit(&train).unwrap();
        let mut critic = BaselineDetector::new(300, 0.5, 2);
        critic.fit(&train).unwrap();

        let cfg = detection_cfg();
        let options = DetectionOptions { chunk_size: 5, ..Default::default() };
        let run = run_detection(&test, &detector, Some(&critic), &cfg, &options).unwrap();
        assert!(run.flipped.is_empty());
        assert!(run.critic_evals.iter().flatten().all(|&correct| correct));
        // Protocol scheduling is deterministic under a fixed master seed.
        let again = run_detection(&test, &detector, Some(&critic), &cfg, &options).unwrap();
        assert_eq!(run, again);
    }

    #[test]
    fn protocol_scheduling_covers_every_chunk_once() {
        let test = separable_dataset(64, false);
        let train = separable_dataset(30, false);
        let mut detector = BaselineDetector::new(100, 0.5, 2);
        detector.fit(&train).unwrap();
        let cfg = detection_cfg();
        let options = DetectionOptions { chunk_size: 4, ..Default::default() };
        let run = run_detection(&test, &detector, None, &cfg, &options).unwrap();
        let chunks = test.len().div_ceil(4);
        let mut seen: Vec<usize> = run.assignments.iter().map(|a| a.item).collect();
        seen.sort();
        assert_eq!(seen, (0..chunks).collect::<Vec<_>>());
        let mut steps: Vec<u64> = run.assignments.iter().map(|a| a.step).collect();
        steps.dedup();
        assert!(steps.windows(2).all(|w| w[0] <= w[1]), "assignments ordered by step");
    }

    fn fields(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn severity_reference_classifications() {
        let rules = RuleSet::default();
        // Huge output-drops value quoted in the reference tables.
        let v = classify_severity(&fields(&[("output-drops", "19401038.0")]), &rules);
        assert_eq!(v.severity, Severity::Critical);
        assert!(v.cause_summary.contains("output-drops"));

        let v = classify_severity(
            &fields(&[("output-drops", "0.0"), ("crc-errors", "0.0"), ("input-errors", "0.0"), ("carrier-transitions", "0.0")]),
            &rules,
        );
        assert_eq!(v.severity, Severity::NonCritical);

        let v = classify_severity(&fields(&[("crc-errors", "390.0"), ("input-errors", "390.0")]), &rules);
        assert_eq!(v.severity, Severity::Critical);
        assert!(v.cause_summary.contains("crc"));
    }

    #[test]
    fn missing_columns_mean_non_critical_with_note() {
        let rules = RuleSet::default();
        let v = classify_severity(&fields(&[("bandwidth", "100.0")]), &rules);
        assert_eq!(v.severity, Severity::NonCritical);
        assert!(v.cause_summary.contains("missing evidence"));
    }

    #[test]
    fn severity_is_monotone_in_output_drops() {
        let rules = RuleSet::default();
        let mut previous_critical = false;
        for drops in [0.0, 1e3, 1e6, 1e6 + 1.0, 1e7, 1e9] {
            let v = classify_severity(&fields(&[("output-drops", &drops.to_string())]), &rules);
            let critical = v.severity == Severity::Critical;
            assert!(critical || !previous_critical, "Critical flipped back off at {drops}");
            previous_critical = critical;
        }
    }

    #[test]
    fn query_fields_round_trip_from_rendered_query() {
        let query = "Predict whether Device with 'name': 'dev', 'Producer': 'leaf5', 'output-drops': '19401038.0', 'interface-name': 'HundredGigE0/0/0/5' has fault or not.";
        let fields = parse_query_fields(query);
        assert_eq!(fields["name"], "dev");
        assert_eq!(fields["output-drops"], "19401038.0");
        assert_eq!(fields["interface-name"], "HundredGigE0/0/0/5");
        assert_eq!(fields.len(), 4);
    }

    #[test]
    fn rule_set_parses_and_round_trips() {
        let text = "# severity rules\nbig-drops: output-drops > 1000000\npaired: crc-errors > 0 & input-errors > 0\n";
        let rules = RuleSet::parse(text).unwrap();
        assert_eq!(rules.rules.len(), 2);
        assert_eq!(rules.rules[1].clauses.len(), 2);
        let reparsed = RuleSet::parse(&rules.to_text()).unwrap();
        assert_eq!(reparsed, rules);
        assert!(RuleSet::parse("bogus line without colon\n").is_err());
        assert!(RuleSet::parse("name: col >> 3\n").is_err());
    }

    fn queries_with_drops(drops: &[f64]) -> Vec<(String, String)> {
        drops
            .iter()
            .enumerate()
            .map(|(i, d)| {
                (i.to_string(), format!("Predict whether Device with 'Producer': 'leaf1', 'output-drops': '{d}' has a Critical fault or Non-critical fault."))
            })
            .collect()
    }

    #[test]
    fn identical_rule_sets_never_revise() {
        let queries = queries_with_drops(&[0.0, 2e6, 5.0, 3e6]);
        let agent = RuleReasoner { rules: RuleSet::default() };
        let critic = RuleReasoner { rules: RuleSet::default() };
        let cfg = detection_cfg();
        let (outcomes, log) = run_severity(&queries, &agent, &critic, &cfg, Scheduling::AllActive, 0).unwrap();
        assert_eq!(outcomes.len(), 4);
        assert!(log.iter().all(|f| !f.revised));
        assert!(outcomes.iter().all(|o| o.verdict.feedback_rounds == 1));
        assert_eq!(outcomes[1].verdict.severity, Severity::Critical);
        assert_eq!(outcomes[0].verdict.severity, Severity::NonCritical);
    }

    #[test]
    fn stricter_critic_revises_exactly_the_disagreement_set() {
        let drops = [0.0, 2e5, 2e6, 7e5, 9e6];
        let queries = queries_with_drops(&drops);
        let agent = RuleReasoner { rules: RuleSet::default() }; // threshold 1e6
        let critic_rules = RuleSet::parse("drops: output-drops > 100000\n").unwrap(); // stricter
        let critic = RuleReasoner { rules: critic_rules.clone() };
        let cfg = detection_cfg();
        let (outcomes, log) = run_severity(&queries, &agent, &critic, &cfg, Scheduling::AllActive, 0).unwrap();

        // Disagreements enumerated directly by applying both rule sets.
        for (idx, &d) in drops.iter().enumerate() {
            let f = fields(&[("output-drops", &d.to_string())]);
            let expect_disagree =
                classify_severity(&f, &RuleSet::default()).severity != classify_severity(&f, &critic_rules).severity;
            let entry = log.iter().find(|e| e.id == idx.to_string()).unwrap();
            assert_eq!(entry.revised, expect_disagree, "id {idx}");
            // Default accept policy adopts the critic verdict.
            assert_eq!(outcomes[idx].verdict.severity, classify_severity(&f, &critic_rules).severity);
        }
    }

    #[test]
    fn no_active_critic_finalizes_without_feedback() {
        let queries = queries_with_drops(&[2e6, 0.0, 5e6]);
        let agent = RuleReasoner { rules: RuleSet::default() };
        let critic = RuleReasoner { rules: RuleSet::parse("everything: output-drops >= 0\n").unwrap() };
        // Zero critic signal pins the critic probability at the clamp floor,
        // so no critic ever activates under protocol scheduling.
        let mut cfg = detection_cfg();
        for m in &mut cfg.modalities {
            m.critic_signal_init = 0.0;
        }
        let (outcomes, log) = run_severity(&queries, &agent, &critic, &cfg, Scheduling::Protocol, 0).unwrap();
        assert_eq!(outcomes.len(), 3);
        assert!(outcomes.iter().all(|o| o.verdict.feedback_rounds == 0));
        assert!(log.iter().all(|f| f.critic.is_none() && !f.revised));
        // Agent verdicts stand (the stricter critic never got to evaluate).
        assert_eq!(outcomes[0].verdict.severity, Severity::Critical);
        assert_eq!(outcomes[1].verdict.severity, Severity::NonCritical);
    }

    #[test]
    fn intersection_counts_are_exact() {
        let set = |ids: Vec<u32>| ids.into_iter().map(|i| i.to_string()).collect::<BTreeSet<String>>();
        let disjoint = vec![
            ("a".to_string(), set((0..3).collect())),
            ("b".to_string(), set((10..14).collect())),
        ];
        let rows = intersection_report(&disjoint).unwrap();
        assert_eq!(rows, vec![
            ("a".to_string(), 3),
            ("b".to_string(), 4),
            ("a&b".to_string(), 0),
        ]);

        let same = vec![
            ("x".to_string(), set((0..5).collect())),
            ("y".to_string(), set((0..5).collect())),
        ];
        let rows = intersection_report(&same).unwrap();
        assert_eq!(rows[2], ("x&y".to_string(), 5));
    }

    #[test]
    fn intersection_reproduces_reference_set_structure() {
        // Set sizes mirroring the published UpSet figure: |A| = 4524,
        // |A&B| = 402, |A&C| = 154, |A&B&C| = 16.
        let a: BTreeSet<String> = (0..4524).map(|i| i.to_string()).collect();
        let b: BTreeSet<String> = (0..402).map(|i| i.to_string()).chain((10_000..10_600).map(|i| i.to_string())).collect();
        let c: BTreeSet<String> = (0..16)
            .chain(402..540)
            .map(|i| i.to_string())
            .chain((20_000..20_010).map(|i| i.to_string()))
            .collect();
        let rows = intersection_report(&[("A".into(), a), ("B".into(), b), ("C".into(), c)]).unwrap();
        let get = |label: &str| rows.iter().find(|(l, _)| l == label).unwrap().1;
        assert_eq!(get("A"), 4524);
        assert_eq!(get("A&B"), 402);
        assert_eq!(get("A&C"), 154);
        assert_eq!(get("A&B&C"), 16);
    }

    #[test]
    fn stage_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let queries = vec![
            (0usize, "Predict whether Device with 'Producer': 'leaf1', 'output-drops': '2000000.0' has fault or not.".to_string(), true),
            (1usize, "Predict whether Device with 'Producer': 'leaf2', 'output-drops': '0.0' has fault or not.".to_string(), false),
        ];
        let run = DetectionRun {
            predictions: vec![true, false],
            critic_evals: vec![Some(true), None],
            metrics: compute_metrics(&[true, false], &[true, false]).unwrap(),
            assignments: vec![],
            flipped: vec![],
        };
        let detection_path = dir.path().join("predictions.csv");
        write_detection_csv(&queries, &run, &detection_path, false).unwrap();
        let faults = read_fault_queries(&detection_path).unwrap();
        assert_eq!(faults.len(), 1);
        assert_eq!(faults[0].0, "0");

        let agent = RuleReasoner { rules: RuleSet::default() };
        let cfg = detection_cfg();
        let (outcomes, _) = run_severity(&faults, &agent, &agent, &cfg, Scheduling::AllActive, 0).unwrap();
        let severity_path = dir.path().join("verdicts.csv");
        write_severity_csv(&outcomes, &severity_path).unwrap();
        let criticals = read_critical_ids(&severity_path).unwrap();
        assert_eq!(criticals.len(), 1);
        assert!(criticals.contains("0"));

        let report = intersection_report(&[("run1".into(), criticals.clone()), ("run2".into(), criticals)]).unwrap();
        let report_path = dir.path().join("intersections.csv");
        write_intersection_csv(&report, &report_path).unwrap();
        let text = std::fs::read_to_string(&report_path).unwrap();
        assert!(text.contains("run1&run2,1"));
    }
}
