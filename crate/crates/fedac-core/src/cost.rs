//! Agent and critic cost functions, their derivatives, and seeded coefficient
//! sampling.
//!
//! The built-in instance is the two-modality polynomial family from the
//! experiment setup; the [`CostModel`] trait keeps the rest of the crate
//! generic in the number of modalities and the cost shape.

use crate::model::SystemConfig;
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("coordinate {value} outside [0, 1] at position {index}")]
    OutOfDomain { index: usize, value: f64 },
    #[error("modality index {index} out of range (< {count})")]
    BadModality { index: usize, count: usize },
}

/// Strictly convex, componentwise-increasing cost over `[0,1]^m`.
///
/// Implementations are total polynomials; domain checking lives in the
/// `*_eval`/`*_partial` entry points.
pub trait CostModel {
    /// Number of modalities the cost couples.
    fn arity(&self) -> usize;
    fn evaluate(&self, x: &[f64]) -> f64;
    /// Partial derivative along `modality` (0-based).
    fn partial(&self, modality: usize, x: &[f64]) -> f64;
}

/// One-dimensional critic-style cost with an explicit derivative.
pub trait ScalarCost {
    fn evaluate(&self, y: f64) -> f64;
    fn derivative(&self, y: f64) -> f64;
}

/// Per-agent coefficients of
/// `f(x1, x2) = a/2 x1^2 + 3c/4 x1^4 + b/2 x2^2 + d/2 x2^4`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentCostCoeffs {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl CostModel for AgentCostCoeffs {
    fn arity(&self) -> usize {
        2
    }

    fn evaluate(&self, x: &[f64]) -> f64 {
        let (x1, x2) = (x[0], x[1]);
        0.5 * self.a * x1 * x1 + 0.75 * self.c * x1.powi(4) + 0.5 * self.b * x2 * x2 + 0.5 * self.d * x2.powi(4)
    }

    fn partial(&self, modality: usize, x: &[f64]) -> f64 {
        match modality {
            0 => self.a * x[0] + 3.0 * self.c * x[0].powi(3),
            1 => self.b * x[1] + 2.0 * self.d * x[1].powi(3),
            _ => panic!("agent cost has two modalities, got index {modality}"),
        }
    }
}

/// Shape of a critic's cost in its activation average `y`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CriticCostForm {
    /// `g(y) = p y^2 + q y^4`
    QuadQuartic,
    /// `g(y) = p/2 y^2 + q/2 y^4`
    QuadQuarticHalf,
}

impl std::fmt::Display for CriticCostForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::QuadQuartic => write!(f, "quad_quartic"),
            Self::QuadQuarticHalf => write!(f, "quad_quartic_half"),
        }
    }
}

impl std::str::FromStr for CriticCostForm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "quad_quartic" => Ok(Self::QuadQuartic),
            "quad_quartic_half" => Ok(Self::QuadQuarticHalf),
            other => Err(format!("unknown critic cost form `{other}`")),
        }
    }
}

/// Per-critic coefficients; the `form` tag selects the polynomial shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticCostCoeffs {
    pub p: f64,
    pub q: f64,
    pub form: CriticCostForm,
}

impl ScalarCost for CriticCostCoeffs {
    fn evaluate(&self, y: f64) -> f64 {
        let (y2, y4) = (y * y, y.powi(4));
        match self.form {
            CriticCostForm::QuadQuartic => self.p * y2 + self.q * y4,
            CriticCostForm::QuadQuarticHalf => 0.5 * self.p * y2 + 0.5 * self.q * y4,
        }
    }

    fn derivative(&self, y: f64) -> f64 {
        let y3 = y * y * y;
        match self.form {
            CriticCostForm::QuadQuartic => 2.0 * self.p * y + 4.0 * self.q * y3,
            CriticCostForm::QuadQuarticHalf => self.p * y + 2.0 * self.q * y3,
        }
    }
}

/// Pure quadratic `f(x) = 1/2 sum_j w_j x_j^2`; test instance for any arity.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticCost {
    pub weights: Vec<f64>,
}

impl CostModel for QuadraticCost {
    fn arity(&self) -> usize {
        self.weights.len()
    }

    fn evaluate(&self, x: &[f64]) -> f64 {
        0.5 * self.weights.iter().zip(x).map(|(w, v)| w * v * v).sum::<f64>()
    }

    fn partial(&self, modality: usize, x: &[f64]) -> f64 {
        self.weights[modality] * x[modality]
    }
}

fn check_domain(x: &[f64]) -> Result<(), CostError> {
    for (index, &value) in x.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(CostError::OutOfDomain { index, value });
        }
    }
    Ok(())
}

/// Evaluate an agent cost at `x` in `[0,1]^2`.
pub fn agent_cost_eval(coeffs: &AgentCostCoeffs, x: &[f64; 2]) -> Result<f64, CostError> {
    check_domain(x)?;
    Ok(coeffs.evaluate(x))
}

/// Partial derivative of an agent cost along `modality` (0-based).
pub fn agent_cost_partial(coeffs: &AgentCostCoeffs, modality: usize, x: &[f64; 2]) -> Result<f64, CostError> {
    if modality >= 2 {
        return Err(CostError::BadModality { index: modality, count: 2 });
    }
    check_domain(x)?;
    Ok(coeffs.partial(modality, x))
}

/// Evaluate a critic cost at `y` in `[0,1]`.
pub fn critic_cost_eval(coeffs: &CriticCostCoeffs, y: f64) -> Result<f64, CostError> {
    check_domain(&[y])?;
    Ok(coeffs.evaluate(y))
}

/// Derivative of a critic cost at `y` in `[0,1]`.
pub fn critic_cost_deriv(coeffs: &CriticCostCoeffs, y: f64) -> Result<f64, CostError> {
    check_domain(&[y])?;
    Ok(coeffs.derivative(y))
}

/// Sampling ranges for agent coefficients; each coefficient is uniform on
/// `(0, max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentCoeffRanges {
    pub a_max: f64,
    pub b_max: f64,
    pub c_max: f64,
    pub d_max: f64,
}

impl Default for AgentCoeffRanges {
    fn default() -> Self {
        Self { a_max: 20.0, b_max: 15.0, c_max: 20.0, d_max: 30.0 }
    }
}

/// Sampling ranges for critic coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticCoeffRanges {
    pub p_max: f64,
    pub q_max: f64,
}

impl Default for CriticCoeffRanges {
    fn default() -> Self {
        Self { p_max: 10.0, q_max: 6.0 }
    }
}

/// Uniform draw on the open interval `(0, max)`; zero draws are rejected so
/// sampled coefficients are strictly positive.
fn uniform_open(rng: &mut impl Rng, max: f64) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u != 0.0 {
            return u * max;
        }
    }
}

/// Draw one agent's coefficients in the fixed order a, b, c, d.
pub fn sample_agent_coeffs(rng: &mut impl Rng, ranges: &AgentCoeffRanges) -> AgentCostCoeffs {
    AgentCostCoeffs {
        a: uniform_open(rng, ranges.a_max),
        b: uniform_open(rng, ranges.b_max),
        c: uniform_open(rng, ranges.c_max),
        d: uniform_open(rng, ranges.d_max),
    }
}

/// Draw one critic's coefficients in the fixed order p, q.
pub fn sample_critic_coeffs(rng: &mut impl Rng, ranges: &CriticCoeffRanges, form: CriticCostForm) -> CriticCostCoeffs {
    CriticCostCoeffs { p: uniform_open(rng, ranges.p_max), q: uniform_open(rng, ranges.q_max), form }
}

/// The full coefficient draw for one experiment: agents in index order, then
/// critics modality by modality in index order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSet {
    pub agents: Vec<AgentCostCoeffs>,
    /// `critics[j]` holds modality j's critics.
    pub critics: Vec<Vec<CriticCostCoeffs>>,
}

impl CostSet {
    /// Sample every coefficient from the config's dedicated substream.
    pub fn sample(cfg: &SystemConfig) -> Self {
        let mut stream = rng::derive_rng(cfg.master_seed, rng::COEFFS_LABEL);
        let agents = (0..cfg.num_agents).map(|_| sample_agent_coeffs(&mut stream, &cfg.agent_ranges)).collect();
        let critics = cfg
            .modalities
            .iter()
            .map(|m| {
                (0..m.critic_count)
                    .map(|_| sample_critic_coeffs(&mut stream, &cfg.critic_ranges, m.critic_cost_form))
                    .collect()
            })
            .collect();
        Self { agents, critics }
    }

    /// Total cost at the given agent allocations (`x[j][i]`) and critic
    /// allocations (`y[j][v]`).
    pub fn total_cost(&self, x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
        let mut point = vec![0.0; x.len()];
        let mut total = 0.0;
        for (i, agent) in self.agents.iter().enumerate() {
            for (j, xs) in x.iter().enumerate() {
                point[j] = xs[i];
            }
            total += agent.evaluate(&point);
        }
        for (j, pool) in self.critics.iter().enumerate() {
            for (v, critic) in pool.iter().enumerate() {
                total += critic.evaluate(y[j][v]);
            }
        }
        total
    }

    /// Serialize as CSV, one row per participant, so a run can be replayed.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("kind,modality,id,c1,c2,c3,c4,form\n");
        for (i, a) in self.agents.iter().enumerate() {
            out.push_str(&format!("agent,,{i},{},{},{},{},\n", a.a, a.b, a.c, a.d));
        }
        for (j, pool) in self.critics.iter().enumerate() {
            for (v, c) in pool.iter().enumerate() {
                out.push_str(&format!("critic,{j},{v},{},{},,,{}\n", c.p, c.q, c.form));
            }
        }
        out
    }

    /// Parse the CSV produced by [`CostSet::to_csv_string`].
    pub fn from_csv_str(text: &str) -> Result<Self, CostCsvError> {
        let mut agents = Vec::new();
        let mut critics: Vec<Vec<CriticCostCoeffs>> = Vec::new();
        for (idx, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let bad = |message: &str| CostCsvError { line: idx + 1, message: message.to_string() };
            if fields.len() != 8 {
                return Err(bad("expected 8 fields"));
            }
            let num = |field: &str| field.parse::<f64>().map_err(|_| bad(&format!("bad number `{field}`")));
            match fields[0] {
                "agent" => agents.push(AgentCostCoeffs {
                    a: num(fields[3])?,
                    b: num(fields[4])?,
                    c: num(fields[5])?,
                    d: num(fields[6])?,
                }),
                "critic" => {
                    let modality: usize = fields[1].parse().map_err(|_| bad("bad modality"))?;
                    let form: CriticCostForm = fields[7].parse().map_err(|e: String| bad(&e))?;
                    while critics.len() <= modality {
                        critics.push(Vec::new());
                    }
                    critics[modality].push(CriticCostCoeffs { p: num(fields[3])?, q: num(fields[4])?, form });
                }
                other => return Err(bad(&format!("unknown kind `{other}`"))),
            }
        }
        Ok(Self { agents, critics })
    }
}

#[derive(Debug, Error)]
#[error("coefficient CSV line {line}: {message}")]
pub struct CostCsvError {
    pub line: usize,
    pub message: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn agent_cost_trivial_points() {
        let c = AgentCostCoeffs { a: 2.0, b: 2.0, c: 0.0, d: 0.0 };
        assert_eq!(agent_cost_eval(&c, &[1.0, 1.0]).unwrap(), 2.0);
        let any = AgentCostCoeffs { a: 3.0, b: 1.0, c: 7.0, d: 2.0 };
        assert_eq!(agent_cost_eval(&any, &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn agent_cost_matches_symbolic_value() {
        // 1/2*0.25 + 3/4*0.0625 + 1/2*0.25 + 1/2*0.0625, exact in binary.
        let c = AgentCostCoeffs { a: 1.0, b: 1.0, c: 1.0, d: 1.0 };
        assert_eq!(agent_cost_eval(&c, &[0.5, 0.5]).unwrap(), 0.328125);
    }

    #[test]
    fn agent_cost_rejects_out_of_domain() {
        let c = AgentCostCoeffs { a: 1.0, b: 1.0, c: 1.0, d: 1.0 };
        assert!(matches!(agent_cost_eval(&c, &[1.5, 0.0]), Err(CostError::OutOfDomain { index: 0, .. })));
        assert!(matches!(agent_cost_partial(&c, 2, &[0.5, 0.5]), Err(CostError::BadModality { .. })));
        assert!(matches!(agent_cost_partial(&c, 0, &[-0.1, 0.5]), Err(CostError::OutOfDomain { .. })));
    }

    #[test]
    fn agent_partial_trivial_points() {
        let c = AgentCostCoeffs { a: 2.0, b: 0.0, c: 1.0, d: 0.0 };
        assert_eq!(agent_cost_partial(&c, 0, &[1.0, 0.0]).unwrap(), 5.0);
        let c2 = AgentCostCoeffs { a: 0.0, b: 3.0, c: 0.0, d: 0.0 };
        assert_eq!(agent_cost_partial(&c2, 1, &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn critic_cost_trivial_points() {
        let m1 = CriticCostCoeffs { p: 1.0, q: 0.0, form: CriticCostForm::QuadQuartic };
        assert_eq!(critic_cost_eval(&m1, 1.0).unwrap(), 1.0);
        assert_eq!(critic_cost_deriv(&m1, 0.5).unwrap(), 1.0);
        let m2 = CriticCostCoeffs { p: 2.0, q: 2.0, form: CriticCostForm::QuadQuarticHalf };
        assert_eq!(critic_cost_eval(&m2, 1.0).unwrap(), 2.0);
        assert_eq!(critic_cost_deriv(&m2, 0.0).unwrap(), 0.0);
        assert!(critic_cost_eval(&m1, 1.2).is_err());
        assert!(critic_cost_deriv(&m1, -0.2).is_err());
    }

    fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn partials_agree_with_finite_differences() {
        let mut stream = derive_rng(7, "cost-fd-test");
        for _ in 0..1000 {
            let coeffs = sample_agent_coeffs(&mut stream, &AgentCoeffRanges::default());
            let x1 = 0.1 + 0.8 * stream.gen::<f64>();
            let x2 = 0.1 + 0.8 * stream.gen::<f64>();
            for modality in 0..2 {
                let analytic = coeffs.partial(modality, &[x1, x2]);
                let fd = if modality == 0 {
                    central_difference(|t| coeffs.evaluate(&[t, x2]), x1, 1e-5)
                } else {
                    central_difference(|t| coeffs.evaluate(&[x1, t]), x2, 1e-5)
                };
                let rel = (analytic - fd).abs() / analytic.abs().max(1.0);
                assert!(rel <= 1e-6, "fd mismatch: {analytic} vs {fd}");
            }
            let form = if stream.gen::<bool>() { CriticCostForm::QuadQuartic } else { CriticCostForm::QuadQuarticHalf };
            let critic = sample_critic_coeffs(&mut stream, &CriticCoeffRanges::default(), form);
            let y = 0.1 + 0.8 * stream.gen::<f64>();
            let analytic = critic.derivative(y);
            let fd = central_difference(|t| critic.evaluate(t), y, 1e-5);
            let rel = (analytic - fd).abs() / analytic.abs().max(1.0);
            assert!(rel <= 1e-6);
        }
    }

    #[test]
    fn partials_positive_and_increasing_on_grid() {
        let mut stream = derive_rng(11, "cost-grid-test");
        for _ in 0..50 {
            let coeffs = sample_agent_coeffs(&mut stream, &AgentCoeffRanges::default());
            for modality in 0..2 {
                let mut prev = 0.0;
                let mut prev_eval = 0.0;
                for step in 1..=20 {
                    let t = 0.05 * step as f64;
                    let x = if modality == 0 { [t, 0.5] } else { [0.5, t] };
                    let partial = coeffs.partial(modality, &x);
                    assert!(partial > 0.0);
                    assert!(partial > prev, "partial not increasing along modality {modality}");
                    let value = coeffs.evaluate(&x);
                    assert!(value >= 0.0 && value > prev_eval);
                    prev = partial;
                    prev_eval = value;
                }
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        let cfg = SystemConfig::paper_preset(42, 10);
        let a = CostSet::sample(&cfg);
        let b = CostSet::sample(&cfg);
        assert_eq!(a, b);

        let mut stream = derive_rng(42, "range-test");
        let ranges = AgentCoeffRanges::default();
        let mut sum_a = 0.0;
        let n = 100_000;
        for _ in 0..n {
            let c = sample_agent_coeffs(&mut stream, &ranges);
            assert!(c.a > 0.0 && c.a < 20.0);
            assert!(c.b > 0.0 && c.b < 15.0);
            assert!(c.c > 0.0 && c.c < 20.0);
            assert!(c.d > 0.0 && c.d < 30.0);
            sum_a += c.a;
        }
        // 3-sigma band for the mean of U(0,20) over 1e5 draws.
        let mean = sum_a / n as f64;
        assert!(mean > 9.945 && mean < 10.055, "mean of a outside 3-sigma band: {mean}");

        let cranges = CriticCoeffRanges::default();
        for _ in 0..10_000 {
            let c = sample_critic_coeffs(&mut stream, &cranges, CriticCostForm::QuadQuartic);
            assert!(c.p > 0.0 && c.p < 10.0);
            assert!(c.q > 0.0 && c.q < 6.0);
        }
    }

    #[test]
    fn cost_set_csv_round_trip() {
        let cfg = SystemConfig::paper_preset(9, 10);
        let set = CostSet::sample(&cfg);
        let parsed = CostSet::from_csv_str(&set.to_csv_string()).unwrap();
        assert_eq!(parsed, set);
    }
}
