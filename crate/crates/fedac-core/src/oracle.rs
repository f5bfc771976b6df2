//! Centralized reference solver for the resource-allocation program: minimize
//! the total cost over per-modality capped simplices
//! `{v in [0,1]^n : sum v = capacity}`.
//!
//! Projected gradient descent with Armijo backtracking is the primary route;
//! an exhaustive grid search provides the independent check, and KKT
//! consensus residuals quantify optimality (equal marginal costs across
//! interior coordinates).

use crate::cost::{CostModel, CostSet, ScalarCost};
use crate::model::SystemConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("capacity {capacity} outside (0, {n}]")]
    BadCapacity { capacity: f64, n: usize },
    #[error("grid enumeration would visit {points} points (guard: {guard})")]
    GridTooLarge { points: u128, guard: u128 },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Armijo contraction factor.
pub const BACKTRACK: f64 = 0.5;
/// Armijo sufficient-decrease constant.
pub const SUFFICIENT_DECREASE: f64 = 1e-4;
/// Default max-norm movement tolerance.
pub const DEFAULT_TOL: f64 = 1e-10;
/// Default iteration cap.
pub const DEFAULT_MAX_ITER: u64 = 100_000;
/// Coordinates within this distance of a box bound are excluded from KKT
/// consensus residuals (complementary slackness).
pub const INTERIOR_MARGIN: f64 = 1e-6;

/// Solution of the centralized program.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    /// `agent_allocations[j][i]`: optimal average for agent i on modality j.
    pub agent_allocations: Vec<Vec<f64>>,
    /// `critic_allocations[j][v]`: optimal average for critic v of modality j.
    pub critic_allocations: Vec<Vec<f64>>,
    pub objective: f64,
    /// Max-min spread of agent marginal costs over interior coordinates, per
    /// modality.
    pub agent_kkt_residual: Vec<f64>,
    pub critic_kkt_residual: Vec<f64>,
    pub iterations: u64,
    pub converged: bool,
}

/// Euclidean projection onto `{v in [0,1]^n : sum v = capacity}`.
///
/// The projection is `clamp(v_i - tau, 0, 1)` with `tau` found by bisection;
/// the returned sum is within 1e-12 of `capacity`.
pub fn project_capped_simplex(v: &[f64], capacity: f64) -> Result<Vec<f64>, OracleError> {
    let n = v.len();
    if !(capacity > 0.0 && capacity <= n as f64) {
        return Err(OracleError::BadCapacity { capacity, n });
    }
    let sum_at = |tau: f64| v.iter().map(|&x| (x - tau).clamp(0.0, 1.0)).sum::<f64>();
    let mut lo = v.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0; // sum = n >= capacity
    let mut hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max); // sum = 0 <= capacity
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if sum_at(mid) >= capacity {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-16 {
            break;
        }
    }
    let tau = 0.5 * (lo + hi);
    Ok(v.iter().map(|&x| (x - tau).clamp(0.0, 1.0)).collect())
}

/// All decision variables of one instance, grouped per modality block.
#[derive(Clone, Debug, PartialEq)]
struct Point {
    agents: Vec<Vec<f64>>,  // [m][N]
    critics: Vec<Vec<f64>>, // [m][C_j]
}

impl Point {
    fn max_move(&self, other: &Point) -> f64 {
        let mut worst = 0.0f64;
        for (a, b) in self.agents.iter().zip(&other.agents).chain(self.critics.iter().zip(&other.critics)) {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }
}

struct Instance<'a, A: CostModel, C: ScalarCost> {
    agents: &'a [A],
    critics: &'a [Vec<C>],
    agent_capacities: &'a [f64],
    critic_capacities: &'a [f64],
}

impl<A: CostModel, C: ScalarCost> Instance<'_, A, C> {
    fn modalities(&self) -> usize {
        self.agent_capacities.len()
    }

    fn num_agents(&self) -> usize {
        self.agents.len()
    }

    fn objective(&self, p: &Point) -> f64 {
        let m = self.modalities();
        let mut column = vec![0.0; m];
        let mut total = 0.0;
        for (i, agent) in self.agents.iter().enumerate() {
            for j in 0..m {
                column[j] = p.agents[j][i];
            }
            total += agent.evaluate(&column);
        }
        for (j, pool) in self.critics.iter().enumerate() {
            for (v, critic) in pool.iter().enumerate() {
                total += critic.evaluate(p.critics[j][v]);
            }
        }
        total
    }

    fn gradient(&self, p: &Point) -> Point {
        let m = self.modalities();
        let mut column = vec![0.0; m];
        let mut gx = vec![vec![0.0; self.num_agents()]; m];
        for (i, agent) in self.agents.iter().enumerate() {
            for j in 0..m {
                column[j] = p.agents[j][i];
            }
            for (j, block) in gx.iter_mut().enumerate() {
                block[i] = agent.partial(j, &column);
            }
        }
        let gy = self
            .critics
            .iter()
            .enumerate()
            .map(|(j, pool)| pool.iter().enumerate().map(|(v, c)| c.derivative(p.critics[j][v])).collect())
            .collect();
        Point { agents: gx, critics: gy }
    }

    fn project(&self, p: &Point) -> Result<Point, OracleError> {
        let agents = p
            .agents
            .iter()
            .zip(self.agent_capacities)
            .map(|(block, &cap)| project_capped_simplex(block, cap))
            .collect::<Result<_, _>>()?;
        let critics = p
            .critics
            .iter()
            .zip(self.critic_capacities)
            .map(|(block, &cap)| project_capped_simplex(block, cap))
            .collect::<Result<_, _>>()?;
        Ok(Point { agents, critics })
    }
}

fn stepped(p: &Point, g: &Point, t: f64) -> Point {
    Point {
        agents: p.agents.iter().zip(&g.agents).map(|(xs, gs)| xs.iter().zip(gs).map(|(x, g)| x - t * g).collect()).collect(),
        critics: p.critics.iter().zip(&g.critics).map(|(xs, gs)| xs.iter().zip(gs).map(|(x, g)| x - t * g).collect()).collect(),
    }
}

fn inner(a: &Point, b: &Point) -> f64 {
    let dot = |u: &[Vec<f64>], v: &[Vec<f64>]| -> f64 {
        u.iter().zip(v).map(|(x, y)| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>()).sum()
    };
    dot(&a.agents, &b.agents) + dot(&a.critics, &b.critics)
}

fn diff(a: &Point, b: &Point) -> Point {
    Point {
        agents: a.agents.iter().zip(&b.agents).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u - v).collect()).collect(),
        critics: a.critics.iter().zip(&b.critics).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u - v).collect()).collect(),
    }
}

/// Solve the centralized program by projected gradient descent with
/// backtracking. Non-convergence within `max_iter` is reported through
/// `converged = false` on the best iterate, not as an error.
pub fn solve_centralized<A: CostModel, C: ScalarCost>(
    agents: &[A],
    critics: &[Vec<C>],
    agent_capacities: &[f64],
    critic_capacities: &[f64],
    tol: f64,
    max_iter: u64,
) -> Result<OracleSolution, OracleError> {
    if agent_capacities.len() != critic_capacities.len() || critics.len() != agent_capacities.len() {
        return Err(OracleError::Shape("one capacity and one critic pool per modality".into()));
    }
    for agent in agents {
        if agent.arity() != agent_capacities.len() {
            return Err(OracleError::Shape("agent cost arity must equal modality count".into()));
        }
    }
    let m = agent_capacities.len();
    let n = agents.len();
    let instance = Instance { agents, critics, agent_capacities, critic_capacities };

    // Feasible start: equal split per block.
    let start = Point {
        agents: (0..m).map(|j| vec![agent_capacities[j] / n as f64; n]).collect(),
        critics: (0..m).map(|j| vec![critic_capacities[j] / critics[j].len() as f64; critics[j].len()]).collect(),
    };
    let mut point = instance.project(&start)?;
    let mut objective = instance.objective(&point);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        iterations += 1;
        let gradient = instance.gradient(&point);
        let mut t = 1.0;
        let mut candidate;
        let mut backtracks = 0;
        loop {
            candidate = instance.project(&stepped(&point, &gradient, t))?;
            let predicted = inner(&gradient, &diff(&candidate, &point));
            let value = instance.objective(&candidate);
            if value <= objective + SUFFICIENT_DECREASE * predicted {
                objective = value;
                break;
            }
            t *= BACKTRACK;
            backtracks += 1;
            if backtracks > 64 {
                // Line search stalled at floating-point resolution.
                candidate = point.clone();
                break;
            }
        }
        let movement = point.max_move(&candidate);
        point = candidate;
        if movement < tol {
            converged = true;
            break;
        }
    }

    let (agent_kkt_residual, critic_kkt_residual) = kkt_residual_of(&instance, &point);
    Ok(OracleSolution {
        agent_allocations: point.agents,
        critic_allocations: point.critics,
        objective,
        agent_kkt_residual,
        critic_kkt_residual,
        iterations,
        converged,
    })
}

/// Convenience wrapper solving the instance described by a config + cost set.
pub fn solve_for_config(costs: &CostSet, cfg: &SystemConfig, tol: f64, max_iter: u64) -> Result<OracleSolution, OracleError> {
    let agent_capacities: Vec<f64> = cfg.modalities.iter().map(|m| m.agent_capacity).collect();
    let critic_capacities: Vec<f64> = cfg.modalities.iter().map(|m| m.critic_capacity).collect();
    solve_centralized(&costs.agents, &costs.critics, &agent_capacities, &critic_capacities, tol, max_iter)
}

fn spread_of_interior(values: &[f64], derivatives: &[f64]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut seen = false;
    for (&value, &derivative) in values.iter().zip(derivatives) {
        if value > INTERIOR_MARGIN && value < 1.0 - INTERIOR_MARGIN {
            lo = lo.min(derivative);
            hi = hi.max(derivative);
            seen = true;
        }
    }
    if seen {
        hi - lo
    } else {
        0.0
    }
}

fn kkt_residual_of<A: CostModel, C: ScalarCost>(instance: &Instance<'_, A, C>, point: &Point) -> (Vec<f64>, Vec<f64>) {
    let gradient = instance.gradient(point);
    let agent = (0..instance.modalities())
        .map(|j| spread_of_interior(&point.agents[j], &gradient.agents[j]))
        .collect();
    let critic = (0..instance.modalities())
        .map(|j| spread_of_interior(&point.critics[j], &gradient.critics[j]))
        .collect();
    (agent, critic)
}

/// Per-modality KKT consensus residuals of an arbitrary feasible solution:
/// the max-min spread of marginal costs over coordinates strictly inside the
/// box. Zero when no interior coordinates exist.
pub fn kkt_residual<A: CostModel, C: ScalarCost>(
    solution: &OracleSolution,
    agents: &[A],
    critics: &[Vec<C>],
    agent_capacities: &[f64],
    critic_capacities: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let instance = Instance { agents, critics, agent_capacities, critic_capacities };
    let point = Point { agents: solution.agent_allocations.clone(), critics: solution.critic_allocations.clone() };
    kkt_residual_of(&instance, &point)
}

/// Best feasible point found by exhaustive grid enumeration.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSolution {
    pub agent_allocations: Vec<Vec<f64>>,
    pub critic_allocations: Vec<Vec<f64>>,
    pub objective: f64,
}

/// Number of length-`slots` vectors over `{0..=levels}` summing to `target`.
fn composition_count(slots: usize, target: i64, levels: i64) -> u128 {
    let mut ways = vec![0u128; (target + 1) as usize];
    ways[0] = 1;
    for _ in 0..slots {
        let mut next = vec![0u128; ways.len()];
        for (t, &w) in ways.iter().enumerate() {
            if w == 0 {
                continue;
            }
            for level in 0..=levels {
                let sum = t as i64 + level;
                if sum > target {
                    break;
                }
                next[sum as usize] = next[sum as usize].saturating_add(w);
            }
        }
        ways = next;
    }
    ways[target as usize]
}

fn enumerate_compositions(slots: usize, target: i64, levels: i64, f: &mut dyn FnMut(&[i64])) {
    fn recurse(buffer: &mut Vec<i64>, slots: usize, remaining: i64, levels: i64, f: &mut dyn FnMut(&[i64])) {
        if buffer.len() == slots - 1 {
            if (0..=levels).contains(&remaining) {
                buffer.push(remaining);
                f(buffer);
                buffer.pop();
            }
            return;
        }
        let slots_left = (slots - buffer.len() - 1) as i64;
        let lo = (remaining - slots_left * levels).max(0);
        let hi = remaining.min(levels);
        for value in lo..=hi {
            buffer.push(value);
            recurse(buffer, slots, remaining - value, levels, f);
            buffer.pop();
        }
    }
    if slots == 0 {
        return;
    }
    let mut buffer = Vec::with_capacity(slots);
    recurse(&mut buffer, slots, target, levels, f);
}

/// Exhaustively search the feasibility-respecting grid of spacing
/// `resolution` and return the minimal-objective point. Capacities are
/// rounded to the nearest achievable grid sum. Guarded at 1e7 points.
pub fn grid_oracle<A: CostModel, C: ScalarCost>(
    agents: &[A],
    critics: &[Vec<C>],
    agent_capacities: &[f64],
    critic_capacities: &[f64],
    resolution: f64,
) -> Result<GridSolution, OracleError> {
    const GUARD: u128 = 10_000_000;
    let m = agent_capacities.len();
    let n = agents.len();
    let levels = (1.0 / resolution).round() as i64;
    let agent_targets: Vec<i64> = agent_capacities.iter().map(|c| (c / resolution).round() as i64).collect();
    let critic_targets: Vec<i64> = critic_capacities.iter().map(|c| (c / resolution).round() as i64).collect();

    let mut agent_points: u128 = 1;
    for &t in &agent_targets {
        agent_points = agent_points.saturating_mul(composition_count(n, t, levels));
    }
    let critic_points: u128 = critic_targets
        .iter()
        .enumerate()
        .map(|(j, &t)| composition_count(critics[j].len(), t, levels))
        .sum();
    let total = agent_points.saturating_add(critic_points);
    if total > GUARD {
        return Err(OracleError::GridTooLarge { points: total, guard: GUARD });
    }

    // Agent blocks couple across modalities through each agent's cost, so
    // the cartesian product of per-modality compositions is scanned jointly.
    struct AgentScan<'a, A: CostModel> {
        m: usize,
        n: usize,
        levels: i64,
        resolution: f64,
        targets: &'a [i64],
        agents: &'a [A],
        blocks: Vec<Vec<f64>>,
        best: Option<(f64, Vec<Vec<f64>>)>,
    }

    impl<A: CostModel> AgentScan<'_, A> {
        fn run(&mut self, j: usize) {
            if j == self.m {
                let mut column = vec![0.0; self.m];
                let mut total = 0.0;
                for (i, agent) in self.agents.iter().enumerate() {
                    for (jj, block) in self.blocks.iter().enumerate() {
                        column[jj] = block[i];
                    }
                    total += agent.evaluate(&column);
                }
                if self.best.as_ref().map_or(true, |(obj, _)| total < *obj) {
                    self.best = Some((total, self.blocks.clone()));
                }
                return;
            }
            let (slots, target, levels, resolution) = (self.n, self.targets[j], self.levels, self.resolution);
            let mut combos = Vec::new();
            enumerate_compositions(slots, target, levels, &mut |combo| combos.push(combo.to_vec()));
            for combo in combos {
                for (i, &level) in combo.iter().enumerate() {
                    self.blocks[j][i] = level as f64 * resolution;
                }
                self.run(j + 1);
            }
        }
    }

    let mut scan = AgentScan {
        m,
        n,
        levels,
        resolution,
        targets: &agent_targets,
        agents,
        blocks: vec![vec![0.0; n]; m],
        best: None,
    };
    scan.run(0);
    let (agent_objective, agent_allocations) =
        scan.best.ok_or_else(|| OracleError::Shape("no feasible agent grid point".into()))?;

    // Critic blocks are separable per modality.
    let mut critic_allocations = Vec::with_capacity(m);
    let mut critic_objective = 0.0;
    for (j, pool) in critics.iter().enumerate() {
        let mut best: Option<(f64, Vec<f64>)> = None;
        enumerate_compositions(pool.len(), critic_targets[j], levels, &mut |combo| {
            let total: f64 = combo.iter().zip(pool).map(|(&level, c)| c.evaluate(level as f64 * resolution)).sum();
            if best.as_ref().map_or(true, |(obj, _)| total < *obj) {
                best = Some((total, combo.iter().map(|&l| l as f64 * resolution).collect()));
            }
        });
        let (obj, alloc) = best.ok_or_else(|| OracleError::Shape("no feasible critic grid point".into()))?;
        critic_objective += obj;
        critic_allocations.push(alloc);
    }

    Ok(GridSolution { agent_allocations, critic_allocations, objective: agent_objective + critic_objective })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{AgentCostCoeffs, CriticCostCoeffs, CriticCostForm, QuadraticCost};
    use crate::rng::derive_rng;
    use rand::Rng;

    #[test]
    fn projection_symmetric_case() {
        let p = project_capped_simplex(&[0.5, 0.5, 0.5], 1.0).unwrap();
        for x in &p {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_box_clamp_dominates() {
        let p = project_capped_simplex(&[5.0, 0.0, 0.0], 1.0).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(p[1].abs() < 1e-12 && p[2].abs() < 1e-12);
    }

    #[test]
    fn projection_interior_case_matches_analytic_shift() {
        // No bound active: tau = (1.2 - 1)/3.
        let p = project_capped_simplex(&[0.9, 0.2, 0.1], 1.0).unwrap();
        let expected = [0.9 - 0.2 / 3.0, 0.2 - 0.2 / 3.0, 0.1 - 0.2 / 3.0];
        for (got, want) in p.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn projection_rejects_bad_capacity() {
        assert!(project_capped_simplex(&[0.1, 0.2], 0.0).is_err());
        assert!(project_capped_simplex(&[0.1, 0.2], 2.5).is_err());
    }

    /// Sample a feasible point of the capped simplex without using the
    /// projection: normalized positive draws with excess redistribution.
    fn random_feasible(rng: &mut impl Rng, n: usize, capacity: f64) -> Vec<f64> {
        let mut w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
        let sum: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x *= capacity / sum);
        for _ in 0..64 {
            let excess: f64 = w.iter().map(|&x| (x - 1.0).max(0.0)).sum();
            if excess <= 1e-15 {
                break;
            }
            let headroom: f64 = w.iter().map(|&x| if x < 1.0 { 1.0 - x } else { 0.0 }).sum();
            let scale = excess / headroom;
            for x in w.iter_mut() {
                if *x > 1.0 {
                    *x = 1.0;
                } else {
                    *x += scale * (1.0 - *x);
                }
            }
        }
        w
    }

    #[test]
    fn projection_is_idempotent_and_optimal_against_random_feasible_points() {
        let mut rng = derive_rng(13, "projection-test");
        for _ in 0..200 {
            let n = rng.gen_range(2..8);
            let capacity = rng.gen::<f64>() * (n as f64 - 0.2) + 0.1;
            let v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let p = project_capped_simplex(&v, capacity).unwrap();
            let sum: f64 = p.iter().sum();
            assert!((sum - capacity).abs() <= 1e-12, "sum {sum} vs capacity {capacity}");
            assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));

            let pp = project_capped_simplex(&p, capacity).unwrap();
            for (a, b) in p.iter().zip(&pp) {
                assert!((a - b).abs() <= 1e-12, "projection not idempotent");
            }

            let dist = |w: &[f64]| -> f64 { w.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum() };
            let d_proj = dist(&p);
            for _ in 0..500 {
                let w = random_feasible(&mut rng, n, capacity);
                assert!(d_proj <= dist(&w) + 1e-9, "found feasible point closer than the projection");
            }
        }
    }

    #[test]
    fn symmetric_agents_split_capacity_equally() {
        let agents = vec![QuadraticCost { weights: vec![1.0] }; 9];
        let critics = vec![vec![CriticCostCoeffs { p: 1.0, q: 1.0, form: CriticCostForm::QuadQuartic }; 3]];
        let solution = solve_centralized(&agents, &critics, &[6.0], &[2.0], 1e-12, 200_000).unwrap();
        assert!(solution.converged);
        for &x in &solution.agent_allocations[0] {
            assert!((x - 2.0 / 3.0).abs() < 1e-8);
        }
        for &y in &solution.critic_allocations[0] {
            assert!((y - 2.0 / 3.0).abs() < 1e-8);
        }
        assert!(solution.agent_kkt_residual[0] <= 1e-8);
        assert!(solution.critic_kkt_residual[0] <= 1e-8);
    }

    pub(crate) fn small_random_instance(
        seed: u64,
    ) -> (Vec<AgentCostCoeffs>, Vec<Vec<CriticCostCoeffs>>, Vec<f64>, Vec<f64>) {
        let mut rng = derive_rng(seed, "oracle-instance");
        let n = rng.gen_range(2..=4);
        let agents: Vec<AgentCostCoeffs> = (0..n)
            .map(|_| AgentCostCoeffs {
                a: 0.5 + 19.0 * rng.gen::<f64>(),
                b: 1.0,
                c: 0.5 + 19.0 * rng.gen::<f64>(),
                d: 1.0,
            })
            .collect();
        let critics = vec![(0..2)
            .map(|_| CriticCostCoeffs {
                p: 0.5 + 9.0 * rng.gen::<f64>(),
                q: 0.5 + 5.0 * rng.gen::<f64>(),
                form: CriticCostForm::QuadQuartic,
            })
            .collect::<Vec<_>>()];
        // Capacities land on the 0.01 grid so the grid search solves the
        // same feasible set.
        let agent_cap = vec![((0.3 + rng.gen::<f64>() * (n as f64 * 0.7)) * 100.0).round() / 100.0];
        let critic_cap = vec![((0.4 + rng.gen::<f64>()) * 100.0).round() / 100.0];
        (agents, critics, agent_cap, critic_cap)
    }

    /// Single-modality wrapper: the quartic agent costs have arity 2, so the
    /// second coordinate is pinned to zero.
    #[derive(Clone)]
    pub(crate) struct FirstModality(pub AgentCostCoeffs);

    impl CostModel for FirstModality {
        fn arity(&self) -> usize {
            1
        }
        fn evaluate(&self, x: &[f64]) -> f64 {
            self.0.evaluate(&[x[0], 0.0])
        }
        fn partial(&self, modality: usize, x: &[f64]) -> f64 {
            assert_eq!(modality, 0);
            self.0.partial(0, &[x[0], 0.0])
        }
    }

    #[test]
    fn solver_beats_grid_on_random_small_instances() {
        for seed in 0..8u64 {
            let (agents, critics, agent_cap, critic_cap) = small_random_instance(seed);
            let wrapped: Vec<FirstModality> = agents.iter().map(|&a| FirstModality(a)).collect();
            let solution = solve_centralized(&wrapped, &critics, &agent_cap, &critic_cap, 1e-12, 400_000).unwrap();
            assert!(solution.converged, "seed {seed} did not converge");
            let grid = grid_oracle(&wrapped, &critics, &agent_cap, &critic_cap, 0.01).unwrap();
            assert!(
                solution.objective <= grid.objective + 1e-3,
                "seed {seed}: solver {} vs grid {}",
                solution.objective,
                grid.objective
            );
            assert!(solution.agent_kkt_residual[0] <= 1e-5, "seed {seed}: agent kkt {}", solution.agent_kkt_residual[0]);
            assert!(solution.critic_kkt_residual[0] <= 1e-5, "seed {seed}: critic kkt {}", solution.critic_kkt_residual[0]);
        }
    }

    #[test]
    fn objective_is_monotone_over_iterations() {
        // Re-run the solver capped at increasing iteration budgets; the
        // objective sequence must be non-increasing (Armijo guarantees it).
        let (agents, critics, agent_cap, critic_cap) = small_random_instance(99);
        let wrapped: Vec<FirstModality> = agents.iter().map(|&a| FirstModality(a)).collect();
        let mut prev = f64::INFINITY;
        for iters in [1u64, 2, 5, 10, 50, 200, 1000] {
            let s = solve_centralized(&wrapped, &critics, &agent_cap, &critic_cap, 0.0, iters).unwrap();
            assert!(s.objective <= prev + 1e-12);
            for (j, block) in s.agent_allocations.iter().enumerate() {
                let sum: f64 = block.iter().sum();
                assert!((sum - agent_cap[j]).abs() <= 1e-10);
                assert!(block.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
            prev = s.objective;
        }
    }

    #[test]
    fn grid_pins_single_agent_to_capacity() {
        let agents = vec![QuadraticCost { weights: vec![2.0] }];
        let critics = vec![vec![CriticCostCoeffs { p: 1.0, q: 0.0, form: CriticCostForm::QuadQuartic }]];
        let grid = grid_oracle(&agents, &critics, &[0.5], &[0.5], 0.01).unwrap();
        assert!((grid.agent_allocations[0][0] - 0.5).abs() < 1e-9);
        assert!((grid.critic_allocations[0][0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn grid_symmetric_instance_splits_equally() {
        let agents = vec![QuadraticCost { weights: vec![1.0] }; 3];
        let critics = vec![vec![CriticCostCoeffs { p: 2.0, q: 1.0, form: CriticCostForm::QuadQuartic }; 3]];
        let grid = grid_oracle(&agents, &critics, &[1.5], &[1.5], 0.05).unwrap();
        for &x in &grid.agent_allocations[0] {
            assert!((x - 0.5).abs() <= 0.05 + 1e-9);
        }
    }

    #[test]
    fn grid_guard_rejects_huge_instances() {
        let agents = vec![QuadraticCost { weights: vec![1.0, 1.0] }; 9];
        let critics = vec![
            vec![CriticCostCoeffs { p: 1.0, q: 1.0, form: CriticCostForm::QuadQuartic }; 3],
            vec![CriticCostCoeffs { p: 1.0, q: 1.0, form: CriticCostForm::QuadQuarticHalf }; 3],
        ];
        let result = grid_oracle(&agents, &critics, &[6.0, 7.0], &[2.0, 2.0], 0.01);
        assert!(matches!(result, Err(OracleError::GridTooLarge { .. })));
    }

    #[test]
    fn perturbing_a_solution_increases_kkt_residual() {
        let (agents, critics, agent_cap, critic_cap) = small_random_instance(5);
        let wrapped: Vec<FirstModality> = agents.iter().map(|&a| FirstModality(a)).collect();
        let solution = solve_centralized(&wrapped, &critics, &agent_cap, &critic_cap, 1e-12, 400_000).unwrap();
        let base = solution.agent_kkt_residual[0];

        let mut perturbed = solution.clone();
        perturbed.agent_allocations[0][0] += 0.1;
        perturbed.agent_allocations[0] = project_capped_simplex(&perturbed.agent_allocations[0], agent_cap[0]).unwrap();
        let (agent_res, _) = kkt_residual(&perturbed, &wrapped, &critics, &agent_cap, &critic_cap);
        assert!(agent_res[0] > base, "perturbed residual {} should exceed {}", agent_res[0], base);
    }

    #[test]
    fn paper_preset_instance_matches_waterfilling_route() {
        // Independent route: the experiment costs are separable per
        // modality, so the optimum satisfies a waterfilling condition
        // solvable by bisection on the common marginal cost.
        let cfg = crate::model::SystemConfig::paper_preset(42, 10);
        let costs = crate::cost::CostSet::sample(&cfg);
        let solution = solve_for_config(&costs, &cfg, 1e-12, 400_000).unwrap();
        assert!(solution.converged);

        for j in 0..2 {
            let derivative = |i: usize, x: f64| costs.agents[i].partial(j, &[x, x]);
            let inverse = |i: usize, theta: f64| -> f64 {
                if derivative(i, 1.0) <= theta {
                    return 1.0;
                }
                let (mut lo, mut hi) = (0.0, 1.0);
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if derivative(i, mid) < theta {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            };
            let capacity = cfg.modalities[j].agent_capacity;
            let (mut lo, mut hi) = (0.0, 1000.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if (0..9).map(|i| inverse(i, mid)).sum::<f64>() < capacity {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let theta = 0.5 * (lo + hi);
            for i in 0..9 {
                let expected = inverse(i, theta);
                let got = solution.agent_allocations[j][i];
                assert!((got - expected).abs() < 1e-5, "modality {j} agent {i}: {got} vs waterfilling {expected}");
            }
        }
    }
}
