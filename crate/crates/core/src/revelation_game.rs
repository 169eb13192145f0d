//! The game in which agents report beliefs to an aggregation rule and are
//! paid by their true expected utility at the aggregate.

use serde::Serialize;

use crate::aggregation::{aggregate, AggregationRule, PoolWeights};
use crate::belief::{Belief, BeliefProfile, Tolerance};
use crate::error::{Error, Result};
use crate::parimutuel::{bang_per_buck, solve_parimutuel, verify_foc, ParimutuelEquilibrium};
use crate::portfolio::{expected_utility, utility_gain, MarketSpec, UtilityIndex};

/// The beliefs agents announce, one per agent.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ReportProfile(BeliefProfile);

impl ReportProfile {
    pub fn new(reports: Vec<Belief>) -> Result<Self> {
        Ok(ReportProfile(BeliefProfile::new(reports)?))
    }

    pub fn from_profile(profile: BeliefProfile) -> Self {
        ReportProfile(profile)
    }

    pub fn profile(&self) -> &BeliefProfile {
        &self.0
    }

    pub fn into_profile(self) -> BeliefProfile {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, agent: usize) -> &Belief {
        self.0.get(agent)
    }

    pub fn with_replaced(&self, agent: usize, report: Belief) -> Result<Self> {
        Ok(ReportProfile(self.0.with_replaced(agent, report)?))
    }
}

#[derive(Debug, Clone)]
pub struct GameSpec {
    pub truths: BeliefProfile,
    pub rule: AggregationRule,
    pub market: MarketSpec,
    pub utility: UtilityIndex,
    pub tol: Tolerance,
}

impl GameSpec {
    pub fn new(
        truths: BeliefProfile,
        rule: AggregationRule,
        market: MarketSpec,
        utility: UtilityIndex,
        tol: Tolerance,
    ) -> Result<Self> {
        if truths.dim() != market.dim() {
            return Err(Error::DimensionMismatch {
                expected: market.dim(),
                found: truths.dim(),
            });
        }
        if let AggregationRule::LinearPool(PoolWeights::Explicit(w)) = &rule {
            if w.len() != truths.len() {
                return Err(Error::invalid(format!("{} pool weights for {} agents", w.len(), truths.len())));
            }
        }
        tol.validate()?;
        Ok(GameSpec {
            truths,
            rule,
            market,
            utility,
            tol,
        })
    }

    /// Equal-weight linear pool, log utility, unit prices and wealth.
    pub fn log_pool(truths: BeliefProfile) -> Self {
        let market = MarketSpec::uniform(truths.dim());
        GameSpec {
            truths,
            rule: AggregationRule::symmetric_pool(),
            market,
            utility: UtilityIndex::Log,
            tol: Tolerance::default(),
        }
    }

    pub fn agents(&self) -> usize {
        self.truths.len()
    }

    fn is_log_pool(&self) -> bool {
        self.utility.is_log() && matches!(self.rule, AggregationRule::LinearPool(_))
    }

    fn check_reports(&self, reports: &ReportProfile) -> Result<()> {
        if reports.len() != self.agents() {
            return Err(Error::invalid(format!(
                "{} reports for {} agents",
                reports.len(),
                self.agents()
            )));
        }
        if reports.profile().dim() != self.truths.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.truths.dim(),
                found: reports.profile().dim(),
            });
        }
        Ok(())
    }

    fn check_agent(&self, agent: usize) -> Result<()> {
        if agent >= self.agents() {
            return Err(Error::invalid(format!("agent {agent} out of range")));
        }
        Ok(())
    }
}

/// Agent `agent`'s true expected utility at the aggregate of `reports`.
/// May be `-inf`.
pub fn payoff(spec: &GameSpec, reports: &ReportProfile, agent: usize) -> Result<f64> {
    spec.check_agent(agent)?;
    spec.check_reports(reports)?;
    let q = aggregate(&spec.rule, reports.profile(), &spec.tol)?;
    expected_utility(spec.truths.get(agent), &q, &spec.market, &spec.utility)
}

fn payoff_with(spec: &GameSpec, reports: &ReportProfile, agent: usize, report: &Belief) -> Result<f64> {
    payoff(spec, &reports.with_replaced(agent, report.clone())?, agent)
}

/// A payoff-maximizing report for `agent` against the others' reports.
///
/// Linear pools under log utility are solved exactly; everything else goes
/// through [`best_response_numeric`].
pub fn best_response(spec: &GameSpec, reports: &ReportProfile, agent: usize) -> Result<Belief> {
    spec.check_agent(agent)?;
    spec.check_reports(reports)?;
    if !spec.is_log_pool() {
        return best_response_numeric(spec, reports, agent);
    }
    let n = spec.agents();
    let truth = spec.truths.get(agent);
    if n == 2 && truth.dim() == 2 && spec.rule.is_symmetric_pool() {
        let other = reports.get(1 - agent).get(0);
        return Belief::two_state((2.0 * truth.get(0) - other).clamp(0.0, 1.0));
    }
    let own = spec.rule.pool_weight(agent, n).ok_or_else(|| Error::invalid("missing pool weight"))?;
    if own <= 0.0 {
        // The report is irrelevant; every report is a best response.
        return Ok(truth.clone());
    }
    let others: Vec<f64> = (0..truth.dim())
        .map(|s| {
            (0..n)
                .filter(|&j| j != agent)
                .map(|j| spec.rule.pool_weight(j, n).unwrap_or(0.0) * reports.get(j).get(s))
                .sum()
        })
        .collect();
    water_fill(truth, &others, own)
}

/// Maximizes `sum_s p_s ln(c_s + w r_s)` over the simplex.
///
/// Optimality makes the aggregate `max(c_s, t p_s)` on the support of `p`
/// for a level `t` fixed by the budget; `t` is found from the sorted
/// breakpoints `c_s / p_s`.
pub(crate) fn water_fill(truth: &Belief, others: &[f64], own: f64) -> Result<Belief> {
    let mut support: Vec<usize> = truth.support().collect();
    support.sort_by(|&a, &b| (others[a] / truth.get(a)).total_cmp(&(others[b] / truth.get(b))));
    let mut mass = 0.0;
    let mut base = 0.0;
    let mut level = 0.0;
    for (k, &s) in support.iter().enumerate() {
        mass += truth.get(s);
        base += others[s];
        level = (own + base) / mass;
        let next = support.get(k + 1).map(|&t| others[t] / truth.get(t));
        if next.is_none_or(|b| level <= b) {
            break;
        }
    }
    let mut raw = vec![0.0; truth.dim()];
    for &s in &support {
        raw[s] = ((level * truth.get(s) - others[s]) / own).max(0.0);
    }
    Belief::new(raw)
}

/// Euclidean projection of `v` onto the probability simplex.
fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - 1.0) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Finite-difference step for directional derivatives.
const FD_STEP: f64 = 1e-7;
const ARMIJO: f64 = 1e-4;

/// Projected-gradient ascent on the agent's payoff, started from the truth
/// and confined to the face spanned by the truth's support (reports
/// elsewhere only lower the payoff).
///
/// Directional derivatives towards each vertex of the face stand in for the
/// gradient; they differ from it by a constant, which the projection ignores.
/// Stops when the projected step is below `abs_tol` or no ascent step
/// survives backtracking, which is where finite-difference noise dominates.
pub fn best_response_numeric(spec: &GameSpec, reports: &ReportProfile, agent: usize) -> Result<Belief> {
    spec.check_agent(agent)?;
    spec.check_reports(reports)?;
    let truth = spec.truths.get(agent);
    let face: Vec<usize> = truth.support().collect();
    let dim = truth.dim();
    let eval = |r: &[f64]| -> Result<f64> { payoff_with(spec, reports, agent, &Belief::new(r.to_vec())?) };
    let embed = |sub: &[f64]| -> Vec<f64> {
        let mut r = vec![0.0; dim];
        for (&s, &v) in face.iter().zip(sub) {
            r[s] = v;
        }
        r
    };

    let mut x: Vec<f64> = face.iter().map(|&s| truth.get(s)).collect();
    let mut value = eval(&embed(&x))?;
    if value == f64::NEG_INFINITY {
        x = vec![1.0 / face.len() as f64; face.len()];
        value = eval(&embed(&x))?;
    }
    if face.len() == 1 {
        return Belief::new(embed(&x));
    }
    let mut eta = 1.0;
    for _ in 0..spec.tol.max_iter {
        let mut slope = Vec::with_capacity(face.len());
        for k in 0..face.len() {
            let mut y: Vec<f64> = x.iter().map(|v| v * (1.0 - FD_STEP)).collect();
            y[k] += FD_STEP;
            let d = (eval(&embed(&y))? - value) / FD_STEP;
            slope.push(if d.is_nan() { f64::MIN } else { d.clamp(f64::MIN, f64::MAX) });
        }
        let unit: Vec<f64> = x.iter().zip(&slope).map(|(a, g)| a + g).collect();
        let stationarity = project_simplex(&unit)
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if stationarity < spec.tol.abs_tol {
            return Belief::new(embed(&x));
        }
        let mut accepted = false;
        while eta > 1e-16 {
            let trial: Vec<f64> = x.iter().zip(&slope).map(|(a, g)| a + eta * g).collect();
            let candidate = project_simplex(&trial);
            let gain: f64 = candidate.iter().zip(&x).zip(&slope).map(|((c, a), g)| g * (c - a)).sum();
            let moved = candidate.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if moved < 1e-15 {
                break;
            }
            let v = eval(&embed(&candidate))?;
            if v >= value + ARMIJO * gain && v > value {
                x = candidate;
                value = v;
                eta = (eta * 2.0).min(1e6);
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            return Belief::new(embed(&x));
        }
    }
    Err(Error::NoConvergence {
        solver: "projected gradient",
        iterations: spec.tol.max_iter,
        residual: f64::NAN,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DynamicsOutcome {
    pub reports: ReportProfile,
    pub aggregate: Belief,
    pub converged: bool,
    /// Index of the last round played; a start that is already a fixed point
    /// converges in round 0.
    pub rounds: usize,
}

/// Round-robin best responses in agent index order until a full round moves
/// no report by `abs_tol` or more.
pub fn br_dynamics(spec: &GameSpec, start: ReportProfile, max_rounds: usize) -> Result<DynamicsOutcome> {
    spec.check_reports(&start)?;
    let mut reports = start;
    let mut converged = false;
    let mut round = 0;
    while round < max_rounds {
        let mut moved = 0.0f64;
        for i in 0..spec.agents() {
            let br = best_response(spec, &reports, i)?;
            moved = moved.max(br.linf_distance(reports.get(i)));
            reports = reports.with_replaced(i, br)?;
        }
        if moved < spec.tol.abs_tol {
            converged = true;
            break;
        }
        round += 1;
    }
    let aggregate = aggregate(&spec.rule, reports.profile(), &spec.tol)?;
    Ok(DynamicsOutcome {
        reports,
        aggregate,
        converged,
        rounds: round.min(max_rounds.saturating_sub(1)),
    })
}

/// Maps the parimutuel equilibrium on `truths` to a Nash equilibrium of the
/// equal-weight log-pool game: agent `i` reports `n * price_s * x_is`.
pub fn nash_from_parimutuel(truths: &BeliefProfile, tol: &Tolerance) -> Result<(ReportProfile, Belief)> {
    let eq = solve_parimutuel(truths, tol)?;
    let n = truths.len() as f64;
    let reports = eq
        .allocation
        .iter()
        .map(|row| Belief::new(row.iter().zip(eq.price.probs()).map(|(x, r)| n * r * x).collect()))
        .collect::<Result<Vec<_>>>()?;
    let reports = ReportProfile::new(reports)?;
    let q = aggregate(&AggregationRule::symmetric_pool(), reports.profile(), tol)?;
    Ok((reports, q))
}

/// The reverse map: prices are the mean report and agent `i` holds
/// `x_is = r_is / sum_j r_js` of state `s`.
pub fn parimutuel_from_reports(truths: &BeliefProfile, reports: &ReportProfile, tol: &Tolerance) -> Result<ParimutuelEquilibrium> {
    if truths.len() != reports.len() || truths.dim() != reports.profile().dim() {
        return Err(Error::invalid("reports do not match the truth profile"));
    }
    let price = aggregate(&AggregationRule::symmetric_pool(), reports.profile(), tol)?;
    let dim = truths.dim();
    let totals: Vec<f64> = (0..dim).map(|s| reports.profile().column(s).iter().sum()).collect();
    let allocation = reports
        .profile()
        .iter()
        .map(|r| (0..dim).map(|s| if totals[s] > 0.0 { r.get(s) / totals[s] } else { 0.0 }).collect())
        .collect();
    let multipliers = bang_per_buck(truths, price.probs());
    let mut eq = ParimutuelEquilibrium {
        price,
        allocation,
        multipliers,
        foc_residual: 0.0,
        iterations: 0,
    };
    eq.foc_residual = verify_foc(&eq, truths, tol)?.max_residual();
    Ok(eq)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NashDiagnostic {
    /// `payoff(best response) - payoff(current report)` per agent.
    pub gaps: Vec<f64>,
    pub best_responses: Vec<Belief>,
    /// First-order residuals per agent; only for linear pools under log utility.
    pub foc_residuals: Option<Vec<f64>>,
    pub max_gap: f64,
    pub is_nash: bool,
}

pub fn verify_nash(spec: &GameSpec, reports: &ReportProfile, tol: &Tolerance) -> Result<NashDiagnostic> {
    spec.check_reports(reports)?;
    let mut gaps = Vec::with_capacity(spec.agents());
    let mut best_responses = Vec::with_capacity(spec.agents());
    for i in 0..spec.agents() {
        let br = best_response(spec, reports, i)?;
        let gain = utility_gain(payoff_with(spec, reports, i, &br)?, payoff(spec, reports, i)?);
        gaps.push(gain);
        best_responses.push(br);
    }
    let foc_residuals = if spec.is_log_pool() {
        let q = aggregate(&spec.rule, reports.profile(), &spec.tol)?;
        Some(
            spec.truths
                .iter()
                .zip(reports.profile().iter())
                .map(|(p, r)| nash_foc_residual(p, r, &q, tol.abs_tol))
                .collect(),
        )
    } else {
        None
    };
    let max_gap = gaps.iter().cloned().fold(0.0, f64::max);
    Ok(NashDiagnostic {
        is_nash: max_gap <= tol.abs_tol,
        gaps,
        best_responses,
        foc_residuals,
        max_gap,
    })
}

/// `p_s / q_s` must equal its maximum on every state the agent reports.
fn nash_foc_residual(truth: &Belief, report: &Belief, q: &Belief, abs_tol: f64) -> f64 {
    let mut lambda = 0.0f64;
    for s in truth.support() {
        if q.get(s) <= 0.0 {
            return f64::INFINITY;
        }
        lambda = lambda.max(truth.get(s) / q.get(s));
    }
    (0..truth.dim())
        .filter(|&s| report.get(s) > abs_tol)
        .map(|s| if q.get(s) > 0.0 { lambda - truth.get(s) / q.get(s) } else { lambda })
        .fold(0.0, f64::max)
}
