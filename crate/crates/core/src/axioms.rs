//! Sampling-based checks of the implementability axioms.
//!
//! A `Pass` only means no counterexample turned up among the samples (and
//! grid resolution) recorded in the report. Every `Fail` carries a
//! counterexample that [`Counterexample::replay`] re-evaluates.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::aggregation::{aggregate, AggregationRule};
use crate::belief::{simplex_grid_capped, Belief, BeliefProfile, Tolerance, DEFAULT_GRID_CAP};
use crate::error::{Error, Result};
use crate::portfolio::{compare_utilities, expected_utility, utility_act, utility_gain, MarketSpec, Preference, UtilityIndex};
use crate::revelation_game::{nash_from_parimutuel, water_fill};
use crate::sampling::{random_belief, random_lambda, random_profile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axiom {
    RecursiveInvariance,
    Monotonicity,
    NoVetoPower,
    StrategyProofness,
    ConditionMu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

/// Clause of condition μ a counterexample violates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MuClause {
    /// The aggregate is not a maximal element of an agent's opportunity set.
    Membership,
    First,
    Second,
    Third,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Counterexample {
    /// Moving beliefs towards the aggregate changed the aggregate.
    /// Shared by recursive invariance and monotonicity.
    AggregateMoved {
        profile: BeliefProfile,
        lambdas: Vec<f64>,
        moved_profile: BeliefProfile,
        aggregate: Belief,
        moved_aggregate: Belief,
        gap: f64,
    },
    NoVetoPower {
        profile: BeliefProfile,
        consensus: Belief,
        aggregate: Belief,
        gap: f64,
    },
    StrategyProofness {
        profile: BeliefProfile,
        agent: usize,
        deviation: Belief,
        aggregate: Belief,
        deviated_aggregate: Belief,
        gain: f64,
    },
    ConditionMu {
        clause: MuClause,
        profile: BeliefProfile,
        other_profile: BeliefProfile,
        agent: Option<usize>,
        expected: Belief,
        found: Belief,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AxiomReport {
    pub axiom: Axiom,
    pub verdict: Verdict,
    pub counterexample: Option<Counterexample>,
    pub samples: usize,
    pub note: String,
}

impl AxiomReport {
    fn pass(axiom: Axiom, samples: usize, note: impl Into<String>) -> Self {
        AxiomReport {
            axiom,
            verdict: Verdict::Pass,
            counterexample: None,
            samples,
            note: note.into(),
        }
    }

    fn fail(axiom: Axiom, samples: usize, ce: Counterexample) -> Self {
        AxiomReport {
            axiom,
            verdict: Verdict::Fail,
            counterexample: Some(ce),
            samples,
            note: String::new(),
        }
    }

    fn empty(axiom: Axiom) -> Self {
        AxiomReport {
            axiom,
            verdict: Verdict::Inconclusive,
            counterexample: None,
            samples: 0,
            note: "no samples".into(),
        }
    }
}

/// Evaluates `check` on every item in parallel and returns the failure (or
/// error) with the lowest index, so results do not depend on scheduling.
fn first_failure<T, F>(items: &[T], check: F) -> Result<Option<Counterexample>>
where
    T: Sync,
    F: Fn(&T) -> Result<Option<Counterexample>> + Sync + Send,
{
    let outcomes: Vec<Result<Option<Counterexample>>> = items.par_iter().map(check).collect();
    for outcome in outcomes {
        if let Some(ce) = outcome? {
            return Ok(Some(ce));
        }
    }
    Ok(None)
}

/// A profile and per-agent fractions of the way to move towards its aggregate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixingDraw {
    pub profile: BeliefProfile,
    pub lambdas: Vec<f64>,
}

/// `(1 - lambda_i) p_i + lambda_i q` for each agent.
pub fn move_towards(profile: &BeliefProfile, target: &Belief, lambdas: &[f64]) -> Result<BeliefProfile> {
    if lambdas.len() != profile.len() {
        return Err(Error::invalid(format!(
            "{} mixing weights for {} agents",
            lambdas.len(),
            profile.len()
        )));
    }
    let moved = profile
        .iter()
        .zip(lambdas)
        .map(|(p, &l)| p.mix(target, l))
        .collect::<Result<Vec<_>>>()?;
    BeliefProfile::new(moved)
}

fn aggregate_moved(rule: &AggregationRule, draw: &MixingDraw, tol: &Tolerance) -> Result<Option<Counterexample>> {
    let f = aggregate(rule, &draw.profile, tol)?;
    let moved_profile = move_towards(&draw.profile, &f, &draw.lambdas)?;
    let g = aggregate(rule, &moved_profile, tol)?;
    let gap = f.linf_distance(&g);
    if gap <= tol.abs_tol {
        return Ok(None);
    }
    Ok(Some(Counterexample::AggregateMoved {
        profile: draw.profile.clone(),
        lambdas: draw.lambdas.clone(),
        moved_profile,
        aggregate: f,
        moved_aggregate: g,
        gap,
    }))
}

pub fn check_recursive_invariance(rule: &AggregationRule, draws: &[MixingDraw], tol: &Tolerance) -> Result<AxiomReport> {
    if draws.is_empty() {
        return Ok(AxiomReport::empty(Axiom::RecursiveInvariance));
    }
    Ok(match first_failure(draws, |d| aggregate_moved(rule, d, tol))? {
        Some(ce) => AxiomReport::fail(Axiom::RecursiveInvariance, draws.len(), ce),
        None => AxiomReport::pass(
            Axiom::RecursiveInvariance,
            draws.len(),
            format!("no violation in {} draws at tolerance {:e}", draws.len(), tol.abs_tol),
        ),
    })
}

/// L∞ distance from `new_belief` to its orthogonal projection onto the
/// segment between `belief` and `aggregate`.
pub fn segment_distance(aggregate: &Belief, belief: &Belief, new_belief: &Belief) -> f64 {
    let span: Vec<f64> = belief.probs().iter().zip(aggregate.probs()).map(|(p, f)| p - f).collect();
    let len2: f64 = span.iter().map(|d| d * d).sum();
    let t = if len2 > 0.0 {
        let along: f64 = new_belief
            .probs()
            .iter()
            .zip(aggregate.probs())
            .zip(&span)
            .map(|((x, f), d)| (x - f) * d)
            .sum();
        (along / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    new_belief
        .probs()
        .iter()
        .zip(aggregate.probs())
        .zip(&span)
        .map(|((x, f), d)| (f + t * d - x).abs())
        .fold(0.0, f64::max)
}

/// Whether `new_belief` lies on the segment from `belief` to `aggregate`,
/// which is exactly when every belief the old one ranks at or below the
/// aggregate is also ranked at or below it by the new one.
pub fn lower_contour_subset(aggregate: &Belief, belief: &Belief, new_belief: &Belief, tol: f64) -> bool {
    segment_distance(aggregate, belief, new_belief) <= tol
}

/// Beliefs with one state's mass at `10^(-k/2)` for `k = 7..=60`, the rest
/// spread as on a coarse grid. Lower-contour differences can hide in such
/// layers, far thinner than any uniform grid spacing.
fn boundary_layer(dim: usize, resolution: usize) -> Result<Vec<Belief>> {
    let base: Vec<Vec<f64>> = if dim == 2 {
        vec![vec![1.0]]
    } else {
        simplex_grid_capped(dim - 1, resolution.min(50), DEFAULT_GRID_CAP)?
            .into_iter()
            .map(Belief::into_inner)
            .collect()
    };
    let mut layer = Vec::with_capacity(base.len() * dim * 54);
    for k in 7..=60 {
        let eps = 10f64.powf(-(k as f64) / 2.0);
        for s in 0..dim {
            for rest in &base {
                let mut probs: Vec<f64> = rest.iter().map(|v| v * (1.0 - eps)).collect();
                probs.insert(s, eps);
                layer.push(Belief::new(probs)?);
            }
        }
    }
    Ok(layer)
}

/// Brute-force lower-contour comparison over every grid belief, plus a
/// logarithmically refined layer along each face.
pub struct ContourOracle {
    grid: Vec<Belief>,
    acts: Vec<crate::portfolio::UtilityAct>,
    market: MarketSpec,
    utility: UtilityIndex,
    band: f64,
}

impl ContourOracle {
    pub fn new(dim: usize, resolution: usize, market: MarketSpec, utility: UtilityIndex, band: f64) -> Result<Self> {
        if market.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: market.dim(),
                found: dim,
            });
        }
        let mut grid = simplex_grid_capped(dim, resolution, DEFAULT_GRID_CAP)?;
        grid.extend(boundary_layer(dim, resolution)?);
        let tol = Tolerance::default();
        let acts = grid
            .par_iter()
            .map(|q| utility_act(q, &market, &utility, &tol))
            .collect::<Result<Vec<_>>>()?;
        Ok(ContourOracle {
            grid,
            acts,
            market,
            utility,
            band,
        })
    }

    pub fn dim(&self) -> usize {
        self.grid[0].dim()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// A grid belief that `belief` ranks at or below `aggregate` while
    /// `new_belief` ranks it strictly above, if any.
    pub fn find_violation(&self, aggregate: &Belief, belief: &Belief, new_belief: &Belief) -> Result<Option<Belief>> {
        let old_base = expected_utility(belief, aggregate, &self.market, &self.utility)?;
        let new_base = expected_utility(new_belief, aggregate, &self.market, &self.utility)?;
        let hit = self.acts.par_iter().position_first(|act| {
            act.expected(belief) <= old_base
                && compare_utilities(act.expected(new_belief), new_base, self.band) == Preference::Strict1
        });
        Ok(hit.map(|k| self.grid[k].clone()))
    }

    pub fn includes(&self, aggregate: &Belief, belief: &Belief, new_belief: &Belief) -> Result<bool> {
        Ok(self.find_violation(aggregate, belief, new_belief)?.is_none())
    }
}

/// Draws cross-validated against the contour oracle in [`check_monotonicity`].
pub const CONTOUR_CROSS_CHECKS: usize = 3;

/// Monotonicity through its equivalent form: beliefs moved towards the
/// aggregate keep the old lower contour sets inside the new ones, so the
/// aggregate must not change. With an oracle, the first few moved profiles
/// are also checked against brute-force contour comparison.
pub fn check_monotonicity(
    rule: &AggregationRule,
    draws: &[MixingDraw],
    oracle: Option<&ContourOracle>,
    tol: &Tolerance,
) -> Result<AxiomReport> {
    if draws.is_empty() {
        return Ok(AxiomReport::empty(Axiom::Monotonicity));
    }
    if let Some(oracle) = oracle {
        for draw in draws.iter().take(CONTOUR_CROSS_CHECKS) {
            if draw.profile.dim() != oracle.dim() {
                continue;
            }
            let f = aggregate(rule, &draw.profile, tol)?;
            let moved = move_towards(&draw.profile, &f, &draw.lambdas)?;
            for (p, pt) in draw.profile.iter().zip(moved.iter()) {
                if !oracle.includes(&f, p, pt)? {
                    return Ok(AxiomReport {
                        axiom: Axiom::Monotonicity,
                        verdict: Verdict::Inconclusive,
                        counterexample: None,
                        samples: draws.len(),
                        note: "contour oracle disagrees with the segment criterion".into(),
                    });
                }
            }
        }
    }
    Ok(match first_failure(draws, |d| aggregate_moved(rule, d, tol))? {
        Some(ce) => AxiomReport::fail(Axiom::Monotonicity, draws.len(), ce),
        None => AxiomReport::pass(
            Axiom::Monotonicity,
            draws.len(),
            format!("no violation in {} draws at tolerance {:e}", draws.len(), tol.abs_tol),
        ),
    })
}

/// All agents but at most one hold `consensus`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VetoDraw {
    pub consensus: Belief,
    pub dissenter: Belief,
    pub agents: usize,
}

fn veto_failure(rule: &AggregationRule, draw: &VetoDraw, tol: &Tolerance) -> Result<Option<Counterexample>> {
    if draw.agents < 2 {
        return Err(Error::invalid("no veto power needs at least two agents"));
    }
    let unanimous = BeliefProfile::unanimous(&draw.consensus, draw.agents)?;
    let mut profiles = vec![unanimous.clone()];
    for i in 0..draw.agents {
        profiles.push(unanimous.with_replaced(i, draw.dissenter.clone())?);
    }
    for profile in profiles {
        let f = aggregate(rule, &profile, tol)?;
        let gap = f.linf_distance(&draw.consensus);
        if gap > tol.abs_tol {
            return Ok(Some(Counterexample::NoVetoPower {
                profile,
                consensus: draw.consensus.clone(),
                aggregate: f,
                gap,
            }));
        }
    }
    Ok(None)
}

/// Tests the unanimous profile and every placement of the dissenter.
pub fn check_no_veto_power(rule: &AggregationRule, draws: &[VetoDraw], tol: &Tolerance) -> Result<AxiomReport> {
    if draws.is_empty() {
        return Ok(AxiomReport::empty(Axiom::NoVetoPower));
    }
    Ok(match first_failure(draws, |d| veto_failure(rule, d, tol))? {
        Some(ce) => AxiomReport::fail(Axiom::NoVetoPower, draws.len(), ce),
        None => AxiomReport::pass(Axiom::NoVetoPower, draws.len(), format!("no violation in {} draws", draws.len())),
    })
}

fn best_deviation(
    rule: &AggregationRule,
    profile: &BeliefProfile,
    deviations: &[Belief],
    market: &MarketSpec,
    utility: &UtilityIndex,
    tol: &Tolerance,
) -> Result<Option<Counterexample>> {
    let f = aggregate(rule, profile, tol)?;
    let mut best: Option<Counterexample> = None;
    let mut best_gain = tol.abs_tol;
    for (i, truth) in profile.iter().enumerate() {
        let honest = expected_utility(truth, &f, market, utility)?;
        for q in deviations {
            let g = aggregate(rule, &profile.with_replaced(i, q.clone())?, tol)?;
            let gain = utility_gain(expected_utility(truth, &g, market, utility)?, honest);
            if gain > best_gain {
                best_gain = gain;
                best = Some(Counterexample::StrategyProofness {
                    profile: profile.clone(),
                    agent: i,
                    deviation: q.clone(),
                    aggregate: f.clone(),
                    deviated_aggregate: g,
                    gain,
                });
            }
        }
    }
    Ok(best)
}

/// Tries every grid belief as a unilateral misreport; fails on the largest
/// strict gain found in the first profile that has one.
pub fn check_strategy_proofness(
    rule: &AggregationRule,
    profiles: &[BeliefProfile],
    resolution: usize,
    market: &MarketSpec,
    utility: &UtilityIndex,
    tol: &Tolerance,
) -> Result<AxiomReport> {
    let Some(first) = profiles.first() else {
        return Ok(AxiomReport::empty(Axiom::StrategyProofness));
    };
    let deviations = simplex_grid_capped(first.dim(), resolution, DEFAULT_GRID_CAP)?;
    Ok(
        match first_failure(profiles, |p| best_deviation(rule, p, &deviations, market, utility, tol))? {
            Some(ce) => AxiomReport::fail(Axiom::StrategyProofness, profiles.len(), ce),
            None => AxiomReport::pass(
                Axiom::StrategyProofness,
                profiles.len(),
                format!("no violation found at resolution {resolution}"),
            ),
        },
    )
}

/// The set `B` of condition μ.
#[derive(Debug, Clone)]
pub enum BaseSet {
    /// The whole simplex; its maximal element for a belief is the belief itself.
    Simplex,
    Finite(Vec<Belief>),
}

impl BaseSet {
    fn maximal(&self, belief: &Belief, market: &MarketSpec, utility: &UtilityIndex, band: f64) -> Result<Vec<Belief>> {
        match self {
            BaseSet::Simplex => Ok(vec![belief.clone()]),
            BaseSet::Finite(set) => maximal_elements(set, belief, market, utility, band),
        }
    }
}

/// The elements of `set` within `band` of the best for `belief`.
pub fn maximal_elements(
    set: &[Belief],
    belief: &Belief,
    market: &MarketSpec,
    utility: &UtilityIndex,
    band: f64,
) -> Result<Vec<Belief>> {
    let values = set
        .iter()
        .map(|q| expected_utility(belief, q, market, utility))
        .collect::<Result<Vec<_>>>()?;
    let best = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(set
        .iter()
        .zip(&values)
        .filter(|(_, &v)| compare_utilities(v, best, band) != Preference::Strict2)
        .map(|(q, _)| q.clone())
        .collect())
}

/// Per-agent opportunity sets `C_i(p)` for condition μ.
pub trait OpportunitySets: Send + Sync {
    /// A finite stand-in for `C_i(profile)`.
    fn elements(&self, profile: &BeliefProfile, agent: usize) -> Result<Vec<Belief>>;

    /// Maximal elements of `C_i(profile)` for `belief`.
    fn maximal(
        &self,
        profile: &BeliefProfile,
        agent: usize,
        belief: &Belief,
        market: &MarketSpec,
        utility: &UtilityIndex,
        band: f64,
    ) -> Result<Vec<Belief>> {
        maximal_elements(&self.elements(profile, agent)?, belief, market, utility, band)
    }
}

/// The same set for every profile and agent.
#[derive(Debug, Clone)]
pub struct FixedSets(pub Vec<Belief>);

impl OpportunitySets for FixedSets {
    fn elements(&self, _: &BeliefProfile, _: usize) -> Result<Vec<Belief>> {
        Ok(self.0.clone())
    }
}

/// Aggregates agent `i` can reach in the equal-weight log-pool game when
/// everyone else plays their equilibrium report: `(r + sum_{j != i} r_j(p)) / n`.
#[derive(Debug, Clone)]
pub struct EquilibriumReportSets {
    /// Grid resolution for agent `i`'s own report when enumerating.
    pub resolution: usize,
    pub tol: Tolerance,
}

impl EquilibriumReportSets {
    fn others(&self, profile: &BeliefProfile, agent: usize) -> Result<(Vec<f64>, Belief)> {
        let (reports, _) = nash_from_parimutuel(profile, &self.tol)?;
        let n = profile.len() as f64;
        let others = (0..profile.dim())
            .map(|s| {
                (0..profile.len())
                    .filter(|&j| j != agent)
                    .map(|j| reports.get(j).get(s))
                    .sum::<f64>()
                    / n
            })
            .collect();
        Ok((others, reports.get(agent).clone()))
    }
}

impl OpportunitySets for EquilibriumReportSets {
    fn elements(&self, profile: &BeliefProfile, agent: usize) -> Result<Vec<Belief>> {
        let (others, own) = self.others(profile, agent)?;
        let n = profile.len() as f64;
        let mut own_reports = simplex_grid_capped(profile.dim(), self.resolution, DEFAULT_GRID_CAP)?;
        own_reports.push(own);
        own_reports
            .iter()
            .map(|r| Belief::new(others.iter().zip(r.probs()).map(|(c, x)| c + x / n).collect()))
            .collect()
    }

    fn maximal(
        &self,
        profile: &BeliefProfile,
        agent: usize,
        belief: &Belief,
        market: &MarketSpec,
        utility: &UtilityIndex,
        band: f64,
    ) -> Result<Vec<Belief>> {
        if !utility.is_log() {
            return maximal_elements(&self.elements(profile, agent)?, belief, market, utility, band);
        }
        let (others, _) = self.others(profile, agent)?;
        let n = profile.len() as f64;
        let best = water_fill(belief, &others, 1.0 / n)?;
        Ok(vec![Belief::new(
            others.iter().zip(best.probs()).map(|(c, x)| c + x / n).collect(),
        )?])
    }
}

/// A pair of profiles `(p, p~)` for condition μ.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MuPair {
    pub profile: BeliefProfile,
    pub other: BeliefProfile,
}

fn contains(set: &[Belief], x: &Belief, tol: f64) -> bool {
    set.iter().any(|q| q.approx_eq(x, tol))
}

#[allow(clippy::too_many_arguments)]
fn mu_failure(
    rule: &AggregationRule,
    base: &BaseSet,
    sets: &dyn OpportunitySets,
    pair: &MuPair,
    market: &MarketSpec,
    utility: &UtilityIndex,
    tol: &Tolerance,
) -> Result<Option<Counterexample>> {
    let (p, pt) = (&pair.profile, &pair.other);
    let n = p.len();
    if n < 2 || pt.len() != n || pt.dim() != p.dim() {
        return Err(Error::invalid("condition μ needs two profiles of the same shape with at least two agents"));
    }
    let band = tol.abs_tol;
    let f = aggregate(rule, p, tol)?;
    let ft = aggregate(rule, pt, tol)?;
    let fail = |clause, agent, expected: &Belief, found: &Belief| {
        Some(Counterexample::ConditionMu {
            clause,
            profile: p.clone(),
            other_profile: pt.clone(),
            agent,
            expected: expected.clone(),
            found: found.clone(),
        })
    };

    for i in 0..n {
        let own = sets.maximal(p, i, p.get(i), market, utility, band)?;
        if !contains(&own, &f, tol.abs_tol) {
            return Ok(fail(MuClause::Membership, Some(i), &f, &own[0]));
        }
    }

    let moved: Vec<Vec<Belief>> = (0..n)
        .map(|i| sets.maximal(p, i, pt.get(i), market, utility, band))
        .collect::<Result<_>>()?;
    if moved.iter().all(|m| contains(m, &f, tol.abs_tol)) && !ft.approx_eq(&f, tol.abs_tol) {
        return Ok(fail(MuClause::First, None, &f, &ft));
    }

    let base_max: Vec<Vec<Belief>> = pt
        .iter()
        .map(|b| base.maximal(b, market, utility, band))
        .collect::<Result<_>>()?;
    for (i, moved_i) in moved.iter().enumerate() {
        for q in moved_i {
            let everyone_else = (0..n).filter(|&j| j != i).all(|j| contains(&base_max[j], q, tol.abs_tol));
            if everyone_else && !ft.approx_eq(q, tol.abs_tol) {
                return Ok(fail(MuClause::Second, Some(i), q, &ft));
            }
        }
    }

    for q in &base_max[0] {
        if base_max[1..].iter().all(|m| contains(m, q, tol.abs_tol)) && !ft.approx_eq(q, tol.abs_tol) {
            return Ok(fail(MuClause::Third, None, q, &ft));
        }
    }
    Ok(None)
}

/// Checks that the aggregate is maximal in each opportunity set and clauses
/// (i)-(iii) over the sampled pairs; the counterexample names the clause.
pub fn check_condition_mu(
    rule: &AggregationRule,
    base: &BaseSet,
    sets: &dyn OpportunitySets,
    pairs: &[MuPair],
    market: &MarketSpec,
    utility: &UtilityIndex,
    tol: &Tolerance,
) -> Result<AxiomReport> {
    if pairs.is_empty() {
        return Ok(AxiomReport::empty(Axiom::ConditionMu));
    }
    Ok(
        match first_failure(pairs, |pair| mu_failure(rule, base, sets, pair, market, utility, tol))? {
            Some(ce) => AxiomReport::fail(Axiom::ConditionMu, pairs.len(), ce),
            None => AxiomReport::pass(Axiom::ConditionMu, pairs.len(), format!("no violation in {} pairs", pairs.len())),
        },
    )
}

impl Counterexample {
    /// Re-evaluates the counterexample; `Fail` means it still violates the axiom.
    /// Condition μ counterexamples need the opportunity sets, see
    /// [`replay_condition_mu`].
    pub fn replay(&self, rule: &AggregationRule, market: &MarketSpec, utility: &UtilityIndex, tol: &Tolerance) -> Result<Verdict> {
        let failed = match self {
            Counterexample::AggregateMoved { profile, lambdas, .. } => {
                let draw = MixingDraw {
                    profile: profile.clone(),
                    lambdas: lambdas.clone(),
                };
                aggregate_moved(rule, &draw, tol)?.is_some()
            }
            Counterexample::NoVetoPower { profile, consensus, .. } => {
                aggregate(rule, profile, tol)?.linf_distance(consensus) > tol.abs_tol
            }
            Counterexample::StrategyProofness { profile, deviation, .. } => {
                best_deviation(rule, profile, std::slice::from_ref(deviation), market, utility, tol)?.is_some()
            }
            Counterexample::ConditionMu { .. } => {
                return Err(Error::invalid("condition μ counterexamples replay through replay_condition_mu"));
            }
        };
        Ok(if failed { Verdict::Fail } else { Verdict::Pass })
    }
}

pub fn replay_condition_mu(
    ce: &Counterexample,
    rule: &AggregationRule,
    base: &BaseSet,
    sets: &dyn OpportunitySets,
    market: &MarketSpec,
    utility: &UtilityIndex,
    tol: &Tolerance,
) -> Result<Verdict> {
    let Counterexample::ConditionMu { profile, other_profile, .. } = ce else {
        return Err(Error::invalid("not a condition μ counterexample"));
    };
    let pair = MuPair {
        profile: profile.clone(),
        other: other_profile.clone(),
    };
    Ok(if mu_failure(rule, base, sets, &pair, market, utility, tol)?.is_some() {
        Verdict::Fail
    } else {
        Verdict::Pass
    })
}

/// Random profiles with `agents_range` agents over `dim` states, each with one
/// vector of mixing weights; about one weight in five is exactly 0 or 1.
pub fn sample_mixing_draws<R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    agents: std::ops::RangeInclusive<usize>,
    dim: usize,
) -> Result<Vec<MixingDraw>> {
    (0..count)
        .map(|_| {
            let n = rng.random_range(agents.clone());
            let profile = random_profile(rng, n, dim)?;
            let lambdas = (0..n)
                .map(|_| match rng.random_range(0..10) {
                    0 => 0.0,
                    1 => 1.0,
                    _ => random_lambda(rng),
                })
                .collect();
            Ok(MixingDraw { profile, lambdas })
        })
        .collect()
}

pub fn sample_veto_draws<R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    agents: std::ops::RangeInclusive<usize>,
    dim: usize,
) -> Result<Vec<VetoDraw>> {
    (0..count)
        .map(|_| {
            Ok(VetoDraw {
                consensus: random_belief(rng, dim)?,
                dissenter: random_belief(rng, dim)?,
                agents: rng.random_range(agents.clone()),
            })
        })
        .collect()
}

/// Grid-valued profile pairs cycling through independent, all-but-one-agree,
/// unanimous and identical second profiles, plus moves towards the aggregate
/// of `rule` (which leave the grid).
pub fn sample_mu_pairs<R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    agents: usize,
    dim: usize,
    resolution: usize,
    rule: &AggregationRule,
    tol: &Tolerance,
) -> Result<Vec<MuPair>> {
    let grid = simplex_grid_capped(dim, resolution, DEFAULT_GRID_CAP)?;
    let pick = |rng: &mut R| grid[rng.random_range(0..grid.len())].clone();
    let grid_profile = |rng: &mut R| BeliefProfile::new((0..agents).map(|_| pick(rng)).collect());
    let mut pairs = Vec::with_capacity(count);
    for k in 0..count {
        let profile = grid_profile(rng)?;
        let other = match k % 5 {
            0 => grid_profile(rng)?,
            1 | 3 => {
                let consensus = BeliefProfile::unanimous(&pick(rng), agents)?;
                let dissenter = rng.random_range(0..agents);
                let moved = consensus.with_replaced(dissenter, pick(rng))?;
                if k % 5 == 3 {
                    pairs.push(MuPair {
                        profile: moved.clone(),
                        other: moved,
                    });
                    continue;
                }
                moved
            }
            2 => BeliefProfile::unanimous(&pick(rng), agents)?,
            _ => {
                let f = aggregate(rule, &profile, tol)?;
                let lambdas: Vec<f64> = (0..agents).map(|_| random_lambda(rng)).collect();
                move_towards(&profile, &f, &lambdas)?
            }
        };
        pairs.push(MuPair { profile, other });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::CustomRule;
    use crate::sampling::{random_interior_belief, seeded_rng};

    fn tol(abs: f64) -> Tolerance {
        Tolerance::default().with_abs_tol(abs)
    }

    fn b2(p: f64) -> Belief {
        Belief::two_state(p).unwrap()
    }

    #[test]
    fn zero_mixing_always_invariant() {
        let mut rng = seeded_rng(1);
        let mut draws = sample_mixing_draws(&mut rng, 20, 2..=4, 3).unwrap();
        for d in &mut draws {
            d.lambdas.iter_mut().for_each(|l| *l = 0.0);
        }
        for rule in [AggregationRule::symmetric_pool(), AggregationRule::ParimutuelPrice] {
            let r = check_recursive_invariance(&rule, &draws, &tol(1e-12)).unwrap();
            assert_eq!(r.verdict, Verdict::Pass);
        }
    }

    #[test]
    fn linear_pool_fails_invariance_with_replayable_counterexample() {
        let draw = MixingDraw {
            profile: BeliefProfile::two_state(&[0.2, 0.9]).unwrap(),
            lambdas: vec![1.0, 0.0],
        };
        let rule = AggregationRule::symmetric_pool();
        let r = check_recursive_invariance(&rule, &[draw], &tol(1e-5)).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        let ce = r.counterexample.unwrap();
        match &ce {
            Counterexample::AggregateMoved {
                moved_profile,
                moved_aggregate,
                ..
            } => {
                assert!((moved_profile.get(0).get(0) - 0.55).abs() < 1e-15);
                assert!((moved_aggregate.get(0) - 0.725).abs() < 1e-15);
            }
            other => panic!("{other:?}"),
        }
        let m = MarketSpec::uniform(2);
        assert_eq!(ce.replay(&rule, &m, &UtilityIndex::Log, &tol(1e-5)).unwrap(), Verdict::Fail);
    }

    #[test]
    fn invariant_rules_pass() {
        let mut rng = seeded_rng(2);
        let draws = sample_mixing_draws(&mut rng, 60, 1..=5, 3).unwrap();
        let r = check_recursive_invariance(&AggregationRule::ParimutuelPrice, &draws, &tol(1e-5)).unwrap();
        assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
        let odd: Vec<MixingDraw> = draws.into_iter().filter(|d| d.profile.len() % 2 == 1).collect();
        let r = check_recursive_invariance(&AggregationRule::GeometricMedian, &odd, &tol(1e-5)).unwrap();
        assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
    }

    #[test]
    fn segment_criterion_examples() {
        let p = b2(0.2);
        let f = b2(0.6);
        assert!(lower_contour_subset(&f, &p, &p, 1e-12));
        assert!(lower_contour_subset(&f, &p, &f, 1e-12));
        assert!(lower_contour_subset(&f, &p, &b2(0.4), 1e-12));
        assert!(!lower_contour_subset(&f, &p, &b2(0.8), 1e-12));
        let p3 = Belief::new(vec![0.2, 0.3, 0.5]).unwrap();
        let f3 = Belief::new(vec![0.4, 0.4, 0.2]).unwrap();
        let mid = p3.mix(&f3, 0.3).unwrap();
        assert!(lower_contour_subset(&f3, &p3, &mid, 1e-12));
        let off = Belief::new(vec![0.3, 0.3, 0.4]).unwrap();
        assert!(!lower_contour_subset(&f3, &p3, &off, 1e-9));
    }

    #[test]
    fn contour_oracle_finds_violation_off_segment() {
        let oracle = ContourOracle::new(2, 1000, MarketSpec::uniform(2), UtilityIndex::Log, 1e-9).unwrap();
        let (p, f) = (b2(0.2), b2(0.6));
        assert!(oracle.find_violation(&f, &p, &b2(0.8)).unwrap().is_some());
        assert!(oracle.includes(&f, &p, &b2(0.45)).unwrap());
        assert!(oracle.includes(&f, &p, &p).unwrap());
        assert!(oracle.includes(&f, &p, &f).unwrap());
    }

    #[test]
    fn segment_and_oracle_agree_in_three_states() {
        let oracle = ContourOracle::new(3, 200, MarketSpec::uniform(3), UtilityIndex::Log, 1e-9).unwrap();
        let mut rng = seeded_rng(9);
        for k in 0..10 {
            let p = random_interior_belief(&mut rng, 3, 0.02).unwrap();
            let f = random_interior_belief(&mut rng, 3, 0.02).unwrap();
            let pt = if k % 2 == 0 {
                p.mix(&f, random_lambda(&mut rng)).unwrap()
            } else {
                // Near-segment beliefs violate only on slivers finer than any grid.
                loop {
                    let b = random_interior_belief(&mut rng, 3, 0.02).unwrap();
                    if segment_distance(&f, &p, &b) >= 0.05 {
                        break b;
                    }
                }
            };
            assert_eq!(lower_contour_subset(&f, &p, &pt, 1e-9), oracle.includes(&f, &p, &pt).unwrap(), "draw {k}");
        }
    }

    #[test]
    fn monotonicity_verdicts() {
        let mut rng = seeded_rng(4);
        let draws = sample_mixing_draws(&mut rng, 30, 3..=3, 2).unwrap();
        let oracle = ContourOracle::new(2, 1000, MarketSpec::uniform(2), UtilityIndex::Log, 1e-9).unwrap();
        let t = tol(1e-6);
        let r = check_monotonicity(&AggregationRule::ParimutuelPrice, &draws, Some(&oracle), &t).unwrap();
        assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
        let r = check_monotonicity(&AggregationRule::symmetric_pool(), &draws, Some(&oracle), &t).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        let dictator = AggregationRule::Custom(CustomRule::dictatorship(0));
        let r = check_monotonicity(&dictator, &draws, Some(&oracle), &t).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
    }

    #[test]
    fn veto_power_examples() {
        let draw = VetoDraw {
            consensus: b2(0.05),
            dissenter: b2(0.08),
            agents: 3,
        };
        let t = tol(1e-9);
        let r = check_no_veto_power(&AggregationRule::ParimutuelPrice, std::slice::from_ref(&draw), &t).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        match r.counterexample.as_ref().unwrap() {
            Counterexample::NoVetoPower { aggregate, .. } => assert!((aggregate.get(0) - 0.08).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
        let m = MarketSpec::uniform(2);
        let ce = r.counterexample.unwrap();
        assert_eq!(ce.replay(&AggregationRule::ParimutuelPrice, &m, &UtilityIndex::Log, &t).unwrap(), Verdict::Fail);

        let mut rng = seeded_rng(5);
        let draws: Vec<VetoDraw> = sample_veto_draws(&mut rng, 30, 3..=5, 3)
            .unwrap()
            .into_iter()
            .map(|mut d| {
                d.agents |= 1;
                d
            })
            .collect();
        let r = check_no_veto_power(&AggregationRule::GeometricMedian, &draws, &t).unwrap();
        assert_eq!(r.verdict, Verdict::Pass, "{r:?}");

        // Unanimity alone holds for all three named rules.
        let unanimous: Vec<VetoDraw> = draws.iter().map(|d| VetoDraw { dissenter: d.consensus.clone(), ..d.clone() }).collect();
        for rule in [AggregationRule::symmetric_pool(), AggregationRule::ParimutuelPrice, AggregationRule::GeometricMedian] {
            assert_eq!(check_no_veto_power(&rule, &unanimous, &t).unwrap().verdict, Verdict::Pass);
        }
    }

    #[test]
    fn strategy_proofness_verdicts() {
        let m = MarketSpec::uniform(2);
        let t = tol(1e-9);
        let profiles = vec![BeliefProfile::two_state(&[0.3, 0.4]).unwrap()];
        let pool = AggregationRule::symmetric_pool();
        let r = check_strategy_proofness(&pool, &profiles, 20, &m, &UtilityIndex::Log, &t).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        let ce = r.counterexample.clone().unwrap();
        assert_eq!(ce.replay(&pool, &m, &UtilityIndex::Log, &t).unwrap(), Verdict::Fail);
        // Agent b gains by moving to 0.5, which pulls the aggregate onto its truth.
        let toward_half = best_deviation(&pool, &profiles[0], &[b2(0.5)], &m, &UtilityIndex::Log, &t).unwrap();
        match toward_half.unwrap() {
            Counterexample::StrategyProofness { agent, deviated_aggregate, gain, .. } => {
                assert_eq!(agent, 1);
                assert!((deviated_aggregate.get(0) - 0.4).abs() < 1e-15);
                let expected = (0.4 * 0.4f64.ln() + 0.6 * 0.6f64.ln()) - (0.4 * 0.35f64.ln() + 0.6 * 0.65f64.ln());
                assert!((gain - expected).abs() < 1e-14);
            }
            other => panic!("{other:?}"),
        }

        let mut rng = seeded_rng(6);
        let profiles: Vec<BeliefProfile> = (0..5).map(|_| random_profile(&mut rng, 3, 2).unwrap()).collect();
        for rule in [
            AggregationRule::Custom(CustomRule::dictatorship(0)),
            AggregationRule::Custom(CustomRule::constant(b2(0.3))),
        ] {
            let r = check_strategy_proofness(&rule, &profiles, 20, &m, &UtilityIndex::Log, &t).unwrap();
            assert_eq!(r.verdict, Verdict::Pass, "{}", rule.name());
        }
    }

    #[test]
    fn condition_mu_for_parimutuel_prices() {
        let rule = AggregationRule::ParimutuelPrice;
        let t = tol(1e-7);
        let sets = EquilibriumReportSets { resolution: 50, tol: t };
        let mut rng = seeded_rng(7);
        let pairs = sample_mu_pairs(&mut rng, 60, 3, 2, 50, &rule, &t).unwrap();
        let m = MarketSpec::uniform(2);
        let r = check_condition_mu(&rule, &BaseSet::Simplex, &sets, &pairs, &m, &UtilityIndex::Log, &t).unwrap();
        assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
    }

    #[test]
    fn second_clause_presumption_at_the_boundary() {
        // All but agent 0 at p = 0.3 <= 1/3, agent 0 at 0.1 below p.
        let profile = BeliefProfile::two_state(&[0.1, 0.3, 0.3]).unwrap();
        let t = tol(1e-7);
        let sets = EquilibriumReportSets { resolution: 50, tol: t };
        let m = MarketSpec::uniform(2);
        let own = sets.maximal(&profile, 0, profile.get(0), &m, &UtilityIndex::Log, 1e-9).unwrap();
        assert!(own[0].approx_eq(&b2(0.3), 1e-9));
        let enumerated = sets.elements(&profile, 0).unwrap();
        let by_grid = maximal_elements(&enumerated, profile.get(0), &m, &UtilityIndex::Log, 1e-9).unwrap();
        assert!(contains(&by_grid, &own[0], 1e-9));
        let pair = MuPair {
            profile: profile.clone(),
            other: profile,
        };
        let r = check_condition_mu(&AggregationRule::ParimutuelPrice, &BaseSet::Simplex, &sets, &[pair], &m, &UtilityIndex::Log, &t).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
    }

    #[test]
    fn constant_rule_fails_third_clause() {
        let c = b2(0.3);
        let rule = AggregationRule::Custom(CustomRule::constant(c.clone()));
        let grid = simplex_grid_capped(2, 10, DEFAULT_GRID_CAP).unwrap();
        let base = BaseSet::Finite(grid);
        let sets = FixedSets(vec![c]);
        let t = tol(1e-9);
        let m = MarketSpec::uniform(2);
        let mut rng = seeded_rng(8);
        let pairs = sample_mu_pairs(&mut rng, 20, 3, 2, 10, &rule, &t).unwrap();
        let r = check_condition_mu(&rule, &base, &sets, &pairs, &m, &UtilityIndex::Log, &t).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        let ce = r.counterexample.unwrap();
        assert!(matches!(ce, Counterexample::ConditionMu { clause: MuClause::Third, .. }));
        assert_eq!(replay_condition_mu(&ce, &rule, &base, &sets, &m, &UtilityIndex::Log, &t).unwrap(), Verdict::Fail);
    }

    #[test]
    fn reports_are_deterministic() {
        let run = || {
            let mut rng = seeded_rng(10);
            let draws = sample_mixing_draws(&mut rng, 40, 2..=4, 3).unwrap();
            check_recursive_invariance(&AggregationRule::symmetric_pool(), &draws, &tol(1e-6)).unwrap()
        };
        assert_eq!(run(), run());
    }
}
