//! Canonical game form implementing a monotonic rule with no veto power,
//! plus a finite-grid audit of its consensus-truth equilibrium.
//!
//! Every agent announces a whole belief profile and an integer. Unanimous
//! announcements are aggregated directly; a single dissenter gets their
//! announced aggregate only if it is no better, under the consensus belief
//! attributed to them, than the consensus aggregate; anything else goes to
//! the agent announcing the largest integer.

use rayon::prelude::*;
use serde::Serialize;

use crate::aggregation::{aggregate, AggregationRule};
use crate::belief::{simplex_grid_capped, Belief, BeliefProfile, Tolerance, DEFAULT_GRID_CAP};
use crate::error::{Error, Result};
use crate::portfolio::{compare_utilities, expected_utility, utility_gain, MarketSpec, Preference, UtilityIndex};

pub const DEFAULT_INTEGER_CAP: u64 = 1_000_000;

/// Deviations per agent below which an audit warns that its grid is too coarse.
pub const DEFAULT_DEVIATION_FLOOR: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Message {
    announced: BeliefProfile,
    integer: u64,
}

impl Message {
    pub fn new(announced: BeliefProfile, integer: u64, cap: u64) -> Result<Self> {
        if integer > cap {
            return Err(Error::invalid(format!("integer {integer} exceeds the cap {cap}")));
        }
        Ok(Message { announced, integer })
    }

    pub fn announced(&self) -> &BeliefProfile {
        &self.announced
    }

    pub fn integer(&self) -> u64 {
        self.integer
    }
}

/// Which clause of the outcome function produced the result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FiredRule {
    Unanimous,
    DeviationAccepted { dissenter: usize },
    DeviationRejected { dissenter: usize },
    IntegerGame { winner: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutcomeTrace {
    pub aggregate: Belief,
    pub rule: FiredRule,
}

impl OutcomeTrace {
    pub fn winner(&self) -> Option<usize> {
        match self.rule {
            FiredRule::IntegerGame { winner } => Some(winner),
            _ => None,
        }
    }
}

fn validate_messages(messages: &[Message]) -> Result<()> {
    let n = messages.len();
    if n < 3 {
        return Err(Error::invalid(format!("the game form needs at least 3 agents, got {n}")));
    }
    let dim = messages[0].announced.dim();
    for m in messages {
        if m.announced.len() != n {
            return Err(Error::invalid(format!(
                "announced profile has {} agents, expected {n}",
                m.announced.len()
            )));
        }
        if m.announced.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: m.announced.dim(),
            });
        }
    }
    Ok(())
}

/// The profile announced by all but at most one agent, with the dissenter.
fn consensus(messages: &[Message]) -> Option<(&BeliefProfile, Option<usize>)> {
    // with n >= 3 any profile shared by n - 1 agents is announced by agent 0 or 1
    for candidate in [&messages[0].announced, &messages[1].announced] {
        let dissenters: Vec<usize> = (0..messages.len())
            .filter(|&j| messages[j].announced != *candidate)
            .collect();
        match dissenters.as_slice() {
            [] => return Some((candidate, None)),
            [i] => return Some((candidate, Some(*i))),
            _ => {}
        }
    }
    None
}

/// Outcome of the game form. Weak preference uses `tol.abs_tol` as the
/// indifference band.
pub fn outcome_g(
    messages: &[Message],
    rule: &AggregationRule,
    market: &MarketSpec,
    utility: &UtilityIndex,
    tol: &Tolerance,
) -> Result<OutcomeTrace> {
    validate_messages(messages)?;
    match consensus(messages) {
        Some((shared, None)) => Ok(OutcomeTrace {
            aggregate: aggregate(rule, shared, tol)?,
            rule: FiredRule::Unanimous,
        }),
        Some((shared, Some(i))) => {
            let kept = aggregate(rule, shared, tol)?;
            let proposed = aggregate(rule, &messages[i].announced, tol)?;
            let a = expected_utility(shared.get(i), &kept, market, utility)?;
            let b = expected_utility(shared.get(i), &proposed, market, utility)?;
            Ok(match compare_utilities(a, b, tol.abs_tol) {
                Preference::Strict1 | Preference::Indifferent => OutcomeTrace {
                    aggregate: proposed,
                    rule: FiredRule::DeviationAccepted { dissenter: i },
                },
                Preference::Strict2 => OutcomeTrace {
                    aggregate: kept,
                    rule: FiredRule::DeviationRejected { dissenter: i },
                },
            })
        }
        None => {
            // highest integer wins, ties go to the lowest index
            let winner = (0..messages.len())
                .max_by_key(|&j| (messages[j].integer, std::cmp::Reverse(j)))
                .expect("at least 3 messages");
            Ok(OutcomeTrace {
                aggregate: aggregate(rule, &messages[winner].announced, tol)?,
                rule: FiredRule::IntegerGame { winner },
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditSettings {
    /// Grid resolution for the replacement beliefs in deviating announcements.
    pub resolution: usize,
    pub integer_cap: u64,
    /// Integer every agent announces in the audited message profile.
    pub consensus_integer: u64,
    pub deviation_floor: usize,
}

impl Default for AuditSettings {
    fn default() -> Self {
        AuditSettings {
            resolution: 20,
            integer_cap: DEFAULT_INTEGER_CAP,
            consensus_integer: 1,
            deviation_floor: DEFAULT_DEVIATION_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AuditWarning {
    GridTooCoarse { deviations: usize, floor: usize },
    /// Implementation needs a surjective rule; the audit still checks that
    /// consensus truth is an equilibrium.
    NotSurjective,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditDeviation {
    pub agent: usize,
    pub announced: BeliefProfile,
    pub integer: u64,
    pub rule: FiredRule,
    pub aggregate: Belief,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MechanismAudit {
    /// Aggregate of the truthful consensus.
    pub outcome: Belief,
    /// Best gain found for each agent.
    pub gains: Vec<f64>,
    pub max_gain: f64,
    pub best_deviation: Option<AuditDeviation>,
    /// Deviating messages tried per agent.
    pub deviations_per_agent: usize,
    pub warnings: Vec<AuditWarning>,
    pub is_equilibrium: bool,
}

/// Checks that every agent announcing the true profile is a Nash
/// equilibrium of the game form against unilateral deviations. Deviating
/// announcements replace one entry of the true profile with a grid belief;
/// deviating integers are 0, the consensus integer and the cap.
pub fn audit_truthful_equilibrium(
    truths: &BeliefProfile,
    rule: &AggregationRule,
    market: &MarketSpec,
    utility: &UtilityIndex,
    settings: &AuditSettings,
    tol: &Tolerance,
) -> Result<MechanismAudit> {
    let n = truths.len();
    if n < 3 {
        return Err(Error::invalid(format!("the game form needs at least 3 agents, got {n}")));
    }
    if settings.consensus_integer > settings.integer_cap {
        return Err(Error::invalid("consensus integer exceeds the integer cap"));
    }
    let mut warnings = Vec::new();
    if !rule.is_surjective() {
        warnings.push(AuditWarning::NotSurjective);
    }
    let grid = simplex_grid_capped(truths.dim(), settings.resolution, DEFAULT_GRID_CAP)?;
    let mut integers = vec![0, settings.consensus_integer, settings.integer_cap];
    integers.dedup();
    let announcements: Vec<BeliefProfile> = (0..n)
        .flat_map(|j| grid.iter().map(move |g| (j, g)))
        .map(|(j, g)| truths.with_replaced(j, g.clone()))
        .collect::<Result<_>>()?;
    let per_agent = announcements.len() * integers.len();
    if per_agent < settings.deviation_floor {
        warnings.push(AuditWarning::GridTooCoarse {
            deviations: per_agent,
            floor: settings.deviation_floor,
        });
    }

    let truthful = Message::new(truths.clone(), settings.consensus_integer, settings.integer_cap)?;
    let outcome = aggregate(rule, truths, tol)?;
    let baseline: Vec<f64> = (0..n)
        .map(|i| expected_utility(truths.get(i), &outcome, market, utility))
        .collect::<Result<_>>()?;

    let integers = &integers;
    let cases: Vec<(usize, &BeliefProfile, u64)> = (0..n)
        .flat_map(|i| announcements.iter().flat_map(move |a| integers.iter().map(move |&k| (i, a, k))))
        .collect();
    let evaluated: Vec<Result<AuditDeviation>> = cases
        .par_iter()
        .map(|&(i, announced, integer)| {
            let mut messages = vec![truthful.clone(); n];
            messages[i] = Message::new(announced.clone(), integer, settings.integer_cap)?;
            let trace = outcome_g(&messages, rule, market, utility, tol)?;
            let value = expected_utility(truths.get(i), &trace.aggregate, market, utility)?;
            Ok(AuditDeviation {
                agent: i,
                announced: announced.clone(),
                integer,
                rule: trace.rule,
                aggregate: trace.aggregate,
                gain: utility_gain(value, baseline[i]),
            })
        })
        .collect();

    let mut gains = vec![f64::NEG_INFINITY; n];
    let mut best: Option<AuditDeviation> = None;
    for deviation in evaluated {
        let deviation = deviation?;
        let i = deviation.agent;
        gains[i] = gains[i].max(deviation.gain);
        if best.as_ref().is_none_or(|b| deviation.gain > b.gain) {
            best = Some(deviation);
        }
    }
    let max_gain = gains.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(MechanismAudit {
        outcome,
        gains,
        max_gain,
        best_deviation: best,
        deviations_per_agent: per_agent,
        warnings,
        is_equilibrium: max_gain <= tol.abs_tol,
    })
}
