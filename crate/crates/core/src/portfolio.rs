//! The social portfolio problem: given an aggregate belief, choose the
//! state-contingent holdings that maximize expected utility on a linear
//! budget set, and the preferences over aggregate beliefs this induces.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::belief::{Belief, Tolerance};
use crate::error::{Error, Result};

/// Arrow-security prices and social wealth defining the budget set `{x >= 0 : prices . x = wealth}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSpec {
    prices: Vec<f64>,
    wealth: f64,
}

impl MarketSpec {
    pub fn new(prices: Vec<f64>, wealth: f64) -> Result<Self> {
        if prices.len() < 2 {
            return Err(Error::DimensionTooSmall(prices.len()));
        }
        if let Some((s, p)) = prices.iter().enumerate().find(|(_, p)| !(**p > 0.0 && p.is_finite())) {
            return Err(Error::invalid(format!("price of state {s} must be positive, got {p}")));
        }
        if !(wealth > 0.0 && wealth.is_finite()) {
            return Err(Error::invalid(format!("wealth must be positive, got {wealth}")));
        }
        Ok(MarketSpec { prices, wealth })
    }

    /// Unit prices and unit wealth: the budget set is itself the simplex.
    pub fn uniform(dim: usize) -> Self {
        MarketSpec {
            prices: vec![1.0; dim],
            wealth: 1.0,
        }
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    pub fn wealth(&self) -> f64 {
        self.wealth
    }

    pub fn dim(&self) -> usize {
        self.prices.len()
    }

    pub fn is_uniform(&self) -> bool {
        self.wealth == 1.0 && self.prices.iter().all(|&p| p == 1.0)
    }

    pub fn cost(&self, holdings: &[f64]) -> f64 {
        self.prices.iter().zip(holdings).map(|(p, x)| p * x).sum()
    }
}

/// A user-supplied vNM index. Must be strictly increasing and strictly
/// concave on the positive axis, with marginal utility diverging at zero
/// and vanishing at infinity.
pub trait CustomUtility: Send + Sync {
    fn name(&self) -> &str;
    fn value(&self, z: f64) -> f64;
    fn marginal(&self, z: f64) -> f64;
    fn inverse_marginal(&self, y: f64) -> f64;
}

/// Common risk attitude of society.
#[derive(Clone)]
pub enum UtilityIndex {
    Log,
    /// Constant relative risk aversion with coefficient `gamma` (> 0, != 1).
    Crra(f64),
    Custom(Arc<dyn CustomUtility>),
}

impl fmt::Debug for UtilityIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UtilityIndex::Log => write!(f, "Log"),
            UtilityIndex::Crra(g) => write!(f, "Crra({g})"),
            UtilityIndex::Custom(c) => write!(f, "Custom({})", c.name()),
        }
    }
}

impl UtilityIndex {
    pub fn crra(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) || gamma == 1.0 {
            return Err(Error::invalid(format!("CRRA coefficient must be positive and != 1, got {gamma}")));
        }
        Ok(UtilityIndex::Crra(gamma))
    }

    /// Wraps a custom index after spot-checking monotonicity, concavity and
    /// the limiting behaviour of marginal utility.
    pub fn custom(u: Arc<dyn CustomUtility>) -> Result<Self> {
        let probes = [1e-8, 1e-4, 1e-2, 1.0, 1e2, 1e4, 1e8];
        let marg: Vec<f64> = probes.iter().map(|&z| u.marginal(z)).collect();
        if marg.iter().any(|m| *m <= 0.0 || !m.is_finite()) {
            return Err(Error::invalid(format!("{}: marginal utility must be positive", u.name())));
        }
        if marg.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid(format!("{}: marginal utility must be decreasing", u.name())));
        }
        if marg[0] < 1e3 * marg[3] || marg[6] > 1e-3 * marg[3] {
            return Err(Error::invalid(format!(
                "{}: marginal utility must explode near 0 and vanish at infinity",
                u.name()
            )));
        }
        let vals: Vec<f64> = probes.iter().map(|&z| u.value(z)).collect();
        if vals.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!("{}: utility must be increasing", u.name())));
        }
        Ok(UtilityIndex::Custom(u))
    }

    pub fn value(&self, z: f64) -> f64 {
        match self {
            UtilityIndex::Log => z.ln(),
            UtilityIndex::Crra(g) => z.powf(1.0 - g) / (1.0 - g),
            UtilityIndex::Custom(u) => u.value(z),
        }
    }

    pub fn marginal(&self, z: f64) -> f64 {
        match self {
            UtilityIndex::Log => 1.0 / z,
            UtilityIndex::Crra(g) => z.powf(-g),
            UtilityIndex::Custom(u) => u.marginal(z),
        }
    }

    pub fn inverse_marginal(&self, y: f64) -> f64 {
        match self {
            UtilityIndex::Log => 1.0 / y,
            UtilityIndex::Crra(g) => y.powf(-1.0 / g),
            UtilityIndex::Custom(u) => u.inverse_marginal(y),
        }
    }

    pub fn is_log(&self) -> bool {
        matches!(self, UtilityIndex::Log)
    }
}

/// State-contingent holdings on the budget line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Portfolio {
    holdings: Vec<f64>,
}

impl Portfolio {
    /// Validates nonnegativity and budget feasibility within `rel_tol`.
    pub fn new(holdings: Vec<f64>, market: &MarketSpec, rel_tol: f64) -> Result<Self> {
        if holdings.len() != market.dim() {
            return Err(Error::DimensionMismatch {
                expected: market.dim(),
                found: holdings.len(),
            });
        }
        if let Some((s, x)) = holdings.iter().enumerate().find(|(_, x)| **x < 0.0 || !x.is_finite()) {
            return Err(Error::invalid(format!("holding at state {s} must be nonnegative, got {x}")));
        }
        let cost = market.cost(&holdings);
        if (cost - market.wealth()).abs() > rel_tol.max(1e-12) * market.wealth() {
            return Err(Error::invalid(format!(
                "portfolio costs {cost} but wealth is {}",
                market.wealth()
            )));
        }
        Ok(Portfolio { holdings })
    }

    pub fn holdings(&self) -> &[f64] {
        &self.holdings
    }
}

/// The vector `s -> u(x_s)` induced by a portfolio. Entries may be `-inf`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtilityAct(Vec<f64>);

impl UtilityAct {
    pub fn utilities(&self) -> &[f64] {
        &self.0
    }

    /// `sum_s p_s u_s` with the convention `0 * (-inf) = 0`.
    pub fn expected(&self, p: &Belief) -> f64 {
        p.probs()
            .iter()
            .zip(&self.0)
            .filter(|(&ps, _)| ps > 0.0)
            .map(|(ps, us)| ps * us)
            .sum()
    }
}

/// Outcome of comparing two aggregate beliefs from one agent's viewpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Preference {
    Strict1,
    Strict2,
    Indifferent,
}

/// Compares two extended-real utilities with an indifference band.
/// `-inf` ties `-inf` and loses to every finite value.
pub fn compare_utilities(a: f64, b: f64, band: f64) -> Preference {
    match (a == f64::NEG_INFINITY, b == f64::NEG_INFINITY) {
        (true, true) => Preference::Indifferent,
        (true, false) => Preference::Strict2,
        (false, true) => Preference::Strict1,
        (false, false) => {
            if a > b + band {
                Preference::Strict1
            } else if b > a + band {
                Preference::Strict2
            } else {
                Preference::Indifferent
            }
        }
    }
}

/// Extended-real difference `a - b` where `-inf - (-inf)` is 0.
pub fn utility_gain(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        a - b
    }
}

fn check_dims(q: &Belief, market: &MarketSpec) -> Result<()> {
    if q.dim() != market.dim() {
        return Err(Error::DimensionMismatch {
            expected: market.dim(),
            found: q.dim(),
        });
    }
    Ok(())
}

/// Expected-utility-maximizing portfolio on the budget line for belief `q`.
pub fn optimal_portfolio(q: &Belief, market: &MarketSpec, utility: &UtilityIndex, tol: &Tolerance) -> Result<Portfolio> {
    check_dims(q, market)?;
    let w = market.wealth();
    let holdings = match utility {
        UtilityIndex::Log => q.probs().iter().zip(market.prices()).map(|(qs, ps)| w * qs / ps).collect(),
        UtilityIndex::Crra(gamma) => {
            // x_s = k * (q_s / pi_s)^(1/gamma), with k fixed by the budget.
            let shape: Vec<f64> = q
                .probs()
                .iter()
                .zip(market.prices())
                .map(|(qs, ps)| if *qs > 0.0 { (qs / ps).powf(1.0 / gamma) } else { 0.0 })
                .collect();
            let scale = w / market.cost(&shape);
            shape.into_iter().map(|x| x * scale).collect()
        }
        UtilityIndex::Custom(_) => custom_holdings(q, market, utility, tol)?,
    };
    Ok(Portfolio { holdings })
}

fn holdings_at(lambda: f64, q: &Belief, market: &MarketSpec, utility: &UtilityIndex) -> Vec<f64> {
    q.probs()
        .iter()
        .zip(market.prices())
        .map(|(qs, ps)| {
            if *qs > 0.0 {
                utility.inverse_marginal(lambda * ps / qs)
            } else {
                0.0
            }
        })
        .collect()
}

fn custom_holdings(q: &Belief, market: &MarketSpec, utility: &UtilityIndex, tol: &Tolerance) -> Result<Vec<f64>> {
    let w = market.wealth();
    let spend = |lambda: f64| market.cost(&holdings_at(lambda, q, market, utility));
    // Spending is decreasing in the multiplier; bracket the budget root.
    let eps = 1e-12;
    let (mut lo, mut hi) = (eps, 1.0 / eps);
    let mut expansions = 0;
    while spend(lo) < w || spend(hi) > w {
        if spend(lo) < w {
            lo /= 2.0;
        }
        if spend(hi) > w {
            hi *= 2.0;
        }
        expansions += 1;
        if expansions > 2000 || lo == 0.0 || !hi.is_finite() {
            return Err(Error::NoConvergence {
                solver: "portfolio multiplier bracket",
                iterations: expansions,
                residual: f64::INFINITY,
            });
        }
    }
    let target = tol.rel_tol.max(1e-15) * w;
    for iter in 0..tol.max_iter {
        let mid = (lo * hi).sqrt();
        let gap = spend(mid) - w;
        if gap.abs() <= target || hi / lo - 1.0 < 1e-15 {
            return Ok(holdings_at(mid, q, market, utility));
        }
        if gap > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if iter + 1 == tol.max_iter {
            return Err(Error::NoConvergence {
                solver: "portfolio multiplier bisection",
                iterations: tol.max_iter,
                residual: gap.abs() / w,
            });
        }
    }
    unreachable!("max_iter >= 1 is validated")
}

/// Largest relative violation of the optimality conditions of `x` for belief `q`:
/// common multiplier dispersion on the support, stray holdings off it, and budget slack.
pub fn kkt_residual(q: &Belief, x: &Portfolio, market: &MarketSpec, utility: &UtilityIndex) -> f64 {
    let mut multipliers = Vec::new();
    let mut stray: f64 = 0.0;
    for ((qs, xs), ps) in q.probs().iter().zip(x.holdings()).zip(market.prices()) {
        if *qs > 0.0 {
            multipliers.push(utility.marginal(*xs) * qs / ps);
        } else {
            stray = stray.max(*xs);
        }
    }
    let mean = multipliers.iter().sum::<f64>() / multipliers.len() as f64;
    let dispersion = multipliers.iter().map(|l| (l - mean).abs() / mean).fold(0.0, f64::max);
    let budget = (market.cost(x.holdings()) - market.wealth()).abs() / market.wealth();
    dispersion.max(stray).max(budget)
}

/// Utility act of the optimal portfolio for `q`.
pub fn utility_act(q: &Belief, market: &MarketSpec, utility: &UtilityIndex, tol: &Tolerance) -> Result<UtilityAct> {
    let x = optimal_portfolio(q, market, utility, tol)?;
    Ok(UtilityAct(x.holdings.iter().map(|&z| utility.value(z)).collect()))
}

/// Utility an agent with belief `p` derives when society adopts `q`.
pub fn expected_utility(p: &Belief, q: &Belief, market: &MarketSpec, utility: &UtilityIndex) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: q.dim(),
            found: p.dim(),
        });
    }
    Ok(utility_act(q, market, utility, &Tolerance::default())?.expected(p))
}

/// Ranks aggregates `q1` and `q2` by the preference of an agent holding `p`.
pub fn prefers(
    p: &Belief,
    q1: &Belief,
    q2: &Belief,
    market: &MarketSpec,
    utility: &UtilityIndex,
    band: f64,
) -> Result<Preference> {
    let a = expected_utility(p, q1, market, utility)?;
    let b = expected_utility(p, q2, market, utility)?;
    Ok(compare_utilities(a, b, band))
}

/// The unique belief whose optimal portfolio is `x` (interior portfolios only).
pub fn belief_from_portfolio(x: &Portfolio, market: &MarketSpec, utility: &UtilityIndex) -> Result<Belief> {
    if x.holdings().len() != market.dim() {
        return Err(Error::DimensionMismatch {
            expected: market.dim(),
            found: x.holdings().len(),
        });
    }
    if let Some(s) = x.holdings().iter().position(|&h| h <= 0.0) {
        return Err(Error::BoundaryPortfolio(s));
    }
    // q_s u'(x_s) = lambda pi_s  =>  q_s proportional to pi_s / u'(x_s).
    let raw = x
        .holdings()
        .iter()
        .zip(market.prices())
        .map(|(xs, ps)| ps / utility.marginal(*xs))
        .collect();
    Belief::new(raw)
}
