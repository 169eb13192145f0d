//! Equal-wealth parimutuel equilibria of the linear betting market.
//!
//! Each agent has nominal wealth `1/n` and linear (risk-neutral) utility
//! `x -> p_i . x`; one unit of every state-contingent good is for sale.
//! Prices are found with proportional-response dynamics on bids, which
//! ascend the Eisenberg-Gale objective. Degenerate instances (an agent
//! exactly indifferent at the equilibrium price) make those dynamics
//! sublinear, so every few rounds the solver guesses the set of
//! maximum bang-per-buck edges from the current prices, rebuilds the
//! equilibrium those edges imply, and keeps it only if it verifies.

use serde::Serialize;

use crate::belief::{Belief, BeliefProfile, Tolerance};
use crate::error::{Error, Result};

/// Proportional-response rounds between attempts at exact support recovery.
const REFINE_EVERY: usize = 20;

/// Relative bang-per-buck gaps tried when guessing equality edges.
const EDGE_TOLERANCES: [f64; 8] = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-9, 1e-11];

/// Residual an exactly reconstructed equilibrium must meet to be accepted.
const EXACT_ACCEPT: f64 = 1e-11;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParimutuelEquilibrium {
    pub price: Belief,
    /// `allocation[i][s]`: units of state-`s` consumption held by agent `i`.
    pub allocation: Vec<Vec<f64>>,
    /// Per-agent multipliers with `p_is <= lambda_i * price_s`, tight where agent `i` holds state `s`.
    pub multipliers: Vec<f64>,
    pub foc_residual: f64,
    pub iterations: usize,
}

impl ParimutuelEquilibrium {
    /// Money agent `i` stakes on state `s`: `price_s * x_is`.
    pub fn bids(&self) -> Vec<Vec<f64>> {
        self.allocation
            .iter()
            .map(|row| row.iter().zip(self.price.probs()).map(|(x, r)| x * r).collect())
            .collect()
    }
}

/// Largest violation of each equilibrium condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FocReport {
    /// `|p_is - lambda_i rho_s|` over held states.
    pub stationarity: f64,
    /// `max(0, p_is - lambda_i rho_s)` over all states.
    pub slackness: f64,
    /// `|rho . x_i - 1/n|`.
    pub budget: f64,
    /// `|sum_i x_is - 1|`.
    pub clearing: f64,
    /// Most negative holding, reported as a positive number.
    pub negativity: f64,
    pub tolerance: f64,
}

impl FocReport {
    pub fn max_residual(&self) -> f64 {
        self.stationarity
            .max(self.slackness)
            .max(self.budget)
            .max(self.clearing)
            .max(self.negativity)
    }

    pub fn passes(&self) -> bool {
        self.max_residual() <= self.tolerance
    }
}

/// Checks the equilibrium conditions of `eq` against the agents' beliefs.
/// Stationarity is enforced on holdings above `tol.abs_tol`.
pub fn verify_foc(eq: &ParimutuelEquilibrium, profile: &BeliefProfile, tol: &Tolerance) -> Result<FocReport> {
    let n = profile.len();
    let dim = profile.dim();
    if eq.allocation.len() != n || eq.multipliers.len() != n || eq.price.dim() != dim {
        return Err(Error::invalid("equilibrium and profile shapes disagree"));
    }
    if let Some(row) = eq.allocation.iter().find(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: row.len(),
        });
    }
    Ok(foc_report(profile, eq.price.probs(), &eq.allocation, &eq.multipliers, tol.abs_tol))
}

fn foc_report(profile: &BeliefProfile, price: &[f64], allocation: &[Vec<f64>], multipliers: &[f64], tol: f64) -> FocReport {
    let n = profile.len();
    let wealth = 1.0 / n as f64;
    let mut report = FocReport {
        stationarity: 0.0,
        slackness: 0.0,
        budget: 0.0,
        clearing: 0.0,
        negativity: 0.0,
        tolerance: tol,
    };
    for (i, belief) in profile.iter().enumerate() {
        let lambda = multipliers[i];
        let row = &allocation[i];
        let mut spend = 0.0;
        for s in 0..price.len() {
            let gap = belief.get(s) - lambda * price[s];
            if row[s] > tol {
                report.stationarity = report.stationarity.max(gap.abs());
            }
            report.slackness = report.slackness.max(gap);
            report.negativity = report.negativity.max(-row[s]);
            spend += price[s] * row[s];
        }
        report.budget = report.budget.max((spend - wealth).abs());
    }
    for s in 0..price.len() {
        let total: f64 = allocation.iter().map(|row| row[s]).sum();
        report.clearing = report.clearing.max((total - 1.0).abs());
    }
    report
}

/// Eisenberg-Gale objective `sum_i (1/n) ln(p_i . x_i)`.
pub fn eisenberg_gale_objective(profile: &BeliefProfile, allocation: &[Vec<f64>]) -> f64 {
    let n = profile.len() as f64;
    profile
        .iter()
        .zip(allocation)
        .map(|(p, x)| p.probs().iter().zip(x).map(|(a, b)| a * b).sum::<f64>().ln() / n)
        .sum()
}

fn dead_state(profile: &BeliefProfile) -> Option<usize> {
    (0..profile.dim()).find(|&s| profile.iter().all(|b| b.get(s) == 0.0))
}

/// Proportional-response dynamics on bids, exposed so callers can inspect the iterates.
#[derive(Debug, Clone)]
pub struct ProportionalResponse<'a> {
    profile: &'a BeliefProfile,
    bids: Vec<Vec<f64>>,
    prices: Vec<f64>,
    last_change: Vec<f64>,
    damped_steps: usize,
}

impl<'a> ProportionalResponse<'a> {
    /// Starts from bids proportional to beliefs.
    pub fn new(profile: &'a BeliefProfile) -> Result<Self> {
        if let Some(s) = dead_state(profile) {
            return Err(Error::DeadState(s));
        }
        let wealth = 1.0 / profile.len() as f64;
        let bids: Vec<Vec<f64>> = profile.iter().map(|b| b.probs().iter().map(|p| p * wealth).collect()).collect();
        let prices = column_sums(&bids);
        Ok(ProportionalResponse {
            profile,
            bids,
            last_change: vec![0.0; prices.len()],
            prices,
            damped_steps: 0,
        })
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    pub fn bids(&self) -> &[Vec<f64>] {
        &self.bids
    }

    pub fn damped_steps(&self) -> usize {
        self.damped_steps
    }

    pub fn allocation(&self) -> Vec<Vec<f64>> {
        allocation_from_bids(&self.bids, &self.prices)
    }

    pub fn objective(&self) -> f64 {
        eisenberg_gale_objective(self.profile, &self.allocation())
    }

    /// One bid update; returns the L∞ change in prices.
    pub fn step(&mut self) -> f64 {
        let wealth = 1.0 / self.profile.len() as f64;
        let alloc = self.allocation();
        let mut next: Vec<Vec<f64>> = self
            .profile
            .iter()
            .zip(&alloc)
            .map(|(p, x)| {
                let gains: Vec<f64> = p.probs().iter().zip(x).map(|(a, b)| a * b).collect();
                let total: f64 = gains.iter().sum();
                gains.into_iter().map(|g| wealth * g / total).collect()
            })
            .collect();
        let mut prices = column_sums(&next);
        let change: Vec<f64> = prices.iter().zip(&self.prices).map(|(a, b)| a - b).collect();
        let reversal: f64 = change.iter().zip(&self.last_change).map(|(a, b)| a * b).sum();
        if reversal < 0.0 {
            // Direction flipped: take half a step.
            for (row, old) in next.iter_mut().zip(&self.bids) {
                for (b, o) in row.iter_mut().zip(old) {
                    *b = 0.5 * *b + 0.5 * o;
                }
            }
            prices = column_sums(&next);
            self.damped_steps += 1;
        }
        let moved: Vec<f64> = prices.iter().zip(&self.prices).map(|(a, b)| a - b).collect();
        let linf = moved.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        self.last_change = moved;
        self.bids = next;
        self.prices = prices;
        linf
    }
}

fn column_sums(rows: &[Vec<f64>]) -> Vec<f64> {
    let dim = rows[0].len();
    (0..dim).map(|s| rows.iter().map(|r| r[s]).sum()).collect()
}

fn bids_from_hint(hint: &[Vec<f64>], edges: &[Vec<usize>], prices: &[f64], budget: f64) -> Option<Vec<Vec<f64>>> {
    let mut bids = vec![vec![0.0; prices.len()]; hint.len()];
    for (i, es) in edges.iter().enumerate() {
        let total: f64 = es.iter().map(|&s| hint[i][s]).sum();
        if total <= 0.0 {
            return None;
        }
        for &s in es {
            bids[i][s] = hint[i][s] * budget / total;
        }
    }
    for (s, &price) in prices.iter().enumerate() {
        let spent: f64 = bids.iter().map(|b| b[s]).sum();
        if (spent - price).abs() > 1e-13 {
            return None;
        }
    }
    Some(bids)
}

fn allocation_from_bids(bids: &[Vec<f64>], prices: &[f64]) -> Vec<Vec<f64>> {
    bids.iter()
        .map(|row| row.iter().zip(prices).map(|(b, r)| if *r > 0.0 { b / r } else { 0.0 }).collect())
        .collect()
}

/// Multipliers `lambda_i = max_s p_is / rho_s` (maximum bang per buck).
pub(crate) fn bang_per_buck(profile: &BeliefProfile, prices: &[f64]) -> Vec<f64> {
    profile
        .iter()
        .map(|p| {
            p.probs()
                .iter()
                .zip(prices)
                .filter(|(a, _)| **a > 0.0)
                .map(|(a, r)| a / r)
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Computes the equal-wealth parimutuel equilibrium of the agents' beliefs.
pub fn solve_parimutuel(profile: &BeliefProfile, tol: &Tolerance) -> Result<ParimutuelEquilibrium> {
    tol.validate()?;
    let mut dynamics = ProportionalResponse::new(profile)?;
    let mut last_residual = f64::INFINITY;
    for iter in 0..tol.max_iter {
        let change = dynamics.step();
        let converged = change < tol.abs_tol;
        if converged || (iter + 1) % REFINE_EVERY == 0 || iter == 0 {
            if let Some(eq) = recover_exact(profile, dynamics.prices(), dynamics.bids(), tol, iter + 1) {
                return Ok(eq);
            }
        }
        if converged {
            let prices = dynamics.prices().to_vec();
            let allocation = dynamics.allocation();
            let multipliers = bang_per_buck(profile, &prices);
            let report = foc_report(profile, &prices, &allocation, &multipliers, tol.abs_tol);
            last_residual = report.max_residual();
            if report.passes() {
                return Ok(ParimutuelEquilibrium {
                    price: Belief::new(prices)?,
                    allocation,
                    multipliers,
                    foc_residual: last_residual,
                    iterations: iter + 1,
                });
            }
        }
    }
    Err(Error::NoConvergence {
        solver: "proportional response",
        iterations: tol.max_iter,
        residual: last_residual,
    })
}

/// Rebuilds an exact equilibrium from the equality edges suggested by
/// `approx_prices`, trying progressively tighter edge tolerances.
fn recover_exact(profile: &BeliefProfile, approx_prices: &[f64], hint: &[Vec<f64>], tol: &Tolerance, iterations: usize) -> Option<ParimutuelEquilibrium> {
    let lambdas = bang_per_buck(profile, approx_prices);
    for &delta in &EDGE_TOLERANCES {
        let edges: Vec<Vec<usize>> = profile
            .iter()
            .zip(&lambdas)
            .map(|(p, &lam)| {
                (0..p.dim())
                    .filter(|&s| p.get(s) > 0.0 && p.get(s) / approx_prices[s] >= lam * (1.0 - delta))
                    .collect()
            })
            .collect();
        if let Some(eq) = equilibrium_on_edges(profile, &edges, hint, tol, iterations) {
            return Some(eq);
        }
    }
    recover_by_prefixes(profile, approx_prices, &lambdas, hint, tol, iterations)
}

/// Relative ratio gap below which an agent's states count as near-ties.
const AMBIGUOUS_GAP: f64 = 1e-2;
/// Largest number of demand-set combinations tried in one recovery.
const MAX_COMBINATIONS: usize = 256;

/// Near-degenerate profiles: an agent's demand set is a prefix of its states
/// sorted by bang per buck, so try every prefix length between the clear
/// winners and the near-ties.
fn recover_by_prefixes(
    profile: &BeliefProfile,
    approx_prices: &[f64],
    lambdas: &[f64],
    hint: &[Vec<f64>],
    tol: &Tolerance,
    iterations: usize,
) -> Option<ParimutuelEquilibrium> {
    let mut orders = Vec::with_capacity(profile.len());
    let mut ranges = Vec::with_capacity(profile.len());
    let mut combos = 1usize;
    for (p, &lam) in profile.iter().zip(lambdas) {
        let mut order: Vec<usize> = (0..p.dim()).filter(|&s| p.get(s) > 0.0).collect();
        let ratio = |s: usize| p.get(s) / approx_prices[s];
        order.sort_by(|&a, &b| ratio(b).total_cmp(&ratio(a)));
        let lo = order.iter().filter(|&&s| ratio(s) >= lam * (1.0 - 1e-11)).count().max(1);
        let hi = order.iter().filter(|&&s| ratio(s) >= lam * (1.0 - AMBIGUOUS_GAP)).count();
        combos = combos.saturating_mul(hi - lo + 1);
        orders.push(order);
        ranges.push((lo, hi));
    }
    if combos <= 1 || combos > MAX_COMBINATIONS {
        return None;
    }
    let mut lengths: Vec<usize> = ranges.iter().map(|r| r.0).collect();
    loop {
        let edges: Vec<Vec<usize>> = orders.iter().zip(&lengths).map(|(o, &k)| o[..k].to_vec()).collect();
        if let Some(eq) = equilibrium_on_edges(profile, &edges, hint, tol, iterations) {
            return Some(eq);
        }
        let mut pos = 0;
        loop {
            if pos == lengths.len() {
                return None;
            }
            if lengths[pos] < ranges[pos].1 {
                lengths[pos] += 1;
                break;
            }
            lengths[pos] = ranges[pos].0;
            pos += 1;
        }
    }
}

fn equilibrium_on_edges(
    profile: &BeliefProfile,
    edges: &[Vec<usize>],
    hint: &[Vec<f64>],
    tol: &Tolerance,
    iterations: usize,
) -> Option<ParimutuelEquilibrium> {
    let n = profile.len();
    let dim = profile.dim();
    let mut state_agents: Vec<Vec<usize>> = vec![Vec::new(); dim];
    for (i, es) in edges.iter().enumerate() {
        for &s in es {
            state_agents[s].push(i);
        }
    }
    if state_agents.iter().any(|a| a.is_empty()) {
        return None;
    }

    // Relative prices along each connected component: rho_s = p_is / lambda_i on edges.
    let mut rel = vec![f64::NAN; dim];
    let mut agent_scale = vec![f64::NAN; n];
    let mut prices = vec![0.0; dim];
    for root in 0..dim {
        if !rel[root].is_nan() {
            continue;
        }
        rel[root] = 1.0;
        let mut comp_states = vec![root];
        let mut comp_agents = Vec::new();
        let mut queue = vec![root];
        while let Some(s) = queue.pop() {
            for &i in &state_agents[s] {
                if !agent_scale[i].is_nan() {
                    continue;
                }
                // rho_t / p_it is constant over agent i's edges.
                agent_scale[i] = rel[s] / profile.get(i).get(s);
                comp_agents.push(i);
                for &t in &edges[i] {
                    let implied = agent_scale[i] * profile.get(i).get(t);
                    if rel[t].is_nan() {
                        rel[t] = implied;
                        comp_states.push(t);
                        queue.push(t);
                    } else if (rel[t] - implied).abs() > 1e-12 * rel[t].max(implied) {
                        return None;
                    }
                }
            }
        }
        let total: f64 = comp_states.iter().map(|&s| rel[s]).sum();
        let budget = comp_agents.len() as f64 / n as f64;
        for &s in &comp_states {
            prices[s] = rel[s] * budget / total;
        }
    }

    let multipliers = bang_per_buck(profile, &prices);
    for (i, es) in edges.iter().enumerate() {
        for &s in es {
            let ratio = profile.get(i).get(s) / prices[s];
            if (ratio - multipliers[i]).abs() > 1e-12 * multipliers[i] {
                return None;
            }
        }
    }

    // Allocations need not be unique; keep the dynamics' bids when they already clear.
    let bids = match bids_from_hint(hint, edges, &prices, 1.0 / n as f64) {
        Some(b) => b,
        None => flow::feasible_bids(edges, &prices, 1.0 / n as f64)?,
    };
    let allocation = allocation_from_bids(&bids, &prices);
    let report = foc_report(profile, &prices, &allocation, &multipliers, tol.abs_tol);
    if report.max_residual() > EXACT_ACCEPT {
        return None;
    }
    Some(ParimutuelEquilibrium {
        price: Belief::new(prices).ok()?,
        allocation,
        multipliers,
        foc_residual: report.max_residual(),
        iterations,
    })
}

mod flow {
    //! Max-flow on the bipartite bid graph: source -> agents (budget) ->
    //! states (along equality edges) -> sink (price).

    const EPS: f64 = 1e-15;

    pub(super) fn feasible_bids(edges: &[Vec<usize>], prices: &[f64], wealth: f64) -> Option<Vec<Vec<f64>>> {
        let n = edges.len();
        let dim = prices.len();
        let nodes = n + dim + 2;
        let (source, sink) = (n + dim, n + dim + 1);
        let mut cap = vec![vec![0.0f64; nodes]; nodes];
        for (i, es) in edges.iter().enumerate() {
            cap[source][i] = wealth;
            for &s in es {
                cap[i][n + s] = 2.0;
            }
        }
        for (s, &r) in prices.iter().enumerate() {
            cap[n + s][sink] = r;
        }
        let original = cap.clone();
        let mut total = 0.0;
        loop {
            let mut parent = vec![usize::MAX; nodes];
            parent[source] = source;
            let mut queue = std::collections::VecDeque::from([source]);
            while let Some(u) = queue.pop_front() {
                for v in 0..nodes {
                    if parent[v] == usize::MAX && cap[u][v] > EPS {
                        parent[v] = u;
                        queue.push_back(v);
                    }
                }
            }
            if parent[sink] == usize::MAX {
                break;
            }
            let mut push = f64::INFINITY;
            let mut v = sink;
            while v != source {
                let u = parent[v];
                push = push.min(cap[u][v]);
                v = u;
            }
            let mut v = sink;
            while v != source {
                let u = parent[v];
                cap[u][v] -= push;
                cap[v][u] += push;
                v = u;
            }
            total += push;
        }
        if (total - wealth * n as f64).abs() > 1e-12 {
            return None;
        }
        let mut bids = vec![vec![0.0; dim]; n];
        for (i, es) in edges.iter().enumerate() {
            for &s in es {
                bids[i][s] = (original[i][n + s] - cap[i][n + s]).max(0.0);
            }
        }
        Some(bids)
    }
}

/// Two-state parimutuel price of the first state: the median of the agents'
/// probabilities together with the phantoms `1/n, ..., (n-1)/n`.
pub fn phantom_median_price(first_state_probs: &[f64]) -> Result<f64> {
    let n = first_state_probs.len();
    if n == 0 {
        return Err(Error::invalid("phantom median needs at least one agent"));
    }
    if let Some(p) = first_state_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
    }
    let mut values: Vec<f64> = first_state_probs.to_vec();
    values.extend((1..n).map(|k| k as f64 / n as f64));
    values.sort_by(f64::total_cmp);
    Ok(values[n - 1])
}
