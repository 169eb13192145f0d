//! Belief aggregation rules behind a single interface.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::belief::{simplex_grid_capped, simplex_grid_count, Belief, BeliefProfile, Tolerance};
use crate::error::{Error, Result};
use crate::parimutuel::{phantom_median_price, solve_parimutuel};

/// Upper bound on the number of profiles a tabulated rule may store.
pub const TABLE_CAP: usize = 1_000_000;

/// Weights of a linear opinion pool.
#[derive(Debug, Clone, PartialEq)]
pub enum PoolWeights {
    /// `1/n` for every agent.
    Equal,
    Explicit(Vec<f64>),
}

type RuleFn = dyn Fn(&BeliefProfile) -> Result<Belief> + Send + Sync;

/// A user-defined rule, either a closure or a table over a simplex grid.
#[derive(Clone)]
pub struct CustomRule {
    name: String,
    surjective: bool,
    body: CustomBody,
}

#[derive(Clone)]
enum CustomBody {
    Callable(Arc<RuleFn>),
    Tabulated(Arc<TabulatedRule>),
}

impl fmt::Debug for CustomRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomRule")
            .field("name", &self.name)
            .field("surjective", &self.surjective)
            .finish_non_exhaustive()
    }
}

impl CustomRule {
    /// Wraps a closure. `surjective` must be declared by the caller since it
    /// cannot be inferred.
    pub fn new<F>(name: impl Into<String>, surjective: bool, f: F) -> Self
    where
        F: Fn(&BeliefProfile) -> Result<Belief> + Send + Sync + 'static,
    {
        CustomRule {
            name: name.into(),
            surjective,
            body: CustomBody::Callable(Arc::new(f)),
        }
    }

    /// `f(p) = p_agent`.
    pub fn dictatorship(agent: usize) -> Self {
        CustomRule::new(format!("dictatorship-{agent}"), true, move |profile| {
            if agent >= profile.len() {
                return Err(Error::invalid(format!("dictator {agent} out of range")));
            }
            Ok(profile.get(agent).clone())
        })
    }

    /// Always returns `belief`.
    pub fn constant(belief: Belief) -> Self {
        CustomRule::new("constant", false, move |profile| {
            if profile.dim() != belief.dim() {
                return Err(Error::DimensionMismatch {
                    expected: belief.dim(),
                    found: profile.dim(),
                });
            }
            Ok(belief.clone())
        })
    }

    pub fn tabulated(name: impl Into<String>, surjective: bool, table: TabulatedRule) -> Self {
        CustomRule {
            name: name.into(),
            surjective,
            body: CustomBody::Tabulated(Arc::new(table)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn apply(&self, profile: &BeliefProfile) -> Result<Belief> {
        match &self.body {
            CustomBody::Callable(f) => f(profile),
            CustomBody::Tabulated(t) => t.lookup(profile),
        }
    }
}

/// A rule stored by value on every profile of grid beliefs; inputs are
/// snapped agent-wise to the nearest grid point.
#[derive(Debug, Clone)]
pub struct TabulatedRule {
    agents: usize,
    grid: Vec<Belief>,
    table: HashMap<Vec<usize>, Belief>,
}

impl TabulatedRule {
    /// Evaluates `f` on all `|grid|^agents` grid profiles.
    pub fn from_fn(dim: usize, resolution: usize, agents: usize, f: impl Fn(&BeliefProfile) -> Result<Belief>) -> Result<Self> {
        if agents == 0 {
            return Err(Error::invalid("tabulated rule needs at least one agent"));
        }
        let points = simplex_grid_count(dim, resolution);
        let count = points.saturating_pow(agents as u32);
        if count > TABLE_CAP as u128 {
            return Err(Error::SizeOverflow { count, cap: TABLE_CAP });
        }
        let grid = simplex_grid_capped(dim, resolution, TABLE_CAP)?;
        let mut table = HashMap::with_capacity(count as usize);
        let mut idx = vec![0usize; agents];
        loop {
            let profile = BeliefProfile::new(idx.iter().map(|&k| grid[k].clone()).collect())?;
            table.insert(idx.clone(), f(&profile)?);
            // Odometer increment over agent indices.
            let mut pos = 0;
            loop {
                if pos == agents {
                    return Ok(TabulatedRule { agents, grid, table });
                }
                idx[pos] += 1;
                if idx[pos] < grid.len() {
                    break;
                }
                idx[pos] = 0;
                pos += 1;
            }
        }
    }

    fn nearest(&self, b: &Belief) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (k, g) in self.grid.iter().enumerate() {
            let d = g.l2_distance(b);
            if d < best.0 {
                best = (d, k);
            }
        }
        best.1
    }

    pub fn lookup(&self, profile: &BeliefProfile) -> Result<Belief> {
        if profile.len() != self.agents {
            return Err(Error::invalid(format!(
                "table built for {} agents, profile has {}",
                self.agents,
                profile.len()
            )));
        }
        if profile.dim() != self.grid[0].dim() {
            return Err(Error::DimensionMismatch {
                expected: self.grid[0].dim(),
                found: profile.dim(),
            });
        }
        let key: Vec<usize> = profile.iter().map(|b| self.nearest(b)).collect();
        Ok(self.table[&key].clone())
    }
}

/// A total map from belief profiles to an aggregate belief.
#[derive(Debug, Clone)]
pub enum AggregationRule {
    LinearPool(PoolWeights),
    /// Minimizer of the summed Euclidean distance to the reports; odd `n` only.
    GeometricMedian,
    /// Equal-wealth parimutuel equilibrium prices.
    ParimutuelPrice,
    /// Two-state median of the reports and the phantoms `k/n`.
    PhantomMedian2State,
    Custom(CustomRule),
}

impl AggregationRule {
    pub fn linear_pool(weights: Vec<f64>) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| **w < 0.0 || !w.is_finite()) {
            return Err(Error::invalid(format!("pool weight {w} must be nonnegative")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("pool weights sum to {total}, not 1")));
        }
        Ok(AggregationRule::LinearPool(PoolWeights::Explicit(weights)))
    }

    pub fn symmetric_pool() -> Self {
        AggregationRule::LinearPool(PoolWeights::Equal)
    }

    pub fn name(&self) -> &str {
        match self {
            AggregationRule::LinearPool(PoolWeights::Equal) => "linear-pool",
            AggregationRule::LinearPool(PoolWeights::Explicit(_)) => "weighted-linear-pool",
            AggregationRule::GeometricMedian => "geometric-median",
            AggregationRule::ParimutuelPrice => "parimutuel",
            AggregationRule::PhantomMedian2State => "phantom-median",
            AggregationRule::Custom(c) => c.name(),
        }
    }

    /// Whether every belief is the aggregate of some profile.
    pub fn is_surjective(&self) -> bool {
        match self {
            AggregationRule::Custom(c) => c.surjective,
            _ => true,
        }
    }

    pub fn is_symmetric_pool(&self) -> bool {
        matches!(self, AggregationRule::LinearPool(PoolWeights::Equal))
    }

    /// Weight of `agent` in a linear pool over `n` agents, if this is one.
    pub fn pool_weight(&self, agent: usize, n: usize) -> Option<f64> {
        match self {
            AggregationRule::LinearPool(PoolWeights::Equal) => Some(1.0 / n as f64),
            AggregationRule::LinearPool(PoolWeights::Explicit(w)) => w.get(agent).copied(),
            _ => None,
        }
    }
}

/// Applies `rule` to `profile`.
pub fn aggregate(rule: &AggregationRule, profile: &BeliefProfile, tol: &Tolerance) -> Result<Belief> {
    match rule {
        AggregationRule::LinearPool(weights) => {
            let n = profile.len();
            let w: Vec<f64> = match weights {
                PoolWeights::Equal => vec![1.0 / n as f64; n],
                PoolWeights::Explicit(w) => {
                    if w.len() != n {
                        return Err(Error::invalid(format!("pool has {} weights for {n} agents", w.len())));
                    }
                    w.clone()
                }
            };
            let raw = (0..profile.dim())
                .map(|s| profile.iter().zip(&w).map(|(b, wi)| wi * b.get(s)).sum())
                .collect();
            Belief::new(raw)
        }
        AggregationRule::GeometricMedian => {
            if profile.len().is_multiple_of(2) {
                return Err(Error::EvenAgentsForMedian(profile.len()));
            }
            geometric_median(profile.beliefs(), tol)
        }
        AggregationRule::ParimutuelPrice => Ok(solve_parimutuel(profile, tol)?.price),
        AggregationRule::PhantomMedian2State => {
            if profile.dim() != 2 {
                return Err(Error::invalid(format!(
                    "phantom median is defined for two states, got {}",
                    profile.dim()
                )));
            }
            Belief::two_state(phantom_median_price(&profile.column(0))?)
        }
        AggregationRule::Custom(c) => {
            let out = c.apply(profile)?;
            if out.dim() != profile.dim() {
                return Err(Error::DimensionMismatch {
                    expected: profile.dim(),
                    found: out.dim(),
                });
            }
            Ok(out)
        }
    }
}

/// Equilibrium aggregate of the two-agent, two-state linear-pool game under
/// log utility: the median of the two first-state probabilities and 1/2.
pub fn example1_aggregate(p_a: f64, p_b: f64) -> f64 {
    let mut v = [p_a, p_b, 0.5];
    v.sort_by(f64::total_cmp);
    v[1]
}

/// Points closer than this are treated as coincident.
const COINCIDENT: f64 = 1e-12;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Sum of unit vectors from `y` towards every point not coincident with it,
/// and the number of points coincident with `y`.
fn pull_towards_others(points: &[Belief], y: &[f64]) -> (Vec<f64>, usize) {
    let mut pull = vec![0.0; y.len()];
    let mut multiplicity = 0;
    for p in points {
        let d = dist(p.probs(), y);
        if d <= COINCIDENT {
            multiplicity += 1;
            continue;
        }
        for (acc, (a, b)) in pull.iter_mut().zip(p.probs().iter().zip(y)) {
            *acc += (a - b) / d;
        }
    }
    (pull, multiplicity)
}

/// Weighted mean of the points not coincident with `y`, weights `1/|p - y|`.
fn weiszfeld_map(points: &[Belief], y: &[f64]) -> Vec<f64> {
    let mut num = vec![0.0; y.len()];
    let mut den = 0.0;
    for p in points {
        let d = dist(p.probs(), y);
        if d <= COINCIDENT {
            continue;
        }
        for (acc, a) in num.iter_mut().zip(p.probs()) {
            *acc += a / d;
        }
        den += 1.0 / d;
    }
    num.into_iter().map(|x| x / den).collect()
}

/// Weiszfeld steps below this size hand over to Newton refinement.
const HANDOFF_STEP: f64 = 1e-6;

/// Geometric median by Weiszfeld iteration finished with Newton steps.
///
/// A data point is the median exactly when the pull of the remaining points
/// does not exceed its multiplicity, so every data point is tested first.
/// Iterates that land on a data point are pushed off along the pull of the
/// other points (the Vardi-Zhang step). Weiszfeld crawls when the median
/// sits near a data point, so once its steps are small the result is
/// refined by damped Newton steps within the simplex and accepted on the
/// size of the gradient.
pub fn geometric_median(points: &[Belief], tol: &Tolerance) -> Result<Belief> {
    let first = points.first().ok_or_else(|| Error::invalid("geometric median of no points"))?;
    let dim = first.dim();
    for p in points {
        let (pull, multiplicity) = pull_towards_others(points, p.probs());
        if norm(&pull) <= multiplicity as f64 + 1e-12 {
            return Ok(p.clone());
        }
    }
    let n = points.len() as f64;
    let mut x: Vec<f64> = (0..dim).map(|s| points.iter().map(|p| p.get(s)).sum::<f64>() / n).collect();
    for _ in 0..tol.max_iter {
        let (pull, multiplicity) = pull_towards_others(points, &x);
        let target = weiszfeld_map(points, &x);
        let next: Vec<f64> = if multiplicity > 0 {
            let r = norm(&pull);
            let shrink = (multiplicity as f64 / r).min(1.0);
            target.iter().zip(&x).map(|(t, y)| (1.0 - shrink) * t + shrink * y).collect()
        } else {
            target
        };
        let step = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        x = next;
        if step < HANDOFF_STEP {
            break;
        }
    }
    newton_refine(points, &mut x);
    let accept = tol.abs_tol * n;
    let mut residual = linf(&tangent_gradient(points, &x));
    if residual > accept {
        // The median may hug a data point, where the objective is cone-shaped.
        let mut anchors: Vec<usize> = (0..points.len()).collect();
        anchors.sort_by(|&a, &b| dist(points[a].probs(), &x).total_cmp(&dist(points[b].probs(), &x)));
        for k in anchors {
            if let Some(y) = anchored_median(points, points[k].probs()) {
                let r = linf(&tangent_gradient(points, &y));
                if r < residual {
                    residual = r;
                    x = y;
                }
                if residual <= accept {
                    break;
                }
            }
        }
    }
    if residual > accept {
        return Err(Error::NoConvergence {
            solver: "geometric median",
            iterations: tol.max_iter,
            residual,
        });
    }
    Belief::new(x)
}

/// Gradient of the summed distance, projected onto the sum-zero subspace.
fn tangent_gradient(points: &[Belief], x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    for p in points {
        let d = dist(p.probs(), x);
        if d <= COINCIDENT {
            continue;
        }
        for (acc, (a, b)) in g.iter_mut().zip(x.iter().zip(p.probs())) {
            *acc += (a - b) / d;
        }
    }
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    g.iter().map(|v| v - mean).collect()
}

fn linf(v: &[f64]) -> f64 {
    v.iter().map(|g| g.abs()).fold(0.0, f64::max)
}

fn objective(points: &[Belief], x: &[f64]) -> f64 {
    points.iter().map(|p| dist(p.probs(), x)).sum()
}

/// Damped Newton on the summed distance in coordinates `y_k = x_k`,
/// `x_last = 1 - sum y`, keeping `x` in the simplex.
fn newton_refine(points: &[Belief], x: &mut Vec<f64>) {
    let dim = x.len();
    let m = dim - 1;
    for _ in 0..100 {
        let mut grad = vec![0.0; dim];
        let mut hess = vec![vec![0.0; dim]; dim];
        for p in points {
            let d = dist(p.probs(), x);
            if d <= COINCIDENT {
                return;
            }
            let u: Vec<f64> = x.iter().zip(p.probs()).map(|(a, b)| (a - b) / d).collect();
            for k in 0..dim {
                grad[k] += u[k];
                for l in 0..dim {
                    let eye = if k == l { 1.0 } else { 0.0 };
                    hess[k][l] += (eye - u[k] * u[l]) / d;
                }
            }
        }
        // Reduce to the free coordinates.
        let last = dim - 1;
        let mut a = vec![vec![0.0; m + 1]; m];
        for k in 0..m {
            for l in 0..m {
                a[k][l] = hess[k][l] - hess[k][last] - hess[last][l] + hess[last][last];
            }
            a[k][m] = -(grad[k] - grad[last]);
        }
        let Some(y) = solve_dense(a) else {
            return;
        };
        let mut delta: Vec<f64> = y.clone();
        delta.push(-y.iter().sum::<f64>());

        let current = objective(points, x);
        let current_grad = linf(&tangent_gradient(points, x));
        let mut t = 1.0;
        for (xi, di) in x.iter().zip(&delta) {
            if *di < 0.0 && xi + t * di < 0.0 {
                t = t.min(-xi / di);
            }
        }
        let mut accepted = false;
        while t > 1e-12 {
            let trial: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| (a + t * d).max(0.0)).collect();
            if points.iter().any(|p| dist(p.probs(), &trial) <= COINCIDENT) {
                t *= 0.5;
                continue;
            }
            // Near the optimum the objective stalls at rounding level; the
            // gradient still shrinks.
            let value = objective(points, &trial);
            let stalled = (value - current).abs() <= 4.0 * f64::EPSILON * current;
            if value < current || (stalled && linf(&tangent_gradient(points, &trial)) < current_grad) {
                let moved = trial.iter().zip(x.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                *x = trial;
                accepted = moved > 1e-16;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return;
        }
    }
}

/// Solves for a median close to the data point `anchor`, written as
/// `anchor + r e`: optimality asks that the pull of the other points equal
/// `multiplicity * e`. Alternates a bisection for `r` with `e` set to the
/// direction of the pull, which barely turns over such short distances.
fn anchored_median(points: &[Belief], anchor: &[f64]) -> Option<Vec<f64>> {
    let (pull, multiplicity) = pull_towards_others(points, anchor);
    let m = multiplicity as f64;
    let reach = points
        .iter()
        .map(|p| dist(p.probs(), anchor))
        .filter(|&d| d > COINCIDENT)
        .fold(f64::INFINITY, f64::min);
    let others: Vec<Belief> = points.iter().filter(|p| dist(p.probs(), anchor) > COINCIDENT).cloned().collect();
    let mut e: Vec<f64> = pull.iter().map(|v| v / norm(&pull)).collect();
    let along = |r: f64, e: &[f64]| -> Vec<f64> { anchor.iter().zip(e).map(|(a, d)| a + r * d).collect() };
    let radial = |r: f64, e: &[f64]| -> f64 {
        let (pull, _) = pull_towards_others(&others, &along(r, e));
        pull.iter().zip(e).map(|(a, b)| a * b).sum::<f64>() - m
    };
    let mut x = anchor.to_vec();
    for _ in 0..100 {
        if !e.iter().all(|v| v.is_finite()) || radial(0.0, &e) <= 0.0 || radial(reach, &e) >= 0.0 {
            return None;
        }
        let (mut lo, mut hi) = (0.0, reach);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if radial(mid, &e) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        x = along(0.5 * (lo + hi), &e);
        let (pull, _) = pull_towards_others(&others, &x);
        let next: Vec<f64> = pull.iter().map(|v| v / norm(&pull)).collect();
        let turn = next.iter().zip(&e).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        e = next;
        if turn < 1e-15 {
            break;
        }
    }
    x.iter().all(|&v| v >= -1e-12).then_some(x)
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve_dense(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let m = a.len();
    for col in 0..m {
        let pivot = (col..m).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        for row in col + 1..m {
            let (upper, lower) = a.split_at_mut(row);
            let factor = lower[0][col] / upper[col][col];
            for (x, y) in lower[0][col..=m].iter_mut().zip(&upper[col][col..=m]) {
                *x -= factor * y;
            }
        }
    }
    let mut y = vec![0.0; m];
    for row in (0..m).rev() {
        let tail: f64 = (row + 1..m).map(|k| a[row][k] * y[k]).sum();
        y[row] = (a[row][m] - tail) / a[row][row];
    }
    y.iter().all(|v| v.is_finite()).then_some(y)
}

/// Summed Euclidean distance from `y` to the points.
pub fn median_objective(points: &[Belief], y: &Belief) -> f64 {
    points.iter().map(|p| p.l2_distance(y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tol() -> Tolerance {
        Tolerance::default()
    }

    #[test]
    fn linear_pool_example() {
        let profile = BeliefProfile::two_state(&[0.2, 0.6]).unwrap();
        let q = aggregate(&AggregationRule::symmetric_pool(), &profile, &tol()).unwrap();
        assert!(q.approx_eq(&Belief::two_state(0.4).unwrap(), 1e-15));
        let weighted = AggregationRule::linear_pool(vec![0.25, 0.75]).unwrap();
        let q = aggregate(&weighted, &profile, &tol()).unwrap();
        assert!((q.get(0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pool_weight_validation() {
        assert!(AggregationRule::linear_pool(vec![0.5, 0.6]).is_err());
        assert!(AggregationRule::linear_pool(vec![1.5, -0.5]).is_err());
        let rule = AggregationRule::linear_pool(vec![0.5, 0.5]).unwrap();
        let three = BeliefProfile::two_state(&[0.1, 0.2, 0.3]).unwrap();
        assert!(aggregate(&rule, &three, &tol()).is_err());
    }

    #[test]
    fn unanimity_for_named_rules() {
        let p = Belief::new(vec![0.15, 0.35, 0.5]).unwrap();
        let profile = BeliefProfile::unanimous(&p, 3).unwrap();
        for rule in [AggregationRule::symmetric_pool(), AggregationRule::GeometricMedian, AggregationRule::ParimutuelPrice] {
            assert!(aggregate(&rule, &profile, &tol()).unwrap().approx_eq(&p, 1e-12), "{}", rule.name());
        }
    }

    #[test]
    fn geometric_median_two_state_is_coordinate_median() {
        let profile = BeliefProfile::two_state(&[0.1, 0.5, 0.9]).unwrap();
        let m = aggregate(&AggregationRule::GeometricMedian, &profile, &tol()).unwrap();
        // Oracle: grid minimization of the summed distance.
        let best = (0..=10_000)
            .map(|k| Belief::two_state(k as f64 / 10_000.0).unwrap())
            .min_by(|a, b| median_objective(profile.beliefs(), a).total_cmp(&median_objective(profile.beliefs(), b)))
            .unwrap();
        assert!((best.get(0) - 0.5).abs() < 1e-12);
        assert!((m.get(0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn geometric_median_fermat_point() {
        // Equilateral triangle inside the simplex: the median is its centroid.
        let pts = vec![
            Belief::new(vec![0.6, 0.2, 0.2]).unwrap(),
            Belief::new(vec![0.2, 0.6, 0.2]).unwrap(),
            Belief::new(vec![0.2, 0.2, 0.6]).unwrap(),
        ];
        let m = geometric_median(&pts, &tol()).unwrap();
        assert!(m.approx_eq(&Belief::uniform(3).unwrap(), 1e-9));
    }

    #[test]
    fn geometric_median_rejects_even_n() {
        let profile = BeliefProfile::two_state(&[0.1, 0.9]).unwrap();
        assert_eq!(aggregate(&AggregationRule::GeometricMedian, &profile, &tol()), Err(Error::EvenAgentsForMedian(2)));
    }

    #[test]
    fn geometric_median_matches_local_search_oracle() {
        // Compare against a brute-force search around the answer on a fine grid.
        let pts = vec![
            Belief::new(vec![0.7, 0.1, 0.2]).unwrap(),
            Belief::new(vec![0.1, 0.3, 0.6]).unwrap(),
            Belief::new(vec![0.3, 0.6, 0.1]).unwrap(),
            Belief::new(vec![0.2, 0.2, 0.6]).unwrap(),
            Belief::new(vec![0.5, 0.4, 0.1]).unwrap(),
        ];
        let m = geometric_median(&pts, &tol()).unwrap();
        let f = median_objective(&pts, &m);
        let h = 1e-3;
        for a in -20i32..=20 {
            for b in -20i32..=20 {
                let raw = vec![m.get(0) + a as f64 * h, m.get(1) + b as f64 * h, m.get(2) - (a + b) as f64 * h];
                if raw.iter().any(|&x| x < 0.0) {
                    continue;
                }
                let y = Belief::new(raw).unwrap();
                assert!(median_objective(&pts, &y) >= f - 1e-12);
            }
        }
    }

    #[test]
    fn parimutuel_rule_on_remark_instance() {
        let profile = BeliefProfile::from_rows(vec![vec![0.5, 0.5, 0.0], vec![0.0, 0.5, 0.5]]).unwrap();
        let q = aggregate(&AggregationRule::ParimutuelPrice, &profile, &tol()).unwrap();
        assert!(q.approx_eq(&Belief::uniform(3).unwrap(), 1e-12));
    }

    #[test]
    fn phantom_median_rule() {
        let profile = BeliefProfile::two_state(&[0.1, 0.2, 0.9]).unwrap();
        let q = aggregate(&AggregationRule::PhantomMedian2State, &profile, &tol()).unwrap();
        assert!((q.get(0) - 1.0 / 3.0).abs() < 1e-15);
        let three_state = BeliefProfile::from_rows(vec![vec![1.0, 1.0, 1.0]]).unwrap();
        assert!(aggregate(&AggregationRule::PhantomMedian2State, &three_state, &tol()).is_err());
    }

    #[test]
    fn example1_cases() {
        assert_eq!(example1_aggregate(0.3, 0.4), 0.4);
        assert_eq!(example1_aggregate(0.3, 0.8), 0.5);
        assert_eq!(example1_aggregate(0.7, 0.7), 0.7);
        assert_eq!(example1_aggregate(0.8, 0.6), 0.6);
    }

    #[test]
    fn custom_rules() {
        let profile = BeliefProfile::two_state(&[0.1, 0.6, 0.7]).unwrap();
        let d = AggregationRule::Custom(CustomRule::dictatorship(1));
        assert_eq!(aggregate(&d, &profile, &tol()).unwrap(), *profile.get(1));
        assert!(d.is_surjective());
        let c = AggregationRule::Custom(CustomRule::constant(Belief::two_state(0.25).unwrap()));
        assert_eq!(aggregate(&c, &profile, &tol()).unwrap().get(0), 0.25);
        assert!(!c.is_surjective());
    }

    #[test]
    fn tabulated_rule_snaps_to_grid() {
        let table = TabulatedRule::from_fn(2, 10, 3, |p| aggregate(&AggregationRule::PhantomMedian2State, p, &Tolerance::default())).unwrap();
        let rule = AggregationRule::Custom(CustomRule::tabulated("phantom-table", true, table));
        let exact = BeliefProfile::two_state(&[0.1, 0.2, 0.9]).unwrap();
        let near = BeliefProfile::two_state(&[0.101, 0.199, 0.903]).unwrap();
        let a = aggregate(&rule, &exact, &tol()).unwrap();
        let b = aggregate(&rule, &near, &tol()).unwrap();
        assert!((a.get(0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(a, b);
        assert!(TabulatedRule::from_fn(3, 20, 4, |p| Ok(p.get(0).clone())).is_err());
    }

    fn profile_strategy(odd: bool) -> impl Strategy<Value = BeliefProfile> {
        (1usize..4, 2usize..5).prop_flat_map(move |(k, d)| {
            let n = if odd { 2 * k + 1 } else { k + 1 };
            prop::collection::vec(prop::collection::vec(0.01f64..1.0, d), n).prop_map(|rows| BeliefProfile::from_rows(rows).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn anonymity(profile in profile_strategy(true), shift in 0usize..7) {
            let mut rotated = profile.beliefs().to_vec();
            let len = rotated.len();
            rotated.rotate_left(shift % len);
            let rotated = BeliefProfile::new(rotated).unwrap();
            for rule in [AggregationRule::symmetric_pool(), AggregationRule::GeometricMedian, AggregationRule::ParimutuelPrice] {
                let a = aggregate(&rule, &profile, &tol()).unwrap();
                let b = aggregate(&rule, &rotated, &tol()).unwrap();
                prop_assert!(a.approx_eq(&b, 1e-7), "{}: {:?} vs {:?}", rule.name(), a, b);
            }
        }

        #[test]
        fn example1_matches_phantom_median(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            prop_assert_eq!(example1_aggregate(a, b), phantom_median_price(&[a, b]).unwrap());
        }

        #[test]
        fn geometric_median_in_convex_hull_two_state(probs in prop::collection::vec(0.0f64..=1.0, 1..4)) {
            let mut probs = probs;
            if probs.len() % 2 == 0 { probs.push(0.5); }
            let profile = BeliefProfile::two_state(&probs).unwrap();
            let m = aggregate(&AggregationRule::GeometricMedian, &profile, &tol()).unwrap();
            let lo = probs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m.get(0) >= lo - 1e-12 && m.get(0) <= hi + 1e-12);
        }

        #[test]
        fn geometric_median_is_convex_combination(profile in profile_strategy(true)) {
            // Coordinates of the median stay inside the coordinate ranges of the data,
            // and the result is reproduced by minimizing over small perturbations.
            let m = aggregate(&AggregationRule::GeometricMedian, &profile, &tol()).unwrap();
            for s in 0..profile.dim() {
                let col = profile.column(s);
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(m.get(s) >= lo - 1e-9 && m.get(s) <= hi + 1e-9);
            }
        }
    }
}
