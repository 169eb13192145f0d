//! Points of the probability simplex and the numeric settings shared by
//! every solver in the crate.
//!
//! A [`Belief`] is always a valid distribution: construction clamps
//! negative rounding dust to zero and renormalizes, so downstream code
//! never re-validates. Beliefs are compared with [`Belief::approx_eq`]
//! (L∞ distance), not bitwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default absolute tolerance used for belief equality and solver stopping.
pub const DEFAULT_ABS_TOL: f64 = 1e-9;

/// Entries above `-NEGATIVE_DUST` are treated as rounding noise and clamped.
pub const NEGATIVE_DUST: f64 = 1e-12;

/// Default cap on the number of points [`simplex_grid`] will enumerate.
pub const DEFAULT_GRID_CAP: usize = 2_000_000;

/// A probability distribution over a finite state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Belief(Vec<f64>);

impl Belief {
    /// Validates and normalizes a raw mass vector.
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if raw.len() < 2 {
            return Err(Error::DimensionTooSmall(raw.len()));
        }
        let mut probs = raw;
        for (state, v) in probs.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(Error::invalid(format!("non-finite mass at state {state}")));
            }
            if *v < -NEGATIVE_DUST {
                return Err(Error::NegativeMass { state, value: *v });
            }
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let total: f64 = probs.iter().sum();
        if total <= 0.0 {
            return Err(Error::ZeroMass);
        }
        // a vector already normalized up to rounding is kept, so rebuilding a
        // belief from its own probabilities gives it back unchanged
        if (total - 1.0).abs() > probs.len() as f64 * f64::EPSILON {
            for v in probs.iter_mut() {
                *v /= total;
            }
        }
        Ok(Belief(probs))
    }

    /// Two-state belief `(p, 1 - p)` from the probability of the first state.
    pub fn two_state(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
        }
        Belief::new(vec![p, 1.0 - p])
    }

    pub fn uniform(dim: usize) -> Result<Self> {
        Belief::new(vec![1.0; dim])
    }

    /// Point mass on `state`.
    pub fn vertex(dim: usize, state: usize) -> Result<Self> {
        if state >= dim {
            return Err(Error::invalid(format!("state {state} out of range for dimension {dim}")));
        }
        let mut v = vec![0.0; dim];
        v[state] = 1.0;
        Belief::new(v)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, state: usize) -> f64 {
        self.0[state]
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn linf_distance(&self, other: &Belief) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_distance(&self, other: &Belief) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Equality up to `tol` in the L∞ norm. Beliefs of different dimension are never equal.
    pub fn approx_eq(&self, other: &Belief, tol: f64) -> bool {
        self.dim() == other.dim() && self.linf_distance(other) <= tol
    }

    /// States carrying positive mass.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(s, _)| s)
    }

    /// `(1 - lambda) * self + lambda * other`.
    pub fn mix(&self, other: &Belief, lambda: f64) -> Result<Belief> {
        mix(self, other, lambda)
    }
}

impl TryFrom<Vec<f64>> for Belief {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Belief::new(v)
    }
}

impl From<Belief> for Vec<f64> {
    fn from(b: Belief) -> Self {
        b.0
    }
}

impl AsRef<[f64]> for Belief {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Convex combination `(1 - lambda) * a + lambda * b`.
pub fn mix(a: &Belief, b: &Belief, lambda: f64) -> Result<Belief> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::LambdaOutOfRange(lambda));
    }
    let raw = a
        .probs()
        .iter()
        .zip(b.probs())
        .map(|(x, y)| (1.0 - lambda) * x + lambda * y)
        .collect();
    Belief::new(raw)
}

/// An ordered list of beliefs over a common state space, one per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Belief>", into = "Vec<Belief>")]
pub struct BeliefProfile(Vec<Belief>);

impl BeliefProfile {
    pub fn new(beliefs: Vec<Belief>) -> Result<Self> {
        let first = beliefs
            .first()
            .ok_or_else(|| Error::invalid("a belief profile needs at least one agent"))?;
        let dim = first.dim();
        if let Some(b) = beliefs.iter().find(|b| b.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: b.dim(),
            });
        }
        Ok(BeliefProfile(beliefs))
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let beliefs = rows.into_iter().map(Belief::new).collect::<Result<Vec<_>>>()?;
        BeliefProfile::new(beliefs)
    }

    /// Two-state profile given each agent's probability of the first state.
    pub fn two_state(first_state_probs: &[f64]) -> Result<Self> {
        let beliefs = first_state_probs
            .iter()
            .map(|&p| Belief::two_state(p))
            .collect::<Result<Vec<_>>>()?;
        BeliefProfile::new(beliefs)
    }

    /// `n` copies of the same belief.
    pub fn unanimous(belief: &Belief, n: usize) -> Result<Self> {
        BeliefProfile::new(vec![belief.clone(); n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.0[0].dim()
    }

    pub fn beliefs(&self) -> &[Belief] {
        &self.0
    }

    pub fn get(&self, agent: usize) -> &Belief {
        &self.0[agent]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Belief> {
        self.0.iter()
    }

    /// Copy of the profile with `agent`'s belief replaced.
    pub fn with_replaced(&self, agent: usize, belief: Belief) -> Result<Self> {
        if agent >= self.len() {
            return Err(Error::invalid(format!("agent {agent} out of range")));
        }
        if belief.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: belief.dim(),
            });
        }
        let mut beliefs = self.0.clone();
        beliefs[agent] = belief;
        Ok(BeliefProfile(beliefs))
    }

    /// Agent-wise `approx_eq`.
    pub fn approx_eq(&self, other: &BeliefProfile, tol: f64) -> bool {
        self.len() == other.len() && self.iter().zip(other.iter()).all(|(a, b)| a.approx_eq(b, tol))
    }

    /// Probabilities each agent assigns to `state`.
    pub fn column(&self, state: usize) -> Vec<f64> {
        self.0.iter().map(|b| b.get(state)).collect()
    }
}

impl TryFrom<Vec<Belief>> for BeliefProfile {
    type Error = Error;

    fn try_from(v: Vec<Belief>) -> Result<Self> {
        BeliefProfile::new(v)
    }
}

impl From<BeliefProfile> for Vec<Belief> {
    fn from(p: BeliefProfile) -> Self {
        p.0
    }
}

impl<'a> IntoIterator for &'a BeliefProfile {
    type Item = &'a Belief;
    type IntoIter = std::slice::Iter<'a, Belief>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Stopping rules for the iterative solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Tolerance {
    pub fn new(abs_tol: f64, rel_tol: f64, max_iter: usize) -> Result<Self> {
        let tol = Tolerance {
            abs_tol,
            rel_tol,
            max_iter,
        };
        tol.validate()?;
        Ok(tol)
    }

    pub fn validate(&self) -> Result<()> {
        if self.abs_tol <= 0.0 || !self.abs_tol.is_finite() {
            return Err(Error::invalid(format!("abs_tol must be positive, got {}", self.abs_tol)));
        }
        if self.rel_tol < 0.0 || !self.rel_tol.is_finite() {
            return Err(Error::invalid(format!("rel_tol must be nonnegative, got {}", self.rel_tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        Ok(())
    }

    pub fn with_abs_tol(mut self, abs_tol: f64) -> Self {
        self.abs_tol = abs_tol;
        self
    }
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            abs_tol: DEFAULT_ABS_TOL,
            rel_tol: 1e-9,
            max_iter: 100_000,
        }
    }
}

/// Number of points in the simplex lattice of the given dimension and resolution.
pub fn simplex_grid_count(dim: usize, resolution: usize) -> u128 {
    // C(resolution + dim - 1, dim - 1), computed incrementally to stay exact.
    let k = dim.saturating_sub(1) as u128;
    let n = resolution as u128 + k;
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

/// All beliefs whose entries are multiples of `1 / resolution`.
pub fn simplex_grid(dim: usize, resolution: usize) -> Result<Vec<Belief>> {
    simplex_grid_capped(dim, resolution, DEFAULT_GRID_CAP)
}

pub fn simplex_grid_capped(dim: usize, resolution: usize, cap: usize) -> Result<Vec<Belief>> {
    if dim < 2 {
        return Err(Error::DimensionTooSmall(dim));
    }
    if resolution == 0 {
        return Err(Error::invalid("grid resolution must be at least 1"));
    }
    let count = simplex_grid_count(dim, resolution);
    if count > cap as u128 {
        return Err(Error::SizeOverflow { count, cap });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut counts = vec![0usize; dim];
    compositions(&mut counts, 0, resolution, &mut |c| {
        let r = resolution as f64;
        out.push(Belief(c.iter().map(|&k| k as f64 / r).collect()));
    });
    Ok(out)
}

fn compositions(counts: &mut [usize], pos: usize, remaining: usize, emit: &mut impl FnMut(&[usize])) {
    if pos + 1 == counts.len() {
        counts[pos] = remaining;
        emit(counts);
        return;
    }
    for k in 0..=remaining {
        counts[pos] = k;
        compositions(counts, pos + 1, remaining - k, emit);
    }
}
