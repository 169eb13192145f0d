//! Seeded random beliefs and profiles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::belief::{Belief, BeliefProfile};
use crate::error::Result;

pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw from the simplex (flat Dirichlet).
pub fn random_belief<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Result<Belief> {
    let raw = (0..dim).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    Belief::new(raw)
}

/// Uniform draw with every coordinate at least `floor` (`floor * dim < 1`).
pub fn random_interior_belief<R: Rng + ?Sized>(rng: &mut R, dim: usize, floor: f64) -> Result<Belief> {
    let base = random_belief(rng, dim)?;
    let scale = 1.0 - floor * dim as f64;
    Belief::new(base.probs().iter().map(|q| floor + scale * q).collect())
}

pub fn random_profile<R: Rng + ?Sized>(rng: &mut R, agents: usize, dim: usize) -> Result<BeliefProfile> {
    BeliefProfile::new((0..agents).map(|_| random_belief(rng, dim)).collect::<Result<_>>()?)
}

/// A uniformly drawn mixing weight in `[0, 1]`.
pub fn random_lambda<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(0.0..=1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let a = random_profile(&mut seeded_rng(7), 3, 4).unwrap();
        let b = random_profile(&mut seeded_rng(7), 3, 4).unwrap();
        assert_eq!(a, b);
        let c = random_profile(&mut seeded_rng(8), 3, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn flat_dirichlet_marginal_mean() {
        let mut rng = seeded_rng(1);
        let n = 20_000;
        let mean: f64 = (0..n).map(|_| random_belief(&mut rng, 4).unwrap().get(2)).sum::<f64>() / n as f64;
        assert!((mean - 0.25).abs() < 0.01, "{mean}");
    }

    #[test]
    fn interior_floor_respected() {
        let mut rng = seeded_rng(2);
        for _ in 0..100 {
            let b = random_interior_belief(&mut rng, 5, 0.01).unwrap();
            assert!(b.probs().iter().all(|&q| q >= 0.01 - 1e-15));
        }
    }
}
