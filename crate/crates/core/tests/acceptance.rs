//! Acceptance suite: one pass/fail line per criterion, non-zero exit on any failure.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use beliefagg::aggregation::{aggregate, example1_aggregate, AggregationRule, CustomRule};
use beliefagg::axioms::{
    check_monotonicity, check_no_veto_power, check_recursive_invariance, check_strategy_proofness, lower_contour_subset,
    sample_mixing_draws, sample_veto_draws, segment_distance, ContourOracle, MixingDraw, VetoDraw, Verdict,
};
use beliefagg::belief::{Belief, BeliefProfile, Tolerance};
use beliefagg::mechanism::{audit_truthful_equilibrium, AuditSettings};
use beliefagg::parimutuel::{phantom_median_price, solve_parimutuel, verify_foc};
use beliefagg::portfolio::{belief_from_portfolio, expected_utility, optimal_portfolio, MarketSpec, UtilityIndex};
use beliefagg::revelation_game::{
    br_dynamics, nash_from_parimutuel, parimutuel_from_reports, verify_nash, GameSpec, ReportProfile,
};
use beliefagg::sampling::{random_belief, random_interior_belief, random_lambda, random_profile, seeded_rng};
use rand::Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Debug) -> String {
    format!("error: {e:?}")
}

fn example1_game(pa: f64, pb: f64) -> Result<GameSpec, String> {
    Ok(GameSpec::log_pool(BeliefProfile::two_state(&[pa, pb]).map_err(err)?))
}

fn example1_reports(pa: f64, pb: f64) -> Result<(f64, f64), String> {
    let spec = example1_game(pa, pb)?;
    let out = br_dynamics(&spec, ReportProfile::from_profile(spec.truths.clone()), 1000).map_err(err)?;
    if !out.converged {
        return Err(format!("dynamics did not converge at ({pa}, {pb})"));
    }
    Ok((out.reports.get(0).get(0), out.reports.get(1).get(0)))
}

/// Equilibrium reports of the two-agent example, with `pa <= pb`.
fn example1_equilibrium(pa: f64, pb: f64) -> Option<(f64, f64)> {
    if pa == pb {
        None
    } else if pb <= 0.5 {
        Some((0.0, 2.0 * pb))
    } else if pa <= 0.5 {
        Some((0.0, 1.0))
    } else {
        Some((2.0 * pa - 1.0, 1.0))
    }
}

fn criterion_1() -> Outcome {
    let points: Vec<(f64, f64)> = (0..=100)
        .flat_map(|a| (0..=100).map(move |b| (a as f64 / 100.0, b as f64 / 100.0)))
        .collect();
    let worst = points
        .par_iter()
        .map(|&(pa, pb)| {
            let spec = example1_game(pa, pb)?;
            let out = br_dynamics(&spec, ReportProfile::from_profile(spec.truths.clone()), 1000).map_err(err)?;
            Ok((out.aggregate.get(0) - example1_aggregate(pa, pb)).abs())
        })
        .collect::<Result<Vec<f64>, String>>()?
        .into_iter()
        .fold(0.0, f64::max);
    if worst > 1e-6 {
        return Err(format!("grid aggregate off by {worst:e}"));
    }

    let spots = [
        (0.1, 0.3),
        (0.2, 0.45),
        (0.05, 0.5),
        (0.3, 0.4),
        (0.0, 0.25),
        (0.1, 0.9),
        (0.3, 0.8),
        (0.5, 0.7),
        (0.45, 0.55),
        (0.0, 1.0),
        (0.6, 0.7),
        (0.55, 0.95),
        (0.75, 0.8),
        (0.9, 1.0),
        (0.5, 0.6),
        (0.4, 0.4),
        (0.7, 0.7),
        (0.5, 0.5),
        (0.0, 0.0),
        (1.0, 1.0),
    ];
    let mut cases = [0usize; 4];
    for &(pa, pb) in &spots {
        let (ra, rb) = example1_reports(pa, pb)?;
        match example1_equilibrium(pa, pb) {
            Some((ea, eb)) => {
                cases[if eb < 1.0 { 0 } else if ea == 0.0 { 1 } else { 2 }] += 1;
                if (ra - ea).abs() > 1e-12 || (rb - eb).abs() > 1e-12 {
                    return Err(format!("({pa}, {pb}): reports ({ra}, {rb}), expected ({ea}, {eb})"));
                }
            }
            None => {
                cases[3] += 1;
                if (ra + rb - 2.0 * pa).abs() > 1e-12 {
                    return Err(format!("({pa}, {pa}): reports ({ra}, {rb}) do not sum to {}", 2.0 * pa));
                }
            }
        }
        let spec = example1_game(pa, pb)?;
        let reports = ReportProfile::from_profile(BeliefProfile::two_state(&[ra, rb]).map_err(err)?);
        let gap = verify_nash(&spec, &reports, &spec.tol).map_err(err)?.max_gap;
        if gap > 1e-12 {
            return Err(format!("({pa}, {pb}): spot equilibrium has gap {gap:e}"));
        }
    }
    check(
        cases.iter().all(|&c| c > 0),
        format!("101x101 grid max error {worst:.1e}; 20 spot points exact, cases {cases:?}"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = seeded_rng(2);
    let tol = Tolerance::default();
    let mut worst = 0.0f64;
    let mut slowest = Duration::ZERO;
    for _ in 0..300 {
        let n = rng.random_range(1..=7);
        let probs: Vec<f64> = (0..n).map(|_| random_belief(&mut rng, 2).map(|b| b.get(0))).collect::<Result<_, _>>().map_err(err)?;
        let profile = BeliefProfile::two_state(&probs).map_err(err)?;
        let start = Instant::now();
        let eq = solve_parimutuel(&profile, &tol).map_err(err)?;
        slowest = slowest.max(start.elapsed());
        let expected = phantom_median_price(&probs).map_err(err)?;
        worst = worst.max((eq.price.get(0) - expected).abs());
    }
    check(
        worst <= 1e-6 && slowest < Duration::from_millis(50),
        format!("300 instances, max price error {worst:.1e}, slowest {slowest:?}"),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = seeded_rng(3);
    let tol = Tolerance::default();
    let mut worst_gap = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=5);
        let dim = rng.random_range(2..=4);
        let truths = random_profile(&mut rng, n, dim).map_err(err)?;
        let (reports, _) = nash_from_parimutuel(&truths, &tol).map_err(err)?;
        let spec = GameSpec::log_pool(truths);
        worst_gap = worst_gap.max(verify_nash(&spec, &reports, &tol).map_err(err)?.max_gap);
    }
    let mut worst_foc = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=5);
        let truths = random_profile(&mut rng, n, 2).map_err(err)?;
        let spec = GameSpec::log_pool(truths.clone());
        let out = br_dynamics(&spec, ReportProfile::from_profile(truths.clone()), 10_000).map_err(err)?;
        if !out.converged {
            return Err("dynamics did not converge".into());
        }
        let eq = parimutuel_from_reports(&truths, &out.reports, &tol).map_err(err)?;
        worst_foc = worst_foc.max(verify_foc(&eq, &truths, &tol).map_err(err)?.max_residual());
    }
    check(
        worst_gap <= 1e-6 && worst_foc <= 1e-6,
        format!("max best-response gap {worst_gap:.1e}; max mapped-back residual {worst_foc:.1e}"),
    )
}

fn criterion_4() -> Outcome {
    let tol = Tolerance::default();
    let priors = BeliefProfile::from_rows(vec![vec![0.5, 0.5, 0.0], vec![0.0, 0.5, 0.5]]).map_err(err)?;
    let eq = solve_parimutuel(&priors, &tol).map_err(err)?;
    let third = Belief::uniform(3).map_err(err)?;
    let price_error = eq.price.linf_distance(&third);
    let market = MarketSpec::uniform(3);
    let pool = aggregate(&AggregationRule::symmetric_pool(), &priors, &tol).map_err(err)?;
    let at_pool = expected_utility(priors.get(0), &pool, &market, &UtilityIndex::Log).map_err(err)?;
    let at_price = expected_utility(priors.get(0), &eq.price, &market, &UtilityIndex::Log).map_err(err)?;
    let expected_pool = 0.5 * 0.25f64.ln() + 0.5 * 0.5f64.ln();
    check(
        price_error <= 1e-7
            && (at_pool - expected_pool).abs() < 1e-9
            && (at_price - (1.0f64 / 3.0).ln()).abs() < 1e-6
            && at_pool - at_price > 0.058,
        format!(
            "price error {price_error:.1e}; pooled {at_pool:.6} vs equilibrium {at_price:.6}, gap {:.4}",
            at_pool - at_price
        ),
    )
}

/// Mixing draws with an odd number of agents, as the median rule requires.
fn odd_mixing_draws(rng: &mut impl Rng, count: usize) -> Result<Vec<MixingDraw>, String> {
    (0..count)
        .map(|_| {
            let n = 2 * rng.random_range(0..=3) + 1;
            let dim = rng.random_range(2..=4);
            sample_mixing_draws(rng, 1, n..=n, dim).map(|mut d| d.remove(0))
        })
        .collect::<Result<_, _>>()
        .map_err(err)
}

fn criterion_5() -> Outcome {
    let mut rng = seeded_rng(5);
    let tol = Tolerance::default().with_abs_tol(1e-5);
    let market = MarketSpec::uniform(2);
    let mut draws = Vec::new();
    for _ in 0..200 {
        let dim = rng.random_range(2..=4);
        draws.extend(sample_mixing_draws(&mut rng, 1, 1..=6, dim).map_err(err)?);
    }
    let parimutuel = check_recursive_invariance(&AggregationRule::ParimutuelPrice, &draws, &tol).map_err(err)?;
    let median_draws = odd_mixing_draws(&mut rng, 200)?;
    let median = check_recursive_invariance(&AggregationRule::GeometricMedian, &median_draws, &tol).map_err(err)?;
    let pool_rule = AggregationRule::symmetric_pool();
    let pool = check_recursive_invariance(&pool_rule, &draws, &tol).map_err(err)?;
    let replayed = match &pool.counterexample {
        Some(ce) => ce.replay(&pool_rule, &market, &UtilityIndex::Log, &tol).map_err(err)?,
        None => Verdict::Pass,
    };
    check(
        parimutuel.verdict == Verdict::Pass
            && median.verdict == Verdict::Pass
            && pool.verdict == Verdict::Fail
            && replayed == Verdict::Fail,
        format!(
            "parimutuel {:?}, median {:?} on 200 draws each; linear pool {:?} with replay {:?}",
            parimutuel.verdict, median.verdict, pool.verdict, replayed
        ),
    )
}

fn criterion_6() -> Outcome {
    let tol = Tolerance::default();
    let truths = BeliefProfile::two_state(&[0.05, 0.05, 0.08]).map_err(err)?;
    let price = aggregate(&AggregationRule::ParimutuelPrice, &truths, &tol).map_err(err)?;
    let draw = VetoDraw {
        consensus: Belief::two_state(0.05).map_err(err)?,
        dissenter: Belief::two_state(0.08).map_err(err)?,
        agents: 3,
    };
    let parimutuel = check_no_veto_power(&AggregationRule::ParimutuelPrice, &[draw], &tol).map_err(err)?;
    let mut rng = seeded_rng(6);
    let mut draws = Vec::new();
    for _ in 0..100 {
        let n = 2 * rng.random_range(1..=3) + 1;
        let dim = rng.random_range(2..=4);
        draws.extend(sample_veto_draws(&mut rng, 1, n..=n, dim).map_err(err)?);
    }
    let median = check_no_veto_power(&AggregationRule::GeometricMedian, &draws, &tol.with_abs_tol(1e-7)).map_err(err)?;
    check(
        (price.get(0) - 0.08).abs() <= 1e-7 && parimutuel.verdict == Verdict::Fail && median.verdict == Verdict::Pass,
        format!(
            "parimutuel price {:.6}, verdict {:?}; median {:?} on 100 draws",
            price.get(0),
            parimutuel.verdict,
            median.verdict
        ),
    )
}

fn criterion_7() -> Outcome {
    let oracle = ContourOracle::new(2, 1000, MarketSpec::uniform(2), UtilityIndex::Log, 1e-9).map_err(err)?;
    let mut rng = seeded_rng(7);
    let mut draws = Vec::new();
    for k in 0..100 {
        let p = random_interior_belief(&mut rng, 2, 0.02).map_err(err)?;
        let f = random_interior_belief(&mut rng, 2, 0.02).map_err(err)?;
        let moved = if k % 2 == 0 {
            p.mix(&f, random_lambda(&mut rng)).map_err(err)?
        } else {
            // off-segment beliefs far enough out that a finite grid can see the violation
            loop {
                let b = random_interior_belief(&mut rng, 2, 0.02).map_err(err)?;
                if segment_distance(&f, &p, &b) >= 0.05 {
                    break b;
                }
            }
        };
        draws.push((f, p, moved));
    }
    let disagreements = draws
        .par_iter()
        .map(|(f, p, moved)| Ok(lower_contour_subset(f, p, moved, 1e-9) != oracle.includes(f, p, moved).map_err(err)?))
        .collect::<Result<Vec<bool>, String>>()?
        .into_iter()
        .filter(|&d| d)
        .count();
    check(disagreements == 0, format!("{disagreements} disagreements in 100 draws at resolution 1000"))
}

fn criterion_8() -> Outcome {
    let mut rng = seeded_rng(8);
    let tol = Tolerance::default().with_abs_tol(1e-6);
    let market = MarketSpec::uniform(2);
    let draws = sample_mixing_draws(&mut rng, 40, 3..=3, 2).map_err(err)?;
    let profiles: Vec<BeliefProfile> = draws.iter().map(|d| d.profile.clone()).collect();
    let oracle = ContourOracle::new(2, 1000, market.clone(), UtilityIndex::Log, 1e-9).map_err(err)?;
    let rules = [
        (AggregationRule::symmetric_pool(), true),
        (AggregationRule::Custom(CustomRule::dictatorship(0)), false),
        (
            AggregationRule::Custom(CustomRule::constant(Belief::two_state(0.3).map_err(err)?)),
            false,
        ),
    ];
    let mut lines = Vec::new();
    for (rule, should_fail) in &rules {
        let mono = check_monotonicity(rule, &draws, Some(&oracle), &tol).map_err(err)?;
        let sp = check_strategy_proofness(rule, &profiles, 100, &market, &UtilityIndex::Log, &tol).map_err(err)?;
        let fails = |v: Verdict| v == Verdict::Fail;
        if fails(mono.verdict) && !fails(sp.verdict) {
            return Err(format!("{} fails monotonicity but passes the strategy-proofness probe", rule.name()));
        }
        if fails(mono.verdict) != *should_fail || fails(sp.verdict) != *should_fail {
            return Err(format!(
                "{}: monotonicity {:?}, strategy-proofness {:?}",
                rule.name(),
                mono.verdict,
                sp.verdict
            ));
        }
        lines.push(format!("{} {:?}/{:?}", rule.name(), mono.verdict, sp.verdict));
    }
    Ok(lines.join(", "))
}

fn criterion_9() -> Outcome {
    let mut rng = seeded_rng(9);
    let tol = Tolerance::default();
    let market = MarketSpec::uniform(3);
    let settings = AuditSettings {
        resolution: 20,
        integer_cap: 1_000_000,
        ..AuditSettings::default()
    };
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..20 {
        let truths = random_profile(&mut rng, 3, 3).map_err(err)?;
        let audit = audit_truthful_equilibrium(&truths, &AggregationRule::GeometricMedian, &market, &UtilityIndex::Log, &settings, &tol)
            .map_err(err)?;
        if !audit.warnings.is_empty() {
            return Err(format!("audit warnings {:?}", audit.warnings));
        }
        worst = worst.max(audit.max_gain);
    }
    check(worst <= 1e-6, format!("20 profiles, max deviation gain {worst:.1e}"))
}

/// Best spending shares on a grid of step `1 / resolution`, found by a coarse
/// pass and then a full-resolution scan of the neighbourhood of the coarse optimum.
fn grid_portfolio(q: &Belief, market: &MarketSpec, utility: &UtilityIndex, resolution: usize) -> Vec<f64> {
    let dim = q.dim();
    let value = |shares: &[f64]| -> f64 {
        shares
            .iter()
            .zip(market.prices())
            .zip(q.probs())
            .map(|((w, price), p)| p * utility.value(w * market.wealth() / price))
            .sum()
    };
    let coarse = 100;
    let step = resolution / coarse;
    // indices are counted in units of 1 / resolution
    let best_in = |candidates: &mut dyn Iterator<Item = Vec<usize>>| -> Vec<usize> {
        let mut best = (f64::NEG_INFINITY, Vec::new());
        for c in candidates {
            let shares: Vec<f64> = c.iter().map(|&k| k as f64 / resolution as f64).collect();
            let v = value(&shares);
            if v > best.0 {
                best = (v, c);
            }
        }
        best.1
    };
    let complete = |mut head: Vec<usize>| -> Option<Vec<usize>> {
        let used: usize = head.iter().sum();
        (used <= resolution).then(|| {
            head.push(resolution - used);
            head
        })
    };
    let window = |centre: usize| centre.saturating_sub(2 * step)..=(centre + 2 * step).min(resolution);
    let best = if dim == 2 {
        best_in(&mut (0..=resolution).filter_map(|a| complete(vec![a])))
    } else {
        assert_eq!(dim, 3);
        let coarse_best = best_in(
            &mut (0..=coarse)
                .flat_map(|a| (0..=coarse - a).map(move |b| vec![a * step, b * step]))
                .filter_map(complete),
        );
        best_in(
            &mut window(coarse_best[0])
                .flat_map(|a| window(coarse_best[1]).map(move |b| vec![a, b]))
                .filter_map(complete),
        )
    };
    best.iter().map(|&k| k as f64 / resolution as f64).collect()
}

fn criterion_10() -> Outcome {
    let mut rng = seeded_rng(10);
    let tol = Tolerance::default();
    let utilities = [
        UtilityIndex::Log,
        UtilityIndex::crra(0.5).map_err(err)?,
        UtilityIndex::crra(2.0).map_err(err)?,
        UtilityIndex::crra(5.0).map_err(err)?,
    ];
    let mut instances = Vec::new();
    for k in 0..50 {
        let dim = 2 + k % 2;
        let q = random_interior_belief(&mut rng, dim, 0.02).map_err(err)?;
        let prices = (0..dim).map(|_| rng.random_range(0.5..2.0)).collect();
        let market = MarketSpec::new(prices, rng.random_range(0.5..2.0)).map_err(err)?;
        instances.push((q, market));
    }
    let results = instances
        .par_iter()
        .map(|(q, market)| {
            let mut share_error = 0.0f64;
            let mut round_trip = 0.0f64;
            for u in &utilities {
                let x = optimal_portfolio(q, market, u, &tol).map_err(err)?;
                let shares: Vec<f64> = x
                    .holdings()
                    .iter()
                    .zip(market.prices())
                    .map(|(h, price)| h * price / market.wealth())
                    .collect();
                let grid = grid_portfolio(q, market, u, 10_000);
                share_error = share_error.max(shares.iter().zip(&grid).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
                round_trip = round_trip.max(belief_from_portfolio(&x, market, u).map_err(err)?.linf_distance(q));
            }
            Ok((share_error, round_trip))
        })
        .collect::<Result<Vec<_>, String>>()?;
    let share_error = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let round_trip = results.iter().map(|r| r.1).fold(0.0, f64::max);
    check(
        share_error <= 1e-4 && round_trip <= 1e-7,
        format!("200 solves, max grid deviation {share_error:.1e}, max round-trip error {round_trip:.1e}"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("example 1 closed forms", criterion_1),
        ("parimutuel price is the phantom median", criterion_2),
        ("parimutuel equilibria and Nash equilibria correspond", criterion_3),
        ("three-state parimutuel example", criterion_4),
        ("recursive invariance", criterion_5),
        ("no veto power", criterion_6),
        ("segment criterion matches contour oracle", criterion_7),
        ("monotonicity failures fail strategy-proofness", criterion_8),
        ("mechanism audit", criterion_9),
        ("portfolio matches grid search", criterion_10),
    ];
    let started = Instant::now();
    let mut failures = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = run();
        let elapsed = t.elapsed();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail} ({elapsed:.2?})", k + 1),
            Err(detail) => {
                failures += 1;
                println!("criterion {:>2} FAIL {name}: {detail} ({elapsed:.2?})", k + 1);
            }
        }
    }
    println!("{} of {} criteria passed in {:.2?}", criteria.len() - failures, criteria.len(), started.elapsed());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
