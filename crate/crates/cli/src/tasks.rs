//! One runner per task. Runners compute everything in memory; the caller
//! writes the files.

use beliefagg::aggregation::{aggregate, example1_aggregate};
use beliefagg::axioms::{
    check_condition_mu, check_monotonicity, check_no_veto_power, check_recursive_invariance, check_strategy_proofness,
    replay_condition_mu, sample_mixing_draws, sample_mu_pairs, sample_veto_draws, AxiomReport, BaseSet, ContourOracle,
    Counterexample, EquilibriumReportSets, Verdict,
};
use beliefagg::belief::{Belief, BeliefProfile};
use beliefagg::error::Error;
use beliefagg::mechanism::audit_truthful_equilibrium;
use beliefagg::parimutuel::solve_parimutuel;
use beliefagg::revelation_game::{br_dynamics, verify_nash, GameSpec, ReportProfile};
use beliefagg::sampling::{random_profile, seeded_rng};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{AxiomName, Scenario, Task, Truths};
use crate::output::{inline_json, Cell, Table};

pub struct Report {
    pub results: Value,
    pub tables: Vec<(&'static str, Table)>,
    /// Some solver stopped without meeting its tolerance.
    pub unconverged: bool,
    pub axiom_failed: bool,
}

type Result<T> = std::result::Result<T, Error>;

fn to_value(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("results serialize")
}

fn belief_cells(b: &Belief) -> Vec<Cell> {
    b.probs().iter().map(|&v| Cell::Float(v)).collect()
}

fn state_header(prefix: &str, states: usize) -> Vec<String> {
    (0..states).map(|s| format!("{prefix}{s}")).collect()
}

fn table(fixed: &[&str], prefixes: &[&str], states: usize, tail: &[&str]) -> Table {
    let mut header: Vec<String> = fixed.iter().map(|h| h.to_string()).collect();
    for p in prefixes {
        header.extend(state_header(p, states));
    }
    header.extend(tail.iter().map(|h| h.to_string()));
    Table {
        header,
        rows: Vec::new(),
    }
}

/// The truth profiles of the scenario; random ones come from the seed.
pub fn profiles(scenario: &Scenario) -> Result<Vec<BeliefProfile>> {
    match &scenario.truths {
        Truths::Explicit(p) => Ok(vec![p.clone()]),
        Truths::Random { instances } => {
            let mut rng = seeded_rng(scenario.seed.expect("validated: random truths have a seed"));
            (0..*instances)
                .map(|_| random_profile(&mut rng, scenario.agents, scenario.states))
                .collect()
        }
    }
}

pub fn run(scenario: &Scenario) -> Result<Report> {
    match scenario.task {
        Task::Aggregate => run_aggregate(scenario),
        Task::Equilibrium => run_equilibrium(scenario),
        Task::Parimutuel => run_parimutuel(scenario),
        Task::Axioms => run_axioms(scenario),
        Task::MechanismAudit => run_audit(scenario),
        Task::Example1Sweep => run_sweep(scenario),
    }
}

fn run_aggregate(sc: &Scenario) -> Result<Report> {
    let profiles = profiles(sc)?;
    let aggregates = profiles
        .par_iter()
        .map(|p| aggregate(&sc.rule, p, &sc.tol))
        .collect::<Result<Vec<_>>>()?;
    let mut csv = table(&["instance", "truths"], &["aggregate_"], sc.states, &[]);
    let mut instances = Vec::new();
    for (k, (p, q)) in profiles.iter().zip(&aggregates).enumerate() {
        let mut row = vec![Cell::from(k), Cell::Text(inline_json(&to_value(p)))];
        row.extend(belief_cells(q));
        csv.push(row);
        instances.push(json!({"instance": k, "truths": p, "aggregate": q}));
    }
    Ok(Report {
        results: json!({"rule": sc.rule.name(), "instances": instances}),
        tables: vec![("aggregates.csv", csv)],
        unconverged: false,
        axiom_failed: false,
    })
}

fn run_equilibrium(sc: &Scenario) -> Result<Report> {
    let profiles = profiles(sc)?;
    let outcomes = profiles
        .par_iter()
        .map(|p| {
            let spec = GameSpec::new(p.clone(), sc.rule.clone(), sc.market.clone(), sc.utility.clone(), sc.tol)?;
            let out = br_dynamics(&spec, ReportProfile::from_profile(p.clone()), sc.max_rounds)?;
            let nash = verify_nash(&spec, &out.reports, &sc.tol)?;
            Ok((out, nash))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut reports_csv = table(&["instance", "agent"], &["truth_", "report_"], sc.states, &["gap"]);
    let mut aggregates_csv = table(&["instance", "truths", "converged"], &["aggregate_"], sc.states, &["max_gap"]);
    let mut instances = Vec::new();
    let mut unconverged = false;
    for (k, (p, (out, nash))) in profiles.iter().zip(&outcomes).enumerate() {
        unconverged |= !out.converged;
        for i in 0..p.len() {
            let mut row = vec![Cell::from(k), Cell::from(i)];
            row.extend(belief_cells(p.get(i)));
            row.extend(belief_cells(out.reports.get(i)));
            row.push(Cell::Float(nash.gaps[i]));
            reports_csv.push(row);
        }
        let mut row = vec![
            Cell::from(k),
            Cell::Text(inline_json(&to_value(p))),
            Cell::from(out.converged.to_string()),
        ];
        row.extend(belief_cells(&out.aggregate));
        row.push(Cell::Float(nash.max_gap));
        aggregates_csv.push(row);
        instances.push(json!({
            "instance": k,
            "truths": p,
            "reports": out.reports,
            "aggregate": out.aggregate,
            "converged": out.converged,
            "rounds": out.rounds,
            "gaps": nash.gaps,
            "max_gap": nash.max_gap,
            "is_nash": nash.is_nash,
        }));
    }
    Ok(Report {
        results: json!({"rule": sc.rule.name(), "max_rounds": sc.max_rounds, "instances": instances}),
        tables: vec![("equilibrium_reports.csv", reports_csv), ("aggregates.csv", aggregates_csv)],
        unconverged,
        axiom_failed: false,
    })
}

fn run_parimutuel(sc: &Scenario) -> Result<Report> {
    let profiles = profiles(sc)?;
    let equilibria = profiles
        .par_iter()
        .map(|p| solve_parimutuel(p, &sc.tol))
        .collect::<Result<Vec<_>>>()?;
    let mut alloc_csv = table(&["instance", "agent"], &["truth_", "holding_", "bid_"], sc.states, &["multiplier"]);
    let mut price_csv = table(&["instance", "truths"], &["price_"], sc.states, &["foc_residual"]);
    let mut instances = Vec::new();
    for (k, (p, eq)) in profiles.iter().zip(&equilibria).enumerate() {
        let bids = eq.bids();
        for (i, agent_bids) in bids.iter().enumerate().take(p.len()) {
            let mut row = vec![Cell::from(k), Cell::from(i)];
            row.extend(belief_cells(p.get(i)));
            row.extend(eq.allocation[i].iter().map(|&v| Cell::Float(v)));
            row.extend(agent_bids.iter().map(|&v| Cell::Float(v)));
            row.push(Cell::Float(eq.multipliers[i]));
            alloc_csv.push(row);
        }
        let mut row = vec![Cell::from(k), Cell::Text(inline_json(&to_value(p)))];
        row.extend(belief_cells(&eq.price));
        row.push(Cell::Float(eq.foc_residual));
        price_csv.push(row);
        instances.push(json!({
            "instance": k,
            "truths": p,
            "price": eq.price,
            "allocation": eq.allocation,
            "bids": bids,
            "multipliers": eq.multipliers,
            "foc_residual": eq.foc_residual,
            "iterations": eq.iterations,
        }));
    }
    Ok(Report {
        results: json!({"instances": instances}),
        tables: vec![("parimutuel_allocation.csv", alloc_csv), ("aggregates.csv", price_csv)],
        unconverged: false,
        axiom_failed: false,
    })
}

fn axiom_label(a: AxiomName) -> &'static str {
    match a {
        AxiomName::RecursiveInvariance => "recursive-invariance",
        AxiomName::Monotonicity => "monotonicity",
        AxiomName::NoVetoPower => "no-veto-power",
        AxiomName::StrategyProofness => "strategy-proofness",
        AxiomName::ConditionMu => "condition-mu",
    }
}

fn run_axioms(sc: &Scenario) -> Result<Report> {
    let seed = sc.seed.expect("validated: axioms have a seed");
    let (n, dim, samples) = (sc.agents, sc.states, sc.axioms.samples);
    let mu_sets = EquilibriumReportSets {
        resolution: sc.axioms.resolution,
        tol: sc.tol,
    };
    let mut csv = Table::new(&["rule", "axiom", "verdict", "samples", "replay", "note", "counterexample"]);
    let mut reports = Vec::new();
    let mut failed = false;
    for (k, &check) in sc.axioms.checks.iter().enumerate() {
        // a stream per check, so adding a check leaves the others unchanged
        let mut rng = seeded_rng(seed.wrapping_add(k as u64));
        let report: AxiomReport = match check {
            AxiomName::RecursiveInvariance => {
                let draws = sample_mixing_draws(&mut rng, samples, n..=n, dim)?;
                check_recursive_invariance(&sc.rule, &draws, &sc.tol)?
            }
            AxiomName::Monotonicity => {
                let draws = sample_mixing_draws(&mut rng, samples, n..=n, dim)?;
                let oracle = sc
                    .axioms
                    .oracle_resolution
                    .map(|r| ContourOracle::new(dim, r, sc.market.clone(), sc.utility.clone(), sc.tol.abs_tol))
                    .transpose()?;
                check_monotonicity(&sc.rule, &draws, oracle.as_ref(), &sc.tol)?
            }
            AxiomName::NoVetoPower => {
                let draws = sample_veto_draws(&mut rng, samples, n..=n, dim)?;
                check_no_veto_power(&sc.rule, &draws, &sc.tol)?
            }
            AxiomName::StrategyProofness => {
                let profiles = (0..samples)
                    .map(|_| random_profile(&mut rng, n, dim))
                    .collect::<Result<Vec<_>>>()?;
                check_strategy_proofness(&sc.rule, &profiles, sc.axioms.resolution, &sc.market, &sc.utility, &sc.tol)?
            }
            AxiomName::ConditionMu => {
                let pairs = sample_mu_pairs(&mut rng, samples, n, dim, sc.axioms.resolution, &sc.rule, &sc.tol)?;
                check_condition_mu(&sc.rule, &BaseSet::Simplex, &mu_sets, &pairs, &sc.market, &sc.utility, &sc.tol)?
            }
        };
        let replay = match &report.counterexample {
            Some(ce @ Counterexample::ConditionMu { .. }) => Some(replay_condition_mu(
                ce,
                &sc.rule,
                &BaseSet::Simplex,
                &mu_sets,
                &sc.market,
                &sc.utility,
                &sc.tol,
            )?),
            Some(ce) => Some(ce.replay(&sc.rule, &sc.market, &sc.utility, &sc.tol)?),
            None => None,
        };
        failed |= report.verdict == Verdict::Fail;
        csv.push(vec![
            Cell::from(sc.rule.name()),
            Cell::from(axiom_label(check)),
            Cell::Text(format!("{:?}", report.verdict)),
            Cell::from(report.samples),
            Cell::Text(replay.map(|v| format!("{v:?}")).unwrap_or_default()),
            Cell::Text(report.note.clone()),
            Cell::Text(report.counterexample.as_ref().map(|c| inline_json(&to_value(c))).unwrap_or_default()),
        ]);
        let mut value = to_value(&report);
        value["replay"] = to_value(&replay);
        value["seed"] = json!(seed.wrapping_add(k as u64));
        reports.push(value);
    }
    Ok(Report {
        results: json!({"rule": sc.rule.name(), "agents": n, "states": dim, "reports": reports}),
        tables: vec![("axioms.csv", csv)],
        unconverged: false,
        axiom_failed: failed,
    })
}

fn run_audit(sc: &Scenario) -> Result<Report> {
    let profiles = profiles(sc)?;
    let audits = profiles
        .iter()
        .map(|p| audit_truthful_equilibrium(p, &sc.rule, &sc.market, &sc.utility, &sc.audit, &sc.tol))
        .collect::<Result<Vec<_>>>()?;
    let mut csv = table(&["instance", "agent"], &["truth_"], sc.states, &["max_gain", "is_equilibrium"]);
    let mut instances = Vec::new();
    for (k, (p, audit)) in profiles.iter().zip(&audits).enumerate() {
        for i in 0..p.len() {
            let mut row = vec![Cell::from(k), Cell::from(i)];
            row.extend(belief_cells(p.get(i)));
            row.push(Cell::Float(audit.gains[i]));
            row.push(Cell::from(audit.is_equilibrium.to_string()));
            csv.push(row);
        }
        let mut value = to_value(audit);
        value["instance"] = json!(k);
        value["truths"] = to_value(p);
        instances.push(value);
    }
    Ok(Report {
        results: json!({
            "rule": sc.rule.name(),
            "resolution": sc.audit.resolution,
            "integer_cap": sc.audit.integer_cap,
            "instances": instances,
        }),
        tables: vec![("audit_gaps.csv", csv)],
        unconverged: false,
        axiom_failed: false,
    })
}

fn run_sweep(sc: &Scenario) -> Result<Report> {
    let r = sc.sweep_resolution;
    let points: Vec<(f64, f64)> = (0..=r)
        .flat_map(|a| (0..=r).map(move |b| (a as f64 / r as f64, b as f64 / r as f64)))
        .collect();
    let rows = points
        .par_iter()
        .map(|&(pa, pb)| {
            let truths = BeliefProfile::two_state(&[pa, pb])?;
            let mut spec = GameSpec::log_pool(truths.clone());
            spec.tol = sc.tol;
            let out = br_dynamics(&spec, ReportProfile::from_profile(truths), sc.max_rounds)?;
            Ok((pa, pb, out))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut csv = Table::new(&[
        "p_a", "p_b", "report_a", "report_b", "aggregate", "median", "abs_error", "converged",
    ]);
    let mut max_error = 0.0f64;
    let mut unconverged = 0usize;
    for (pa, pb, out) in &rows {
        let median = example1_aggregate(*pa, *pb);
        let q = out.aggregate.get(0);
        let error = (q - median).abs();
        max_error = max_error.max(error);
        unconverged += usize::from(!out.converged);
        csv.push(vec![
            Cell::Float(*pa),
            Cell::Float(*pb),
            Cell::Float(out.reports.get(0).get(0)),
            Cell::Float(out.reports.get(1).get(0)),
            Cell::Float(q),
            Cell::Float(median),
            Cell::Float(error),
            Cell::from(out.converged.to_string()),
        ]);
    }
    Ok(Report {
        results: json!({
            "resolution": r,
            "points": rows.len(),
            "max_abs_error": max_error,
            "unconverged": unconverged,
        }),
        tables: vec![("example1_sweep.csv", csv)],
        unconverged: unconverged > 0,
        axiom_failed: false,
    })
}
