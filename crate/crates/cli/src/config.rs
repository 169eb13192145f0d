//! Scenario files: TOML parsed into raw sections, then validated into a
//! [`Scenario`] with every violation reported at once.

use std::fmt;
use std::path::PathBuf;

use beliefagg::aggregation::{AggregationRule, CustomRule};
use beliefagg::belief::{Belief, BeliefProfile, Tolerance};
use beliefagg::mechanism::{AuditSettings, DEFAULT_DEVIATION_FLOOR, DEFAULT_INTEGER_CAP};
use beliefagg::portfolio::{MarketSpec, UtilityIndex};
use serde::Deserialize;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Aggregate,
    Equilibrium,
    Parimutuel,
    Axioms,
    MechanismAudit,
    Example1Sweep,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Aggregate => "aggregate",
            Task::Equilibrium => "equilibrium",
            Task::Parimutuel => "parimutuel",
            Task::Axioms => "axioms",
            Task::MechanismAudit => "mechanism-audit",
            Task::Example1Sweep => "example1-sweep",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AxiomName {
    RecursiveInvariance,
    Monotonicity,
    NoVetoPower,
    StrategyProofness,
    ConditionMu,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema_version: Option<u32>,
    name: Option<String>,
    task: Option<Task>,
    seed: Option<u64>,
    #[serde(default)]
    profile: RawProfile,
    #[serde(default)]
    rule: RawRule,
    #[serde(default)]
    market: RawMarket,
    #[serde(default)]
    utility: RawUtility,
    #[serde(default)]
    tolerance: RawTolerance,
    #[serde(default)]
    equilibrium: RawEquilibrium,
    #[serde(default)]
    axioms: RawAxioms,
    #[serde(default)]
    mechanism: RawMechanism,
    #[serde(default)]
    sweep: RawSweep,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProfile {
    states: Option<usize>,
    agents: Option<usize>,
    truths: Option<Vec<Vec<f64>>>,
    instances: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    kind: Option<String>,
    weights: Option<Vec<f64>>,
    agent: Option<usize>,
    belief: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMarket {
    prices: Option<Vec<f64>>,
    wealth: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUtility {
    kind: Option<String>,
    gamma: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTolerance {
    abs_tol: Option<f64>,
    rel_tol: Option<f64>,
    max_iter: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEquilibrium {
    max_rounds: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAxioms {
    checks: Option<Vec<AxiomName>>,
    samples: Option<usize>,
    resolution: Option<usize>,
    oracle_resolution: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMechanism {
    resolution: Option<usize>,
    integer_cap: Option<u64>,
    deviation_floor: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    resolution: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
}

/// Where the truth profiles come from.
#[derive(Debug, Clone)]
pub enum Truths {
    Explicit(BeliefProfile),
    /// `instances` flat-Dirichlet profiles drawn from the seed.
    Random { instances: usize },
}

#[derive(Debug, Clone)]
pub struct AxiomSettings {
    pub checks: Vec<AxiomName>,
    pub samples: usize,
    pub resolution: usize,
    pub oracle_resolution: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub task: Task,
    pub seed: Option<u64>,
    pub states: usize,
    pub agents: usize,
    pub truths: Truths,
    pub rule: AggregationRule,
    pub market: MarketSpec,
    pub utility: UtilityIndex,
    pub tol: Tolerance,
    pub max_rounds: usize,
    pub axioms: AxiomSettings,
    pub audit: AuditSettings,
    pub sweep_resolution: usize,
    pub out_dir: PathBuf,
}

/// Every problem found in a config file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for e in &self.0 {
            writeln!(f, "  - {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

/// Overrides taken from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub task: Option<Task>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

pub fn parse(text: &str, overrides: &Overrides) -> Result<Scenario, ConfigErrors> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigErrors(vec![e.message().to_string()]))?;
    validate(raw, overrides)
}

fn validate(raw: RawConfig, overrides: &Overrides) -> Result<Scenario, ConfigErrors> {
    let mut errors = Vec::new();
    match raw.schema_version {
        Some(SCHEMA_VERSION) => {}
        Some(v) => errors.push(format!("schema_version {v} is not supported (expected {SCHEMA_VERSION})")),
        None => errors.push("schema_version is required".into()),
    }
    let task = match (overrides.task, raw.task) {
        (Some(cli), Some(file)) if cli != file => {
            errors.push(format!(
                "subcommand {} does not match task {} in the config",
                cli.name(),
                file.name()
            ));
            cli
        }
        (Some(t), _) | (None, Some(t)) => t,
        (None, None) => {
            errors.push("task is required".into());
            Task::Aggregate
        }
    };
    let seed = overrides.seed.or(raw.seed);
    let sweep = task == Task::Example1Sweep;

    // the sweep fixes its own game: two agents, two states
    let (states, agents) = if sweep {
        (2, 2)
    } else {
        let states = raw.profile.states.or(raw.profile.truths.as_ref().and_then(|t| t.first().map(Vec::len)));
        let agents = raw.profile.agents.or(raw.profile.truths.as_ref().map(Vec::len));
        if states.is_none() {
            errors.push("profile.states is required".into());
        }
        if agents.is_none() {
            errors.push("profile.agents is required".into());
        }
        (states.unwrap_or(2), agents.unwrap_or(1))
    };
    if states < 2 {
        errors.push(format!("profile.states must be at least 2, got {states}"));
    }
    if agents == 0 {
        errors.push("profile.agents must be at least 1".into());
    }

    let truths = match raw.profile.truths {
        Some(rows) if !sweep => {
            if task == Task::Axioms {
                errors.push("axioms samples its own profiles; drop profile.truths".into());
            }
            if raw.profile.instances.is_some() {
                errors.push("profile.instances only applies to random truths".into());
            }
            if rows.len() != agents {
                errors.push(format!("profile.truths has {} rows for {agents} agents", rows.len()));
            }
            if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != states) {
                errors.push(format!("profile.truths row {i} has {} entries for {states} states", row.len()));
            }
            match BeliefProfile::from_rows(rows) {
                Ok(p) => Truths::Explicit(p),
                Err(e) => {
                    errors.push(format!("profile.truths: {e}"));
                    Truths::Random { instances: 1 }
                }
            }
        }
        _ => {
            let instances = raw.profile.instances.unwrap_or(1);
            if instances == 0 {
                errors.push("profile.instances must be at least 1".into());
            }
            Truths::Random { instances }
        }
    };
    let randomized = matches!(truths, Truths::Random { .. }) && !sweep || task == Task::Axioms;
    if randomized && seed.is_none() {
        errors.push("seed is required for randomized tasks (set it in the config or pass --seed)".into());
    }

    let rule = parse_rule(&raw.rule, states, agents, task, &mut errors);
    let market = match (raw.market.prices, raw.market.wealth) {
        (None, None) => MarketSpec::uniform(states),
        (prices, wealth) => {
            let prices = prices.unwrap_or_else(|| vec![1.0; states]);
            if prices.len() != states && !sweep {
                errors.push(format!("market.prices has {} entries for {states} states", prices.len()));
            }
            MarketSpec::new(prices, wealth.unwrap_or(1.0)).unwrap_or_else(|e| {
                errors.push(format!("market: {e}"));
                MarketSpec::uniform(states)
            })
        }
    };
    let utility = match (raw.utility.kind.as_deref().unwrap_or("log"), raw.utility.gamma) {
        ("log", None) => UtilityIndex::Log,
        ("log", Some(_)) => {
            errors.push("utility.gamma only applies to kind = \"crra\"".into());
            UtilityIndex::Log
        }
        ("crra", Some(gamma)) => UtilityIndex::crra(gamma).unwrap_or_else(|e| {
            errors.push(format!("utility: {e}"));
            UtilityIndex::Log
        }),
        ("crra", None) => {
            errors.push("utility.gamma is required for kind = \"crra\"".into());
            UtilityIndex::Log
        }
        (other, _) => {
            errors.push(format!("utility.kind {other:?} is not one of \"log\", \"crra\""));
            UtilityIndex::Log
        }
    };
    if sweep && (!market.is_uniform() || !utility.is_log()) {
        errors.push("example1-sweep uses unit prices and log utility; drop the market and utility sections".into());
    }

    let defaults = Tolerance::default();
    let tol = Tolerance {
        abs_tol: raw.tolerance.abs_tol.unwrap_or(defaults.abs_tol),
        rel_tol: raw.tolerance.rel_tol.unwrap_or(defaults.rel_tol),
        max_iter: raw.tolerance.max_iter.unwrap_or(defaults.max_iter),
    };
    if let Err(e) = tol.validate() {
        errors.push(format!("tolerance: {e}"));
    }

    let max_rounds = raw.equilibrium.max_rounds.unwrap_or(1000);
    if max_rounds == 0 {
        errors.push("equilibrium.max_rounds must be at least 1".into());
    }
    let axioms = AxiomSettings {
        checks: raw.axioms.checks.unwrap_or_else(|| {
            vec![
                AxiomName::RecursiveInvariance,
                AxiomName::Monotonicity,
                AxiomName::NoVetoPower,
                AxiomName::StrategyProofness,
            ]
        }),
        samples: raw.axioms.samples.unwrap_or(200),
        resolution: raw.axioms.resolution.unwrap_or(20),
        oracle_resolution: raw.axioms.oracle_resolution,
    };
    if axioms.samples == 0 {
        errors.push("axioms.samples must be at least 1".into());
    }
    if axioms.resolution == 0 || axioms.oracle_resolution == Some(0) {
        errors.push("axioms resolutions must be at least 1".into());
    }
    if task == Task::Axioms && axioms.checks.contains(&AxiomName::NoVetoPower) && agents < 2 {
        errors.push("no-veto-power needs at least 2 agents".into());
    }

    let audit = AuditSettings {
        resolution: raw.mechanism.resolution.unwrap_or(20),
        integer_cap: raw.mechanism.integer_cap.unwrap_or(DEFAULT_INTEGER_CAP),
        consensus_integer: 1.min(raw.mechanism.integer_cap.unwrap_or(DEFAULT_INTEGER_CAP)),
        deviation_floor: raw.mechanism.deviation_floor.unwrap_or(DEFAULT_DEVIATION_FLOOR),
    };
    if audit.resolution == 0 {
        errors.push("mechanism.resolution must be at least 1".into());
    }
    if task == Task::MechanismAudit && agents < 3 {
        errors.push(format!("mechanism-audit needs at least 3 agents, got {agents}"));
    }

    let sweep_resolution = raw.sweep.resolution.unwrap_or(100);
    if sweep_resolution == 0 {
        errors.push("sweep.resolution must be at least 1".into());
    }

    if !errors.is_empty() {
        return Err(ConfigErrors(errors));
    }
    Ok(Scenario {
        name: raw.name.unwrap_or_else(|| task.name().to_string()),
        task,
        seed,
        states,
        agents,
        truths,
        rule,
        market,
        utility,
        tol,
        max_rounds,
        axioms,
        audit,
        sweep_resolution,
        out_dir: overrides.out_dir.clone().or(raw.output.dir).unwrap_or_else(|| PathBuf::from("out")),
    })
}

fn parse_rule(raw: &RawRule, states: usize, agents: usize, task: Task, errors: &mut Vec<String>) -> AggregationRule {
    let fallback = AggregationRule::symmetric_pool();
    let uses_rule = !matches!(task, Task::Parimutuel | Task::Example1Sweep);
    let Some(kind) = raw.kind.as_deref() else {
        if uses_rule {
            errors.push("rule.kind is required".into());
        }
        return fallback;
    };
    let mut unused = |field: &str, present: bool| {
        if present {
            errors.push(format!("rule.{field} does not apply to kind = {kind:?}"));
        }
    };
    let rule = match kind {
        "linear-pool" => {
            unused("agent", raw.agent.is_some());
            unused("belief", raw.belief.is_some());
            match &raw.weights {
                None => Ok(fallback.clone()),
                Some(w) if w.len() != agents => Err(format!("rule.weights has {} entries for {agents} agents", w.len())),
                Some(w) => AggregationRule::linear_pool(w.clone()).map_err(|e| format!("rule.weights: {e}")),
            }
        }
        "geometric-median" | "parimutuel" | "phantom-median" => {
            unused("weights", raw.weights.is_some());
            unused("agent", raw.agent.is_some());
            unused("belief", raw.belief.is_some());
            match kind {
                "geometric-median" if agents.is_multiple_of(2) => {
                    Err(format!("geometric-median needs an odd number of agents, got {agents}"))
                }
                "geometric-median" => Ok(AggregationRule::GeometricMedian),
                "parimutuel" => Ok(AggregationRule::ParimutuelPrice),
                _ if states != 2 => Err(format!("phantom-median needs 2 states, got {states}")),
                _ => Ok(AggregationRule::PhantomMedian2State),
            }
        }
        "dictatorship" => {
            unused("weights", raw.weights.is_some());
            unused("belief", raw.belief.is_some());
            match raw.agent {
                Some(a) if a < agents => Ok(AggregationRule::Custom(CustomRule::dictatorship(a))),
                Some(a) => Err(format!("rule.agent {a} is out of range for {agents} agents")),
                None => Err("rule.agent is required for kind = \"dictatorship\"".into()),
            }
        }
        "constant" => {
            unused("weights", raw.weights.is_some());
            unused("agent", raw.agent.is_some());
            match &raw.belief {
                Some(b) if b.len() != states => Err(format!("rule.belief has {} entries for {states} states", b.len())),
                Some(b) => Belief::new(b.clone())
                    .map(|b| AggregationRule::Custom(CustomRule::constant(b)))
                    .map_err(|e| format!("rule.belief: {e}")),
                None => Err("rule.belief is required for kind = \"constant\"".into()),
            }
        }
        other => Err(format!(
            "rule.kind {other:?} is not one of \"linear-pool\", \"geometric-median\", \"parimutuel\", \
             \"phantom-median\", \"dictatorship\", \"constant\""
        )),
    };
    rule.unwrap_or_else(|e| {
        errors.push(e);
        fallback
    })
}
