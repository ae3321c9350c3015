//! Fixed-time signal optimization over green splits.
//!
//! The decision vector holds one green split per endogenous phase, grouped
//! by intersection. Within an intersection the splits sum to the available
//! cycle ratio and each is bounded below, so the feasible set is a product
//! of shifted simplices. Search moves transfer green between two phases of
//! the same intersection and therefore never leave that set.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::baseline::run_deterministic_baseline;
use crate::config::{steps_in, Network, NetworkConfig};
use crate::error::{argument, config, Result};
use crate::loader::Loader;
use crate::sim::monte_carlo::replicate;

/// Sums of splits must match the available ratio to this tolerance.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-9;

fn default_cycle() -> f64 {
    90.0
}

fn default_min_green() -> f64 {
    4.0
}

fn default_objective_minutes() -> u32 {
    15
}

/// One signalized intersection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntersectionSpec {
    pub id: String,
    /// Ratio of available cycle time to total cycle time, `b_d`.
    pub available_ratio: f64,
    /// Links served by each endogenous phase.
    pub phases: Vec<Vec<String>>,
    /// Ratio of fixed green time to cycle time, per link.
    #[serde(default)]
    pub fixed_green: IndexMap<String, f64>,
}

/// Signal section of a scenario file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalConfig {
    pub saturation_flow_veh_s: f64,
    #[serde(default = "default_cycle")]
    pub cycle_s: f64,
    #[serde(default = "default_min_green")]
    pub min_green_s: f64,
    /// Length of the objective window in minutes.
    #[serde(default = "default_objective_minutes")]
    pub objective_minutes: u32,
    pub intersections: Vec<IntersectionSpec>,
}

impl SignalConfig {
    /// Lower bound on every green split, as a ratio of the cycle.
    pub fn min_split(&self) -> f64 {
        self.min_green_s / self.cycle_s
    }

    pub fn dimension(&self) -> usize {
        self.intersections.iter().map(|d| d.phases.len()).sum()
    }

    /// Index range of each intersection in the decision vector.
    pub fn blocks(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.intersections
            .iter()
            .map(|d| {
                let r = start..start + d.phases.len();
                start = r.end;
                r
            })
            .collect()
    }

    pub fn validate(&self, cfg: &NetworkConfig) -> Vec<String> {
        let mut issues = Vec::new();
        if !(self.saturation_flow_veh_s > 0.0) {
            issues.push(format!("saturation flow must be > 0 (got {})", self.saturation_flow_veh_s));
        }
        if !(self.cycle_s > 0.0) || !(self.min_green_s >= 0.0) {
            issues.push("cycle must be > 0 and minimum green >= 0".to_string());
        }
        if f64::from(self.objective_minutes) * 60.0 > cfg.horizon_s + 1e-9 {
            issues.push(format!(
                "objective window of {} min exceeds the horizon of {} s",
                self.objective_minutes, cfg.horizon_s
            ));
        }
        let lb = self.min_split();
        for d in &self.intersections {
            if !(d.available_ratio > 0.0 && d.available_ratio <= 1.0) {
                issues.push(format!("intersection {}: available ratio {} outside (0, 1]", d.id, d.available_ratio));
            }
            if d.phases.is_empty() {
                issues.push(format!("intersection {}: no phases", d.id));
            }
            if d.available_ratio <= d.phases.len() as f64 * lb {
                issues.push(format!(
                    "intersection {}: available ratio {} cannot fit {} phases of at least {lb}",
                    d.id,
                    d.available_ratio,
                    d.phases.len()
                ));
            }
            let mut seen: Vec<&String> = Vec::new();
            for link in d.phases.iter().flatten() {
                if !cfg.links.contains_key(link) {
                    issues.push(format!("intersection {}: unknown link {link}", d.id));
                }
                if seen.contains(&link) {
                    issues.push(format!("intersection {}: link {link} served by two phases", d.id));
                }
                seen.push(link);
            }
            for (link, e) in &d.fixed_green {
                if !cfg.links.contains_key(link) {
                    issues.push(format!("intersection {}: unknown link {link}", d.id));
                }
                if !(0.0..=1.0).contains(e) {
                    issues.push(format!("intersection {}: fixed green of {link} is {e}", d.id));
                }
            }
        }
        issues
    }
}

/// Green splits of all endogenous phases, intersection by intersection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalPlan {
    pub x: Vec<f64>,
}

impl SignalPlan {
    /// Every violated constraint; empty means feasible.
    pub fn violations(&self, signals: &SignalConfig) -> Vec<String> {
        let mut out = Vec::new();
        if self.x.len() != signals.dimension() {
            out.push(format!("plan has {} splits, expected {}", self.x.len(), signals.dimension()));
            return out;
        }
        let lb = signals.min_split();
        for (d, block) in signals.intersections.iter().zip(signals.blocks()) {
            let sum: f64 = self.x[block.clone()].iter().sum();
            if (sum - d.available_ratio).abs() > FEASIBILITY_TOLERANCE {
                out.push(format!("intersection {}: splits sum to {sum}, expected {}", d.id, d.available_ratio));
            }
            if self.x[block].iter().any(|v| *v < lb - FEASIBILITY_TOLERANCE || !v.is_finite()) {
                out.push(format!("intersection {}: split below the minimum {lb}", d.id));
            }
        }
        out
    }

    pub fn is_feasible(&self, signals: &SignalConfig) -> bool {
        self.violations(signals).is_empty()
    }

    /// Equal splits at every intersection.
    pub fn uniform(signals: &SignalConfig) -> Self {
        let x = signals
            .intersections
            .iter()
            .flat_map(|d| std::iter::repeat_n(d.available_ratio / d.phases.len() as f64, d.phases.len()))
            .collect();
        Self { x }
    }
}

/// Service rate of every link under `plan`: `(sum of served splits + fixed
/// green) * saturation flow` for signalized links, unchanged otherwise.
pub fn service_rates_from_plan(plan: &SignalPlan, net: &Network) -> Result<Vec<f64>> {
    let signals = net
        .signals
        .as_ref()
        .ok_or_else(|| config("scenario has no signal section"))?;
    let issues = plan.violations(signals);
    if !issues.is_empty() {
        return Err(argument(format!("infeasible plan: {}", issues.join("; "))));
    }
    let mut green: Vec<Option<f64>> = vec![None; net.link_count()];
    let lookup = |id: &str| net.link_index(id).ok_or_else(|| config(format!("unknown link {id}")));
    for (d, block) in signals.intersections.iter().zip(signals.blocks()) {
        for (phase, links) in block.zip(&d.phases) {
            for id in links {
                let g = green[lookup(id)?].get_or_insert(0.0);
                *g += plan.x[phase];
            }
        }
        for (id, e) in &d.fixed_green {
            let g = green[lookup(id)?].get_or_insert(0.0);
            *g += e;
        }
    }
    Ok(green
        .iter()
        .zip(&net.params)
        .map(|(g, p)| match g {
            Some(ratio) => ratio.min(1.0) * signals.saturation_flow_veh_s,
            None => p.service_rate_veh_s,
        })
        .collect())
}

/// Uniform draw from the feasible set: per intersection, exponential
/// spacings give a uniform point on the simplex of the free mass, which is
/// then shifted by the lower bound.
pub fn sample_feasible_plan<R: Rng + ?Sized>(signals: &SignalConfig, rng: &mut R) -> Result<SignalPlan> {
    let lb = signals.min_split();
    let mut x = Vec::with_capacity(signals.dimension());
    for d in &signals.intersections {
        let n = d.phases.len();
        let free = d.available_ratio - n as f64 * lb;
        if n == 0 || !(free > 0.0) {
            return Err(config(format!(
                "intersection {}: no feasible split (available {} for {n} phases, minimum {lb})",
                d.id, d.available_ratio
            )));
        }
        let spacings: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let total: f64 = spacings.iter().sum();
        let start = x.len();
        x.extend(spacings.iter().map(|e| lb + free * e / total));
        // pin the block sum exactly
        let drift: f64 = x[start..].iter().sum::<f64>() - d.available_ratio;
        x[start + n - 1] -= drift;
    }
    Ok(SignalPlan { x })
}

/// Loading model used to score a plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveModel {
    /// Stochastic network model: mean downstream queue.
    Analytical,
    /// Deterministic link transmission model: vehicles on the link.
    Deterministic,
    /// Event simulator with common random numbers across plans.
    MonteCarlo { replications: usize, seed: u64 },
}

impl std::str::FromStr for ObjectiveModel {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" | "analytical" => Ok(Self::Analytical),
            "baseline" | "deterministic" => Ok(Self::Deterministic),
            "mc" | "monte-carlo" => Ok(Self::MonteCarlo { replications: 100, seed: 0 }),
            other => Err(argument(format!("unknown model {other:?}"))),
        }
    }
}

fn objective_minutes(net: &Network) -> Result<u32> {
    let signals = net
        .signals
        .as_ref()
        .ok_or_else(|| config("scenario has no signal section"))?;
    let minutes = signals.objective_minutes;
    if f64::from(minutes) * 60.0 > net.horizon_s + 1e-9 {
        return Err(config("objective window exceeds the horizon"));
    }
    Ok(minutes)
}

/// Average over links and over integer minutes `1..=T` of the expected
/// downstream queue (or vehicles on the link for the deterministic model).
pub fn objective(plan: &SignalPlan, model: ObjectiveModel, net: &Network) -> Result<f64> {
    let minutes = objective_minutes(net)?;
    let rates = service_rates_from_plan(plan, net)?;
    let planned = net.with_service_rates(&rates);
    match model {
        ObjectiveModel::Analytical => analytical_queue_average(&planned, minutes),
        ObjectiveModel::Deterministic => deterministic_queue_average(&planned, minutes),
        ObjectiveModel::MonteCarlo { replications, seed } => {
            let values = simulated_queue_averages(&planned, minutes, replications, seed)?;
            Ok(values.iter().sum::<f64>() / values.len() as f64)
        }
    }
}

/// Analytical objective of a network whose service rates are already set.
pub fn analytical_queue_average(net: &Network, minutes: u32) -> Result<f64> {
    let per_minute = steps_in(60.0, net.delta_s);
    let mut loader = Loader::new(net)?;
    let mut total = 0.0;
    for _ in 0..minutes {
        for _ in 0..per_minute {
            loader.step()?;
        }
        total += (0..net.link_count()).map(|i| loader.expected_dq(i)).sum::<f64>();
    }
    Ok(total / (f64::from(minutes) * net.link_count() as f64))
}

/// Deterministic objective of a network whose service rates are already set.
pub fn deterministic_queue_average(net: &Network, minutes: u32) -> Result<f64> {
    let mut minute_net = net.with_horizon(f64::from(minutes) * 60.0);
    minute_net.output_stride_s = 60.0;
    let counts = run_deterministic_baseline(&minute_net)?;
    let mut total = 0.0;
    for t in 1..=minutes as usize {
        total += counts.c_up[t]
            .iter()
            .zip(&counts.c_down[t])
            .map(|(u, d)| u - d)
            .sum::<f64>();
    }
    Ok(total / (f64::from(minutes) * net.link_count() as f64))
}

/// Per-replication average of the simulated downstream queue over links and
/// integer minutes.
pub fn simulated_queue_averages(net: &Network, minutes: u32, replications: usize, seed: u64) -> Result<Vec<f64>> {
    let mut minute_net = net.with_horizon(f64::from(minutes) * 60.0);
    minute_net.output_stride_s = 60.0;
    let links = net.link_count() as f64;
    replicate(&minute_net, replications, seed, |traj| {
        let total: f64 = traj.samples[1..]
            .iter()
            .flat_map(|row| row.iter().map(|s| f64::from(s.dq)))
            .sum();
        total / (f64::from(minutes) * links)
    })
}

/// One evaluated plan.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceEntry {
    pub eval_index: usize,
    pub objective: f64,
    pub plan: SignalPlan,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptimizationOutcome {
    pub initial: SignalPlan,
    pub initial_objective: f64,
    pub best: SignalPlan,
    pub best_objective: f64,
    pub trace: Vec<TraceEntry>,
}

impl OptimizationOutcome {
    pub fn evaluations(&self) -> usize {
        self.trace.len()
    }
}

/// Search settings for [`optimize_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchSettings {
    pub initial_step: f64,
    pub min_step: f64,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self { initial_step: 0.1, min_step: 0.005 }
    }
}

/// Pattern search over paired green transfers with default settings.
pub fn optimize(initial: &SignalPlan, model: ObjectiveModel, net: &Network, budget: usize) -> Result<OptimizationOutcome> {
    optimize_with(initial, model, net, budget, SearchSettings::default())
}

/// All transfer moves of size up to `step` from `x`, intersection by
/// intersection, for every ordered phase pair.
fn transfer_moves(x: &SignalPlan, signals: &SignalConfig, step: f64) -> Vec<SignalPlan> {
    let lb = signals.min_split();
    let mut moves = Vec::new();
    for block in signals.blocks() {
        for from in block.clone() {
            for to in block.clone() {
                if from == to {
                    continue;
                }
                let amount = step.min(x.x[from] - lb);
                if amount <= 1e-12 {
                    continue;
                }
                let mut next = x.clone();
                next.x[from] -= amount;
                next.x[to] += amount;
                moves.push(next);
            }
        }
    }
    moves
}

fn evaluate_all(plans: &[SignalPlan], model: ObjectiveModel, net: &Network) -> Result<Vec<f64>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        plans.par_iter().map(|p| objective(p, model, net)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        plans.iter().map(|p| objective(p, model, net)).collect()
    }
}

/// Derivative-free pattern search: poll every transfer move, take the best
/// improving one, halve the step when none improves, and restart from the
/// incumbent at the initial step once the step falls below the minimum
/// (stopping when a restart brings no improvement).
pub fn optimize_with(
    initial: &SignalPlan,
    model: ObjectiveModel,
    net: &Network,
    budget: usize,
    settings: SearchSettings,
) -> Result<OptimizationOutcome> {
    if budget < 1 {
        return Err(argument("evaluation budget must be at least 1"));
    }
    let signals = net
        .signals
        .as_ref()
        .ok_or_else(|| config("scenario has no signal section"))?;
    let issues = initial.violations(signals);
    if !issues.is_empty() {
        return Err(argument(format!("infeasible initial plan: {}", issues.join("; "))));
    }

    let initial_objective = objective(initial, model, net)?;
    let mut trace = vec![TraceEntry { eval_index: 0, objective: initial_objective, plan: initial.clone() }];
    let mut best = initial.clone();
    let mut best_objective = initial_objective;
    let mut step = settings.initial_step;
    let mut improved_since_restart = false;

    while trace.len() < budget {
        let mut moves = transfer_moves(&best, signals, step);
        moves.truncate(budget - trace.len());
        if moves.is_empty() {
            break;
        }
        let values = evaluate_all(&moves, model, net)?;
        let mut winner: Option<usize> = None;
        for (m, (plan, value)) in moves.iter().zip(&values).enumerate() {
            debug_assert!(plan.is_feasible(signals));
            trace.push(TraceEntry { eval_index: trace.len(), objective: *value, plan: plan.clone() });
            let incumbent = winner.map_or(best_objective, |w| values[w]);
            if *value < incumbent - 1e-12 {
                winner = Some(m);
            }
        }
        match winner {
            Some(w) => {
                best = moves[w].clone();
                best_objective = values[w];
                improved_since_restart = true;
            }
            None => {
                step /= 2.0;
                if step < settings.min_step {
                    if !improved_since_restart {
                        break;
                    }
                    improved_since_restart = false;
                    step = settings.initial_step;
                }
            }
        }
    }

    Ok(OptimizationOutcome { initial: initial.clone(), initial_objective, best, best_objective, trace })
}
