//! Browser bindings for the netload models.
//!
//! Three operations back the demo page: scenario trajectories, transient
//! queue-length distributions of a single birth-death link, and the
//! signal-split objective curve of one intersection. Each returns JSON.

use netload::kernel::QueueDistribution;
use netload::signal::{objective, ObjectiveModel, SignalPlan};
use netload::{propagate_birth_death, run_loading, scenarios};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct ScenarioRun {
    pub name: String,
    pub link_ids: Vec<String>,
    pub capacities: Vec<usize>,
    pub times: Vec<f64>,
    /// `e_uq[link][t]`.
    pub e_uq: Vec<Vec<f64>>,
    pub e_dq: Vec<Vec<f64>>,
}

/// Runs the analytical model on a bundled scenario. A weight outside
/// `[0, 1]` keeps the per-link defaults.
pub fn scenario_run(name: &str, weight: f64, horizon_s: f64) -> netload::Result<ScenarioRun> {
    let mut cfg = scenarios::load(name)?;
    if (0.0..=1.0).contains(&weight) {
        cfg.override_weight(weight);
    }
    if horizon_s > 0.0 {
        cfg.horizon_s = horizon_s.min(cfg.horizon_s);
    }
    let net = cfg.compile()?;
    let traj = run_loading(&net)?;
    let per_link = |f: fn(&netload::LinkRecord) -> f64| (0..net.link_count()).map(|i| traj.series(i, f)).collect();
    Ok(ScenarioRun {
        name: name.to_string(),
        capacities: net.geometry.iter().map(|g| g.space_capacity).collect(),
        e_uq: per_link(|r| r.e_uq),
        e_dq: per_link(|r| r.e_dq),
        link_ids: traj.link_ids,
        times: traj.times,
    })
}

#[derive(Debug, Serialize)]
pub struct Transient {
    pub times: Vec<f64>,
    /// `probs[t][n]`.
    pub probs: Vec<Vec<f64>>,
    pub means: Vec<f64>,
}

/// Queue-length distribution of an initially empty link over `frames`
/// snapshots spaced `dt` apart.
pub fn transient(capacity: usize, birth: f64, death: f64, dt: f64, frames: usize) -> netload::Result<Transient> {
    let mut d = QueueDistribution::point_mass(capacity, 0)?;
    let mut out = Transient { times: Vec::new(), probs: Vec::new(), means: Vec::new() };
    for f in 0..=frames {
        if f > 0 {
            d = propagate_birth_death(&d, birth, death, dt)?;
        }
        out.times.push(f as f64 * dt);
        out.means.push(d.mean());
        out.probs.push(d.probs().to_vec());
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct SplitCurve {
    pub intersection: String,
    pub splits: Vec<f64>,
    pub objective: Vec<f64>,
}

/// Objective as the first phase of one intersection takes `points` evenly
/// spaced splits; the remaining green goes to its other phases equally and
/// every other intersection keeps equal splits.
pub fn split_curve(name: &str, intersection: usize, points: usize, analytical: bool) -> netload::Result<SplitCurve> {
    let net = scenarios::load(name)?.compile()?;
    let signals = net
        .signals
        .clone()
        .ok_or_else(|| netload::Error::Config(format!("{name} has no signals")))?;
    let d = signals
        .intersections
        .get(intersection)
        .ok_or_else(|| netload::Error::Argument(format!("no intersection {intersection}")))?;
    let block = signals.blocks()[intersection].clone();
    let lb = signals.min_split();
    let rest = block.len() as f64 - 1.0;
    let hi = d.available_ratio - rest * lb;
    let model = if analytical { ObjectiveModel::Analytical } else { ObjectiveModel::Deterministic };
    let mut curve = SplitCurve { intersection: d.id.clone(), splits: Vec::new(), objective: Vec::new() };
    for p in 0..points.max(2) {
        let x = lb + (hi - lb) * p as f64 / (points.max(2) - 1) as f64;
        let mut plan = SignalPlan::uniform(&signals);
        plan.x[block.start] = x;
        for c in block.start + 1..block.end {
            plan.x[c] = (d.available_ratio - x) / rest;
        }
        curve.splits.push(x);
        curve.objective.push(objective(&plan, model, &net)?);
    }
    Ok(curve)
}

fn to_js<T: Serialize>(value: netload::Result<T>) -> Result<String, JsError> {
    let value = value.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = scenarioNames)]
pub fn scenario_names() -> String {
    serde_json::to_string(&scenarios::names().collect::<Vec<_>>()).unwrap_or_default()
}

#[wasm_bindgen(js_name = runScenario)]
pub fn run_scenario(name: &str, weight: f64, horizon_s: f64) -> Result<String, JsError> {
    to_js(scenario_run(name, weight, horizon_s))
}

#[wasm_bindgen(js_name = transientDistribution)]
pub fn transient_distribution(capacity: usize, birth: f64, death: f64, dt: f64, frames: usize) -> Result<String, JsError> {
    to_js(transient(capacity, birth, death, dt, frames))
}

#[wasm_bindgen(js_name = splitObjective)]
pub fn split_objective(name: &str, intersection: usize, points: usize, analytical: bool) -> Result<String, JsError> {
    to_js(split_curve(name, intersection, points, analytical))
}
