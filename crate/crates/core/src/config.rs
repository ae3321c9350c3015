//! Scenario files and their compiled, index-based form.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::link::{compute_geometry, LinkGeometry, LinkParams};
use crate::node::{NodeSpec, MAX_DOWNSTREAM, ROW_TOLERANCE};
use crate::signal::SignalConfig;

/// `[start_s, end_s)` at a constant entry rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandSegment {
    pub start_s: f64,
    pub end_s: f64,
    pub rate_veh_s: f64,
}

/// A node in scenario form: link ids plus a sparse turning table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub upstream: Vec<String>,
    pub downstream: Vec<String>,
    /// `turning[i][j]`; missing entries are zero.
    #[serde(default)]
    pub turning: IndexMap<String, IndexMap<String, f64>>,
}

/// A scenario file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub links: IndexMap<String, LinkParams>,
    #[serde(default)]
    pub nodes: Vec<NodeConfig>,
    #[serde(default)]
    pub demand: IndexMap<String, Vec<DemandSegment>>,
    pub delta_s: f64,
    pub horizon_s: f64,
    pub output_stride_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signals: Option<SignalConfig>,
}

impl NetworkConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Sets the mixture weight of every link.
    pub fn override_weight(&mut self, weight: f64) {
        for link in self.links.values_mut() {
            link.mixture_weight = Some(weight);
        }
    }

    /// Removes all exogenous demand.
    pub fn without_demand(mut self) -> Self {
        self.demand.clear();
        for link in self.links.values_mut() {
            link.entry_rate_veh_s = 0.0;
        }
        self
    }

    /// Every reason the configuration cannot be run; empty means runnable.
    pub fn validate(&self) -> Vec<String> {
        let mut issues = Vec::new();
        if !(self.delta_s > 0.0) || !self.delta_s.is_finite() {
            issues.push(format!("delta_s must be > 0 (got {})", self.delta_s));
        }
        if !(self.horizon_s > 0.0) || !self.horizon_s.is_finite() {
            issues.push(format!("horizon_s must be > 0 (got {})", self.horizon_s));
        }
        if !(self.output_stride_s > 0.0) || !self.output_stride_s.is_finite() {
            issues.push(format!("output_stride_s must be > 0 (got {})", self.output_stride_s));
        }
        if self.links.is_empty() {
            issues.push("no links".to_string());
        }
        for (id, link) in &self.links {
            for v in link.violations() {
                issues.push(format!("link {id}: {v}"));
            }
            if self.delta_s > 0.0 && link.violations().is_empty() {
                if let Err(e) = compute_geometry(link, self.delta_s) {
                    issues.push(format!("link {id}: {e}"));
                }
            }
        }

        let mut as_upstream: IndexMap<&str, usize> = IndexMap::new();
        let mut as_downstream: IndexMap<&str, usize> = IndexMap::new();
        for (n, node) in self.nodes.iter().enumerate() {
            let name = node.id.clone().unwrap_or_else(|| format!("#{n}"));
            for id in node.upstream.iter().chain(&node.downstream) {
                if !self.links.contains_key(id) {
                    issues.push(format!("node {name}: unknown link {id}"));
                }
            }
            for id in &node.upstream {
                *as_upstream.entry(id).or_default() += 1;
                if node.downstream.contains(id) {
                    issues.push(format!("node {name}: link {id} is both upstream and downstream"));
                }
            }
            for id in &node.downstream {
                *as_downstream.entry(id).or_default() += 1;
            }
            if node.downstream.len() > MAX_DOWNSTREAM {
                issues.push(format!(
                    "node {name}: {} downstream links exceed {MAX_DOWNSTREAM}; split the node",
                    node.downstream.len()
                ));
            }
            for (from, row) in &node.turning {
                if !node.upstream.contains(from) {
                    issues.push(format!("node {name}: turning row for non-upstream link {from}"));
                }
                for (to, p) in row {
                    if !node.downstream.contains(to) {
                        issues.push(format!("node {name}: turning from {from} to non-downstream link {to}"));
                    }
                    if !(*p >= 0.0) || !p.is_finite() {
                        issues.push(format!("node {name}: turning probability {from}->{to} is {p}"));
                    }
                }
                let sum: f64 = row.values().sum();
                if sum > 1.0 + ROW_TOLERANCE {
                    issues.push(format!("link {from}: turning probabilities sum to {sum} > 1"));
                }
            }
        }
        for (id, count) in as_upstream {
            if count > 1 {
                issues.push(format!("link {id} is upstream of {count} nodes"));
            }
        }
        for (id, count) in as_downstream {
            if count > 1 {
                issues.push(format!("link {id} is downstream of {count} nodes"));
            }
        }

        for (id, segments) in &self.demand {
            let Some(link) = self.links.get(id) else {
                issues.push(format!("demand for unknown link {id}"));
                continue;
            };
            if link.entry_rate_veh_s > 0.0 {
                issues.push(format!("link {id}: both entry_rate_veh_s and a demand profile are set"));
            }
            issues.extend(demand_coverage_issues(id, segments, self.horizon_s));
        }

        if let Some(signals) = &self.signals {
            issues.extend(signals.validate(self));
        }
        issues
    }

    /// Validates and compiles into the index-based form used by the models.
    pub fn compile(&self) -> Result<Network> {
        let issues = self.validate();
        if !issues.is_empty() {
            return Err(config(issues.join("; ")));
        }
        Network::build(self)
    }
}

fn demand_coverage_issues(id: &str, segments: &[DemandSegment], horizon: f64) -> Vec<String> {
    let mut issues = Vec::new();
    let mut sorted: Vec<&DemandSegment> = segments.iter().collect();
    sorted.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    for s in &sorted {
        if !(s.rate_veh_s >= 0.0) || !s.rate_veh_s.is_finite() {
            issues.push(format!("demand of link {id}: rate {} is invalid", s.rate_veh_s));
        }
        if !(s.end_s > s.start_s) {
            issues.push(format!("demand of link {id}: empty segment [{}, {})", s.start_s, s.end_s));
        }
    }
    let tol = 1e-9;
    let mut covered = 0.0;
    for s in &sorted {
        if s.start_s > covered + tol {
            issues.push(format!("demand of link {id}: interval [{covered}, {}) is not covered", s.start_s));
        } else if s.start_s < covered - tol {
            issues.push(format!("demand of link {id}: segments overlap at [{}, {covered})", s.start_s));
        }
        covered = covered.max(s.end_s);
    }
    if covered < horizon - tol {
        issues.push(format!("demand of link {id}: interval [{covered}, {horizon}) is not covered"));
    }
    issues
}

/// Piecewise-constant entry rate of one link.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DemandProfile {
    segments: Vec<DemandSegment>,
    constant: f64,
}

impl DemandProfile {
    pub fn constant(rate: f64) -> Self {
        Self { segments: Vec::new(), constant: rate }
    }

    pub fn piecewise(mut segments: Vec<DemandSegment>) -> Self {
        segments.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        Self { segments, constant: 0.0 }
    }

    /// Entry rate in effect at time `t` (segments are half-open).
    pub fn rate_at(&self, t: f64) -> f64 {
        if self.segments.is_empty() {
            return self.constant;
        }
        for s in &self.segments {
            if t >= s.start_s && t < s.end_s {
                return s.rate_veh_s;
            }
        }
        // at or after the last end: hold the last rate
        match self.segments.last() {
            Some(last) if t >= last.end_s => last.rate_veh_s,
            _ => 0.0,
        }
    }

    pub fn max_rate(&self) -> f64 {
        self.segments
            .iter()
            .map(|s| s.rate_veh_s)
            .fold(self.constant, f64::max)
    }

    pub fn segments(&self) -> &[DemandSegment] {
        &self.segments
    }

    pub fn is_zero(&self) -> bool {
        self.max_rate() <= 0.0
    }
}

/// Compiled network: links in file order, nodes by link index.
#[derive(Clone, Debug)]
pub struct Network {
    pub link_ids: Vec<String>,
    pub params: Vec<LinkParams>,
    pub geometry: Vec<LinkGeometry>,
    pub demand: Vec<DemandProfile>,
    pub nodes: Vec<NodeSpec>,
    /// Node whose upstream set contains the link, with the link's position.
    pub upstream_of: Vec<Option<(usize, usize)>>,
    /// Node whose downstream set contains the link, with the link's position.
    pub downstream_of: Vec<Option<(usize, usize)>>,
    pub delta_s: f64,
    pub horizon_s: f64,
    pub output_stride_s: f64,
    pub signals: Option<SignalConfig>,
}

impl Network {
    fn build(cfg: &NetworkConfig) -> Result<Self> {
        let link_ids: Vec<String> = cfg.links.keys().cloned().collect();
        let index = |id: &str| {
            cfg.links
                .get_index_of(id)
                .ok_or_else(|| config(format!("unknown link {id}")))
        };
        let params: Vec<LinkParams> = cfg.links.values().cloned().collect();
        let geometry = params
            .iter()
            .map(|p| compute_geometry(p, cfg.delta_s))
            .collect::<Result<Vec<_>>>()?;
        let demand = link_ids
            .iter()
            .zip(&params)
            .map(|(id, p)| match cfg.demand.get(id) {
                Some(segments) => DemandProfile::piecewise(segments.clone()),
                None => DemandProfile::constant(p.entry_rate_veh_s),
            })
            .collect();

        let mut nodes = Vec::with_capacity(cfg.nodes.len());
        let mut upstream_of = vec![None; link_ids.len()];
        let mut downstream_of = vec![None; link_ids.len()];
        for (n, node) in cfg.nodes.iter().enumerate() {
            let upstream = node.upstream.iter().map(|id| index(id)).collect::<Result<Vec<_>>>()?;
            let downstream = node.downstream.iter().map(|id| index(id)).collect::<Result<Vec<_>>>()?;
            let turning = node
                .upstream
                .iter()
                .map(|from| {
                    node.downstream
                        .iter()
                        .map(|to| {
                            node.turning
                                .get(from)
                                .and_then(|row| row.get(to))
                                .copied()
                                .unwrap_or(0.0)
                        })
                        .collect()
                })
                .collect();
            for (a, &i) in upstream.iter().enumerate() {
                upstream_of[i] = Some((n, a));
            }
            for (b, &j) in downstream.iter().enumerate() {
                downstream_of[j] = Some((n, b));
            }
            nodes.push(NodeSpec::new(upstream, downstream, turning)?);
        }

        Ok(Self {
            link_ids,
            params,
            geometry,
            demand,
            nodes,
            upstream_of,
            downstream_of,
            delta_s: cfg.delta_s,
            horizon_s: cfg.horizon_s,
            output_stride_s: cfg.output_stride_s,
            signals: cfg.signals.clone(),
        })
    }

    pub fn link_count(&self) -> usize {
        self.link_ids.len()
    }

    pub fn link_index(&self, id: &str) -> Option<usize> {
        self.link_ids.iter().position(|l| l == id)
    }

    /// Number of whole intervals in the horizon.
    pub fn steps(&self) -> usize {
        steps_in(self.horizon_s, self.delta_s)
    }

    /// Number of intervals per output stride (at least one).
    pub fn stride_steps(&self) -> usize {
        steps_in(self.output_stride_s, self.delta_s).max(1)
    }

    /// Probability that a vehicle leaving `link` exits the network there.
    pub fn exit_share(&self, link: usize) -> f64 {
        match self.upstream_of[link] {
            Some((n, a)) => 1.0 - self.nodes[n].transfer_share(a),
            None => 1.0,
        }
    }

    pub fn service_rates(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.service_rate_veh_s).collect()
    }

    /// Replaces the service rates (e.g. from a signal plan).
    pub fn with_service_rates(&self, rates: &[f64]) -> Self {
        let mut out = self.clone();
        for (p, &mu) in out.params.iter_mut().zip(rates) {
            p.service_rate_veh_s = mu;
        }
        out
    }

    /// Same network with a different horizon.
    pub fn with_horizon(&self, horizon_s: f64) -> Self {
        let mut out = self.clone();
        out.horizon_s = horizon_s;
        out
    }
}

pub(crate) fn steps_in(span: f64, delta: f64) -> usize {
    let x = span / delta;
    let r = x.round();
    if (x - r).abs() < 1e-6 {
        r as usize
    } else {
        x.floor() as usize
    }
}
