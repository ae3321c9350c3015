//! Stochastic network loading: links stepped independently, coupled through
//! the node model once per interval.
//!
//! Interval `k` is driven by the arrival and effective service rates of
//! interval `k - 1` (explicit stepping); the node model then produces the
//! flows and rates that drive interval `k + 1`.

use serde::Serialize;

use crate::config::Network;
use crate::error::Result;
use crate::kernel::QueueDistribution;
use crate::link::{default_mixture_weight, expected_dq_rate, expected_uq_rate, LinkState};
use crate::node::{evaluate_node, LinkBoundary, NodeOutcome};

/// Observable state of one link at one output time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LinkRecord {
    pub e_uq: f64,
    pub e_dq: f64,
    pub p_uq_full: f64,
    pub p_dq_empty: f64,
    pub q_in: f64,
    pub q_out: f64,
    pub lambda: f64,
    pub mu_eff: f64,
}

/// Link records at every output time.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    pub link_ids: Vec<String>,
    pub times: Vec<f64>,
    /// `records[t][link]`.
    pub records: Vec<Vec<LinkRecord>>,
}

impl Trajectory {
    /// Time series of one field of one link.
    pub fn series(&self, link: usize, field: impl Fn(&LinkRecord) -> f64) -> Vec<f64> {
        self.records.iter().map(|r| field(&r[link])).collect()
    }
}

/// Step-by-step evaluator of the network model.
pub struct Loader<'a> {
    net: &'a Network,
    links: Vec<LinkState>,
    weights: Vec<f64>,
    uq: Vec<QueueDistribution>,
    dq: Vec<QueueDistribution>,
    snapshot: Vec<LinkBoundary>,
    outcomes: Vec<NodeOutcome>,
    mus: Vec<Vec<f64>>,
    q_in: Vec<f64>,
    q_out: Vec<f64>,
    interval: usize,
}

impl<'a> Loader<'a> {
    /// Empty network at interval 0: point masses at zero, no flows,
    /// arrival rates at the initial entry rates, effective service rates at
    /// the service rates.
    pub fn new(net: &'a Network) -> Result<Self> {
        let n = net.link_count();
        let mut links = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            let p = &net.params[i];
            let gamma = net.demand[i].rate_at(0.0);
            let mu = p.service_rate_veh_s;
            links.push(LinkState::empty(net.geometry[i], p.flow_capacity(), gamma, mu));
            weights.push(p.mixture_weight.unwrap_or_else(|| default_mixture_weight(gamma, mu)));
        }
        let uq: Vec<QueueDistribution> = links.iter().map(|l| l.uq_from_uq_model.clone()).collect();
        let dq = uq.clone();
        let snapshot = net
            .geometry
            .iter()
            .map(|g| LinkBoundary {
                capacity: g.space_capacity as u64,
                p_dq_empty: 1.0,
                p_uq_full: 0.0,
                q_dq: 0.0,
                q_uq: 0.0,
            })
            .collect();
        let mus = net
            .nodes
            .iter()
            .map(|node| node.upstream.iter().map(|&i| net.params[i].service_rate_veh_s).collect())
            .collect();
        Ok(Self {
            net,
            links,
            weights,
            uq,
            dq,
            snapshot,
            outcomes: vec![NodeOutcome::default(); net.nodes.len()],
            mus,
            q_in: vec![0.0; n],
            q_out: vec![0.0; n],
            interval: 0,
        })
    }

    pub fn interval(&self) -> usize {
        self.interval
    }

    pub fn time(&self) -> f64 {
        self.interval as f64 * self.net.delta_s
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn link_state(&self, link: usize) -> &LinkState {
        &self.links[link]
    }

    /// Mixture marginals `(UQ, DQ)` of a link at the current interval.
    pub fn marginals(&self, link: usize) -> (&QueueDistribution, &QueueDistribution) {
        (&self.uq[link], &self.dq[link])
    }

    /// Boundary quantities seen by the node model in the last interval.
    pub fn boundary(&self, link: usize) -> &LinkBoundary {
        &self.snapshot[link]
    }

    /// Node model results of the last interval.
    pub fn node_outcome(&self, node: usize) -> &NodeOutcome {
        &self.outcomes[node]
    }

    pub fn expected_dq(&self, link: usize) -> f64 {
        self.dq[link].mean()
    }

    /// Number of values retained across all links for output.
    pub fn output_state_len(&self) -> usize {
        self.links.iter().map(LinkState::output_state_len).sum()
    }

    pub fn record(&self, link: usize) -> LinkRecord {
        let state = &self.links[link];
        LinkRecord {
            e_uq: self.uq[link].mean(),
            e_dq: self.dq[link].mean(),
            p_uq_full: self.uq[link].p_full(),
            p_dq_empty: self.dq[link].p_empty(),
            q_in: self.q_in[link],
            q_out: self.q_out[link],
            lambda: state.arrival_rate,
            mu_eff: state.effective_service_rate,
        }
    }

    pub fn records(&self) -> Vec<LinkRecord> {
        (0..self.links.len()).map(|i| self.record(i)).collect()
    }

    /// Advances one interval.
    pub fn step(&mut self) -> Result<()> {
        let net = self.net;
        let delta = net.delta_s;
        let k = self.interval as i64 + 1;

        // link phase: both univariate models, then the mixture
        for (i, link) in self.links.iter_mut().enumerate() {
            let (lambda, mu_eff) = (link.arrival_rate, link.effective_service_rate);
            link.step_univariate_uq(lambda, mu_eff, delta)?;
            link.step_univariate_dq(lambda, mu_eff, delta)?;
            let w = self.weights[i];
            self.uq[i].mix_into(&link.uq_from_uq_model, &link.uq_from_dq_model, w);
            self.dq[i].mix_into(&link.dq_from_uq_model, &link.dq_from_dq_model, w);
            let g = link.geometry;
            self.snapshot[i] = LinkBoundary {
                capacity: g.space_capacity as u64,
                p_dq_empty: self.dq[i].p_empty(),
                p_uq_full: self.uq[i].p_full(),
                q_dq: expected_dq_rate(&link.history, k, g.k_fwd),
                q_uq: expected_uq_rate(&link.history, k, g.k_bwd),
            };
        }

        // node phase
        for (n, node) in net.nodes.iter().enumerate() {
            self.outcomes[n] = evaluate_node(node, &self.snapshot, &self.mus[n], delta)?;
        }

        // rate commit
        let t = k as f64 * delta;
        for (i, link) in self.links.iter_mut().enumerate() {
            let mu = net.params[i].service_rate_veh_s;
            let busy = 1.0 - self.snapshot[i].p_dq_empty;
            let space = 1.0 - self.snapshot[i].p_uq_full;
            let (mu_eff, q_out) = match net.upstream_of[i] {
                Some((n, a)) => (self.outcomes[n].effective_service[a], self.outcomes[n].outflow[a]),
                None => (mu, mu * busy),
            };
            let gamma = net.demand[i].rate_at(t);
            let (lambda, q_in) = match net.downstream_of[i] {
                Some((n, b)) => (
                    gamma + self.outcomes[n].transfer_arrival[b],
                    gamma * space + self.outcomes[n].transfer_inflow[b],
                ),
                None => (gamma, gamma * space),
            };
            link.commit(q_in, q_out, lambda, mu_eff);
            self.q_in[i] = q_in;
            self.q_out[i] = q_out;
        }
        self.interval += 1;
        Ok(())
    }

    /// Runs to the horizon, calling `visit` at interval 0 and after every
    /// output stride.
    pub fn run(mut self, mut visit: impl FnMut(&Loader<'_>)) -> Result<()> {
        let steps = self.net.steps();
        let stride = self.net.stride_steps();
        visit(&self);
        while self.interval < steps {
            self.step()?;
            if self.interval.is_multiple_of(stride) {
                visit(&self);
            }
        }
        Ok(())
    }
}

/// Runs the network model over the horizon and collects the output records.
pub fn run_loading(net: &Network) -> Result<Trajectory> {
    let mut times = Vec::new();
    let mut records = Vec::new();
    Loader::new(net)?.run(|l| {
        times.push(l.time());
        records.push(l.records());
    })?;
    Ok(Trajectory { link_ids: net.link_ids.clone(), times, records })
}
