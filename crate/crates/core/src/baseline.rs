//! Deterministic link transmission model on cumulative vehicle counts.
//!
//! Each link keeps its upstream and downstream cumulative counts. A link can
//! send what entered at least one forward lag ago and has not left, limited
//! by `mu * delta`; it can receive up to the space freed one backward lag
//! ago, limited by the flow capacity. Nodes split sending flows by the
//! turning probabilities and scale each incoming link by its most
//! constraining downstream receiving ratio, which preserves FIFO.

use serde::Serialize;

use crate::config::Network;
use crate::error::Result;

/// Cumulative counts at every output time.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CumulativeCounts {
    pub link_ids: Vec<String>,
    pub times: Vec<f64>,
    /// `c_up[t][link]`: vehicles that have entered the link.
    pub c_up: Vec<Vec<f64>>,
    /// `c_down[t][link]`: vehicles that have left the link.
    pub c_down: Vec<Vec<f64>>,
    /// Exogenous demand turned away by full entry links.
    pub lost: f64,
}

impl CumulativeCounts {
    /// Vehicles on `link` at output index `t`.
    pub fn on_link(&self, t: usize, link: usize) -> f64 {
        self.c_up[t][link] - self.c_down[t][link]
    }
}

fn lagged(series: &[f64], k: i64) -> f64 {
    if k < 0 {
        0.0
    } else {
        series[k as usize]
    }
}

/// Runs the deterministic model over the horizon.
pub fn run_deterministic_baseline(net: &Network) -> Result<CumulativeCounts> {
    let n = net.link_count();
    let delta = net.delta_s;
    let steps = net.steps();
    let stride = net.stride_steps();
    let mut up: Vec<Vec<f64>> = vec![vec![0.0]; n];
    let mut down: Vec<Vec<f64>> = vec![vec![0.0]; n];
    let mut sending = vec![0.0; n];
    let mut receiving = vec![0.0; n];
    let mut inflow = vec![0.0; n];
    let mut outflow = vec![0.0; n];
    let mut lost = 0.0;

    let mut out = CumulativeCounts {
        link_ids: net.link_ids.clone(),
        times: vec![0.0],
        c_up: vec![vec![0.0; n]],
        c_down: vec![vec![0.0; n]],
        lost: 0.0,
    };

    for k in 0..steps {
        let next = k as i64 + 1;
        for i in 0..n {
            let p = &net.params[i];
            let g = &net.geometry[i];
            let ready = lagged(&up[i], next - g.k_fwd as i64) - down[i][k];
            sending[i] = ready.min(p.service_rate_veh_s * delta).max(0.0);
            let space = lagged(&down[i], next - g.k_bwd as i64) + g.space_capacity as f64 - up[i][k];
            receiving[i] = space.min(p.flow_capacity() * delta).max(0.0);
            inflow[i] = 0.0;
            outflow[i] = sending[i];
        }

        for node in &net.nodes {
            let demand: Vec<f64> = (0..node.downstream.len())
                .map(|b| {
                    node.upstream
                        .iter()
                        .enumerate()
                        .map(|(a, &i)| sending[i] * node.turning[a][b])
                        .sum()
                })
                .collect();
            for (a, &i) in node.upstream.iter().enumerate() {
                let mut alpha: f64 = 1.0;
                for (b, &j) in node.downstream.iter().enumerate() {
                    if node.turning[a][b] > 0.0 && demand[b] > 0.0 {
                        alpha = alpha.min(receiving[j] / demand[b]);
                    }
                }
                outflow[i] = alpha * sending[i];
                for (b, &j) in node.downstream.iter().enumerate() {
                    inflow[j] += outflow[i] * node.turning[a][b];
                }
            }
        }

        let t = k as f64 * delta;
        for i in 0..n {
            let wanted = net.demand[i].rate_at(t) * delta;
            let admitted = wanted.min((receiving[i] - inflow[i]).max(0.0));
            lost += wanted - admitted;
            let u = up[i][k] + inflow[i] + admitted;
            let d = down[i][k] + outflow[i];
            up[i].push(u);
            down[i].push(d);
        }

        if (k + 1).is_multiple_of(stride) {
            out.times.push((k + 1) as f64 * delta);
            out.c_up.push(up.iter().map(|s| s[k + 1]).collect());
            out.c_down.push(down.iter().map(|s| s[k + 1]).collect());
        }
    }
    out.lost = lost;
    Ok(out)
}
