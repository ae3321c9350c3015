//! Independent replications and their aggregate statistics.
//!
//! Every replication draws from its own generator seeded by
//! [`replication_seed`], so results depend only on the base seed and the
//! replication count, not on how the work is split across threads.

use serde::Serialize;

use super::{output_times, simulate_replication, SampledTrajectory};
use crate::config::Network;
use crate::error::{argument, Result};

/// Normal quantile for 95% confidence intervals.
pub const Z_95: f64 = 1.96;

const CHUNK: usize = 16;

/// Seed of replication `r`: a splitmix64 scramble of the base seed and the
/// replication index.
pub fn replication_seed(base: u64, r: u64) -> u64 {
    let mut z = base ^ r.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Runs `replications` replications and maps each through `f`, in
/// replication order.
pub fn replicate<T, F>(net: &Network, replications: usize, seed: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&SampledTrajectory) -> T + Sync,
{
    if replications == 0 {
        return Err(argument("at least one replication is required"));
    }
    let run = |r: usize| simulate_replication(net, replication_seed(seed, r as u64)).map(|t| f(&t));
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..replications).into_par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..replications).map(run).collect()
    }
}

/// Aggregate statistics of one link at one output time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SimStats {
    pub e_uq: f64,
    pub e_dq: f64,
    pub p_uq_full: f64,
    pub p_dq_empty: f64,
    /// Mean entry rate over the stride ending here.
    pub q_in: f64,
    /// Mean exit rate over the stride ending here.
    pub q_out: f64,
    pub ci_half_width_uq: f64,
    pub ci_half_width_dq: f64,
}

/// Monte-Carlo estimates of the network state.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonteCarloResult {
    pub link_ids: Vec<String>,
    pub times: Vec<f64>,
    pub replications: usize,
    /// `stats[t][link]`.
    pub stats: Vec<Vec<SimStats>>,
    pub lost_vehicles: f64,
}

impl MonteCarloResult {
    pub fn series(&self, link: usize, field: impl Fn(&SimStats) -> f64) -> Vec<f64> {
        self.stats.iter().map(|r| field(&r[link])).collect()
    }
}

#[derive(Clone, Debug)]
struct Accumulator {
    sum_uq: Vec<f64>,
    sum_uq2: Vec<f64>,
    sum_dq: Vec<f64>,
    sum_dq2: Vec<f64>,
    full: Vec<u64>,
    empty: Vec<u64>,
    entered: Vec<u64>,
    exited: Vec<u64>,
    lost: u64,
}

impl Accumulator {
    fn new(cells: usize) -> Self {
        Self {
            sum_uq: vec![0.0; cells],
            sum_uq2: vec![0.0; cells],
            sum_dq: vec![0.0; cells],
            sum_dq2: vec![0.0; cells],
            full: vec![0; cells],
            empty: vec![0; cells],
            entered: vec![0; cells],
            exited: vec![0; cells],
            lost: 0,
        }
    }

    fn add(&mut self, traj: &SampledTrajectory, capacities: &[u32]) {
        let n = capacities.len();
        for (t, row) in traj.samples.iter().enumerate() {
            for (i, s) in row.iter().enumerate() {
                let c = t * n + i;
                let (uq, dq) = (f64::from(s.uq), f64::from(s.dq));
                self.sum_uq[c] += uq;
                self.sum_uq2[c] += uq * uq;
                self.sum_dq[c] += dq;
                self.sum_dq2[c] += dq * dq;
                self.full[c] += u64::from(s.uq >= capacities[i]);
                self.empty[c] += u64::from(s.dq == 0);
                self.entered[c] += u64::from(s.entered);
                self.exited[c] += u64::from(s.exited);
            }
        }
        self.lost += traj.lost;
    }

    fn merge(&mut self, other: &Self) {
        let add_f = |a: &mut Vec<f64>, b: &Vec<f64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        let add_u = |a: &mut Vec<u64>, b: &Vec<u64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add_f(&mut self.sum_uq, &other.sum_uq);
        add_f(&mut self.sum_uq2, &other.sum_uq2);
        add_f(&mut self.sum_dq, &other.sum_dq);
        add_f(&mut self.sum_dq2, &other.sum_dq2);
        add_u(&mut self.full, &other.full);
        add_u(&mut self.empty, &other.empty);
        add_u(&mut self.entered, &other.entered);
        add_u(&mut self.exited, &other.exited);
        self.lost += other.lost;
    }
}

fn half_width(sum: f64, sum2: f64, r: f64) -> f64 {
    if r < 2.0 {
        return 0.0;
    }
    let mean = sum / r;
    let var = ((sum2 - r * mean * mean) / (r - 1.0)).max(0.0);
    Z_95 * (var / r).sqrt()
}

/// Runs the replications and aggregates them. Replications are processed
/// in fixed-size chunks whose partial sums are merged in chunk order, which
/// keeps the floating-point result identical for any thread count.
pub fn monte_carlo(net: &Network, replications: usize, seed: u64) -> Result<MonteCarloResult> {
    if replications == 0 {
        return Err(argument("at least one replication is required"));
    }
    let times = output_times(net);
    let n = net.link_count();
    let cells = times.len() * n;
    let capacities: Vec<u32> = net.geometry.iter().map(|g| g.space_capacity as u32).collect();
    let chunks = replications.div_ceil(CHUNK);
    let run_chunk = |c: usize| -> Result<Accumulator> {
        let mut acc = Accumulator::new(cells);
        for r in c * CHUNK..((c + 1) * CHUNK).min(replications) {
            let traj = simulate_replication(net, replication_seed(seed, r as u64))?;
            acc.add(&traj, &capacities);
        }
        Ok(acc)
    };
    #[cfg(feature = "parallel")]
    let partial: Vec<Accumulator> = {
        use rayon::prelude::*;
        (0..chunks).into_par_iter().map(run_chunk).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let partial: Vec<Accumulator> = (0..chunks).map(run_chunk).collect::<Result<_>>()?;

    let mut total = Accumulator::new(cells);
    for p in &partial {
        total.merge(p);
    }

    let r = replications as f64;
    let stride_s = net.stride_steps() as f64 * net.delta_s;
    let stats = (0..times.len())
        .map(|t| {
            (0..n)
                .map(|i| {
                    let c = t * n + i;
                    let window = if t == 0 { f64::INFINITY } else { stride_s };
                    SimStats {
                        e_uq: total.sum_uq[c] / r,
                        e_dq: total.sum_dq[c] / r,
                        p_uq_full: total.full[c] as f64 / r,
                        p_dq_empty: total.empty[c] as f64 / r,
                        q_in: total.entered[c] as f64 / r / window,
                        q_out: total.exited[c] as f64 / r / window,
                        ci_half_width_uq: half_width(total.sum_uq[c], total.sum_uq2[c], r),
                        ci_half_width_dq: half_width(total.sum_dq[c], total.sum_dq2[c], r),
                    }
                })
                .collect()
        })
        .collect();
    Ok(MonteCarloResult {
        link_ids: net.link_ids.clone(),
        times,
        replications,
        stats,
        lost_vehicles: total.lost as f64 / r,
    })
}
