//! Across-node coupling of independently tracked links.
//!
//! The probability that an upstream link can discharge (its downstream
//! queue is non-empty and no downstream link is full) is expanded by
//! inclusion-exclusion over the blocking events. Joint terms are
//! approximated by treating the summed queue contents as Poisson with the
//! summed expected occupancies and splitting the sum multinomially.

use crate::error::{argument, config, Result};
use crate::kernel::{conditional_multinomial, ln_factorial, ln_poisson_pmf, poisson_pmf};
use crate::link::DIVISION_GUARD;

/// Largest downstream fan-out handled by the inclusion-exclusion expansion.
pub const MAX_DOWNSTREAM: usize = 10;

/// Turning-probability rows may exceed one by this much before being rejected.
pub const ROW_TOLERANCE: f64 = 1e-9;

/// A node as seen by the loader: link indices and turning probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeSpec {
    pub upstream: Vec<usize>,
    pub downstream: Vec<usize>,
    /// `turning[a][b]`: probability that a vehicle leaving `upstream[a]`
    /// enters `downstream[b]`. The row remainder leaves the network.
    pub turning: Vec<Vec<f64>>,
}

impl NodeSpec {
    pub fn new(upstream: Vec<usize>, downstream: Vec<usize>, turning: Vec<Vec<f64>>) -> Result<Self> {
        if turning.len() != upstream.len() || turning.iter().any(|row| row.len() != downstream.len()) {
            return Err(config("turning matrix shape does not match the node's links"));
        }
        if downstream.len() > MAX_DOWNSTREAM {
            return Err(config(format!(
                "node has {} downstream links (max {MAX_DOWNSTREAM}); split it into smaller nodes",
                downstream.len()
            )));
        }
        if upstream.iter().any(|i| downstream.contains(i)) {
            return Err(config("a link cannot be both upstream and downstream of the same node"));
        }
        for (a, row) in turning.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || s > 1.0 + ROW_TOLERANCE {
                return Err(config(format!(
                    "turning probabilities of upstream link #{} are invalid (sum {s})",
                    upstream[a]
                )));
            }
        }
        Ok(Self { upstream, downstream, turning })
    }

    /// Probability that a vehicle leaving `upstream[a]` stays in the network.
    pub fn transfer_share(&self, a: usize) -> f64 {
        self.turning[a].iter().sum::<f64>().min(1.0)
    }
}

/// Boundary quantities of one link at the end of an interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkBoundary {
    pub capacity: u64,
    /// `P(DQ = 0)` from the mixture marginal.
    pub p_dq_empty: f64,
    /// `P(UQ = capacity)` from the mixture marginal.
    pub p_uq_full: f64,
    /// Expected-state rate of DQ (veh/s); times the step length is `E[DQ]`.
    pub q_dq: f64,
    /// Expected-state rate of UQ (veh/s).
    pub q_uq: f64,
}

impl LinkBoundary {
    pub fn dq_empty_event(&self) -> BlockingEvent {
        BlockingEvent { marginal: self.p_dq_empty, rate: self.q_dq, target: 0 }
    }

    pub fn uq_full_event(&self) -> BlockingEvent {
        BlockingEvent { marginal: self.p_uq_full, rate: self.q_uq, target: self.capacity }
    }
}

/// Per-link boundary quantities, indexed like the network's links.
pub type BoundarySnapshot = [LinkBoundary];

/// One blocking event `{queue = target}` with its marginal probability and
/// the expected-state rate of its queue.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockingEvent {
    pub marginal: f64,
    pub rate: f64,
    pub target: u64,
}

/// Running sums over a subset of blocking events, updated one toggle at a time.
#[derive(Clone, Copy, Debug, Default)]
pub struct SubsetSums {
    pub mask: u32,
    pub len: u32,
    pub rate_sum: f64,
    pub target_sum: u64,
    /// `sum target * ln(rate) - ln(target!)` over members with target > 0.
    ln_weight: f64,
    /// Members with positive target but zero rate.
    impossible: u32,
}

impl SubsetSums {
    fn toggle(&mut self, bit: usize, e: &BlockingEvent) {
        let sign = if self.mask & (1 << bit) == 0 { 1.0 } else { -1.0 };
        self.mask ^= 1 << bit;
        if sign > 0.0 {
            self.len += 1;
            self.target_sum += e.target;
        } else {
            self.len -= 1;
            self.target_sum -= e.target;
        }
        self.rate_sum += sign * e.rate;
        if e.target > 0 {
            if e.rate > 0.0 {
                self.ln_weight += sign * (e.target as f64 * e.rate.ln() - ln_factorial(e.target));
            } else if sign > 0.0 {
                self.impossible += 1;
            } else {
                self.impossible -= 1;
            }
        }
        if self.len == 0 {
            self.rate_sum = 0.0;
            self.ln_weight = 0.0;
        }
    }

    pub fn members<'a>(&self, events: &'a [BlockingEvent]) -> impl Iterator<Item = &'a BlockingEvent> + 'a {
        let mask = self.mask;
        events.iter().enumerate().filter(move |(b, _)| mask & (1 << b) != 0).map(|(_, e)| e)
    }
}

/// Source of joint probabilities for the inclusion-exclusion expansion.
pub trait JointModel {
    /// Probability that every event in the (non-empty) subset occurs.
    fn joint(&self, events: &[BlockingEvent], subset: &SubsetSums, delta: f64) -> f64;
}

/// Poisson-sum / conditional-multinomial approximation; singletons use
/// their marginals.
#[derive(Clone, Copy, Debug, Default)]
pub struct PoissonJoints;

impl JointModel for PoissonJoints {
    fn joint(&self, events: &[BlockingEvent], s: &SubsetSums, delta: f64) -> f64 {
        if s.len == 1 {
            return events[s.mask.trailing_zeros() as usize].marginal;
        }
        if s.impossible > 0 {
            return 0.0;
        }
        if s.target_sum == 0 {
            // only possible with a zero target on every member
            return (-delta * s.rate_sum.max(0.0)).exp();
        }
        let rate = s.rate_sum.max(0.0);
        if rate <= 0.0 {
            return 0.0;
        }
        // Poisson(delta*q; t) * t!/prod(t_n!) * prod (q_n/q)^t_n
        let t = s.target_sum;
        let ln_p = ln_poisson_pmf(delta * rate, t) + ln_factorial(t) + s.ln_weight - t as f64 * rate.ln();
        ln_p.exp().clamp(0.0, 1.0)
    }
}

/// Exact joints of independent events: product of marginals.
#[derive(Clone, Copy, Debug, Default)]
pub struct IndependentJoints;

impl JointModel for IndependentJoints {
    fn joint(&self, events: &[BlockingEvent], s: &SubsetSums, _delta: f64) -> f64 {
        s.members(events).map(|e| e.marginal).product()
    }
}

/// Poisson/multinomial approximation of the joint probability of a set of
/// blocking events, through the kernel primitives.
pub fn joint_blocking_probability(events: &[BlockingEvent], delta: f64) -> Result<f64> {
    match events {
        [] => Err(argument("joint probability of an empty event set")),
        [single] => Ok(single.marginal),
        _ => {
            if events.iter().any(|e| e.target > 0 && e.rate <= 0.0) {
                return Ok(0.0);
            }
            let live: Vec<&BlockingEvent> = events.iter().filter(|e| e.rate > 0.0).collect();
            let total: u64 = events.iter().map(|e| e.target).sum();
            let rate: f64 = live.iter().map(|e| e.rate).sum();
            if live.is_empty() {
                return Ok(if total == 0 { 1.0 } else { 0.0 });
            }
            let counts: Vec<u64> = live.iter().map(|e| e.target).collect();
            let rates: Vec<f64> = live.iter().map(|e| e.rate).collect();
            let split = conditional_multinomial(total, &counts, &rates)?;
            Ok((poisson_pmf(delta * rate, total)? * split).clamp(0.0, 1.0))
        }
    }
}

/// `sum_{S} (-1)^|S| P(all events in S)`: the probability that none of the
/// events occurs. Subsets are visited in Gray-code order.
pub fn none_occur<J: JointModel>(events: &[BlockingEvent], delta: f64, joints: &J) -> f64 {
    let n = events.len();
    debug_assert!(n < 32);
    let mut sums = SubsetSums::default();
    let mut total = 1.0;
    for g in 1u32..(1u32 << n) {
        let bit = g.trailing_zeros() as usize;
        sums.toggle(bit, &events[bit]);
        let term = joints.joint(events, &sums, delta);
        if sums.len % 2 == 1 {
            total -= term;
        } else {
            total += term;
        }
    }
    total
}

/// `P(DQ_i > 0, UQ_n < l_n for all n)` by inclusion-exclusion, clamped to
/// `[0, min(P(DQ_i > 0), min_n P(UQ_n < l_n))]`. With `dq = None` the DQ
/// condition is dropped.
pub fn transmission_probability_with<J: JointModel>(
    dq: Option<BlockingEvent>,
    uq: &[BlockingEvent],
    delta: f64,
    joints: &J,
) -> Result<f64> {
    if uq.len() > MAX_DOWNSTREAM {
        return Err(config(format!(
            "{} downstream links exceed the supported {MAX_DOWNSTREAM}; split the node",
            uq.len()
        )));
    }
    let mut events = Vec::with_capacity(uq.len() + 1);
    events.extend(dq);
    events.extend_from_slice(uq);
    let upper = events
        .iter()
        .map(|e| 1.0 - e.marginal)
        .fold(1.0f64, f64::min)
        .max(0.0);
    let value = none_occur(&events, delta, joints);
    Ok(value.clamp(0.0, upper))
}

fn uq_events(node: &NodeSpec, snapshot: &BoundarySnapshot) -> Vec<BlockingEvent> {
    node.downstream.iter().map(|&n| snapshot[n].uq_full_event()).collect()
}

/// Flow transmission probability of `node.upstream[a]`.
pub fn flow_transmission_probability(a: usize, node: &NodeSpec, snapshot: &BoundarySnapshot, delta: f64) -> Result<f64> {
    let i = node.upstream[a];
    transmission_probability_with(
        Some(snapshot[i].dq_empty_event()),
        &uq_events(node, snapshot),
        delta,
        &PoissonJoints,
    )
}

/// Expected flow rate from `upstream[a]` to `downstream[b]`.
pub fn node_flow(a: usize, b: usize, node: &NodeSpec, snapshot: &BoundarySnapshot, mu: f64, delta: f64) -> Result<f64> {
    let p = node.turning[a][b];
    if p == 0.0 {
        return Ok(0.0);
    }
    Ok(p * mu * flow_transmission_probability(a, node, snapshot, delta)?)
}

fn service_from_conditional(mu: f64, share: f64, conditional: f64) -> f64 {
    mu * ((1.0 - share) + share * conditional.clamp(0.0, 1.0))
}

/// Effective service rate of `upstream[a]` with service rate `mu`.
pub fn effective_service_rate(a: usize, node: &NodeSpec, snapshot: &BoundarySnapshot, mu: f64, delta: f64) -> Result<f64> {
    let i = node.upstream[a];
    let transmission = flow_transmission_probability(a, node, snapshot, delta)?;
    let busy = 1.0 - snapshot[i].p_dq_empty;
    let conditional = conditional_space(transmission, busy, node, snapshot, delta)?;
    Ok(service_from_conditional(mu, node.transfer_share(a), conditional))
}

/// `P(UQ_n < l_n for all n | DQ_i > 0)`, falling back to the unconditional
/// probability when `P(DQ_i > 0)` vanishes.
fn conditional_space(
    transmission: f64,
    busy: f64,
    node: &NodeSpec,
    snapshot: &BoundarySnapshot,
    delta: f64,
) -> Result<f64> {
    if busy < DIVISION_GUARD {
        transmission_probability_with(None, &uq_events(node, snapshot), delta, &PoissonJoints)
    } else {
        Ok((transmission / busy).min(1.0))
    }
}

/// Arrival rate of `downstream[b]` given its exogenous entry rate and the
/// service rates `mus` of the node's upstream links (same order).
pub fn arrival_rate(
    b: usize,
    node: &NodeSpec,
    snapshot: &BoundarySnapshot,
    gamma: f64,
    mus: &[f64],
    delta: f64,
) -> Result<f64> {
    let j = node.downstream[b];
    let space = 1.0 - snapshot[j].p_uq_full;
    if space < DIVISION_GUARD {
        return Ok(gamma);
    }
    let mut lambda = gamma;
    for a in 0..node.upstream.len() {
        let p = node.turning[a][b];
        if p > 0.0 {
            let t = flow_transmission_probability(a, node, snapshot, delta)?;
            lambda += p * mus[a] * (t / space).min(1.0);
        }
    }
    Ok(lambda)
}

/// Everything the loader needs from one node for one interval.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeOutcome {
    /// Per upstream link.
    pub transmission: Vec<f64>,
    /// `transfer[a][b] = q_{upstream[a] -> downstream[b]}`.
    pub transfer: Vec<Vec<f64>>,
    /// Expected outflow rate per upstream link.
    pub outflow: Vec<f64>,
    /// Effective service rate per upstream link.
    pub effective_service: Vec<f64>,
    /// Transferred inflow per downstream link (no exogenous part).
    pub transfer_inflow: Vec<f64>,
    /// Arrival rate per downstream link excluding the exogenous entry rate.
    pub transfer_arrival: Vec<f64>,
}

/// Evaluates one node: transmission probabilities, node flows, expected
/// outflows, effective service rates and the endogenous part of the
/// downstream arrival rates.
pub fn evaluate_node(node: &NodeSpec, snapshot: &BoundarySnapshot, mus: &[f64], delta: f64) -> Result<NodeOutcome> {
    let m = node.upstream.len();
    let n = node.downstream.len();
    let uq = uq_events(node, snapshot);
    let mut out = NodeOutcome {
        transmission: Vec::with_capacity(m),
        transfer: Vec::with_capacity(m),
        outflow: Vec::with_capacity(m),
        effective_service: Vec::with_capacity(m),
        transfer_inflow: vec![0.0; n],
        transfer_arrival: vec![0.0; n],
    };
    let mut unconditional_space: Option<f64> = None;
    for (a, &i) in node.upstream.iter().enumerate() {
        let t = transmission_probability_with(Some(snapshot[i].dq_empty_event()), &uq, delta, &PoissonJoints)?;
        let busy = 1.0 - snapshot[i].p_dq_empty;
        let share = node.transfer_share(a);
        let conditional = if busy < DIVISION_GUARD {
            match unconditional_space {
                Some(v) => v,
                None => {
                    let v = transmission_probability_with(None, &uq, delta, &PoissonJoints)?;
                    unconditional_space = Some(v);
                    v
                }
            }
        } else {
            (t / busy).min(1.0)
        };
        let row: Vec<f64> = node.turning[a].iter().map(|p| p * mus[a] * t).collect();
        let exiting = mus[a] * (1.0 - share) * busy;
        out.outflow.push(exiting + row.iter().sum::<f64>());
        out.effective_service.push(service_from_conditional(mus[a], share, conditional));
        for (b, &j) in node.downstream.iter().enumerate() {
            out.transfer_inflow[b] += row[b];
            let space = 1.0 - snapshot[j].p_uq_full;
            if space >= DIVISION_GUARD && node.turning[a][b] > 0.0 {
                out.transfer_arrival[b] += node.turning[a][b] * mus[a] * (t / space).min(1.0);
            }
        }
        out.transmission.push(t);
        out.transfer.push(row);
    }
    Ok(out)
}

/// Expected node in/out rates: `(q_out per upstream, q_in per downstream)`.
pub fn expected_node_in_out_rates(
    node: &NodeSpec,
    snapshot: &BoundarySnapshot,
    mus: &[f64],
    gammas: &[f64],
    delta: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let outcome = evaluate_node(node, snapshot, mus, delta)?;
    let inflow = node
        .downstream
        .iter()
        .zip(&outcome.transfer_inflow)
        .zip(gammas)
        .map(|((&j, transfer), gamma)| gamma * (1.0 - snapshot[j].p_uq_full) + transfer)
        .collect();
    Ok((outcome.outflow, inflow))
}
