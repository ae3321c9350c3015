//! Discrete-event simulation of the same link and node semantics, used as
//! the ground truth for the analytical model.
//!
//! A vehicle entering a link occupies one space immediately, joins the
//! downstream queue after `L / v`, and is served first-in first-out at rate
//! `mu`. Its next link is drawn when service starts. If that link has no
//! free space when service completes, the head vehicle blocks the link
//! until a space is released, and service is drawn afresh. A departing
//! vehicle frees its space after `L / |w|`. External arrivals that find the
//! entry link full are lost.

pub mod monte_carlo;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::Serialize;

use crate::config::Network;
use crate::error::{Error, Result};

/// Tie-break order for simultaneous events: space releases first, then
/// vehicles reaching the queue, then service completions, then arrivals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    BackwardLag,
    ForwardLag,
    ServiceCompletion,
    ExternalArrival,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimEvent {
    pub time: f64,
    pub kind: EventKind,
    pub link: usize,
    pub seq: u64,
}

impl Eq for SimEvent {}

impl Ord for SimEvent {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.kind.cmp(&self.kind))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Destination {
    Exit,
    Link(usize),
}

#[derive(Clone, Copy, Debug)]
struct Vehicle {
    id: u64,
    dest: Option<Destination>,
}

#[derive(Clone, Debug, Default)]
struct SimLink {
    uq: u32,
    capacity: u32,
    transit: VecDeque<u64>,
    dq: VecDeque<Vehicle>,
    serving: bool,
    blocked: bool,
    entered: u32,
    exited: u32,
}

/// Counts of one link at one output time. `entered` and `exited` cover the
/// stride ending at that time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SimSample {
    pub uq: u32,
    pub dq: u32,
    pub entered: u32,
    pub exited: u32,
}

/// Order in which vehicles entered and left each link.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OrderLog {
    pub entries: Vec<Vec<u64>>,
    pub departures: Vec<Vec<u64>>,
}

/// One replication sampled at the output times.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampledTrajectory {
    pub times: Vec<f64>,
    /// `samples[t][link]`.
    pub samples: Vec<Vec<SimSample>>,
    pub generated: u64,
    pub lost: u64,
    pub exited_network: u64,
    pub in_network: u64,
    pub events: u64,
}

/// Event-driven simulator of one replication.
pub struct Simulator<'a> {
    net: &'a Network,
    rng: ChaCha8Rng,
    links: Vec<SimLink>,
    /// Links whose head vehicle waits for space on the indexed link.
    waiting: Vec<Vec<usize>>,
    heap: BinaryHeap<SimEvent>,
    forward_lag: Vec<f64>,
    backward_lag: Vec<f64>,
    next_seq: u64,
    next_vehicle: u64,
    now: f64,
    generated: u64,
    lost: u64,
    exited_network: u64,
    events: u64,
    log: Option<OrderLog>,
}

impl<'a> Simulator<'a> {
    pub fn new(net: &'a Network, seed: u64) -> Self {
        let n = net.link_count();
        let links = net
            .geometry
            .iter()
            .map(|g| SimLink { capacity: g.space_capacity as u32, ..SimLink::default() })
            .collect();
        let forward_lag = net.params.iter().map(|p| p.length_km / p.free_flow_speed_km_s).collect();
        let backward_lag = net
            .params
            .iter()
            .map(|p| p.length_km / p.backward_wave_speed_km_s.abs())
            .collect();
        let mut sim = Self {
            net,
            rng: ChaCha8Rng::seed_from_u64(seed),
            links,
            waiting: vec![Vec::new(); n],
            heap: BinaryHeap::new(),
            forward_lag,
            backward_lag,
            next_seq: 0,
            next_vehicle: 0,
            now: 0.0,
            generated: 0,
            lost: 0,
            exited_network: 0,
            events: 0,
            log: None,
        };
        for i in 0..n {
            sim.schedule_arrival(i, 0.0);
        }
        sim
    }

    /// Records the entry and departure order of every vehicle.
    pub fn with_order_log(mut self) -> Self {
        let n = self.net.link_count();
        self.log = Some(OrderLog { entries: vec![Vec::new(); n], departures: vec![Vec::new(); n] });
        self
    }

    pub fn order_log(&self) -> Option<&OrderLog> {
        self.log.as_ref()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    fn exp(&mut self, rate: f64) -> f64 {
        let e: f64 = self.rng.sample(Exp1);
        e / rate
    }

    fn push(&mut self, time: f64, kind: EventKind, link: usize) {
        self.heap.push(SimEvent { time, kind, link, seq: self.next_seq });
        self.next_seq += 1;
    }

    /// Next candidate of the thinned arrival process after `from`.
    fn schedule_arrival(&mut self, link: usize, from: f64) {
        let bound = self.net.demand[link].max_rate();
        if bound <= 0.0 {
            return;
        }
        let t = from + self.exp(bound);
        if t < self.net.horizon_s {
            self.push(t, EventKind::ExternalArrival, link);
        }
    }

    fn enter(&mut self, link: usize, vehicle: u64) {
        let l = &mut self.links[link];
        l.uq += 1;
        l.entered += 1;
        l.transit.push_back(vehicle);
        if let Some(log) = &mut self.log {
            log.entries[link].push(vehicle);
        }
        let t = self.now + self.forward_lag[link];
        self.push(t, EventKind::ForwardLag, link);
    }

    fn draw_destination(&mut self, link: usize) -> Destination {
        let Some((n, a)) = self.net.upstream_of[link] else {
            return Destination::Exit;
        };
        let node = &self.net.nodes[n];
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        for (b, &p) in node.turning[a].iter().enumerate() {
            acc += p;
            if u < acc {
                return Destination::Link(node.downstream[b]);
            }
        }
        Destination::Exit
    }

    fn try_start_service(&mut self, link: usize) {
        let l = &self.links[link];
        if l.serving || l.blocked || l.dq.is_empty() {
            return;
        }
        if l.dq[0].dest.is_none() {
            let d = self.draw_destination(link);
            self.links[link].dq[0].dest = Some(d);
        }
        self.links[link].serving = true;
        let t = self.now + self.exp(self.net.params[link].service_rate_veh_s);
        self.push(t, EventKind::ServiceCompletion, link);
    }

    fn complete_service(&mut self, link: usize) -> Result<()> {
        self.links[link].serving = false;
        let head = *self.links[link]
            .dq
            .front()
            .ok_or_else(|| Error::Internal(format!("service completed on empty link {link}")))?;
        let dest = head.dest.unwrap_or(Destination::Exit);
        if let Destination::Link(j) = dest {
            if self.links[j].uq >= self.links[j].capacity {
                self.links[link].blocked = true;
                self.waiting[j].push(link);
                return Ok(());
            }
        }
        self.links[link].dq.pop_front();
        self.links[link].exited += 1;
        if let Some(log) = &mut self.log {
            log.departures[link].push(head.id);
        }
        let t = self.now + self.backward_lag[link];
        self.push(t, EventKind::BackwardLag, link);
        match dest {
            Destination::Link(j) => self.enter(j, head.id),
            Destination::Exit => self.exited_network += 1,
        }
        self.try_start_service(link);
        Ok(())
    }

    fn handle(&mut self, ev: SimEvent) -> Result<()> {
        self.now = ev.time;
        self.events += 1;
        let i = ev.link;
        match ev.kind {
            EventKind::ExternalArrival => {
                self.schedule_arrival(i, ev.time);
                let gamma = self.net.demand[i].rate_at(ev.time);
                let bound = self.net.demand[i].max_rate();
                let u: f64 = self.rng.random();
                if u * bound < gamma {
                    self.generated += 1;
                    if self.links[i].uq < self.links[i].capacity {
                        let id = self.next_vehicle;
                        self.next_vehicle += 1;
                        self.enter(i, id);
                    } else {
                        self.lost += 1;
                    }
                }
            }
            EventKind::ForwardLag => {
                let id = self.links[i]
                    .transit
                    .pop_front()
                    .ok_or_else(|| Error::Internal(format!("no vehicle in transit on link {i}")))?;
                self.links[i].dq.push_back(Vehicle { id, dest: None });
                self.try_start_service(i);
            }
            EventKind::ServiceCompletion => self.complete_service(i)?,
            EventKind::BackwardLag => {
                let l = &mut self.links[i];
                l.uq = l
                    .uq
                    .checked_sub(1)
                    .ok_or_else(|| Error::Internal(format!("space released on empty link {i}")))?;
                let waiting = std::mem::take(&mut self.waiting[i]);
                for w in waiting {
                    self.links[w].blocked = false;
                    self.try_start_service(w);
                }
            }
        }
        let l = &self.links[i];
        if l.dq.len() as u32 > l.uq || l.uq > l.capacity {
            return Err(Error::Internal(format!(
                "link {i}: queue invariant broken (dq {}, uq {}, capacity {})",
                l.dq.len(),
                l.uq,
                l.capacity
            )));
        }
        Ok(())
    }

    /// Processes every event up to and including time `t`.
    pub fn advance_to(&mut self, t: f64) -> Result<()> {
        while let Some(ev) = self.heap.peek() {
            if ev.time > t {
                break;
            }
            let ev = self.heap.pop().expect("peeked");
            self.handle(ev)?;
        }
        self.now = self.now.max(t);
        Ok(())
    }

    /// Current counts; resets the stride counters.
    pub fn sample(&mut self) -> Vec<SimSample> {
        self.links
            .iter_mut()
            .map(|l| {
                let s = SimSample { uq: l.uq, dq: l.dq.len() as u32, entered: l.entered, exited: l.exited };
                l.entered = 0;
                l.exited = 0;
                s
            })
            .collect()
    }

    pub fn vehicles_in_network(&self) -> u64 {
        self.links.iter().map(|l| (l.transit.len() + l.dq.len()) as u64).sum()
    }

    /// Runs to the horizon, sampling at the output times of `net`.
    pub fn run(mut self) -> Result<SampledTrajectory> {
        let times = output_times(self.net);
        let mut samples = Vec::with_capacity(times.len());
        for &t in &times {
            self.advance_to(t)?;
            samples.push(self.sample());
        }
        Ok(SampledTrajectory {
            times,
            samples,
            generated: self.generated,
            lost: self.lost,
            exited_network: self.exited_network,
            in_network: self.vehicles_in_network(),
            events: self.events,
        })
    }
}

/// Output times shared with the analytical model: every stride from zero to
/// the horizon.
pub fn output_times(net: &Network) -> Vec<f64> {
    let stride = net.stride_steps();
    (0..=net.steps() / stride)
        .map(|m| (m * stride) as f64 * net.delta_s)
        .collect()
}

/// Runs one replication with the given seed.
pub fn simulate_replication(net: &Network, seed: u64) -> Result<SampledTrajectory> {
    Simulator::new(net, seed).run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios;

    fn merge() -> Network {
        scenarios::load("merge_exp1").unwrap().compile().unwrap()
    }

    #[test]
    fn event_priority() {
        let at = |time, kind, seq| SimEvent { time, kind, link: 0, seq };
        let mut heap = BinaryHeap::new();
        heap.push(at(1.0, EventKind::ExternalArrival, 0));
        heap.push(at(1.0, EventKind::BackwardLag, 3));
        heap.push(at(0.5, EventKind::ServiceCompletion, 4));
        heap.push(at(1.0, EventKind::ForwardLag, 1));
        heap.push(at(1.0, EventKind::ForwardLag, 2));
        let order: Vec<(f64, EventKind, u64)> =
            std::iter::from_fn(|| heap.pop().map(|e| (e.time, e.kind, e.seq))).collect();
        assert_eq!(
            order,
            vec![
                (0.5, EventKind::ServiceCompletion, 4),
                (1.0, EventKind::BackwardLag, 3),
                (1.0, EventKind::ForwardLag, 1),
                (1.0, EventKind::ForwardLag, 2),
                (1.0, EventKind::ExternalArrival, 0),
            ]
        );
    }

    #[test]
    fn same_seed_same_trajectory() {
        let net = merge();
        assert_eq!(simulate_replication(&net, 42).unwrap(), simulate_replication(&net, 42).unwrap());
        assert_ne!(simulate_replication(&net, 42).unwrap(), simulate_replication(&net, 43).unwrap());
    }

    #[test]
    fn conservation_and_bounds() {
        let net = merge();
        for seed in 0..5 {
            let traj = simulate_replication(&net, seed).unwrap();
            assert_eq!(traj.generated, traj.lost + traj.exited_network + traj.in_network);
            for row in &traj.samples {
                for (s, g) in row.iter().zip(&net.geometry) {
                    assert!(s.dq <= s.uq && s.uq as usize <= g.space_capacity);
                }
            }
        }
    }

    #[test]
    fn no_demand_no_events() {
        let net = scenarios::load("merge_exp1").unwrap().without_demand().compile().unwrap();
        let traj = simulate_replication(&net, 1).unwrap();
        assert_eq!(traj.events, 0);
        assert!(traj.samples.iter().flatten().all(|s| *s == SimSample::default()));
    }

    #[test]
    fn fifo_per_link() {
        let net = scenarios::load("eight_link").unwrap().compile().unwrap();
        let mut sim = Simulator::new(&net, 9).with_order_log();
        sim.advance_to(net.horizon_s).unwrap();
        let log = sim.order_log().unwrap();
        for (entries, departures) in log.entries.iter().zip(&log.departures) {
            assert!(departures.len() <= entries.len());
            assert_eq!(&entries[..departures.len()], &departures[..]);
        }
    }

    #[test]
    fn output_times_match_strides() {
        let net = merge();
        let times = output_times(&net);
        assert_eq!(times.len(), 601);
        assert_eq!(times[1], 1.0);
        assert_eq!(*times.last().unwrap(), 600.0);
    }
}
