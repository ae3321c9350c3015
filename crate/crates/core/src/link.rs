//! Per-link state of the lag-based probabilistic link model.
//!
//! Each link carries two univariate models. The UQ model follows the
//! upstream boundary (entries at the arrival rate, space releases driven by
//! the network outflow delayed by the backward lag); the DQ model follows
//! the downstream boundary (vehicles reaching the end of the link as the
//! network inflow delayed by the forward lag, served at the effective
//! service rate). Each model also carries an estimate of the opposite
//! boundary, driven by the flows implied by its own primary chain. The
//! marginals handed to the node model are a convex mixture of the two.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::kernel::{raise_health_warning, QueueDistribution, Scratch};

/// Probabilities below this are treated as zero when dividing.
pub const DIVISION_GUARD: f64 = 1e-12;

/// Physical and demand parameters of a single-lane link (SI-ish units:
/// km, s, veh).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub length_km: f64,
    pub free_flow_speed_km_s: f64,
    /// Negative by convention.
    pub backward_wave_speed_km_s: f64,
    pub jam_density_veh_km: f64,
    /// Defaults to the capacity of the triangular fundamental diagram.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_capacity_veh_s: Option<f64>,
    pub service_rate_veh_s: f64,
    /// Constant entry rate used when the link has no demand profile.
    #[serde(default)]
    pub entry_rate_veh_s: f64,
    /// Mixture weight of the UQ model; defaults to a rate-based heuristic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture_weight: Option<f64>,
}

impl LinkParams {
    /// Table-style single lane: v = 0.01 km/s, w = -0.005 km/s, 200 veh/km.
    pub fn standard_lane(length_km: f64, service_rate_veh_s: f64) -> Self {
        Self {
            length_km,
            free_flow_speed_km_s: 0.01,
            backward_wave_speed_km_s: -0.005,
            jam_density_veh_km: 200.0,
            flow_capacity_veh_s: None,
            service_rate_veh_s,
            entry_rate_veh_s: 0.0,
            mixture_weight: None,
        }
    }

    /// `rho * v * |w| / (v + |w|)` unless given explicitly.
    pub fn flow_capacity(&self) -> f64 {
        self.flow_capacity_veh_s.unwrap_or_else(|| {
            let v = self.free_flow_speed_km_s;
            let w = self.backward_wave_speed_km_s.abs();
            self.jam_density_veh_km * v * w / (v + w)
        })
    }

    /// Every violated parameter invariant, as readable messages.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let finite = [
            self.length_km,
            self.free_flow_speed_km_s,
            self.backward_wave_speed_km_s,
            self.jam_density_veh_km,
            self.service_rate_veh_s,
            self.entry_rate_veh_s,
        ];
        if finite.iter().any(|x| !x.is_finite()) {
            out.push("non-finite parameter".to_string());
        }
        if !(self.length_km > 0.0) {
            out.push(format!("length must be > 0 (got {})", self.length_km));
        }
        if !(self.free_flow_speed_km_s > 0.0) {
            out.push(format!("free-flow speed must be > 0 (got {})", self.free_flow_speed_km_s));
        }
        if !(self.backward_wave_speed_km_s < 0.0) {
            out.push(format!(
                "backward wave speed must be < 0 (got {})",
                self.backward_wave_speed_km_s
            ));
        }
        if !(self.jam_density_veh_km > 0.0) {
            out.push(format!("jam density must be > 0 (got {})", self.jam_density_veh_km));
        }
        if !(self.service_rate_veh_s >= 0.0) {
            out.push(format!("service rate must be >= 0 (got {})", self.service_rate_veh_s));
        }
        if !(self.entry_rate_veh_s >= 0.0) {
            out.push(format!("entry rate must be >= 0 (got {})", self.entry_rate_veh_s));
        }
        if let Some(q) = self.flow_capacity_veh_s {
            if !(q > 0.0) || !q.is_finite() {
                out.push(format!("flow capacity must be > 0 (got {q})"));
            }
        }
        if let Some(w) = self.mixture_weight {
            if !(0.0..=1.0).contains(&w) {
                out.push(format!("mixture weight must lie in [0, 1] (got {w})"));
            }
        }
        out
    }
}

/// Discretized geometry of a link for a given time step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkGeometry {
    pub space_capacity: usize,
    pub k_fwd: usize,
    pub k_bwd: usize,
}

/// Ceiling that forgives floating-point noise just above an integer.
fn lag_steps(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

pub fn compute_geometry(params: &LinkParams, delta_s: f64) -> Result<LinkGeometry> {
    if !(delta_s > 0.0) || !delta_s.is_finite() {
        return Err(config(format!("time step must be > 0 (got {delta_s})")));
    }
    if let Some(v) = params.violations().into_iter().next() {
        return Err(config(v));
    }
    // round half up
    let cells = params.jam_density_veh_km * params.length_km;
    let space_capacity = (cells + 0.5 + 1e-9).floor() as usize;
    if space_capacity == 0 {
        return Err(config(format!(
            "link too short: jam density x length = {cells} rounds to zero vehicles"
        )));
    }
    let k_fwd = lag_steps(params.length_km / (params.free_flow_speed_km_s * delta_s)).max(1);
    let k_bwd = lag_steps(params.length_km / (params.backward_wave_speed_km_s.abs() * delta_s)).max(1);
    Ok(LinkGeometry { space_capacity, k_fwd, k_bwd })
}

/// Default mixture weight: `mu / (lambda + mu)` clamped to `[0.1, 0.9]`.
pub fn default_mixture_weight(arrival_rate: f64, service_rate: f64) -> f64 {
    let total = arrival_rate + service_rate;
    if total <= 0.0 {
        return 0.5;
    }
    (service_rate / total).clamp(0.1, 0.9)
}

/// Expected inflow and outflow rates per interval, with prefix sums.
///
/// Index `r` holds the rates at the end of interval `r`; indices before the
/// first record (or after the last) read as zero.
#[derive(Clone, Debug, Default)]
pub struct FlowHistory {
    inflow: Vec<f64>,
    outflow: Vec<f64>,
    cum_in: Vec<f64>,
    cum_out: Vec<f64>,
}

impl FlowHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(steps: usize) -> Self {
        Self {
            inflow: Vec::with_capacity(steps),
            outflow: Vec::with_capacity(steps),
            cum_in: Vec::with_capacity(steps),
            cum_out: Vec::with_capacity(steps),
        }
    }

    /// Appends the rates of the next interval.
    pub fn push(&mut self, q_in: f64, q_out: f64) {
        let prev_in = self.cum_in.last().copied().unwrap_or(0.0);
        let prev_out = self.cum_out.last().copied().unwrap_or(0.0);
        self.inflow.push(q_in);
        self.outflow.push(q_out);
        self.cum_in.push(prev_in + q_in);
        self.cum_out.push(prev_out + q_out);
    }

    pub fn len(&self) -> usize {
        self.inflow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inflow.is_empty()
    }

    pub fn inflow(&self, r: i64) -> f64 {
        at(&self.inflow, r)
    }

    pub fn outflow(&self, r: i64) -> f64 {
        at(&self.outflow, r)
    }

    /// `sum_{s=0}^{r} q_in(s)`.
    pub fn cumulative_inflow(&self, r: i64) -> f64 {
        prefix(&self.cum_in, r)
    }

    /// `sum_{s=0}^{r} q_out(s)`.
    pub fn cumulative_outflow(&self, r: i64) -> f64 {
        prefix(&self.cum_out, r)
    }
}

fn at(values: &[f64], r: i64) -> f64 {
    usize::try_from(r).ok().and_then(|i| values.get(i)).copied().unwrap_or(0.0)
}

fn prefix(cum: &[f64], r: i64) -> f64 {
    if r < 0 || cum.is_empty() {
        return 0.0;
    }
    let idx = (r as usize).min(cum.len() - 1);
    cum[idx]
}

fn clamp_expected(value: f64, what: &str) -> f64 {
    if value < -1e-9 {
        raise_health_warning(format_args!("{what} expected rate {value:.3e} < 0, clamped"));
    }
    value.max(0.0)
}

/// Rate `q` with `q * delta` the expected UQ occupancy at interval `k`.
pub fn expected_uq_rate(history: &FlowHistory, k: i64, k_bwd: usize) -> f64 {
    let v = history.cumulative_inflow(k - 1) - history.cumulative_outflow(k - k_bwd as i64 - 1);
    clamp_expected(v, "UQ")
}

/// Rate `q` with `q * delta` the expected DQ occupancy at interval `k`.
pub fn expected_dq_rate(history: &FlowHistory, k: i64, k_fwd: usize) -> f64 {
    let v = history.cumulative_inflow(k - k_fwd as i64 - 1) - history.cumulative_outflow(k - 1);
    clamp_expected(v, "DQ")
}

/// Per-link state carried across intervals.
#[derive(Clone, Debug)]
pub struct LinkState {
    pub geometry: LinkGeometry,
    pub flow_capacity: f64,
    /// UQ-model estimate of UQ.
    pub uq_from_uq_model: QueueDistribution,
    /// UQ-model estimate of DQ.
    pub dq_from_uq_model: QueueDistribution,
    /// DQ-model estimate of DQ.
    pub dq_from_dq_model: QueueDistribution,
    /// DQ-model estimate of UQ.
    pub uq_from_dq_model: QueueDistribution,
    /// Network-level expected flows.
    pub history: FlowHistory,
    /// Entry flows implied by the UQ model alone.
    uq_model_inflow: Vec<f64>,
    /// Departure flows implied by the DQ model alone.
    dq_model_outflow: Vec<f64>,
    pub arrival_rate: f64,
    pub effective_service_rate: f64,
    scratch: Scratch,
}

impl LinkState {
    /// Empty link: point masses at zero, no flow history.
    pub fn empty(geometry: LinkGeometry, flow_capacity: f64, arrival_rate: f64, service_rate: f64) -> Self {
        let zero = QueueDistribution::point_mass(geometry.space_capacity, 0)
            .expect("geometry guarantees capacity >= 1");
        let mut history = FlowHistory::new();
        history.push(0.0, 0.0);
        Self {
            geometry,
            flow_capacity,
            uq_from_uq_model: zero.clone(),
            dq_from_uq_model: zero.clone(),
            dq_from_dq_model: zero.clone(),
            uq_from_dq_model: zero,
            history,
            uq_model_inflow: vec![0.0],
            dq_model_outflow: vec![0.0],
            arrival_rate,
            effective_service_rate: service_rate,
            scratch: Scratch::default(),
        }
    }

    /// Index of the interval the next step produces.
    pub fn next_interval(&self) -> i64 {
        self.history.len() as i64
    }

    fn delayed_inflow(&self, k: i64) -> f64 {
        self.history.inflow(k - self.geometry.k_fwd as i64 - 1)
    }

    fn delayed_outflow(&self, k: i64) -> f64 {
        self.history.outflow(k - self.geometry.k_bwd as i64 - 1)
    }

    /// Advances the UQ model over one interval at constant rates.
    pub fn step_univariate_uq(&mut self, arrival: f64, service: f64, delta: f64) -> Result<()> {
        let k = self.next_interval();
        let release = guarded_rate(self.delayed_outflow(k), 1.0 - self.uq_from_uq_model.p_empty())
            .min(self.flow_capacity);
        self.uq_from_uq_model
            .propagate(arrival, release, delta, &mut self.scratch)?;

        let own_entry = at(&self.uq_model_inflow, k - self.geometry.k_fwd as i64 - 1);
        let reach = guarded_rate(own_entry, 1.0 - self.dq_from_uq_model.p_full())
            .min(self.flow_capacity);
        self.dq_from_uq_model
            .propagate(reach, service, delta, &mut self.scratch)?;
        Ok(())
    }

    /// Advances the DQ model over one interval at constant rates.
    pub fn step_univariate_dq(&mut self, arrival: f64, service: f64, delta: f64) -> Result<()> {
        let k = self.next_interval();
        let reach = guarded_rate(self.delayed_inflow(k), 1.0 - self.dq_from_dq_model.p_full())
            .min(self.flow_capacity);
        self.dq_from_dq_model
            .propagate(reach, service, delta, &mut self.scratch)?;

        let own_departure = at(&self.dq_model_outflow, k - self.geometry.k_bwd as i64 - 1);
        let release = guarded_rate(own_departure, 1.0 - self.uq_from_dq_model.p_empty())
            .min(self.flow_capacity);
        self.uq_from_dq_model
            .propagate(arrival, release, delta, &mut self.scratch)?;
        Ok(())
    }

    /// Closes interval `k`: stores the network flows and the new rates.
    pub fn commit(&mut self, q_in: f64, q_out: f64, arrival: f64, service: f64) {
        self.history.push(q_in, q_out);
        self.uq_model_inflow
            .push(arrival * (1.0 - self.uq_from_uq_model.p_full()));
        self.dq_model_outflow
            .push(service * (1.0 - self.dq_from_dq_model.p_empty()));
        self.arrival_rate = arrival;
        self.effective_service_rate = service;
    }

    /// Values retained per link for output: the two mixture marginals.
    pub fn output_state_len(&self) -> usize {
        2 * (self.geometry.space_capacity + 1)
    }
}

/// Rate `r` such that `r * prob == flow`, or zero when `prob` vanishes.
fn guarded_rate(flow: f64, prob: f64) -> f64 {
    if prob < DIVISION_GUARD || flow <= 0.0 {
        0.0
    } else {
        flow / prob
    }
}

/// Marginal UQ and DQ distributions as a mixture of the two models.
pub fn mixture_marginals(state: &LinkState, weight: f64) -> Result<(QueueDistribution, QueueDistribution)> {
    let uq = QueueDistribution::mix(&state.uq_from_uq_model, &state.uq_from_dq_model, weight)?;
    let dq = QueueDistribution::mix(&state.dq_from_uq_model, &state.dq_from_dq_model, weight)?;
    Ok((uq, dq))
}

/// `(lambda * P(UQ < l), mu_eff * P(DQ > 0))`.
pub fn instantaneous_flows(
    arrival: f64,
    service: f64,
    uq: &QueueDistribution,
    dq: &QueueDistribution,
) -> (f64, f64) {
    (arrival * (1.0 - uq.p_full()), service * (1.0 - dq.p_empty()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn table_lane() -> LinkParams {
        LinkParams::standard_lane(0.05, 0.2)
    }

    #[test]
    fn table_lane_geometry() {
        let g = compute_geometry(&table_lane(), 0.1).unwrap();
        assert_eq!(g, LinkGeometry { space_capacity: 10, k_fwd: 50, k_bwd: 100 });
    }

    #[test]
    fn one_step_lag() {
        let mut p = table_lane();
        p.free_flow_speed_km_s = 0.05;
        assert_eq!(compute_geometry(&p, 1.0).unwrap().k_fwd, 1);
    }

    #[test]
    fn fractional_length_ceiling() {
        let mut p = table_lane();
        p.length_km = 0.055;
        assert_eq!(compute_geometry(&p, 0.1).unwrap().k_fwd, 55);
        // 0.0551 km -> 55.1 steps -> 56
        p.length_km = 0.0551;
        assert_eq!(compute_geometry(&p, 0.1).unwrap().k_fwd, 56);
    }

    #[test]
    fn capacity_rounds_half_up() {
        let mut p = table_lane();
        p.length_km = 0.0525; // 10.5 vehicles
        assert_eq!(compute_geometry(&p, 0.1).unwrap().space_capacity, 11);
        p.length_km = 0.002; // 0.4 vehicles
        assert!(matches!(compute_geometry(&p, 0.1), Err(crate::Error::Config(_))));
    }

    #[test]
    fn table_lane_flow_capacity() {
        assert_abs_diff_eq!(table_lane().flow_capacity(), 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn uq_rate_examples() {
        let mut h = FlowHistory::new();
        for _ in 0..3 {
            h.push(0.1, 0.0);
        }
        assert_abs_diff_eq!(expected_uq_rate(&h, 3, 100), 0.3, epsilon = 1e-12);
        assert_eq!(expected_uq_rate(&FlowHistory::new(), 5, 100), 0.0);

        let mut h = FlowHistory::new();
        for r in 0..200 {
            h.push(0.1, if r < 100 { 0.1 } else { 0.0 });
        }
        // inflows r = 0..=199 (200 terms), outflows r = 0..=99 (100 terms)
        let oracle: f64 = (0..200).map(|_| 0.1).sum::<f64>() - (0..=99).map(|_| 0.1).sum::<f64>();
        assert_abs_diff_eq!(expected_uq_rate(&h, 200, 100), oracle, epsilon = 1e-9);
        assert_abs_diff_eq!(oracle, 10.0, epsilon = 1e-9);
    }

    #[test]
    fn dq_rate_examples() {
        let mut h = FlowHistory::new();
        for _ in 0..150 {
            h.push(0.2, 0.0);
        }
        for k in 0..=50 {
            assert_eq!(expected_dq_rate(&h, k, 50), 0.0);
        }
        // inflows r = 0..=49
        let oracle: f64 = (0..=49).map(|_| 0.2).sum();
        assert_abs_diff_eq!(expected_dq_rate(&h, 100, 50), oracle, epsilon = 1e-9);

        let mut h = FlowHistory::new();
        for _ in 0..50 {
            h.push(0.3, 0.3);
        }
        assert_eq!(expected_dq_rate(&h, 50, 5), 0.0);
    }

    fn isolated(params: &LinkParams) -> LinkState {
        let g = compute_geometry(params, 0.1).unwrap();
        LinkState::empty(g, params.flow_capacity(), 0.0, params.service_rate_veh_s)
    }

    #[test]
    fn empty_link_stays_empty_without_demand() {
        let mut s = isolated(&table_lane());
        for _ in 0..300 {
            s.step_univariate_uq(0.0, 0.2, 0.1).unwrap();
            s.step_univariate_dq(0.0, 0.2, 0.1).unwrap();
            let (uq, dq) = mixture_marginals(&s, 0.5).unwrap();
            let (qi, qo) = instantaneous_flows(0.0, 0.2, &uq, &dq);
            s.commit(qi, qo, 0.0, 0.2);
        }
        for d in [&s.uq_from_uq_model, &s.dq_from_uq_model, &s.dq_from_dq_model, &s.uq_from_dq_model] {
            assert_eq!(d.p_empty(), 1.0);
        }
    }

    #[test]
    fn downstream_stays_empty_before_forward_lag() {
        let mut s = isolated(&table_lane());
        for _ in 0..49 {
            s.step_univariate_uq(0.15, 0.2, 0.1).unwrap();
            s.step_univariate_dq(0.15, 0.2, 0.1).unwrap();
            let (uq, dq) = mixture_marginals(&s, 0.5).unwrap();
            let (qi, qo) = instantaneous_flows(0.15, 0.2, &uq, &dq);
            s.commit(qi, qo, 0.15, 0.2);
            assert_eq!(s.dq_from_uq_model.p_empty(), 1.0);
            assert_eq!(s.dq_from_dq_model.p_empty(), 1.0);
        }
        assert!(s.uq_from_uq_model.mean() > 0.5);
    }

    #[test]
    fn mixture_endpoints() {
        let mut s = isolated(&table_lane());
        s.uq_from_uq_model = QueueDistribution::truncated_geometric(10, 0.5).unwrap();
        s.dq_from_dq_model = QueueDistribution::truncated_geometric(10, 0.9).unwrap();
        let close = |a: &QueueDistribution, b: &QueueDistribution| {
            a.probs().iter().zip(b.probs()).all(|(x, y)| (x - y).abs() < 1e-15)
        };
        let (uq, dq) = mixture_marginals(&s, 1.0).unwrap();
        assert!(close(&uq, &s.uq_from_uq_model) && close(&dq, &s.dq_from_uq_model));
        let (uq, dq) = mixture_marginals(&s, 0.0).unwrap();
        assert!(close(&uq, &s.uq_from_dq_model) && close(&dq, &s.dq_from_dq_model));
    }

    #[test]
    fn flow_examples() {
        let empty = QueueDistribution::point_mass(10, 0).unwrap();
        let full = QueueDistribution::point_mass(10, 10).unwrap();
        assert_eq!(instantaneous_flows(0.3, 0.4, &empty, &empty).1, 0.0);
        assert_eq!(instantaneous_flows(0.3, 0.4, &full, &empty).0, 0.0);
        let mut probs = vec![0.0; 11];
        probs[0] = 0.75;
        probs[10] = 0.25;
        let uq = QueueDistribution::from_probs(probs).unwrap();
        assert_abs_diff_eq!(instantaneous_flows(0.2, 0.4, &uq, &empty).0, 0.15, epsilon = 1e-15);
    }

    #[test]
    fn default_weight_is_clamped() {
        assert_abs_diff_eq!(default_mixture_weight(0.2, 0.2), 0.5);
        assert_abs_diff_eq!(default_mixture_weight(0.0, 0.4), 0.9);
        assert_abs_diff_eq!(default_mixture_weight(0.4, 0.0), 0.1);
    }
}
