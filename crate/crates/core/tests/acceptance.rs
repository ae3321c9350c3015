//! Acceptance checks for the eight release criteria.
//!
//! Runs as a plain binary so every criterion prints exactly one PASS/FAIL
//! line; exits non-zero if any criterion fails. Tolerances are pinned in the
//! constants below.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use netload::config::{DemandSegment, NetworkConfig, NodeConfig};
use netload::kernel::{propagate_birth_death, QueueDistribution};
use netload::link::LinkParams;
use netload::node::{transmission_probability_with, BlockingEvent, IndependentJoints};
use netload::signal::{
    optimize, sample_feasible_plan, service_rates_from_plan, simulated_queue_averages, ObjectiveModel, SignalPlan,
};
use netload::sim::monte_carlo::monte_carlo;
use netload::sim::Simulator;
use netload::{run_loading, scenarios, Loader, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KERNEL_TOL: f64 = 1e-8;
const KERNEL_CASES: usize = 1000;
const KERNEL_TIME: Duration = Duration::from_secs(10);

const IE_TOL: f64 = 1e-12;
const IE_CASES: usize = 500;

const REPLICATIONS: usize = 10_000;
const MERGE_RMSE_TOL: f64 = 1.0;
const MERGE_PEAK_MIN: f64 = 7.0;
const MERGE_DROP_MIN: f64 = 0.5;
const MERGE_TIME: Duration = Duration::from_secs(120);

const SYMMETRY_TOL: f64 = 1e-12;
const SYMMETRY_SHARE: f64 = 0.95;

const EIGHT_LINK_MAE_TOL: f64 = 1.0;
const EIGHT_LINK_STATE_LEN: usize = 176;

const SCALING_RATIO_MAX: f64 = 2.5;

const OPT_BUDGET: usize = 150;
const OPT_REPLICATIONS: usize = 200;
const OPT_TIME: Duration = Duration::from_secs(30 * 60);

const FUZZ_CASES: usize = 10_000;
const FUZZ_NORM_TOL: f64 = 1e-9;
const FUZZ_TIME: Duration = Duration::from_secs(5 * 60);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- 1

fn generator(capacity: usize, birth: f64, death: f64) -> DMatrix<f64> {
    let n = capacity + 1;
    let mut q = DMatrix::zeros(n, n);
    for k in 0..n {
        if k < capacity {
            q[(k, k + 1)] = birth;
        }
        if k > 0 {
            q[(k, k - 1)] = death;
        }
        let out: f64 = (0..n).filter(|&j| j != k).map(|j| q[(k, j)]).sum();
        q[(k, k)] = -out;
    }
    q
}

fn kernel_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6b65726e);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..KERNEL_CASES {
        let capacity = rng.random_range(1..=8usize);
        let birth = rng.random_range(0.0..=2.0);
        let death = rng.random_range(0.0..=2.0);
        let dt = rng.random_range(1e-3..=5.0);
        let raw: Vec<f64> = (0..=capacity).map(|_| rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let p0: Vec<f64> = raw.iter().map(|x| x / total).collect();

        let ours = propagate_birth_death(&QueueDistribution::from_probs(p0.clone()).unwrap(), birth, death, dt).unwrap();
        let transition = (generator(capacity, birth, death) * dt).exp();
        let row = DMatrix::from_row_slice(1, capacity + 1, &p0) * transition;
        for (k, p) in ours.probs().iter().enumerate() {
            worst = worst.max((p - row[(0, k)]).abs());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= KERNEL_TOL && elapsed < KERNEL_TIME,
        format!("max abs error {worst:.2e} over {KERNEL_CASES} cases in {elapsed:.2?}"),
    )
}

// ---------------------------------------------------------------- 2

fn random_distribution(rng: &mut ChaCha8Rng, capacity: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..=capacity)
        .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>() })
        .collect();
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        let mut v = vec![0.0; capacity + 1];
        v[0] = 1.0;
        return v;
    }
    raw.iter().map(|x| x / total).collect()
}

fn inclusion_exclusion_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6965);
    let mut worst = 0.0f64;
    for _ in 0..IE_CASES {
        let dq_cap = rng.random_range(1..=4usize);
        let dq = random_distribution(&mut rng, dq_cap);
        let n = rng.random_range(1..=3usize);
        let uqs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let cap = rng.random_range(1..=4usize);
                random_distribution(&mut rng, cap)
            })
            .collect();

        // exhaustive enumeration of the product law
        let mut sizes = vec![dq.len()];
        sizes.extend(uqs.iter().map(Vec::len));
        let mut state = vec![0usize; sizes.len()];
        let mut exact = 0.0;
        'outer: loop {
            let mut p = dq[state[0]];
            let mut admissible = state[0] > 0;
            for (m, u) in uqs.iter().enumerate() {
                p *= u[state[m + 1]];
                admissible &= state[m + 1] < u.len() - 1;
            }
            if admissible {
                exact += p;
            }
            for d in 0..state.len() {
                state[d] += 1;
                if state[d] < sizes[d] {
                    continue 'outer;
                }
                state[d] = 0;
            }
            break;
        }

        let dq_event = BlockingEvent { marginal: dq[0], rate: 0.0, target: 0 };
        let uq_events: Vec<BlockingEvent> = uqs
            .iter()
            .map(|u| BlockingEvent { marginal: u[u.len() - 1], rate: 0.0, target: (u.len() - 1) as u64 })
            .collect();
        let ours = transmission_probability_with(Some(dq_event), &uq_events, 0.1, &IndependentJoints).unwrap();
        worst = worst.max((ours - exact).abs());
    }
    outcome(worst <= IE_TOL, format!("max abs error {worst:.2e} over {IE_CASES} cases"))
}

// ---------------------------------------------------------------- 3

fn merge_experiment() -> Outcome {
    let start = Instant::now();
    let net = scenarios::load("merge_exp1").unwrap().compile().unwrap();
    let analytic = run_loading(&net).unwrap();
    let mc = monte_carlo(&net, REPLICATIONS, 20_240_601).unwrap();
    let elapsed = start.elapsed();

    let mut worst = 0.0f64;
    let mut table = Vec::new();
    for i in 0..net.link_count() {
        let rmse = |f: &dyn Fn(usize) -> f64| {
            let n = analytic.times.len() as f64;
            ((0..analytic.times.len()).map(|t| f(t).powi(2)).sum::<f64>() / n).sqrt()
        };
        let uq = rmse(&|t| analytic.records[t][i].e_uq - mc.stats[t][i].e_uq);
        let dq = rmse(&|t| analytic.records[t][i].e_dq - mc.stats[t][i].e_dq);
        worst = worst.max(uq).max(dq);
        table.push(format!("{}:{uq:.2}/{dq:.2}", net.link_ids[i]));
    }

    let link3 = net.link_index("3").unwrap();
    let e_uq3 = analytic.series(link3, |r| r.e_uq);
    let peak = analytic
        .times
        .iter()
        .zip(&e_uq3)
        .filter(|(t, _)| (200.0..=400.0).contains(*t))
        .map(|(_, v)| *v)
        .fold(0.0, f64::max);
    let end = *e_uq3.last().unwrap();
    let drop = 1.0 - end / peak;
    let pass = worst <= MERGE_RMSE_TOL && peak > MERGE_PEAK_MIN && drop > MERGE_DROP_MIN && elapsed <= MERGE_TIME;
    outcome(
        pass,
        format!(
            "RMSE uq/dq per link [{}], E[UQ3] peak {peak:.2} in [200,400] s, {:.0}% drop by 600 s, R={REPLICATIONS}, {elapsed:.2?}",
            table.join(" "),
            drop * 100.0
        ),
    )
}

// ---------------------------------------------------------------- 4

fn diverge_symmetry() -> Outcome {
    let net = scenarios::load("diverge_exp4").unwrap().compile().unwrap();
    let (l2, l3) = (net.link_index("2").unwrap(), net.link_index("3").unwrap());
    let analytic = run_loading(&net).unwrap();
    let mut gap = 0.0f64;
    for row in &analytic.records {
        let (a, b) = (row[l2], row[l3]);
        for (x, y) in [
            (a.e_uq, b.e_uq),
            (a.e_dq, b.e_dq),
            (a.p_uq_full, b.p_uq_full),
            (a.p_dq_empty, b.p_dq_empty),
            (a.q_in, b.q_in),
            (a.q_out, b.q_out),
            (a.lambda, b.lambda),
            (a.mu_eff, b.mu_eff),
        ] {
            gap = gap.max((x - y).abs());
        }
    }

    let mc = monte_carlo(&net, REPLICATIONS, 4).unwrap();
    let mut within = 0usize;
    let mut total = 0usize;
    for row in mc.stats.iter().skip(1) {
        let (a, b) = (row[l2], row[l3]);
        for (d, w) in [
            ((a.e_uq - b.e_uq).abs(), a.ci_half_width_uq + b.ci_half_width_uq),
            ((a.e_dq - b.e_dq).abs(), a.ci_half_width_dq + b.ci_half_width_dq),
        ] {
            total += 1;
            within += usize::from(d < w);
        }
    }
    let share = within as f64 / total as f64;
    outcome(
        gap <= SYMMETRY_TOL && share >= SYMMETRY_SHARE,
        format!(
            "analytical max gap {gap:.1e}; simulated means within summed CI half-widths at {:.1}% of strides",
            share * 100.0
        ),
    )
}

// ---------------------------------------------------------------- 5

fn eight_link_network() -> Outcome {
    let net = scenarios::load("eight_link").unwrap().compile().unwrap();
    let loader = Loader::new(&net).unwrap();
    let state_len = loader.output_state_len();
    let analytic = run_loading(&net).unwrap();
    let mc = monte_carlo(&net, REPLICATIONS, 8).unwrap();
    let n = analytic.times.len() as f64;
    let mut worst = 0.0f64;
    for i in 0..net.link_count() {
        let mae = |f: &dyn Fn(usize) -> f64| (0..analytic.times.len()).map(f).sum::<f64>() / n;
        let uq = mae(&|t| (analytic.records[t][i].e_uq - mc.stats[t][i].e_uq).abs());
        let dq = mae(&|t| (analytic.records[t][i].e_dq - mc.stats[t][i].e_dq).abs());
        worst = worst.max(uq).max(dq);
    }
    outcome(
        worst <= EIGHT_LINK_MAE_TOL && state_len == EIGHT_LINK_STATE_LEN,
        format!("worst time-averaged abs error {worst:.3} veh over 8 links; retained state {state_len} values"),
    )
}

// ---------------------------------------------------------------- 6

fn chain(links: usize, length_km: f64) -> Network {
    let mut cfg = NetworkConfig {
        name: None,
        description: None,
        links: Default::default(),
        nodes: Vec::new(),
        demand: Default::default(),
        delta_s: 0.1,
        horizon_s: 200.0,
        output_stride_s: 1.0,
        signals: None,
    };
    for i in 0..links {
        cfg.links.insert(format!("c{i}"), LinkParams::standard_lane(length_km, 0.3));
    }
    for i in 1..links {
        let (from, to) = (format!("c{}", i - 1), format!("c{i}"));
        let mut row = indexmap::IndexMap::new();
        row.insert(to.clone(), 1.0);
        let mut turning = indexmap::IndexMap::new();
        turning.insert(from.clone(), row);
        cfg.nodes.push(NodeConfig { id: None, upstream: vec![from], downstream: vec![to], turning });
    }
    cfg.demand.insert("c0".into(), vec![DemandSegment { start_s: 0.0, end_s: 200.0, rate_veh_s: 0.25 }]);
    cfg.compile().unwrap()
}

fn best_runtime(net: &Network) -> f64 {
    (0..3)
        .map(|_| {
            let start = Instant::now();
            run_loading(net).unwrap();
            start.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

fn complexity_scaling() -> Outcome {
    let r32 = best_runtime(&chain(32, 0.05));
    let r64 = best_runtime(&chain(64, 0.05));
    let l20 = best_runtime(&chain(32, 0.1));
    let by_links = r64 / r32;
    let by_capacity = l20 / r32;
    outcome(
        by_links <= SCALING_RATIO_MAX && by_capacity <= SCALING_RATIO_MAX,
        format!("runtime ratio r=64/r=32 {by_links:.2}, l=20/l=10 {by_capacity:.2}"),
    )
}

// ---------------------------------------------------------------- 7

fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

fn simulate_plan(net: &Network, plan: &SignalPlan) -> (f64, f64) {
    let rates = service_rates_from_plan(plan, net).unwrap();
    let minutes = net.signals.as_ref().unwrap().objective_minutes;
    let values = simulated_queue_averages(&net.with_service_rates(&rates), minutes, OPT_REPLICATIONS, 77).unwrap();
    mean_ci(&values)
}

fn optimization_end_to_end() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, seed) in [("grid20_high", 1u64), ("grid20_medium", 2)] {
        let net = scenarios::load(name).unwrap().compile().unwrap();
        let signals = net.signals.clone().unwrap();
        let initial = sample_feasible_plan(&signals, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let analytic = optimize(&initial, ObjectiveModel::Analytical, &net, OPT_BUDGET).unwrap();
        let baseline = optimize(&initial, ObjectiveModel::Deterministic, &net, OPT_BUDGET).unwrap();

        let (m0, h0) = simulate_plan(&net, &initial);
        let (ma, ha) = simulate_plan(&net, &analytic.best);
        let (mb, hb) = simulate_plan(&net, &baseline.best);
        let improves = ma < m0 && ma + ha < m0 - h0;
        let competitive = ma <= mb || (ma - mb).abs() <= ha + hb;
        pass &= improves && competitive;
        parts.push(format!(
            "{name}: initial {m0:.3}±{h0:.3}, analytical plan {ma:.3}±{ha:.3}, baseline plan {mb:.3}±{hb:.3}"
        ));
    }
    let elapsed = start.elapsed();
    pass &= elapsed <= OPT_TIME;
    outcome(pass, format!("{}; {elapsed:.1?}", parts.join("; ")))
}

// ---------------------------------------------------------------- 8

fn random_row(rng: &mut ChaCha8Rng, downstream: &[String]) -> indexmap::IndexMap<String, f64> {
    let exit_share = if rng.random_bool(0.3) { 0.0 } else { rng.random::<f64>() * 0.5 };
    let raw: Vec<f64> = downstream.iter().map(|_| rng.random::<f64>() + 0.01).collect();
    let total: f64 = raw.iter().sum();
    downstream
        .iter()
        .zip(raw)
        .map(|(id, w)| (id.clone(), (1.0 - exit_share) * w / total))
        .collect()
}

fn random_link(rng: &mut ChaCha8Rng) -> LinkParams {
    LinkParams {
        length_km: rng.random_range(0.02..0.08),
        free_flow_speed_km_s: rng.random_range(0.008..0.02),
        backward_wave_speed_km_s: -rng.random_range(0.003..0.008),
        jam_density_veh_km: 200.0,
        flow_capacity_veh_s: None,
        service_rate_veh_s: rng.random_range(0.05..0.8),
        entry_rate_veh_s: 0.0,
        mixture_weight: if rng.random_bool(0.3) { Some(rng.random::<f64>()) } else { None },
    }
}

/// Two nodes: `m` entry links into `n` links, the first of which merges
/// with one more entry link into a final exit link.
fn random_config(rng: &mut ChaCha8Rng) -> NetworkConfig {
    let m = rng.random_range(1..=3usize);
    let n = rng.random_range(1..=3usize);
    let up: Vec<String> = (0..m).map(|i| format!("u{i}")).collect();
    let down: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
    let horizon = rng.random_range(5..=20) as f64;
    let mut cfg = NetworkConfig {
        name: None,
        description: None,
        links: Default::default(),
        nodes: Vec::new(),
        demand: Default::default(),
        delta_s: 0.1,
        horizon_s: horizon,
        output_stride_s: 1.0,
        signals: None,
    };
    for id in up.iter().chain(&down).chain(["side".to_string(), "exit".to_string()].iter()) {
        cfg.links.insert(id.clone(), random_link(rng));
    }
    cfg.nodes.push(NodeConfig {
        id: Some("A".into()),
        upstream: up.clone(),
        downstream: down.clone(),
        turning: up.iter().map(|u| (u.clone(), random_row(rng, &down))).collect(),
    });
    let merging = vec![down[0].clone(), "side".to_string()];
    let exit = vec!["exit".to_string()];
    cfg.nodes.push(NodeConfig {
        id: Some("B".into()),
        upstream: merging.clone(),
        downstream: exit.clone(),
        turning: merging.iter().map(|u| (u.clone(), random_row(rng, &exit))).collect(),
    });
    for id in up.iter().chain(std::iter::once(&"side".to_string())) {
        let cuts = rng.random_range(1..=3usize);
        let segments = (0..cuts)
            .map(|c| DemandSegment {
                start_s: horizon * c as f64 / cuts as f64,
                end_s: horizon * (c + 1) as f64 / cuts as f64,
                rate_veh_s: if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..0.6) },
            })
            .collect();
        cfg.demand.insert(id.clone(), segments);
    }
    cfg
}

fn normalized(d: &QueueDistribution) -> bool {
    (d.probs().iter().sum::<f64>() - 1.0).abs() <= FUZZ_NORM_TOL && d.probs().iter().all(|p| *p >= -1e-15)
}

fn check_loader(net: &Network) -> Result<(), String> {
    let mut loader = Loader::new(net).map_err(|e| e.to_string())?;
    for _ in 0..net.steps() {
        loader.step().map_err(|e| e.to_string())?;
        let t = loader.time();
        for i in 0..net.link_count() {
            let s = loader.link_state(i);
            let (uq, dq) = loader.marginals(i);
            for d in [&s.uq_from_uq_model, &s.dq_from_uq_model, &s.uq_from_dq_model, &s.dq_from_dq_model, uq, dq] {
                if !normalized(d) {
                    return Err(format!("link {i} at {t} s: distribution not normalized"));
                }
            }
            let mu = net.params[i].service_rate_veh_s;
            let lower = mu * (1.0 - (1.0 - net.exit_share(i)));
            if s.effective_service_rate < lower - 1e-12 || s.effective_service_rate > mu + 1e-12 {
                return Err(format!("link {i} at {t} s: effective service {} outside [{lower}, {mu}]", s.effective_service_rate));
            }
            let gamma = net.demand[i].rate_at(t);
            if s.arrival_rate < gamma - 1e-12 {
                return Err(format!("link {i} at {t} s: arrival rate {} below entry rate {gamma}", s.arrival_rate));
            }
        }
        for (k, node) in net.nodes.iter().enumerate() {
            let out = loader.node_outcome(k);
            let space = node
                .downstream
                .iter()
                .map(|&j| 1.0 - loader.boundary(j).p_uq_full)
                .fold(1.0f64, f64::min);
            for (a, &i) in node.upstream.iter().enumerate() {
                let upper = space.min(1.0 - loader.boundary(i).p_dq_empty).max(0.0);
                let p = out.transmission[a];
                if !(0.0..=upper + 1e-15).contains(&p) {
                    return Err(format!("node {k}: transmission {p} outside [0, {upper}]"));
                }
            }
        }
    }
    Ok(())
}

fn check_simulator(net: &Network, seed: u64) -> Result<(), String> {
    let mut sim = Simulator::new(net, seed).with_order_log();
    sim.advance_to(net.horizon_s).map_err(|e| e.to_string())?;
    let log = sim.order_log().unwrap();
    for (i, (entries, departures)) in log.entries.iter().zip(&log.departures).enumerate() {
        if departures.len() > entries.len() || entries[..departures.len()] != departures[..] {
            return Err(format!("link {i}: departures out of arrival order"));
        }
    }
    let traj = Simulator::new(net, seed).run().map_err(|e| e.to_string())?;
    if traj.generated != traj.lost + traj.exited_network + traj.in_network {
        return Err("vehicles not conserved".into());
    }
    for row in &traj.samples {
        for (s, g) in row.iter().zip(&net.geometry) {
            if s.dq > s.uq || s.uq as usize > g.space_capacity {
                return Err("queue bounds violated".into());
            }
        }
    }
    Ok(())
}

fn property_fuzzing() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x66757a7a);
    let mut failures = Vec::new();
    for case in 0..FUZZ_CASES {
        let cfg = random_config(&mut rng);
        let net = match cfg.compile() {
            Ok(net) => net,
            Err(e) => {
                failures.push(format!("case {case}: {e}"));
                continue;
            }
        };
        if let Err(e) = check_loader(&net).and_then(|_| check_simulator(&net, case as u64)) {
            failures.push(format!("case {case}: {e}"));
        }
    }
    let elapsed = start.elapsed();
    let first = failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default();
    outcome(
        failures.is_empty() && elapsed < FUZZ_TIME,
        format!("{} of {FUZZ_CASES} random configurations violated an invariant{first}; {elapsed:.1?}", failures.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("kernel matches the matrix exponential", kernel_exactness),
        ("inclusion-exclusion matches enumeration", inclusion_exclusion_oracle),
        ("merge experiment 1 against the simulator", merge_experiment),
        ("diverge experiment 4 symmetry", diverge_symmetry),
        ("eight-link network against the simulator", eight_link_network),
        ("linear complexity in links and capacity", complexity_scaling),
        ("signal optimization end to end", optimization_end_to_end),
        ("invariants under random configurations", property_fuzzing),
    ];
    let mut failed = 0;
    for (n, (label, check)) in criteria.iter().enumerate() {
        let result = check();
        let tag = if result.pass { "PASS" } else { "FAIL" };
        println!("criterion {}: {tag} {label}: {}", n + 1, result.detail);
        failed += usize::from(!result.pass);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
