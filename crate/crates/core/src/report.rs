//! CSV output of every model and comparison of two trajectory files.

use std::io::{Read, Write};

use indexmap::IndexMap;
use serde::Serialize;

use crate::baseline::CumulativeCounts;
use crate::error::{argument, Error, Result};
use crate::loader::Trajectory;
use crate::signal::{OptimizationOutcome, SignalConfig};
use crate::sim::monte_carlo::MonteCarloResult;

pub const TRAJECTORY_HEADER: &str = "time_s,link_id,e_uq,e_dq,p_uq_full,p_dq_empty,q_in,q_out,lambda,mu_eff";

pub fn write_trajectory_csv<W: Write>(mut w: W, traj: &Trajectory) -> Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for (t, row) in traj.times.iter().zip(&traj.records) {
        for (id, r) in traj.link_ids.iter().zip(row) {
            writeln!(
                w,
                "{t},{id},{},{},{},{},{},{},{},{}",
                r.e_uq, r.e_dq, r.p_uq_full, r.p_dq_empty, r.q_in, r.q_out, r.lambda, r.mu_eff
            )?;
        }
    }
    Ok(())
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 1e-12 {
        num / den
    } else {
        0.0
    }
}

/// Simulated trajectories in the analytical layout plus confidence
/// half-widths. `lambda` and `mu_eff` are the ratio estimates
/// `q_in / P(UQ < l)` and `q_out / P(DQ > 0)`.
pub fn write_monte_carlo_csv<W: Write>(mut w: W, mc: &MonteCarloResult) -> Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER},ci_half_width_uq,ci_half_width_dq")?;
    for (t, row) in mc.times.iter().zip(&mc.stats) {
        for (id, s) in mc.link_ids.iter().zip(row) {
            writeln!(
                w,
                "{t},{id},{},{},{},{},{},{},{},{},{},{}",
                s.e_uq,
                s.e_dq,
                s.p_uq_full,
                s.p_dq_empty,
                s.q_in,
                s.q_out,
                ratio(s.q_in, 1.0 - s.p_uq_full),
                ratio(s.q_out, 1.0 - s.p_dq_empty),
                s.ci_half_width_uq,
                s.ci_half_width_dq
            )?;
        }
    }
    Ok(())
}

pub fn write_baseline_csv<W: Write>(mut w: W, counts: &CumulativeCounts) -> Result<()> {
    writeln!(w, "time_s,link_id,c_up,c_down,vehicles")?;
    for (t, time) in counts.times.iter().enumerate() {
        for (i, id) in counts.link_ids.iter().enumerate() {
            let (u, d) = (counts.c_up[t][i], counts.c_down[t][i]);
            writeln!(w, "{time},{id},{u},{d},{}", u - d)?;
        }
    }
    Ok(())
}

/// Evaluation trace, one row per evaluated plan.
pub fn write_trace_csv<W: Write>(mut w: W, outcome: &OptimizationOutcome, signals: &SignalConfig) -> Result<()> {
    let columns: Vec<String> = signals
        .intersections
        .iter()
        .flat_map(|d| (0..d.phases.len()).map(move |p| format!("x_{}_{p}", d.id)))
        .collect();
    writeln!(w, "eval_index,objective,{}", columns.join(","))?;
    for e in &outcome.trace {
        let xs: Vec<String> = e.plan.x.iter().map(f64::to_string).collect();
        writeln!(w, "{},{},{}", e.eval_index, e.objective, xs.join(","))?;
    }
    Ok(())
}

/// Summary of an optimization run as `key,value` lines.
pub fn write_optimization_summary<W: Write>(mut w: W, outcome: &OptimizationOutcome) -> Result<()> {
    let join = |x: &[f64]| x.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
    writeln!(w, "key,value")?;
    writeln!(w, "initial_objective,{}", outcome.initial_objective)?;
    writeln!(w, "best_objective,{}", outcome.best_objective)?;
    writeln!(w, "evaluations,{}", outcome.evaluations())?;
    writeln!(w, "initial_plan,{}", join(&outcome.initial.x))?;
    writeln!(w, "best_plan,{}", join(&outcome.best.x))?;
    Ok(())
}

/// Expected queue lengths read back from a trajectory CSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QueueSeries {
    /// Per link id, `(time, e_uq, e_dq)` in file order.
    pub links: IndexMap<String, Vec<(f64, f64, f64)>>,
}

/// Reads any CSV with `time_s`, `link_id`, `e_uq` and `e_dq` columns.
pub fn read_queue_series<R: Read>(reader: R) -> Result<QueueSeries> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| argument(format!("CSV is missing the {name} column")))
    };
    let (ct, cl, cu, cd) = (col("time_s")?, col("link_id")?, col("e_uq")?, col("e_dq")?);
    let mut out = QueueSeries::default();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let num = |c: usize| -> Result<f64> {
            rec.get(c)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| argument(format!("row {}: bad number in column {c}", line + 2)))
        };
        let id = rec.get(cl).unwrap_or_default().trim().to_string();
        out.links.entry(id).or_default().push((num(ct)?, num(cu)?, num(cd)?));
    }
    Ok(out)
}

fn csv_error(e: csv::Error) -> Error {
    argument(format!("malformed CSV: {e}"))
}

/// Errors of one link's expected queue lengths.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinkComparison {
    pub link_id: String,
    pub samples: usize,
    pub rmse_uq: f64,
    pub rmse_dq: f64,
    pub max_abs_uq: f64,
    pub max_abs_dq: f64,
}

/// Compares two trajectory files link by link. Both must cover the same
/// links at the same times.
pub fn compare(a: &QueueSeries, b: &QueueSeries) -> Result<Vec<LinkComparison>> {
    let mut ka: Vec<&String> = a.links.keys().collect();
    let mut kb: Vec<&String> = b.links.keys().collect();
    ka.sort();
    kb.sort();
    if ka != kb {
        return Err(argument(format!("link sets differ: {ka:?} vs {kb:?}")));
    }
    a.links
        .iter()
        .map(|(id, xs)| {
            let ys = &b.links[id];
            if xs.len() != ys.len() || xs.iter().zip(ys).any(|(x, y)| (x.0 - y.0).abs() > 1e-6) {
                return Err(argument(format!("link {id}: output times differ")));
            }
            let n = xs.len().max(1) as f64;
            let (mut su, mut sd, mut mu, mut md) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
            for (x, y) in xs.iter().zip(ys) {
                let (du, dd) = ((x.1 - y.1).abs(), (x.2 - y.2).abs());
                su += du * du;
                sd += dd * dd;
                mu = mu.max(du);
                md = md.max(dd);
            }
            Ok(LinkComparison {
                link_id: id.clone(),
                samples: xs.len(),
                rmse_uq: (su / n).sqrt(),
                rmse_dq: (sd / n).sqrt(),
                max_abs_uq: mu,
                max_abs_dq: md,
            })
        })
        .collect()
}

pub fn write_comparison_csv<W: Write>(mut w: W, rows: &[LinkComparison]) -> Result<()> {
    writeln!(w, "link_id,samples,rmse_uq,rmse_dq,max_abs_uq,max_abs_dq")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{}", r.link_id, r.samples, r.rmse_uq, r.rmse_dq, r.max_abs_uq, r.max_abs_dq)?;
    }
    Ok(())
}
