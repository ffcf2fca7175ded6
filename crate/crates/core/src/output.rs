//! CSV results: `summary.csv`, `trace.csv`, `steps.csv` and `timing.csv`.
//!
//! Everything except `timing.csv` is a pure function of the run, so two runs
//! of one configuration give byte-identical files.

use std::fs;
use std::path::Path;

use crate::coordinator::RunOutput;
use crate::error::Result;

pub const SUMMARY_HEADER: [&str; 5] = ["controller", "J_t", "avg_travel_time", "avg_speed", "eval_count"];
pub const TRACE_HEADER: [&str; 6] = ["k", "kind", "index", "density", "position_m", "command_mps"];
pub const STEPS_HEADER: [&str; 13] = [
    "k",
    "p_used",
    "converged",
    "iteration",
    "cav",
    "m_j",
    "m_v",
    "j",
    "v",
    "eta",
    "evaluations",
    "accepted",
    "delta",
];

fn num(x: f64) -> String {
    format!("{x}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// One summary row per run, in the given order.
pub fn write_summary(runs: &[&RunOutput], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join("summary.csv"))?;
    w.write_record(SUMMARY_HEADER)?;
    for run in runs {
        let m = &run.metrics;
        let (tt, speed) = m.averages();
        w.write_record([
            run.controller.name().to_owned(),
            num(m.total_vehicle_time),
            opt(tt),
            opt(speed),
            m.eval_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Wall-clock seconds per controller, kept apart from the deterministic files.
pub fn write_timing(rows: &[(&str, f64)], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join("timing.csv"))?;
    w.write_record(["controller", "wall_time_s"])?;
    for (name, secs) in rows {
        w.write_record([name.to_string(), num(*secs)])?;
    }
    w.flush()?;
    Ok(())
}

/// Densities per `(k, cell)` followed by CAV positions and commands per
/// `(k, CAV)`, both in step order.
pub fn write_trace(run: &RunOutput, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join("trace.csv"))?;
    w.write_record(TRACE_HEADER)?;
    for step in &run.trace {
        let k = step.k.to_string();
        for (j, rho) in step.rho.iter().enumerate() {
            w.write_record([k.as_str(), "cell", &j.to_string(), &num(*rho), "", ""])?;
        }
        for (id, y, u) in &step.cavs {
            w.write_record([k.as_str(), "cav", &id.to_string(), "", &num(*y), &num(*u)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per agent solve with the step's iteration count and the
/// convergence measure of the solve's iteration. Steps without solves get a
/// single row.
pub fn write_steps(run: &RunOutput, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join("steps.csv"))?;
    w.write_record(STEPS_HEADER)?;
    for rep in &run.reports {
        let k = rep.k.to_string();
        let p = rep.iterations.to_string();
        let conv = rep.converged.to_string();
        if rep.records.is_empty() {
            let mut row = vec![k, p, conv];
            row.resize(STEPS_HEADER.len(), String::new());
            row[10] = rep.eval_count.to_string();
            w.write_record(&row)?;
            continue;
        }
        for r in &rep.records {
            let delta = r
                .iteration
                .checked_sub(1)
                .and_then(|i| rep.deltas.get(i))
                .map(|d| num(*d))
                .unwrap_or_default();
            w.write_record([
                k.clone(),
                p.clone(),
                conv.clone(),
                r.iteration.to_string(),
                r.cav.to_string(),
                r.m_j.to_string(),
                r.m_v.to_string(),
                num(r.j),
                num(r.v),
                num(r.eta),
                r.evaluations.to_string(),
                r.accepted.to_string(),
                delta,
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Summary, trace and steps of a single run.
pub fn write_results(run: &RunOutput, out_dir: &Path) -> Result<()> {
    write_summary(&[run], out_dir)?;
    write_trace(run, out_dir)?;
    write_steps(run, out_dir)
}
