//! CSV tables and manifests.

use std::fs;
use std::io;
use std::path::Path;

use crate::bench::{GridPoint, RunMetrics, SweepRow};
use crate::pipeline::RunResult;

pub const STEP_HEADER: [&str; 10] = [
    "step",
    "timestep",
    "decision",
    "k",
    "E_t",
    "E_acc",
    "rel_err",
    "stable_err",
    "linear_err",
    "chaotic_err",
];

pub const METRICS_HEADER: [&str; 8] = [
    "run_id",
    "steps",
    "full_count",
    "cache_count",
    "full_ratio",
    "est_speedup",
    "final_rel_err",
    "mean_rel_err",
];

/// 17 significant digits, enough to round-trip any `f64`.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn writer(path: &Path) -> io::Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(csv::Writer::from_writer(fs::File::create(path)?))
}

fn csv_err(e: csv::Error) -> io::Error {
    io::Error::other(e)
}

pub fn step_row(run: &RunResult<f64>, i: usize) -> Vec<String> {
    let r = &run.records[i];
    vec![
        r.step.to_string(),
        num(r.timestep.value),
        r.decision.name().to_string(),
        r.k.to_string(),
        num(r.e_t),
        num(r.e_acc),
        opt(r.rel_err),
        opt(r.group_err[0]),
        opt(r.group_err[1]),
        opt(r.group_err[2]),
    ]
}

pub fn write_steps(path: &Path, run: &RunResult<f64>) -> io::Result<()> {
    let mut w = writer(path)?;
    w.write_record(STEP_HEADER).map_err(csv_err)?;
    for i in 0..run.records.len() {
        w.write_record(step_row(run, i)).map_err(csv_err)?;
    }
    w.flush()
}

pub fn metrics_row(run_id: &str, m: &RunMetrics) -> Vec<String> {
    vec![
        run_id.to_string(),
        m.steps.to_string(),
        m.full_count.to_string(),
        m.cache_count.to_string(),
        num(m.full_ratio),
        num(m.est_speedup),
        num(m.final_latent_rel_error),
        num(m.mean_rel_error()),
    ]
}

pub fn write_metrics(path: &Path, run_id: &str, m: &RunMetrics) -> io::Result<()> {
    let mut w = writer(path)?;
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    w.write_record(metrics_row(run_id, m)).map_err(csv_err)?;
    w.flush()
}

fn grid_values(p: &GridPoint) -> [String; 8] {
    [
        num(p.eta),
        num(p.p_s),
        num(p.p_c),
        p.n_max.to_string(),
        p.predictor.name().to_string(),
        p.skip.name().to_string(),
        num(p.tau),
        p.interval.to_string(),
    ]
}

pub fn sweep_run_id(row: &SweepRow) -> String {
    format!("p{}-s{}", row.point.index, row.seed)
}

/// Grid keys followed by the metrics columns. Failed rows keep their grid
/// values and run id and leave the metrics empty.
pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> io::Result<()> {
    let mut w = writer(path)?;
    let header: Vec<&str> = GridPoint::KEYS
        .iter()
        .chain(METRICS_HEADER.iter())
        .copied()
        .collect();
    w.write_record(&header).map_err(csv_err)?;
    for row in rows {
        let id = sweep_run_id(row);
        let mut rec: Vec<String> = grid_values(&row.point).into();
        match &row.outcome {
            Ok(m) => rec.extend(metrics_row(&id, m)),
            Err(_) => {
                rec.push(id);
                rec.extend(std::iter::repeat_n(String::new(), METRICS_HEADER.len() - 1));
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()
}

pub fn write_text(path: &Path, text: &str) -> io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for x in [0.1, 1.0 / 3.0, 6.02214076e23, -2.5e-300, 0.0] {
            let s = num(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
        assert_eq!(num(0.5), "5.0000000000000000e-1");
        assert_eq!(opt(None), "");
    }
}
