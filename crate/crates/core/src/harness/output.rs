//! summary.json and trajectories.csv writers, and the CSV reader used by `exponent`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::analysis::DistanceSeries;

use super::batch::ExperimentResult;
use super::HarnessError;

pub const SUMMARY_FILE: &str = "summary.json";
pub const TRAJECTORY_FILE: &str = "trajectories.csv";

/// Out-dir precedence: explicit flag, then `QNDFB_OUT_DIR`, then the config, then `out`.
pub fn resolve_out_dir(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    config.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("out"))
}

pub const OUT_DIR_ENV: &str = "QNDFB_OUT_DIR";

pub fn write_summary(result: &ExperimentResult, dir: &Path) -> Result<PathBuf, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(SUMMARY_FILE);
    let mut f = BufWriter::new(File::create(&path)?);
    serde_json::to_writer_pretty(&mut f, &result.summary).map_err(std::io::Error::other)?;
    writeln!(f)?;
    f.flush()?;
    Ok(path)
}

/// Header of the trajectory CSV for M subspaces, m channels.
pub fn csv_header(big_m: usize, m: usize, with_q: bool) -> Vec<String> {
    let mut h = vec!["trajectory_id".to_string(), "t".to_string()];
    h.extend((0..big_m).map(|n| format!("rho_P{n}")));
    h.extend((0..big_m).map(|n| format!("hat_P{n}")));
    if with_q {
        h.extend((0..big_m).map(|n| format!("q{n}")));
    }
    h.push("u".into());
    h.push("E_rho".into());
    h.push("E_hat".into());
    h.extend((0..m).map(|k| format!("Y{k}")));
    h
}

/// E_rho and E_hat are measured against each trajectory's reference subspace;
/// E_hat uses whichever filter drives the control.
pub fn write_trajectories<W: Write>(result: &ExperimentResult, w: W) -> Result<(), HarnessError> {
    let mut wr = csv::Writer::from_writer(w);
    let Some(first) = result.trajectories.first() else {
        wr.flush()?;
        return Ok(());
    };
    let with_q = first.q_hat.is_some();
    wr.write_record(csv_header(first.subspaces, first.channels, with_q))?;
    let use_q = result.summary.law_uses_reduced_filter;
    let mut row: Vec<String> = Vec::new();
    for tr in &result.trajectories {
        for i in 0..tr.samples() {
            row.clear();
            row.push(tr.id.to_string());
            row.push(tr.t[i].to_string());
            row.extend(tr.pops_at(i).iter().map(f64::to_string));
            row.extend(tr.pops_hat_at(i).iter().map(f64::to_string));
            if let Some(q) = tr.q_hat_at(i) {
                row.extend(q.iter().map(f64::to_string));
            }
            row.push(tr.u[i].to_string());
            let (a, b) = tr.distances_at(i, tr.reference, use_q);
            row.push(a.to_string());
            row.push(b.to_string());
            row.extend(tr.y[i * tr.channels..(i + 1) * tr.channels].iter().map(f64::to_string));
            wr.write_record(&row)?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn write_trajectory_file(result: &ExperimentResult, dir: &Path) -> Result<PathBuf, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(TRAJECTORY_FILE);
    write_trajectories(result, BufWriter::new(File::create(&path)?))?;
    Ok(path)
}

/// Distance series per trajectory id. Uses a `distance` column when present,
/// otherwise `E_rho + E_hat`.
pub fn read_distance_series(path: &Path) -> Result<Vec<DistanceSeries>, HarnessError> {
    let file = File::open(path).map_err(|e| HarnessError::MissingConfig(format!("{}: {e}", path.display())))?;
    let mut rd = csv::Reader::from_reader(file);
    let headers = rd.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let bad = |m: String| HarnessError::Config(format!("{}: {m}", path.display()));
    let id_col = col("trajectory_id").ok_or_else(|| bad("no trajectory_id column".into()))?;
    let t_col = col("t").ok_or_else(|| bad("no t column".into()))?;
    let d_cols: Vec<usize> = match col("distance") {
        Some(c) => vec![c],
        None => match (col("E_rho"), col("E_hat")) {
            (Some(a), Some(b)) => vec![a, b],
            _ => return Err(bad("need a distance column or E_rho and E_hat".into())),
        },
    };
    let mut by_id: BTreeMap<u64, DistanceSeries> = BTreeMap::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| -> Result<f64, HarnessError> {
            rec.get(c).and_then(|v| v.trim().parse().ok()).ok_or_else(|| bad(format!("row {}: bad number", line + 2)))
        };
        let id = rec
            .get(id_col)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad(format!("row {}: bad id", line + 2)))?;
        let t = num(t_col)?;
        let mut d = 0.0;
        for &c in &d_cols {
            d += num(c)?;
        }
        let s = by_id.entry(id).or_insert_with(|| DistanceSeries { t: Vec::new(), d: Vec::new() });
        s.t.push(t);
        s.d.push(d);
    }
    Ok(by_id.into_values().collect())
}
