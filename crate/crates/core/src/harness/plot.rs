use std::path::{Path, PathBuf};

use crate::doge::WeightTrajectory;
use crate::error::{DogeError, Result};

pub const STEPWISE_CSV: &str = "weights_stepwise.csv";
pub const AVERAGE_CSV: &str = "weights_average.csv";
pub const PROXY_LOSS_CSV: &str = "proxy_loss.csv";
pub const BASE_LOSS_CSV: &str = "base_loss.csv";

fn write_wide(path: &Path, names: &[String], rows: impl Iterator<Item = (usize, Vec<f64>)>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (step, values) in rows {
        let mut rec = vec![step.to_string()];
        rec.extend(values.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes wide CSVs (one column per domain) of the step-wise weights, their
/// running average and the proxy losses, plus the base loss curve when given.
/// Returns the written paths.
pub fn emit_plot_data(dir: &Path, traj: &WeightTrajectory, base_losses: Option<&[(usize, f64)]>) -> Result<Vec<PathBuf>> {
    if traj.is_empty() {
        return Err(DogeError::data("cannot plot an empty weight trajectory"));
    }
    let names = &traj.domains;
    let steps: Vec<usize> = traj.steps.iter().map(|s| s.step).collect();
    let mut out = Vec::new();

    let p = dir.join(STEPWISE_CSV);
    write_wide(&p, names, traj.steps.iter().map(|s| (s.step, s.alpha.as_slice().to_vec())))?;
    out.push(p);

    let p = dir.join(AVERAGE_CSV);
    write_wide(&p, names, steps.iter().copied().zip(traj.cumulative_averages()))?;
    out.push(p);

    let p = dir.join(PROXY_LOSS_CSV);
    write_wide(&p, names, traj.steps.iter().map(|s| (s.step, s.losses.clone())))?;
    out.push(p);

    if let Some(losses) = base_losses {
        let p = dir.join(BASE_LOSS_CSV);
        let mut w = csv::Writer::from_path(&p)?;
        w.write_record(["step", "loss"])?;
        for (step, loss) in losses {
            w.write_record([step.to_string(), loss.to_string()])?;
        }
        w.flush()?;
        out.push(p);
    }
    Ok(out)
}

/// Reads a wide CSV written by [`emit_plot_data`]: domain names and
/// `(step, values)` rows.
pub fn read_wide(path: &Path) -> Result<(Vec<String>, Vec<(usize, Vec<f64>)>)> {
    let mut r = csv::Reader::from_path(path)?;
    let names: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = || DogeError::format(path, format!("unparsable row {:?}", rec.position().map(|p| p.line())));
        let step = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let values = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != names.len() {
            return Err(bad());
        }
        rows.push((step, values));
    }
    Ok((names, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doge::{DomainWeights, ScoreTarget, TrajectoryStep};

    fn constant(n: usize) -> WeightTrajectory {
        let mut t = WeightTrajectory::new(vec!["x".into(), "y".into()], ScoreTarget::Universal, false);
        for s in 1..=n {
            t.push(TrajectoryStep {
                step: s,
                alpha: DomainWeights::new(vec![0.3, 0.7]).unwrap(),
                scores: vec![0.0, 0.0],
                losses: vec![1.5, 2.5],
            })
            .unwrap();
        }
        t
    }

    #[test]
    fn constant_trajectory_has_constant_average() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plot_data(dir.path(), &constant(5), Some(&[(1, 3.0), (5, 2.0)])).unwrap();
        assert_eq!(files.len(), 4);
        let (names, rows) = read_wide(&dir.path().join(AVERAGE_CSV)).unwrap();
        assert_eq!(names, vec!["x", "y"]);
        assert_eq!(rows.len(), 5);
        for (_, v) in rows {
            assert!((v[0] - 0.3).abs() < 1e-15 && (v[1] - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn stepwise_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let t = constant(3);
        emit_plot_data(dir.path(), &t, None).unwrap();
        let (_, rows) = read_wide(&dir.path().join(STEPWISE_CSV)).unwrap();
        for ((step, v), s) in rows.iter().zip(&t.steps) {
            assert_eq!(*step, s.step);
            assert_eq!(v.as_slice(), s.alpha.as_slice());
        }
    }

    #[test]
    fn empty_trajectory_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = WeightTrajectory::new(vec!["x".into()], ScoreTarget::Universal, false);
        let err = emit_plot_data(dir.path(), &t, None).unwrap_err();
        assert!(err.to_string().contains("empty"));
    }
}
