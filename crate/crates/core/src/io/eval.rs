//! Absolute position error between an estimated and a reference trajectory.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::solver::SolveStats;

use super::dataset::PoseSample;

/// Spatial alignment applied before comparing positions. Estimates are
/// expressed in the reference frame already, so none is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    None,
}

/// Mean and population standard deviation of per-step solver figures.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolverSummary {
    pub steps: usize,
    pub mean_iterations: f64,
    pub std_iterations: f64,
    pub median_iterations: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
}

impl SolverSummary {
    pub fn from_stats<'a>(stats: impl IntoIterator<Item = &'a SolveStats>) -> Option<Self> {
        let (mut iters, ms): (Vec<f64>, Vec<f64>) = stats
            .into_iter()
            .map(|s| (s.iterations as f64, s.elapsed.as_secs_f64() * 1e3))
            .unzip();
        if iters.is_empty() {
            return None;
        }
        let (mean_iterations, std_iterations) = mean_std(&iters);
        let (mean_ms, std_ms) = mean_std(&ms);
        iters.sort_by(f64::total_cmp);
        let n = iters.len();
        let median_iterations = if n % 2 == 1 {
            iters[n / 2]
        } else {
            0.5 * (iters[n / 2 - 1] + iters[n / 2])
        };
        Some(Self {
            steps: n,
            mean_iterations,
            std_iterations,
            median_iterations,
            mean_ms,
            std_ms,
        })
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// RMSE of the 3-D position error, m.
    pub ape_rmse: f64,
    /// RMSE of each position component, m.
    pub rmse_xyz: [f64; 3],
    /// Reference samples with an estimate close enough in time.
    pub matched: usize,
    pub unmatched: usize,
    pub alignment: Alignment,
    pub solver: Option<SolverSummary>,
}

/// Associates each reference sample with the estimate nearest in time,
/// within `max_dt`, and accumulates the position error. Both sequences must
/// be sorted by time.
pub fn evaluate_ape(estimate: &[PoseSample], reference: &[PoseSample], max_dt: f64) -> Result<EvalReport> {
    let mut sq = [0.0; 3];
    let mut matched = 0;
    for r in reference {
        let i = estimate.partition_point(|e| e.t < r.t);
        let nearest = [i.checked_sub(1), (i < estimate.len()).then_some(i)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (estimate[a].t - r.t).abs().total_cmp(&(estimate[b].t - r.t).abs()));
        let Some(j) = nearest.filter(|&j| (estimate[j].t - r.t).abs() <= max_dt) else {
            continue;
        };
        let d = estimate[j].p - r.p;
        for (s, x) in sq.iter_mut().zip(d.iter()) {
            *s += x * x;
        }
        matched += 1;
    }
    if matched == 0 {
        return Err(Error::NoOverlap);
    }
    let n = matched as f64;
    Ok(EvalReport {
        ape_rmse: (sq.iter().sum::<f64>() / n).sqrt(),
        rmse_xyz: sq.map(|s| (s / n).sqrt()),
        matched,
        unmatched: reference.len() - matched,
        alignment: Alignment::None,
        solver: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quat::UnitQuat;
    use crate::Vec3;

    fn poses(ts: &[f64], p: impl Fn(f64) -> Vec3) -> Vec<PoseSample> {
        ts.iter()
            .map(|&t| PoseSample {
                t,
                q: UnitQuat::identity(),
                p: p(t),
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let ts: Vec<f64> = (0..50).map(|i| i as f64 * 0.02).collect();
        let a = poses(&ts, |t| Vec3::new(t.sin(), t, 1.0));
        let r = evaluate_ape(&a, &a, 0.05).unwrap();
        assert_eq!(r.ape_rmse, 0.0);
        assert_eq!((r.matched, r.unmatched), (50, 0));
    }

    #[test]
    fn constant_offset_gives_its_norm() {
        let ts: Vec<f64> = (0..20).map(|i| i as f64 * 0.1).collect();
        let d = Vec3::new(0.3, -0.4, 1.2);
        let a = poses(&ts, |t| Vec3::new(t, 0.0, 0.0));
        let b = poses(&ts, |t| Vec3::new(t, 0.0, 0.0) + d);
        let r = evaluate_ape(&b, &a, 0.05).unwrap();
        assert!((r.ape_rmse - d.norm()).abs() < 1e-12);
        assert!((r.rmse_xyz[2] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn errors_of_three_and_four_metres() {
        let gt = poses(&[0.0, 1.0], |_| Vec3::zeros());
        let est = vec![
            PoseSample {
                t: 0.0,
                q: UnitQuat::identity(),
                p: Vec3::new(3.0, 0.0, 0.0),
            },
            PoseSample {
                t: 1.0,
                q: UnitQuat::identity(),
                p: Vec3::new(0.0, 4.0, 0.0),
            },
        ];
        let r = evaluate_ape(&est, &gt, 0.05).unwrap();
        assert!((r.ape_rmse - 12.5f64.sqrt()).abs() < 1e-12);
        assert!((r.ape_rmse - 3.5355).abs() < 1e-4);
    }

    #[test]
    fn association_respects_tolerance() {
        let gt = poses(&[0.0, 0.5, 1.0], |_| Vec3::zeros());
        let est = poses(&[0.02, 0.9], |_| Vec3::x());
        let r = evaluate_ape(&est, &gt, 0.05).unwrap();
        assert_eq!((r.matched, r.unmatched), (1, 2));
        assert!(matches!(evaluate_ape(&est, &gt, 0.01), Err(Error::NoOverlap)));
        assert!(matches!(evaluate_ape(&[], &gt, 1.0), Err(Error::NoOverlap)));
    }

    #[test]
    fn symmetric_on_a_shared_grid() {
        let ts: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
        let a = poses(&ts, |t| Vec3::new(t.cos(), 0.0, t));
        let b = poses(&ts, |t| Vec3::new(t.cos() + 0.1 * t, t.sin(), t));
        let ab = evaluate_ape(&a, &b, 0.05).unwrap().ape_rmse;
        let ba = evaluate_ape(&b, &a, 0.05).unwrap().ape_rmse;
        assert!((ab - ba).abs() < 1e-15);
    }

    #[test]
    fn summary_statistics() {
        use crate::solver::Termination;
        let mk = |iterations, ms| SolveStats {
            iterations,
            rejected_steps: 0,
            initial_cost: 1.0,
            final_cost: 0.5,
            termination: Termination::CostTolerance,
            rejected_measurements: 0,
            elapsed: std::time::Duration::from_millis(ms),
        };
        let stats = [mk(2, 10), mk(4, 30), mk(9, 20)];
        let s = SolverSummary::from_stats(&stats).unwrap();
        assert_eq!(s.steps, 3);
        assert!((s.mean_iterations - 5.0).abs() < 1e-12);
        assert_eq!(s.median_iterations, 4.0);
        assert!((s.mean_ms - 20.0).abs() < 1e-9);
        assert!((s.std_ms - (200.0f64 / 3.0).sqrt()).abs() < 1e-9);
        assert!(SolverSummary::from_stats(&[]).is_none());
    }
}
