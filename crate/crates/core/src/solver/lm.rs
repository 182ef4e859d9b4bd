//! Levenberg–Marquardt over an abstract manifold least-squares problem.

use std::time::{Duration, Instant};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::normal::NormalSystem;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub cost_tol: f64,
    /// Stop once the step norm drops below this.
    pub step_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 20,
            lambda_init: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.1,
            cost_tol: 1e-8,
            step_tol: 1e-10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.max_iters > 0 && self.lambda_init > 0.0 && self.cost_tol > 0.0 && self.step_tol > 0.0;
        if !positive || !(self.lambda_up > 1.0) || !(self.lambda_down > 0.0 && self.lambda_down < 1.0) {
            return Err(Error::InvalidConfig(format!("solver settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Termination {
    CostTolerance,
    StepTolerance,
    MaxIterations,
    /// Damping saturated without finding a decreasing step.
    NoProgress,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolveStats {
    /// Accepted steps.
    pub iterations: usize,
    pub rejected_steps: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub termination: Termination,
    /// Measurements excluded by the outlier gate or lying outside the window.
    pub rejected_measurements: usize,
    pub elapsed: Duration,
}

/// A nonlinear least-squares problem on a product manifold.
pub trait Problem {
    type Snapshot;

    /// Normal equations and objective at the current estimate.
    fn linearize(&mut self) -> Result<NormalSystem>;
    /// Applies a tangent-space step.
    fn retract(&mut self, step: &DVector<f64>);
    fn snapshot(&self) -> Self::Snapshot;
    fn restore(&mut self, snapshot: Self::Snapshot);
}

const LAMBDA_MAX: f64 = 1e16;

/// Runs LM until a stopping rule fires. Accepted costs strictly decrease.
pub fn solve<P: Problem>(problem: &mut P, cfg: &SolverConfig) -> Result<SolveStats> {
    cfg.validate()?;
    let start = Instant::now();
    let mut sys = problem.linearize()?;
    if sys.residual_count == 0 {
        return Err(Error::NoMeasurements);
    }
    let initial_cost = sys.cost;
    let mut cost = sys.cost;
    let mut lambda = cfg.lambda_init;
    let mut iterations = 0;
    let mut rejected_steps = 0;
    let mut termination = Termination::MaxIterations;

    for _ in 0..cfg.max_iters {
        if cost == 0.0 {
            termination = Termination::CostTolerance;
            break;
        }
        let step = match sys.solve_damped(lambda) {
            Ok(step) => step,
            Err(Error::SingularSystem) => {
                lambda *= cfg.lambda_up;
                if lambda > LAMBDA_MAX {
                    return Err(Error::SingularSystem);
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        if step.norm() < cfg.step_tol {
            termination = Termination::StepTolerance;
            break;
        }
        let snapshot = problem.snapshot();
        problem.retract(&step);
        // Candidates are usually accepted, so linearize there directly and
        // reuse the system for the next step.
        let candidate = problem.linearize()?;
        let new_cost = candidate.cost;
        if new_cost < cost {
            let rel = (cost - new_cost) / cost;
            cost = new_cost;
            iterations += 1;
            lambda = (lambda * cfg.lambda_down).max(1e-15);
            if rel < cfg.cost_tol {
                termination = Termination::CostTolerance;
                break;
            }
            sys = candidate;
        } else {
            problem.restore(snapshot);
            rejected_steps += 1;
            lambda *= cfg.lambda_up;
            if lambda > LAMBDA_MAX {
                termination = Termination::NoProgress;
                break;
            }
        }
    }
    Ok(SolveStats {
        iterations,
        rejected_steps,
        initial_cost,
        final_cost: cost,
        termination,
        rejected_measurements: 0,
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::residuals::{Linearization, ParamBlock};
    use crate::solver::layout::{KnotBlocks, ParameterLayout};
    use nalgebra::DMatrix;

    /// Linear residual `A x − b` over position blocks.
    struct Linear {
        a: DMatrix<f64>,
        b: DVector<f64>,
        x: DVector<f64>,
        layout: ParameterLayout,
    }

    impl Linear {
        fn lin(&self) -> Linearization {
            let mut lin = Linearization::new(&self.a * &self.x - &self.b);
            for k in 0..self.x.len() / 3 {
                lin.add(ParamBlock::Pos(k), &self.a.columns(3 * k, 3));
            }
            lin
        }
    }

    impl Problem for Linear {
        type Snapshot = DVector<f64>;
        fn linearize(&mut self) -> Result<NormalSystem> {
            Ok(NormalSystem::from_linearizations(&self.layout, [&self.lin()]))
        }
        fn retract(&mut self, step: &DVector<f64>) {
            self.x += step;
        }
        fn snapshot(&self) -> DVector<f64> {
            self.x.clone()
        }
        fn restore(&mut self, s: DVector<f64>) {
            self.x = s;
        }
    }

    fn linear_problem() -> Linear {
        let blocks = KnotBlocks {
            rot: false,
            pos: true,
            bias: false,
        };
        Linear {
            a: DMatrix::from_fn(9, 6, |i, j| {
                ((i * 7 + j * 3) % 5) as f64 + if i == j { 4.0 } else { 0.0 }
            }),
            b: DVector::from_fn(9, |i, _| i as f64 - 3.0),
            x: DVector::zeros(6),
            layout: ParameterLayout::new(0, 2, blocks),
        }
    }

    #[test]
    fn quadratic_problem_converges_in_one_step() {
        let mut p = linear_problem();
        let cfg = SolverConfig {
            lambda_init: 1e-12,
            ..Default::default()
        };
        let stats = solve(&mut p, &cfg).unwrap();
        assert_eq!(stats.iterations, 1);
        let x_ls = p.a.clone().svd(true, true).solve(&p.b, 1e-14).unwrap();
        assert!((p.x.clone() - x_ls).amax() < 1e-9);
        assert!(stats.final_cost <= stats.initial_cost);
    }

    #[test]
    fn optimal_input_takes_no_step() {
        let mut p = linear_problem();
        p.x = p.a.clone().svd(true, true).solve(&p.b, 1e-14).unwrap();
        let before = p.x.clone();
        let stats = solve(&mut p, &SolverConfig::default()).unwrap();
        assert_eq!(stats.iterations, 0);
        assert_eq!(p.x, before);
        assert_eq!(stats.final_cost, stats.initial_cost);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut p = linear_problem();
        let cfg = SolverConfig {
            lambda_up: 0.5,
            ..Default::default()
        };
        assert!(matches!(solve(&mut p, &cfg), Err(Error::InvalidConfig(_))));
    }
}
