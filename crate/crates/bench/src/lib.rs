//! Workloads shared by the benchmarks.

use std::time::{Duration, Instant};

use splinefuse::estimator::{Estimator, Phase, WindowConfig};
use splinefuse::io::synth::{synth_fusion_scenario, ScenarioConfig};
use splinefuse::io::Config;
use splinefuse::residuals::Measurement;

/// Feeds a reference scenario to an estimator one knot interval at a time,
/// starting once the window slides. Restarts from a fresh estimator when the
/// scenario runs out.
pub struct SlidingStream {
    cfg: ScenarioConfig,
    measurements: Vec<Measurement>,
    estimator: Estimator,
    next: usize,
}

impl SlidingStream {
    pub fn new(duration: f64) -> Self {
        let cfg = ScenarioConfig {
            duration,
            ..Default::default()
        };
        let (estimator, measurements, next) = Self::warm_up(&cfg);
        Self {
            cfg,
            measurements,
            estimator,
            next,
        }
    }

    fn warm_up(cfg: &ScenarioConfig) -> (Estimator, Vec<Measurement>, usize) {
        let sc = synth_fusion_scenario(cfg);
        let defaults = Config::default();
        let window = WindowConfig {
            calib_enabled: false,
            ..defaults.window()
        };
        let mut estimator = Estimator::new(
            window,
            defaults.noise(),
            defaults.solver(),
            sc.anchors.clone(),
            sc.calibration.clone(),
        )
        .expect("default configuration is valid");
        let measurements = sc.merged();
        let mut next = 0;
        while next < measurements.len() && estimator.phase() != Phase::Sliding {
            estimator.ingest(measurements[next].clone()).expect("ingest");
            next += 1;
        }
        (estimator, measurements, next)
    }

    /// Wall time of ingesting measurements up to and including the next
    /// window solve.
    pub fn step(&mut self) -> Duration {
        loop {
            let solves = self.estimator.stats().len();
            let start = Instant::now();
            while self.next < self.measurements.len() {
                self.estimator
                    .ingest(self.measurements[self.next].clone())
                    .expect("ingest");
                self.next += 1;
                if self.estimator.stats().len() > solves {
                    return start.elapsed();
                }
            }
            let (estimator, measurements, next) = Self::warm_up(&self.cfg);
            (self.estimator, self.measurements, self.next) = (estimator, measurements, next);
        }
    }
}
