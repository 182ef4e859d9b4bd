//! Sliding-window UWB-inertial estimator.
//!
//! Knots are spawned on a uniform grid as measurements arrive. While the
//! window grows, extrinsic calibration and gravity direction are estimated
//! alongside the trajectory with the first knot's pose held fixed, which
//! makes the world frame the initial body frame. Once the window holds
//! `window_knots` active knots the calibration is frozen and the window
//! slides: the oldest active knot becomes idle, idle knots keep
//! contributing to residual interpolation at their frozen values, and
//! measurements whose support has left the window are evicted.

use std::collections::VecDeque;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::residuals::{
    gate_outlier, uwb_innovation, AnchorMap, Calibration, ImuMeasurement, Measurement, NoiseModel, Stream, Whitening,
};
use crate::solver::{
    assemble, solve, FusionProblem, KnotBlocks, ParameterLayout, SolveStats, SolverConfig, WindowData,
};
use crate::trajectory::{KnotState, StateSample, Trajectory};

/// Number of most recently removed knots kept as fixed support.
pub const IDLE_KNOTS: usize = 3;

/// Calibration Schur-block condition number above which a solve is flagged
/// as having unobservable calibration.
pub const CALIB_CONDITION_LIMIT: f64 = 1e8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    /// Knot spacing in seconds.
    pub knot_dt: f64,
    /// Active knots once the window is full.
    pub window_knots: usize,
    pub calib_enabled: bool,
    /// Largest accepted |predicted − measured| UWB value, meters.
    pub gate_threshold: f64,
    /// UWB measurements accepted without gating while the estimate settles.
    pub gate_warmup: usize,
    pub imu_downsample: usize,
    pub uwb_downsample: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            knot_dt: 0.1,
            window_knots: 100,
            calib_enabled: true,
            gate_threshold: 0.5,
            gate_warmup: 100,
            imu_downsample: 1,
            uwb_downsample: 1,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if !(self.knot_dt > 0.0) {
            return bad("knot_dt must be positive");
        }
        if self.window_knots < 8 {
            return bad("window_knots must be at least 8");
        }
        if self.imu_downsample == 0 || self.uwb_downsample == 0 {
            return bad("downsample factors must be at least 1");
        }
        if !(self.gate_threshold > 0.0) {
            return bad("gate_threshold must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Phase {
    Growing,
    Sliding,
}

/// Statistics of one window solve together with the window it ran on.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub active_knots: usize,
    pub stats: SolveStats,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub non_monotonic: usize,
    pub out_of_window: usize,
    pub downsampled: usize,
    pub evicted: usize,
    /// Solves whose calibration block exceeded [`CALIB_CONDITION_LIMIT`].
    pub calib_unobservable: usize,
}

/// Read-only handle that observes the trajectory as of the last completed
/// solve or knot spawn, never a partially updated one.
#[derive(Clone, Debug, Default)]
pub struct SharedTrajectory(Arc<RwLock<Option<Arc<Trajectory>>>>);

impl SharedTrajectory {
    pub fn get(&self) -> Option<Arc<Trajectory>> {
        self.0.read().expect("trajectory lock poisoned").clone()
    }

    pub fn query(&self, t: f64) -> Result<StateSample> {
        match self.get() {
            Some(traj) => traj.sample(t),
            None => Err(Error::OutOfRange {
                t,
                start: f64::NAN,
                end: f64::NAN,
            }),
        }
    }

    fn publish(&self, traj: &Trajectory) {
        *self.0.write().expect("trajectory lock poisoned") = Some(Arc::new(traj.clone()));
    }
}

pub struct Estimator {
    config: WindowConfig,
    noise: NoiseModel,
    whitening: Whitening,
    solver: SolverConfig,
    anchors: AnchorMap,
    calib: Calibration,
    traj: Option<Trajectory>,
    active_start: usize,
    phase: Phase,
    imu: VecDeque<ImuMeasurement>,
    uwb: VecDeque<Measurement>,
    last_t: [Option<f64>; 2],
    seen: [usize; 2],
    uwb_buffered: usize,
    pending: bool,
    counters: Counters,
    stats: Vec<StepRecord>,
    shared: Option<SharedTrajectory>,
}

fn stream_index(s: Stream) -> usize {
    match s {
        Stream::Imu => 0,
        Stream::Uwb => 1,
    }
}

impl Estimator {
    pub fn new(
        config: WindowConfig,
        noise: NoiseModel,
        solver: SolverConfig,
        anchors: AnchorMap,
        initial_calibration: Calibration,
    ) -> Result<Self> {
        config.validate()?;
        solver.validate()?;
        if anchors.is_empty() {
            return Err(Error::InvalidConfig("no UWB anchors".into()));
        }
        let whitening = noise.whitening()?;
        Ok(Self {
            config,
            noise,
            whitening,
            solver,
            anchors,
            calib: initial_calibration,
            traj: None,
            active_start: 0,
            phase: Phase::Growing,
            imu: VecDeque::new(),
            uwb: VecDeque::new(),
            last_t: [None; 2],
            seen: [0; 2],
            uwb_buffered: 0,
            pending: false,
            counters: Counters::default(),
            stats: Vec::new(),
            shared: None,
        })
    }

    pub fn config(&self) -> &WindowConfig {
        &self.config
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn calibration(&self) -> &Calibration {
        &self.calib
    }

    pub fn trajectory(&self) -> Option<&Trajectory> {
        self.traj.as_ref()
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    /// Statistics of every window solve, in order.
    pub fn stats(&self) -> &[StepRecord] {
        &self.stats
    }

    /// Global indices of the active knots.
    pub fn active_range(&self) -> std::ops::Range<usize> {
        self.active_start..self.traj.as_ref().map_or(0, Trajectory::len)
    }

    /// Global indices of the idle knots.
    pub fn idle_range(&self) -> std::ops::Range<usize> {
        self.active_start.saturating_sub(IDLE_KNOTS)..self.active_start
    }

    pub fn buffered(&self) -> (usize, usize) {
        (self.imu.len(), self.uwb.len())
    }

    /// A handle for concurrent readers; published after every solve.
    pub fn shared(&mut self) -> SharedTrajectory {
        let handle = self.shared.get_or_insert_with(SharedTrajectory::default).clone();
        if let Some(traj) = &self.traj {
            handle.publish(traj);
        }
        handle
    }

    fn publish(&self) {
        if let (Some(handle), Some(traj)) = (&self.shared, &self.traj) {
            handle.publish(traj);
        }
    }

    /// Buffers one measurement, extending the grid and solving the window
    /// whenever the measurement lies past the current coverage.
    pub fn ingest(&mut self, m: Measurement) -> Result<()> {
        let t = m.t();
        let stream = m.stream();
        let si = stream_index(stream);
        if !t.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "non-finite timestamp in {} stream",
                stream.name()
            )));
        }
        if let Some(last) = self.last_t[si] {
            if t < last {
                self.counters.non_monotonic += 1;
                return Err(Error::NonMonotonicTimestamp {
                    stream: stream.name(),
                    t,
                    last,
                });
            }
        }
        self.last_t[si] = Some(t);
        let factor = match stream {
            Stream::Imu => self.config.imu_downsample,
            Stream::Uwb => self.config.uwb_downsample,
        };
        self.seen[si] += 1;
        if !(self.seen[si] - 1).is_multiple_of(factor) {
            self.counters.downsampled += 1;
            return Ok(());
        }

        let dt = self.config.knot_dt;
        let traj = match &self.traj {
            None => {
                let traj = Trajectory::new(t - 2.0 * dt, dt, vec![KnotState::default(); 4])?;
                self.traj = Some(traj);
                self.traj.as_ref().expect("just set")
            }
            Some(traj) => traj,
        };
        let (start, _) = traj.grid().valid_span();
        if t < start || last_support(traj, t) < self.active_start {
            self.counters.out_of_window += 1;
            return Ok(());
        }
        if t > traj.grid().valid_span().1 {
            if self.pending {
                self.solve_window()?;
            }
            while t > self.traj.as_ref().expect("initialized").grid().valid_span().1 {
                self.spawn_knot();
            }
        }
        match m {
            Measurement::Imu(imu) => self.imu.push_back(imu),
            uwb => {
                self.uwb.push_back(uwb);
                self.uwb_buffered += 1;
            }
        }
        self.pending = true;
        Ok(())
    }

    /// Solves any measurements buffered since the last solve.
    pub fn finish(&mut self) -> Result<Option<SolveStats>> {
        if self.pending {
            self.solve_window().map(Some)
        } else {
            Ok(None)
        }
    }

    /// Appends a knot by constant-velocity extrapolation of the last two,
    /// sliding the window when it is full.
    pub fn spawn_knot(&mut self) {
        let Some(traj) = self.traj.as_mut() else {
            return;
        };
        let n = traj.len();
        let (prev, last) = (traj.knots()[n - 2], traj.knots()[n - 1]);
        traj.push(KnotState {
            q: last.q * (prev.q.inverse() * last.q),
            p: last.p * 2.0 - prev.p,
            b: last.b,
        });
        let active = traj.len() - self.active_start;
        if active > self.config.window_knots {
            self.slide();
        }
        if traj_len(&self.traj) - self.active_start >= self.config.window_knots {
            self.phase = Phase::Sliding;
        }
        self.publish();
    }

    /// Moves the oldest active knot to the idle set and evicts measurements
    /// that no longer touch an active knot.
    fn slide(&mut self) {
        self.active_start += 1;
        let traj = self.traj.as_ref().expect("sliding requires knots");
        let active_start = self.active_start;
        let keep = |t: f64| last_support(traj, t) >= active_start;
        let before = self.imu.len() + self.uwb.len();
        while self.imu.front().is_some_and(|m| !keep(m.t)) {
            self.imu.pop_front();
        }
        while self.uwb.front().is_some_and(|m| !keep(m.t())) {
            self.uwb.pop_front();
        }
        self.counters.evicted += before - self.imu.len() - self.uwb.len();
    }

    fn calibrating(&self) -> bool {
        self.config.calib_enabled && self.phase == Phase::Growing
    }

    /// UWB measurements passing the gate against the current estimate,
    /// plus the number rejected.
    fn gated_uwb(&self, traj: &Trajectory) -> (Vec<&Measurement>, usize) {
        let bypass = self.uwb_buffered <= self.config.gate_warmup;
        let mut rejected = 0;
        let accepted = self
            .uwb
            .iter()
            .filter(|m| {
                if bypass {
                    return true;
                }
                match uwb_innovation(traj, m, &self.calib, &self.anchors) {
                    Ok(e) => {
                        let ok = gate_outlier(e, 0.0, self.config.gate_threshold);
                        rejected += usize::from(!ok);
                        ok
                    }
                    // unsupported times are skipped during assembly
                    Err(_) => true,
                }
            })
            .collect();
        (accepted, rejected)
    }

    /// One LM solve over the active knots (and calibration while growing).
    pub fn solve_window(&mut self) -> Result<SolveStats> {
        let mut traj = self.traj.take().ok_or(Error::NoMeasurements)?;
        let phase = self.phase();
        let active_knots = traj.len() - self.active_start;
        let result = self.solve_on(&mut traj);
        self.traj = Some(traj);
        self.pending = false;
        let stats = result?;
        log::info!(
            "{phase:?} solve over {active_knots} knots: {} iterations, cost {:.3e} -> {:.3e}, {:.1} ms",
            stats.iterations,
            stats.initial_cost,
            stats.final_cost,
            stats.elapsed.as_secs_f64() * 1e3
        );
        self.stats.push(StepRecord {
            phase,
            active_knots,
            stats: stats.clone(),
        });
        self.publish();
        Ok(stats)
    }

    fn solve_on(&mut self, traj: &mut Trajectory) -> Result<SolveStats> {
        let (uwb, gate_rejected) = self.gated_uwb(traj);
        let data = WindowData {
            imu: self.imu.iter().collect(),
            uwb,
            bias_pairs: self
                .imu
                .iter()
                .zip(self.imu.iter().skip(1))
                .map(|(a, b)| (a.t, b.t))
                .collect(),
        };
        if data.is_empty() {
            return Err(Error::NoMeasurements);
        }
        let count = traj.len() - self.active_start;
        let calibrating = self.calibrating();
        let pinned = calibrating.then_some(0);
        let layout = ParameterLayout::with_pinned(self.active_start, count, KnotBlocks::FULL, pinned)
            .with_calibration(calibrating);
        // Unobservable calibration directions carry no gradient, so damping
        // keeps them in place; the solve still refines the observable ones.
        let mut unobservable = false;
        if calibrating {
            let (sys, _) = assemble(traj, &self.calib, &self.anchors, &data, &self.whitening, &layout)?;
            let cond = sys.calibration_condition().unwrap_or(0.0);
            if !(cond <= CALIB_CONDITION_LIMIT) {
                log::debug!("calibration poorly observable (condition {cond:.3e})");
                unobservable = true;
            }
        }
        let mut calib = self.calib.clone();
        let mut problem = FusionProblem {
            traj,
            calib: &mut calib,
            anchors: &self.anchors,
            data: &data,
            whitening: &self.whitening,
            layout,
            skipped: 0,
        };
        let solved = solve(&mut problem, &self.solver);
        let skipped = problem.skipped;
        self.counters.calib_unobservable += usize::from(unobservable);
        let mut stats = solved?;
        stats.rejected_measurements = gate_rejected + skipped;
        self.calib = calib;
        Ok(stats)
    }

    /// Full state at `t` from the global spline, idle and past knots included.
    pub fn query(&self, t: f64) -> Result<StateSample> {
        match &self.traj {
            Some(traj) => traj.sample(t),
            None => Err(Error::OutOfRange {
                t,
                start: f64::NAN,
                end: f64::NAN,
            }),
        }
    }

    /// Uniform samples over the covered span at `rate` Hz.
    pub fn export_trajectory(&self, rate: f64) -> Result<Vec<StateSample>> {
        match &self.traj {
            Some(traj) => export_trajectory(traj, rate),
            None => {
                if rate > 0.0 {
                    Ok(Vec::new())
                } else {
                    Err(Error::InvalidConfig(format!(
                        "export rate must be positive, got {rate}"
                    )))
                }
            }
        }
    }
}

/// Index of the last knot supporting time `t`.
fn last_support(traj: &Trajectory, t: f64) -> usize {
    let g = traj.grid();
    let s = ((t - g.t0) / g.dt).floor().max(2.0) as usize;
    s.min(g.count - 2) + 1
}

fn traj_len(traj: &Option<Trajectory>) -> usize {
    traj.as_ref().map_or(0, Trajectory::len)
}

/// `floor(span · rate) + 1` samples starting at the beginning of the span.
pub fn export_trajectory(traj: &Trajectory, rate: f64) -> Result<Vec<StateSample>> {
    if !(rate > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "export rate must be positive, got {rate}"
        )));
    }
    let (start, end) = traj.grid().valid_span();
    let n = ((end - start) * rate + 1e-9).floor() as usize + 1;
    (0..n)
        .map(|i| traj.sample((start + i as f64 / rate).min(end)))
        .collect()
}

/// Jointly solves every knot of `traj` against all measurements, with the
/// calibration held fixed. `gate_threshold` optionally rejects UWB values
/// whose innovation at the initial estimate exceeds it.
#[allow(clippy::too_many_arguments)]
pub fn batch_solve(
    traj: &mut Trajectory,
    calib: &Calibration,
    anchors: &AnchorMap,
    imu: &[ImuMeasurement],
    uwb: &[Measurement],
    noise: &NoiseModel,
    solver: &SolverConfig,
    gate_threshold: Option<f64>,
) -> Result<SolveStats> {
    let whitening = noise.whitening()?;
    let mut rejected = 0;
    let uwb: Vec<&Measurement> = uwb
        .iter()
        .filter(|m| match (gate_threshold, uwb_innovation(traj, m, calib, anchors)) {
            (Some(th), Ok(e)) => {
                let ok = gate_outlier(e, 0.0, th);
                rejected += usize::from(!ok);
                ok
            }
            _ => true,
        })
        .collect();
    let data = WindowData {
        imu: imu.iter().collect(),
        uwb,
        bias_pairs: imu.windows(2).map(|w| (w[0].t, w[1].t)).collect(),
    };
    let mut calib = calib.clone();
    let layout = ParameterLayout::new(0, traj.len(), KnotBlocks::FULL);
    let mut problem = FusionProblem {
        traj,
        calib: &mut calib,
        anchors,
        data: &data,
        whitening: &whitening,
        layout,
        skipped: 0,
    };
    let mut stats = solve(&mut problem, solver)?;
    stats.rejected_measurements = rejected + problem.skipped;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quat::exp_map;
    use crate::residuals::UwbToaMeasurement;
    use crate::{UnitQuat, Vec3};

    fn estimator(window: usize) -> Estimator {
        let mut anchors = AnchorMap::default();
        anchors.insert("a", Vec3::new(5.0, 0.0, 0.0));
        Estimator::new(
            WindowConfig {
                window_knots: window,
                calib_enabled: false,
                ..Default::default()
            },
            NoiseModel::isotropic(0.1, 0.1, 0.01, 0.01, 0.001),
            SolverConfig::default(),
            anchors,
            Calibration::default(),
        )
        .unwrap()
    }

    fn imu(t: f64) -> Measurement {
        Measurement::Imu(ImuMeasurement {
            t,
            accel: Vec3::new(0.0, 0.0, 9.81),
            gyro: Vec3::zeros(),
        })
    }

    #[test]
    fn bootstrap_creates_four_knots_covering_first_sample() {
        let mut est = estimator(8);
        est.ingest(imu(1.0)).unwrap();
        let traj = est.trajectory().unwrap();
        assert_eq!(traj.len(), 4);
        assert!(traj.grid().contains(1.0));
        assert!((traj.grid().valid_span().0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn downsampling_keeps_every_nth_sample() {
        let mut est = estimator(8);
        est.config.imu_downsample = 2;
        for i in 0..6 {
            est.ingest(imu(0.01 * i as f64)).unwrap();
        }
        assert_eq!(est.buffered().0, 3);
        assert_eq!(est.counters().downsampled, 3);
    }

    #[test]
    fn non_monotonic_samples_are_dropped() {
        let mut est = estimator(8);
        est.ingest(imu(1.0)).unwrap();
        assert!(matches!(
            est.ingest(imu(0.5)),
            Err(Error::NonMonotonicTimestamp { stream: "imu", .. })
        ));
        assert_eq!(est.counters().non_monotonic, 1);
        assert_eq!(est.buffered().0, 1);
    }

    #[test]
    fn spawn_extrapolates_at_constant_velocity() {
        let mut est = estimator(8);
        est.ingest(imu(0.0)).unwrap();
        est.spawn_knot();
        let k = est.trajectory().unwrap().knots();
        assert_eq!(k[4], k[3]);

        let axis = Vec3::new(0.0, 0.6, 0.8);
        let traj = est.traj.as_mut().unwrap();
        let n = traj.len();
        traj.knots_mut()[n - 2] = KnotState {
            q: exp_map(&(axis * 0.1)),
            p: Vec3::new(1.0, 2.0, 3.0),
            ..Default::default()
        };
        traj.knots_mut()[n - 1] = KnotState {
            q: exp_map(&(axis * 0.15)),
            p: Vec3::new(1.5, 2.0, 2.0),
            ..Default::default()
        };
        est.spawn_knot();
        let last = *est.trajectory().unwrap().knots().last().unwrap();
        assert!((last.p - Vec3::new(2.0, 2.0, 1.0)).amax() < 1e-12);
        assert!(last.q.angle_to(&exp_map(&(axis * 0.2))) < 1e-12);
    }

    #[test]
    fn sliding_keeps_window_size_and_freezes_idle_knots() {
        let mut est = estimator(8);
        let mut t = 0.0;
        while t < 2.0 {
            est.ingest(imu(t)).unwrap();
            if ((t * 100.0).round() as usize).is_multiple_of(5) {
                est.ingest(Measurement::Toa(UwbToaMeasurement {
                    t,
                    anchor: "a".into(),
                    range: 5.0,
                }))
                .unwrap();
            }
            t += 0.01;
        }
        assert_eq!(est.phase(), Phase::Sliding);
        assert_eq!(est.active_range().len(), 8);
        assert_eq!(est.idle_range().len(), IDLE_KNOTS);
        let idle_idx = est.idle_range();
        let idle: Vec<KnotState> = idle_idx.clone().map(|k| est.trajectory().unwrap().knots()[k]).collect();
        est.ingest(imu(t)).unwrap();
        est.finish().unwrap();
        let after: Vec<KnotState> = idle_idx.map(|k| est.trajectory().unwrap().knots()[k]).collect();
        assert_eq!(idle, after);
        // the oldest buffered sample still touches the window
        let first = est.imu.front().unwrap().t;
        assert!(last_support(est.trajectory().unwrap(), first) >= est.active_range().start);
        assert!(est.counters().evicted > 0);
    }

    #[test]
    fn static_query_has_zero_rates() {
        let mut est = estimator(8);
        let mut t = 0.0;
        while t < 1.5 {
            est.ingest(imu(t)).unwrap();
            t += 0.01;
        }
        est.finish().unwrap();
        let s = est.query(1.0).unwrap();
        assert!(s.v.amax() < 1e-9 && s.a.amax() < 1e-9 && s.omega_body.amax() < 1e-9);
        assert!(s.q.angle_to(&UnitQuat::identity()) < 1e-9);
    }

    #[test]
    fn export_sample_count_and_spacing() {
        let traj = Trajectory::new(0.0, 0.1, vec![KnotState::default(); 104]).unwrap();
        let out = export_trajectory(&traj, 200.0).unwrap();
        // span is [0.2, 10.3]: 10.1 s
        assert_eq!(out.len(), 2021);
        assert!(out.windows(2).all(|w| w[1].t > w[0].t));
        let at_knots = export_trajectory(&traj, 10.0).unwrap();
        assert_eq!(at_knots.len(), 102);
        assert!((at_knots[5].t - traj.grid().knot_time(7)).abs() < 1e-12);
        assert!(estimator(8).export_trajectory(10.0).unwrap().is_empty());
    }
}
