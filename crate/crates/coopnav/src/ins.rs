//! Per-foot ZUPT-aided strapdown inertial navigation with recursive step
//! segmentation.
//!
//! The filter integrates specific force and angular rate into a local
//! navigation solution, estimates its error with a 9-state error-state
//! Kalman filter over `[δp, δv, δθ]`, applies zero-velocity pseudo
//! measurements whenever the stance detector fires, and feeds corrections
//! back immediately. A recursive segmenter resets position, yaw and the
//! full covariance once per stance phase, emitting the accumulated
//! displacement and heading change as a [`StepUpdate`] that drives the
//! step-wise dead reckoning.

use std::collections::VecDeque;

use nalgebra::{Matrix3, SMatrix, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::GRAVITY;

/// 9×9 error-state covariance over `[δp, δv, δθ]`.
///
/// Index layout: position 0..3, velocity 3..6, attitude 6..9 with yaw at
/// index 8. Kept symmetric by symmetrizing after every update.
pub type NavCov = SMatrix<f64, 9, 9>;

/// One inertial reading: specific force and angular rate with a timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    /// Timestamp, seconds. Strictly increasing within a stream.
    pub t: f64,
    /// Specific force in the body frame, m/s².
    pub f: Vector3<f64>,
    /// Angular rate in the body frame, rad/s.
    pub w: Vector3<f64>,
}

impl ImuSample {
    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.f.iter().all(|v| v.is_finite()) && self.w.iter().all(|v| v.is_finite())
    }
}

/// Strapdown navigation state: position, velocity and body-to-navigation
/// orientation quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub q: UnitQuaternion<f64>,
}

impl Default for NavState {
    fn default() -> Self {
        Self {
            p: Vector3::zeros(),
            v: Vector3::zeros(),
            q: UnitQuaternion::identity(),
        }
    }
}

/// Zero-velocity detector configuration.
#[derive(Debug, Clone, Copy)]
pub struct DetectorConfig {
    /// Window length in samples, ≥ 2.
    pub window_len: usize,
    /// Detection threshold on the test statistic.
    pub gamma_z: f64,
    /// Assumed accelerometer noise scale, m/s².
    pub sigma_f: f64,
    /// Assumed gyroscope noise scale, rad/s.
    pub sigma_w: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            window_len: 20,
            gamma_z: 10.0,
            sigma_f: 0.02,
            sigma_w: 0.002,
        }
    }
}

/// Step segmenter configuration (reset conditions).
#[derive(Debug, Clone, Copy)]
pub struct SegmenterConfig {
    /// Velocity-variance threshold on the first velocity diagonal, m²/s².
    pub gamma_p: f64,
    /// Minimum number of samples between resets.
    pub c_min: u32,
    /// Maximum number of samples of a pending reset.
    pub c_max: u32,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            gamma_p: 1e-5,
            c_min: 40,
            c_max: 120,
        }
    }
}

/// One step's displacement, heading change, and covariance blocks — the
/// sole foot-to-fusion payload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepUpdate {
    /// Step index, starting at 1 for the first emitted step.
    pub seq: u64,
    /// Displacement over the step in the local (post-reset) frame, m.
    pub dp: Vector3<f64>,
    /// Heading change over the step, rad.
    pub dpsi: f64,
    /// Position covariance block, m².
    pub p_p: Matrix3<f64>,
    /// Position–heading cross covariance, m·rad.
    pub p_ppsi: Vector3<f64>,
    /// Heading variance, rad².
    pub p_psipsi: f64,
    /// Reset time, seconds.
    pub t_step: f64,
}

/// Errors raised by the inertial-navigation operations.
#[derive(Debug, Error)]
pub enum InsError {
    #[error("non-finite component in input")]
    NonFinite,
    #[error("non-positive time step dt = {0}")]
    NonPositiveDt(f64),
    #[error("detector window has {got} samples, expected {want}")]
    ShortWindow { got: usize, want: usize },
    #[error("timestamps not strictly increasing: {prev} -> {next}")]
    NonMonotonicTime { prev: f64, next: f64 },
    #[error("innovation covariance degenerate: condition {0:.3e}")]
    DegenerateInnovation(f64),
    #[error("imu log: {0}")]
    Csv(String),
}

/// One strapdown integration step per the mechanization equations:
/// `p += v·dt`, `v += (q f q* − g)·dt`, `q := q ⊗ exp(ω·dt)`.
///
/// The position update uses the previous velocity; the quaternion update is
/// the exact exponential of the rotation vector.
pub fn mechanize(s: &NavState, m: &ImuSample, dt: f64) -> Result<NavState, InsError> {
    if !m.is_finite() || !dt.is_finite() {
        return Err(InsError::NonFinite);
    }
    if dt <= 0.0 {
        return Err(InsError::NonPositiveDt(dt));
    }
    let gravity = Vector3::new(0.0, 0.0, GRAVITY);
    let p = s.p + s.v * dt;
    let v = s.v + (s.q * m.f - gravity) * dt;
    let mut q = s.q * UnitQuaternion::from_scaled_axis(m.w * dt);
    q.renormalize();
    Ok(NavState { p, v, q })
}

fn cross_matrix(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Error-state transition matrix of the first-order error model.
///
/// Couples position to velocity and velocity to attitude through the
/// rotated specific force.
pub fn error_transition(s: &NavState, m: &ImuSample, dt: f64) -> NavCov {
    let mut f = NavCov::identity();
    let fn_nav = s.q * m.f;
    let coupling = -cross_matrix(&fn_nav) * dt;
    for i in 0..3 {
        f[(i, 3 + i)] = dt;
        for j in 0..3 {
            f[(3 + i, 6 + j)] = coupling[(i, j)];
        }
    }
    f
}

fn symmetrize9(m: &mut NavCov) {
    for i in 0..9 {
        for j in (i + 1)..9 {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Propagates the error covariance one step: `P := F P Fᵀ + Q`, symmetrized.
pub fn propagate_error_cov(
    p: &NavCov,
    s: &NavState,
    m: &ImuSample,
    dt: f64,
    q_proc: &NavCov,
) -> Result<NavCov, InsError> {
    if !m.is_finite() || !dt.is_finite() {
        return Err(InsError::NonFinite);
    }
    let f = error_transition(s, m, dt);
    let mut out = f * p * f.transpose() + q_proc;
    symmetrize9(&mut out);
    Ok(out)
}

/// Zero-velocity test statistic over a window: mean of the squared
/// accelerometer deviation from the gravity magnitude plus the gyro energy,
/// each normalized by the configured noise scales.
///
/// Returns `(Z < γ_Z, Z)`.
pub fn zupt_detect(window: &[ImuSample], cfg: &DetectorConfig) -> Result<(bool, f64), InsError> {
    if window.len() != cfg.window_len {
        return Err(InsError::ShortWindow {
            got: window.len(),
            want: cfg.window_len,
        });
    }
    let mut acc = 0.0;
    for s in window {
        if !s.is_finite() {
            return Err(InsError::NonFinite);
        }
        let df = s.f.norm() - GRAVITY;
        acc += df * df / (cfg.sigma_f * cfg.sigma_f) + s.w.norm_squared() / (cfg.sigma_w * cfg.sigma_w);
    }
    let z = acc / cfg.window_len as f64;
    Ok((z < cfg.gamma_z, z))
}

/// Zero-velocity measurement update with `H = [0 I 0]` followed by immediate
/// feedback: position and velocity corrected additively, orientation by the
/// quaternion exponential of the attitude correction. Error estimates are
/// zeroed by construction (they are never propagated).
pub fn zupt_update(
    s: &NavState,
    p: &NavCov,
    r_meas: &Matrix3<f64>,
) -> Result<(NavState, NavCov), InsError> {
    // S = H P Hᵀ + R with H selecting the velocity block.
    let mut innov_cov = p.fixed_view::<3, 3>(3, 3) + r_meas;
    for i in 0..3 {
        innov_cov[(i, i)] += 1e-12;
    }
    let eig = innov_cov.symmetric_eigen();
    let max_ev = eig.eigenvalues.max();
    let min_ev = eig.eigenvalues.min();
    if min_ev <= 0.0 || max_ev / min_ev > 1e12 {
        return Err(InsError::DegenerateInnovation(max_ev / min_ev.max(f64::MIN_POSITIVE)));
    }
    let s_inv = innov_cov.try_inverse().ok_or(InsError::DegenerateInnovation(f64::INFINITY))?;

    let ph_t: SMatrix<f64, 9, 3> = p.fixed_view::<9, 3>(0, 3).into_owned();
    let k = ph_t * s_inv;

    // Innovation: observed zero velocity minus predicted.
    let innovation = -s.v;
    let delta = k * innovation;

    let mut state = *s;
    state.p += delta.fixed_rows::<3>(0).into_owned();
    state.v += delta.fixed_rows::<3>(3).into_owned();
    let dtheta: Vector3<f64> = delta.fixed_rows::<3>(6).into_owned();
    state.q = UnitQuaternion::from_scaled_axis(dtheta) * state.q;
    state.q.renormalize();

    // Joseph-form covariance update for numerical symmetry.
    let mut i_kh = NavCov::identity();
    for row in 0..9 {
        for col in 0..3 {
            i_kh[(row, 3 + col)] -= k[(row, col)];
        }
    }
    let mut cov = i_kh * p * i_kh.transpose() + k * r_meas * k.transpose();
    symmetrize9(&mut cov);
    Ok((state, cov))
}

/// Recursive step segmenter: counters and reset logic.
///
/// A reset is pending once the first velocity variance has fallen under
/// `γ_p` and at least `c_min` samples have elapsed since the last reset; a
/// pending reset is performed when the stance ends (detector no longer
/// stationary) or after `c_max` samples pending. The reset zeroes position,
/// velocity, yaw, the full covariance and both counters, and emits the
/// accumulated step.
#[derive(Debug, Clone)]
pub struct StepSegmenter {
    cfg: SegmenterConfig,
    c_p: u32,
    c_d: u32,
    seq: u64,
}

impl StepSegmenter {
    pub fn new(cfg: SegmenterConfig) -> Self {
        Self {
            cfg,
            c_p: 0,
            c_d: 0,
            seq: 0,
        }
    }

    /// Processes one sample. `stationary` is the detector flag (`Z < γ_Z`).
    pub fn process(
        &mut self,
        stationary: bool,
        state: &mut NavState,
        cov: &mut NavCov,
        t: f64,
    ) -> Option<StepUpdate> {
        self.c_p += 1;
        if cov[(3, 3)] < self.cfg.gamma_p && self.c_p > self.cfg.c_min {
            self.c_d += 1;
            if !stationary || self.c_d > self.cfg.c_max {
                self.seq += 1;
                let (roll, pitch, yaw) = state.q.euler_angles();
                let step = StepUpdate {
                    seq: self.seq,
                    dp: state.p,
                    dpsi: yaw,
                    p_p: cov.fixed_view::<3, 3>(0, 0).into_owned(),
                    p_ppsi: cov.fixed_view::<3, 1>(0, 8).into_owned(),
                    p_psipsi: cov[(8, 8)],
                    t_step: t,
                };
                state.p = Vector3::zeros();
                state.v = Vector3::zeros();
                state.q = UnitQuaternion::from_euler_angles(roll, pitch, 0.0);
                *cov = NavCov::zeros();
                self.c_p = 0;
                self.c_d = 0;
                return Some(step);
            }
        }
        None
    }

    pub fn last_seq(&self) -> u64 {
        self.seq
    }
}

/// Full per-foot filter configuration.
#[derive(Debug, Clone, Copy)]
pub struct InsConfig {
    pub detector: DetectorConfig,
    pub segmenter: SegmenterConfig,
    /// Accelerometer noise density used for the process noise, m/s².
    pub accel_noise_std: f64,
    /// Gyroscope noise density used for the process noise, rad/s.
    pub gyro_noise_std: f64,
    /// Zero-velocity pseudo-measurement noise, m/s.
    pub zupt_noise_std: f64,
    /// Variance floor re-seeded on velocity/roll/pitch after a reset.
    pub reseed_floor: f64,
    /// Initial velocity and roll/pitch standard deviations.
    pub init_vel_std: f64,
    pub init_tilt_std: f64,
}

impl Default for InsConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            segmenter: SegmenterConfig::default(),
            accel_noise_std: 0.02,
            gyro_noise_std: 0.002,
            zupt_noise_std: 0.01,
            reseed_floor: 1e-6,
            init_vel_std: 1e-2,
            init_tilt_std: 1e-2,
        }
    }
}

/// ZUPT-aided strapdown filter for one foot, with optional step
/// segmentation. One instance per foot; instances are independent.
#[derive(Debug, Clone)]
pub struct ZuptIns {
    cfg: InsConfig,
    state: NavState,
    cov: NavCov,
    segmenter: StepSegmenter,
    segmentation: bool,
    window: VecDeque<ImuSample>,
    last_t: Option<f64>,
    reseed_pending: bool,
}

impl ZuptIns {
    pub fn new(cfg: InsConfig) -> Self {
        let mut cov = NavCov::zeros();
        for i in 3..6 {
            cov[(i, i)] = cfg.init_vel_std * cfg.init_vel_std;
        }
        for i in 6..8 {
            cov[(i, i)] = cfg.init_tilt_std * cfg.init_tilt_std;
        }
        Self {
            cfg,
            state: NavState::default(),
            cov,
            segmenter: StepSegmenter::new(cfg.segmenter),
            segmentation: true,
            window: VecDeque::with_capacity(cfg.detector.window_len),
            last_t: None,
            reseed_pending: false,
        }
    }

    /// Disables the segmenter, turning the filter into the indefinite
    /// (never-reset) ZUPT-aided navigation used as a consistency reference.
    pub fn with_segmentation(mut self, on: bool) -> Self {
        self.segmentation = on;
        self
    }

    pub fn state(&self) -> &NavState {
        &self.state
    }

    pub fn cov(&self) -> &NavCov {
        &self.cov
    }

    pub fn last_step_seq(&self) -> u64 {
        self.segmenter.last_seq()
    }

    /// Processes one IMU sample, returning a step update when the segmenter
    /// performs a reset.
    pub fn process_sample(&mut self, m: ImuSample) -> Result<Option<StepUpdate>, InsError> {
        if !m.is_finite() {
            return Err(InsError::NonFinite);
        }
        let dt = match self.last_t {
            None => {
                self.last_t = Some(m.t);
                self.push_window(m);
                return Ok(None);
            }
            Some(prev) => {
                if m.t <= prev {
                    return Err(InsError::NonMonotonicTime { prev, next: m.t });
                }
                m.t - prev
            }
        };
        self.last_t = Some(m.t);

        self.state = mechanize(&self.state, &m, dt)?;
        let mut q_proc = NavCov::zeros();
        let qv = (self.cfg.accel_noise_std * dt) * (self.cfg.accel_noise_std * dt);
        let qt = (self.cfg.gyro_noise_std * dt) * (self.cfg.gyro_noise_std * dt);
        for i in 0..3 {
            q_proc[(3 + i, 3 + i)] = qv;
            q_proc[(6 + i, 6 + i)] = qt;
        }
        self.cov = propagate_error_cov(&self.cov, &self.state, &m, dt, &q_proc)?;
        if self.reseed_pending {
            for i in 3..6 {
                self.cov[(i, i)] += self.cfg.reseed_floor;
            }
            for i in 6..8 {
                self.cov[(i, i)] += self.cfg.reseed_floor;
            }
            self.reseed_pending = false;
        }

        self.push_window(m);
        let stationary = if self.window.len() == self.cfg.detector.window_len {
            let window: Vec<ImuSample> = self.window.iter().copied().collect();
            let (stationary, _z) = zupt_detect(&window, &self.cfg.detector)?;
            stationary
        } else {
            false
        };

        if stationary {
            let r = Matrix3::identity() * (self.cfg.zupt_noise_std * self.cfg.zupt_noise_std);
            let (state, cov) = zupt_update(&self.state, &self.cov, &r)?;
            self.state = state;
            self.cov = cov;
        }

        if self.segmentation {
            let step = self
                .segmenter
                .process(stationary, &mut self.state, &mut self.cov, m.t);
            if step.is_some() {
                self.reseed_pending = true;
            }
            Ok(step)
        } else {
            Ok(None)
        }
    }

    fn push_window(&mut self, m: ImuSample) {
        if self.window.len() == self.cfg.detector.window_len {
            self.window.pop_front();
        }
        self.window.push_back(m);
    }
}

/// Runs a full IMU stream through the step-wise filter, collecting the
/// emitted step updates.
pub fn run_step_wise_ins(
    samples: impl IntoIterator<Item = ImuSample>,
    cfg: InsConfig,
) -> Result<Vec<StepUpdate>, InsError> {
    let mut filter = ZuptIns::new(cfg);
    let mut steps = Vec::new();
    for s in samples {
        if let Some(step) = filter.process_sample(s)? {
            steps.push(step);
        }
    }
    Ok(steps)
}

/// Reads an IMU log in the replay format: CSV with columns
/// `t, fx, fy, fz, wx, wy, wz` (SI units), with or without a header row.
pub fn read_imu_csv(path: &std::path::Path) -> Result<Vec<ImuSample>, InsError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| InsError::Csv(e.to_string()))?;
    let mut out = Vec::new();
    let mut prev_t: Option<f64> = None;
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| InsError::Csv(e.to_string()))?;
        if idx == 0 && rec.iter().any(|f| f.parse::<f64>().is_err()) {
            continue; // header row
        }
        if rec.len() != 7 {
            return Err(InsError::Csv(format!(
                "row {}: expected 7 columns, got {}",
                idx + 1,
                rec.len()
            )));
        }
        let vals: Result<Vec<f64>, _> = rec.iter().map(|f| f.parse::<f64>()).collect();
        let vals = vals.map_err(|e| InsError::Csv(format!("row {}: {}", idx + 1, e)))?;
        let sample = ImuSample {
            t: vals[0],
            f: Vector3::new(vals[1], vals[2], vals[3]),
            w: Vector3::new(vals[4], vals[5], vals[6]),
        };
        if !sample.is_finite() {
            return Err(InsError::NonFinite);
        }
        if let Some(p) = prev_t {
            if sample.t <= p {
                return Err(InsError::NonMonotonicTime {
                    prev: p,
                    next: sample.t,
                });
            }
        }
        prev_t = Some(sample.t);
        out.push(sample);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn stationary_sample(t: f64) -> ImuSample {
        ImuSample {
            t,
            f: Vector3::new(0.0, 0.0, GRAVITY),
            w: Vector3::zeros(),
        }
    }

    #[test]
    fn mechanize_stationary_equilibrium() {
        let s = NavState::default();
        let m = stationary_sample(0.0);
        let out = mechanize(&s, &m, 0.005).unwrap();
        assert_abs_diff_eq!(out.p, s.p, epsilon = 1e-15);
        assert_abs_diff_eq!(out.v, s.v, epsilon = 1e-15);
        assert_relative_eq!(out.q.coords.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mechanize_uniform_motion() {
        let s = NavState {
            v: Vector3::new(1.0, 0.0, 0.0),
            ..NavState::default()
        };
        let out = mechanize(&s, &stationary_sample(0.0), 1.0).unwrap();
        assert_abs_diff_eq!(out.p, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-15);
        assert_abs_diff_eq!(out.v, s.v, epsilon = 1e-15);
    }

    #[test]
    fn mechanize_rejects_bad_input() {
        let s = NavState::default();
        let mut m = stationary_sample(0.0);
        m.f.x = f64::NAN;
        assert!(mechanize(&s, &m, 0.005).is_err());
        assert!(mechanize(&s, &stationary_sample(0.0), 0.0).is_err());
    }

    /// Integrating a constant yaw rate must match the closed-form quaternion
    /// exponential of the total rotation vector.
    #[test]
    fn mechanize_rotation_oracle() {
        let w = Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let mut s = NavState::default();
        let dt = 1.0 / 200.0;
        for k in 0..200 {
            let m = ImuSample {
                t: k as f64 * dt,
                f: s.q.inverse() * Vector3::new(0.0, 0.0, GRAVITY),
                w,
            };
            s = mechanize(&s, &m, dt).unwrap();
        }
        let expected = UnitQuaternion::from_scaled_axis(w);
        let (_, _, yaw) = s.q.euler_angles();
        assert_abs_diff_eq!(yaw, std::f64::consts::FRAC_PI_2, epsilon = 1e-6);
        assert!(s.q.angle_to(&expected) < 1e-6);
    }

    /// With f = q* g q and ω = 0, mechanization is the identity on p and v
    /// for any orientation and dt.
    #[test]
    fn mechanize_stationary_identity_property() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let axis = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
            let q = UnitQuaternion::from_scaled_axis(axis * 2.0);
            let s = NavState {
                p: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                v: Vector3::zeros(),
                q,
            };
            let m = ImuSample {
                t: 0.0,
                f: q.inverse() * Vector3::new(0.0, 0.0, GRAVITY),
                w: Vector3::zeros(),
            };
            let dt = 0.001 + rng.gen::<f64>();
            let out = mechanize(&s, &m, dt).unwrap();
            assert_abs_diff_eq!(out.p, s.p, epsilon = 1e-12);
            assert_abs_diff_eq!(out.v, s.v, epsilon = 1e-12);
        }
    }

    /// Rotating the initial state about the vertical and translating it maps
    /// the mechanized trajectory through the same transform.
    #[test]
    fn mechanize_frame_invariance() {
        let mut rng = StdRng::seed_from_u64(11);
        let alpha = 1.1;
        let rot = UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, alpha));
        let t_off = Vector3::new(3.0, -2.0, 0.5);

        let mut a = NavState {
            p: Vector3::new(0.1, 0.2, 0.0),
            v: Vector3::new(0.3, 0.0, 0.1),
            q: UnitQuaternion::from_euler_angles(0.05, -0.02, 0.4),
        };
        let mut b = NavState {
            p: rot * a.p + t_off,
            v: rot * a.v,
            q: rot * a.q,
        };
        let dt = 0.005;
        for k in 0..400 {
            let m = ImuSample {
                t: k as f64 * dt,
                f: Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, GRAVITY + rng.gen::<f64>() - 0.5),
                w: Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5) * 0.5,
            };
            a = mechanize(&a, &m, dt).unwrap();
            b = mechanize(&b, &m, dt).unwrap();
        }
        assert_abs_diff_eq!(b.p, rot * a.p + t_off, epsilon = 1e-9);
        assert_abs_diff_eq!(b.v, rot * a.v, epsilon = 1e-9);
    }

    #[test]
    fn propagate_zero_is_zero() {
        let s = NavState::default();
        let m = stationary_sample(0.0);
        let out = propagate_error_cov(&NavCov::zeros(), &s, &m, 0.005, &NavCov::zeros()).unwrap();
        assert_abs_diff_eq!(out.norm(), 0.0, epsilon = 1e-15);
    }

    /// Position inherits velocity variance through the block structure of F.
    #[test]
    fn propagate_block_structure() {
        let s = NavState::default();
        let m = stationary_sample(0.0);
        let sigma2 = 0.04;
        let mut p = NavCov::zeros();
        for i in 3..6 {
            p[(i, i)] = sigma2;
        }
        let dt = 0.01;
        let out = propagate_error_cov(&p, &s, &m, dt, &NavCov::zeros()).unwrap();
        for i in 0..3 {
            assert_relative_eq!(out[(i, i)], sigma2 * dt * dt, epsilon = 1e-15);
            assert_relative_eq!(out[(i, 3 + i)], sigma2 * dt, epsilon = 1e-15);
        }
    }

    /// 100 propagation steps with a constant F must equal the closed form
    /// F¹⁰⁰ P (F¹⁰⁰)ᵀ + Σ Fⁱ Q (Fⁱ)ᵀ.
    #[test]
    fn propagate_matrix_power_oracle() {
        let s = NavState {
            q: UnitQuaternion::from_euler_angles(0.1, -0.05, 0.3),
            ..NavState::default()
        };
        let m = ImuSample {
            t: 0.0,
            f: Vector3::new(0.3, -0.2, GRAVITY),
            w: Vector3::zeros(),
        };
        let dt = 0.01;
        let mut p0 = NavCov::zeros();
        let mut q_proc = NavCov::zeros();
        for i in 0..9 {
            p0[(i, i)] = 0.01 * (i as f64 + 1.0);
            q_proc[(i, i)] = 1e-6;
        }

        let mut p = p0;
        for _ in 0..100 {
            p = propagate_error_cov(&p, &s, &m, dt, &q_proc).unwrap();
        }

        let f = error_transition(&s, &m, dt);
        let mut f_pow = NavCov::identity();
        let mut q_acc = NavCov::zeros();
        for _ in 0..100 {
            q_acc = f_pow * q_proc * f_pow.transpose() + q_acc;
            f_pow = f * f_pow;
        }
        let expected = f_pow * p0 * f_pow.transpose() + q_acc;
        assert!((p - expected).norm() / expected.norm() < 1e-9);
    }

    #[test]
    fn detector_noiseless_stance() {
        let cfg = DetectorConfig::default();
        let window: Vec<ImuSample> = (0..cfg.window_len)
            .map(|k| stationary_sample(k as f64 * 0.005))
            .collect();
        let (stationary, z) = zupt_detect(&window, &cfg).unwrap();
        assert!(stationary);
        assert_abs_diff_eq!(z, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn detector_determinism_and_short_window() {
        let cfg = DetectorConfig::default();
        let window: Vec<ImuSample> = (0..cfg.window_len)
            .map(|k| ImuSample {
                t: k as f64 * 0.005,
                f: Vector3::new(0.01, -0.02, GRAVITY + 0.015),
                w: Vector3::new(0.001, 0.0, -0.002),
            })
            .collect();
        let (_, z1) = zupt_detect(&window, &cfg).unwrap();
        let (_, z2) = zupt_detect(&window, &cfg).unwrap();
        assert_eq!(z1, z2);
        assert!(zupt_detect(&window[..cfg.window_len - 1], &cfg).is_err());
    }

    /// Calibrates γ_Z to a 1% false-alarm rate on noise-only stance windows,
    /// then checks a window deviating 5 m/s² from gravity is rejected.
    #[test]
    fn detector_threshold_calibration_oracle() {
        let cfg = DetectorConfig::default();
        let mut rng = StdRng::seed_from_u64(42);
        let mut stats = Vec::new();
        for _ in 0..2000 {
            let window: Vec<ImuSample> = (0..cfg.window_len)
                .map(|k| ImuSample {
                    t: k as f64 * 0.005,
                    f: Vector3::new(
                        cfg.sigma_f * rng.sample::<f64, _>(StandardNormal),
                        cfg.sigma_f * rng.sample::<f64, _>(StandardNormal),
                        GRAVITY + cfg.sigma_f * rng.sample::<f64, _>(StandardNormal),
                    ),
                    w: Vector3::new(
                        cfg.sigma_w * rng.sample::<f64, _>(StandardNormal),
                        cfg.sigma_w * rng.sample::<f64, _>(StandardNormal),
                        cfg.sigma_w * rng.sample::<f64, _>(StandardNormal),
                    ),
                })
                .collect();
            let (_, z) = zupt_detect(&window, &cfg).unwrap();
            stats.push(z);
        }
        stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let gamma = stats[(stats.len() as f64 * 0.99) as usize];
        // Default threshold keeps the false-alarm rate at or under 1%.
        assert!(cfg.gamma_z >= gamma, "default gamma_z {} vs calibrated {}", cfg.gamma_z, gamma);

        let moving: Vec<ImuSample> = (0..cfg.window_len)
            .map(|k| ImuSample {
                t: k as f64 * 0.005,
                f: Vector3::new(0.0, 0.0, GRAVITY + 5.0),
                w: Vector3::zeros(),
            })
            .collect();
        let (stationary, z) = zupt_detect(&moving, &cfg).unwrap();
        assert!(!stationary);
        assert!(z > gamma);
    }

    #[test]
    fn zupt_zero_innovation_leaves_state() {
        let s = NavState::default();
        let mut p = NavCov::zeros();
        for i in 0..9 {
            p[(i, i)] = 0.01;
        }
        let r = Matrix3::identity() * 1e-4;
        let (out, cov) = zupt_update(&s, &p, &r).unwrap();
        assert_abs_diff_eq!(out.p, s.p, epsilon = 1e-15);
        assert_abs_diff_eq!(out.v, s.v, epsilon = 1e-15);
        for i in 3..6 {
            assert!(cov[(i, i)] < p[(i, i)]);
        }
    }

    /// The error-state update with feedback equals a direct joint Kalman
    /// update on the full state with a zero-velocity measurement.
    #[test]
    fn zupt_matches_direct_kalman_oracle() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..50 {
            let s = NavState {
                p: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                v: Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5),
                q: UnitQuaternion::from_euler_angles(0.02, 0.01, 0.5),
            };
            // Random PSD covariance.
            let mut a = NavCov::zeros();
            for i in 0..9 {
                for j in 0..9 {
                    a[(i, j)] = rng.gen::<f64>() - 0.5;
                }
            }
            let p = a * a.transpose() * 0.01 + NavCov::identity() * 1e-6;
            let r = Matrix3::identity() * 1e-4;
            let (upd, cov) = zupt_update(&s, &p, &r).unwrap();

            // Oracle: direct Kalman arithmetic, independent matrix route.
            let h = {
                let mut h = SMatrix::<f64, 3, 9>::zeros();
                for i in 0..3 {
                    h[(i, 3 + i)] = 1.0;
                }
                h
            };
            let innov_cov = h * p * h.transpose() + r + Matrix3::identity() * 1e-12;
            let k = p * h.transpose() * innov_cov.try_inverse().unwrap();
            let delta = k * (-s.v);
            assert_abs_diff_eq!(upd.p, s.p + delta.fixed_rows::<3>(0).into_owned(), epsilon = 1e-10);
            assert_abs_diff_eq!(upd.v, s.v + delta.fixed_rows::<3>(3).into_owned(), epsilon = 1e-10);
            let p_post = (NavCov::identity() - k * h) * p;
            for i in 0..9 {
                for j in 0..9 {
                    assert_abs_diff_eq!(cov[(i, j)], p_post[(i, j)], epsilon = 1e-10);
                }
            }
        }
    }

    /// During perfect stance, velocity and roll/pitch variances decay ≈ 1/n
    /// while yaw and position variances never decrease.
    #[test]
    fn zupt_observability_structure() {
        let cfg = InsConfig::default();
        let mut s = NavState::default();
        let mut p = NavCov::zeros();
        for i in 3..6 {
            p[(i, i)] = 1e-2;
        }
        for i in 6..9 {
            p[(i, i)] = 1e-2;
        }
        let r = Matrix3::identity() * (cfg.zupt_noise_std * cfg.zupt_noise_std);
        let dt = 0.005;
        let m = stationary_sample(0.0);

        let yaw0 = p[(8, 8)];
        let pos0: f64 = (0..3).map(|i| p[(i, i)]).sum();
        let mut vel_traces = Vec::new();
        let mut prev_yaw = yaw0;
        for _ in 0..100 {
            p = propagate_error_cov(&p, &s, &m, dt, &NavCov::zeros()).unwrap();
            let (ns, np) = zupt_update(&s, &p, &r).unwrap();
            s = ns;
            p = np;
            vel_traces.push((0..3).map(|i| p[(3 + i, 3 + i)]).sum::<f64>());
            assert!(p[(8, 8)] >= prev_yaw - 1e-15, "yaw variance decreased");
            prev_yaw = p[(8, 8)];
        }
        let n = vel_traces.len();
        // 1/n decay: trace(n) * n approaches a constant.
        let late = vel_traces[n - 1] * n as f64;
        let mid = vel_traces[n / 2] * (n / 2) as f64;
        assert_relative_eq!(late, mid, max_relative = 0.25);
        // Roll/pitch decayed substantially, yaw did not.
        assert!(p[(6, 6)] < 1e-3);
        assert!(p[(7, 7)] < 1e-3);
        assert_relative_eq!(p[(8, 8)], yaw0, max_relative = 1e-6);
        let pos_end: f64 = (0..3).map(|i| p[(i, i)]).sum();
        assert!(pos_end >= pos0 - 1e-15);
    }

    /// Consecutive updates only (no propagation, block-diagonal start):
    /// velocity trace decays monotonically ∝ 1/k, position and yaw exactly
    /// untouched.
    #[test]
    fn zupt_updates_only_invariant() {
        let s = NavState::default();
        let mut p = NavCov::zeros();
        for i in 0..9 {
            p[(i, i)] = 1e-2;
        }
        let r = Matrix3::identity() * 1e-4;
        let mut prev_trace = f64::MAX;
        let mut st = s;
        for k in 1..=200 {
            let (ns, np) = zupt_update(&st, &p, &r).unwrap();
            st = ns;
            p = np;
            let trace: f64 = (0..3).map(|i| p[(3 + i, 3 + i)]).sum();
            assert!(trace < prev_trace);
            prev_trace = trace;
            if k == 200 {
                // Asymptotically R/k per component.
                let expected = 3.0 * 1e-4 / k as f64;
                assert_relative_eq!(trace, expected, max_relative = 0.05);
            }
        }
        for i in 0..3 {
            assert_relative_eq!(p[(i, i)], 1e-2, epsilon = 1e-15);
        }
        assert_relative_eq!(p[(8, 8)], 1e-2, epsilon = 1e-15);
    }

    /// The segmenter must behave exactly like a literal transcription of the
    /// reset pseudo-code over arbitrary flag/variance sequences.
    #[test]
    fn segmenter_matches_transcription_oracle() {
        let cfg = SegmenterConfig {
            gamma_p: 0.5,
            c_min: 3,
            c_max: 7,
        };
        let mut rng = StdRng::seed_from_u64(99);
        for _ in 0..200 {
            let mut seg = StepSegmenter::new(cfg);
            // Oracle counters, transcribed directly.
            let (mut c_p, mut c_d, mut ell) = (0u32, 0u32, 0u64);
            let mut state = NavState::default();
            let mut cov = NavCov::zeros();
            for k in 0..100 {
                let stationary = rng.gen_bool(0.6);
                let var = if rng.gen_bool(0.5) { 0.1 } else { 1.0 };
                cov[(3, 3)] = var;
                state.p.x = k as f64;

                // Oracle: pending if var below threshold and enough samples,
                // fire if stance ends or pending too long.
                let mut oracle_fire = false;
                c_p += 1;
                if var < cfg.gamma_p && c_p > cfg.c_min {
                    c_d += 1;
                    if !stationary || c_d > cfg.c_max {
                        ell += 1;
                        c_p = 0;
                        c_d = 0;
                        oracle_fire = true;
                    }
                }

                let got = seg.process(stationary, &mut state, &mut cov, k as f64);
                assert_eq!(got.is_some(), oracle_fire, "step {k}");
                if let Some(su) = got {
                    assert_eq!(su.seq, ell);
                    // Reset zeroed the state and covariance.
                    assert_abs_diff_eq!(state.p.norm(), 0.0);
                    assert_abs_diff_eq!(cov.norm(), 0.0);
                }
            }
        }
    }

    #[test]
    fn segmenter_never_fires_during_motion() {
        let cfg = SegmenterConfig::default();
        let mut seg = StepSegmenter::new(cfg);
        let mut state = NavState::default();
        let mut cov = NavCov::zeros();
        cov[(3, 3)] = 1.0; // variance never converges
        for k in 0..10_000 {
            assert!(seg.process(false, &mut state, &mut cov, k as f64).is_none());
        }
    }

    fn gait_stream(strides: usize, stride_len: f64, cfg: &InsConfig, noise_seed: Option<u64>) -> Vec<ImuSample> {
        crate::scenarios::synth_imu_gait(
            &crate::scenarios::GaitParams {
                strides,
                stride_len,
                stance_s: 0.4,
                swing_s: 0.6,
                rate_hz: 200.0,
                accel_noise_std: if noise_seed.is_some() { cfg.accel_noise_std } else { 0.0 },
                gyro_noise_std: if noise_seed.is_some() { cfg.gyro_noise_std } else { 0.0 },
                lead_in_s: 1.0,
            },
            noise_seed.unwrap_or(0),
        )
        .samples
    }

    /// A simulated gait with 200 Hz sampling and 0.4 s stances yields exactly
    /// one step update per gait cycle.
    #[test]
    fn one_step_per_gait_cycle() {
        let cfg = InsConfig::default();
        let stream = gait_stream(5, 1.0, &cfg, Some(5));
        let steps = run_step_wise_ins(stream, cfg).unwrap();
        // Lead-in standstill produces one initial near-zero step.
        assert_eq!(steps.len(), 6);
        for s in &steps[1..] {
            assert_relative_eq!(s.dp.norm(), 1.0, max_relative = 0.05);
        }
    }

    /// Extended standstill: resets recur at the c_max cadence.
    #[test]
    fn standstill_resets_recur() {
        let cfg = InsConfig::default();
        let dt = 0.005;
        let stream: Vec<ImuSample> = (0..4000).map(|k| stationary_sample(k as f64 * dt)).collect();
        let mut filter = ZuptIns::new(cfg);
        let mut reset_samples = Vec::new();
        for (k, s) in stream.into_iter().enumerate() {
            if filter.process_sample(s).unwrap().is_some() {
                reset_samples.push(k);
            }
        }
        assert!(reset_samples.len() >= 3, "expected recurring resets, got {reset_samples:?}");
        let cadence: Vec<usize> = reset_samples.windows(2).map(|w| w[1] - w[0]).collect();
        for c in &cadence {
            // One c_max pending stretch plus the c_min refractory interval.
            let lo = cfg.segmenter.c_max as usize;
            let hi = (cfg.segmenter.c_max + cfg.segmenter.c_min) as usize + 10;
            assert!(*c >= lo && *c <= hi, "cadence {c} outside [{lo}, {hi}]");
        }
    }

    /// All-stance stream: emitted steps carry near-zero displacement.
    #[test]
    fn all_stance_steps_near_zero() {
        let cfg = InsConfig::default();
        let dt = 0.005;
        let mut rng = StdRng::seed_from_u64(17);
        let stream: Vec<ImuSample> = (0..2000)
            .map(|k| ImuSample {
                t: k as f64 * dt,
                f: Vector3::new(
                    cfg.accel_noise_std * rng.sample::<f64, _>(StandardNormal),
                    cfg.accel_noise_std * rng.sample::<f64, _>(StandardNormal),
                    GRAVITY + cfg.accel_noise_std * rng.sample::<f64, _>(StandardNormal),
                ),
                w: Vector3::new(
                    cfg.gyro_noise_std * rng.sample::<f64, _>(StandardNormal),
                    cfg.gyro_noise_std * rng.sample::<f64, _>(StandardNormal),
                    cfg.gyro_noise_std * rng.sample::<f64, _>(StandardNormal),
                ),
            })
            .collect();
        let steps = run_step_wise_ins(stream, cfg).unwrap();
        assert!(!steps.is_empty());
        for s in &steps {
            assert!(s.dp.norm() < 0.05, "stance step moved {}", s.dp.norm());
            assert!(s.p_p.trace() < 1e-2);
        }
    }

    /// One 1 m stride is recovered within 3σ of the filter's own reported
    /// covariance.
    #[test]
    fn single_stride_recovered_within_reported_sigma() {
        let cfg = InsConfig::default();
        let stream = gait_stream(1, 1.0, &cfg, Some(23));
        let steps = run_step_wise_ins(stream, cfg).unwrap();
        let stride = steps
            .iter()
            .max_by(|a, b| a.dp.norm().partial_cmp(&b.dp.norm()).unwrap())
            .unwrap();
        let sigma = stride.p_p.trace().sqrt().max(1e-3);
        assert!(
            (stride.dp.norm() - 1.0).abs() < 3.0 * sigma + 0.02,
            "recovered {} m, sigma {}",
            stride.dp.norm(),
            sigma
        );
    }

    /// Quaternion norm stays within 1e-9 of unity across long mixed runs.
    #[test]
    fn quaternion_norm_preserved() {
        let cfg = InsConfig::default();
        let stream = gait_stream(20, 1.0, &cfg, Some(31));
        let mut filter = ZuptIns::new(cfg);
        for s in stream {
            filter.process_sample(s).unwrap();
            assert!((filter.state().q.coords.norm() - 1.0).abs() < 1e-9);
            // Covariance stays symmetric PSD.
            let cov = filter.cov();
            for i in 0..9 {
                for j in 0..9 {
                    assert!((cov[(i, j)] - cov[(j, i)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn imu_csv_roundtrip() {
        let dir = std::env::temp_dir().join("coopnav_imu_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("log.csv");
        std::fs::write(&path, "t,fx,fy,fz,wx,wy,wz\n0.0,0.0,0.0,9.81,0.0,0.0,0.0\n0.005,0.1,0.0,9.7,0.01,0.0,0.0\n").unwrap();
        let samples = read_imu_csv(&path).unwrap();
        assert_eq!(samples.len(), 2);
        assert_relative_eq!(samples[1].f.x, 0.1);
        std::fs::write(&path, "0.0,0.0,0.0,9.81,0.0,0.0,0.0\n0.0,0.1,0.0,9.7,0.01,0.0,0.0\n").unwrap();
        assert!(matches!(read_imu_csv(&path), Err(InsError::NonMonotonicTime { .. })));
    }
}
