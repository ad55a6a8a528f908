//! Step-wise dead reckoning per foot.
//!
//! Chains the per-step displacement and heading increments emitted by the
//! step-wise inertial navigation into a global position/heading track,
//! propagating a 4×4 covariance over `[x, χ]` to first order. The recursion
//! is pure dead reckoning — no statistical conditioning — which is what
//! lets the fusion center send back plain mean corrections that keep the
//! local and central estimates consistent.

use std::collections::VecDeque;

use nalgebra::{Matrix3, SMatrix, Vector3};
use thiserror::Error;

use crate::ins::StepUpdate;
use crate::linalg::wrap_angle;

/// 4×4 covariance over `[x, χ]`.
pub type TrackCov = SMatrix<f64, 4, 4>;

/// Global dead-reckoned state of one foot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackState {
    /// Global position, m.
    pub x: Vector3<f64>,
    /// Global heading, rad, wrapped to (−π, π].
    pub chi: f64,
    /// Covariance over `[x, χ]`.
    pub p: TrackCov,
    /// Last applied step index.
    pub seq: u64,
}

impl TrackState {
    pub fn new(x: Vector3<f64>, chi: f64) -> Self {
        Self {
            x,
            chi: wrap_angle(chi),
            p: TrackCov::zeros(),
            seq: 0,
        }
    }
}

impl Default for TrackState {
    fn default() -> Self {
        Self::new(Vector3::zeros(), 0.0)
    }
}

/// Mean correction from the fusion center, expressed in the navigation
/// frame at a given step index. Covariance replacement is optional:
/// mean-only corrections keep the local covariance as a conservative bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correction {
    /// Step index the correction applies at.
    pub seq: u64,
    pub dx: Vector3<f64>,
    pub dchi: f64,
    pub cov: Option<TrackCov>,
}

#[derive(Debug, Error)]
pub enum DeadReckError {
    #[error("step update out of order: state at {state_seq}, update {update_seq}")]
    OutOfOrder { state_seq: u64, update_seq: u64 },
    #[error("correction from the future: state at {state_seq}, correction {corr_seq}")]
    FutureCorrection { state_seq: u64, corr_seq: u64 },
    #[error("non-finite correction")]
    NonFinite,
    #[error("correction at seq {0} is older than the retained history")]
    HistoryExpired(u64),
}

/// Planar rotation about the vertical axis by the heading angle.
pub fn heading_rotation(chi: f64) -> Matrix3<f64> {
    let (s, c) = chi.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Derivative of [`heading_rotation`] with respect to the heading.
fn heading_rotation_deriv(chi: f64) -> Matrix3<f64> {
    let (s, c) = chi.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// One dead-reckoning step: mean per the step recursion, covariance by
/// first-order propagation with the heading-to-position coupling Jacobian
/// and the rotated step-noise blocks.
pub fn dr_propagate(s: &TrackState, u: &StepUpdate) -> Result<TrackState, DeadReckError> {
    if u.seq != s.seq + 1 {
        return Err(DeadReckError::OutOfOrder {
            state_seq: s.seq,
            update_seq: u.seq,
        });
    }
    let r = heading_rotation(s.chi);
    let x = s.x + r * u.dp;
    let chi = wrap_angle(s.chi + u.dpsi);

    // F = [[I, ∂(R(χ)dp)/∂χ], [0, 1]]
    let mut f = TrackCov::identity();
    let coupling = heading_rotation_deriv(s.chi) * u.dp;
    for i in 0..3 {
        f[(i, 3)] = coupling[i];
    }

    // Step noise rotated into the navigation frame.
    let rp = r * u.p_p * r.transpose();
    let rc = r * u.p_ppsi;
    let mut w = TrackCov::zeros();
    for i in 0..3 {
        for j in 0..3 {
            w[(i, j)] = rp[(i, j)];
        }
        w[(i, 3)] = rc[i];
        w[(3, i)] = rc[i];
    }
    w[(3, 3)] = u.p_psipsi;

    let mut p = f * s.p * f.transpose() + w;
    // Symmetrize.
    for i in 0..4 {
        for j in (i + 1)..4 {
            let v = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
    Ok(TrackState {
        x,
        chi,
        p,
        seq: u.seq,
    })
}

/// Applies a correction at the state's own step index: additive mean
/// correction, covariance replaced when provided.
pub fn apply_correction(s: &TrackState, c: &Correction) -> Result<TrackState, DeadReckError> {
    if c.seq > s.seq {
        return Err(DeadReckError::FutureCorrection {
            state_seq: s.seq,
            corr_seq: c.seq,
        });
    }
    if !c.dx.iter().all(|v| v.is_finite()) || !c.dchi.is_finite() {
        return Err(DeadReckError::NonFinite);
    }
    let mut out = *s;
    out.x += c.dx;
    out.chi = wrap_angle(out.chi + c.dchi);
    if let Some(cov) = c.cov {
        out.p = cov;
    }
    Ok(out)
}

/// Agent-side track: the pure dead-reckoning baseline plus the latest
/// correction from the fusion center.
///
/// A correction generated at step `k` while the agent has advanced to step
/// `n` is transported forward through the planar recursion exactly:
/// `x := x_k + dx + R(dχ)(x_n − x_k)`, `χ := χ_n + dχ`. A bounded history
/// of baseline states makes the transport possible without retrodiction.
#[derive(Debug, Clone)]
pub struct AgentTrack {
    baseline: TrackState,
    history: VecDeque<(u64, Vector3<f64>, f64)>,
    latest: Option<Correction>,
    capacity: usize,
}

impl AgentTrack {
    pub fn new(initial: TrackState, history_capacity: usize) -> Self {
        let mut history = VecDeque::with_capacity(history_capacity.min(1024));
        history.push_back((initial.seq, initial.x, initial.chi));
        Self {
            baseline: initial,
            history,
            latest: None,
            capacity: history_capacity.max(2),
        }
    }

    pub fn baseline(&self) -> &TrackState {
        &self.baseline
    }

    pub fn seq(&self) -> u64 {
        self.baseline.seq
    }

    /// Advances the baseline by one step update.
    pub fn step(&mut self, u: &StepUpdate) -> Result<(), DeadReckError> {
        self.baseline = dr_propagate(&self.baseline, u)?;
        if self.history.len() == self.capacity {
            self.history.pop_front();
        }
        self.history
            .push_back((self.baseline.seq, self.baseline.x, self.baseline.chi));
        Ok(())
    }

    /// Accepts a correction; newer corrections supersede older ones.
    pub fn accept_correction(&mut self, c: Correction) -> Result<(), DeadReckError> {
        if c.seq > self.baseline.seq {
            return Err(DeadReckError::FutureCorrection {
                state_seq: self.baseline.seq,
                corr_seq: c.seq,
            });
        }
        if !c.dx.iter().all(|v| v.is_finite()) || !c.dchi.is_finite() {
            return Err(DeadReckError::NonFinite);
        }
        if self.history.front().map(|h| h.0 > c.seq).unwrap_or(true) {
            return Err(DeadReckError::HistoryExpired(c.seq));
        }
        if self.latest.map(|l| c.seq >= l.seq).unwrap_or(true) {
            self.latest = Some(c);
        }
        Ok(())
    }

    /// Corrected estimate at the current step index.
    pub fn estimate(&self) -> TrackState {
        let Some(c) = self.latest else {
            return self.baseline;
        };
        let Some(&(_, x_k, _)) = self.history.iter().find(|h| h.0 == c.seq) else {
            return self.baseline;
        };
        let r = heading_rotation(c.dchi);
        let x = x_k + c.dx + r * (self.baseline.x - x_k);
        let chi = wrap_angle(self.baseline.chi + c.dchi);
        TrackState {
            x,
            chi,
            p: c.cov.unwrap_or(self.baseline.p),
            seq: self.baseline.seq,
        }
    }
}
