//! Central global-state estimation.
//!
//! The fusion center keeps the stacked `[position, heading]` state of every
//! tracked foot with its full joint covariance. All information enters
//! through one primitive: conditioning a low-dimensional sub-state `z1` on
//! new first and second moments and propagating the effect to the rest of
//! the state by marginalization. On top of that primitive sit
//!
//! - the separation-constraint update between the two feet of one agent
//!   (sigma points projected onto the scaled constraint ball),
//! - the robust inter-agent range update (precomputed standard-normal
//!   lattice reweighted by a Cauchy-uniform likelihood), and
//! - the anchor / position-fix / pressure variants of the range update.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deadreck::{dr_propagate, heading_rotation, Correction, TrackState};
use crate::ins::StepUpdate;
use crate::linalg::{self, wrap_angle, DegeneracyError};

/// Identifier of one tracked foot, unique across the whole system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FootId(pub u16);

/// Identifier of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AgentId(pub u16);

/// Errors raised by fusion operations.
#[derive(Debug, Error)]
pub enum FusionError {
    #[error("unknown foot {0:?}")]
    UnknownFoot(FootId),
    #[error("unknown agent {0:?}")]
    UnknownAgent(AgentId),
    #[error("feet must differ")]
    SameFoot,
    #[error("step update out of order for {foot:?}: have {have}, got {got}")]
    OutOfOrder { foot: FootId, have: u64, got: u64 },
    #[error("non-finite input")]
    NonFinite,
    #[error(transparent)]
    Degenerate(#[from] DegeneracyError),
    #[error(transparent)]
    DeadReck(#[from] crate::deadreck::DeadReckError),
}

/// Stacked global estimate: 4 entries per foot, `[x, y, z, χ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEstimate {
    ids: Vec<FootId>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GlobalEstimate {
    /// Builds an estimate from per-foot initial track states.
    pub fn new(feet: &[(FootId, TrackState)]) -> Self {
        let n = 4 * feet.len();
        let mut mean = DVector::zeros(n);
        let mut cov = DMatrix::zeros(n, n);
        let mut ids = Vec::with_capacity(feet.len());
        for (k, (id, ts)) in feet.iter().enumerate() {
            ids.push(*id);
            let o = 4 * k;
            mean[o] = ts.x.x;
            mean[o + 1] = ts.x.y;
            mean[o + 2] = ts.x.z;
            mean[o + 3] = ts.chi;
            for i in 0..4 {
                for j in 0..4 {
                    cov[(o + i, o + j)] = ts.p[(i, j)];
                }
            }
        }
        Self { ids, mean, cov }
    }

    pub fn ids(&self) -> &[FootId] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn index_of(&self, id: FootId) -> Option<usize> {
        self.ids.iter().position(|f| *f == id)
    }

    /// Mean position of a foot.
    pub fn foot_position(&self, id: FootId) -> Option<Vector3<f64>> {
        let k = self.index_of(id)?;
        let o = 4 * k;
        Some(Vector3::new(self.mean[o], self.mean[o + 1], self.mean[o + 2]))
    }

    /// Mean heading of a foot.
    pub fn foot_heading(&self, id: FootId) -> Option<f64> {
        let k = self.index_of(id)?;
        Some(self.mean[4 * k + 3])
    }

    /// 4×4 covariance block of a foot.
    pub fn foot_cov(&self, id: FootId) -> Option<nalgebra::Matrix4<f64>> {
        let k = self.index_of(id)?;
        let o = 4 * k;
        let mut out = nalgebra::Matrix4::zeros();
        for i in 0..4 {
            for j in 0..4 {
                out[(i, j)] = self.cov[(o + i, o + j)];
            }
        }
        Some(out)
    }

    /// 4×4 cross-covariance block between two feet.
    pub fn cross_cov(&self, a: FootId, b: FootId) -> Option<nalgebra::Matrix4<f64>> {
        let (ka, kb) = (self.index_of(a)?, self.index_of(b)?);
        let (oa, ob) = (4 * ka, 4 * kb);
        let mut out = nalgebra::Matrix4::zeros();
        for i in 0..4 {
            for j in 0..4 {
                out[(i, j)] = self.cov[(oa + i, ob + j)];
            }
        }
        Some(out)
    }

    /// Reorders the feet (test helper for permutation-invariance checks).
    pub fn permuted(&self, order: &[usize]) -> Self {
        assert_eq!(order.len(), self.ids.len());
        let n = self.dim();
        let mut perm = DMatrix::zeros(n, n);
        for (new_k, &old_k) in order.iter().enumerate() {
            for i in 0..4 {
                perm[(4 * new_k + i, 4 * old_k + i)] = 1.0;
            }
        }
        Self {
            ids: order.iter().map(|&k| self.ids[k]).collect(),
            mean: &perm * &self.mean,
            cov: &perm * &self.cov * perm.transpose(),
        }
    }
}

/// Parameters of the inter-foot separation constraint.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConstraintParams {
    /// Horizontal separation bound, m.
    pub gamma_xy: f64,
    /// Vertical separation bound, m.
    pub gamma_z: f64,
    /// Sigma-point scale; points sit at √η standard deviations.
    pub eta: f64,
    /// Speed bound used to inflate constraints for state asynchrony, m/s.
    pub v_max: f64,
}

impl Default for ConstraintParams {
    fn default() -> Self {
        Self {
            gamma_xy: 1.0,
            gamma_z: 0.5,
            eta: 3.0,
            v_max: 3.0,
        }
    }
}

impl ConstraintParams {
    /// Diagonal of the scaling matrix `D_γ = diag(1, 1, γ_xy/γ_z)`.
    pub fn d_gamma(&self) -> Vector3<f64> {
        Vector3::new(1.0, 1.0, self.gamma_xy / self.gamma_z)
    }
}

/// Precomputed standard-normal sampling lattice with prior weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice3 {
    pub points: Vec<Vector3<f64>>,
    pub weights: Vec<f64>,
}

impl Lattice3 {
    /// Centered cubic lattice spanning ±`span` per axis with Gaussian
    /// weights, renormalized and scaled so the weighted second moment is
    /// exactly the identity.
    pub fn centered_cubic(per_axis: usize, span: f64) -> Self {
        assert!(per_axis >= 3 && per_axis % 2 == 1);
        let xs: Vec<f64> = (0..per_axis)
            .map(|i| -span + 2.0 * span * i as f64 / (per_axis - 1) as f64)
            .collect();
        let mut points = Vec::with_capacity(per_axis.pow(3));
        let mut weights = Vec::with_capacity(per_axis.pow(3));
        for &a in &xs {
            for &b in &xs {
                for &c in &xs {
                    let u = Vector3::new(a, b, c);
                    points.push(u);
                    weights.push((-0.5 * u.norm_squared()).exp());
                }
            }
        }
        let tot: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= tot;
        }
        let second: f64 = points
            .iter()
            .zip(&weights)
            .map(|(u, w)| w * u.x * u.x)
            .sum();
        let scale = 1.0 / second.sqrt();
        for u in &mut points {
            *u *= scale;
        }
        Self { points, weights }
    }

    /// Weighted mean and second moment, for the moment-matching invariant.
    pub fn moments(&self) -> (Vector3<f64>, Matrix3<f64>) {
        let mut m = Vector3::zeros();
        let mut c = Matrix3::zeros();
        for (u, w) in self.points.iter().zip(&self.weights) {
            m += *w * u;
            c += *w * u * u.transpose();
        }
        (m, c)
    }
}

/// One-dimensional lattice used by the vertical (pressure) variant.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice1 {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Lattice1 {
    pub fn centered(count: usize, span: f64) -> Self {
        assert!(count >= 3 && count % 2 == 1);
        let points: Vec<f64> = (0..count)
            .map(|i| -span + 2.0 * span * i as f64 / (count - 1) as f64)
            .collect();
        let mut weights: Vec<f64> = points.iter().map(|u| (-0.5 * u * u).exp()).collect();
        let tot: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= tot;
        }
        let second: f64 = points.iter().zip(&weights).map(|(u, w)| w * u * u).sum();
        let scale = 1.0 / second.sqrt();
        let points = points.into_iter().map(|u| u * scale).collect();
        Self { points, weights }
    }
}

/// Serializable range-update settings; [`RangeSettings::build`] creates the
/// working parameters with the precomputed lattices.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct RangeSettings {
    pub gamma_r: f64,
    pub sigma_r: f64,
    pub lattice_per_axis: usize,
    pub lattice_span: f64,
}

impl Default for RangeSettings {
    fn default() -> Self {
        Self {
            gamma_r: 2.0,
            sigma_r: 0.5,
            lattice_per_axis: 9,
            lattice_span: 3.0,
        }
    }
}

impl RangeSettings {
    pub fn build(&self) -> RangeParams {
        RangeParams {
            gamma_r: self.gamma_r,
            sigma_r: self.sigma_r,
            lattice: Lattice3::centered_cubic(self.lattice_per_axis, self.lattice_span),
            lattice_1d: Lattice1::centered(101, self.lattice_span),
        }
    }
}

/// Parameters of the robust range update.
#[derive(Debug, Clone)]
pub struct RangeParams {
    /// Uniform half-width covering sensor separations, asynchrony slack and
    /// correlated errors, m.
    pub gamma_r: f64,
    /// Cauchy scale of the heavy-tailed error component, m.
    pub sigma_r: f64,
    pub lattice: Lattice3,
    pub lattice_1d: Lattice1,
}

impl Default for RangeParams {
    fn default() -> Self {
        Self {
            gamma_r: 2.0,
            sigma_r: 0.5,
            lattice: Lattice3::centered_cubic(9, 3.0),
            lattice_1d: Lattice1::centered(101, 3.0),
        }
    }
}

/// One range measurement between two tracked feet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeMeasurement {
    pub a: FootId,
    pub b: FootId,
    /// Measured range, m, ≥ 0.
    pub r_tilde: f64,
    /// Measurement time, s.
    pub t: f64,
}

/// Cauchy-uniform range likelihood: the convolution of a uniform window of
/// half-width `γ_r` with a Cauchy density of scale `σ_r`, up to a constant.
pub fn range_likelihood(r_tilde: f64, s_norm: f64, gamma_r: f64, sigma_r: f64) -> f64 {
    ((r_tilde - s_norm + gamma_r) / sigma_r).atan() - ((r_tilde - s_norm - gamma_r) / sigma_r).atan()
}

/// Conditions the leading `d` coordinates of a joint Gaussian on new first
/// and second conditional moments, updating the remaining coordinates by
/// marginalization.
///
/// `cond_second` is the conditional second-order moment `E[z₁z₁ᵀ | π]`, not
/// the central covariance. The output covariance is symmetrized.
pub fn marginal_condition(
    mean: &mut DVector<f64>,
    cov: &mut DMatrix<f64>,
    d: usize,
    cond_mean: &DVector<f64>,
    cond_second: &DMatrix<f64>,
) -> Result<(), FusionError> {
    let n = mean.len();
    assert!(d > 0 && d <= n);
    assert_eq!(cond_mean.len(), d);
    assert_eq!((cond_second.nrows(), cond_second.ncols()), (d, d));
    if !cond_mean.iter().all(|v| v.is_finite()) || !cond_second.iter().all(|v| v.is_finite()) {
        return Err(FusionError::NonFinite);
    }

    let z1 = mean.rows(0, d).into_owned();
    let m1 = cond_mean.clone();
    let p11_new = cond_second - &m1 * m1.transpose();

    if d == n {
        mean.copy_from(&m1);
        cov.copy_from(&p11_new);
        linalg::symmetrize(cov);
        return Ok(());
    }

    let p11 = cov.view((0, 0), (d, d)).into_owned();
    let p12 = cov.view((0, d), (d, n - d)).into_owned();
    let p22 = cov.view((d, d), (n - d, n - d)).into_owned();
    let z2 = mean.rows(d, n - d).into_owned();

    // U = P₁₂ᵀ P₁₁⁻¹ via an SPD solve of P₁₁ X = P₁₂.
    let x = linalg::spd_solve(&p11, &p12)?;
    let u = x.transpose();
    let v = &z2 - &u * &z1;
    let m2 = &v + &u * &m1;

    let z_term = &u * &m1 * v.transpose() + &v * m1.transpose() * u.transpose();
    let p22_new = &p22 - &u * &p12
        + &v * v.transpose()
        + z_term
        + &u * cond_second * u.transpose()
        - &m2 * m2.transpose();
    let p12_new = &m1 * v.transpose() + cond_second * u.transpose() - &m1 * m2.transpose();

    mean.rows_mut(0, d).copy_from(&m1);
    mean.rows_mut(d, n - d).copy_from(&m2);
    cov.view_mut((0, 0), (d, d)).copy_from(&p11_new);
    cov.view_mut((0, d), (d, n - d)).copy_from(&p12_new);
    cov.view_mut((d, 0), (n - d, d)).copy_from(&p12_new.transpose());
    cov.view_mut((d, d), (n - d, n - d)).copy_from(&p22_new);
    linalg::symmetrize(cov);
    Ok(())
}

/// Which difference scaling the state transform applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    /// Scaled difference `z₁ = D_γ (x_a − x_b)`.
    Gamma,
    /// Plain difference `z₁ = x_a − x_b` (unit scaling).
    One,
}

/// Invertible state transform placing the (scaled) position difference of
/// two feet in the leading three coordinates.
#[derive(Debug, Clone)]
pub struct StateTransform {
    pub t: DMatrix<f64>,
    pub t_inv: DMatrix<f64>,
}

/// Builds the transform and its closed-form inverse from the 2×2-block
/// construction: the inverse of `[[D, −D], [D, D]]` is
/// `½ [[D⁻¹, D⁻¹], [−D⁻¹, D⁻¹]]`.
pub fn build_transform(
    kind: TransformKind,
    g: &GlobalEstimate,
    a: FootId,
    b: FootId,
    cp: &ConstraintParams,
) -> Result<StateTransform, FusionError> {
    if a == b {
        return Err(FusionError::SameFoot);
    }
    let ka = g.index_of(a).ok_or(FusionError::UnknownFoot(a))?;
    let kb = g.index_of(b).ok_or(FusionError::UnknownFoot(b))?;
    let d = match kind {
        TransformKind::Gamma => cp.d_gamma(),
        TransformKind::One => Vector3::new(1.0, 1.0, 1.0),
    };
    let m = g.dim();

    // Permutation: positions of a, then positions of b, then everything
    // else in original order.
    let lead: Vec<usize> = (0..3).map(|i| 4 * ka + i).chain((0..3).map(|i| 4 * kb + i)).collect();
    let rest: Vec<usize> = (0..m).filter(|i| !lead.contains(i)).collect();
    let order: Vec<usize> = lead.into_iter().chain(rest).collect();

    let mut t = DMatrix::zeros(m, m);
    let mut t_inv = DMatrix::zeros(m, m);
    // Leading 6×6 block composed with the permutation.
    for i in 0..3 {
        t[(i, order[i])] = d[i];
        t[(i, order[3 + i])] = -d[i];
        t[(3 + i, order[i])] = d[i];
        t[(3 + i, order[3 + i])] = d[i];
        let dinv = 0.5 / d[i];
        t_inv[(order[i], i)] = dinv;
        t_inv[(order[i], 3 + i)] = dinv;
        t_inv[(order[3 + i], i)] = -dinv;
        t_inv[(order[3 + i], 3 + i)] = dinv;
    }
    for (row, &col) in order.iter().enumerate().skip(6) {
        t[(row, col)] = 1.0;
        t_inv[(col, row)] = 1.0;
    }
    Ok(StateTransform { t, t_inv })
}

/// Sigma points of a 3-D Gaussian per the η-scaled Cholesky construction:
/// the center with weight `1 − 3/η` and `±√η` times each Cholesky column
/// with weight `1/(2η)`.
fn sigma_points(
    mean: &Vector3<f64>,
    cov: &Matrix3<f64>,
    eta: f64,
) -> Result<(Vec<Vector3<f64>>, Vec<f64>), FusionError> {
    let l = linalg::jittered_cholesky(&DMatrix::from_fn(3, 3, |i, j| cov[(i, j)]))?;
    let mut pts = vec![*mean];
    let mut wts = vec![1.0 - 3.0 / eta];
    let s = eta.sqrt();
    for i in 0..3 {
        let col = Vector3::new(l[(0, i)], l[(1, i)], l[(2, i)]);
        pts.push(mean + s * col);
        wts.push(0.5 / eta);
        pts.push(mean - s * col);
        wts.push(0.5 / eta);
    }
    Ok((pts, wts))
}

/// Projects a point onto the closed ball of the given radius.
pub fn project_to_ball(p: &Vector3<f64>, radius: f64) -> Vector3<f64> {
    let n = p.norm();
    if n <= radius {
        *p
    } else {
        p * (radius / n)
    }
}

/// Imposes the separation constraint between feet `a` and `b` of one agent.
///
/// Transforms so the scaled difference leads, projects the sigma points
/// onto the constraint ball (inflated by `v_max·Δt` for state asynchrony),
/// conditions on the projected moments and transforms back.
pub fn constraint_update(
    g: &GlobalEstimate,
    a: FootId,
    b: FootId,
    cp: &ConstraintParams,
    dt_ab: f64,
) -> Result<GlobalEstimate, FusionError> {
    let tr = build_transform(TransformKind::Gamma, g, a, b, cp)?;
    let mut mean = &tr.t * &g.mean;
    let mut cov = &tr.t * &g.cov * tr.t.transpose();

    let z1 = Vector3::new(mean[0], mean[1], mean[2]);
    let p11 = Matrix3::from_fn(|i, j| cov[(i, j)]);
    let radius = cp.gamma_xy + cp.v_max * dt_ab.abs();

    let (pts, wts) = sigma_points(&z1, &p11, cp.eta)?;
    // Projection is the identity when every point already satisfies the
    // constraint; the update then carries no information.
    if pts.iter().all(|p| p.norm() <= radius) {
        return Ok(g.clone());
    }
    let projected: Vec<Vector3<f64>> = pts.iter().map(|p| project_to_ball(p, radius)).collect();

    let mut m1 = Vector3::zeros();
    let mut c1 = Matrix3::zeros();
    for (p, w) in projected.iter().zip(&wts) {
        m1 += *w * p;
        c1 += *w * p * p.transpose();
    }

    marginal_condition(
        &mut mean,
        &mut cov,
        3,
        &DVector::from_column_slice(m1.as_slice()),
        &DMatrix::from_fn(3, 3, |i, j| c1[(i, j)]),
    )?;

    let out_mean = &tr.t_inv * mean;
    let mut out_cov = &tr.t_inv * cov * tr.t_inv.transpose();
    linalg::symmetrize(&mut out_cov);
    Ok(GlobalEstimate {
        ids: g.ids.clone(),
        mean: out_mean,
        cov: out_cov,
    })
}

/// Conditional z1 moments of the range update: lattice points mapped
/// through the eigendecomposition of the prior, reweighted by the
/// likelihood. Returns `(mean, second_moment, applied)`; `applied` is false
/// when every posterior weight underflowed (irreconcilable outlier).
pub fn range_conditional_moments(
    z1: &Vector3<f64>,
    p11: &Matrix3<f64>,
    r_tilde: f64,
    gamma_r: f64,
    sigma_r: f64,
    lattice: &Lattice3,
) -> Result<(Vector3<f64>, Matrix3<f64>, bool), FusionError> {
    let (q, lam) = linalg::spd_eigen(&DMatrix::from_fn(3, 3, |i, j| p11[(i, j)]))?;
    let qs = Matrix3::from_fn(|i, j| q[(i, j)] * lam[j].sqrt());

    let mut weights = Vec::with_capacity(lattice.points.len());
    let mut points = Vec::with_capacity(lattice.points.len());
    let mut total = 0.0;
    for (u, w_pr) in lattice.points.iter().zip(&lattice.weights) {
        let s = z1 + qs * u;
        let w = w_pr * range_likelihood(r_tilde, s.norm(), gamma_r, sigma_r);
        total += w;
        weights.push(w);
        points.push(s);
    }
    if !(total > 1e-300) {
        return Ok((*z1, p11 + z1 * z1.transpose(), false));
    }
    let mut m1 = Vector3::zeros();
    let mut c1 = Matrix3::zeros();
    for (s, w) in points.iter().zip(&weights) {
        let wn = w / total;
        m1 += wn * s;
        c1 += wn * s * s.transpose();
    }
    Ok((m1, c1, true))
}

/// Outcome of a robust range-type update.
#[derive(Debug, Clone)]
pub struct RangeUpdateResult {
    pub estimate: GlobalEstimate,
    /// False when the measurement was rejected as an irreconcilable
    /// outlier (all posterior weights under 1e-300); the estimate is then
    /// unchanged.
    pub applied: bool,
}

/// Conditions the global estimate on one inter-foot range measurement.
///
/// `slack` widens the uniform window by `v_max·Δt`-style asynchrony terms;
/// pass 0 for synchronous states.
pub fn range_update(
    g: &GlobalEstimate,
    m: &RangeMeasurement,
    rp: &RangeParams,
    slack: f64,
) -> Result<RangeUpdateResult, FusionError> {
    if !m.r_tilde.is_finite() || m.r_tilde < 0.0 {
        return Err(FusionError::NonFinite);
    }
    let cp = ConstraintParams::default(); // unit scaling only; D is not used
    let tr = build_transform(TransformKind::One, g, m.a, m.b, &cp)?;
    let mut mean = &tr.t * &g.mean;
    let mut cov = &tr.t * &g.cov * tr.t.transpose();

    let z1 = Vector3::new(mean[0], mean[1], mean[2]);
    let p11 = Matrix3::from_fn(|i, j| cov[(i, j)]);
    let gamma_eff = rp.gamma_r + slack;

    let (m1, c1, applied) =
        range_conditional_moments(&z1, &p11, m.r_tilde, gamma_eff, rp.sigma_r, &rp.lattice)?;
    if !applied {
        log::warn!(
            "range measurement {:?} rejected as irreconcilable outlier (r̃ = {} m)",
            (m.a, m.b),
            m.r_tilde
        );
        return Ok(RangeUpdateResult {
            estimate: g.clone(),
            applied: false,
        });
    }

    marginal_condition(
        &mut mean,
        &mut cov,
        3,
        &DVector::from_column_slice(m1.as_slice()),
        &DMatrix::from_fn(3, 3, |i, j| c1[(i, j)]),
    )?;

    let out_mean = &tr.t_inv * mean;
    let mut out_cov = &tr.t_inv * cov * tr.t_inv.transpose();
    linalg::symmetrize(&mut out_cov);
    Ok(RangeUpdateResult {
        estimate: GlobalEstimate {
            ids: g.ids.clone(),
            mean: out_mean,
            cov: out_cov,
        },
        applied,
    })
}

/// Auxiliary information fused through the range-update machinery.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AuxDatum {
    /// Range to a fixed point whose position is not part of the state.
    Anchor { position: Vector3<f64>, range: f64 },
    /// Absolute position measurement (a zero-range anchor).
    PositionFix { position: Vector3<f64> },
    /// Pressure-derived altitude relative to a reference, vertical only.
    Pressure { altitude: f64 },
}

/// Applies an anchor / position-fix / pressure update to one foot.
pub fn aux_update(
    g: &GlobalEstimate,
    foot: FootId,
    datum: AuxDatum,
    rp: &RangeParams,
) -> Result<RangeUpdateResult, FusionError> {
    let k = g.index_of(foot).ok_or(FusionError::UnknownFoot(foot))?;
    match datum {
        AuxDatum::Anchor { position, range } => {
            if !position.iter().all(|v| v.is_finite()) || !range.is_finite() {
                return Err(FusionError::NonFinite);
            }
            condition_foot_position(g, k, &position, range, rp)
        }
        AuxDatum::PositionFix { position } => {
            if !position.iter().all(|v| v.is_finite()) {
                return Err(FusionError::NonFinite);
            }
            condition_foot_position(g, k, &position, 0.0, rp)
        }
        AuxDatum::Pressure { altitude } => {
            if !altitude.is_finite() {
                return Err(FusionError::NonFinite);
            }
            condition_foot_vertical(g, k, altitude, rp)
        }
    }
}

/// Moves the given coordinates to the front by permutation, conditions them
/// on new moments, and restores the original order.
fn condition_on_indices(
    g: &GlobalEstimate,
    indices: &[usize],
    cond_mean: &DVector<f64>,
    cond_second: &DMatrix<f64>,
) -> Result<GlobalEstimate, FusionError> {
    let m = g.dim();
    let d = indices.len();
    let rest: Vec<usize> = (0..m).filter(|i| !indices.contains(i)).collect();
    let order: Vec<usize> = indices.iter().copied().chain(rest).collect();

    let mut perm = DMatrix::zeros(m, m);
    for (row, &col) in order.iter().enumerate() {
        perm[(row, col)] = 1.0;
    }
    let mut mean = &perm * &g.mean;
    let mut cov = &perm * &g.cov * perm.transpose();
    marginal_condition(&mut mean, &mut cov, d, cond_mean, cond_second)?;
    let out_mean = perm.transpose() * mean;
    let mut out_cov = perm.transpose() * cov * perm;
    linalg::symmetrize(&mut out_cov);
    Ok(GlobalEstimate {
        ids: g.ids.clone(),
        mean: out_mean,
        cov: out_cov,
    })
}

fn condition_foot_position(
    g: &GlobalEstimate,
    k: usize,
    fixed: &Vector3<f64>,
    r_tilde: f64,
    rp: &RangeParams,
) -> Result<RangeUpdateResult, FusionError> {
    let o = 4 * k;
    let indices = [o, o + 1, o + 2];
    let z1 = Vector3::new(g.mean[o], g.mean[o + 1], g.mean[o + 2]);
    let p11 = Matrix3::from_fn(|i, j| g.cov[(indices[i], indices[j])]);

    // Work on the shifted variable s = z1 − x_c, whose norm the likelihood
    // constrains, then shift the moments back.
    let shifted = z1 - fixed;
    let (ms, cs, applied) =
        range_conditional_moments(&shifted, &p11, r_tilde, rp.gamma_r, rp.sigma_r, &rp.lattice)?;
    if !applied {
        log::warn!("aux update on foot index {k} rejected as irreconcilable outlier");
        return Ok(RangeUpdateResult {
            estimate: g.clone(),
            applied: false,
        });
    }
    let m1 = ms + fixed;
    let c1 = cs + ms * fixed.transpose() + fixed * ms.transpose() + fixed * fixed.transpose();
    let est = condition_on_indices(
        g,
        &indices,
        &DVector::from_column_slice(m1.as_slice()),
        &DMatrix::from_fn(3, 3, |i, j| c1[(i, j)]),
    )?;
    Ok(RangeUpdateResult {
        estimate: est,
        applied: true,
    })
}

fn condition_foot_vertical(
    g: &GlobalEstimate,
    k: usize,
    altitude: f64,
    rp: &RangeParams,
) -> Result<RangeUpdateResult, FusionError> {
    let idx = 4 * k + 2;
    let z1 = g.mean[idx];
    let var = g.cov[(idx, idx)];
    let sd = var.max(0.0).sqrt().max(1e-12);

    let shifted = z1 - altitude;
    let mut total = 0.0;
    let mut m = 0.0;
    let mut c = 0.0;
    for (u, w_pr) in rp.lattice_1d.points.iter().zip(&rp.lattice_1d.weights) {
        let s = shifted + sd * u;
        let w = w_pr * range_likelihood(0.0, s.abs(), rp.gamma_r, rp.sigma_r);
        total += w;
        m += w * s;
        c += w * s * s;
    }
    if !(total > 1e-300) {
        log::warn!("pressure update on foot index {k} rejected as irreconcilable outlier");
        return Ok(RangeUpdateResult {
            estimate: g.clone(),
            applied: false,
        });
    }
    m /= total;
    c /= total;
    let m1 = m + altitude;
    let c1 = c + 2.0 * m * altitude + altitude * altitude;
    let est = condition_on_indices(
        g,
        &[idx],
        &DVector::from_column_slice(&[m1]),
        &DMatrix::from_fn(1, 1, |_, _| c1),
    )?;
    Ok(RangeUpdateResult {
        estimate: est,
        applied: true,
    })
}

/// Per-foot bookkeeping inside the fusion center.
#[derive(Debug, Clone)]
struct FootMeta {
    id: FootId,
    agent: AgentId,
    /// Pure dead-reckoning mirror of the agent-side baseline; corrections
    /// are expressed against it.
    baseline: TrackState,
    /// Time of the last ingested step.
    t_last: f64,
}

/// The single-writer owner of the global estimate.
///
/// Receives step updates and range measurements, applies the separation
/// constraint at every step ingest, and emits mean corrections back to the
/// agents.
#[derive(Debug, Clone)]
pub struct FusionCenter {
    est: GlobalEstimate,
    feet: Vec<FootMeta>,
    pub constraint: ConstraintParams,
    pub ranging: RangeParams,
}

impl FusionCenter {
    /// Builds a center for a set of agents, two feet each, with initial
    /// track states.
    pub fn new(
        agents: &[(AgentId, [(FootId, TrackState); 2])],
        constraint: ConstraintParams,
        ranging: RangeParams,
    ) -> Self {
        let mut feet = Vec::new();
        let mut init = Vec::new();
        for (agent, pair) in agents {
            for (foot, ts) in pair {
                feet.push(FootMeta {
                    id: *foot,
                    agent: *agent,
                    baseline: *ts,
                    t_last: 0.0,
                });
                init.push((*foot, *ts));
            }
        }
        Self {
            est: GlobalEstimate::new(&init),
            feet,
            constraint,
            ranging,
        }
    }

    pub fn estimate(&self) -> &GlobalEstimate {
        &self.est
    }

    fn meta_index(&self, foot: FootId) -> Result<usize, FusionError> {
        self.feet
            .iter()
            .position(|f| f.id == foot)
            .ok_or(FusionError::UnknownFoot(foot))
    }

    /// The other foot of the same agent.
    pub fn paired_foot(&self, foot: FootId) -> Option<FootId> {
        let agent = self.feet.iter().find(|f| f.id == foot)?.agent;
        self.feet
            .iter()
            .find(|f| f.agent == agent && f.id != foot)
            .map(|f| f.id)
    }

    /// Step index of the center's dead-reckoning baseline for a foot.
    pub fn baseline_seq(&self, foot: FootId) -> Option<u64> {
        self.feet.iter().find(|f| f.id == foot).map(|f| f.baseline.seq)
    }

    /// The center's pure dead-reckoning baseline for a foot.
    pub fn baseline(&self, foot: FootId) -> Option<&TrackState> {
        self.feet.iter().find(|f| f.id == foot).map(|f| &f.baseline)
    }

    /// The most recently updated foot of an agent, used for inter-agent
    /// ranging.
    pub fn ranging_foot(&self, agent: AgentId) -> Result<FootId, FusionError> {
        self.feet
            .iter()
            .filter(|f| f.agent == agent)
            .max_by(|a, b| a.t_last.partial_cmp(&b.t_last).unwrap())
            .map(|f| f.id)
            .ok_or(FusionError::UnknownAgent(agent))
    }

    /// Ingests one step update: propagates the foot's block (and its
    /// cross-covariances) through the dead-reckoning recursion, applies the
    /// separation constraint against the paired foot, and returns the mean
    /// correction for the agent.
    pub fn ingest_step(&mut self, foot: FootId, u: &StepUpdate) -> Result<Correction, FusionError> {
        let mi = self.meta_index(foot)?;
        if u.seq != self.feet[mi].baseline.seq + 1 {
            return Err(FusionError::OutOfOrder {
                foot,
                have: self.feet[mi].baseline.seq,
                got: u.seq,
            });
        }
        let k = self.est.index_of(foot).ok_or(FusionError::UnknownFoot(foot))?;
        let o = 4 * k;
        let n = self.est.dim();

        // Mean recursion on the foot's block.
        let chi = self.est.mean[o + 3];
        let r = heading_rotation(chi);
        let moved = r * u.dp;
        for i in 0..3 {
            self.est.mean[o + i] += moved[i];
        }
        self.est.mean[o + 3] = wrap_angle(chi + u.dpsi);

        // Covariance: F differs from identity only on this block.
        let mut f_block = nalgebra::Matrix4::identity();
        let (s, c) = chi.sin_cos();
        let dr = Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0);
        let coupling = dr * u.dp;
        for i in 0..3 {
            f_block[(i, 3)] = coupling[i];
        }
        // Rows, then columns.
        let rows = self.est.cov.rows(o, 4).into_owned();
        self.est.cov.view_mut((o, 0), (4, n)).copy_from(&(&f_block * rows));
        let cols = self.est.cov.columns(o, 4).into_owned();
        self.est
            .cov
            .view_mut((0, o), (n, 4))
            .copy_from(&(cols * f_block.transpose()));
        // Step noise, rotated.
        let rp_block = r * u.p_p * r.transpose();
        let rc = r * u.p_ppsi;
        for i in 0..3 {
            for j in 0..3 {
                self.est.cov[(o + i, o + j)] += rp_block[(i, j)];
            }
            self.est.cov[(o + i, o + 3)] += rc[i];
            self.est.cov[(o + 3, o + i)] += rc[i];
        }
        self.est.cov[(o + 3, o + 3)] += u.p_psipsi;
        linalg::symmetrize(&mut self.est.cov);

        // Mirror the agent's pure dead reckoning.
        self.feet[mi].baseline = dr_propagate(&self.feet[mi].baseline, u)?;
        self.feet[mi].t_last = u.t_step;

        // Separation constraint against the paired foot at every ingest.
        if let Some(pair) = self.paired_foot(foot) {
            let pi = self.meta_index(pair)?;
            let dt_ab = (self.feet[mi].t_last - self.feet[pi].t_last).abs();
            self.est = constraint_update(&self.est, foot, pair, &self.constraint, dt_ab)?;
        }

        let baseline = &self.feet[mi].baseline;
        let central_x = self.est.foot_position(foot).unwrap();
        let central_chi = self.est.foot_heading(foot).unwrap();
        Ok(Correction {
            seq: u.seq,
            dx: central_x - baseline.x,
            dchi: wrap_angle(central_chi - baseline.chi),
            cov: None,
        })
    }

    /// Ingests one inter-agent range measurement, resolving each agent to
    /// its most recently updated foot and inflating the window by the state
    /// asynchrony.
    pub fn ingest_agent_range(
        &mut self,
        a: AgentId,
        b: AgentId,
        r_tilde: f64,
        t: f64,
    ) -> Result<bool, FusionError> {
        let fa = self.ranging_foot(a)?;
        let fb = self.ranging_foot(b)?;
        let ta = self.feet[self.meta_index(fa)?].t_last;
        let tb = self.feet[self.meta_index(fb)?].t_last;
        let slack = self.constraint.v_max * ((t - ta).abs() + (t - tb).abs());
        let m = RangeMeasurement {
            a: fa,
            b: fb,
            r_tilde,
            t,
        };
        let res = range_update(&self.est, &m, &self.ranging, slack)?;
        self.est = res.estimate;
        Ok(res.applied)
    }

    /// Applies an auxiliary update to one foot.
    pub fn ingest_aux(&mut self, foot: FootId, datum: AuxDatum) -> Result<bool, FusionError> {
        let res = aux_update(&self.est, foot, datum, &self.ranging)?;
        self.est = res.estimate;
        Ok(res.applied)
    }
}
