//! Independent reference implementations used to validate the estimator.
//!
//! Everything here computes results by brute force — textbook joint Kalman
//! algebra, Monte-Carlo sampling, dense grid quadrature — deliberately
//! avoiding the transformation/marginalization code paths it is used to
//! check. The test suites and the CLI `selfcheck` command both run these.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::deadreck::{dr_propagate, TrackState};
use crate::fusion::range_likelihood;
use crate::ins::{ImuSample, InsConfig, ZuptIns};

/// Textbook joint Kalman measurement update over the full state:
/// `K = P Hᵀ (H P Hᵀ + R)⁻¹`, `x⁺ = x + K(y − Hx)`, `P⁺ = (I − KH)P`.
pub fn joint_kalman_update(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    h: &DMatrix<f64>,
    y: &DVector<f64>,
    r: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let s = h * cov * h.transpose() + r;
    let k = cov * h.transpose() * s.try_inverse().expect("oracle innovation covariance singular");
    let mean_out = mean + &k * (y - h * mean);
    let n = mean.len();
    let cov_out = (DMatrix::identity(n, n) - &k * h) * cov;
    (mean_out, cov_out)
}

fn mvn_sampler(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let n = cov.nrows();
    let jittered = cov + DMatrix::identity(n, n) * 1e-12;
    nalgebra::Cholesky::new(jittered)
        .expect("oracle prior not PSD")
        .l()
}

/// Monte-Carlo moments of the projected distribution: samples the joint
/// Gaussian over `[x_a, x_b]` (stacked 6-vector leading the state), applies
/// the ball projection to the scaled difference of every sample pointwise,
/// and returns the sample mean and covariance of the full state.
pub fn projection_moments_mc(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    d_gamma: &Vector3<f64>,
    gamma: f64,
    draws: usize,
    seed: u64,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = mean.len();
    assert!(n >= 6);
    let l = mvn_sampler(cov);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let mut acc_mean = DVector::zeros(n);
    let mut acc_outer = DMatrix::zeros(n, n);
    let mut z = DVector::zeros(n);
    for _ in 0..draws {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let mut x = mean + &l * &z;
        // Scaled difference of the two leading feet.
        let mut diff = Vector3::new(
            d_gamma.x * (x[0] - x[4 * 1]),
            d_gamma.y * (x[1] - x[4 * 1 + 1]),
            d_gamma.z * (x[2] - x[4 * 1 + 2]),
        );
        let norm = diff.norm();
        if norm > gamma {
            diff *= gamma / norm;
            // Keep the scaled sum, replace the scaled difference.
            for i in 0..3 {
                let s = d_gamma[i] * (x[i] + x[4 + i]);
                x[i] = 0.5 * (s + diff[i]) / d_gamma[i];
                x[4 + i] = 0.5 * (s - diff[i]) / d_gamma[i];
            }
        }
        acc_mean += &x;
        acc_outer += &x * x.transpose();
    }
    let nf = draws as f64;
    let m = acc_mean / nf;
    let c = acc_outer / nf - &m * m.transpose();
    (m, c)
}

/// Monte-Carlo moments of the *truncated* Gaussian (samples outside the
/// constraint discarded). Kept for reference: the sigma-point projection
/// update approximates the projected distribution above, not this one, and
/// the two differ substantially under deep truncation.
pub fn truncated_moments_mc(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    d_gamma: &Vector3<f64>,
    gamma: f64,
    draws: usize,
    seed: u64,
) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let n = mean.len();
    let l = mvn_sampler(cov);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut kept = 0usize;
    let mut acc_mean = DVector::zeros(n);
    let mut acc_outer = DMatrix::zeros(n, n);
    let mut z = DVector::zeros(n);
    for _ in 0..draws {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let x = mean + &l * &z;
        let diff = Vector3::new(
            d_gamma.x * (x[0] - x[4]),
            d_gamma.y * (x[1] - x[5]),
            d_gamma.z * (x[2] - x[6]),
        );
        if diff.norm() <= gamma {
            kept += 1;
            acc_mean += &x;
            acc_outer += &x * x.transpose();
        }
    }
    if kept < 100 {
        return None;
    }
    let nf = kept as f64;
    let m = acc_mean / nf;
    let c = acc_outer / nf - &m * m.transpose();
    Some((m, c))
}

/// Dense-grid quadrature moments of the range-update posterior over z1:
/// prior Gaussian times the Cauchy-uniform likelihood, integrated on a
/// regular `grid_n³` grid spanning ±`span` prior standard deviations per
/// axis.
pub fn range_quadrature_moments(
    z1: &Vector3<f64>,
    p11: &Matrix3<f64>,
    r_tilde: f64,
    gamma_r: f64,
    sigma_r: f64,
    grid_n: usize,
    span: f64,
) -> (Vector3<f64>, Matrix3<f64>) {
    let p_inv = p11.try_inverse().expect("oracle prior singular");
    let sd = Vector3::new(
        p11[(0, 0)].sqrt(),
        p11[(1, 1)].sqrt(),
        p11[(2, 2)].sqrt(),
    );
    let axis = |i: usize, k: usize| z1[i] - span * sd[i] + 2.0 * span * sd[i] * k as f64 / (grid_n - 1) as f64;

    let mut total = 0.0;
    let mut m = Vector3::zeros();
    let mut c = Matrix3::zeros();
    for ka in 0..grid_n {
        let x = axis(0, ka);
        for kb in 0..grid_n {
            let y = axis(1, kb);
            for kc in 0..grid_n {
                let z = axis(2, kc);
                let pt = Vector3::new(x, y, z);
                let d = pt - z1;
                let expo = -0.5 * (d.transpose() * p_inv * d)[(0, 0)];
                let w = expo.exp() * range_likelihood(r_tilde, pt.norm(), gamma_r, sigma_r);
                total += w;
                m += w * pt;
                c += w * pt * pt.transpose();
            }
        }
    }
    let m = m / total;
    let c = c / total - m * m.transpose();
    (m, c)
}

/// Result of comparing the split (step-wise INS + dead reckoning) system
/// against the indefinite ZUPT-aided filter on the same IMU stream.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ConsistencyReport {
    /// Number of steps compared.
    pub steps: usize,
    /// Max position-mean deviation in units of the indefinite filter's
    /// reported per-axis position standard deviation.
    pub max_mean_dev_sigma: f64,
    /// Max relative deviation over position and position-heading
    /// covariance elements (elements under 1e-3 of the dominant diagonal
    /// are compared on that absolute scale instead).
    pub max_cov_rel_dev: f64,
}

/// Runs both systems over one IMU stream and reports their agreement at
/// every reset instant.
pub fn split_vs_indefinite(samples: &[ImuSample], cfg: InsConfig) -> ConsistencyReport {
    let mut split = ZuptIns::new(cfg);
    let mut indef = ZuptIns::new(cfg).with_segmentation(false);
    let mut track = TrackState::default();

    let mut steps = 0usize;
    let mut max_mean_dev: f64 = 0.0;
    let mut max_cov_dev: f64 = 0.0;

    for s in samples {
        let emitted = split.process_sample(*s).expect("split filter failed");
        indef.process_sample(*s).expect("indefinite filter failed");

        if let Some(u) = emitted {
            track = dr_propagate(&track, &u).expect("dead reckoning failed");
            steps += 1;

            let ip = indef.state().p;
            let icov = indef.cov();
            for i in 0..3 {
                let sigma = icov[(i, i)].sqrt().max(1e-9);
                let dev = (track.x[i] - ip[i]).abs() / sigma;
                max_mean_dev = max_mean_dev.max(dev);
            }

            // Position block and position-heading cross terms.
            let scale = (0..3).map(|i| icov[(i, i)]).fold(0.0, f64::max).max(1e-12);
            for i in 0..3 {
                for j in 0..3 {
                    let (a, b) = (track.p[(i, j)], icov[(i, j)]);
                    max_cov_dev = max_cov_dev.max(rel_dev(a, b, scale));
                }
                let (a, b) = (track.p[(i, 3)], icov[(i, 8)]);
                max_cov_dev = max_cov_dev.max(rel_dev(a, b, scale));
            }
        }
    }
    ConsistencyReport {
        steps,
        max_mean_dev_sigma: max_mean_dev,
        max_cov_rel_dev: max_cov_dev,
    }
}

fn rel_dev(a: f64, b: f64, scale: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-3 * scale {
        (a - b).abs() / (1e-3 * scale).max(1e-300)
    } else {
        (a - b).abs() / denom
    }
}
