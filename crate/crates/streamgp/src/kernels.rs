//! Kernel evaluation, covariance assembly with a jitter ladder, and analytic
//! hyperparameter gradients.
//!
//! All positive hyperparameters are log-parameterized so that optimization is
//! unconstrained, and all gradients here are taken with respect to the
//! log-parameters.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Kernel families. Only the squared-exponential kernel is implemented; the
/// enum leaves room for other stationary families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum KernelFamily {
    Rbf,
}

/// Log-parameterized kernel hyperparameters plus the observation-noise
/// variance.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelParams {
    pub family: KernelFamily,
    /// One log-lengthscale per input dimension.
    pub log_lengthscales: DVector<f64>,
    pub log_signal_variance: f64,
    pub log_noise_variance: f64,
}

impl KernelParams {
    /// RBF kernel with unit lengthscales, unit signal variance and the given
    /// noise variance.
    pub fn rbf(dim: usize, noise_variance: f64) -> Self {
        KernelParams {
            family: KernelFamily::Rbf,
            log_lengthscales: DVector::zeros(dim),
            log_signal_variance: 0.0,
            log_noise_variance: noise_variance.ln(),
        }
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn lengthscales(&self) -> DVector<f64> {
        self.log_lengthscales.map(f64::exp)
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise_variance.exp()
    }

    /// Checks that every exponentiated parameter is finite and positive.
    pub fn validate(&self) -> Result<()> {
        let all = self
            .log_lengthscales
            .iter()
            .copied()
            .chain([self.log_signal_variance, self.log_noise_variance]);
        for v in all {
            if !v.is_finite() || !v.exp().is_finite() || v.exp() <= 0.0 {
                return Err(Error::input(format!(
                    "kernel log-parameter {v} does not exponentiate to a finite positive value"
                )));
            }
        }
        Ok(())
    }
}

fn check_dims(params: &KernelParams, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::input("kernel_matrix: empty point set"));
    }
    if a.ncols() != params.dim() || b.ncols() != params.dim() {
        return Err(Error::input(format!(
            "kernel_matrix: point dimension {}/{} does not match parameter dimension {}",
            a.ncols(),
            b.ncols(),
            params.dim()
        )));
    }
    Ok(())
}

/// Squared distance between row `i` of `a` and row `j` of `b`, scaled per
/// dimension by multiplying with the inverse lengthscales (the same
/// expression the gradient tape evaluates).
#[inline]
fn scaled_sqdist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize, inv_ls: &DVector<f64>) -> f64 {
    let mut s = 0.0;
    for d in 0..a.ncols() {
        let t = (a[(i, d)] - b[(j, d)]) * inv_ls[d];
        s += t * t;
    }
    s
}

/// Cross-covariance matrix `K(A, B)` with entry `(i, j) = k(a_i, b_j)`.
///
/// For the RBF family `k(x, x') = sf2 * exp(-0.5 * sum_d ((x_d - x'_d)/l_d)^2)`.
pub fn kernel_matrix(params: &KernelParams, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dims(params, a, b)?;
    let inv_ls = params.log_lengthscales.map(|v| (-v).exp());
    let sf2 = params.signal_variance();
    let mut k = DMatrix::zeros(a.nrows(), b.nrows());
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            k[(i, j)] = sf2 * ((-0.5 * scaled_sqdist(a, i, b, j, &inv_ls)).exp());
        }
    }
    Ok(k)
}

/// Gradients of `kernel_matrix(params, a, b)` with respect to each
/// log-hyperparameter, evaluated analytically.
#[derive(Debug, Clone)]
pub struct KernelGrads {
    /// `dK/d(log l_d)`, one matrix per input dimension.
    pub wrt_log_lengthscales: Vec<DMatrix<f64>>,
    /// `dK/d(log sf2)`; equals `K` itself.
    pub wrt_log_signal_variance: DMatrix<f64>,
}

pub fn kernel_grads(params: &KernelParams, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<KernelGrads> {
    check_dims(params, a, b)?;
    let inv_ls = params.log_lengthscales.map(|v| (-v).exp());
    let k = kernel_matrix(params, a, b)?;
    let mut wrt_ls = vec![DMatrix::zeros(a.nrows(), b.nrows()); params.dim()];
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            for d in 0..params.dim() {
                // d k / d(log l_d) = k * ((x_d - x'_d)/l_d)^2
                let t = (a[(i, d)] - b[(j, d)]) * inv_ls[d];
                wrt_ls[d][(i, j)] = k[(i, j)] * t * t;
            }
        }
    }
    Ok(KernelGrads {
        wrt_log_lengthscales: wrt_ls,
        wrt_log_signal_variance: k,
    })
}

/// Jitter levels tried in order, as multiples of the mean diagonal.
pub const JITTER_LEVELS: [f64; 5] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4];

/// Reference scale for the jitter ladder: the mean diagonal, with a floor so
/// that an all-zero matrix still gets an absolute jitter. Computed as
/// `sum * (1/n)` to stay bitwise identical with the gradient tape's version
/// of the same reduction.
pub fn jitter_scale(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let sum: f64 = (0..n).map(|i| m[(i, i)]).sum();
    let mean_diag = sum * (1.0 / n as f64);
    if mean_diag.is_finite() && mean_diag > 0.0 {
        mean_diag
    } else {
        1.0
    }
}

/// Relative pivot floor: a factorization attempt only counts as successful
/// when every squared pivot stays above this fraction of the mean diagonal.
/// A plain positivity check would accept factorizations of numerically
/// singular Gram matrices (clustered inducing points) whose inverses amplify
/// roundoff by 1e13 and make every downstream objective non-smooth; bounding
/// the effective condition number keeps objectives differentiable to finite
/// differences.
pub(crate) const PIVOT_FLOOR_REL: f64 = 1e-8;

/// Unblocked lower-triangular Cholesky of `m + jitter*I`; `None` when a pivot
/// is non-finite or falls below the pivot floor. This exact loop order is
/// shared by the factorization probe and the gradient tape, so feasibility
/// decisions and factor values agree bit-for-bit across all paths.
pub(crate) fn scalar_cholesky(
    m: &DMatrix<f64>,
    jitter: f64,
    pivot_floor: f64,
) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut diag = m[(j, j)] + jitter;
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > pivot_floor) || !diag.is_finite() {
            return None;
        }
        let pivot = diag.sqrt();
        l[(j, j)] = pivot;
        for i in (j + 1)..n {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / pivot;
        }
    }
    Some(l)
}

/// A covariance matrix together with the jitter that made it factorizable and
/// its lower-triangular Cholesky factor.
#[derive(Debug, Clone)]
pub struct CovMatrix {
    entries: DMatrix<f64>,
    jitter_applied: f64,
    l: DMatrix<f64>,
}

impl CovMatrix {
    /// Factors `m + j*I`, escalating `j` over [`JITTER_LEVELS`] (relative to
    /// the mean diagonal) until the factorization succeeds.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        psd_cholesky(m)
    }

    /// Original entries (without the applied jitter).
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Absolute jitter added to the diagonal before factorization.
    pub fn jitter_applied(&self) -> f64 {
        self.jitter_applied
    }

    /// Lower-triangular factor `L` with `L L^T = entries + jitter*I`.
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Solves `(M + jI) x = b` through the factor.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self.solve_lower(b);
        self.l
            .transpose()
            .solve_upper_triangular(&y)
            .expect("upper solve after successful factorization")
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        DVector::from_column_slice(self.solve(&m).as_slice())
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.l
            .solve_lower_triangular(b)
            .expect("lower solve after successful factorization")
    }

    /// `log det (M + jI)` computed as `2 * sum(log L_ii)`.
    pub fn logdet(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Explicit inverse of `M + jI`; used where whole-matrix traces are needed.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve(&DMatrix::identity(self.l.nrows(), self.l.nrows()))
    }
}

/// Factorization with the escalating jitter ladder. On total failure returns a
/// numerical error carrying the attempted ladder.
pub fn psd_cholesky(m: DMatrix<f64>) -> Result<CovMatrix> {
    if m.nrows() != m.ncols() {
        return Err(Error::input(format!(
            "psd_cholesky: matrix is {}x{}, not square",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.abs().max();
    let mut max_asym: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            max_asym = max_asym.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if scale > 0.0 && max_asym > 1e-8 * scale {
        return Err(Error::input(format!(
            "psd_cholesky: matrix asymmetric (max |M_ij - M_ji| = {max_asym:.3e} at scale {scale:.3e})"
        )));
    }

    let ref_scale = jitter_scale(&m);
    let pivot_floor = PIVOT_FLOOR_REL * ref_scale;
    for level in JITTER_LEVELS {
        let jitter = level * ref_scale;
        if let Some(l) = scalar_cholesky(&m, jitter, pivot_floor) {
            return Ok(CovMatrix {
                entries: m,
                jitter_applied: jitter,
                l,
            });
        }
    }
    Err(Error::numerical(format!(
        "cholesky failed at all jitter levels {JITTER_LEVELS:?} (relative to mean diagonal {ref_scale:.3e})"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_points(rng: &mut ChaCha20Rng, n: usize, d: usize, span: f64) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * span - span / 2.0)
    }

    #[test]
    fn self_covariance_is_signal_variance() {
        let params = KernelParams {
            family: KernelFamily::Rbf,
            log_lengthscales: DVector::from_vec(vec![0.3, -0.2]),
            log_signal_variance: 0.7,
            log_noise_variance: -2.0,
        };
        let x = DMatrix::from_row_slice(1, 2, &[1.4, -0.3]);
        let k = kernel_matrix(&params, &x, &x).unwrap();
        assert_eq!(k[(0, 0)], params.signal_variance());
    }

    #[test]
    fn unit_scaled_distance() {
        // A = {0}, B = {l}: k = sf2 * exp(-0.5)
        let params = KernelParams::rbf(1, 0.1);
        let a = DMatrix::from_row_slice(1, 1, &[0.0]);
        let b = DMatrix::from_row_slice(1, 1, &[1.0]);
        let k = kernel_matrix(&params, &a, &b).unwrap();
        assert_relative_eq!(k[(0, 0)], (-0.5f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(k[(0, 0)], 0.60653, max_relative = 1e-5);
    }

    #[test]
    fn matches_elementwise_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let params = KernelParams {
            family: KernelFamily::Rbf,
            log_lengthscales: DVector::from_vec(vec![0.7f64.ln(), 1.3f64.ln()]),
            log_signal_variance: 2.5f64.ln(),
            log_noise_variance: -1.0,
        };
        let a = random_points(&mut rng, 3, 2, 4.0);
        let b = random_points(&mut rng, 3, 2, 4.0);
        let k = kernel_matrix(&params, &a, &b).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let du = (a[(i, 0)] - b[(j, 0)]) / 0.7;
                let dv = (a[(i, 1)] - b[(j, 1)]) / 1.3;
                let expect = 2.5 * (-0.5 * (du * du + dv * dv)).exp();
                assert!((k[(i, j)] - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_input_error() {
        let params = KernelParams::rbf(2, 0.1);
        let a = DMatrix::from_row_slice(1, 1, &[0.0]);
        assert!(matches!(
            kernel_matrix(&params, &a, &a),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn cholesky_identity_needs_no_jitter() {
        let cov = psd_cholesky(DMatrix::identity(3, 3)).unwrap();
        assert_eq!(cov.jitter_applied(), 0.0);
        assert_relative_eq!(cov.l(), &DMatrix::identity(3, 3), epsilon = 1e-14);
    }

    #[test]
    fn cholesky_rank_one_forces_jitter() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let cov = psd_cholesky(m).unwrap();
        assert!(cov.jitter_applied() > 0.0);
    }

    #[test]
    fn cholesky_reconstructs_wishart() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let g = DMatrix::from_fn(5, 8, |_, _| rng.random::<f64>() - 0.5);
        let m = &g * g.transpose();
        let cov = psd_cholesky(m.clone()).unwrap();
        let rebuilt = cov.l() * cov.l().transpose()
            - DMatrix::from_diagonal(&DVector::from_element(5, cov.jitter_applied()));
        assert_relative_eq!(rebuilt, m, epsilon = 1e-10);
    }

    #[test]
    fn asymmetric_matrix_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]);
        assert!(matches!(psd_cholesky(m), Err(Error::Input(_))));
    }

    #[test]
    fn grad_wrt_log_signal_variance_is_kernel() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let params = KernelParams::rbf(2, 0.1);
        let a = random_points(&mut rng, 4, 2, 3.0);
        let k = kernel_matrix(&params, &a, &a).unwrap();
        let g = kernel_grads(&params, &a, &a).unwrap();
        assert_relative_eq!(g.wrt_log_signal_variance, k, epsilon = 1e-15);
    }

    #[test]
    fn grad_wrt_lengthscale_vanishes_at_zero_distance() {
        let params = KernelParams::rbf(2, 0.1);
        let a = DMatrix::from_row_slice(2, 2, &[0.4, 1.0, -2.0, 0.1]);
        let g = kernel_grads(&params, &a, &a).unwrap();
        for d in 0..2 {
            for i in 0..2 {
                assert_eq!(g.wrt_log_lengthscales[d][(i, i)], 0.0);
            }
        }
    }

    #[test]
    fn grads_match_central_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..10 {
            let params = KernelParams {
                family: KernelFamily::Rbf,
                log_lengthscales: DVector::from_fn(2, |_, _| rng.random::<f64>() - 0.5),
                log_signal_variance: rng.random::<f64>() - 0.5,
                log_noise_variance: -2.0,
            };
            let a = random_points(&mut rng, 4, 2, 3.0);
            let g = kernel_grads(&params, &a, &a).unwrap();
            let h = 1e-5;

            for d in 0..2 {
                let mut lo = params.clone();
                let mut hi = params.clone();
                lo.log_lengthscales[d] -= h;
                hi.log_lengthscales[d] += h;
                let fd = (kernel_matrix(&hi, &a, &a).unwrap() - kernel_matrix(&lo, &a, &a).unwrap())
                    / (2.0 * h);
                let scale = fd.abs().max().max(1e-12);
                let diff = (&g.wrt_log_lengthscales[d] - &fd).abs().max();
                assert!(diff / scale < 1e-4, "lengthscale {d} grad off by {diff:.3e}");
            }

            let mut lo = params.clone();
            let mut hi = params.clone();
            lo.log_signal_variance -= h;
            hi.log_signal_variance += h;
            let fd = (kernel_matrix(&hi, &a, &a).unwrap() - kernel_matrix(&lo, &a, &a).unwrap())
                / (2.0 * h);
            let diff = (&g.wrt_log_signal_variance - &fd).abs().max();
            assert!(diff / fd.abs().max() < 1e-4);
        }
    }

    #[test]
    fn random_gram_matrices_factor_after_jitter() {
        // Gram matrices of clustered random points are PSD up to roundoff; the
        // ladder must always produce a factorization.
        for seed in 0..100u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let params = KernelParams::rbf(2, 0.1);
            let n = 2 + (seed % 12) as usize;
            let a = random_points(&mut rng, n, 2, 0.5);
            let k = kernel_matrix(&params, &a, &a).unwrap();
            assert_relative_eq!(k.clone(), k.transpose(), epsilon = 1e-12);
            psd_cholesky(k).unwrap();
        }
    }

    proptest::proptest! {
        #[test]
        fn kernel_values_bounded_by_signal_variance(
            // Scaled distances are kept below ~17 lengthscales so the
            // exponential stays above the f64 underflow threshold.
            x0 in -5.0f64..5.0, x1 in -5.0f64..5.0,
            log_ls in -0.5f64..1.5, log_sf2 in -1.5f64..1.5,
        ) {
            let params = KernelParams {
                family: KernelFamily::Rbf,
                log_lengthscales: DVector::from_vec(vec![log_ls]),
                log_signal_variance: log_sf2,
                log_noise_variance: -2.0,
            };
            let a = DMatrix::from_row_slice(1, 1, &[x0]);
            let b = DMatrix::from_row_slice(1, 1, &[x1]);
            let k = kernel_matrix(&params, &a, &b).unwrap()[(0, 0)];
            proptest::prop_assert!(k > 0.0);
            proptest::prop_assert!(k <= params.signal_variance());
        }
    }
}
