//! Exact Gaussian-process regression.
//!
//! This module is deliberately O(n^3) and transparent: every solve goes
//! through one fresh Cholesky factorization. It serves as the correctness
//! oracle for the streaming module and provides the log marginal likelihood
//! (and its gradient) used for hyperparameter pretraining.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::{kernel_grads, kernel_matrix, psd_cholesky, CovMatrix, KernelParams};

/// A finite-dimensional Gaussian: mean vector and full covariance matrix.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianPosterior {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Marginal variances (the covariance diagonal).
    pub fn variances(&self) -> DVector<f64> {
        self.cov.diagonal()
    }
}

fn check_training(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::input("gp: empty training set"));
    }
    if x.nrows() != y.len() {
        return Err(Error::input(format!(
            "gp: {} training inputs but {} targets",
            x.nrows(),
            y.len()
        )));
    }
    Ok(())
}

/// Training-data covariance `K(X,X) + noise*I`, factorized.
fn noisy_cov(params: &KernelParams, x: &DMatrix<f64>) -> Result<CovMatrix> {
    let mut k = kernel_matrix(params, x, x)?;
    let noise = params.noise_variance();
    for i in 0..k.nrows() {
        k[(i, i)] += noise;
    }
    psd_cholesky(k)
}

/// Posterior over the latent function at `xs` given training data `(x, y)`:
/// mean `K_fs^T (K + sn2 I)^-1 y`, covariance
/// `K_ss - K_fs^T (K + sn2 I)^-1 K_fs`.
pub fn gp_posterior(
    params: &KernelParams,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    xs: &DMatrix<f64>,
) -> Result<GaussianPosterior> {
    check_training(x, y)?;
    let ky = noisy_cov(params, x)?;
    let k_fs = kernel_matrix(params, x, xs)?;
    let k_ss = kernel_matrix(params, xs, xs)?;

    let alpha = ky.solve_vec(y);
    let mean = k_fs.transpose() * alpha;
    // K_fs^T Ky^-1 K_fs through the factor: V = L^-1 K_fs, correction = V^T V.
    let v = ky.solve_lower(&k_fs);
    let cov = k_ss - v.transpose() * &v;
    Ok(GaussianPosterior { mean, cov })
}

/// Diagonal-only fast path: posterior mean and marginal variances at `xs`.
pub fn gp_posterior_diag(
    params: &KernelParams,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    xs: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_training(x, y)?;
    let ky = noisy_cov(params, x)?;
    let k_fs = kernel_matrix(params, x, xs)?;
    let alpha = ky.solve_vec(y);
    let mean = k_fs.transpose() * alpha;
    let v = ky.solve_lower(&k_fs);
    let sf2 = params.signal_variance();
    let var = DVector::from_fn(xs.nrows(), |j, _| sf2 - v.column(j).norm_squared());
    Ok((mean, var))
}

/// Log marginal likelihood
/// `-1/2 y^T (K + sn2 I)^-1 y - 1/2 log|K + sn2 I| - n/2 log 2 pi`.
pub fn log_marginal_likelihood(params: &KernelParams, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    check_training(x, y)?;
    let ky = noisy_cov(params, x)?;
    let alpha = ky.solve_vec(y);
    let n = y.len() as f64;
    Ok(-0.5 * y.dot(&alpha) - 0.5 * ky.logdet() - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
}

/// Log marginal likelihood and its gradient with respect to
/// `[log_lengthscales.., log_signal_variance, log_noise_variance]`.
///
/// Uses `d lml / d theta = 1/2 alpha^T dK alpha - 1/2 tr(Ky^-1 dK)` with the
/// analytic kernel gradients.
pub fn log_marginal_likelihood_grad(
    params: &KernelParams,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(f64, Vec<f64>)> {
    check_training(x, y)?;
    let ky = noisy_cov(params, x)?;
    let alpha = ky.solve_vec(y);
    let n = y.len() as f64;
    let lml = -0.5 * y.dot(&alpha) - 0.5 * ky.logdet() - 0.5 * n * (2.0 * std::f64::consts::PI).ln();

    let ky_inv = ky.inverse();
    let grads = kernel_grads(params, x, x)?;
    let term = |dk: &DMatrix<f64>| -> f64 {
        let quad = (alpha.transpose() * dk * &alpha)[(0, 0)];
        let tr = ky_inv.zip_fold(dk, 0.0, |acc, a, b| acc + a * b);
        0.5 * (quad - tr)
    };

    let mut g = Vec::with_capacity(params.dim() + 2);
    for d in 0..params.dim() {
        g.push(term(&grads.wrt_log_lengthscales[d]));
    }
    g.push(term(&grads.wrt_log_signal_variance));
    // dKy/d(log sn2) = sn2 * I.
    let sn2 = params.noise_variance();
    let quad = sn2 * alpha.norm_squared();
    let tr = sn2 * ky_inv.trace();
    g.push(0.5 * (quad - tr));

    Ok((lml, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn single_point_interpolates_at_zero_noise() {
        // k(x,x)=1, sn2 ~ 0, Xs = X: mean = y, var = 0.
        let mut p = KernelParams::rbf(1, 1.0);
        p.log_noise_variance = (1e-14f64).ln();
        let x = DMatrix::from_row_slice(1, 1, &[0.3]);
        let y = DVector::from_vec(vec![2.5]);
        let post = gp_posterior(&p, &x, &y, &x).unwrap();
        assert_relative_eq!(post.mean[0], 2.5, max_relative = 1e-10);
        assert!(post.cov[(0, 0)].abs() < 1e-9);
    }

    #[test]
    fn single_point_unit_noise() {
        // k(x,x)=1, sn2=1, Xs=X: mean = y/2, var = 1 - 1/2 = 0.5.
        let p = KernelParams::rbf(1, 1.0);
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let y = DVector::from_vec(vec![1.0]);
        let post = gp_posterior(&p, &x, &y, &x).unwrap();
        assert_relative_eq!(post.mean[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(post.cov[(0, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn two_point_posterior_matches_direct_formula() {
        // 1-D RBF l=1, sf2=1, sn2=0.1, x=(0,1), y=(0,1), Xs={0.5}; the oracle
        // below evaluates the posterior formula with explicit 2x2 inversion.
        let p = KernelParams::rbf(1, 0.1);
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let y = DVector::from_vec(vec![0.0, 1.0]);
        let xs = DMatrix::from_row_slice(1, 1, &[0.5]);
        let post = gp_posterior(&p, &x, &y, &xs).unwrap();

        let k01 = (-0.5f64).exp();
        let ks = (-0.5f64 * 0.25).exp();
        // Ky = [[1.1, k01], [k01, 1.1]]; inverse by adjugate.
        let det = 1.1 * 1.1 - k01 * k01;
        let inv = [[1.1 / det, -k01 / det], [-k01 / det, 1.1 / det]];
        let mean = ks * (inv[0][0] + inv[0][1]) * 0.0 + ks * (inv[1][0] + inv[1][1]) * 1.0;
        let quad = ks * ks * (inv[0][0] + inv[0][1] + inv[1][0] + inv[1][1]);
        let var = 1.0 - quad;
        assert_relative_eq!(post.mean[0], mean, epsilon = 1e-12);
        assert_relative_eq!(post.cov[(0, 0)], var, epsilon = 1e-12);
    }

    #[test]
    fn lml_unit_scalar_cases() {
        // n=1, k+sn2=1, y=0: -0.5 ln(2 pi).
        let mut p1 = KernelParams::rbf(1, 1.0);
        p1.log_signal_variance = 0.5f64.ln();
        p1.log_noise_variance = 0.5f64.ln();
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let lml = log_marginal_likelihood(&p1, &x, &DVector::from_vec(vec![0.0])).unwrap();
        assert_relative_eq!(lml, -0.918939, max_relative = 1e-6);

        // n=1, k+sn2=2, y=1: -1/4 - ln(2)/2 - ln(2 pi)/2.
        let p2 = KernelParams::rbf(1, 1.0);
        let lml = log_marginal_likelihood(&p2, &x, &DVector::from_vec(vec![1.0])).unwrap();
        assert_relative_eq!(lml, -1.515512, max_relative = 1e-6);
    }

    #[test]
    fn lml_matches_naive_dense_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let p = KernelParams {
            family: KernelFamily::Rbf,
            log_lengthscales: DVector::from_vec(vec![0.2]),
            log_signal_variance: 0.4,
            log_noise_variance: -1.2,
        };
        let x = DMatrix::from_fn(3, 1, |_, _| rng.random::<f64>() * 3.0);
        let y = DVector::from_fn(3, |_, _| rng.random::<f64>() - 0.5);
        let lml = log_marginal_likelihood(&p, &x, &y).unwrap();

        let mut ky = kernel_matrix(&p, &x, &x).unwrap();
        for i in 0..3 {
            ky[(i, i)] += p.noise_variance();
        }
        let inv = ky.clone().try_inverse().unwrap();
        let naive = -0.5 * (y.transpose() * inv * &y)[(0, 0)]
            - 0.5 * ky.determinant().ln()
            - 1.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lml - naive).abs() < 1e-10);
    }

    #[test]
    fn posterior_variance_never_exceeds_prior() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let p = KernelParams::rbf(1, 0.05);
        let x = DMatrix::from_fn(8, 1, |_, _| rng.random::<f64>() * 5.0);
        let y = DVector::from_fn(8, |_, _| rng.random::<f64>());
        let xs = DMatrix::from_fn(20, 1, |_, _| rng.random::<f64>() * 6.0 - 0.5);
        let post = gp_posterior(&p, &x, &y, &xs).unwrap();
        for j in 0..20 {
            assert!(post.cov[(j, j)] <= p.signal_variance() + 1e-12);
        }
    }

    #[test]
    fn noise_to_zero_recovers_targets() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut p = KernelParams::rbf(1, 1.0);
        p.log_noise_variance = (1e-10f64).ln();
        let x = DMatrix::from_fn(6, 1, |i, _| i as f64 * 0.8 + rng.random::<f64>() * 0.1);
        let y = DVector::from_fn(6, |i, _| (i as f64).sin());
        let post = gp_posterior(&p, &x, &y, &x).unwrap();
        for i in 0..6 {
            assert!((post.mean[i] - y[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn diag_fast_path_agrees_with_full() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let p = KernelParams::rbf(2, 0.2);
        let x = DMatrix::from_fn(7, 2, |_, _| rng.random::<f64>() * 2.0);
        let y = DVector::from_fn(7, |_, _| rng.random::<f64>());
        let xs = DMatrix::from_fn(5, 2, |_, _| rng.random::<f64>() * 2.0);
        let full = gp_posterior(&p, &x, &y, &xs).unwrap();
        let (mean, var) = gp_posterior_diag(&p, &x, &y, &xs).unwrap();
        assert_relative_eq!(mean, full.mean, epsilon = 1e-12);
        assert_relative_eq!(var, full.variances(), epsilon = 1e-12);
    }

    #[test]
    fn lml_grad_matches_central_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let p = KernelParams {
            family: KernelFamily::Rbf,
            log_lengthscales: DVector::from_vec(vec![0.3, -0.1]),
            log_signal_variance: 0.2,
            log_noise_variance: -1.5,
        };
        let x = DMatrix::from_fn(9, 2, |_, _| rng.random::<f64>() * 3.0);
        let y = DVector::from_fn(9, |_, _| rng.random::<f64>() - 0.5);
        let (_, grad) = log_marginal_likelihood_grad(&p, &x, &y).unwrap();

        let h = 1e-5;
        let perturb = |idx: usize, delta: f64| -> KernelParams {
            let mut q = p.clone();
            match idx {
                0 | 1 => q.log_lengthscales[idx] += delta,
                2 => q.log_signal_variance += delta,
                _ => q.log_noise_variance += delta,
            }
            q
        };
        for idx in 0..4 {
            let hi = log_marginal_likelihood(&perturb(idx, h), &x, &y).unwrap();
            let lo = log_marginal_likelihood(&perturb(idx, -h), &x, &y).unwrap();
            let fd = (hi - lo) / (2.0 * h);
            let rel = (grad[idx] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "param {idx}: analytic {} vs fd {fd}", grad[idx]);
        }
    }

    #[test]
    fn empty_training_set_is_input_error() {
        let p = KernelParams::rbf(1, 0.1);
        let x = DMatrix::<f64>::zeros(0, 1);
        let y = DVector::<f64>::zeros(0);
        assert!(matches!(
            log_marginal_likelihood(&p, &x, &y),
            Err(Error::Input(_))
        ));
    }
}
