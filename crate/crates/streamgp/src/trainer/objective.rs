//! Objective evaluation for the online step.
//!
//! Two implementations of the same quantities exist on purpose:
//!
//! - a plain-f64 path assembled from the public module operations
//!   (`streaming::predictive_diag`, `streaming::kl_new_old`,
//!   `pacbayes::train_objective`), used for reports and as the finite-
//!   difference reference;
//! - a tape path ([`objective_grad`]) that rebuilds the same computation on
//!   the reverse-mode tape and returns all parameter gradients in one sweep.
//!
//! Their forward values agree to roundoff; the gradient contract (tape vs
//! central differences of the f64 path) is enforced in tests and in the
//! acceptance suite.

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{softplus, softplus_inv, Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::kernels::{psd_cholesky, KernelFamily, KernelParams, JITTER_LEVELS};
use crate::pacbayes::{self, BoundReport, LossKind, LossSpec};
use crate::streaming::{gaussian_kl, predictive, predictive_diag, whiten, PriorSnapshot, VariationalState};

use super::Objective;

/// Flat parameter layout:
/// `[log_lengthscales (D) | log_sf2 | log_sn2 | Z (M*D row-major) | m_w (M) |
///   whitened S factor lower triangle (M(M+1)/2, diagonal via inverse
///   softplus)]`.
///
/// The variational block is optimized in WHITENED coordinates against the
/// state's own `K_ZZ = L L^T`: `m_w = L^-1 m_u`, `S_wf = L^-1 S_factor`.
/// Predictions are inner products of whitened quantities and stay uniformly
/// bounded, so moving inducing points cannot blow the predictive up even when
/// `K_ZZ` is nearly singular. The stored state remains unwhitened.
#[derive(Debug, Clone, Copy)]
pub struct FlatLayout {
    pub d: usize,
    pub m: usize,
}

impl FlatLayout {
    pub fn of(state: &VariationalState) -> Self {
        FlatLayout {
            d: state.dim(),
            m: state.num_inducing(),
        }
    }

    pub fn n_hyper(&self) -> usize {
        self.d + 2
    }

    pub fn n_params(&self) -> usize {
        self.d + 2 + self.m * self.d + self.m + self.m * (self.m + 1) / 2
    }

    pub fn flatten(&self, state: &VariationalState) -> Result<Vec<f64>> {
        let white = whiten(state)?;
        let mut out = Vec::with_capacity(self.n_params());
        out.extend(state.params.log_lengthscales.iter());
        out.push(state.params.log_signal_variance);
        out.push(state.params.log_noise_variance);
        for i in 0..self.m {
            for j in 0..self.d {
                out.push(state.z[(i, j)]);
            }
        }
        out.extend(white.m_w.iter());
        for i in 0..self.m {
            for j in 0..=i {
                if i == j {
                    out.push(softplus_inv(white.s_wf[(i, i)]));
                } else {
                    out.push(white.s_wf[(i, j)]);
                }
            }
        }
        Ok(out)
    }

    pub fn unflatten(&self, flat: &[f64]) -> Result<VariationalState> {
        if flat.len() != self.n_params() {
            return Err(Error::input(format!(
                "flat parameter vector has {} entries, layout needs {}",
                flat.len(),
                self.n_params()
            )));
        }
        let (d, m) = (self.d, self.m);
        let log_lengthscales = DVector::from_column_slice(&flat[..d]);
        let log_signal_variance = flat[d];
        let log_noise_variance = flat[d + 1];
        let mut off = d + 2;
        let z = DMatrix::from_fn(m, d, |i, j| flat[off + i * d + j]);
        off += m * d;
        let m_w = DVector::from_column_slice(&flat[off..off + m]);
        off += m;
        let mut s_wf = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                let v = flat[off];
                off += 1;
                s_wf[(i, j)] = if i == j { softplus(v) } else { v };
            }
        }
        let params = KernelParams {
            family: KernelFamily::Rbf,
            log_lengthscales,
            log_signal_variance,
            log_noise_variance,
        };
        let kzz = crate::kernels::kernel_matrix(&params, &z, &z)?;
        let chol = crate::kernels::psd_cholesky(kzz)?;
        let m_u = chol.l() * m_w;
        let s_factor = chol.l() * s_wf;
        let state = VariationalState {
            z,
            m_u,
            s_factor,
            params,
        };
        state.validate()?;
        Ok(state)
    }

    /// Per-coordinate learning rates: `lr_hyper` for the kernel block,
    /// `lr_variational` for Z, m_u and the S factor.
    pub fn lr_vector(&self, lr_hyper: f64, lr_variational: f64) -> Vec<f64> {
        let mut lr = vec![lr_variational; self.n_params()];
        for r in lr.iter_mut().take(self.n_hyper()) {
            *r = lr_hyper;
        }
        lr
    }
}

/// Everything an objective evaluation needs besides the state.
pub struct ObjectiveInputs<'a> {
    pub objective: Objective,
    pub batch: &'a Batch,
    pub prior: &'a PriorSnapshot,
    /// KL evaluation locations, frozen for the duration of one optimization
    /// iteration so the objective stays differentiable in Z.
    pub eval_points: &'a DMatrix<f64>,
    pub lambda: f64,
    pub delta: f64,
    pub m_count: u64,
    pub loss: &'a LossSpec,
}

/// The KL anchor actually optimized: the Gaussian KL between the two
/// OBSERVATION processes at the eval points, i.e. each side's predictive
/// covariance plus its own noise variance on the diagonal.
///
/// The latent-marginal KL ([`kl_new_old`]) is untrainable here: inducing
/// inputs cluster inside the pretrain slice, the latent eval covariance turns
/// numerically singular, and its inverse amplifies roundoff into garbage
/// gradients. Smoothing both sides by their observation noise bounds the
/// inverse by 1/sn2 (a data-processing lower bound of the same process KL).
pub fn observed_kl(
    state: &VariationalState,
    prior: &PriorSnapshot,
    eval_points: &DMatrix<f64>,
) -> Result<f64> {
    let mut q = predictive(state, eval_points)?;
    let mut p = predictive(prior.state(), eval_points)?;
    let qn = state.params.noise_variance();
    let pn = prior.state().params.noise_variance();
    for i in 0..eval_points.nrows() {
        q.cov[(i, i)] += qn;
        p.cov[(i, i)] += pn;
    }
    gaussian_kl(&q, &p)
}

/// Negative log predictive likelihood of the batch plus the KL anchor; the
/// baseline streaming objective (observation noise added to the predictive
/// variance).
fn baseline_value(state: &VariationalState, inputs: &ObjectiveInputs) -> Result<f64> {
    let (mean, var) = predictive_diag(state, &inputs.batch.x)?;
    let sn2 = state.params.noise_variance();
    let mut nll = 0.0;
    for i in 0..inputs.batch.len() {
        let v = var[i] + sn2;
        let d = inputs.batch.y[i] - mean[i];
        nll += 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + d * d / v);
    }
    let kl = observed_kl(state, inputs.prior, inputs.eval_points)?;
    Ok(nll + kl)
}

/// The PAC-Bayes train-bound decomposition at the current state (module
/// path). This is also the per-step report for baseline runs.
pub fn objective_report(state: &VariationalState, inputs: &ObjectiveInputs) -> Result<BoundReport> {
    let (mean, var) = predictive_diag(state, &inputs.batch.x)?;
    let preds: Vec<(f64, f64, f64)> = (0..inputs.batch.len())
        .map(|i| (inputs.batch.y[i], mean[i], var[i]))
        .collect();
    let kl = observed_kl(state, inputs.prior, inputs.eval_points)?;
    pacbayes::train_objective(&preds, kl, inputs.m_count, inputs.lambda, inputs.delta, inputs.loss)
}

/// Scalar objective value along the independent f64 path.
pub fn objective_value(state: &VariationalState, inputs: &ObjectiveInputs) -> Result<f64> {
    match inputs.objective {
        Objective::PacBayes => Ok(objective_report(state, inputs)?.total),
        Objective::BaselineNll => baseline_value(state, inputs),
    }
}

/// Central finite differences of `objective` at `params`.
pub fn finite_diff_grad<F>(mut objective: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut grad = Vec::with_capacity(params.len());
    let mut work = params.to_vec();
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + step;
        let hi = objective(&work)?;
        work[i] = orig - step;
        let lo = objective(&work)?;
        work[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::numerical(format!(
                "finite differences met a non-finite objective at coordinate {i}"
            )));
        }
        grad.push((hi - lo) / (2.0 * step));
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Tape path
// ---------------------------------------------------------------------------

struct AdParams {
    inv_ls: Vec<Var>,
    sf2: Var,
    log_sn2: Var,
    z: Vec<Var>,
    /// Whitened variational mean.
    m_w: Vec<Var>,
    /// Whitened S factor, lower-triangular rows; diagonal already
    /// softplus-transformed.
    s_wf: Vec<Vec<Var>>,
    d: usize,
    m: usize,
}

fn unpack(tape: &mut Tape, vars: &[Var], layout: FlatLayout) -> AdParams {
    let (d, m) = (layout.d, layout.m);
    let inv_ls = (0..d)
        .map(|i| {
            let neg = tape.neg(vars[i]);
            tape.exp(neg)
        })
        .collect();
    let sf2 = tape.exp(vars[d]);
    let log_sn2 = vars[d + 1];
    let mut off = d + 2;
    let z = vars[off..off + m * d].to_vec();
    off += m * d;
    let m_w = vars[off..off + m].to_vec();
    off += m;
    let mut s_wf = Vec::with_capacity(m);
    for i in 0..m {
        let mut row = Vec::with_capacity(i + 1);
        for j in 0..=i {
            let raw = vars[off];
            off += 1;
            row.push(if i == j { tape.softplus(raw) } else { raw });
        }
        s_wf.push(row);
    }
    AdParams {
        inv_ls,
        sf2,
        log_sn2,
        z,
        m_w,
        s_wf,
        d,
        m,
    }
}

fn kernel_entry(tape: &mut Tape, p: &AdParams, a: &[Var], b: &[Var]) -> Var {
    let mut acc = tape.input(0.0);
    for dim in 0..p.d {
        let diff = tape.sub(a[dim], b[dim]);
        let scaled = tape.mul(diff, p.inv_ls[dim]);
        let sq = tape.square(scaled);
        acc = tape.add(acc, sq);
    }
    let e = tape.mul_scalar(acc, -0.5);
    let ex = tape.exp(e);
    tape.mul(p.sf2, ex)
}

/// Tape Cholesky with the shared jitter ladder; the level is chosen by a
/// probe running the identical scalar loop over the node values, so the tape
/// never hits a negative pivot and always matches the module factorization.
fn ad_cholesky(tape: &mut Tape, a: &[Vec<Var>]) -> Result<Vec<Vec<Var>>> {
    let n = a.len();
    let vals = DMatrix::from_fn(n, n, |i, j| tape.val(a[i][j]));
    let scale = crate::kernels::jitter_scale(&vals);
    let pivot_floor = crate::kernels::PIVOT_FLOOR_REL * scale;
    let level = JITTER_LEVELS
        .iter()
        .copied()
        .find(|lvl| crate::kernels::scalar_cholesky(&vals, lvl * scale, pivot_floor).is_some())
        .ok_or_else(|| {
            Error::numerical(format!(
                "tape cholesky failed at all jitter levels {JITTER_LEVELS:?}"
            ))
        })?;

    let mut work: Vec<Vec<Var>> = a.to_vec();
    if level > 0.0 {
        let diag: Vec<Var> = (0..n).map(|i| a[i][i]).collect();
        let diag_sum = tape.sum(&diag);
        let mean = tape.mul_scalar(diag_sum, 1.0 / n as f64);
        let jit = tape.mul_scalar(mean, level);
        for (i, row) in work.iter_mut().enumerate() {
            row[i] = tape.add(row[i], jit);
        }
    }

    // rows[i] accumulates [L_i0, ..., L_ii] as columns complete left to right.
    let mut rows: Vec<Vec<Var>> = vec![Vec::new(); n];
    for j in 0..n {
        let mut diag = work[j][j];
        for k in 0..j {
            let sq = tape.square(rows[j][k]);
            diag = tape.sub(diag, sq);
        }
        let pivot = tape.sqrt(diag);
        rows[j].push(pivot);
        for i in (j + 1)..n {
            let mut v = work[i][j];
            for k in 0..j {
                let prod = tape.mul(rows[i][k], rows[j][k]);
                v = tape.sub(v, prod);
            }
            let e = tape.div(v, pivot);
            rows[i].push(e);
        }
    }
    Ok(rows)
}

fn solve_lower(tape: &mut Tape, l: &[Vec<Var>], b: &[Var]) -> Vec<Var> {
    let n = b.len();
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            let prod = tape.mul(l[i][k], y[k]);
            v = tape.sub(v, prod);
        }
        y.push(tape.div(v, l[i][i]));
    }
    y
}

fn phi(tape: &mut Tape, z: Var) -> Var {
    let scaled = tape.mul_scalar(z, std::f64::consts::FRAC_1_SQRT_2);
    let e = tape.erf(scaled);
    let shifted = tape.add_scalar(e, 1.0);
    tape.mul_scalar(shifted, 0.5)
}

fn pdf(tape: &mut Tape, z: Var) -> Var {
    let sq = tape.square(z);
    let e = tape.mul_scalar(sq, -0.5);
    let ex = tape.exp(e);
    tape.mul_scalar(ex, 1.0 / (2.0 * std::f64::consts::PI).sqrt())
}

fn expected_loss_ad(tape: &mut Tape, spec: &LossSpec, y: f64, mean: Var, var: Var) -> Var {
    let eps = spec.epsilon;
    let eps2 = eps * eps;
    match spec.kind {
        LossKind::Exp => {
            let d = tape.scalar_sub(y, mean);
            let ratio = tape.mul_scalar(var, 2.0 / eps2);
            let ratio1 = tape.add_scalar(ratio, 1.0);
            let root = tape.sqrt(ratio1);
            let coef = tape.recip(root);
            let two_v = tape.mul_scalar(var, 2.0);
            let den = tape.add_scalar(two_v, eps2);
            let dsq = tape.square(d);
            let frac = tape.div(dsq, den);
            let nfrac = tape.neg(frac);
            let ex = tape.exp(nfrac);
            let prod = tape.mul(coef, ex);
            tape.scalar_sub(1.0, prod)
        }
        LossKind::Indicator | LossKind::Interval => {
            let (below, above) = match spec.kind {
                LossKind::Indicator => (eps, eps),
                _ => (spec.interval_below, spec.interval_above),
            };
            let sd = tape.sqrt(var);
            let lo_num = tape.scalar_sub(y - below, mean);
            let hi_num = tape.scalar_sub(y + above, mean);
            let zlo = tape.div(lo_num, sd);
            let zhi = tape.div(hi_num, sd);
            let phi_lo = phi(tape, zlo);
            let phi_hi = phi(tape, zhi);
            let upper = tape.scalar_sub(1.0, phi_hi);
            tape.add(phi_lo, upper)
        }
        LossKind::ClippedSquare => {
            let sd = tape.sqrt(var);
            let d = tape.scalar_sub(y, mean);
            let a_num = tape.add_scalar(d, -eps);
            let b_num = tape.add_scalar(d, eps);
            let alpha = tape.div(a_num, sd);
            let beta = tape.div(b_num, sd);
            let phi_a = phi(tape, alpha);
            let phi_b = phi(tape, beta);
            let band = tape.sub(phi_b, phi_a);
            let dsq = tape.square(d);
            let num = tape.add(dsq, var);
            let coef = tape.mul_scalar(num, 1.0 / eps2);
            let ramp = tape.mul(coef, band);
            let pdf_a = pdf(tape, alpha);
            let pdf_b = pdf(tape, beta);
            let t1 = tape.mul(a_num, pdf_b);
            let t2 = tape.mul(b_num, pdf_a);
            let tdiff = tape.sub(t1, t2);
            let sd_scaled = tape.mul_scalar(sd, 1.0 / eps2);
            let tail = tape.mul(sd_scaled, tdiff);
            let outside = tape.scalar_sub(1.0, phi_b);
            let acc = tape.add(ramp, phi_a);
            let acc = tape.add(acc, outside);
            tape.add(acc, tail)
        }
    }
}

/// Predictive solves shared between the batch marginals and the KL covariance
/// (everything in whitened coordinates).
struct AdPredictive {
    /// `a = L^-1 k_Z(x)` per point.
    a_cols: Vec<Vec<Var>>,
    /// `S_wf^T a` per point.
    w_cols: Vec<Vec<Var>>,
    means: Vec<Var>,
}

fn ad_predictive(
    tape: &mut Tape,
    p: &AdParams,
    l_zz: &[Vec<Var>],
    points: &DMatrix<f64>,
) -> AdPredictive {
    let m = p.m;
    let n = points.nrows();
    let mut out = AdPredictive {
        a_cols: Vec::with_capacity(n),
        w_cols: Vec::with_capacity(n),
        means: Vec::with_capacity(n),
    };
    for idx in 0..n {
        let coords: Vec<Var> = (0..p.d).map(|j| tape.input(points[(idx, j)])).collect();
        let kz: Vec<Var> = (0..m)
            .map(|i| {
                let zi: Vec<Var> = (0..p.d).map(|j| p.z[i * p.d + j]).collect();
                kernel_entry(tape, p, &zi, &coords)
            })
            .collect();
        let a = solve_lower(tape, l_zz, &kz);
        let mut w = Vec::with_capacity(m);
        for j in 0..m {
            let terms: Vec<Var> = (j..m).map(|i| tape.mul(p.s_wf[i][j], a[i])).collect();
            w.push(tape.sum(&terms));
        }
        let mean = tape.dot(&a, &p.m_w);
        out.a_cols.push(a);
        out.w_cols.push(w);
        out.means.push(mean);
    }
    out
}

fn ad_variance(tape: &mut Tape, p: &AdParams, pred: &AdPredictive, idx: usize) -> Var {
    let aa = {
        let a = &pred.a_cols[idx];
        tape.dot(&a.clone(), &a.clone())
    };
    let ww = {
        let w = &pred.w_cols[idx];
        tape.dot(&w.clone(), &w.clone())
    };
    let base = tape.sub(p.sf2, aa);
    let v = tape.add(base, ww);
    tape.max_const(v, crate::streaming::VARIANCE_FLOOR)
}

/// Builds the chosen objective on the tape and returns its value together
/// with the gradient with respect to the flat parameter vector.
pub fn objective_grad(
    state: &VariationalState,
    inputs: &ObjectiveInputs,
) -> Result<(f64, Vec<f64>)> {
    let layout = FlatLayout::of(state);
    let flat = layout.flatten(state)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = flat.iter().map(|v| tape.input(*v)).collect();
    let p = unpack(&mut tape, &vars, layout);

    // K_ZZ and its factor.
    let m = p.m;
    let mut kzz: Vec<Vec<Var>> = vec![Vec::with_capacity(m); m];
    for i in 0..m {
        for j in 0..m {
            let entry = if j < i {
                kzz[j][i]
            } else {
                let zi: Vec<Var> = (0..p.d).map(|dd| p.z[i * p.d + dd]).collect();
                let zj: Vec<Var> = (0..p.d).map(|dd| p.z[j * p.d + dd]).collect();
                kernel_entry(&mut tape, &p, &zi, &zj)
            };
            kzz[i].push(entry);
        }
    }
    let l_zz = ad_cholesky(&mut tape, &kzz)?;

    // Batch marginals and the empirical / likelihood term.
    let batch_pred = ad_predictive(&mut tape, &p, &l_zz, &inputs.batch.x);
    let data_term = match inputs.objective {
        Objective::PacBayes => {
            let mut terms = Vec::with_capacity(inputs.batch.len());
            for i in 0..inputs.batch.len() {
                let var = ad_variance(&mut tape, &p, &batch_pred, i);
                terms.push(expected_loss_ad(
                    &mut tape,
                    inputs.loss,
                    inputs.batch.y[i],
                    batch_pred.means[i],
                    var,
                ));
            }
            tape.sum(&terms)
        }
        Objective::BaselineNll => {
            let sn2 = tape.exp(p.log_sn2);
            let mut terms = Vec::with_capacity(inputs.batch.len());
            for i in 0..inputs.batch.len() {
                let var = ad_variance(&mut tape, &p, &batch_pred, i);
                let v = tape.add(var, sn2);
                let scaled = tape.mul_scalar(v, 2.0 * std::f64::consts::PI);
                let logv = tape.ln(scaled);
                let d = tape.scalar_sub(inputs.batch.y[i], batch_pred.means[i]);
                let dsq = tape.square(d);
                let quad = tape.div(dsq, v);
                let sum = tape.add(logv, quad);
                terms.push(tape.mul_scalar(sum, 0.5));
            }
            tape.sum(&terms)
        }
    };

    // KL(new || snapshot) at the frozen eval points, in whitened form:
    // A = L_p^-1 Sigma_q L_p^-T, b = L_p^-1 (mu_p - mu_q),
    // KL = 1/2 (tr A + |b|^2 - k - log det A). The snapshot side is
    // parameter-free, so L_p^-1 enters as a constant matrix; A stays near the
    // identity when the state is near the snapshot, which keeps both the
    // value and the gradient numerically stable.
    let e_pts = inputs.eval_points;
    let n_e = e_pts.nrows();
    let mut p_post = predictive(inputs.prior.state(), e_pts)?;
    let p_noise = inputs.prior.state().params.noise_variance();
    for i in 0..n_e {
        p_post.cov[(i, i)] += p_noise;
    }
    let p_chol = psd_cholesky(p_post.cov.clone())?;
    let inv_lp = p_chol.solve_lower(&DMatrix::identity(n_e, n_e));
    let q_noise = tape.exp(p.log_sn2);

    let eval_pred = ad_predictive(&mut tape, &p, &l_zz, e_pts);
    let mut cov_q: Vec<Vec<Var>> = vec![Vec::with_capacity(n_e); n_e];
    for r in 0..n_e {
        for c in 0..n_e {
            let entry = if c < r {
                cov_q[c][r]
            } else {
                let xr: Vec<Var> = (0..p.d).map(|j| tape.input(e_pts[(r, j)])).collect();
                let xc: Vec<Var> = (0..p.d).map(|j| tape.input(e_pts[(c, j)])).collect();
                let kee = kernel_entry(&mut tape, &p, &xr, &xc);
                let bb = tape.dot(&eval_pred.a_cols[r].clone(), &eval_pred.a_cols[c].clone());
                let ww = tape.dot(&eval_pred.w_cols[r].clone(), &eval_pred.w_cols[c].clone());
                let part = tape.sub(kee, bb);
                let latent = tape.add(part, ww);
                if r == c {
                    tape.add(latent, q_noise)
                } else {
                    latent
                }
            };
            cov_q[r].push(entry);
        }
    }

    // W = L_p^-1 Sigma_q (inv_lp is lower triangular: i <= r contribute).
    let mut w_rows: Vec<Vec<Var>> = Vec::with_capacity(n_e);
    for r in 0..n_e {
        let mut row = Vec::with_capacity(n_e);
        for j in 0..n_e {
            let terms: Vec<Var> = (0..=r)
                .map(|i| tape.mul_scalar(cov_q[i][j], inv_lp[(r, i)]))
                .collect();
            row.push(tape.sum(&terms));
        }
        w_rows.push(row);
    }
    // A = W L_p^-T.
    let mut a_mat: Vec<Vec<Var>> = Vec::with_capacity(n_e);
    for r in 0..n_e {
        let mut row = Vec::with_capacity(n_e);
        for c in 0..n_e {
            let terms: Vec<Var> = (0..=c)
                .map(|j| tape.mul_scalar(w_rows[r][j], inv_lp[(c, j)]))
                .collect();
            row.push(tape.sum(&terms));
        }
        a_mat.push(row);
    }

    let trace = {
        let diag: Vec<Var> = (0..n_e).map(|i| a_mat[i][i]).collect();
        tape.sum(&diag)
    };
    let bnorm = {
        let diffs: Vec<Var> = (0..n_e)
            .map(|r| tape.scalar_sub(p_post.mean[r], eval_pred.means[r]))
            .collect();
        let mut entries = Vec::with_capacity(n_e);
        for r in 0..n_e {
            let terms: Vec<Var> = (0..=r)
                .map(|i| tape.mul_scalar(diffs[i], inv_lp[(r, i)]))
                .collect();
            entries.push(tape.sum(&terms));
        }
        tape.dot(&entries.clone(), &entries)
    };
    let l_a = ad_cholesky(&mut tape, &a_mat)?;
    let a_logdet = {
        let logs: Vec<Var> = (0..n_e).map(|i| tape.ln(l_a[i][i])).collect();
        let s = tape.sum(&logs);
        tape.mul_scalar(s, 2.0)
    };
    let kl = {
        let tb = tape.add(trace, bnorm);
        let shifted = tape.add_scalar(tb, -(n_e as f64));
        let diff = tape.sub(shifted, a_logdet);
        tape.mul_scalar(diff, 0.5)
    };

    let out = match inputs.objective {
        Objective::PacBayes => {
            let lam = tape.input(inputs.lambda);
            let kl_term = tape.div(kl, lam);
            let constant = tape.input(pacbayes::constant_term(
                inputs.m_count,
                inputs.lambda,
                inputs.delta,
                inputs.loss.ceiling_k,
            ));
            let partial = tape.add(data_term, kl_term);
            tape.add(partial, constant)
        }
        Objective::BaselineNll => tape.add(data_term, kl),
    };

    let value = tape.val(out);
    if !value.is_finite() {
        return Err(Error::numerical(format!("objective evaluated to {value}")));
    }
    let adj = tape.gradient(out);
    let grad: Vec<f64> = (0..layout.n_params()).map(|i| adj[i]).collect();
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numerical("non-finite gradient".to_string()));
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Batch;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn test_state(seed: u64, m: usize) -> VariationalState {
        // Spread inducing inputs (jittered grid) keep K_ZZ well conditioned.
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let z = DMatrix::from_fn(m, 1, |i, _| {
            i as f64 * 4.0 / (m - 1) as f64 + 0.2 * (rng.random::<f64>() - 0.5)
        });
        let mut state = VariationalState::prior(z, KernelParams::rbf(1, 0.1)).unwrap();
        state.m_u = DVector::from_fn(m, |_, _| rng.random::<f64>() - 0.5);
        state.params.log_signal_variance = 0.2;
        state.params.log_lengthscales[0] = -0.3;
        state
    }

    fn test_batch(seed: u64, n: usize) -> Batch {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Batch {
            x: DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>() * 4.0),
            y: DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0),
        }
    }

    // A state one small optimizer step away from the snapshot, which is the
    // regime the gradient contract covers.
    fn perturbed(state: &VariationalState) -> VariationalState {
        let mut s = state.clone();
        s.m_u[0] += 2e-3;
        s.params.log_signal_variance += 1e-3;
        s.z[(1, 0)] += 3e-3;
        s.params.log_lengthscales[0] -= 1e-3;
        s
    }

    #[test]
    fn flatten_round_trip() {
        let state = test_state(1, 5);
        let layout = FlatLayout::of(&state);
        let flat = layout.flatten(&state).unwrap();
        assert_eq!(flat.len(), layout.n_params());
        let back = layout.unflatten(&flat).unwrap();
        assert_relative_eq!(back.z, state.z, epsilon = 1e-14);
        // Whiten/unwhiten round trip is exact only up to the conditioning of
        // the K_ZZ factor.
        assert_relative_eq!(back.m_u, state.m_u, epsilon = 1e-9);
        assert_relative_eq!(back.s_factor, state.s_factor, max_relative = 1e-8, epsilon = 1e-9);
        assert_eq!(back.params.log_signal_variance, state.params.log_signal_variance);
    }

    #[test]
    fn tape_forward_matches_module_path() {
        let base = test_state(2, 5);
        let prior = base.snapshot(0);
        let state = perturbed(&base);
        let batch = test_batch(3, 4);
        let eval = prior.state().z.clone();
        let spec = LossSpec::default_exp();

        for objective in [Objective::PacBayes, Objective::BaselineNll] {
            let inputs = ObjectiveInputs {
                objective,
                batch: &batch,
                prior: &prior,
                eval_points: &eval,
                lambda: 0.05,
                delta: 0.05,
                m_count: 20,
                loss: &spec,
            };
            let module_value = objective_value(&state, &inputs).unwrap();
            let (tape_value, _) = objective_grad(&state, &inputs).unwrap();
            assert_relative_eq!(tape_value, module_value, max_relative = 1e-9);
        }
    }

    #[test]
    fn tape_forward_matches_module_path_all_loss_kinds() {
        let base = test_state(7, 4);
        let prior = base.snapshot(0);
        let state = perturbed(&base);
        let batch = test_batch(8, 3);
        let eval = prior.state().z.clone();
        for kind in [
            LossKind::Indicator,
            LossKind::ClippedSquare,
            LossKind::Exp,
            LossKind::Interval,
        ] {
            let spec = LossSpec::new(kind, 0.3).unwrap();
            let inputs = ObjectiveInputs {
                objective: Objective::PacBayes,
                batch: &batch,
                prior: &prior,
                eval_points: &eval,
                lambda: 0.1,
                delta: 0.1,
                m_count: 15,
                loss: &spec,
            };
            let module_value = objective_value(&state, &inputs).unwrap();
            let (tape_value, _) = objective_grad(&state, &inputs).unwrap();
            assert_relative_eq!(tape_value, module_value, max_relative = 1e-8);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let base = test_state(4, 4);
        let prior = base.snapshot(0);
        let state = perturbed(&base);
        let batch = test_batch(5, 3);
        let eval = prior.state().z.clone();
        let spec = LossSpec::default_exp();
        let layout = FlatLayout::of(&state);

        for objective in [Objective::PacBayes, Objective::BaselineNll] {
            let inputs = ObjectiveInputs {
                objective,
                batch: &batch,
                prior: &prior,
                eval_points: &eval,
                lambda: 0.07,
                delta: 0.05,
                m_count: 12,
                loss: &spec,
            };
            let (_, ad_grad) = objective_grad(&state, &inputs).unwrap();
            let fd_grad = finite_diff_grad(
                |flat| {
                    let s = layout.unflatten(flat)?;
                    objective_value(&s, &inputs)
                },
                &layout.flatten(&state).unwrap(),
                1e-5,
            )
            .unwrap();
            let scale = fd_grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
            for (i, (a, f)) in ad_grad.iter().zip(&fd_grad).enumerate() {
                let tol = 1e-4 * a.abs().max(f.abs()).max(1e-6 * scale);
                assert!(
                    (a - f).abs() <= tol,
                    "{objective:?} coord {i}: tape {a} vs fd {f}"
                );
            }
        }
    }

    #[test]
    fn linear_objective_finite_differences_exact() {
        let a = [2.0, -3.0, 0.5];
        let grad = finite_diff_grad(
            |x| Ok(a.iter().zip(x).map(|(ai, xi)| ai * xi).sum::<f64>()),
            &[0.3, 0.4, -0.1],
            1e-5,
        )
        .unwrap();
        for (g, ai) in grad.iter().zip(&a) {
            assert!((g - ai).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_diff_rejects_non_finite() {
        let err = finite_diff_grad(|x| Ok(1.0 / (x[0] - x[0])), &[1.0], 1e-5).unwrap_err();
        assert!(err.is_numerical());
    }
}
