//! The sparse streaming GP state: inducing inputs with a variational Gaussian
//! over their function values, the predictive distribution it induces, frozen
//! prior snapshots for the online bound, and the Gaussian KL between the
//! updated and snapshot posteriors.
//!
//! Memory is O(M^2 + M*D) regardless of how much data has streamed past; the
//! binary state dump has a fixed size for fixed `(M, D)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exact::GaussianPosterior;
use crate::kernels::{kernel_matrix, psd_cholesky, KernelFamily, KernelParams};

/// Inducing inputs `Z`, variational Gaussian `q(u) = N(m_u, S)` with
/// `S = s_factor * s_factor^T`, and the kernel hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    /// M x D inducing inputs.
    pub z: DMatrix<f64>,
    /// Length-M variational mean.
    pub m_u: DVector<f64>,
    /// M x M lower-triangular factor with strictly positive diagonal.
    pub s_factor: DMatrix<f64>,
    pub params: KernelParams,
}

impl VariationalState {
    pub fn num_inducing(&self) -> usize {
        self.z.nrows()
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    /// Variational covariance `S = s_factor * s_factor^T`.
    pub fn s(&self) -> DMatrix<f64> {
        &self.s_factor * self.s_factor.transpose()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_inducing();
        if m == 0 {
            return Err(Error::input("variational state needs at least one inducing point"));
        }
        if self.m_u.len() != m || self.s_factor.nrows() != m || self.s_factor.ncols() != m {
            return Err(Error::input(format!(
                "variational state dims disagree: Z has {m} rows, m_u {}, S_factor {}x{}",
                self.m_u.len(),
                self.s_factor.nrows(),
                self.s_factor.ncols()
            )));
        }
        if self.z.ncols() != self.params.dim() {
            return Err(Error::input(format!(
                "inducing dimension {} does not match kernel dimension {}",
                self.z.ncols(),
                self.params.dim()
            )));
        }
        for i in 0..m {
            if self.s_factor[(i, i)] <= 0.0 {
                return Err(Error::input(format!(
                    "S_factor diagonal entry {i} is {} (must be > 0)",
                    self.s_factor[(i, i)]
                )));
            }
            for j in (i + 1)..m {
                if self.s_factor[(i, j)] != 0.0 {
                    return Err(Error::input("S_factor must be lower triangular"));
                }
            }
        }
        self.params.validate()
    }

    /// The uninformative state at `z`: `m_u = 0`, `S = K_ZZ` (the predictive
    /// then reproduces the GP prior).
    pub fn prior(z: DMatrix<f64>, params: KernelParams) -> Result<Self> {
        let kzz = kernel_matrix(&params, &z, &z)?;
        let chol = psd_cholesky(kzz)?;
        let m = z.nrows();
        let state = VariationalState {
            z,
            m_u: DVector::zeros(m),
            s_factor: chol.l().clone(),
            params,
        };
        state.validate()?;
        Ok(state)
    }

    /// Sets `q(u)` to the optimal sparse posterior conditioned on `(x, y)`
    /// with the current inducing inputs and hyperparameters:
    /// `Sigma = (K_ZZ + sn^-2 K_ZX K_XZ)^-1`, `S = K_ZZ Sigma K_ZZ`,
    /// `m_u = sn^-2 K_ZZ Sigma K_ZX y`. With `Z = X` this reproduces the
    /// exact GP posterior at the training inputs.
    pub fn condition_on(&mut self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
        if x.nrows() != y.len() || x.nrows() == 0 {
            return Err(Error::input("condition_on: empty or inconsistent data"));
        }
        let kzz = kernel_matrix(&self.params, &self.z, &self.z)?;
        let kzx = kernel_matrix(&self.params, &self.z, x)?;
        let sn2 = self.params.noise_variance();
        let b = &kzz + &kzx * kzx.transpose() / sn2;
        let b_chol = psd_cholesky(b)?;
        // S = K_ZZ B^-1 K_ZZ = W^T W with W = L_B^-1 K_ZZ.
        let w = b_chol.solve_lower(&kzz);
        let s = w.transpose() * &w;
        let rhs = DMatrix::from_column_slice(self.num_inducing(), 1, (&kzx * y).as_slice());
        let m_u = w.transpose() * b_chol.solve_lower(&rhs) / sn2;
        let s_chol = psd_cholesky(s)?;
        self.m_u = DVector::from_column_slice(m_u.as_slice());
        self.s_factor = s_chol.l().clone();
        Ok(())
    }

    /// Overwrites `q(u)` with an explicit Gaussian (mean and covariance at
    /// the inducing points).
    pub fn set_posterior(&mut self, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<()> {
        if mean.len() != self.num_inducing() || cov.nrows() != self.num_inducing() {
            return Err(Error::input("set_posterior: dimension mismatch"));
        }
        let chol = psd_cholesky(cov)?;
        self.m_u = mean;
        self.s_factor = chol.l().clone();
        Ok(())
    }

    /// Freezes a deep copy tagged with the step index.
    pub fn snapshot(&self, step: u64) -> PriorSnapshot {
        PriorSnapshot {
            state: self.clone(),
            step,
        }
    }
}

/// An immutable deep copy of a [`VariationalState`], used as the prior of the
/// next online PAC-Bayes step.
#[derive(Debug, Clone)]
pub struct PriorSnapshot {
    state: VariationalState,
    step: u64,
}

impl PriorSnapshot {
    pub fn state(&self) -> &VariationalState {
        &self.state
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Restores a mutable state equal to the snapshot.
    pub fn restore(&self) -> VariationalState {
        self.state.clone()
    }
}

/// Whitened view of a state against its own `K_ZZ` factor `L`:
/// `m_w = L^-1 m_u` and `S_wf = L^-1 S_factor`, so that predictions become
/// inner products with `a = L^-1 k_Z(x)` and stay uniformly bounded even when
/// `K_ZZ` is nearly singular (clustered inducing points).
pub(crate) struct Whitened {
    pub chol: crate::kernels::CovMatrix,
    pub m_w: DVector<f64>,
    pub s_wf: DMatrix<f64>,
}

pub(crate) fn whiten(state: &VariationalState) -> Result<Whitened> {
    let kzz = kernel_matrix(&state.params, &state.z, &state.z)?;
    let chol = psd_cholesky(kzz)?;
    let m = state.num_inducing();
    let m_w = DVector::from_column_slice(
        chol.solve_lower(&DMatrix::from_column_slice(m, 1, state.m_u.as_slice()))
            .as_slice(),
    );
    let s_wf = chol.solve_lower(&state.s_factor);
    Ok(Whitened { chol, m_w, s_wf })
}

/// Latent predictive distribution at `xs`:
/// mean `K_sZ K_ZZ^-1 m_u`,
/// cov `K_ss - K_sZ K_ZZ^-1 (K_ZZ - S) K_ZZ^-1 K_Zs`,
/// computed through the whitened factorization (`a = L^-1 k_Z(x)`, never an
/// explicit `K_ZZ^-1`).
///
/// Observation noise is NOT added; marginals are latent-function variances.
pub fn predictive(state: &VariationalState, xs: &DMatrix<f64>) -> Result<GaussianPosterior> {
    if xs.nrows() == 0 {
        return Err(Error::input("predictive: empty test set"));
    }
    let white = whiten(state)?;
    let kzs = kernel_matrix(&state.params, &state.z, xs)?;
    let kss = kernel_matrix(&state.params, xs, xs)?;
    let a = white.chol.solve_lower(&kzs); // L^-1 K_Zs
    let mean = a.transpose() * &white.m_w;
    let w = white.s_wf.transpose() * &a;
    let cov = kss - a.transpose() * &a + w.transpose() * &w;
    Ok(GaussianPosterior { mean, cov })
}

/// Marginal means and latent variances of [`predictive`], without forming the
/// full test covariance.
pub fn predictive_diag(state: &VariationalState, xs: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    if xs.nrows() == 0 {
        return Err(Error::input("predictive: empty test set"));
    }
    let white = whiten(state)?;
    let kzs = kernel_matrix(&state.params, &state.z, xs)?;
    let a = white.chol.solve_lower(&kzs);
    let mean = a.transpose() * &white.m_w;
    let w = white.s_wf.transpose() * &a;
    let sf2 = state.params.signal_variance();
    // The cancellation sf2 - |a|^2 can dip a few ulps below zero for a
    // near-interpolating state; floor keeps marginals usable as variances.
    let var = DVector::from_fn(xs.nrows(), |j, _| {
        (sf2 - a.column(j).norm_squared() + w.column(j).norm_squared()).max(VARIANCE_FLOOR)
    });
    Ok((mean, var))
}

/// Lower bound applied to predictive marginal variances.
pub const VARIANCE_FLOOR: f64 = 1e-15;

/// Closed-form KL divergence between finite-dimensional Gaussians:
/// `KL(Q||P) = 1/2 [tr(Sp^-1 Sq) + (mp-mq)^T Sp^-1 (mp-mq) - k
///             + log det Sp - log det Sq]`.
///
/// Evaluated in whitened form: with `A = L_p^-1 Sq L_p^-T` and
/// `b = L_p^-1 (mp - mq)` this is `1/2 [tr(A) + |b|^2 - k - log det A]`,
/// which stays accurate near `Q = P` even when the covariances are badly
/// conditioned (the direct trace/log-det difference cancels catastrophically
/// there). Nonnegative; tiny negative roundoff is clamped to zero.
pub fn gaussian_kl(q: &GaussianPosterior, p: &GaussianPosterior) -> Result<f64> {
    let k = q.dim();
    if p.dim() != k {
        return Err(Error::input(format!(
            "gaussian_kl: dimension mismatch ({k} vs {})",
            p.dim()
        )));
    }
    let p_chol = psd_cholesky(p.cov.clone())?;
    let w = p_chol.solve_lower(&q.cov);
    let a_raw = p_chol.solve_lower(&w.transpose());
    // Two one-sided solves leave roundoff asymmetry of order cond(L)^2 eps.
    let a = (&a_raw + a_raw.transpose()) * 0.5;
    let a_chol = psd_cholesky(a.clone())?;
    let d = &p.mean - &q.mean;
    let b = p_chol.solve_lower(&DMatrix::from_column_slice(k, 1, d.as_slice()));
    let kl = 0.5 * (a.trace() + b.norm_squared() - k as f64 - a_chol.logdet());
    if !kl.is_finite() {
        return Err(Error::numerical(format!("gaussian_kl produced {kl}")));
    }
    Ok(kl.max(0.0))
}

/// Union of two point sets with exact duplicate rows removed (first
/// occurrence wins, insertion order preserved).
pub fn union_eval_points(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let d = a.ncols();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(a.nrows() + b.nrows());
    let push_unique = |row: Vec<f64>, rows: &mut Vec<Vec<f64>>| {
        if !rows.iter().any(|r| r == &row) {
            rows.push(row);
        }
    };
    for i in 0..a.nrows() {
        push_unique(a.row(i).iter().copied().collect(), &mut rows);
    }
    for i in 0..b.nrows() {
        push_unique(b.row(i).iter().copied().collect(), &mut rows);
    }
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

/// KL between the updated and snapshot processes, evaluated as the Gaussian
/// KL of their predictive marginals at `eval_points` (default: the union of
/// the two inducing sets with exact duplicates removed).
pub fn kl_new_old(
    new: &VariationalState,
    old: &PriorSnapshot,
    eval_points: Option<&DMatrix<f64>>,
) -> Result<f64> {
    let union;
    let pts = match eval_points {
        Some(p) => {
            if p.nrows() == 0 {
                return Err(Error::input("kl_new_old: empty eval point set"));
            }
            p
        }
        None => {
            union = union_eval_points(&old.state().z, &new.z);
            &union
        }
    };
    let q = predictive(new, pts)?;
    let p = predictive(old.state(), pts)?;
    gaussian_kl(&q, &p)
}

const STATE_MAGIC: &[u8; 4] = b"SVGP";
const STATE_VERSION: u32 = 1;

/// Serialized size in bytes for a state with `m` inducing points in `d`
/// input dimensions. Depends only on the shape, never on the values.
pub fn serialized_state_len(m: usize, d: usize) -> usize {
    4 + 4 + 4 + 4 + 4 + 8 * (d + 2 + m * d + m + m * (m + 1) / 2)
}

/// Fixed-layout binary dump: magic, version, kernel family, dims, then the
/// log-parameters, `Z` (row-major), `m_u`, and the lower triangle of
/// `s_factor`, all little-endian f64. Round-trips bit-exactly.
pub fn serialize_state(state: &VariationalState) -> Vec<u8> {
    let m = state.num_inducing();
    let d = state.dim();
    let mut out = Vec::with_capacity(serialized_state_len(m, d));
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&STATE_VERSION.to_le_bytes());
    let family = match state.params.family {
        KernelFamily::Rbf => 0u32,
    };
    out.extend_from_slice(&family.to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    let mut push = |v: f64| out.extend_from_slice(&v.to_le_bytes());
    for v in state.params.log_lengthscales.iter() {
        push(*v);
    }
    push(state.params.log_signal_variance);
    push(state.params.log_noise_variance);
    for i in 0..m {
        for j in 0..d {
            push(state.z[(i, j)]);
        }
    }
    for v in state.m_u.iter() {
        push(*v);
    }
    for i in 0..m {
        for j in 0..=i {
            push(state.s_factor[(i, j)]);
        }
    }
    out
}

pub fn deserialize_state(bytes: &[u8]) -> Result<VariationalState> {
    let fail = |msg: &str| Error::Parse(format!("state dump: {msg}"));
    if bytes.len() < 20 {
        return Err(fail("truncated header"));
    }
    if &bytes[0..4] != STATE_MAGIC {
        return Err(fail("bad magic"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != STATE_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let family = match u32_at(8) {
        0 => KernelFamily::Rbf,
        other => return Err(fail(&format!("unknown kernel family tag {other}"))),
    };
    let d = u32_at(12) as usize;
    let m = u32_at(16) as usize;
    if bytes.len() != serialized_state_len(m, d) {
        return Err(fail(&format!(
            "length {} does not match shape (m={m}, d={d})",
            bytes.len()
        )));
    }
    let mut off = 20;
    let mut next = || {
        let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        off += 8;
        v
    };
    let log_lengthscales = DVector::from_fn(d, |_, _| next());
    let log_signal_variance = next();
    let log_noise_variance = next();
    let mut z = DMatrix::zeros(m, d);
    for i in 0..m {
        for j in 0..d {
            z[(i, j)] = next();
        }
    }
    let m_u = DVector::from_fn(m, |_, _| next());
    let mut s_factor = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            s_factor[(i, j)] = next();
        }
    }
    let state = VariationalState {
        z,
        m_u,
        s_factor,
        params: KernelParams {
            family,
            log_lengthscales,
            log_signal_variance,
            log_noise_variance,
        },
    };
    state.validate()?;
    Ok(state)
}
