//! The online training loop: pretraining on the leading slice, one
//! PAC-Bayes-objective (or baseline) optimization step per incoming batch,
//! per-step bound reports, rollback on numerical failure, and bit-exact
//! checkpoint/resume.

mod adam;
mod objective;

pub use adam::AdamState;
pub use objective::{
    finite_diff_grad, objective_grad, objective_report, objective_value, observed_kl, FlatLayout,
    ObjectiveInputs,
};

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset, Stream};
use crate::error::{Error, Result};
use crate::exact::log_marginal_likelihood_grad;
use crate::kernels::KernelParams;
use crate::pacbayes::{self, BoundReport, LossSpec};
use crate::streaming::{
    deserialize_state, predictive_diag, serialize_state, PriorSnapshot, VariationalState,
};

/// Which objective drives the online step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    /// Minimize the online PAC-Bayes train bound.
    PacBayes,
    /// Minimize batch negative log predictive likelihood plus the KL anchor
    /// to the previous posterior (the uncollapsed online variational free
    /// energy, standing in for the collapsed streaming objective).
    BaselineNll,
}

impl Objective {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pacbayes" => Ok(Objective::PacBayes),
            "baseline-nll" => Ok(Objective::BaselineNll),
            other => Err(Error::input(format!(
                "unknown objective {other:?} (expected pacbayes|baseline-nll)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::PacBayes => "pacbayes",
            Objective::BaselineNll => "baseline-nll",
        }
    }
}

/// How the bound temperature is chosen per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LambdaMode {
    /// `lambda = 1 / n_seen` (n_seen counts every incorporated point,
    /// pretraining included).
    OneOverM,
    Fixed(f64),
}

impl LambdaMode {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "1/m" {
            return Ok(LambdaMode::OneOverM);
        }
        s.parse::<f64>()
            .ok()
            .filter(|v| *v > 0.0)
            .map(LambdaMode::Fixed)
            .ok_or_else(|| {
                Error::input(format!("lambda must be \"1/m\" or a positive number, got {s:?}"))
            })
    }

    pub fn value_at(&self, m_count: u64) -> f64 {
        match self {
            LambdaMode::OneOverM => 1.0 / m_count.max(1) as f64,
            LambdaMode::Fixed(v) => *v,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            LambdaMode::OneOverM => "1/m".to_string(),
            LambdaMode::Fixed(v) => format!("{v}"),
        }
    }
}

/// All knobs of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub lr_hyper: f64,
    pub lr_variational: f64,
    pub inner_steps_online: usize,
    pub pretrain_steps: usize,
    pub delta: f64,
    pub lambda_mode: LambdaMode,
    pub loss: LossSpec,
    /// Number of inducing points M.
    pub inducing: usize,
    pub seed: u64,
    /// Test hook: force a numerical failure while processing the batch with
    /// this index (0-based over consumed batches) to exercise rollback.
    #[serde(default)]
    pub inject_failure_at: Option<u64>,
}

impl TrainConfig {
    pub fn new(inducing: usize) -> Self {
        TrainConfig {
            objective: Objective::PacBayes,
            lr_hyper: 0.1,
            lr_variational: 0.01,
            inner_steps_online: 1,
            pretrain_steps: 200,
            delta: 0.05,
            lambda_mode: LambdaMode::OneOverM,
            loss: LossSpec::default_exp(),
            inducing,
            seed: 0,
            inject_failure_at: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_hyper <= 0.0 || self.lr_variational <= 0.0 {
            return Err(Error::input("learning rates must be > 0"));
        }
        if self.inner_steps_online == 0 {
            return Err(Error::input("inner_steps_online must be >= 1"));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::input(format!("delta must be in (0,1], got {}", self.delta)));
        }
        if self.inducing == 0 {
            return Err(Error::input("need at least one inducing point"));
        }
        if let LambdaMode::Fixed(v) = self.lambda_mode {
            if v <= 0.0 {
                return Err(Error::input("fixed lambda must be > 0"));
            }
        }
        self.loss.validate()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::new(20)
    }
}

/// One successful online step as it appears in the trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index over successful steps.
    pub step: u64,
    /// Points incorporated so far (pretraining included).
    pub n_seen: u64,
    /// MSE of the current predictive mean over everything seen so far.
    pub train_mse: f64,
    /// Running prequential MSE: every streamed point predicted before its
    /// own update, averaged over all points streamed so far.
    pub test_mse: f64,
    pub empirical_term: f64,
    pub kl_term: f64,
    pub constant_term: f64,
    pub train_bound_total: f64,
    pub test_bound: f64,
    /// Seconds spent in the optimization step (not covered by determinism).
    pub wall_time: f64,
}

/// A batch that was rolled back after a numerical failure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepFailure {
    pub batch_index: u64,
    pub message: String,
}

/// Held-out evaluation attached to a successful step (pre-update state).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HoldoutRecord {
    /// Mean expected bounded loss over the held-out set.
    pub mean_expected_loss: f64,
    /// Running sum of per-point generalization-loss estimates (one summand
    /// per streamed point, each the held-out mean under its predictor).
    pub cumulative_expected_loss: f64,
    /// Held-out MSE of the pre-update predictive mean.
    pub mse: f64,
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub records: Vec<StepRecord>,
    pub failures: Vec<StepFailure>,
    pub warnings: Vec<String>,
    /// Present when a held-out set was supplied; aligned with `records`.
    pub holdout: Option<Vec<HoldoutRecord>>,
}

// In normalized target units this is a 1% noise standard deviation; besides
// numerical hygiene it bounds the curvature of the observation-smoothed KL.
fn noise_floor() -> f64 {
    (1e-4f64).ln()
}

/// Inducing initialization: linearly spaced over the expected input range.
///
/// Features are normalized to zero mean and unit variance before streaming
/// (an offline concession recorded by the data module), so the plausible
/// domain is known a priori: a uniform grid with unit variance spans
/// +-sqrt(3). Each dimension covers the union of that interval with the
/// slice's own range. Spanning the domain up front matters for sequential
/// streams: points seeded only inside the leading slice cannot migrate fast
/// enough to follow the frontier, and regions they vacate are forgotten.
/// A dimension with zero range degenerates to the point plus copies spaced
/// by 1e-3 of the feature scale.
fn init_inducing(x: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let d = x.ncols();
    let unit_span = 3.0f64.sqrt();
    DMatrix::from_fn(m, d, |i, j| {
        let col = x.column(j);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in col.iter() {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        if hi > lo {
            let lo = lo.min(-unit_span);
            let hi = hi.max(unit_span);
            let frac = if m > 1 { i as f64 / (m - 1) as f64 } else { 0.5 };
            lo + frac * (hi - lo)
        } else {
            lo + i as f64 * 1e-3 * lo.abs().max(1.0)
        }
    })
}

/// Pretrains on the leading slice: linearly spaced inducing inputs, Adam on
/// the exact log marginal likelihood for the hyperparameters, then the
/// sparse posterior conditioned on the slice for `(m_u, S)`.
pub fn pretrain(slice: &Batch, cfg: &TrainConfig) -> Result<VariationalState> {
    cfg.validate()?;
    if slice.is_empty() {
        return Err(Error::input("pretrain: empty slice"));
    }
    let d = slice.x.ncols();
    let mut params = KernelParams::rbf(d, 0.1);

    let mut flat: Vec<f64> = params
        .log_lengthscales
        .iter()
        .copied()
        .chain([params.log_signal_variance, params.log_noise_variance])
        .collect();
    let mut adam = AdamState::new(flat.len());
    for _ in 0..cfg.pretrain_steps {
        let current = unpack_hyper(&flat, d);
        let (_, grad) = log_marginal_likelihood_grad(&current, &slice.x, &slice.y)?;
        // Ascent on the likelihood = descent on its negation.
        let descent: Vec<f64> = grad.iter().map(|g| -g).collect();
        adam.step(&mut flat, &descent, &[cfg.lr_hyper]);
        flat[d + 1] = flat[d + 1].max(noise_floor());
    }
    params = unpack_hyper(&flat, d);

    let z = init_inducing(&slice.x, cfg.inducing);
    let mut state = VariationalState::prior(z, params)?;
    state.condition_on(&slice.x, &slice.y)?;
    Ok(state)
}

fn unpack_hyper(flat: &[f64], d: usize) -> KernelParams {
    KernelParams {
        family: crate::kernels::KernelFamily::Rbf,
        log_lengthscales: DVector::from_column_slice(&flat[..d]),
        log_signal_variance: flat[d],
        log_noise_variance: flat[d + 1],
    }
}

/// Owns the evolving state, the optimizer moments, and the bound accounting
/// across a stream. Single writer; step records are derived by the driver.
#[derive(Debug, Clone)]
pub struct OnlineTrainer {
    cfg: TrainConfig,
    layout: FlatLayout,
    lr: Vec<f64>,
    state: VariationalState,
    adam: AdamState,
    step: u64,
    n_seen: u64,
    batches_consumed: u64,
    failed_batches: Vec<u64>,
    cumulative_empirical: f64,
    test_sq_sum: f64,
    test_count: u64,
    holdout_cum: f64,
}

struct PrequentialStats {
    sq_err_sum: f64,
    expected_loss_sum: f64,
}

impl OnlineTrainer {
    /// Wraps a pretrained state; `n_pretrain` counts toward `n_seen`.
    pub fn from_pretrained(state: VariationalState, cfg: TrainConfig, n_pretrain: usize) -> Result<Self> {
        cfg.validate()?;
        state.validate()?;
        let layout = FlatLayout::of(&state);
        let lr = layout.lr_vector(cfg.lr_hyper, cfg.lr_variational);
        let n_params = layout.n_params();
        Ok(OnlineTrainer {
            cfg,
            layout,
            lr,
            state,
            adam: AdamState::new(n_params),
            step: 0,
            n_seen: n_pretrain as u64,
            batches_consumed: 0,
            failed_batches: Vec::new(),
            cumulative_empirical: 0.0,
            test_sq_sum: 0.0,
            test_count: 0,
            holdout_cum: 0.0,
        })
    }

    pub fn state(&self) -> &VariationalState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_completed(&self) -> u64 {
        self.step
    }

    pub fn n_seen(&self) -> u64 {
        self.n_seen
    }

    pub fn batches_consumed(&self) -> u64 {
        self.batches_consumed
    }

    pub fn failed_batches(&self) -> &[u64] {
        &self.failed_batches
    }

    pub fn lambda_at(&self, m_count: u64) -> f64 {
        self.cfg.lambda_mode.value_at(m_count)
    }

    /// Cumulative prequential MSE over all streamed points so far.
    pub fn prequential_mse(&self) -> f64 {
        if self.test_count == 0 {
            0.0
        } else {
            self.test_sq_sum / self.test_count as f64
        }
    }

    /// Cumulative prequential expected bounded loss (the empirical term of
    /// the test bound).
    pub fn cumulative_empirical(&self) -> f64 {
        self.cumulative_empirical
    }

    /// Cumulative held-out generalization-loss estimate.
    pub fn holdout_cumulative(&self) -> f64 {
        self.holdout_cum
    }

    /// The test bound at the current point of the stream.
    pub fn test_bound_now(&self) -> Result<f64> {
        pacbayes::test_bound(
            self.cumulative_empirical,
            self.n_seen,
            self.lambda_at(self.n_seen),
            self.cfg.delta,
            self.cfg.loss.ceiling_k,
        )
    }

    /// One online step: snapshot the state as the prior, run
    /// `inner_steps_online` Adam iterations on the chosen objective, and
    /// return the PAC-Bayes report of the last iteration (evaluated before
    /// its parameter update). On numerical failure the state, optimizer
    /// moments and accounting are rolled back to the snapshot.
    pub fn online_step(&mut self, batch: &Batch) -> Result<BoundReport> {
        if batch.is_empty() {
            return Err(Error::input("online_step: empty batch"));
        }
        let batch_index = self.batches_consumed;
        self.batches_consumed += 1;

        let prior = self.state.snapshot(self.step);
        let adam_backup = self.adam.clone();
        match self.optimize(&prior, batch, batch_index) {
            Ok((report, preq)) => {
                self.step += 1;
                self.n_seen += batch.len() as u64;
                self.cumulative_empirical += preq.expected_loss_sum;
                self.test_sq_sum += preq.sq_err_sum;
                self.test_count += batch.len() as u64;
                Ok(report)
            }
            Err(e) => {
                self.state = prior.restore();
                self.adam = adam_backup;
                self.failed_batches.push(batch_index);
                Err(e)
            }
        }
    }

    fn optimize(
        &mut self,
        prior: &PriorSnapshot,
        batch: &Batch,
        batch_index: u64,
    ) -> Result<(BoundReport, PrequentialStats)> {
        if self.cfg.inject_failure_at == Some(batch_index) {
            // Simulate a mid-step numerical blowup after partial mutation so
            // rollback has something real to undo.
            self.state.m_u[0] = f64::MAX;
            return Err(Error::numerical("injected failure".to_string()));
        }

        // Prequential accounting with the pre-update predictor.
        let (pre_mean, pre_var) = predictive_diag(&self.state, &batch.x)?;
        let mut preq = PrequentialStats {
            sq_err_sum: 0.0,
            expected_loss_sum: 0.0,
        };
        for i in 0..batch.len() {
            let err = batch.y[i] - pre_mean[i];
            preq.sq_err_sum += err * err;
            preq.expected_loss_sum +=
                pacbayes::expected_loss(&self.cfg.loss, batch.y[i], pre_mean[i], pre_var[i])?;
        }

        let m_count = self.n_seen + batch.len() as u64;
        let lambda = self.lambda_at(m_count);
        let mut last_report = None;
        // KL evaluation locations are frozen at the snapshot's inducing set.
        // At step start this equals the deduplicated union of old and new
        // inducing inputs (the states coincide); once Z moves, the union
        // would pair each point with a near-duplicate and make the KL
        // covariance nearly singular, so the snapshot set is kept throughout.
        let eval = prior.state().z.clone();
        for _ in 0..self.cfg.inner_steps_online {
            let inputs = ObjectiveInputs {
                objective: self.cfg.objective,
                batch,
                prior,
                eval_points: &eval,
                lambda,
                delta: self.cfg.delta,
                m_count,
                loss: &self.cfg.loss,
            };
            let report = objective_report(&self.state, &inputs)?;
            let (_, mut grad) = objective_grad(&self.state, &inputs)?;
            // Saturated bounded losses leave many coordinates with gradients
            // that are pure roundoff; Adam's per-coordinate normalization
            // would turn those into full-rate random walks (unvisited
            // regions accumulate noise instead of staying put). Components
            // far below the dominant gradient are treated as exact zeros.
            let gmax = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
            for g in grad.iter_mut() {
                if g.abs() < 1e-6 * gmax {
                    *g = 0.0;
                }
            }
            let mut flat = self.layout.flatten(&self.state)?;
            self.adam.step(&mut flat, &grad, &self.lr);
            flat[self.layout.d + 1] = flat[self.layout.d + 1].max(noise_floor());
            self.state = self.layout.unflatten(&flat)?;
            last_report = Some(report);
        }
        Ok((last_report.expect("inner_steps_online >= 1"), preq))
    }

    /// Held-out statistics under the current (pre-update) state.
    fn holdout_stats(&self, holdout: &Dataset) -> Result<(f64, f64)> {
        let (mean, var) = predictive_diag(&self.state, &holdout.x)?;
        let mut loss_sum = 0.0;
        let mut sq = 0.0;
        for i in 0..holdout.len() {
            loss_sum += pacbayes::expected_loss(&self.cfg.loss, holdout.y[i], mean[i], var[i])?;
            let e = holdout.y[i] - mean[i];
            sq += e * e;
        }
        let n = holdout.len() as f64;
        Ok((loss_sum / n, sq / n))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: 1,
            state_hex: hex_encode(&serialize_state(&self.state)),
            adam: self.adam.clone(),
            step: self.step,
            n_seen: self.n_seen,
            batches_consumed: self.batches_consumed,
            failed_batches: self.failed_batches.clone(),
            cumulative_empirical: self.cumulative_empirical,
            test_sq_sum: self.test_sq_sum,
            test_count: self.test_count,
            holdout_cum: self.holdout_cum,
        }
    }

    pub fn from_checkpoint(cp: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        if cp.version != 1 {
            return Err(Error::Parse(format!("unsupported checkpoint version {}", cp.version)));
        }
        cfg.validate()?;
        let state = deserialize_state(&hex_decode(&cp.state_hex)?)?;
        let layout = FlatLayout::of(&state);
        if cp.adam.len() != layout.n_params() {
            return Err(Error::Parse(format!(
                "checkpoint optimizer has {} moments, state needs {}",
                cp.adam.len(),
                layout.n_params()
            )));
        }
        let lr = layout.lr_vector(cfg.lr_hyper, cfg.lr_variational);
        Ok(OnlineTrainer {
            cfg,
            layout,
            lr,
            state,
            adam: cp.adam.clone(),
            step: cp.step,
            n_seen: cp.n_seen,
            batches_consumed: cp.batches_consumed,
            failed_batches: cp.failed_batches.clone(),
            cumulative_empirical: cp.cumulative_empirical,
            test_sq_sum: cp.test_sq_sum,
            test_count: cp.test_count,
            holdout_cum: cp.holdout_cum,
        })
    }
}

/// Trainer state sufficient to resume a stream bit-exactly: the binary state
/// dump plus optimizer moments and bound accounting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub state_hex: String,
    pub adam: AdamState,
    pub step: u64,
    pub n_seen: u64,
    pub batches_consumed: u64,
    pub failed_batches: Vec<u64>,
    pub cumulative_empirical: f64,
    pub test_sq_sum: f64,
    pub test_count: u64,
    pub holdout_cum: f64,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse(format!("checkpoint: {e}")))
    }
}

fn hex_encode(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn hex_decode(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(Error::Parse("odd-length hex".to_string()));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&s[i..i + 2], 16).map_err(|e| Error::Parse(format!("hex: {e}")))
        })
        .collect()
}

/// Pretrains on the stream's slice and folds [`OnlineTrainer::online_step`]
/// over its batches.
pub fn run_stream(stream: &Stream, cfg: &TrainConfig) -> Result<RunTrace> {
    run_stream_with_holdout(stream, cfg, None)
}

/// Like [`run_stream`], additionally evaluating every pre-update predictor on
/// a held-out set (for bound-validity experiments).
pub fn run_stream_with_holdout(
    stream: &Stream,
    cfg: &TrainConfig,
    holdout: Option<&Dataset>,
) -> Result<RunTrace> {
    cfg.validate()?;
    let mut warnings = Vec::new();
    if cfg.inducing > stream.pretrain.len() {
        warnings.push(format!(
            "{} inducing points exceed the pretrain slice of {} rows",
            cfg.inducing,
            stream.pretrain.len()
        ));
    }
    let state = pretrain(&stream.pretrain, cfg)?;
    let trainer = OnlineTrainer::from_pretrained(state, cfg.clone(), stream.pretrain.len())?;
    drive(trainer, stream, holdout, warnings)
}

/// Resumes a checkpointed run over the same stream; already-consumed batches
/// are skipped and the remaining records match the uninterrupted run
/// bit-for-bit.
pub fn resume_stream(
    stream: &Stream,
    cfg: &TrainConfig,
    checkpoint: &Checkpoint,
    holdout: Option<&Dataset>,
) -> Result<RunTrace> {
    let trainer = OnlineTrainer::from_checkpoint(checkpoint, cfg.clone())?;
    drive(trainer, stream, holdout, Vec::new())
}

fn drive(
    mut trainer: OnlineTrainer,
    stream: &Stream,
    holdout: Option<&Dataset>,
    warnings: Vec<String>,
) -> Result<RunTrace> {
    // Seen rows(for train MSE): pretrain plus every successfully
    // incorporated batch, reconstructed on resume from the failure list.
    let d = stream.pretrain.x.ncols();
    let mut seen_x: Vec<f64> = Vec::new();
    let mut seen_y: Vec<f64> = Vec::new();
    let mut push_batch = |bx: &DMatrix<f64>, by: &DVector<f64>, seen_x: &mut Vec<f64>, seen_y: &mut Vec<f64>| {
        for i in 0..bx.nrows() {
            for j in 0..d {
                seen_x.push(bx[(i, j)]);
            }
            seen_y.push(by[i]);
        }
    };
    push_batch(&stream.pretrain.x, &stream.pretrain.y, &mut seen_x, &mut seen_y);
    let start = trainer.batches_consumed() as usize;
    for (idx, b) in stream.batches.iter().enumerate().take(start) {
        if !trainer.failed_batches().contains(&(idx as u64)) {
            push_batch(&b.x, &b.y, &mut seen_x, &mut seen_y);
        }
    }

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut holdout_records = Vec::new();

    for idx in start..stream.batches.len() {
        let batch = &stream.batches[idx];
        // Held-out view of the pre-update predictor, committed only if the
        // step lands.
        let pre_holdout = match holdout {
            Some(h) => match trainer.holdout_stats(h) {
                Ok(v) => Some(v),
                Err(e) if e.is_numerical() => {
                    trainer.batches_consumed += 1;
                    trainer.failed_batches.push(idx as u64);
                    failures.push(StepFailure {
                        batch_index: idx as u64,
                        message: e.to_string(),
                    });
                    continue;
                }
                Err(e) => return Err(e),
            },
            None => None,
        };

        let t0 = Instant::now();
        match trainer.online_step(batch) {
            Ok(report) => {
                let wall_time = t0.elapsed().as_secs_f64();
                push_batch(&batch.x, &batch.y, &mut seen_x, &mut seen_y);
                let n = seen_y.len();
                let sx = DMatrix::from_row_slice(n, d, &seen_x);
                let sy = DVector::from_column_slice(&seen_y);
                let (mean, _) = predictive_diag(trainer.state(), &sx)?;
                let train_mse = (0..n).map(|i| (sy[i] - mean[i]).powi(2)).sum::<f64>() / n as f64;

                if let Some((mean_loss, h_mse)) = pre_holdout {
                    trainer.holdout_cum += batch.len() as f64 * mean_loss;
                    holdout_records.push(HoldoutRecord {
                        mean_expected_loss: mean_loss,
                        cumulative_expected_loss: trainer.holdout_cum,
                        mse: h_mse,
                    });
                }

                records.push(StepRecord {
                    step: trainer.steps_completed(),
                    n_seen: trainer.n_seen(),
                    train_mse,
                    test_mse: trainer.prequential_mse(),
                    empirical_term: report.empirical_term,
                    kl_term: report.kl_term,
                    constant_term: report.constant_term,
                    train_bound_total: report.total,
                    test_bound: trainer.test_bound_now()?,
                    wall_time,
                });
            }
            Err(e) if e.is_numerical() => {
                failures.push(StepFailure {
                    batch_index: idx as u64,
                    message: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }

    Ok(RunTrace {
        records,
        failures,
        warnings,
        holdout: holdout.map(|_| holdout_records),
    })
}
