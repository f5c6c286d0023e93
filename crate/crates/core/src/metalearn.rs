//! Bi-level meta-training of the soft prompt and the gradient regularizer.
//!
//! One outer step, for every task of an (augmented) batch:
//!
//! 1. support and query gradients at `theta`;
//! 2. gate `z` from the support representations, `psi(g_s)`;
//! 3. alignment `s_i = cos(g_q, psi(g_s))`;
//! 4. one inner step `theta' = theta - alpha1 * psi(g_s)`;
//! 5. query loss and gradient at `theta'`.
//!
//! `theta` then moves along the summed query gradients at the adapted
//! prompts (first-order; `psi(g_s)` is treated as constant in `theta`), and
//! `phi` along its exact gradient of the summed query losses plus the gate
//! regularizer. The batch's mean alignment becomes the curriculum score for
//! the next step.

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, batch_b, AugmentOptions, CurriculumState};
use crate::encoder::{cosine, Encoder};
use crate::error::{Error, Result};
use crate::metagrad::{backward_phi, gate, reg_loss, transform, GateVector, RegularizerGrad, RegularizerState};
use crate::optim::{Moments, Optimizer};
use crate::promptmodel::{PromptState, Scorer};
use crate::rng::{Purpose, Streams};
use crate::taskgen::{Example, MetaTask, TaskGenConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineSource {
    /// `cos(g_q, psi(g_s))`.
    Regulated,
    /// `cos(g_q, g_s)`.
    Raw,
}

impl std::str::FromStr for CosineSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regulated" => Ok(CosineSource::Regulated),
            "raw" => Ok(CosineSource::Raw),
            other => Err(Error::Parse(format!("unknown cosine source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub phi_lr: f64,
    pub m: f64,
    pub reg_coeff: f64,
    pub alpha_beta: f64,
    pub b_min: f64,
    pub tasks_per_batch: usize,
    pub support_size: usize,
    pub query_size: usize,
    pub max_steps: u64,
    pub validate_every: u64,
    pub seed: u64,
    pub prompt_tokens: usize,
    pub prompt_dim: usize,
    pub prompt_init_std: f64,
    pub curriculum: bool,
    pub augmentation: bool,
    pub regularizer: bool,
    pub cosine_source: CosineSource,
    pub swap_beta: bool,
    /// Update rule of the outer loop. The inner step is always a plain
    /// gradient step.
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.1,
            outer_lr: 0.1,
            phi_lr: 1e-4,
            m: 2.0,
            reg_coeff: 1.0,
            alpha_beta: 0.5,
            b_min: 1e-3,
            tasks_per_batch: 4,
            support_size: 32,
            query_size: 32,
            max_steps: 2000,
            validate_every: 100,
            seed: 0,
            prompt_tokens: 8,
            prompt_dim: 32,
            prompt_init_std: 0.5,
            curriculum: true,
            augmentation: true,
            regularizer: true,
            cosine_source: CosineSource::Regulated,
            swap_beta: false,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainConfig {
    /// Full-scale values: 100k steps, validation every 2k.
    pub fn full_scale() -> Self {
        Self {
            max_steps: 100_000,
            validate_every: 2_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lrs = [self.inner_lr, self.outer_lr, self.phi_lr];
        if lrs.iter().any(|lr| !(*lr >= 0.0) || !lr.is_finite()) {
            return Err(Error::InvalidConfig("learning rates must be finite and non-negative".into()));
        }
        if self.tasks_per_batch == 0 || self.support_size == 0 || self.query_size == 0 {
            return Err(Error::InvalidConfig("batch, support and query sizes must be at least 1".into()));
        }
        if self.prompt_tokens == 0 || self.prompt_dim == 0 || self.validate_every == 0 {
            return Err(Error::InvalidConfig("prompt shape and validate_every must be positive".into()));
        }
        if !(self.m > 1.0) {
            return Err(Error::InvalidConfig("m must exceed 1".into()));
        }
        if !(self.alpha_beta > 0.0) || !(self.b_min > 0.0 && self.b_min < 1.0) {
            return Err(Error::InvalidConfig("alpha_beta must be positive and b_min in (0, 1)".into()));
        }
        if !(self.reg_coeff >= 0.0) || !(self.prompt_init_std >= 0.0) {
            return Err(Error::InvalidConfig("reg_coeff and prompt_init_std must be non-negative".into()));
        }
        Ok(())
    }

    pub fn task_gen(&self) -> TaskGenConfig {
        TaskGenConfig {
            support_size: self.support_size,
            query_size: self.query_size,
            ..Default::default()
        }
    }

    pub fn augment_options(&self) -> AugmentOptions {
        AugmentOptions {
            enabled: self.augmentation,
            curriculum: self.curriculum,
            swap_beta: self.swap_beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaState {
    pub theta: PromptState,
    pub phi: RegularizerState,
    /// Mean alignment of the last batch; starts at -1.
    pub s: f64,
    pub step: u64,
    pub streams: Streams,
    /// Adam moments of `theta` and `phi` (all zero under plain steps).
    pub theta_moments: Moments,
    pub phi_moments: Moments,
}

impl MetaState {
    pub fn initial(cfg: &TrainConfig, hidden_dim: usize) -> Self {
        let streams = Streams::new(cfg.seed);
        let init_seed = streams.derive_seed(Purpose::Init, 0);
        let theta = PromptState::random(cfg.prompt_tokens, cfg.prompt_dim, cfg.prompt_init_std, init_seed);
        let phi = RegularizerState::identity(cfg.prompt_dim, hidden_dim);
        Self {
            theta_moments: Moments::zeros(theta.theta.len()),
            phi_moments: Moments::zeros(phi.num_params()),
            theta,
            phi,
            s: -1.0,
            step: 0,
            streams,
        }
    }

    pub fn curriculum(&self, cfg: &TrainConfig) -> CurriculumState {
        CurriculumState {
            s: self.s,
            m: cfg.m,
            alpha_beta: cfg.alpha_beta,
            b_min: cfg.b_min,
        }
    }
}

/// Cosine of two flattened matrices; 0 when either is (numerically) zero.
pub fn task_cosine(g_query: &ndarray::Array2<f64>, g_support: &ndarray::Array2<f64>) -> f64 {
    let a = g_query.as_standard_layout();
    let b = g_support.as_standard_layout();
    cosine(
        ndarray::ArrayView1::from(a.as_slice().expect("contiguous")),
        ndarray::ArrayView1::from(b.as_slice().expect("contiguous")),
    )
}

/// The frozen pieces a learner needs.
#[derive(Clone, Copy)]
pub struct Frozen<'a> {
    pub scorer: &'a Scorer,
    pub encoder: &'a Encoder,
}

/// Result of one inner step.
#[derive(Debug, Clone)]
pub struct InnerStep {
    pub theta_prime: PromptState,
    /// Raw support gradient at `theta`.
    pub g0: ndarray::Array2<f64>,
    /// `psi(g0)` (equal to `g0` when the regularizer is off).
    pub regulated: ndarray::Array2<f64>,
    /// Gate and its input; `None` when the regularizer is off.
    pub gate: Option<(GateVector, ndarray::Array1<f64>)>,
    pub support_loss: f64,
}

/// `theta - lr * step`.
pub fn inner_update(theta: &PromptState, step: &ndarray::Array2<f64>, lr: f64) -> PromptState {
    PromptState {
        theta: &theta.theta - &(step * lr),
    }
}

/// `theta' = theta - alpha1 * psi(grad L_support(theta))`; `phi = None`
/// means `psi` is the identity.
pub fn inner_adapt(
    frozen: Frozen,
    theta: &PromptState,
    phi: Option<&RegularizerState>,
    support: &[Example],
    inner_lr: f64,
) -> Result<InnerStep> {
    if support.is_empty() {
        return Err(Error::Empty("support set"));
    }
    let (support_loss, g0) = frozen.scorer.loss_and_grad(theta, support)?;
    let (regulated, gate_info) = match phi {
        Some(phi) => {
            let h_bar = frozen.encoder.mean_projection(support.iter().map(|e| &e.hidden))?;
            let z = gate(phi, &h_bar)?;
            (transform(phi, &z, &g0)?, Some((z, h_bar)))
        }
        None => (g0.clone(), None),
    };
    let theta_prime = inner_update(theta, &regulated, inner_lr);
    Ok(InnerStep {
        theta_prime,
        g0,
        regulated,
        gate: gate_info,
        support_loss,
    })
}

/// Per-task contribution to an outer step.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub cosine: f64,
    pub query_loss: f64,
    pub reg_loss: f64,
    pub mean_z: f64,
    pub theta_grad: ndarray::Array2<f64>,
    pub phi_grad: Option<RegularizerGrad>,
}

pub fn task_outcome(
    frozen: Frozen,
    theta: &PromptState,
    phi: &RegularizerState,
    task: &MetaTask,
    cfg: &TrainConfig,
    b_k: f64,
) -> Result<TaskOutcome> {
    let phi_opt = cfg.regularizer.then_some(phi);
    let inner = inner_adapt(frozen, theta, phi_opt, &task.support, cfg.inner_lr)?;
    let query = frozen.scorer.prepare(&task.query)?;
    let (_, g_query) = query.loss_and_grad(frozen.scorer, theta)?;
    let cosine = match cfg.cosine_source {
        CosineSource::Regulated => task_cosine(&g_query, &inner.regulated),
        CosineSource::Raw => task_cosine(&g_query, &inner.g0),
    };
    let (query_loss, theta_grad) = query.loss_and_grad(frozen.scorer, &inner.theta_prime)?;
    let (reg, mean_z, phi_grad) = match &inner.gate {
        Some((z, h_bar)) => {
            let upstream = &theta_grad * -cfg.inner_lr;
            let grad = backward_phi(phi, z, &inner.g0, h_bar, &upstream, b_k, cfg.reg_coeff)?;
            (reg_loss(z, b_k), z.mean(), Some(grad))
        }
        None => (0.0, 0.0, None),
    };
    Ok(TaskOutcome {
        cosine,
        query_loss,
        reg_loss: reg,
        mean_z,
        theta_grad,
        phi_grad,
    })
}

/// Outer objective of one task as a function of `(theta, phi)`:
/// `L_query(theta - alpha1 psi(g_s(theta))) + reg_coeff * reg_loss(z, b_k)`.
pub fn outer_objective(
    frozen: Frozen,
    theta: &PromptState,
    phi: &RegularizerState,
    task: &MetaTask,
    cfg: &TrainConfig,
    b_k: f64,
) -> Result<f64> {
    let inner = inner_adapt(frozen, theta, cfg.regularizer.then_some(phi), &task.support, cfg.inner_lr)?;
    let q = frozen.scorer.loss(&inner.theta_prime, &task.query)?;
    let reg = inner.gate.as_ref().map_or(0.0, |(z, _)| reg_loss(z, b_k));
    Ok(q + cfg.reg_coeff * reg)
}

/// One metrics record per outer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_q: f64,
    pub loss_reg: f64,
    pub s: f64,
    pub b: f64,
    pub mean_z: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

/// Applies one outer update for an already augmented batch. `b_k` is the
/// curriculum parameter the batch was augmented with.
pub fn outer_step(
    frozen: Frozen,
    state: &MetaState,
    batch: &[MetaTask],
    cfg: &TrainConfig,
    b_k: f64,
) -> Result<(MetaState, StepMetrics)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let outcomes = batch
        .iter()
        .map(|t| task_outcome(frozen, &state.theta, &state.phi, t, cfg, b_k))
        .collect::<Result<Vec<_>>>()?;

    // accumulate in task order
    let mut theta = state.theta.theta.clone();
    let mut theta_grad = ndarray::Array2::zeros(theta.raw_dim());
    let mut phi_grad = state.phi.zeros_like();
    for o in &outcomes {
        theta_grad += &o.theta_grad;
        if let Some(g) = &o.phi_grad {
            phi_grad.add_scaled(g, 1.0);
        }
    }
    let mut phi = state.phi.clone();
    let mut theta_moments = state.theta_moments.clone();
    let mut phi_moments = state.phi_moments.clone();
    let t = state.step + 1;
    match cfg.optimizer {
        Optimizer::Sgd => {
            theta.scaled_add(-cfg.outer_lr, &theta_grad);
            if cfg.regularizer {
                phi.add_scaled(&phi_grad, -cfg.phi_lr);
            }
        }
        Optimizer::Adam => {
            theta_moments.adam_step(theta.iter_mut(), theta_grad.iter().copied(), cfg.outer_lr, t);
            if cfg.regularizer {
                phi_moments.adam_step(phi.params_mut(), phi_grad.flatten(), cfg.phi_lr, t);
            }
        }
    }

    let n = outcomes.len() as f64;
    let mean = |f: fn(&TaskOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / n;
    let s = mean(|o| o.cosine).clamp(-1.0, 1.0);
    let next = MetaState {
        theta: PromptState { theta },
        phi,
        s,
        step: t,
        streams: state.streams,
        theta_moments,
        phi_moments,
    };
    let metrics = StepMetrics {
        step: next.step,
        loss_q: mean(|o| o.query_loss),
        loss_reg: mean(|o| o.reg_loss),
        s,
        b: b_k,
        mean_z: mean(|o| o.mean_z),
        val_loss: None,
        val_acc: None,
    };
    Ok((next, metrics))
}

/// Mean adapted query loss and accuracy over `tasks`.
pub fn validate(
    frozen: Frozen,
    theta: &PromptState,
    phi: &RegularizerState,
    tasks: &[MetaTask],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    if tasks.is_empty() {
        return Err(Error::Empty("validation tasks"));
    }
    let mut loss = 0.0;
    let mut acc = 0.0;
    for t in tasks {
        let inner = inner_adapt(frozen, theta, cfg.regularizer.then_some(phi), &t.support, cfg.inner_lr)?;
        let q = frozen.scorer.prepare(&t.query)?;
        loss += q.loss(frozen.scorer, &inner.theta_prime)?;
        acc += q.accuracy(frozen.scorer, &inner.theta_prime)?;
    }
    let n = tasks.len() as f64;
    Ok((loss / n, acc / n))
}

/// Samples the batch for `step` from the pool.
pub fn sample_batch(pool: &[MetaTask], cfg: &TrainConfig, streams: &Streams, step: u64) -> Vec<MetaTask> {
    let mut rng = streams.stream(Purpose::BatchSample, step, 0);
    let k = cfg.tasks_per_batch.min(pool.len());
    pool.choose_multiple(&mut rng, k).cloned().collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss (the final ones when no
    /// validation tasks were given).
    pub best_theta: PromptState,
    pub best_phi: RegularizerState,
    pub best_step: u64,
    pub best_val_loss: Option<f64>,
    pub final_state: MetaState,
    pub metrics: Vec<StepMetrics>,
}

/// Runs `cfg.max_steps` outer steps from `state`.
pub fn meta_train(
    frozen: Frozen,
    pool: &[MetaTask],
    val_tasks: &[MetaTask],
    cfg: &TrainConfig,
    state: MetaState,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::Empty("task pool"));
    }
    let mut state = state;
    let mut best = (state.theta.clone(), state.phi.clone(), state.step, None::<f64>);
    if !val_tasks.is_empty() {
        let (loss, _) = validate(frozen, &state.theta, &state.phi, val_tasks, cfg)?;
        best.3 = Some(loss);
    }
    let opts = cfg.augment_options();
    let mut metrics = Vec::with_capacity(cfg.max_steps as usize);
    for _ in 0..cfg.max_steps {
        let step = state.step;
        let batch = sample_batch(pool, cfg, &state.streams, step);
        let curriculum = state.curriculum(cfg);
        let augmented = augment_batch(&batch, pool, &curriculum, &opts, &state.streams, step)?;
        debug_assert_eq!(augmented.b, batch_b(&curriculum, &opts)?);
        let (next, mut record) = outer_step(frozen, &state, &augmented.tasks, cfg, augmented.b)?;
        state = next;
        if !val_tasks.is_empty() && state.step.is_multiple_of(cfg.validate_every) {
            let (loss, acc) = validate(frozen, &state.theta, &state.phi, val_tasks, cfg)?;
            record.val_loss = Some(loss);
            record.val_acc = Some(acc);
            if best.3.is_none_or(|b| loss < b) {
                best = (state.theta.clone(), state.phi.clone(), state.step, Some(loss));
            }
        }
        metrics.push(record);
    }
    if val_tasks.is_empty() {
        best = (state.theta.clone(), state.phi.clone(), state.step, None);
    }
    Ok(TrainOutcome {
        best_theta: best.0,
        best_phi: best.1,
        best_step: best.2,
        best_val_loss: best.3,
        final_state: state,
        metrics,
    })
}
