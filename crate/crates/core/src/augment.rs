//! Query-set mixup between tasks with a curriculum on the mixing ratio.
//!
//! The running gradient-alignment score `s` in `[-1, 1]` sets
//! `b = (m^((1 + s) / 2) - 1) / (m - 1)`, and each task's query set is mixed
//! with a same-format partner using `lambda ~ Beta(alpha, b * alpha)`.
//! Support sets are never touched.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Hidden;
use crate::error::{Error, Result};
use crate::rng::{Purpose, Streams};
use crate::sampling::beta_variate;
use crate::taskgen::{Example, MetaTask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    /// Mean gradient cosine of the previous batch.
    pub s: f64,
    /// Curve parameter, `> 1`.
    pub m: f64,
    pub alpha_beta: f64,
    pub b_min: f64,
}

impl CurriculumState {
    pub fn initial(m: f64, alpha_beta: f64, b_min: f64) -> Self {
        Self {
            s: -1.0,
            m,
            alpha_beta,
            b_min,
        }
    }

    /// `curriculum_b(s, m)` clamped to `[b_min, 1]`.
    pub fn b(&self) -> Result<f64> {
        Ok(clamp_b(curriculum_b(self.s, self.m)?, self.b_min))
    }
}

/// Unclamped curriculum parameter; 0 at `s = -1`, 1 at `s = 1`.
pub fn curriculum_b(s: f64, m: f64) -> Result<f64> {
    if !(m > 1.0) || !m.is_finite() {
        return Err(Error::InvalidConfig(format!("curve parameter m must exceed 1, got {m}")));
    }
    if !(-1.0..=1.0).contains(&s) {
        return Err(Error::InvalidConfig(format!("alignment score {s} outside [-1, 1]")));
    }
    let x = (1.0 + s) / 2.0;
    // m^x - 1 via exp_m1 keeps full precision near s = -1
    Ok(((x * m.ln()).exp_m1() / (m - 1.0)).clamp(0.0, 1.0))
}

pub fn clamp_b(b: f64, b_min: f64) -> f64 {
    b.clamp(b_min, 1.0)
}

/// `lambda ~ Beta(alpha, b * alpha)`.
pub fn sample_lambda<R: Rng + ?Sized>(alpha_beta: f64, b: f64, rng: &mut R) -> Result<f64> {
    if !(alpha_beta > 0.0) || !(b > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "Beta shapes must be positive (alpha = {alpha_beta}, b = {b})"
        )));
    }
    beta_variate(alpha_beta, b * alpha_beta, rng)
}

/// `lambda ~ Beta(b * alpha, alpha)`, whose mean rises with `b`.
pub fn sample_lambda_swapped<R: Rng + ?Sized>(alpha_beta: f64, b: f64, rng: &mut R) -> Result<f64> {
    if !(alpha_beta > 0.0) || !(b > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "Beta shapes must be positive (alpha = {alpha_beta}, b = {b})"
        )));
    }
    beta_variate(b * alpha_beta, alpha_beta, rng)
}

/// Mixes the query sets of two same-format tasks, keeping `task_i`'s support.
///
/// `task_j`'s query is shuffled with `rng` and paired by index with
/// `task_i`'s; the result is trimmed to the shorter of the two.
pub fn interpolate_query<R: Rng + ?Sized>(
    task_i: &MetaTask,
    task_j: &MetaTask,
    lambda: f64,
    rng: &mut R,
) -> Result<MetaTask> {
    if task_i.format != task_j.format {
        return Err(Error::Format(format!(
            "cannot mix {} with {}",
            task_i.format.tag(),
            task_j.format.tag()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!("mixing ratio {lambda} outside [0, 1]")));
    }
    if task_i.query.is_empty() || task_j.query.is_empty() {
        return Err(Error::Empty("query set"));
    }
    let mut order: Vec<usize> = (0..task_j.query.len()).collect();
    order.shuffle(rng);
    let query = task_i
        .query
        .iter()
        .zip(order)
        .map(|(a, jb)| mix_example(a, &task_j.query[jb], lambda))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetaTask {
        format: task_i.format,
        support: task_i.support.clone(),
        query,
        anchor_cluster: task_i.anchor_cluster,
    })
}

fn mix_example(a: &Example, b: &Example, lambda: f64) -> Result<Example> {
    if a.hidden.values.len() != b.hidden.values.len() || a.soft_label.len() != b.soft_label.len() {
        return Err(Error::Shape("mixed examples differ in shape".into()));
    }
    let mix = |x: &Array1<f64>, y: &Array1<f64>| x * (1.0 - lambda) + y * lambda;
    Ok(Example {
        hidden: Hidden {
            values: mix(&a.hidden.values, &b.hidden.values),
            format: a.hidden.format,
        },
        soft_label: mix(&a.soft_label, &b.soft_label),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentOptions {
    pub enabled: bool,
    /// When off, `b = 1` and the ratio follows a fixed `Beta(alpha, alpha)`.
    pub curriculum: bool,
    pub swap_beta: bool,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        Self {
            enabled: true,
            curriculum: true,
            swap_beta: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBatch {
    pub tasks: Vec<MetaTask>,
    /// Beta parameter used for this batch.
    pub b: f64,
    pub lambdas: Vec<f64>,
}

/// The `b` a batch would use under `state` and `opts`.
pub fn batch_b(state: &CurriculumState, opts: &AugmentOptions) -> Result<f64> {
    if opts.curriculum {
        state.b()
    } else {
        Ok(1.0)
    }
}

/// Curriculum task augmentation for one batch.
///
/// Slot `i` draws its partner and ratio from the stream
/// `(Augment, step, i)`, so the result does not depend on evaluation order.
pub fn augment_batch(
    batch: &[MetaTask],
    pool: &[MetaTask],
    state: &CurriculumState,
    opts: &AugmentOptions,
    streams: &Streams,
    step: u64,
) -> Result<AugmentedBatch> {
    let b = batch_b(state, opts)?;
    if !opts.enabled {
        return Ok(AugmentedBatch {
            tasks: batch.to_vec(),
            b,
            lambdas: vec![0.0; batch.len()],
        });
    }
    if pool.is_empty() {
        return Err(Error::Empty("task pool"));
    }
    let mut tasks = Vec::with_capacity(batch.len());
    let mut lambdas = Vec::with_capacity(batch.len());
    for (slot, task) in batch.iter().enumerate() {
        let mut rng = streams.stream(Purpose::Augment, step, slot as u64);
        let partners: Vec<&MetaTask> = pool.iter().filter(|t| t.format == task.format).collect();
        if partners.is_empty() {
            return Err(Error::Format(format!(
                "no {} task in the pool to mix with",
                task.format.tag()
            )));
        }
        let partner = partners[rng.random_range(0..partners.len())];
        let lambda = if opts.swap_beta {
            sample_lambda_swapped(state.alpha_beta, b, &mut rng)?
        } else {
            sample_lambda(state.alpha_beta, b, &mut rng)?
        };
        tasks.push(interpolate_query(task, partner, lambda, &mut rng)?);
        lambdas.push(lambda);
    }
    Ok(AugmentedBatch { tasks, b, lambdas })
}
