//! Downstream few-shot prompt tuning and the domain-shift benchmark.
//!
//! The downstream task is a sentence-pair task built from held-out
//! documents: the second sentence slot holds the centroid of a reference
//! topic (the most populated training cluster among the held-out
//! sentences), and the label is 0 when the first sentence belongs to that
//! topic, 1 otherwise. A nuisance direction `u` is added to the first
//! sentence's embedding with sign `n`. In the source domain `n` agrees with
//! the label's sign (+1 for label 0, -1 for label 1) with probability
//! `(1 + rho) / 2`; in the target domain it disagrees with that probability.
//! A prompt that leans on `u` scores well in the source domain and badly in
//! the target domain.

use log::info;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::metagrad::{gate, transform, RegularizerState};
use crate::metalearn::{meta_train, Frozen, MetaState, TrainConfig};
use crate::optim::{Moments, Optimizer};
use crate::clustering::ClusterModel;
use crate::pipeline::{build_pool, frozen_models, PipelineConfig};
use crate::promptmodel::{argmax, PreparedEpisode, PromptState, Scorer};
use crate::rng::{Purpose, Streams};
use crate::sampling::gaussian_vector;
use crate::taskgen::{embed_corpus, one_hot, Example, TaskFormat};

pub const SOURCE: &str = "source";
pub const TARGET: &str = "target";

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamTask {
    pub format: TaskFormat,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    /// Named test episodes, one per domain.
    pub tests: Vec<(String, Vec<Example>)>,
}

impl DownstreamTask {
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Empty("train episode"));
        }
        let classes = self.format.classes();
        let all = self
            .train
            .iter()
            .chain(&self.validation)
            .chain(self.tests.iter().flat_map(|(_, t)| t));
        for ex in all {
            if ex.soft_label.len() != classes {
                return Err(Error::Shape(format!(
                    "{} task has a {}-class label",
                    self.format.tag(),
                    ex.soft_label.len()
                )));
            }
        }
        Ok(())
    }
}

/// Accuracy curve of one tuning run. Entry `k` is measured after
/// `k * eval_interval` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub eval_interval: usize,
    pub train_loss: Vec<f64>,
    pub validation: Vec<f64>,
    pub tests: Vec<(String, Vec<f64>)>,
}

impl Curves {
    pub fn test(&self, domain: &str) -> Option<&[f64]> {
        self.tests.iter().find(|(d, _)| d == domain).map(|(_, c)| c.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub theta: PromptState,
    pub curves: Curves,
}

/// Fraction of examples whose argmax logit equals the argmax label (ties to
/// the lowest index on both sides).
pub fn evaluate(scorer: &Scorer, theta: &PromptState, episodes: &[&[Example]]) -> Result<f64> {
    let total: usize = episodes.iter().map(|e| e.len()).sum();
    if total == 0 {
        return Err(Error::Empty("evaluation episodes"));
    }
    let mut hits = 0usize;
    for ep in episodes.iter().filter(|e| !e.is_empty()) {
        let prepared = scorer.prepare(ep)?;
        hits += correct(&prepared, scorer, theta, ep)?;
    }
    Ok(hits as f64 / total as f64)
}

fn correct(prepared: &PreparedEpisode, scorer: &Scorer, theta: &PromptState, ep: &[Example]) -> Result<usize> {
    let preds = prepared.predictions(scorer, theta)?;
    Ok(preds
        .iter()
        .zip(ep)
        .filter(|(p, ex)| **p == argmax(ex.soft_label.view()))
        .count())
}

fn accuracy(prepared: &Option<PreparedEpisode>, scorer: &Scorer, theta: &PromptState, ep: &[Example]) -> Result<f64> {
    match prepared {
        Some(p) => Ok(correct(p, scorer, theta, ep)? as f64 / ep.len() as f64),
        None => Ok(0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub eval_interval: usize,
    pub optimizer: Optimizer,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.1,
            eval_interval: 10,
            optimizer: Optimizer::Adam,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_interval == 0 {
            return Err(Error::InvalidConfig("eval_interval must be positive".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig("tuning lr must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Full-batch tuning `theta <- theta - lr * psi(grad L_train(theta))`.
/// `phi = None` is plain prompt tuning. The gate is computed once from the
/// train episode; `phi` is only read.
pub fn prompt_tune(
    frozen: Frozen,
    theta_star: &PromptState,
    phi_star: Option<&RegularizerState>,
    task: &DownstreamTask,
    tune: &TuneConfig,
) -> Result<TuneOutcome> {
    task.validate()?;
    tune.validate()?;
    let TuneConfig {
        steps,
        lr,
        eval_interval,
        optimizer,
    } = *tune;
    let scorer = frozen.scorer;
    let train = scorer.prepare(&task.train)?;
    let prep = |ep: &[Example]| -> Result<Option<PreparedEpisode>> {
        if ep.is_empty() {
            Ok(None)
        } else {
            scorer.prepare(ep).map(Some)
        }
    };
    let val = prep(&task.validation)?;
    let tests = task
        .tests
        .iter()
        .map(|(_, ep)| prep(ep))
        .collect::<Result<Vec<_>>>()?;
    let z = match phi_star {
        Some(phi) => {
            let h_bar = frozen.encoder.mean_projection(task.train.iter().map(|e| &e.hidden))?;
            Some(gate(phi, &h_bar)?)
        }
        None => None,
    };

    let mut curves = Curves {
        eval_interval,
        train_loss: Vec::new(),
        validation: Vec::new(),
        tests: task.tests.iter().map(|(d, _)| (d.clone(), Vec::new())).collect(),
    };
    let record = |theta: &PromptState, curves: &mut Curves| -> Result<()> {
        curves.train_loss.push(train.loss(scorer, theta)?);
        curves.validation.push(accuracy(&val, scorer, theta, &task.validation)?);
        for ((prepared, (_, ep)), (_, curve)) in tests.iter().zip(&task.tests).zip(&mut curves.tests) {
            curve.push(accuracy(prepared, scorer, theta, ep)?);
        }
        Ok(())
    };

    let mut theta = theta_star.clone();
    let mut moments = Moments::zeros(theta.theta.len());
    record(&theta, &mut curves)?;
    for step in 1..=steps {
        let (_, g) = train.loss_and_grad(scorer, &theta)?;
        let update = match (phi_star, &z) {
            (Some(phi), Some(z)) => transform(phi, z, &g)?,
            _ => g,
        };
        match optimizer {
            Optimizer::Sgd => theta.theta.scaled_add(-lr, &update),
            Optimizer::Adam => moments.adam_step(theta.theta.iter_mut(), update.iter().copied(), lr, step as u64),
        }
        if step % eval_interval == 0 {
            record(&theta, &mut curves)?;
        }
    }
    Ok(TuneOutcome { theta, curves })
}

/// Prompt tuning from a seeded Gaussian prompt with the identity regularizer.
pub fn run_vanilla_pt(
    frozen: Frozen,
    task: &DownstreamTask,
    tokens: usize,
    init_std: f64,
    tune: &TuneConfig,
    seed: u64,
) -> Result<TuneOutcome> {
    let dim = frozen.scorer.config.prompt_dim;
    let theta = PromptState::random(tokens, dim, init_std, seed);
    prompt_tune(frozen, &theta, None, task, tune)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShiftConfig {
    /// Train examples per label.
    pub shots: usize,
    pub validation_per_label: usize,
    pub test_per_domain: usize,
    /// Label correlation of the nuisance sign; reversed in the target domain.
    pub rho: f64,
    /// Length of the nuisance vector added to the first sentence.
    pub nuisance_scale: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            shots: 16,
            validation_per_label: 16,
            test_per_domain: 400,
            rho: 0.9,
            nuisance_scale: 0.5,
        }
    }
}

impl ShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 || self.test_per_domain == 0 {
            return Err(Error::InvalidConfig("shots and test_per_domain must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidConfig("rho must lie in [0, 1]".into()));
        }
        if !(self.nuisance_scale >= 0.0) || !self.nuisance_scale.is_finite() {
            return Err(Error::InvalidConfig("nuisance_scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Sentence embeddings of a held-out corpus grouped by their nearest
/// training cluster.
pub struct HeldOut {
    pub embeddings: ndarray::Array2<f64>,
    pub cluster: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl HeldOut {
    pub fn new(encoder: &Encoder, corpus: &Corpus, clusters: &ClusterModel) -> Result<Self> {
        let embeddings = embed_corpus(encoder, corpus)?;
        let cluster: Vec<usize> = embeddings.rows().into_iter().map(|r| clusters.nearest(r)).collect();
        let mut members = vec![Vec::new(); clusters.k()];
        for (i, &c) in cluster.iter().enumerate() {
            members[c].push(i);
        }
        if members.iter().filter(|m| !m.is_empty()).count() < 2 {
            return Err(Error::Insufficient("held-out sentences must cover at least two clusters".into()));
        }
        Ok(Self {
            embeddings,
            cluster,
            members,
        })
    }

    /// The most populated cluster (lowest id on ties).
    pub fn largest_cluster(&self) -> usize {
        let mut best = 0;
        for (c, m) in self.members.iter().enumerate() {
            if m.len() > self.members[best].len() {
                best = c;
            }
        }
        best
    }

    fn reference_member<R: Rng>(&self, reference: usize, label: usize, rng: &mut R) -> usize {
        let n = self.cluster.len();
        if label == 0 {
            return *self.members[reference].choose(rng).expect("non-empty");
        }
        loop {
            let a = rng.random_range(0..n);
            if self.cluster[a] != reference {
                return a;
            }
        }
    }
}

/// One example with the nuisance applied; its sign follows the label with
/// probability `agree_prob`.
fn shifted_pair<R: Rng>(
    encoder: &Encoder,
    held: &HeldOut,
    u: &ndarray::Array1<f64>,
    scale: f64,
    label: usize,
    agree_prob: f64,
    reference: &(usize, ndarray::Array1<f64>),
    rng: &mut R,
) -> Result<Example> {
    let (cluster, centroid) = reference;
    let a = held.reference_member(*cluster, label, rng);
    let sign = if label == 0 { 1.0 } else { -1.0 };
    let n = if rng.random::<f64>() < agree_prob { sign } else { -sign };
    let e1 = &held.embeddings.row(a) + &(u * (n * scale));
    let e2 = centroid.clone();
    Example::new(encoder.compose_pair(&e1, &e2)?, one_hot(3, label))
}

/// Builds the source/target task. Train and validation come from the source
/// domain; tests from both.
pub fn shift_task(encoder: &Encoder, held: &HeldOut, clusters: &ClusterModel, cfg: &ShiftConfig, seed: u64) -> Result<DownstreamTask> {
    cfg.validate()?;
    let c = held.largest_cluster();
    let reference = (c, clusters.centroid(c));
    let streams = Streams::new(seed);
    let mut urng = streams.stream(Purpose::Benchmark, 0, 0);
    let u = gaussian_vector(encoder.hidden_dim(), 1.0, &mut urng);
    let u = &u / u.dot(&u).sqrt();
    let source = (1.0 + cfg.rho) / 2.0;
    let target = (1.0 - cfg.rho) / 2.0;
    let episode = |slot: u64, per_label: usize, agree: f64| -> Result<Vec<Example>> {
        let mut rng = streams.stream(Purpose::Benchmark, 1, slot);
        let mut out = Vec::with_capacity(2 * per_label);
        for i in 0..2 * per_label {
            out.push(shifted_pair(encoder, held, &u, cfg.nuisance_scale, i % 2, agree, &reference, &mut rng)?);
        }
        Ok(out)
    };
    let half = cfg.test_per_domain.div_ceil(2);
    Ok(DownstreamTask {
        format: TaskFormat::SentencePair,
        train: episode(0, cfg.shots, source)?,
        validation: episode(1, cfg.validation_per_label, source)?,
        tests: vec![
            (SOURCE.to_string(), episode(2, half, source)?),
            (TARGET.to_string(), episode(3, half, target)?),
        ],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct BenchmarkConfig {
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub shift: ShiftConfig,
    pub tune: TuneConfig,
}


pub const SUPMER: &str = "supmer";
pub const VANILLA: &str = "vanilla";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub method: String,
    pub domain: String,
    pub initial: f64,
    pub best: f64,
    pub best_step: usize,
    pub last: f64,
    pub curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub domain: String,
    pub seeds: usize,
    pub best_mean: f64,
    pub best_std: f64,
    pub last_mean: f64,
    pub last_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seeds: Vec<u64>,
    pub eval_interval: usize,
    pub runs: Vec<RunRecord>,
    pub summary: Vec<Summary>,
}

impl BenchmarkReport {
    pub fn summary(&self, method: &str, domain: &str) -> Option<&Summary> {
        self.summary.iter().find(|s| s.method == method && s.domain == domain)
    }

    pub fn runs(&self, method: &str, domain: &str) -> impl Iterator<Item = &RunRecord> {
        let (m, d) = (method.to_string(), domain.to_string());
        self.runs.iter().filter(move |r| r.method == m && r.domain == d)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn record(seed: u64, method: &str, domain: &str, curve: &[f64], interval: usize) -> RunRecord {
    // first maximum wins
    let (best_idx, best) = curve
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    RunRecord {
        seed,
        method: method.into(),
        domain: domain.into(),
        initial: curve[0],
        best,
        best_step: best_idx * interval,
        last: *curve.last().expect("curve has the step-0 entry"),
        curve: curve.to_vec(),
    }
}

/// The per-seed part of the benchmark: meta-train, build the shifted task,
/// tune from the meta-learned prompt and from a random one.
pub fn benchmark_seed(cfg: &BenchmarkConfig, seed: u64) -> Result<Vec<RunRecord>> {
    let pcfg = PipelineConfig {
        seed,
        ..cfg.pipeline.clone()
    };
    let tcfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let models = frozen_models(&pcfg, pcfg.corpus.vocab_size, tcfg.prompt_dim)?;
    let frozen = Frozen {
        scorer: &models.scorer,
        encoder: &models.encoder,
    };
    let pool = build_pool(&pcfg, &models.encoder, None)?;
    let state = MetaState::initial(&tcfg, pcfg.hidden_dim);
    let trained = meta_train(frozen, &pool.train_tasks, &pool.val_tasks, &tcfg, state)?;

    let streams = Streams::new(seed);
    let held = HeldOut::new(&models.encoder, &pool.val_corpus, &pool.train_clusters)?;
    let task = shift_task(&models.encoder, &held, &pool.train_clusters, &cfg.shift, streams.derive_seed(Purpose::Benchmark, 0))?;
    let phi = tcfg.regularizer.then_some(&trained.best_phi);
    let supmer = prompt_tune(frozen, &trained.best_theta, phi, &task, &cfg.tune)?;
    let vanilla = run_vanilla_pt(
        frozen,
        &task,
        tcfg.prompt_tokens,
        tcfg.prompt_init_std,
        &cfg.tune,
        streams.derive_seed(Purpose::Downstream, 0),
    )?;
    let mut out = Vec::new();
    for (method, outcome) in [(SUPMER, &supmer), (VANILLA, &vanilla)] {
        for (domain, curve) in &outcome.curves.tests {
            out.push(record(seed, method, domain, curve, cfg.tune.eval_interval));
        }
    }
    Ok(out)
}

/// Runs every seed and both methods. Seeds are processed and reported in
/// ascending order.
pub fn domain_shift_benchmark(cfg: &BenchmarkConfig, seeds: &[u64]) -> Result<BenchmarkReport> {
    if seeds.len() < 2 {
        return Err(Error::InvalidConfig("the benchmark needs at least two seeds".into()));
    }
    cfg.shift.validate()?;
    cfg.tune.validate()?;
    cfg.train.validate()?;
    let mut seeds = seeds.to_vec();
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.len() < 2 {
        return Err(Error::InvalidConfig("the benchmark needs at least two distinct seeds".into()));
    }
    let mut runs = Vec::new();
    for &seed in &seeds {
        info!("benchmark seed {seed}");
        runs.extend(benchmark_seed(cfg, seed)?);
    }
    let mut summary = Vec::new();
    for method in [SUPMER, VANILLA] {
        for domain in [SOURCE, TARGET] {
            let sel: Vec<&RunRecord> = runs.iter().filter(|r| r.method == method && r.domain == domain).collect();
            let best: Vec<f64> = sel.iter().map(|r| r.best).collect();
            let last: Vec<f64> = sel.iter().map(|r| r.last).collect();
            let (best_mean, best_std) = mean_std(&best);
            let (last_mean, last_std) = mean_std(&last);
            summary.push(Summary {
                method: method.into(),
                domain: domain.into(),
                seeds: sel.len(),
                best_mean,
                best_std,
                last_mean,
                last_std,
            });
        }
    }
    Ok(BenchmarkReport {
        seeds,
        eval_interval: cfg.tune.eval_interval,
        runs,
        summary,
    })
}
