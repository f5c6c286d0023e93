//! Corpus-to-task-pool pipeline: split, embed, cluster, generate.

use log::info;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, ClusterModel, KMeansConfig};
use crate::corpus::{generate_synthetic, split_validation, Corpus, SyntheticConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::promptmodel::{Scorer, ScorerConfig};
use crate::rng::{Purpose, Streams};
use crate::taskgen::{embed_corpus, make_all_tasks, MetaTask, TaskContext, TaskFormat, TaskGenConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub corpus: SyntheticConfig,
    pub clusters: usize,
    pub kmeans_max_iters: usize,
    pub val_fraction: f64,
    pub task_gen: TaskGenConfig,
    pub formats: Vec<TaskFormat>,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub scorer_width: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: SyntheticConfig {
                docs: 400,
                ..SyntheticConfig::default()
            },
            clusters: 16,
            kmeans_max_iters: 100,
            val_fraction: 0.1,
            task_gen: TaskGenConfig::default(),
            formats: TaskFormat::ALL.to_vec(),
            embed_dim: 32,
            hidden_dim: 32,
            scorer_width: 64,
            seed: 0,
        }
    }
}

/// Frozen models of one run, all derived from the run seed.
pub struct FrozenModels {
    pub encoder: Encoder,
    pub scorer: Scorer,
}

pub fn frozen_models(cfg: &PipelineConfig, vocab_size: usize, prompt_dim: usize) -> Result<FrozenModels> {
    let streams = Streams::new(cfg.seed);
    let encoder = Encoder::new(EncoderConfig {
        vocab_size,
        embed_dim: cfg.embed_dim,
        hidden_dim: cfg.hidden_dim,
        seed: streams.derive_seed(Purpose::Encoder, 0),
    })?;
    let scorer = Scorer::new(ScorerConfig {
        prompt_dim,
        hidden_dim: cfg.hidden_dim,
        width: cfg.scorer_width,
        seed: streams.derive_seed(Purpose::Scorer, 0),
    })?;
    Ok(FrozenModels { encoder, scorer })
}

pub struct TaskPool {
    pub train_corpus: Corpus,
    pub val_corpus: Corpus,
    pub train_clusters: ClusterModel,
    pub train_tasks: Vec<MetaTask>,
    pub val_tasks: Vec<MetaTask>,
}

/// Clusters one corpus and builds its tasks.
pub fn tasks_for_corpus(
    corpus: &Corpus,
    encoder: &Encoder,
    k: usize,
    max_iters: usize,
    task_gen: &TaskGenConfig,
    formats: &[TaskFormat],
    seed: u64,
) -> Result<(ClusterModel, Vec<MetaTask>)> {
    let emb = embed_corpus(encoder, corpus)?;
    let model = kmeans(
        emb.view(),
        &KMeansConfig {
            k,
            max_iters,
            tol: 1e-9,
            seed,
        },
    )?;
    let ctx = TaskContext::new(corpus, encoder, &model, &emb)?;
    let tasks = make_all_tasks(&ctx, task_gen, formats, seed)?;
    Ok((model, tasks))
}

/// Generates (or takes) a corpus, splits off validation documents, and
/// builds both task pools. The validation side is clustered on its own
/// with `max(4, min(k, n_val / episode))` clusters so its tasks can fill
/// episodes.
pub fn build_pool(cfg: &PipelineConfig, encoder: &Encoder, corpus: Option<Corpus>) -> Result<TaskPool> {
    let streams = Streams::new(cfg.seed);
    let corpus = match corpus {
        Some(c) => c,
        None => generate_synthetic(&SyntheticConfig {
            seed: streams.derive_seed(Purpose::Corpus, 0),
            ..cfg.corpus.clone()
        })?,
    };
    corpus.validate()?;
    let (train, val) = split_validation(&corpus, cfg.val_fraction, streams.derive_seed(Purpose::Split, 0))?;
    let task_seed = streams.derive_seed(Purpose::TaskGen, 0);
    let (train_clusters, train_tasks) = tasks_for_corpus(
        &train,
        encoder,
        cfg.clusters,
        cfg.kmeans_max_iters,
        &cfg.task_gen,
        &cfg.formats,
        task_seed,
    )?;
    if train_tasks.is_empty() {
        return Err(Error::Insufficient("no training tasks could be built".into()));
    }
    let k_val = (val.num_sentences() / cfg.task_gen.episode_size()).clamp(4, cfg.clusters.max(4));
    let val_tasks = if val.num_sentences() >= k_val {
        tasks_for_corpus(
            &val,
            encoder,
            k_val,
            cfg.kmeans_max_iters,
            &TaskGenConfig {
                tasks_per_cluster: 1,
                ..cfg.task_gen
            },
            &cfg.formats,
            task_seed ^ 1,
        )?
        .1
    } else {
        Vec::new()
    };
    info!(
        "task pool: {} train tasks from {} sentences, {} validation tasks from {} sentences",
        train_tasks.len(),
        train.num_sentences(),
        val_tasks.len(),
        val.num_sentences()
    );
    Ok(TaskPool {
        train_corpus: train,
        val_corpus: val,
        train_clusters,
        train_tasks,
        val_tasks,
    })
}
