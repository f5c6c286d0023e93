//! Anchor meta-task construction in three formats.
//!
//! * `sp` sentence pairs over a shared 3-class space. Next-sentence pairs
//!   use adjacent = 0, other document = 1, same document but not adjacent
//!   = 2. Similarity pairs use same cluster = 0, other cluster = 1.
//! * `mc` multi-choice: a query sentence and four candidates, exactly one
//!   of which is adjacent to it (or shares its cluster).
//! * `ss` single-sentence: four sampled clusters act as classes, their
//!   centroids fill the candidate slots, and the label is the sentence's
//!   own cluster.
//!
//! `sp` and `mc` tasks group examples whose anchor sentence shares a
//! cluster. Generation first produces index-level drafts, which keep enough
//! provenance to re-derive every label, and then materializes them through
//! the frozen encoder.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterModel;
use crate::corpus::Corpus;
use crate::encoder::{Encoder, Hidden, HiddenFormat, NUM_CANDIDATES};
use crate::error::{Error, Result};
use crate::rng::{Purpose, Streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskFormat {
    #[serde(rename = "sp")]
    SentencePair,
    #[serde(rename = "mc")]
    MultiChoice,
    #[serde(rename = "ss")]
    SingleSentence,
}

impl TaskFormat {
    pub const ALL: [TaskFormat; 3] = [
        TaskFormat::SentencePair,
        TaskFormat::MultiChoice,
        TaskFormat::SingleSentence,
    ];

    pub fn hidden_format(self) -> HiddenFormat {
        match self {
            TaskFormat::SentencePair => HiddenFormat::Pair,
            _ => HiddenFormat::Choice,
        }
    }

    pub fn classes(self) -> usize {
        self.hidden_format().classes()
    }

    pub fn tag(self) -> &'static str {
        match self {
            TaskFormat::SentencePair => "sp",
            TaskFormat::MultiChoice => "mc",
            TaskFormat::SingleSentence => "ss",
        }
    }
}

impl std::str::FromStr for TaskFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sp" => Ok(TaskFormat::SentencePair),
            "mc" => Ok(TaskFormat::MultiChoice),
            "ss" => Ok(TaskFormat::SingleSentence),
            other => Err(Error::Parse(format!("unknown task format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub hidden: Hidden,
    /// Point on the probability simplex; 3 entries for `sp`, 4 otherwise.
    pub soft_label: Array1<f64>,
}

impl Example {
    pub fn new(hidden: Hidden, soft_label: Array1<f64>) -> Result<Self> {
        if soft_label.len() != hidden.format.classes() {
            return Err(Error::Shape(format!(
                "{:?} example needs {} label entries, got {}",
                hidden.format,
                hidden.format.classes(),
                soft_label.len()
            )));
        }
        if !is_simplex(soft_label.view()) {
            return Err(Error::Shape("soft label is not on the simplex".into()));
        }
        Ok(Self { hidden, soft_label })
    }
}

pub fn is_simplex(y: ArrayView1<f64>) -> bool {
    y.iter().all(|v| *v >= 0.0 && v.is_finite()) && (y.sum() - 1.0).abs() <= 1e-9
}

pub fn one_hot(classes: usize, index: usize) -> Array1<f64> {
    let mut y = Array1::zeros(classes);
    y[index] = 1.0;
    y
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaTask {
    pub format: TaskFormat,
    pub support: Vec<Example>,
    pub query: Vec<Example>,
    pub anchor_cluster: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskGenConfig {
    pub support_size: usize,
    pub query_size: usize,
    /// Share of next-sentence (`sp`) or adjacency (`mc`) examples in a task;
    /// the rest are cluster-similarity examples.
    pub adjacency_fraction: f64,
    /// Upper bound on `sp`/`mc` tasks drawn from one cluster.
    pub tasks_per_cluster: usize,
    /// Number of `ss` tasks; 0 means `k * tasks_per_cluster`.
    pub ss_tasks: usize,
}

impl Default for TaskGenConfig {
    fn default() -> Self {
        Self {
            support_size: 32,
            query_size: 32,
            adjacency_fraction: 0.5,
            tasks_per_cluster: 2,
            ss_tasks: 0,
        }
    }
}

impl TaskGenConfig {
    pub fn episode_size(&self) -> usize {
        self.support_size + self.query_size
    }

    fn check(&self) -> Result<()> {
        if self.support_size == 0 || self.query_size == 0 {
            return Err(Error::InvalidConfig("support and query sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.adjacency_fraction) {
            return Err(Error::InvalidConfig("adjacency_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Everything task generation reads: corpus, embeddings, clustering, encoder.
pub struct TaskContext<'a> {
    pub corpus: &'a Corpus,
    pub encoder: &'a Encoder,
    pub clusters: &'a ClusterModel,
    /// `n x d_h` sentence embeddings in flat corpus order.
    pub embeddings: &'a Array2<f64>,
    doc_of: Vec<usize>,
    pos_of: Vec<usize>,
    doc_offsets: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl<'a> TaskContext<'a> {
    pub fn new(
        corpus: &'a Corpus,
        encoder: &'a Encoder,
        clusters: &'a ClusterModel,
        embeddings: &'a Array2<f64>,
    ) -> Result<Self> {
        let n = corpus.num_sentences();
        if embeddings.nrows() != n || clusters.assignment.len() != n {
            return Err(Error::Shape(format!(
                "corpus has {n} sentences, embeddings {} and clustering {}",
                embeddings.nrows(),
                clusters.assignment.len()
            )));
        }
        let mut doc_of = Vec::with_capacity(n);
        let mut pos_of = Vec::with_capacity(n);
        for (r, _) in corpus.sentences() {
            doc_of.push(r.doc);
            pos_of.push(r.pos);
        }
        Ok(Self {
            corpus,
            encoder,
            clusters,
            embeddings,
            doc_of,
            pos_of,
            doc_offsets: corpus.doc_offsets(),
            members: clusters.members(),
        })
    }

    pub fn num_sentences(&self) -> usize {
        self.doc_of.len()
    }

    /// Container index of the sentence's document.
    pub fn doc(&self, i: usize) -> usize {
        self.doc_of[i]
    }

    pub fn pos(&self, i: usize) -> usize {
        self.pos_of[i]
    }

    pub fn cluster(&self, i: usize) -> usize {
        self.clusters.assignment[i]
    }

    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        self.doc(a) == self.doc(b) && self.pos(a).abs_diff(self.pos(b)) == 1
    }

    fn doc_len(&self, doc: usize) -> usize {
        self.corpus.documents[doc].len()
    }

    fn at(&self, doc: usize, pos: usize) -> usize {
        self.doc_offsets[doc] + pos
    }

    fn embedding(&self, i: usize) -> Array1<f64> {
        self.embeddings.row(i).to_owned()
    }
}

/// Embeds every sentence of `corpus` in flat order.
pub fn embed_corpus(encoder: &Encoder, corpus: &Corpus) -> Result<Array2<f64>> {
    let n = corpus.num_sentences();
    let mut out = Array2::zeros((n, encoder.hidden_dim()));
    for (r, s) in corpus.sentences() {
        out.row_mut(r.flat).assign(&encoder.embed(&s.tokens)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    NextSentence,
    Similarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChoiceKind {
    Adjacent,
    SameCluster,
}

/// One example in index form, before encoding. Sentence ids are flat corpus
/// indices.
#[derive(Debug, Clone, PartialEq)]
pub enum Draft {
    Pair {
        anchor: usize,
        other: usize,
        kind: PairKind,
        label: usize,
    },
    Choice {
        query: usize,
        candidates: [usize; NUM_CANDIDATES],
        kind: ChoiceKind,
        label: usize,
    },
    Single {
        sentence: usize,
        clusters: [usize; NUM_CANDIDATES],
        label: usize,
    },
}

impl Draft {
    pub fn label(&self) -> usize {
        match self {
            Draft::Pair { label, .. } | Draft::Choice { label, .. } | Draft::Single { label, .. } => *label,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDraft {
    pub format: TaskFormat,
    pub anchor_cluster: usize,
    pub support: Vec<Draft>,
    pub query: Vec<Draft>,
}

/// Disjoint seeded split of `examples` into `(support, query)`.
pub fn episode_split<T: Clone, R: Rng + ?Sized>(
    examples: &[T],
    support_size: usize,
    query_size: usize,
    rng: &mut R,
) -> Result<(Vec<T>, Vec<T>)> {
    if examples.len() < support_size + query_size {
        return Err(Error::Insufficient(format!(
            "{} examples cannot fill {support_size} support + {query_size} query",
            examples.len()
        )));
    }
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(rng);
    let support = idx[..support_size].iter().map(|&i| examples[i].clone()).collect();
    let query = idx[support_size..support_size + query_size]
        .iter()
        .map(|&i| examples[i].clone())
        .collect();
    Ok((support, query))
}

fn format_slot(format: TaskFormat) -> u64 {
    match format {
        TaskFormat::SentencePair => 0,
        TaskFormat::MultiChoice => 1,
        TaskFormat::SingleSentence => 2,
    }
}

fn pick_pair<R: Rng>(ctx: &TaskContext, anchor: usize, kind: PairKind, rng: &mut R) -> Option<Draft> {
    let doc = ctx.doc(anchor);
    let pos = ctx.pos(anchor);
    let len = ctx.doc_len(doc);
    let n = ctx.num_sentences();
    let (other, label) = match kind {
        PairKind::NextSentence => {
            let mut labels = Vec::with_capacity(3);
            if len > 1 {
                labels.push(0);
            }
            if len > 2 && (0..len).any(|q| q.abs_diff(pos) >= 2) {
                labels.push(2);
            }
            if ctx.corpus.num_documents() > 1 {
                labels.push(1);
            }
            let label = *labels.choose(rng)?;
            let other = match label {
                0 => {
                    let mut adj = Vec::with_capacity(2);
                    if pos > 0 {
                        adj.push(pos - 1);
                    }
                    if pos + 1 < len {
                        adj.push(pos + 1);
                    }
                    ctx.at(doc, *adj.choose(rng)?)
                }
                2 => {
                    let far: Vec<usize> = (0..len).filter(|q| q.abs_diff(pos) >= 2).collect();
                    ctx.at(doc, *far.choose(rng)?)
                }
                _ => loop {
                    let j = rng.random_range(0..n);
                    if ctx.doc(j) != doc {
                        break j;
                    }
                },
            };
            (other, label)
        }
        PairKind::Similarity => {
            let c = ctx.cluster(anchor);
            let same = &ctx.members[c];
            let want_same = rng.random::<bool>();
            if want_same && same.len() > 1 {
                let other = loop {
                    let j = *same.choose(rng)?;
                    if j != anchor {
                        break j;
                    }
                };
                (other, 0)
            } else if same.len() < n {
                let other = loop {
                    let j = rng.random_range(0..n);
                    if ctx.cluster(j) != c {
                        break j;
                    }
                };
                (other, 1)
            } else {
                return None;
            }
        }
    };
    Some(Draft::Pair {
        anchor,
        other,
        kind,
        label,
    })
}

fn pick_choice<R: Rng>(ctx: &TaskContext, query: usize, kind: ChoiceKind, rng: &mut R) -> Option<Draft> {
    let doc = ctx.doc(query);
    let pos = ctx.pos(query);
    let cluster = ctx.cluster(query);
    let correct = match kind {
        ChoiceKind::Adjacent => {
            let len = ctx.doc_len(doc);
            let mut adj = Vec::with_capacity(2);
            if pos > 0 {
                adj.push(pos - 1);
            }
            if pos + 1 < len {
                adj.push(pos + 1);
            }
            ctx.at(doc, *adj.choose(rng)?)
        }
        ChoiceKind::SameCluster => {
            let same = &ctx.members[cluster];
            if same.len() < 2 {
                return None;
            }
            loop {
                let j = *same.choose(rng)?;
                if j != query {
                    break j;
                }
            }
        }
    };
    // negatives come from other documents and other clusters
    let n = ctx.num_sentences();
    let mut negatives = Vec::with_capacity(NUM_CANDIDATES - 1);
    let mut tries = 0;
    while negatives.len() < NUM_CANDIDATES - 1 {
        tries += 1;
        if tries > 64 * n.max(8) {
            return None;
        }
        let j = rng.random_range(0..n);
        if ctx.doc(j) == doc || ctx.cluster(j) == cluster || j == correct || negatives.contains(&j) {
            continue;
        }
        negatives.push(j);
    }
    let label = rng.random_range(0..NUM_CANDIDATES);
    let mut candidates = [0usize; NUM_CANDIDATES];
    let mut neg = negatives.into_iter();
    for (slot, c) in candidates.iter_mut().enumerate() {
        *c = if slot == label { correct } else { neg.next()? };
    }
    Some(Draft::Choice {
        query,
        candidates,
        kind,
        label,
    })
}

fn cluster_grouped_drafts(
    ctx: &TaskContext,
    cfg: &TaskGenConfig,
    format: TaskFormat,
    seed: u64,
) -> Result<Vec<TaskDraft>> {
    cfg.check()?;
    let streams = Streams::new(seed);
    let episode = cfg.episode_size();
    let mut tasks = Vec::new();
    for (cluster, members) in ctx.members.iter().enumerate() {
        if members.len() < episode {
            warn!(
                "{}: cluster {cluster} has {} sentences, fewer than one episode ({episode}); skipped",
                format.tag(),
                members.len()
            );
            continue;
        }
        let mut rng = streams.stream(Purpose::TaskGen, format_slot(format), cluster as u64);
        let mut anchors = members.clone();
        anchors.shuffle(&mut rng);
        let n_tasks = (members.len() / episode).min(cfg.tasks_per_cluster);
        for chunk in anchors.chunks(episode).take(n_tasks) {
            let n_adj = (cfg.adjacency_fraction * chunk.len() as f64).round() as usize;
            let mut drafts = Vec::with_capacity(chunk.len());
            for (i, &a) in chunk.iter().enumerate() {
                let adjacency = i < n_adj;
                let d = match format {
                    TaskFormat::SentencePair => {
                        let kind = if adjacency { PairKind::NextSentence } else { PairKind::Similarity };
                        pick_pair(ctx, a, kind, &mut rng)
                    }
                    _ => {
                        let kind = if adjacency { ChoiceKind::Adjacent } else { ChoiceKind::SameCluster };
                        pick_choice(ctx, a, kind, &mut rng)
                    }
                };
                if let Some(d) = d {
                    drafts.push(d);
                }
            }
            match episode_split(&drafts, cfg.support_size, cfg.query_size, &mut rng) {
                Ok((support, query)) => tasks.push(TaskDraft {
                    format,
                    anchor_cluster: cluster,
                    support,
                    query,
                }),
                Err(e) => warn!("{}: cluster {cluster}: {e}; skipped", format.tag()),
            }
        }
    }
    Ok(tasks)
}

pub fn draft_sentence_pair_tasks(ctx: &TaskContext, cfg: &TaskGenConfig, seed: u64) -> Result<Vec<TaskDraft>> {
    cluster_grouped_drafts(ctx, cfg, TaskFormat::SentencePair, seed)
}

pub fn draft_multi_choice_tasks(ctx: &TaskContext, cfg: &TaskGenConfig, seed: u64) -> Result<Vec<TaskDraft>> {
    cluster_grouped_drafts(ctx, cfg, TaskFormat::MultiChoice, seed)
}

/// `N = 4`-way single-sentence tasks with clusters as classes.
pub fn draft_single_sentence_tasks(ctx: &TaskContext, cfg: &TaskGenConfig, seed: u64) -> Result<Vec<TaskDraft>> {
    cfg.check()?;
    let k = ctx.clusters.k();
    if k < NUM_CANDIDATES {
        return Err(Error::Insufficient(format!(
            "single-sentence tasks need at least {NUM_CANDIDATES} clusters, have {k}"
        )));
    }
    let shots = cfg.episode_size().div_ceil(NUM_CANDIDATES);
    let eligible: Vec<usize> = (0..k).filter(|&c| ctx.members[c].len() >= shots).collect();
    if eligible.len() < NUM_CANDIDATES {
        warn!(
            "ss: only {} clusters hold {shots} sentences; no single-sentence tasks",
            eligible.len()
        );
        return Ok(Vec::new());
    }
    let count = if cfg.ss_tasks > 0 {
        cfg.ss_tasks
    } else {
        k * cfg.tasks_per_cluster
    };
    let streams = Streams::new(seed);
    let mut tasks = Vec::with_capacity(count);
    for t in 0..count {
        let mut rng = streams.stream(Purpose::TaskGen, format_slot(TaskFormat::SingleSentence), t as u64);
        let chosen: Vec<usize> = eligible.choose_multiple(&mut rng, NUM_CANDIDATES).copied().collect();
        let classes: [usize; NUM_CANDIDATES] = chosen.clone().try_into().expect("four clusters");
        let mut drafts = Vec::with_capacity(shots * NUM_CANDIDATES);
        for (label, &c) in classes.iter().enumerate() {
            for &s in ctx.members[c].choose_multiple(&mut rng, shots) {
                drafts.push(Draft::Single {
                    sentence: s,
                    clusters: classes,
                    label,
                });
            }
        }
        let (support, query) = episode_split(&drafts, cfg.support_size, cfg.query_size, &mut rng)?;
        tasks.push(TaskDraft {
            format: TaskFormat::SingleSentence,
            anchor_cluster: classes[0],
            support,
            query,
        });
    }
    Ok(tasks)
}

pub fn materialize_example(ctx: &TaskContext, draft: &Draft) -> Result<Example> {
    let enc = ctx.encoder;
    match draft {
        Draft::Pair { anchor, other, label, .. } => Example::new(
            enc.compose_pair(&ctx.embedding(*anchor), &ctx.embedding(*other))?,
            one_hot(3, *label),
        ),
        Draft::Choice {
            query,
            candidates,
            label,
            ..
        } => {
            let cands: Vec<Array1<f64>> = candidates.iter().map(|&c| ctx.embedding(c)).collect();
            Example::new(
                enc.compose_choice(&ctx.embedding(*query), &cands)?,
                one_hot(NUM_CANDIDATES, *label),
            )
        }
        Draft::Single {
            sentence,
            clusters,
            label,
        } => {
            let cents: Vec<Array1<f64>> = clusters.iter().map(|&c| ctx.clusters.centroid(c)).collect();
            Example::new(
                enc.compose_choice(&ctx.embedding(*sentence), &cents)?,
                one_hot(NUM_CANDIDATES, *label),
            )
        }
    }
}

pub fn materialize(ctx: &TaskContext, draft: &TaskDraft) -> Result<MetaTask> {
    let conv = |ds: &[Draft]| ds.iter().map(|d| materialize_example(ctx, d)).collect::<Result<Vec<_>>>();
    Ok(MetaTask {
        format: draft.format,
        support: conv(&draft.support)?,
        query: conv(&draft.query)?,
        anchor_cluster: draft.anchor_cluster,
    })
}

fn materialize_all(ctx: &TaskContext, drafts: Vec<TaskDraft>) -> Result<Vec<MetaTask>> {
    drafts.iter().map(|d| materialize(ctx, d)).collect()
}

pub fn make_sentence_pair_tasks(ctx: &TaskContext, cfg: &TaskGenConfig, seed: u64) -> Result<Vec<MetaTask>> {
    materialize_all(ctx, draft_sentence_pair_tasks(ctx, cfg, seed)?)
}

pub fn make_multi_choice_tasks(ctx: &TaskContext, cfg: &TaskGenConfig, seed: u64) -> Result<Vec<MetaTask>> {
    materialize_all(ctx, draft_multi_choice_tasks(ctx, cfg, seed)?)
}

pub fn make_single_sentence_tasks(ctx: &TaskContext, cfg: &TaskGenConfig, seed: u64) -> Result<Vec<MetaTask>> {
    materialize_all(ctx, draft_single_sentence_tasks(ctx, cfg, seed)?)
}

/// All enabled formats, in `sp`, `mc`, `ss` order.
pub fn make_all_tasks(
    ctx: &TaskContext,
    cfg: &TaskGenConfig,
    formats: &[TaskFormat],
    seed: u64,
) -> Result<Vec<MetaTask>> {
    let mut out = Vec::new();
    for f in TaskFormat::ALL {
        if !formats.contains(&f) {
            continue;
        }
        out.extend(match f {
            TaskFormat::SentencePair => make_sentence_pair_tasks(ctx, cfg, seed)?,
            TaskFormat::MultiChoice => make_multi_choice_tasks(ctx, cfg, seed)?,
            TaskFormat::SingleSentence => make_single_sentence_tasks(ctx, cfg, seed)?,
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    h: Vec<f64>,
    y: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TaskRecord {
    format: TaskFormat,
    cluster: usize,
    support: Vec<ExampleRecord>,
    query: Vec<ExampleRecord>,
}

fn to_record(t: &MetaTask) -> TaskRecord {
    let conv = |xs: &[Example]| {
        xs.iter()
            .map(|e| ExampleRecord {
                h: e.hidden.values.to_vec(),
                y: e.soft_label.to_vec(),
            })
            .collect()
    };
    TaskRecord {
        format: t.format,
        cluster: t.anchor_cluster,
        support: conv(&t.support),
        query: conv(&t.query),
    }
}

fn from_record(r: TaskRecord) -> Result<MetaTask> {
    let hf = r.format.hidden_format();
    let conv = |xs: Vec<ExampleRecord>| {
        xs.into_iter()
            .map(|e| {
                let d_h = e.h.len() / hf.blocks();
                Example::new(Hidden::new(Array1::from(e.h), hf, d_h)?, Array1::from(e.y))
            })
            .collect::<Result<Vec<_>>>()
    };
    Ok(MetaTask {
        format: r.format,
        support: conv(r.support)?,
        query: conv(r.query)?,
        anchor_cluster: r.cluster,
    })
}

pub fn task_to_json(task: &MetaTask) -> Result<String> {
    Ok(serde_json::to_string(&to_record(task))?)
}

pub fn task_from_json(line: &str) -> Result<MetaTask> {
    from_record(serde_json::from_str(line)?)
}

/// Writes one task per line.
pub fn write_tasks(path: impl AsRef<Path>, tasks: &[MetaTask]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in tasks {
        writeln!(w, "{}", task_to_json(t)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tasks(path: impl AsRef<Path>) -> Result<Vec<MetaTask>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(task_from_json(&line)?);
    }
    Ok(out)
}
