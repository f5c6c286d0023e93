//! Sentence corpora: synthetic generation, plain-text IO and document splits.

use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, Streams};
use crate::sampling::dirichlet_symmetric;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<u32>,
    pub doc_id: usize,
    pub pos: usize,
}

/// Ordered documents of sentences over a vocabulary of `vocab_size` ids.
///
/// `doc_id` is a stable identifier that survives splitting, so it need not
/// equal the container index. `pos` always equals the index within the
/// document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<Vec<Sentence>>,
    pub vocab_size: usize,
}

/// Location of a sentence inside a corpus, plus its flat index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SentenceRef {
    pub flat: usize,
    pub doc: usize,
    pub pos: usize,
}

impl Corpus {
    pub fn num_documents(&self) -> usize {
        self.documents.len()
    }

    pub fn num_sentences(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }

    /// Sentences in document order with their flat indices.
    pub fn sentences(&self) -> impl Iterator<Item = (SentenceRef, &Sentence)> {
        self.documents
            .iter()
            .enumerate()
            .flat_map(|(d, doc)| doc.iter().enumerate().map(move |(p, s)| (d, p, s)))
            .enumerate()
            .map(|(flat, (doc, pos, s))| (SentenceRef { flat, doc, pos }, s))
    }

    /// Index of the first sentence of each document in flat order.
    pub fn doc_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.documents
            .iter()
            .map(|d| {
                let o = acc;
                acc += d.len();
                o
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.documents.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut seen = std::collections::HashSet::new();
        for doc in &self.documents {
            let first = doc
                .first()
                .ok_or_else(|| Error::InvalidConfig("empty document".into()))?;
            if !seen.insert(first.doc_id) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate doc_id {}",
                    first.doc_id
                )));
            }
            for (p, s) in doc.iter().enumerate() {
                if s.pos != p || s.doc_id != first.doc_id {
                    return Err(Error::InvalidConfig(format!(
                        "sentence position mismatch in doc {}",
                        first.doc_id
                    )));
                }
                if s.tokens.is_empty() {
                    return Err(Error::InvalidConfig("empty sentence".into()));
                }
                if s.tokens.iter().any(|&t| t as usize >= self.vocab_size) {
                    return Err(Error::InvalidConfig("token id out of range".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub topics: usize,
    pub docs: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub vocab_size: usize,
    /// Dirichlet concentration of each topic's token distribution.
    pub topic_concentration: f64,
    /// Probability that a token comes from the document's local window
    /// rather than the topic. Gives adjacent sentences extra overlap.
    pub local_mix: f64,
    /// Number of local words visible to one sentence.
    pub local_window: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            topics: 8,
            docs: 200,
            min_sentences: 8,
            max_sentences: 20,
            min_tokens: 10,
            max_tokens: 20,
            vocab_size: 512,
            topic_concentration: 0.05,
            local_mix: 0.3,
            local_window: 3,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    fn check(&self) -> Result<()> {
        if self.docs == 0 {
            return Err(Error::EmptyCorpus);
        }
        if self.topics < 2 {
            return Err(Error::InvalidConfig("topic count must be at least 2".into()));
        }
        if self.min_sentences == 0 || self.min_sentences > self.max_sentences {
            return Err(Error::InvalidConfig(format!(
                "sentence range {}..={} is invalid",
                self.min_sentences, self.max_sentences
            )));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::InvalidConfig(format!(
                "token range {}..={} is invalid",
                self.min_tokens, self.max_tokens
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig("vocab_size must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.local_mix) || self.local_window == 0 {
            return Err(Error::InvalidConfig("local_mix must lie in [0, 1] and local_window be positive".into()));
        }
        Ok(())
    }
}

/// Topic-structured synthetic corpus. Every document draws all of its
/// sentences from one latent topic; a per-document sliding window of local
/// words makes neighbouring sentences share more tokens than distant ones.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Corpus> {
    cfg.check()?;
    let streams = Streams::new(cfg.seed);
    let mut rng = streams.stream(Purpose::Corpus, 0, 0);

    let topics = (0..cfg.topics)
        .map(|_| {
            let p = dirichlet_symmetric(cfg.topic_concentration, cfg.vocab_size, &mut rng)?;
            WeightedIndex::new(&p).map_err(|e| Error::InvalidConfig(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut documents = Vec::with_capacity(cfg.docs);
    for doc_id in 0..cfg.docs {
        let topic = &topics[rng.random_range(0..cfg.topics)];
        let n = rng.random_range(cfg.min_sentences..=cfg.max_sentences);
        let local: Vec<u32> = (0..n + cfg.local_window)
            .map(|_| topic.sample(&mut rng) as u32)
            .collect();
        let doc = (0..n)
            .map(|pos| {
                let len = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
                let tokens = (0..len)
                    .map(|_| {
                        if rng.random::<f64>() < cfg.local_mix {
                            local[pos + rng.random_range(0..cfg.local_window)]
                        } else {
                            topic.sample(&mut rng) as u32
                        }
                    })
                    .collect();
                Sentence { tokens, doc_id, pos }
            })
            .collect();
        documents.push(doc);
    }
    Ok(Corpus {
        documents,
        vocab_size: cfg.vocab_size,
    })
}

/// Stable 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Maps one whitespace-delimited word to a token id. Words of the form
/// `#<id>` with `id < vocab_size` are literal ids, which is what
/// [`save_corpus`] writes.
pub fn tokenize_word(word: &str, vocab_size: usize) -> u32 {
    if let Some(id) = word.strip_prefix('#').and_then(|s| s.parse::<usize>().ok()) {
        if id < vocab_size {
            return id as u32;
        }
    }
    (fnv1a(word.as_bytes()) % vocab_size as u64) as u32
}

pub fn parse_corpus(text: &str, vocab_size: usize) -> Result<Corpus> {
    if vocab_size == 0 {
        return Err(Error::InvalidConfig("vocab_size must be positive".into()));
    }
    let mut documents: Vec<Vec<Sentence>> = Vec::new();
    let mut current: Vec<Sentence> = Vec::new();
    for line in text.lines() {
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.is_empty() {
            if !current.is_empty() {
                documents.push(std::mem::take(&mut current));
            }
            continue;
        }
        let tokens = words.iter().map(|w| tokenize_word(w, vocab_size)).collect();
        current.push(Sentence {
            tokens,
            doc_id: documents.len(),
            pos: current.len(),
        });
    }
    if !current.is_empty() {
        documents.push(current);
    }
    if documents.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(Corpus {
        documents,
        vocab_size,
    })
}

pub fn load_corpus(path: impl AsRef<Path>, vocab_size: usize) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, vocab_size)
}

pub fn render_corpus(corpus: &Corpus) -> String {
    let mut out = String::new();
    for (i, doc) in corpus.documents.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for s in doc {
            let words: Vec<String> = s.tokens.iter().map(|t| format!("#{t}")).collect();
            out.push_str(&words.join(" "));
            out.push('\n');
        }
    }
    out
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_corpus(corpus)).map_err(|e| Error::io(path, e))
}

/// Document-level split into `(train, validation)`.
///
/// The validation side receives `round(fraction * docs)` documents, at least
/// one and at most `docs - 1`. Both halves keep the original document order
/// and `doc_id`s.
pub fn split_validation(corpus: &Corpus, fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "validation fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = corpus.num_documents();
    if n < 2 {
        return Err(Error::Insufficient(format!(
            "need at least 2 documents to split, have {n}"
        )));
    }
    let n_val = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut Streams::new(seed).stream(Purpose::Split, 0, 0));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, doc) in corpus.documents.iter().enumerate() {
        if is_val[i] {
            val.push(doc.clone());
        } else {
            train.push(doc.clone());
        }
    }
    let wrap = |documents| Corpus {
        documents,
        vocab_size: corpus.vocab_size,
    };
    Ok((wrap(train), wrap(val)))
}
