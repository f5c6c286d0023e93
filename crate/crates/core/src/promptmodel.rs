//! Frozen prompt-conditioned scorer.
//!
//! The soft prompt is mean-pooled to `p` and fed, together with the hidden
//! representation of an example, into one of two frozen tanh heads:
//!
//! * pair head: `logits = W2 tanh(W1 [p; h] + b1) + b2`, three classes;
//! * choice head: one shared scorer per candidate,
//!   `logit_c = w2 . tanh(W1 [p; e_q; e_c] + b1) + b2`, four candidates.
//!
//! The loss is soft-label cross-entropy averaged over an episode. Its prompt
//! gradient is derived by hand; every prompt row receives `1/T` of the
//! gradient with respect to `p`.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::{Hidden, HiddenFormat, NUM_CANDIDATES};
use crate::error::{Error, Result};
use crate::rng::{Purpose, Streams};
use crate::sampling::{gaussian_matrix, gaussian_vector};
use crate::taskgen::Example;

/// Soft prompt: `T x d_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptState {
    pub theta: Array2<f64>,
}

impl PromptState {
    pub fn new(theta: Array2<f64>) -> Result<Self> {
        if theta.nrows() == 0 || theta.ncols() == 0 {
            return Err(Error::Shape("prompt must have at least one token and one column".into()));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("prompt has non-finite entries".into()));
        }
        Ok(Self { theta })
    }

    pub fn zeros(tokens: usize, dim: usize) -> Self {
        Self {
            theta: Array2::zeros((tokens, dim)),
        }
    }

    /// Seeded Gaussian prompt with the given standard deviation.
    pub fn random(tokens: usize, dim: usize, std: f64, seed: u64) -> Self {
        let mut rng = Streams::new(seed).stream(Purpose::Init, 0, 0);
        let flat = gaussian_vector(tokens * dim, std, &mut rng);
        Self {
            theta: flat.into_shape_with_order((tokens, dim)).expect("shape"),
        }
    }

    pub fn tokens(&self) -> usize {
        self.theta.nrows()
    }

    pub fn dim(&self) -> usize {
        self.theta.ncols()
    }

    pub fn pooled(&self) -> Array1<f64> {
        self.theta.mean_axis(Axis(0)).expect("non-empty prompt")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerConfig {
    pub prompt_dim: usize,
    pub hidden_dim: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            prompt_dim: 32,
            hidden_dim: 32,
            width: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairHead {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceHead {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scorer {
    pub pair: PairHead,
    pub choice: ChoiceHead,
    pub config: ScorerConfig,
}

impl Scorer {
    pub fn new(config: ScorerConfig) -> Result<Self> {
        let ScorerConfig {
            prompt_dim: dp,
            hidden_dim: dh,
            width,
            seed,
        } = config;
        if dp == 0 || dh == 0 || width == 0 {
            return Err(Error::InvalidConfig("scorer dimensions must be positive".into()));
        }
        let mut rng = Streams::new(seed).stream(Purpose::Scorer, 0, 0);
        let pair_in = dp + HiddenFormat::Pair.width(dh);
        let choice_in = dp + 2 * dh;
        let pair = PairHead {
            w1: gaussian_matrix(width, pair_in, &mut rng),
            b1: gaussian_vector(width, (1.0 / pair_in as f64).sqrt(), &mut rng),
            w2: gaussian_matrix(3, width, &mut rng),
            b2: gaussian_vector(3, (1.0 / width as f64).sqrt(), &mut rng),
        };
        let choice = ChoiceHead {
            w1: gaussian_matrix(width, choice_in, &mut rng),
            b1: gaussian_vector(width, (1.0 / choice_in as f64).sqrt(), &mut rng),
            w2: gaussian_vector(width, (1.0 / width as f64).sqrt(), &mut rng),
            b2: gaussian_vector(1, (1.0 / width as f64).sqrt(), &mut rng)[0],
        };
        Ok(Self {
            pair,
            choice,
            config,
        })
    }

    fn check_prompt(&self, theta: &PromptState) -> Result<()> {
        if theta.dim() != self.config.prompt_dim || theta.tokens() == 0 {
            return Err(Error::Shape(format!(
                "prompt is {}x{}, scorer expects width {}",
                theta.tokens(),
                theta.dim(),
                self.config.prompt_dim
            )));
        }
        Ok(())
    }

    pub fn logits(&self, theta: &PromptState, hidden: &Hidden) -> Result<Array1<f64>> {
        self.check_prompt(theta)?;
        let prepared = self.prepare_hidden(hidden)?;
        let u = self.prompt_preactivations(&theta.pooled());
        Ok(self.forward_prepared(&prepared, &u).0)
    }

    /// Mean soft-label cross-entropy over `episode`.
    pub fn loss(&self, theta: &PromptState, episode: &[Example]) -> Result<f64> {
        Ok(self.loss_and_grad(theta, episode)?.0)
    }

    pub fn grad_prompt(&self, theta: &PromptState, episode: &[Example]) -> Result<Array2<f64>> {
        Ok(self.loss_and_grad(theta, episode)?.1)
    }

    pub fn loss_and_grad(&self, theta: &PromptState, episode: &[Example]) -> Result<(f64, Array2<f64>)> {
        self.check_prompt(theta)?;
        self.prepare(episode)?.loss_and_grad(self, theta)
    }

    /// Caches the prompt-independent part of every pre-activation.
    pub fn prepare(&self, episode: &[Example]) -> Result<PreparedEpisode> {
        if episode.is_empty() {
            return Err(Error::Empty("episode"));
        }
        let items = episode
            .iter()
            .map(|ex| {
                let p = self.prepare_hidden(&ex.hidden)?;
                if ex.soft_label.len() != ex.hidden.format.classes() {
                    return Err(Error::Shape(format!(
                        "label of length {} for {:?} example",
                        ex.soft_label.len(),
                        ex.hidden.format
                    )));
                }
                Ok((p, ex.soft_label.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedEpisode { items })
    }

    fn prepare_hidden(&self, hidden: &Hidden) -> Result<Prepared> {
        let dp = self.config.prompt_dim;
        let dh = self.config.hidden_dim;
        if hidden.values.len() != hidden.format.width(dh) {
            return Err(Error::Shape(format!(
                "hidden width {} does not match {:?} with d_h = {dh}",
                hidden.values.len(),
                hidden.format
            )));
        }
        match hidden.format {
            HiddenFormat::Pair => {
                let w = self.pair.w1.slice(s![.., dp..]);
                Ok(Prepared::Pair(w.dot(&hidden.values) + &self.pair.b1))
            }
            HiddenFormat::Choice => {
                let wq = self.choice.w1.slice(s![.., dp..dp + dh]);
                let wc = self.choice.w1.slice(s![.., dp + dh..]);
                let q = wq.dot(&hidden.block(0)) + &self.choice.b1;
                let cands = (0..NUM_CANDIDATES)
                    .map(|c| &q + &wc.dot(&hidden.block(c + 1)))
                    .collect();
                Ok(Prepared::Choice(cands))
            }
        }
    }

    /// `(W1_pair[:, :d_p] p, W1_choice[:, :d_p] p)`.
    fn prompt_preactivations(&self, pooled: &Array1<f64>) -> PromptPre {
        let dp = self.config.prompt_dim;
        PromptPre {
            pair: self.pair.w1.slice(s![.., ..dp]).dot(pooled),
            choice: self.choice.w1.slice(s![.., ..dp]).dot(pooled),
        }
    }

    /// Logits plus the hidden activations needed for the backward pass.
    fn forward_prepared(&self, item: &Prepared, u: &PromptPre) -> (Array1<f64>, Vec<Array1<f64>>) {
        match item {
            Prepared::Pair(a) => {
                let h = (a + &u.pair).mapv(f64::tanh);
                (self.pair.w2.dot(&h) + &self.pair.b2, vec![h])
            }
            Prepared::Choice(cands) => {
                let hs: Vec<Array1<f64>> = cands.iter().map(|a| (a + &u.choice).mapv(f64::tanh)).collect();
                let logits = hs.iter().map(|h| self.choice.w2.dot(h) + self.choice.b2).collect();
                (logits, hs)
            }
        }
    }
}

struct PromptPre {
    pair: Array1<f64>,
    choice: Array1<f64>,
}

#[derive(Debug, Clone)]
enum Prepared {
    Pair(Array1<f64>),
    Choice(Vec<Array1<f64>>),
}

/// An episode with the prompt-independent pre-activations cached, so that
/// repeated evaluations at different prompts cost one small mat-vec each.
#[derive(Debug, Clone)]
pub struct PreparedEpisode {
    items: Vec<(Prepared, Array1<f64>)>,
}

pub fn log_softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.mapv(|l| l - lse)
}

/// Index of the largest entry, first one on ties.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl PreparedEpisode {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn loss_and_grad(&self, scorer: &Scorer, theta: &PromptState) -> Result<(f64, Array2<f64>)> {
        scorer.check_prompt(theta)?;
        let u = scorer.prompt_preactivations(&theta.pooled());
        let width = scorer.config.width;
        let mut delta_pair = Array1::<f64>::zeros(width);
        let mut delta_choice = Array1::<f64>::zeros(width);
        let mut total = 0.0;
        for (item, y) in &self.items {
            let (logits, hs) = scorer.forward_prepared(item, &u);
            let logp = log_softmax(logits.view());
            total -= y.dot(&logp);
            // d/dlogits of -sum_c y_c log p_c is p * sum(y) - y
            let dlogits = logp.mapv(f64::exp) * y.sum() - y;
            match item {
                Prepared::Pair(_) => {
                    let h = &hs[0];
                    let back = scorer.pair.w2.t().dot(&dlogits);
                    delta_pair += &(back * h.mapv(|v| 1.0 - v * v));
                }
                Prepared::Choice(_) => {
                    for (c, h) in hs.iter().enumerate() {
                        let scale = dlogits[c];
                        for k in 0..width {
                            delta_choice[k] += scale * scorer.choice.w2[k] * (1.0 - h[k] * h[k]);
                        }
                    }
                }
            }
        }
        let n = self.items.len() as f64;
        let dp = scorer.config.prompt_dim;
        let grad_pooled = (scorer.pair.w1.slice(s![.., ..dp]).t().dot(&delta_pair)
            + scorer.choice.w1.slice(s![.., ..dp]).t().dot(&delta_choice))
            / n;
        let t = theta.tokens();
        let row = grad_pooled / t as f64;
        let grad = row
            .broadcast((t, dp))
            .expect("broadcast prompt gradient")
            .to_owned();
        Ok((total / n, grad))
    }

    pub fn loss(&self, scorer: &Scorer, theta: &PromptState) -> Result<f64> {
        Ok(self.loss_and_grad(scorer, theta)?.0)
    }

    /// Predicted class per example (argmax of logits).
    pub fn predictions(&self, scorer: &Scorer, theta: &PromptState) -> Result<Vec<usize>> {
        scorer.check_prompt(theta)?;
        let u = scorer.prompt_preactivations(&theta.pooled());
        Ok(self
            .items
            .iter()
            .map(|(item, _)| argmax(scorer.forward_prepared(item, &u).0.view()))
            .collect())
    }

    /// Fraction of examples whose predicted class equals the label argmax.
    pub fn accuracy(&self, scorer: &Scorer, theta: &PromptState) -> Result<f64> {
        let preds = self.predictions(scorer, theta)?;
        let hits = preds
            .iter()
            .zip(&self.items)
            .filter(|(p, (_, y))| **p == argmax(y.view()))
            .count();
        Ok(hits as f64 / preds.len() as f64)
    }
}
