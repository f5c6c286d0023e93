//! Frozen sentence encoder and the per-format hidden representations.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, Streams};
use crate::sampling::gaussian_matrix;

/// Number of answer candidates in the multi-choice and single-sentence formats.
pub const NUM_CANDIDATES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HiddenFormat {
    /// `[e1; e2; e1 * e2]`, width `3 * d_h`.
    #[serde(rename = "sp")]
    Pair,
    /// `[e_q; e_1; e_2; e_3; e_4]`, width `5 * d_h`.
    #[serde(rename = "mc_ss")]
    Choice,
}

impl HiddenFormat {
    pub fn blocks(self) -> usize {
        match self {
            HiddenFormat::Pair => 3,
            HiddenFormat::Choice => 1 + NUM_CANDIDATES,
        }
    }

    pub fn width(self, d_h: usize) -> usize {
        self.blocks() * d_h
    }

    /// Label dimension of examples in this format.
    pub fn classes(self) -> usize {
        match self {
            HiddenFormat::Pair => 3,
            HiddenFormat::Choice => NUM_CANDIDATES,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hidden {
    pub values: Array1<f64>,
    pub format: HiddenFormat,
}

impl Hidden {
    pub fn new(values: Array1<f64>, format: HiddenFormat, d_h: usize) -> Result<Self> {
        if values.len() != format.width(d_h) {
            return Err(Error::Shape(format!(
                "{:?} hidden needs width {}, got {}",
                format,
                format.width(d_h),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("hidden contains non-finite entries".into()));
        }
        Ok(Self { values, format })
    }

    /// Per-block width.
    pub fn block_width(&self) -> usize {
        self.values.len() / self.format.blocks()
    }

    pub fn block(&self, i: usize) -> ArrayView1<'_, f64> {
        let w = self.block_width();
        self.values.slice(s![i * w..(i + 1) * w])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            embed_dim: 32,
            hidden_dim: 32,
            seed: 0,
        }
    }
}

/// Frozen encoder weights. `projection` maps the `embed_dim` token space to
/// the `hidden_dim` sentence space; `proj_pair` and `proj_choice` map the two
/// hidden formats back to `hidden_dim` for the regularizer gate.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub token_table: Array2<f64>,
    pub projection: Array2<f64>,
    pub proj_pair: Array2<f64>,
    pub proj_choice: Array2<f64>,
    pub config: EncoderConfig,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        if config.vocab_size == 0 || config.embed_dim == 0 || config.hidden_dim == 0 {
            return Err(Error::InvalidConfig("encoder dimensions must be positive".into()));
        }
        let mut rng = Streams::new(config.seed).stream(Purpose::Encoder, 0, 0);
        let d_h = config.hidden_dim;
        // one-hot token -> embedding, so fan_in is the vocabulary size
        let token_table = gaussian_matrix(config.embed_dim, config.vocab_size, &mut rng)
            .reversed_axes()
            .to_owned();
        let projection = gaussian_matrix(d_h, config.embed_dim, &mut rng);
        let proj_pair = gaussian_matrix(d_h, HiddenFormat::Pair.width(d_h), &mut rng);
        let proj_choice = gaussian_matrix(d_h, HiddenFormat::Choice.width(d_h), &mut rng);
        Ok(Self {
            token_table,
            projection,
            proj_pair,
            proj_choice,
            config,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Unit-norm sentence embedding: `normalize(tanh(Q * mean_t E[t]))`.
    pub fn embed(&self, tokens: &[u32]) -> Result<Array1<f64>> {
        if tokens.is_empty() {
            return Err(Error::Empty("sentence"));
        }
        let mut mean = Array1::<f64>::zeros(self.config.embed_dim);
        for &t in tokens {
            let t = t as usize;
            if t >= self.config.vocab_size {
                return Err(Error::Shape(format!(
                    "token {t} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            mean += &self.token_table.row(t);
        }
        mean /= tokens.len() as f64;
        let mut out = self.projection.dot(&mean).mapv(f64::tanh);
        let norm = out.dot(&out).sqrt();
        if norm > 0.0 {
            out /= norm;
        }
        Ok(out)
    }

    pub fn compose_pair(&self, e1: &Array1<f64>, e2: &Array1<f64>) -> Result<Hidden> {
        let d_h = self.hidden_dim();
        check_dim(e1, d_h)?;
        check_dim(e2, d_h)?;
        let prod = e1 * e2;
        let values = concatenate(Axis(0), &[e1.view(), e2.view(), prod.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        Hidden::new(values, HiddenFormat::Pair, d_h)
    }

    pub fn compose_choice(&self, query: &Array1<f64>, candidates: &[Array1<f64>]) -> Result<Hidden> {
        let d_h = self.hidden_dim();
        if candidates.len() != NUM_CANDIDATES {
            return Err(Error::Shape(format!(
                "expected {NUM_CANDIDATES} candidates, got {}",
                candidates.len()
            )));
        }
        check_dim(query, d_h)?;
        let mut views = vec![query.view()];
        for c in candidates {
            check_dim(c, d_h)?;
            views.push(c.view());
        }
        let values = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        Hidden::new(values, HiddenFormat::Choice, d_h)
    }

    /// Format-matched linear map of a hidden representation into `d_h`.
    pub fn project_common(&self, h: &Hidden) -> Result<Array1<f64>> {
        let g = match h.format {
            HiddenFormat::Pair => &self.proj_pair,
            HiddenFormat::Choice => &self.proj_choice,
        };
        if g.ncols() != h.values.len() {
            return Err(Error::Shape(format!(
                "projection expects width {}, got {}",
                g.ncols(),
                h.values.len()
            )));
        }
        Ok(g.dot(&h.values))
    }

    /// Mean of `project_common` over a set of hidden representations.
    pub fn mean_projection<'a>(&self, hs: impl IntoIterator<Item = &'a Hidden>) -> Result<Array1<f64>> {
        let mut acc = Array1::<f64>::zeros(self.hidden_dim());
        let mut n = 0usize;
        for h in hs {
            acc += &self.project_common(h)?;
            n += 1;
        }
        if n == 0 {
            return Err(Error::Empty("hidden set"));
        }
        Ok(acc / n as f64)
    }
}

fn check_dim(v: &Array1<f64>, d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::Shape(format!("expected dimension {d}, got {}", v.len())));
    }
    Ok(())
}

pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0)
}
