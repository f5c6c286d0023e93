//! Checkpoints and metrics streams.
//!
//! Arrays are stored as base64 of their little-endian f64 bytes so a
//! checkpoint round-trips bit for bit. The random state of a run is its root
//! seed plus the step counter; streams are counter based, so nothing else is
//! needed to resume.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metagrad::RegularizerState;
use crate::metalearn::{MetaState, StepMetrics, TrainConfig};
use crate::optim::Moments;
use crate::promptmodel::PromptState;
use crate::rng::Streams;

pub const FORMAT: &str = "supmer-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedArray {
    pub shape: Vec<usize>,
    pub data: String,
}

impl EncodedArray {
    fn encode(shape: Vec<usize>, values: impl Iterator<Item = f64>) -> Self {
        let bytes: Vec<u8> = values.flat_map(f64::to_le_bytes).collect();
        Self {
            shape,
            data: STANDARD.encode(bytes),
        }
    }

    pub fn from_matrix(m: &Array2<f64>) -> Self {
        Self::encode(m.shape().to_vec(), m.iter().copied())
    }

    pub fn from_vector(v: &Array1<f64>) -> Self {
        Self::encode(vec![v.len()], v.iter().copied())
    }

    fn values(&self) -> Result<Vec<f64>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Format(format!("bad base64 payload: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format("payload length is not a multiple of 8".into()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if values.len() != self.shape.iter().product::<usize>() {
            return Err(Error::Format(format!(
                "payload holds {} values, shape {:?} needs {}",
                values.len(),
                self.shape,
                self.shape.iter().product::<usize>()
            )));
        }
        Ok(values)
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        let [r, c] = self.shape[..] else {
            return Err(Error::Format(format!("expected a matrix, got shape {:?}", self.shape)));
        };
        Array2::from_shape_vec((r, c), self.values()?).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_vector(&self) -> Result<Array1<f64>> {
        if self.shape.len() != 1 {
            return Err(Error::Format(format!("expected a vector, got shape {:?}", self.shape)));
        }
        Ok(Array1::from(self.values()?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedPhi {
    pub a: EncodedArray,
    pub c: EncodedArray,
    pub w: EncodedArray,
    pub b: EncodedArray,
}

impl EncodedPhi {
    pub fn new(phi: &RegularizerState) -> Self {
        Self {
            a: EncodedArray::from_matrix(&phi.a),
            c: EncodedArray::from_vector(&phi.c),
            w: EncodedArray::from_matrix(&phi.w),
            b: EncodedArray::from_vector(&phi.b),
        }
    }

    pub fn decode(&self) -> Result<RegularizerState> {
        let phi = RegularizerState {
            a: self.a.to_matrix()?,
            c: self.c.to_vector()?,
            w: self.w.to_matrix()?,
            b: self.b.to_vector()?,
        };
        phi.validate()?;
        Ok(phi)
    }
}

/// Adam moment estimates; all zero for runs using plain steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedMoments {
    pub theta_m: EncodedArray,
    pub theta_v: EncodedArray,
    pub phi_m: EncodedArray,
    pub phi_v: EncodedArray,
}

impl EncodedMoments {
    fn new(theta: &Moments, phi: &Moments) -> Self {
        let enc = |v: &[f64]| EncodedArray::encode(vec![v.len()], v.iter().copied());
        Self {
            theta_m: enc(&theta.m),
            theta_v: enc(&theta.v),
            phi_m: enc(&phi.m),
            phi_v: enc(&phi.v),
        }
    }

    fn decode(&self, theta_len: usize, phi_len: usize) -> Result<(Moments, Moments)> {
        let get = |a: &EncodedArray, n: usize| -> Result<Vec<f64>> {
            let v = a.to_vector()?.to_vec();
            if v.len() != n {
                return Err(Error::Format(format!("moment vector has {} entries, expected {n}", v.len())));
            }
            Ok(v)
        };
        Ok((
            Moments {
                m: get(&self.theta_m, theta_len)?,
                v: get(&self.theta_v, theta_len)?,
            },
            Moments {
                m: get(&self.phi_m, phi_len)?,
                v: get(&self.phi_v, phi_len)?,
            },
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Next outer step; the batch and augmentation streams are keyed by it.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub step: u64,
    pub s: f64,
    pub config_digest: String,
    pub config: TrainConfig,
    pub rng: RngState,
    pub theta: EncodedArray,
    pub phi: EncodedPhi,
    pub moments: EncodedMoments,
}

/// SHA-256 of the config's canonical JSON, hex encoded.
pub fn config_digest(cfg: &TrainConfig) -> Result<String> {
    let json = serde_json::to_string(cfg)?;
    let hash = Sha256::digest(json.as_bytes());
    Ok(hash.iter().map(|b| format!("{b:02x}")).collect())
}

impl Checkpoint {
    pub fn new(state: &MetaState, cfg: &TrainConfig) -> Result<Self> {
        Self::with_params(&state.theta, &state.phi, state, cfg)
    }

    /// A checkpoint of `state`'s counters carrying other parameters, e.g. the
    /// best-validation ones.
    pub fn with_params(theta: &PromptState, phi: &RegularizerState, state: &MetaState, cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            format: FORMAT.into(),
            step: state.step,
            s: state.s,
            config_digest: config_digest(cfg)?,
            config: cfg.clone(),
            rng: RngState {
                seed: state.streams.seed,
                step: state.step,
            },
            theta: EncodedArray::from_matrix(&theta.theta),
            phi: EncodedPhi::new(phi),
            moments: EncodedMoments::new(&state.theta_moments, &state.phi_moments),
        })
    }

    /// Checks the format tag and the digest against the embedded config.
    pub fn verify(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Format(format!("unknown checkpoint format {:?}", self.format)));
        }
        if self.config_digest != config_digest(&self.config)? {
            return Err(Error::Format("config digest does not match the stored config".into()));
        }
        if self.rng.step != self.step {
            return Err(Error::Format("rng step and step counter disagree".into()));
        }
        Ok(())
    }

    pub fn state(&self) -> Result<MetaState> {
        self.verify()?;
        let theta = PromptState::new(self.theta.to_matrix()?)?;
        let phi = self.phi.decode()?;
        let (theta_moments, phi_moments) = self.moments.decode(theta.theta.len(), phi.num_params())?;
        Ok(MetaState {
            theta,
            phi,
            s: self.s,
            step: self.step,
            streams: Streams::new(self.rng.seed),
            theta_moments,
            phi_moments,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text)?;
        ckpt.verify()?;
        Ok(ckpt)
    }
}

pub fn write_metrics(path: impl AsRef<Path>, metrics: &[StepMetrics]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for m in metrics {
        serde_json::to_writer(&mut out, m)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<StepMetrics>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
