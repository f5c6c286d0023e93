//! Gamma, Beta and Dirichlet draws.
//!
//! Gamma variates use Marsaglia and Tsang's squeeze method, with the
//! `shape < 1` boost `G(a) = G(a + 1) * U^(1/a)`. Draws are carried in log
//! space so that the tiny shapes produced by a clamped curriculum (shape
//! around 1e-3) do not underflow to zero before the Beta ratio is formed.

use rand::Rng;
use rand_distr::{Distribution, Open01, StandardNormal};

use crate::error::{Error, Result};

/// Natural log of a Gamma(shape, 1) variate.
pub fn ln_gamma_variate<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0) || !shape.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "gamma shape must be positive, got {shape}"
        )));
    }
    if shape < 1.0 {
        let boosted = ln_gamma_large(shape + 1.0, rng);
        let u: f64 = Open01.sample(rng);
        return Ok(boosted + u.ln() / shape);
    }
    Ok(ln_gamma_large(shape, rng))
}

pub fn gamma_variate<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> Result<f64> {
    ln_gamma_variate(shape, rng).map(f64::exp)
}

// shape >= 1
fn ln_gamma_large<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = StandardNormal.sample(rng);
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u: f64 = Open01.sample(rng);
        let x2 = x * x;
        // cheap squeeze first, then the exact log test
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d.ln() + v.ln();
        }
    }
}

/// Beta(a, b) as `X / (X + Y)` with `X ~ Gamma(a)`, `Y ~ Gamma(b)`.
pub fn beta_variate<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    let ln_x = ln_gamma_variate(a, rng)?;
    let ln_y = ln_gamma_variate(b, rng)?;
    // X / (X + Y) = 1 / (1 + exp(ln Y - ln X))
    let diff = ln_y - ln_x;
    let lambda = if diff > 0.0 {
        let e = (-diff).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + diff.exp())
    };
    Ok(lambda.clamp(0.0, 1.0))
}

/// Symmetric Dirichlet draw of dimension `dim`.
pub fn dirichlet_symmetric<R: Rng + ?Sized>(
    concentration: f64,
    dim: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::InvalidConfig("dirichlet dimension must be positive".into()));
    }
    let logs = (0..dim)
        .map(|_| ln_gamma_variate(concentration, rng))
        .collect::<Result<Vec<_>>>()?;
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// Matrix with i.i.d. `N(0, 1 / fan_in)` entries, where `fan_in = cols`.
pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> ndarray::Array2<f64> {
    let std = 1.0 / (cols.max(1) as f64).sqrt();
    ndarray::Array2::from_shape_simple_fn((rows, cols), || {
        let x: f64 = StandardNormal.sample(rng);
        x * std
    })
}

/// Vector with i.i.d. `N(0, std^2)` entries.
pub fn gaussian_vector<R: Rng + ?Sized>(len: usize, std: f64, rng: &mut R) -> ndarray::Array1<f64> {
    ndarray::Array1::from_shape_simple_fn(len, || {
        let x: f64 = StandardNormal.sample(rng);
        x * std
    })
}
