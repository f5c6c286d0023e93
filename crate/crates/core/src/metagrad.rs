//! Meta-gradient regularizer `psi_phi`.
//!
//! `psi(g) = z * (A g + c) + (1 - z) * g`, applied to every prompt row, with
//! the per-coordinate gate `z = sigmoid(W h + b)` computed from the mean
//! projected support representation `h`. The gate is shared by all prompt
//! tokens of a task.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

/// Gate values are kept this far inside (0, 1).
pub const GATE_MARGIN: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerState {
    /// `d_p x d_p` affine matrix.
    pub a: Array2<f64>,
    /// `d_p` affine offset.
    pub c: Array1<f64>,
    /// `d_p x d_h` gate weights.
    pub w: Array2<f64>,
    /// `d_p` gate bias.
    pub b: Array1<f64>,
}

/// Gradients with the same layout as [`RegularizerState`].
pub type RegularizerGrad = RegularizerState;

#[derive(Debug, Clone, PartialEq)]
pub struct GateVector(pub Array1<f64>);

impl GateVector {
    pub fn mean(&self) -> f64 {
        self.0.mean().unwrap_or(0.0)
    }
}

impl RegularizerState {
    /// `A = I, c = 0, W = 0, b = 0`: the identity map on gradients, gate 0.5.
    pub fn identity(prompt_dim: usize, hidden_dim: usize) -> Self {
        Self {
            a: Array2::eye(prompt_dim),
            c: Array1::zeros(prompt_dim),
            w: Array2::zeros((prompt_dim, hidden_dim)),
            b: Array1::zeros(prompt_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            a: Array2::zeros(self.a.raw_dim()),
            c: Array1::zeros(self.c.raw_dim()),
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn prompt_dim(&self) -> usize {
        self.c.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let dp = self.c.len();
        if self.a.dim() != (dp, dp) || self.b.len() != dp || self.w.nrows() != dp {
            return Err(Error::Shape("regularizer parameter shapes disagree".into()));
        }
        let finite = self.a.iter().chain(&self.c).chain(&self.w).chain(&self.b).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Shape("regularizer has non-finite entries".into()));
        }
        Ok(())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        self.a.scaled_add(scale, &other.a);
        self.c.scaled_add(scale, &other.c);
        self.w.scaled_add(scale, &other.w);
        self.b.scaled_add(scale, &other.b);
    }

    /// Parameters flattened as `[A, c, W, b]` in row-major order.
    pub fn flatten(&self) -> Vec<f64> {
        self.a
            .iter()
            .chain(&self.c)
            .chain(&self.w)
            .chain(&self.b)
            .copied()
            .collect()
    }

    /// Mutable entries in [`Self::flatten`] order.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.a
            .iter_mut()
            .chain(self.c.iter_mut())
            .chain(self.w.iter_mut())
            .chain(self.b.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.c.len() + self.w.len() + self.b.len()
    }

    /// Mutable access to the `i`-th entry of [`Self::flatten`].
    pub fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        if i < self.a.len() {
            return self.a.iter_mut().nth(i).expect("index");
        }
        i -= self.a.len();
        if i < self.c.len() {
            return &mut self.c[i];
        }
        i -= self.c.len();
        if i < self.w.len() {
            return self.w.iter_mut().nth(i).expect("index");
        }
        i -= self.w.len();
        &mut self.b[i]
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `z = sigmoid(W h + b)`.
pub fn gate(phi: &RegularizerState, h_bar: &Array1<f64>) -> Result<GateVector> {
    if h_bar.len() != phi.hidden_dim() {
        return Err(Error::Shape(format!(
            "gate input has dimension {}, expected {}",
            h_bar.len(),
            phi.hidden_dim()
        )));
    }
    let pre = phi.w.dot(h_bar) + &phi.b;
    Ok(GateVector(
        pre.mapv(|x| sigmoid(x).clamp(GATE_MARGIN, 1.0 - GATE_MARGIN)),
    ))
}

fn check_rows(phi: &RegularizerState, z: &GateVector, g: &Array2<f64>) -> Result<()> {
    let dp = phi.prompt_dim();
    if z.0.len() != dp || g.ncols() != dp {
        return Err(Error::Shape(format!(
            "regularizer width {dp}, gate {}, gradient {}",
            z.0.len(),
            g.ncols()
        )));
    }
    Ok(())
}

/// `A g_t + c` for every row `g_t`.
fn affine_rows(phi: &RegularizerState, g: &Array2<f64>) -> Array2<f64> {
    g.dot(&phi.a.t()) + phi.c.view().insert_axis(Axis(0))
}

/// Gated affine transformation of a `T x d_p` gradient.
pub fn transform(phi: &RegularizerState, z: &GateVector, g: &Array2<f64>) -> Result<Array2<f64>> {
    check_rows(phi, z, g)?;
    let h = affine_rows(phi, g);
    let zr = z.0.view().insert_axis(Axis(0));
    Ok(&h * &zr + g * &zr.mapv(|v| 1.0 - v))
}

/// Mean over coordinates of `(z_j - b_k)^2`.
pub fn reg_loss(z: &GateVector, b_k: f64) -> f64 {
    z.0.mapv(|v| (v - b_k).powi(2)).mean().unwrap_or(0.0)
}

/// Exact gradient of `<upstream, psi(g)> + reg_coeff * reg_loss(z, b_k)`
/// with respect to `(A, c, W, b)`.
///
/// `upstream` is the outer loss's sensitivity to `psi(g)`; for an inner
/// step `theta' = theta - alpha * psi(g)` it is `-alpha * dL_query/dtheta'`.
pub fn backward_phi(
    phi: &RegularizerState,
    z: &GateVector,
    g: &Array2<f64>,
    h_bar: &Array1<f64>,
    upstream: &Array2<f64>,
    b_k: f64,
    reg_coeff: f64,
) -> Result<RegularizerGrad> {
    check_rows(phi, z, g)?;
    if upstream.dim() != g.dim() {
        return Err(Error::Shape(format!(
            "upstream {:?} does not match gradient {:?}",
            upstream.dim(),
            g.dim()
        )));
    }
    if h_bar.len() != phi.hidden_dim() {
        return Err(Error::Shape("gate input dimension mismatch".into()));
    }
    let dp = phi.prompt_dim() as f64;
    let zr = z.0.view().insert_axis(Axis(0));
    let uz = upstream * &zr;
    let grad_c = uz.sum_axis(Axis(0));
    let grad_a = uz.t().dot(g);
    let diff = affine_rows(phi, g) - g;
    let grad_z = (upstream * &diff).sum_axis(Axis(0)) + z.0.mapv(|v| reg_coeff * 2.0 / dp * (v - b_k));
    let grad_pre = &grad_z * &z.0.mapv(|v| v * (1.0 - v));
    let grad_w = grad_pre
        .view()
        .insert_axis(Axis(1))
        .dot(&h_bar.view().insert_axis(Axis(0)));
    Ok(RegularizerState {
        a: grad_a,
        c: grad_c,
        w: grad_w,
        b: grad_pre,
    })
}
