//! Single-hidden-layer perceptron used for both experts and the gate.
//!
//! Hidden units are always sigmoid. Each layer carries a bias, stored as the
//! last column of its weight matrix. The flat parameter ordering is the hidden
//! matrix row-major followed by the output matrix row-major; the slice-level
//! functions (`forward_flat`, `backprop_flat`) work directly on that ordering
//! so the mixture model can evaluate experts without unpacking them.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernel::{Matrix, RngStream, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Linear,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sigmoid" => Some(Activation::Sigmoid),
            "linear" => Some(Activation::Linear),
            _ => None,
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpLayout {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub out_activation: Activation,
}

impl MlpLayout {
    pub fn new(
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        out_activation: Activation,
    ) -> Result<Self> {
        if in_dim == 0 || hidden_dim == 0 || out_dim == 0 {
            return Err(Error::param(format!(
                "MLP dimensions must be >= 1, got {in_dim}-{hidden_dim}-{out_dim}"
            )));
        }
        Ok(Self {
            in_dim,
            hidden_dim,
            out_dim,
            out_activation,
        })
    }

    fn hidden_len(&self) -> usize {
        self.hidden_dim * (self.in_dim + 1)
    }

    /// `(in + 1) * hidden + (hidden + 1) * out`.
    pub fn param_count(&self) -> usize {
        self.hidden_len() + self.out_dim * (self.hidden_dim + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layout: MlpLayout,
    /// `hidden_dim x (in_dim + 1)`, last column is the bias.
    pub w_hidden: Matrix,
    /// `out_dim x (hidden_dim + 1)`, last column is the bias.
    pub w_out: Matrix,
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

/// Gradient with the same shape as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradient {
    pub w_hidden: Matrix,
    pub w_out: Matrix,
}

/// Weights i.i.d. uniform in `[-scale, scale]`, biases included.
pub fn init_mlp(layout: MlpLayout, rng: &mut RngStream, scale: f64) -> Result<MlpParams> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::param(format!("init scale must be > 0, got {scale}")));
    }
    let mut w = vec![0.0; layout.param_count()];
    fill_uniform(&mut w, rng, scale);
    unflatten(layout, &w)
}

pub(crate) fn fill_uniform(w: &mut [f64], rng: &mut RngStream, scale: f64) {
    for v in w {
        *v = rng.uniform_in(-scale, scale);
    }
}

pub fn flatten(p: &MlpParams) -> WeightVector {
    let mut w = Vec::with_capacity(p.layout.param_count());
    w.extend_from_slice(p.w_hidden.as_slice());
    w.extend_from_slice(p.w_out.as_slice());
    w
}

pub fn unflatten(layout: MlpLayout, w: &[f64]) -> Result<MlpParams> {
    check_dim("unflatten", layout.param_count(), w.len())?;
    let (h, o) = w.split_at(layout.hidden_len());
    Ok(MlpParams {
        layout,
        w_hidden: Matrix::from_vec(layout.hidden_dim, layout.in_dim + 1, h.to_vec())?,
        w_out: Matrix::from_vec(layout.out_dim, layout.hidden_dim + 1, o.to_vec())?,
    })
}

pub fn forward(p: &MlpParams, x: &[f64]) -> Result<ForwardTrace> {
    check_dim("mlp forward input", p.layout.in_dim, x.len())?;
    let w = flatten(p);
    let mut hidden = vec![0.0; p.layout.hidden_dim];
    let mut output = vec![0.0; p.layout.out_dim];
    forward_flat(&p.layout, &w, x, &mut hidden, &mut output);
    Ok(ForwardTrace { hidden, output })
}

/// Gradient of a loss `L` given `out_grad = dL/dO` (post-activation output).
pub fn backprop(
    p: &MlpParams,
    x: &[f64],
    trace: &ForwardTrace,
    out_grad: &[f64],
) -> Result<MlpGradient> {
    let l = &p.layout;
    check_dim("backprop input", l.in_dim, x.len())?;
    check_dim("backprop out_grad", l.out_dim, out_grad.len())?;
    check_dim("backprop hidden trace", l.hidden_dim, trace.hidden.len())?;
    check_dim("backprop output trace", l.out_dim, trace.output.len())?;
    let w = flatten(p);
    let mut grad = vec![0.0; l.param_count()];
    let mut delta_hidden = vec![0.0; l.hidden_dim];
    backprop_flat(
        l,
        &w,
        x,
        &trace.hidden,
        &trace.output,
        out_grad,
        &mut delta_hidden,
        &mut grad,
    );
    let g = unflatten(*l, &grad)?;
    Ok(MlpGradient {
        w_hidden: g.w_hidden,
        w_out: g.w_out,
    })
}

/// Forward pass on flat weights; writes the hidden and final activations.
#[inline]
pub(crate) fn forward_flat(
    l: &MlpLayout,
    w: &[f64],
    x: &[f64],
    hidden: &mut [f64],
    out: &mut [f64],
) {
    let stride_h = l.in_dim + 1;
    let (wh, wy) = w.split_at(l.hidden_len());
    for (j, hj) in hidden.iter_mut().enumerate() {
        let row = &wh[j * stride_h..(j + 1) * stride_h];
        let mut z = row[l.in_dim];
        for (wi, xi) in row[..l.in_dim].iter().zip(x) {
            z += wi * xi;
        }
        *hj = sigmoid(z);
    }
    let stride_y = l.hidden_dim + 1;
    for (k, ok) in out.iter_mut().enumerate() {
        let row = &wy[k * stride_y..(k + 1) * stride_y];
        let mut z = row[l.hidden_dim];
        for (wi, hi) in row[..l.hidden_dim].iter().zip(hidden.iter()) {
            z += wi * hi;
        }
        *ok = match l.out_activation {
            Activation::Sigmoid => sigmoid(z),
            Activation::Linear => z,
        };
    }
}

/// Accumulates `dL/dw` into `grad` (added, not overwritten).
///
/// `out_grad` is `dL/dO`; the output activation derivative is applied here.
/// `delta_hidden` is scratch of length `hidden_dim`.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn backprop_flat(
    l: &MlpLayout,
    w: &[f64],
    x: &[f64],
    hidden: &[f64],
    out: &[f64],
    out_grad: &[f64],
    delta_hidden: &mut [f64],
    grad: &mut [f64],
) {
    let hidden_len = l.hidden_len();
    let wy = &w[hidden_len..];
    let (gh, gy) = grad.split_at_mut(hidden_len);
    let stride_y = l.hidden_dim + 1;
    delta_hidden.iter_mut().for_each(|d| *d = 0.0);
    for k in 0..l.out_dim {
        let delta = match l.out_activation {
            Activation::Sigmoid => out_grad[k] * out[k] * (1.0 - out[k]),
            Activation::Linear => out_grad[k],
        };
        if delta == 0.0 {
            continue;
        }
        let grow = &mut gy[k * stride_y..(k + 1) * stride_y];
        let wrow = &wy[k * stride_y..(k + 1) * stride_y];
        for j in 0..l.hidden_dim {
            grow[j] += delta * hidden[j];
            delta_hidden[j] += delta * wrow[j];
        }
        grow[l.hidden_dim] += delta;
    }
    let stride_h = l.in_dim + 1;
    for j in 0..l.hidden_dim {
        let d = delta_hidden[j] * hidden[j] * (1.0 - hidden[j]);
        if d == 0.0 {
            continue;
        }
        let grow = &mut gh[j * stride_h..(j + 1) * stride_h];
        for (g, xi) in grow[..l.in_dim].iter_mut().zip(x) {
            *g += d * xi;
        }
        grow[l.in_dim] += d;
    }
}

/// Half mean squared error `1/(2N) sum_n ||O(x_n) - y_n||^2` at flat weights `w`.
pub fn mse_loss(l: &MlpLayout, w: &[f64], x: &Matrix, y: &Matrix) -> Result<f64> {
    check_batch(l, w, x, y)?;
    let (mut hidden, mut out) = (vec![0.0; l.hidden_dim], vec![0.0; l.out_dim]);
    let mut total = 0.0;
    for n in 0..x.rows() {
        forward_flat(l, w, x.row(n), &mut hidden, &mut out);
        for (o, t) in out.iter().zip(y.row(n)) {
            total += (o - t) * (o - t);
        }
    }
    Ok(0.5 * total * (1.0 / x.rows() as f64))
}

/// [`mse_loss`] together with its gradient.
pub fn mse_loss_and_gradient(l: &MlpLayout, w: &[f64], x: &Matrix, y: &Matrix) -> Result<(f64, Vec<f64>)> {
    check_batch(l, w, x, y)?;
    let (mut hidden, mut out) = (vec![0.0; l.hidden_dim], vec![0.0; l.out_dim]);
    let mut out_grad = vec![0.0; l.out_dim];
    let mut delta = vec![0.0; l.hidden_dim];
    let mut grad = vec![0.0; w.len()];
    let scale = 1.0 / x.rows() as f64;
    let mut total = 0.0;
    for n in 0..x.rows() {
        forward_flat(l, w, x.row(n), &mut hidden, &mut out);
        for ((g, o), t) in out_grad.iter_mut().zip(&out).zip(y.row(n)) {
            *g = (o - t) * scale;
            total += (o - t) * (o - t);
        }
        backprop_flat(l, w, x.row(n), &hidden, &out, &out_grad, &mut delta, &mut grad);
    }
    Ok((0.5 * total * scale, grad))
}

/// Network outputs for every row of `x`.
pub fn predict_all(l: &MlpLayout, w: &[f64], x: &Matrix) -> Result<Matrix> {
    check_dim("mlp weights", l.param_count(), w.len())?;
    check_dim("mlp input", l.in_dim, x.cols())?;
    let mut hidden = vec![0.0; l.hidden_dim];
    let mut out = Matrix::zeros(x.rows(), l.out_dim);
    for n in 0..x.rows() {
        forward_flat(l, w, x.row(n), &mut hidden, out.row_mut(n));
    }
    Ok(out)
}

fn check_batch(l: &MlpLayout, w: &[f64], x: &Matrix, y: &Matrix) -> Result<()> {
    check_dim("mlp weights", l.param_count(), w.len())?;
    check_dim("mlp input", l.in_dim, x.cols())?;
    check_dim("mlp target", l.out_dim, y.cols())?;
    check_dim("batch rows", x.rows(), y.rows())?;
    if x.rows() == 0 {
        return Err(Error::param("empty batch"));
    }
    Ok(())
}
