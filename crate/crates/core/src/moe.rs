//! Mixture of MLP experts with a softmax-gated MLP gate.
//!
//! The model output is `sum_i g_i(x) * O_i(x)`, where `O_i` are expert outputs
//! and `g = softmax(gate(x))`. Training minimizes the mean negative
//! log-likelihood
//!
//! ```text
//! L = mean_n  -ln sum_i g_i exp(-|y - O_i|^2 / 2)
//! ```
//!
//! whose gradient routes the posterior responsibility `h_i` into expert `i`
//! (`dL/dO_i = h_i (O_i - y)`) and `g - h` into the raw gate outputs.
//!
//! All parameters live in one flat vector: expert 0, ..., expert N-1, then the
//! gate, each in the MLP flat ordering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cg::{self, BetaFormula, LineSearchSpec};
use crate::error::{check_dim, Error, Result};
use crate::kernel::{Matrix, RngStream, WeightVector};
use crate::mlp::{self, Activation, MlpLayout, MlpParams};

/// Max-shifted softmax of the raw gate outputs.
pub fn gate_probs(gate_raw: &[f64]) -> Vec<f64> {
    let mut g = gate_raw.to_vec();
    softmax_in_place(&mut g);
    g
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `ln sum_i exp(v_i)`, max-shifted.
fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Gate-weighted combination `sum_i g_i * O_i`.
pub fn mix(g: &[f64], expert_outs: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_dim("mix gate width", g.len(), expert_outs.len())?;
    let width = expert_outs.first().map_or(0, Vec::len);
    let mut out = vec![0.0; width];
    for (gi, o) in g.iter().zip(expert_outs) {
        check_dim("mix expert output", width, o.len())?;
        for (acc, v) in out.iter_mut().zip(o) {
            *acc += gi * v;
        }
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Posterior responsibilities `h_i ∝ g_i exp(-|y - O_i|^2 / 2)`, normalized in
/// log space so that no numerator underflow can zero the denominator.
pub fn posteriors(g: &[f64], expert_outs: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>> {
    check_dim("posteriors gate width", g.len(), expert_outs.len())?;
    let mut s = Vec::with_capacity(g.len());
    for (gi, o) in g.iter().zip(expert_outs) {
        check_dim("posteriors expert output", y.len(), o.len())?;
        s.push(gi.ln() - 0.5 * sq_dist(y, o));
    }
    softmax_in_place(&mut s);
    Ok(s)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MoeTopology {
    pub in_dim: usize,
    pub out_dim: usize,
    pub n_experts: usize,
    pub expert_hidden: usize,
    pub gate_hidden: usize,
    pub expert_activation: Activation,
}

impl MoeTopology {
    pub fn expert_layout(&self) -> Result<MlpLayout> {
        MlpLayout::new(self.in_dim, self.expert_hidden, self.out_dim, self.expert_activation)
    }

    /// Sigmoid hidden layer, linear output of width `n_experts`.
    pub fn gate_layout(&self) -> Result<MlpLayout> {
        MlpLayout::new(self.in_dim, self.gate_hidden, self.n_experts, Activation::Linear)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.n_experts * self.expert_layout()?.param_count() + self.gate_layout()?.param_count())
    }
}

/// Gate probabilities, per-expert outputs and the mixed output for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeOutput {
    pub g: Vec<f64>,
    pub expert_outs: Vec<Vec<f64>>,
    pub mixed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    topology: MoeTopology,
    expert_layout: MlpLayout,
    gate_layout: MlpLayout,
    weights: WeightVector,
}

/// Per-sample buffers, reused across a pass over the data.
struct Scratch {
    expert_hidden: Vec<f64>,
    expert_out: Vec<f64>,
    gate_hidden: Vec<f64>,
    gate_raw: Vec<f64>,
    log_g: Vec<f64>,
    score: Vec<f64>,
    delta_hidden: Vec<f64>,
    out_grad: Vec<f64>,
}

impl MoeModel {
    pub fn from_weights(topology: MoeTopology, weights: WeightVector) -> Result<Self> {
        if topology.n_experts == 0 {
            return Err(Error::param("a mixture needs at least one expert"));
        }
        let expert_layout = topology.expert_layout()?;
        let gate_layout = topology.gate_layout()?;
        check_dim("MoeModel weights", topology.param_count()?, weights.len())?;
        Ok(Self {
            topology,
            expert_layout,
            gate_layout,
            weights,
        })
    }

    /// Every expert and the gate initialized uniform in `[-scale, scale]`.
    pub fn init(topology: MoeTopology, rng: &mut RngStream, scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::param(format!("init scale must be > 0, got {scale}")));
        }
        let mut w = vec![0.0; topology.param_count()?];
        mlp::fill_uniform(&mut w, rng, scale);
        Self::from_weights(topology, w)
    }

    pub fn topology(&self) -> &MoeTopology {
        &self.topology
    }

    pub fn n_experts(&self) -> usize {
        self.topology.n_experts
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Same topology, different weights.
    pub fn with_weights(&self, weights: WeightVector) -> Result<Self> {
        check_dim("MoeModel::with_weights", self.weights.len(), weights.len())?;
        Ok(Self {
            weights,
            ..self.clone()
        })
    }

    fn expert_len(&self) -> usize {
        self.expert_layout.param_count()
    }

    /// Flat index where the gate block starts.
    pub fn gate_offset(&self) -> usize {
        self.topology.n_experts * self.expert_len()
    }

    pub fn expert_weights(&self, i: usize) -> &[f64] {
        let n = self.expert_len();
        &self.weights[i * n..(i + 1) * n]
    }

    pub fn gate_weights(&self) -> &[f64] {
        &self.weights[self.gate_offset()..]
    }

    pub fn expert(&self, i: usize) -> MlpParams {
        mlp::unflatten(self.expert_layout, self.expert_weights(i)).expect("layout-consistent block")
    }

    pub fn gate(&self) -> MlpParams {
        mlp::unflatten(self.gate_layout, self.gate_weights()).expect("layout-consistent block")
    }

    fn scratch(&self) -> Scratch {
        let t = &self.topology;
        Scratch {
            expert_hidden: vec![0.0; t.n_experts * t.expert_hidden],
            expert_out: vec![0.0; t.n_experts * t.out_dim],
            gate_hidden: vec![0.0; t.gate_hidden],
            gate_raw: vec![0.0; t.n_experts],
            log_g: vec![0.0; t.n_experts],
            score: vec![0.0; t.n_experts],
            delta_hidden: vec![0.0; t.expert_hidden.max(t.gate_hidden)],
            out_grad: vec![0.0; t.out_dim.max(t.n_experts)],
        }
    }

    fn forward_sample(&self, w: &[f64], x: &[f64], s: &mut Scratch) {
        let t = &self.topology;
        let el = self.expert_len();
        for i in 0..t.n_experts {
            mlp::forward_flat(
                &self.expert_layout,
                &w[i * el..(i + 1) * el],
                x,
                &mut s.expert_hidden[i * t.expert_hidden..(i + 1) * t.expert_hidden],
                &mut s.expert_out[i * t.out_dim..(i + 1) * t.out_dim],
            );
        }
        mlp::forward_flat(
            &self.gate_layout,
            &w[t.n_experts * el..],
            x,
            &mut s.gate_hidden,
            &mut s.gate_raw,
        );
    }

    /// Per-sample loss after `forward_sample`; leaves `log g` in `s.log_g` and
    /// the posteriors `h` in `s.score`.
    fn sample_loss(&self, y: &[f64], s: &mut Scratch) -> f64 {
        let t = &self.topology;
        let lse_gate = log_sum_exp(&s.gate_raw);
        for i in 0..t.n_experts {
            s.log_g[i] = s.gate_raw[i] - lse_gate;
            let o = &s.expert_out[i * t.out_dim..(i + 1) * t.out_dim];
            s.score[i] = s.log_g[i] - 0.5 * sq_dist(y, o);
        }
        let lse = log_sum_exp(&s.score);
        for v in s.score.iter_mut() {
            *v = (*v - lse).exp();
        }
        -lse
    }

    /// Adds `scale * dL_n/dw` for the current sample into `grad`.
    fn sample_backward(&self, w: &[f64], x: &[f64], y: &[f64], scale: f64, s: &mut Scratch, grad: &mut [f64]) {
        let t = &self.topology;
        let el = self.expert_len();
        for i in 0..t.n_experts {
            let h = s.score[i];
            let o = &s.expert_out[i * t.out_dim..(i + 1) * t.out_dim];
            for k in 0..t.out_dim {
                s.out_grad[k] = scale * h * (o[k] - y[k]);
            }
            mlp::backprop_flat(
                &self.expert_layout,
                &w[i * el..(i + 1) * el],
                x,
                &s.expert_hidden[i * t.expert_hidden..(i + 1) * t.expert_hidden],
                o,
                &s.out_grad[..t.out_dim],
                &mut s.delta_hidden[..t.expert_hidden],
                &mut grad[i * el..(i + 1) * el],
            );
        }
        for i in 0..t.n_experts {
            s.out_grad[i] = scale * (s.log_g[i].exp() - s.score[i]);
        }
        let off = t.n_experts * el;
        mlp::backprop_flat(
            &self.gate_layout,
            &w[off..],
            x,
            &s.gate_hidden,
            &s.gate_raw,
            &s.out_grad[..t.n_experts],
            &mut s.delta_hidden[..t.gate_hidden],
            &mut grad[off..],
        );
    }

    pub(crate) fn check_data(&self, x: &Matrix, y: &Matrix) -> Result<()> {
        check_dim("input width", self.topology.in_dim, x.cols())?;
        check_dim("target width", self.topology.out_dim, y.cols())?;
        check_dim("target rows", x.rows(), y.rows())?;
        if x.rows() == 0 {
            return Err(Error::param("empty dataset"));
        }
        Ok(())
    }

    /// Mean negative log-likelihood at arbitrary weights of this topology.
    pub fn loss_at(&self, w: &[f64], x: &Matrix, y: &Matrix) -> Result<f64> {
        check_dim("loss weights", self.weights.len(), w.len())?;
        self.check_data(x, y)?;
        Ok(self.loss_unchecked(w, x, y))
    }

    pub(crate) fn loss_unchecked(&self, w: &[f64], x: &Matrix, y: &Matrix) -> f64 {
        let mut s = self.scratch();
        let mut total = 0.0;
        for n in 0..x.rows() {
            self.forward_sample(w, x.row(n), &mut s);
            total += self.sample_loss(y.row(n), &mut s);
        }
        total / x.rows() as f64
    }

    /// Loss and its exact gradient at arbitrary weights of this topology.
    pub fn loss_and_gradient_at(&self, w: &[f64], x: &Matrix, y: &Matrix) -> Result<(f64, Vec<f64>)> {
        check_dim("gradient weights", self.weights.len(), w.len())?;
        self.check_data(x, y)?;
        Ok(self.loss_and_gradient_unchecked(w, x, y))
    }

    fn loss_and_gradient_unchecked(&self, w: &[f64], x: &Matrix, y: &Matrix) -> (f64, Vec<f64>) {
        let mut s = self.scratch();
        let mut grad = vec![0.0; w.len()];
        let scale = 1.0 / x.rows() as f64;
        let mut total = 0.0;
        for n in 0..x.rows() {
            self.forward_sample(w, x.row(n), &mut s);
            total += self.sample_loss(y.row(n), &mut s);
            self.sample_backward(w, x.row(n), y.row(n), scale, &mut s, &mut grad);
        }
        (total * scale, grad)
    }

    /// Full evaluation for one input.
    pub fn evaluate(&self, x: &[f64]) -> Result<MoeOutput> {
        check_dim("input width", self.topology.in_dim, x.len())?;
        let mut s = self.scratch();
        self.forward_sample(&self.weights, x, &mut s);
        let d = self.topology.out_dim;
        let g = gate_probs(&s.gate_raw);
        let expert_outs: Vec<Vec<f64>> = s.expert_out.chunks(d).map(<[f64]>::to_vec).collect();
        let mixed = mix(&g, &expert_outs)?;
        Ok(MoeOutput { g, expert_outs, mixed })
    }

    /// Mixed output for one input.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.evaluate(x)?.mixed)
    }

    /// Argmax of the mixed output; ties go to the lowest class.
    pub fn predict_class(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.predict(x)?))
    }

    /// Mixed outputs for every row of `x`.
    pub fn predict_all(&self, x: &Matrix) -> Result<Matrix> {
        check_dim("input width", self.topology.in_dim, x.cols())?;
        let mut s = self.scratch();
        let (n, d) = (self.topology.n_experts, self.topology.out_dim);
        let mut out = Matrix::zeros(x.rows(), d);
        for r in 0..x.rows() {
            self.forward_sample(&self.weights, x.row(r), &mut s);
            softmax_in_place(&mut s.gate_raw);
            let row = out.row_mut(r);
            for i in 0..n {
                for k in 0..d {
                    row[k] += s.gate_raw[i] * s.expert_out[i * d + k];
                }
            }
        }
        Ok(out)
    }

    /// Plain-text dump: topology header then one weight per line, in flat order.
    /// Weights use the shortest round-trip decimal form, so parsing is bit-exact.
    pub fn to_text(&self) -> String {
        let t = &self.topology;
        let mut s = String::new();
        let _ = writeln!(s, "moecg-moe 1");
        let _ = writeln!(s, "experts {}", t.n_experts);
        let _ = writeln!(
            s,
            "expert-layout {} {} {} {}",
            t.in_dim,
            t.expert_hidden,
            t.out_dim,
            t.expert_activation.name()
        );
        let _ = writeln!(s, "gate-layout {} {} {} linear", t.in_dim, t.gate_hidden, t.n_experts);
        let _ = writeln!(s, "weights {}", self.weights.len());
        for w in &self.weights {
            let _ = writeln!(s, "{w:?}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::ModelFormat(m.to_string());
        let mut lines = text.lines();
        let mut field = |name: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad("truncated header"))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(name) {
                return Err(bad(&format!("expected `{name}` line, got `{line}`")));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad count `{s}`")));

        if field("moecg-moe")? != ["1"] {
            return Err(bad("unsupported version"));
        }
        let experts = field("experts")?;
        let n_experts = num(experts.first().ok_or_else(|| bad("missing expert count"))?)?;
        let el = field("expert-layout")?;
        let gl = field("gate-layout")?;
        if el.len() != 4 || gl.len() != 4 {
            return Err(bad("layout lines need 4 fields"));
        }
        let act = Activation::parse(&el[3]).ok_or_else(|| bad("unknown activation"))?;
        let topology = MoeTopology {
            in_dim: num(&el[0])?,
            expert_hidden: num(&el[1])?,
            out_dim: num(&el[2])?,
            n_experts,
            gate_hidden: num(&gl[1])?,
            expert_activation: act,
        };
        if num(&gl[0])? != topology.in_dim || num(&gl[2])? != n_experts || gl[3] != "linear" {
            return Err(bad("gate layout inconsistent with experts"));
        }
        let count = num(field("weights")?.first().ok_or_else(|| bad("missing weight count"))?)?;
        let weights = lines
            .by_ref()
            .take(count)
            .map(|l| l.trim().parse::<f64>().map_err(|_| bad(&format!("bad weight `{l}`"))))
            .collect::<Result<Vec<_>>>()?;
        if weights.len() != count {
            return Err(bad("fewer weights than declared"));
        }
        Self::from_weights(topology, weights)
    }
}

/// Mean negative log-likelihood of `model` on `(x, y)`.
pub fn moe_loss(model: &MoeModel, x: &Matrix, y: &Matrix) -> Result<f64> {
    model.loss_at(&model.weights, x, y)
}

/// Exact gradient of [`moe_loss`] in flat order (experts, then gate).
pub fn moe_gradient(model: &MoeModel, x: &Matrix, y: &Matrix) -> Result<Vec<f64>> {
    Ok(model.loss_and_gradient_at(&model.weights, x, y)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trainer {
    Gd,
    Cg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub epochs: usize,
    pub eta_expert: f64,
    pub eta_gate: f64,
    /// Coefficient on the previous update in GD.
    pub momentum: f64,
    pub trainer: Trainer,
    pub cg_formula: BetaFormula,
    pub line_search: LineSearchSpec,
    pub seed: u64,
}

impl TrainSpec {
    pub fn gd(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            eta_expert: 0.1,
            eta_gate: 0.15,
            momentum: 0.9,
            trainer: Trainer::Gd,
            cg_formula: BetaFormula::FletcherReeves,
            line_search: LineSearchSpec::default(),
            seed,
        }
    }

    pub fn cg(epochs: usize, seed: u64) -> Self {
        Self {
            trainer: Trainer::Cg,
            ..Self::gd(epochs, seed)
        }
    }

    fn validate(&self, expected: Trainer) -> Result<()> {
        if self.trainer != expected {
            return Err(Error::param(format!(
                "train spec is for {:?} training, called the {expected:?} trainer",
                self.trainer
            )));
        }
        if self.epochs == 0 {
            return Err(Error::param("epochs must be >= 1"));
        }
        if !(self.eta_expert >= 0.0) || !(self.eta_gate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("learning rates must be >= 0 and momentum in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub model: MoeModel,
    /// Training loss after each epoch.
    pub trace: Vec<f64>,
    /// Number of weight updates applied.
    pub updates: usize,
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// Online gradient descent with momentum: one shuffled pass per epoch.
pub fn train_gd(model: &MoeModel, x: &Matrix, y: &Matrix, spec: &TrainSpec) -> Result<Trained> {
    spec.validate(Trainer::Gd)?;
    model.check_data(x, y)?;
    let mut w = model.weights.clone();
    let mut velocity = vec![0.0; w.len()];
    let mut grad = vec![0.0; w.len()];
    let gate_offset = model.gate_offset();
    let mut rng = RngStream::new(spec.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut s = model.scratch();
    let mut trace = Vec::with_capacity(spec.epochs);
    let mut updates = 0;

    for epoch in 0..spec.epochs {
        rng.shuffle(&mut order);
        for &n in &order {
            grad.iter_mut().for_each(|g| *g = 0.0);
            model.forward_sample(&w, x.row(n), &mut s);
            model.sample_loss(y.row(n), &mut s);
            model.sample_backward(&w, x.row(n), y.row(n), 1.0, &mut s, &mut grad);
            for (i, ((wi, vi), gi)) in w.iter_mut().zip(&mut velocity).zip(&grad).enumerate() {
                let eta = if i < gate_offset { spec.eta_expert } else { spec.eta_gate };
                *vi = spec.momentum * *vi - eta * gi;
                *wi += *vi;
            }
            updates += 1;
        }
        let loss = model.loss_unchecked(&w, x, y);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch: epoch + 1, loss });
        }
        trace.push(loss);
    }
    Ok(Trained {
        model: model.with_weights(w)?,
        trace,
        updates,
    })
}

/// Full-batch conjugate gradient: one line-searched CG step per epoch.
pub fn train_cg(model: &MoeModel, x: &Matrix, y: &Matrix, spec: &TrainSpec) -> Result<Trained> {
    spec.validate(Trainer::Cg)?;
    model.check_data(x, y)?;
    let start = model.loss_unchecked(&model.weights, x, y);
    if !start.is_finite() {
        return Err(Error::Diverged { epoch: 0, loss: start });
    }
    let result = cg::minimize(
        |w| model.loss_unchecked(w, x, y),
        |w| model.loss_and_gradient_unchecked(w, x, y).1,
        &model.weights,
        spec.epochs,
        &spec.line_search,
        spec.cg_formula,
    )
    .map_err(|e| match e {
        Error::NonFinite(_) => Error::Diverged {
            epoch: 0,
            loss: f64::NAN,
        },
        other => other,
    })?;
    Ok(Trained {
        model: model.with_weights(result.weights)?,
        trace: result.trace[1..].to_vec(),
        updates: result.iterations,
    })
}

/// Dispatches on `spec.trainer`.
pub fn train(model: &MoeModel, x: &Matrix, y: &Matrix, spec: &TrainSpec) -> Result<Trained> {
    match spec.trainer {
        Trainer::Gd => train_gd(model, x, y, spec),
        Trainer::Cg => train_cg(model, x, y, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo(in_dim: usize, out_dim: usize, n: usize, act: Activation) -> MoeTopology {
        MoeTopology {
            in_dim,
            out_dim,
            n_experts: n,
            expert_hidden: 3,
            gate_hidden: 4,
            expert_activation: act,
        }
    }

    fn random_data(rng: &mut RngStream, rows: usize, in_dim: usize, out_dim: usize) -> (Matrix, Matrix) {
        let x: Vec<f64> = (0..rows * in_dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let y: Vec<f64> = (0..rows * out_dim).map(|_| rng.uniform_in(0.0, 1.0)).collect();
        (
            Matrix::from_vec(rows, in_dim, x).unwrap(),
            Matrix::from_vec(rows, out_dim, y).unwrap(),
        )
    }

    #[test]
    fn gate_probs_examples() {
        let g = gate_probs(&[0.0, 0.0, 0.0]);
        assert!(g.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(gate_probs(&[1000.0, 1000.0]), vec![0.5, 0.5]);
        let g = gate_probs(&[2f64.ln(), 0.0]);
        assert!((g[0] - 2.0 / 3.0).abs() < 1e-15 && (g[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mix_examples() {
        let outs = vec![vec![1.0, 2.0], vec![5.0, -3.0]];
        assert_eq!(mix(&[1.0, 0.0], &outs).unwrap(), vec![1.0, 2.0]);
        assert_eq!(mix(&[0.5, 0.5], &[vec![2.0], vec![4.0]]).unwrap(), vec![3.0]);
        let same = vec![vec![0.25, 7.0]; 3];
        let m = mix(&[0.2, 0.3, 0.5], &same).unwrap();
        assert!((m[0] - 0.25).abs() < 1e-15 && (m[1] - 7.0).abs() < 1e-14);
        assert!(mix(&[1.0], &outs).is_err());
        assert!(mix(&[0.5, 0.5], &[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn posterior_examples() {
        assert_eq!(posteriors(&[1.0], &[vec![3.0]], &[0.0]).unwrap(), vec![1.0]);
        // |y - O1|^2 = 0, |y - O2|^2 = 2
        let h = posteriors(&[0.5, 0.5], &[vec![1.0, 1.0], vec![2.0, 2.0]], &[1.0, 1.0]).unwrap();
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((h[0] - expected).abs() < 1e-15);
        assert!((h[0] - 0.731059).abs() < 1e-6);
        let g = [0.2, 0.3, 0.5];
        let h = posteriors(&g, &[vec![1.0], vec![-1.0], vec![1.0]], &[0.0]).unwrap();
        for (a, b) in g.iter().zip(&h) {
            assert!((a - b).abs() < 1e-15);
        }
        // far-away experts: every numerator underflows without the shift
        let h = posteriors(&[0.5, 0.5], &[vec![100.0], vec![101.0]], &[0.0]).unwrap();
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(h[0] > 0.99);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.7, 0.1]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    /// Direct transcription of the likelihood, evaluated expert by expert.
    fn loss_oracle(model: &MoeModel, x: &Matrix, y: &Matrix) -> f64 {
        let mut total = 0.0;
        for n in 0..x.rows() {
            let gate = mlp::forward(&model.gate(), x.row(n)).unwrap().output;
            let denom: f64 = gate.iter().map(|v| v.exp()).sum();
            let mut lik = 0.0;
            for i in 0..model.n_experts() {
                let o = mlp::forward(&model.expert(i), x.row(n)).unwrap().output;
                let d2: f64 = o.iter().zip(y.row(n)).map(|(a, b)| (a - b).powi(2)).sum();
                lik += gate[i].exp() / denom * (-0.5 * d2).exp();
            }
            total += -lik.ln();
        }
        total / x.rows() as f64
    }

    #[test]
    fn loss_matches_direct_summation() {
        let mut rng = RngStream::new(5, 0);
        let model = MoeModel::init(topo(3, 2, 2, Activation::Sigmoid), &mut rng, 1.0).unwrap();
        let (x, y) = random_data(&mut rng, 5, 3, 2);
        let a = moe_loss(&model, &x, &y).unwrap();
        let b = loss_oracle(&model, &x, &y);
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn perfect_single_expert_has_zero_loss() {
        // One linear expert with zero weights outputs 0; targets are 0.
        let t = topo(2, 1, 1, Activation::Linear);
        let model = MoeModel::from_weights(t, vec![0.0; t.param_count().unwrap()]).unwrap();
        let x = Matrix::from_rows(&[vec![0.3, 0.1], vec![-1.0, 2.0]]).unwrap();
        let y = Matrix::zeros(2, 1);
        assert_eq!(moe_loss(&model, &x, &y).unwrap(), 0.0);
    }

    #[test]
    fn one_hot_gate_collapses_to_expert_loss() {
        let t = topo(2, 1, 2, Activation::Linear);
        let mut rng = RngStream::new(8, 0);
        let model = MoeModel::init(t, &mut rng, 0.5).unwrap();
        let mut w = model.weights().to_vec();
        // Gate output bias: expert 0 gets +800, expert 1 gets 0; all other gate
        // output weights zero so the gate is one-hot on expert 0.
        let off = model.gate_offset();
        let gl = t.gate_layout().unwrap();
        let out_start = off + gl.hidden_dim * (gl.in_dim + 1);
        for v in &mut w[out_start..] {
            *v = 0.0;
        }
        w[out_start + gl.hidden_dim] = 800.0;
        let model = model.with_weights(w).unwrap();
        let (x, y) = random_data(&mut rng, 6, 2, 1);
        let expected: f64 = (0..6)
            .map(|n| {
                let o = mlp::forward(&model.expert(0), x.row(n)).unwrap().output;
                0.5 * (o[0] - y.get(n, 0)).powi(2)
            })
            .sum::<f64>()
            / 6.0;
        let got = moe_loss(&model, &x, &y).unwrap();
        assert!((got - expected).abs() < 1e-12);
        let out = model.evaluate(x.row(0)).unwrap();
        assert_eq!(out.mixed, out.expert_outs[0]);
        assert_eq!(
            model.predict(x.row(0)).unwrap(),
            mlp::forward(&model.expert(0), x.row(0)).unwrap().output
        );
    }

    fn finite_difference_check(model: &MoeModel, x: &Matrix, y: &Matrix) -> f64 {
        let analytic = moe_gradient(model, x, y).unwrap();
        let w = model.weights().to_vec();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (model.loss_at(&wp, x, y).unwrap() - model.loss_at(&wm, x, y).unwrap()) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-4);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..4 {
            let act = if seed % 2 == 0 { Activation::Sigmoid } else { Activation::Linear };
            let mut rng = RngStream::new(seed, 2);
            let model = MoeModel::init(topo(3, 2, 2, act), &mut rng, 1.0).unwrap();
            let (x, y) = random_data(&mut rng, 8, 3, 2);
            let err = finite_difference_check(&model, &x, &y);
            assert!(err < 1e-5, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn zero_responsibility_expert_gets_zero_gradient() {
        // Expert 1's gate logit is hugely negative, so h_1 underflows to 0.
        let t = topo(2, 1, 2, Activation::Linear);
        let mut rng = RngStream::new(4, 0);
        let model = MoeModel::init(t, &mut rng, 0.5).unwrap();
        let mut w = model.weights().to_vec();
        let gl = t.gate_layout().unwrap();
        let out_start = model.gate_offset() + gl.hidden_dim * (gl.in_dim + 1);
        let stride = gl.hidden_dim + 1;
        w[out_start + stride + gl.hidden_dim] = -2000.0;
        let model = model.with_weights(w).unwrap();
        let (x, y) = random_data(&mut rng, 5, 2, 1);
        let grad = moe_gradient(&model, &x, &y).unwrap();
        let el = t.expert_layout().unwrap().param_count();
        assert!(grad[el..2 * el].iter().all(|&g| g == 0.0));
        assert!(grad[..el].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn symmetric_model_has_zero_gate_gradient() {
        let t = topo(2, 1, 3, Activation::Sigmoid);
        let mut rng = RngStream::new(12, 0);
        let el = t.expert_layout().unwrap().param_count();
        let expert: Vec<f64> = (0..el).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let mut w = Vec::new();
        for _ in 0..3 {
            w.extend_from_slice(&expert);
        }
        let gl = t.gate_layout().unwrap();
        let gate: Vec<f64> = (0..gl.param_count()).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        w.extend(gate);
        // Zero the gate output layer so g is uniform.
        let out_start = 3 * el + gl.hidden_dim * (gl.in_dim + 1);
        for v in &mut w[out_start..] {
            *v = 0.0;
        }
        let model = MoeModel::from_weights(t, w).unwrap();
        let (x, y) = random_data(&mut rng, 6, 2, 1);
        let grad = moe_gradient(&model, &x, &y).unwrap();
        assert!(grad[3 * el..].iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn model_text_roundtrip() {
        let mut rng = RngStream::new(77, 0);
        let model = MoeModel::init(topo(3, 2, 4, Activation::Sigmoid), &mut rng, 2.0).unwrap();
        let text = model.to_text();
        let back = MoeModel::from_text(&text).unwrap();
        assert_eq!(back, model);
        assert!(MoeModel::from_text("moecg-moe 2\n").is_err());
        assert!(MoeModel::from_text(&text[..text.len() / 2]).is_err());
    }

    #[test]
    fn dimension_errors() {
        let mut rng = RngStream::new(1, 0);
        let model = MoeModel::init(topo(3, 2, 2, Activation::Sigmoid), &mut rng, 1.0).unwrap();
        let (x, y) = random_data(&mut rng, 4, 2, 2);
        assert!(moe_loss(&model, &x, &y).is_err());
        assert!(model.predict(&[1.0]).is_err());
        assert!(MoeModel::from_weights(topo(3, 2, 2, Activation::Sigmoid), vec![0.0; 3]).is_err());
    }

    #[test]
    fn gd_counts_updates_and_zero_rate_is_identity() {
        let mut rng = RngStream::new(3, 0);
        let model = MoeModel::init(topo(2, 1, 2, Activation::Linear), &mut rng, 0.5).unwrap();
        let (x, y) = random_data(&mut rng, 7, 2, 1);
        let r = train_gd(&model, &x, &y, &TrainSpec::gd(1, 0)).unwrap();
        assert_eq!(r.updates, 7);
        assert_eq!(r.trace.len(), 1);
        let still = TrainSpec {
            eta_expert: 0.0,
            eta_gate: 0.0,
            ..TrainSpec::gd(3, 0)
        };
        let r = train_gd(&model, &x, &y, &still).unwrap();
        assert_eq!(r.model, model);
        assert!(train_gd(&model, &x, &y, &TrainSpec::gd(0, 0)).is_err());
        assert!(train_gd(&model, &x, &y, &TrainSpec::cg(3, 0)).is_err());
    }

    #[test]
    fn cg_trace_is_monotone_and_deterministic() {
        let mut rng = RngStream::new(21, 0);
        let model = MoeModel::init(topo(2, 2, 3, Activation::Sigmoid), &mut rng, 0.5).unwrap();
        let (x, y) = random_data(&mut rng, 30, 2, 2);
        let spec = TrainSpec::cg(25, 1);
        let a = train_cg(&model, &x, &y, &spec).unwrap();
        let b = train_cg(&model, &x, &y, &spec).unwrap();
        assert_eq!(a, b);
        let start = moe_loss(&model, &x, &y).unwrap();
        assert!(a.trace[0] <= start);
        assert!(a.trace.windows(2).all(|p| p[1] <= p[0]));
        assert!(*a.trace.last().unwrap() < start);
        assert!(train_cg(&model, &x, &y, &TrainSpec::gd(3, 0)).is_err());
    }
}
