//! Nonlinear conjugate gradient with a bracketing golden-section line search.
//!
//! Directions follow `dir(k) = -grad(k) + beta * dir(k-1)`, with `beta` from one
//! of the classic formulas. The iteration restarts from steepest descent every
//! `restart_period` steps, whenever `beta` cannot be formed, and whenever the
//! combined direction fails to descend.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernel::{dot_unchecked, norm_inf, WeightVector};

const GOLDEN: f64 = 1.618_033_988_749_895;

/// Relative size below which two `phi` values are treated as equal.
const NOISE_RTOL: f64 = 64.0 * f64::EPSILON;

fn noise(v: f64) -> f64 {
    NOISE_RTOL * v.abs()
}

/// Minimizer of the parabola through three points with `a < b < c`, if it
/// lies strictly inside `(a, c)`.
fn parabola_vertex((a, fa): (f64, f64), (b, fb): (f64, f64), (c, fc): (f64, f64)) -> Option<f64> {
    let p = (b - a) * (fb - fc);
    let q = (b - c) * (fb - fa);
    let den = 2.0 * (p - q);
    let u = b - ((b - a) * p - (b - c) * q) / den;
    (den != 0.0 && u.is_finite() && u > a && u < c).then_some(u)
}

/// Gradient infinity norm below which `minimize` declares convergence.
pub const GRAD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaFormula {
    #[default]
    FletcherReeves,
    PolakRibiere,
    HestenesStiefel,
}

/// A `beta` coefficient; `restart` is set when the denominator vanished.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Beta {
    pub value: f64,
    pub restart: bool,
}

/// Conjugacy coefficient from the new gradient, the previous gradient and the
/// previous direction. Negative values are clamped to zero.
pub fn beta(formula: BetaFormula, d_new: &[f64], d_old: &[f64], dir_old: &[f64]) -> Result<Beta> {
    check_dim("beta gradients", d_new.len(), d_old.len())?;
    check_dim("beta direction", d_new.len(), dir_old.len())?;
    let (num, den) = match formula {
        BetaFormula::FletcherReeves => (dot_unchecked(d_new, d_new), dot_unchecked(d_old, d_old)),
        BetaFormula::PolakRibiere => {
            let num = d_new
                .iter()
                .zip(d_old)
                .map(|(n, o)| n * (n - o))
                .sum::<f64>();
            (num, dot_unchecked(d_old, d_old))
        }
        BetaFormula::HestenesStiefel => {
            let mut num = 0.0;
            let mut den = 0.0;
            for ((n, o), p) in d_new.iter().zip(d_old).zip(dir_old) {
                let y = n - o;
                num += y * n;
                den += p * y;
            }
            (num, den)
        }
    };
    if !(den.abs() > 1e-300) || !num.is_finite() {
        return Ok(Beta {
            value: 0.0,
            restart: true,
        });
    }
    Ok(Beta {
        value: (num / den).max(0.0),
        restart: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LineSearchSpec {
    pub eta_max: f64,
    /// First probe step and final bracket width.
    pub tol: f64,
    /// Budget of `phi` evaluations, excluding `phi(0)`.
    pub max_evals: usize,
    pub fallback_eta: f64,
}

impl Default for LineSearchSpec {
    fn default() -> Self {
        Self {
            eta_max: 10.0,
            tol: 1e-4,
            max_evals: 20,
            fallback_eta: 0.1,
        }
    }
}

impl LineSearchSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_max > 0.0) || !(self.tol > 0.0) || self.max_evals < 3 {
            return Err(Error::param(format!(
                "line search needs eta_max > 0, tol > 0, max_evals >= 3; got {self:?}"
            )));
        }
        if !(self.fallback_eta >= 0.0) {
            return Err(Error::param("fallback_eta must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearchOutcome {
    pub eta: f64,
    /// `phi(eta)`; NaN evaluations are reported as `+inf`.
    pub value: f64,
    /// Number of `phi` calls, including `phi(0)` when the search computed it.
    pub evals: usize,
    /// `value < phi(0)`.
    pub improved: bool,
}

/// Approximately minimizes `phi` over `eta >= 0`.
///
/// Steps double from `tol` until `phi` stops decreasing (or `eta_max` is hit),
/// then the bracket is narrowed by golden section to width `tol` or until the
/// budget runs out. The best evaluated point is returned, so `phi(eta) <= phi(0)`
/// whenever any improvement was seen. If the first probe does not improve and
/// `phi` is rising linearly away from zero (the ray is not a descent ray),
/// `fallback_eta` is returned instead.
///
/// Near the minimum, differences in `phi` sink below rounding error and
/// comparisons alone cannot place `eta` closely. The vertex of the parabola
/// through the doubling bracket is therefore also evaluated, and it is
/// preferred whenever its value ties the best within rounding.
pub fn line_search<F: FnMut(f64) -> f64>(mut phi: F, spec: &LineSearchSpec) -> Result<LineSearchOutcome> {
    spec.validate()?;
    let f0 = phi(0.0);
    if !f0.is_finite() {
        return Err(Error::NonFinite(format!("line search phi(0) = {f0}")));
    }
    let mut out = line_search_from(phi, f0, spec);
    out.evals += 1;
    Ok(out)
}

struct Probe<F> {
    phi: F,
    evals: usize,
    budget: usize,
    f0: f64,
    best_eta: f64,
    best_val: f64,
    vertex: Option<(f64, f64)>,
}

impl<F: FnMut(f64) -> f64> Probe<F> {
    fn eval(&mut self, eta: f64) -> f64 {
        self.evals += 1;
        let v = (self.phi)(eta);
        let v = if v.is_nan() { f64::INFINITY } else { v };
        if v < self.best_val {
            self.best_val = v;
            self.best_eta = eta;
        }
        v
    }

    fn exhausted(&self) -> bool {
        self.evals >= self.budget
    }

    fn golden(&mut self, mut a: f64, mut b: f64, tol: f64) {
        let inv = 1.0 / GOLDEN;
        let mut c = b - (b - a) * inv;
        let mut d = a + (b - a) * inv;
        if self.exhausted() {
            return;
        }
        let mut fc = self.eval(c);
        if self.exhausted() {
            return;
        }
        let mut fd = self.eval(d);
        while b - a > tol && !self.exhausted() {
            if fc <= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - (b - a) * inv;
                fc = self.eval(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + (b - a) * inv;
                fd = self.eval(d);
            }
        }
    }

    fn try_vertex(&mut self, a: (f64, f64), b: (f64, f64), c: (f64, f64)) {
        if self.exhausted() {
            return;
        }
        if let Some(u) = parabola_vertex(a, b, c) {
            let v = self.eval(u);
            self.vertex = Some((u, v));
        }
    }

    fn outcome(&self) -> LineSearchOutcome {
        let (eta, value) = match self.vertex {
            Some((u, v)) if v < self.f0 && v <= self.best_val + noise(self.best_val) => (u, v),
            _ => (self.best_eta, self.best_val),
        };
        LineSearchOutcome {
            eta,
            value,
            evals: self.evals,
            improved: value < self.f0,
        }
    }
}

/// Line search with `phi(0) = f0` already known.
pub(crate) fn line_search_from<F: FnMut(f64) -> f64>(
    phi: F,
    f0: f64,
    spec: &LineSearchSpec,
) -> LineSearchOutcome {
    let mut p = Probe {
        phi,
        evals: 0,
        budget: spec.max_evals,
        f0,
        best_eta: 0.0,
        best_val: f0,
        vertex: None,
    };
    let t = spec.tol.min(spec.eta_max);
    let f1 = p.eval(t);
    if f1 > f0 + noise(f0) {
        let t2 = (2.0 * t).min(spec.eta_max);
        let f2 = p.eval(t2);
        // One-sided second-order estimate of phi'(0).
        let slope = (4.0 * f1 - 3.0 * f0 - f2) / (2.0 * t);
        if f1 > f0 && f2.is_finite() && slope * t > 0.5 * (f1 - f0) {
            let v = p.eval(spec.fallback_eta);
            return LineSearchOutcome {
                eta: spec.fallback_eta,
                value: v,
                evals: p.evals,
                improved: v < f0,
            };
        }
        p.golden(0.0, t2, spec.tol);
        return p.outcome();
    }

    let (mut lo, mut f_lo, mut mid, mut f_mid) = (0.0, f0, t, f1);
    loop {
        if mid >= spec.eta_max || p.exhausted() {
            break;
        }
        let next = (2.0 * mid).min(spec.eta_max);
        let f_next = p.eval(next);
        if f_next > f_mid + noise(f_mid) {
            p.try_vertex((lo, f_lo), (mid, f_mid), (next, f_next));
            p.golden(lo, next, spec.tol);
            break;
        }
        lo = mid;
        f_lo = f_mid;
        mid = next;
        f_mid = f_next;
    }
    p.outcome()
}

/// Direction state carried between CG iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct CgState {
    prev_grad: Vec<f64>,
    prev_dir: Vec<f64>,
    iter: usize,
    formula: BetaFormula,
    restart_period: usize,
    last_restart: bool,
}

impl CgState {
    /// `restart_period` of 0 is treated as 1 (pure steepest descent).
    pub fn new(formula: BetaFormula, restart_period: usize) -> Self {
        Self {
            prev_grad: Vec::new(),
            prev_dir: Vec::new(),
            iter: 0,
            formula,
            restart_period: restart_period.max(1),
            last_restart: false,
        }
    }

    pub fn iter(&self) -> usize {
        self.iter
    }

    pub fn formula(&self) -> BetaFormula {
        self.formula
    }

    /// Whether the most recent direction was a steepest-descent restart.
    pub fn last_was_restart(&self) -> bool {
        self.last_restart
    }

    /// Forget history; the next direction will be `-grad`.
    pub fn reset(&mut self) {
        self.prev_grad.clear();
        self.prev_dir.clear();
        self.iter = 0;
    }

    /// Computes the next search direction for `grad` and advances the state.
    pub fn next_direction(&mut self, grad: &[f64]) -> Result<Vec<f64>> {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient passed to CG".into()));
        }
        let fresh = self.prev_grad.is_empty();
        if !fresh {
            check_dim("cg_direction gradient", self.prev_grad.len(), grad.len())?;
        }
        let steepest: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut dir = None;
        if !fresh && self.iter % self.restart_period != 0 {
            let b = beta(self.formula, grad, &self.prev_grad, &self.prev_dir)?;
            if !b.restart {
                let d: Vec<f64> = steepest
                    .iter()
                    .zip(&self.prev_dir)
                    .map(|(s, p)| s + b.value * p)
                    .collect();
                if dot_unchecked(&d, grad) < 0.0 {
                    dir = Some(d);
                }
            }
        }
        self.last_restart = dir.is_none();
        let dir = dir.unwrap_or(steepest);
        self.prev_grad = grad.to_vec();
        self.prev_dir = dir.clone();
        self.iter += 1;
        Ok(dir)
    }
}

/// Functional form of [`CgState::next_direction`].
pub fn cg_direction(mut state: CgState, grad: &[f64]) -> Result<(Vec<f64>, CgState)> {
    let d = state.next_direction(grad)?;
    Ok((d, state))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimized {
    pub weights: WeightVector,
    /// Objective at the start and after every iteration; never increases.
    pub trace: Vec<f64>,
    pub iterations: usize,
    /// Infinity norm of the last gradient computed.
    pub grad_norm: f64,
}

/// Conjugate-gradient minimization, `w(k+1) = w(k) + eta(k) * dir(k)`.
///
/// A step is only taken when the line search strictly improves the objective.
/// When it does not, the direction history is dropped and steepest descent is
/// tried once; if that fails too, the iteration stops.
pub fn minimize<O, G>(
    objective: O,
    gradient: G,
    w0: &[f64],
    max_iters: usize,
    ls: &LineSearchSpec,
    formula: BetaFormula,
) -> Result<Minimized>
where
    O: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    ls.validate()?;
    let mut w = w0.to_vec();
    let mut f = objective(&w);
    if !f.is_finite() {
        return Err(Error::param(format!("objective is {f} at the starting point")));
    }
    let mut trace = vec![f];
    let mut state = CgState::new(formula, w.len());
    let mut trial = vec![0.0; w.len()];
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;

    for _ in 0..max_iters {
        let g = gradient(&w);
        check_dim("minimize gradient", w.len(), g.len())?;
        grad_norm = norm_inf(&g);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient in minimize".into()));
        }
        if grad_norm < GRAD_TOL {
            break;
        }
        let mut accepted = false;
        loop {
            let d = state.next_direction(&g)?;
            let out = line_search_from(
                |eta| {
                    for ((t, wi), di) in trial.iter_mut().zip(&w).zip(&d) {
                        *t = wi + eta * di;
                    }
                    objective(&trial)
                },
                f,
                ls,
            );
            if out.improved && out.value.is_finite() {
                for (wi, di) in w.iter_mut().zip(&d) {
                    *wi += out.eta * di;
                }
                f = out.value;
                accepted = true;
                break;
            }
            if state.last_was_restart() {
                break;
            }
            state.reset();
        }
        if !accepted {
            break;
        }
        iterations += 1;
        trace.push(f);
    }
    Ok(Minimized {
        weights: w,
        trace,
        iterations,
        grad_norm,
    })
}
