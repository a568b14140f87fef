//! Cuckoo search and modified cuckoo search over box-bounded real vectors.
//!
//! Both searches minimize. A flight that lands outside the box is discarded
//! without an objective evaluation and the nest it started from is unchanged.

use std::f64::consts::PI;
use std::io::Write;

use statrs::function::gamma::gamma;

use crate::error::{check_dim, Error, Result};
use crate::kernel::{Matrix, RngStream, WeightVector};
use crate::moe::MoeModel;

/// `(1 + sqrt 5) / 2`.
pub const GOLDEN_RATIO: f64 = 1.618_033_988_749_895;

/// Default Lévy index; the Mantegna exponent is `lambda - 1`.
pub const DEFAULT_LAMBDA: f64 = 2.5;

/// Generations in a row without a single in-bounds flight before a search gives up.
const MAX_IDLE_GENERATIONS: usize = 1000;

/// Per-dimension closed interval `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Bounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_dim("bounds", lo.len(), hi.len())?;
        if lo.is_empty() {
            return Err(Error::param("bounds need at least one dimension"));
        }
        for (l, h) in lo.iter().zip(&hi) {
            if !(l.is_finite() && h.is_finite() && l < h) {
                return Err(Error::param(format!("invalid bound [{l}, {h}]")));
            }
        }
        Ok(Self { lo, hi })
    }

    /// The same interval in every dimension.
    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| rng.uniform_in(l, h))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Nest {
    pub pos: WeightVector,
    pub fitness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsParams {
    pub n_nests: usize,
    /// Fraction of nests abandoned each generation.
    pub p_a: f64,
    pub max_evals: usize,
    /// Step scale applied to every Lévy flight.
    pub alpha: f64,
    pub lambda: f64,
    pub bounds: Bounds,
}

impl CsParams {
    /// 25 nests, `p_a = 0.25`, 10 000 evaluations, step scale 1% of the widest side.
    pub fn new(bounds: Bounds) -> Self {
        let width = bounds
            .lo
            .iter()
            .zip(&bounds.hi)
            .map(|(l, h)| h - l)
            .fold(0.0, f64::max);
        Self {
            n_nests: 25,
            p_a: 0.25,
            max_evals: 10_000,
            alpha: 0.01 * width,
            lambda: DEFAULT_LAMBDA,
            bounds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_common(self.n_nests, self.max_evals, self.lambda)?;
        if !(self.p_a > 0.0 && self.p_a < 1.0) {
            return Err(Error::param(format!("p_a must be in (0, 1), got {}", self.p_a)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::param(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McsParams {
    pub n_nests: usize,
    pub max_evals: usize,
    /// Largest Lévy step scale; shrinks as the generation count grows.
    pub a: f64,
    pub frac_abandon: f64,
    pub frac_top: f64,
    pub lambda: f64,
    pub bounds: Bounds,
}

impl McsParams {
    /// 25 nests, 5000 evaluations, `A = 1`, 75% abandoned, top 25%.
    pub fn new(bounds: Bounds) -> Self {
        Self {
            n_nests: 25,
            max_evals: 5000,
            a: 1.0,
            frac_abandon: 0.75,
            frac_top: 0.25,
            lambda: DEFAULT_LAMBDA,
            bounds,
        }
    }

    /// Defaults over `[-2, 2]^dim`, the box used for network weights.
    pub fn for_weights(dim: usize) -> Result<Self> {
        Ok(Self::new(Bounds::uniform(dim, -2.0, 2.0)?))
    }

    pub fn validate(&self) -> Result<()> {
        validate_common(self.n_nests, self.max_evals, self.lambda)?;
        if !(self.frac_top > 0.0 && self.frac_top < 1.0) {
            return Err(Error::param(format!("frac_top must be in (0, 1), got {}", self.frac_top)));
        }
        if !(self.frac_abandon > 0.0 && self.frac_abandon < 1.0) {
            return Err(Error::param(format!(
                "frac_abandon must be in (0, 1), got {}",
                self.frac_abandon
            )));
        }
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::param(format!("A must be positive, got {}", self.a)));
        }
        Ok(())
    }

    /// Nests abandoned per generation: `floor(frac_abandon * n)`, at least 1, never all.
    pub fn abandon_count(&self) -> usize {
        fraction_count(self.frac_abandon, self.n_nests).min(self.n_nests - 1)
    }

    /// Nests in the top group: `floor(frac_top * n)`, at least 1.
    pub fn top_count(&self) -> usize {
        fraction_count(self.frac_top, self.n_nests).min(self.n_nests)
    }
}

fn fraction_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).floor() as usize).max(1)
}

fn validate_common(n_nests: usize, max_evals: usize, lambda: f64) -> Result<()> {
    if n_nests < 2 {
        return Err(Error::param("at least 2 nests are required"));
    }
    if max_evals < n_nests {
        return Err(Error::param(format!(
            "max_evals ({max_evals}) must cover the initial {n_nests} nests"
        )));
    }
    check_lambda(lambda)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 1.0 && lambda < 3.0 {
        Ok(())
    } else {
        Err(Error::param(format!("Lévy index must be in (1, 3), got {lambda}")))
    }
}

/// Mantegna's scale for the numerator normal at exponent `beta`.
pub fn mantegna_sigma(beta: f64) -> f64 {
    let num = gamma(1.0 + beta) * (PI * beta / 2.0).sin();
    let den = gamma((1.0 + beta) / 2.0) * beta * 2f64.powf((beta - 1.0) / 2.0);
    (num / den).powf(1.0 / beta)
}

/// A Lévy-distributed step per dimension via Mantegna's algorithm.
pub fn levy_step(rng: &mut RngStream, lambda: f64, dim: usize) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    let beta = lambda - 1.0;
    let sigma = mantegna_sigma(beta);
    Ok(levy_with(rng, beta, sigma, dim))
}

fn levy_with(rng: &mut RngStream, beta: f64, sigma: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let u = sigma * rng.standard_normal();
            let v = rng.standard_normal();
            u / v.abs().powf(1.0 / beta)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    /// Cuckoo flight from a random nest (plain search).
    Cuckoo,
    /// Flight of an abandoned nest.
    Abandon,
    /// Flight of a top nest paired with itself.
    Local,
    /// Golden-ratio crossover of two distinct top nests.
    Crossover,
}

/// One attempted move; `alpha` is 0 for crossovers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub generation: usize,
    pub kind: StepKind,
    pub alpha: f64,
    pub in_bounds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: Nest,
    /// Best fitness so far after each objective evaluation.
    pub trace: Vec<f64>,
    pub generations: usize,
    pub steps: Vec<StepRecord>,
    /// Population at the end of the search.
    pub population: Vec<Nest>,
}

impl SearchOutcome {
    pub fn evaluations(&self) -> usize {
        self.trace.len()
    }

    /// Writes `evaluation,best_fitness` rows.
    pub fn write_trace<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["evaluation", "best_fitness"])?;
        for (i, f) in self.trace.iter().enumerate() {
            w.write_record([(i + 1).to_string(), format!("{f:?}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shared bookkeeping: evaluation budget, best-ever nest and trace.
struct Tracker<F> {
    objective: F,
    max_evals: usize,
    best: Option<Nest>,
    trace: Vec<f64>,
    steps: Vec<StepRecord>,
}

impl<F: FnMut(&[f64]) -> f64> Tracker<F> {
    fn new(objective: F, max_evals: usize) -> Self {
        Self {
            objective,
            max_evals,
            best: None,
            trace: Vec::with_capacity(max_evals),
            steps: Vec::new(),
        }
    }

    fn exhausted(&self) -> bool {
        self.trace.len() >= self.max_evals
    }

    fn eval(&mut self, pos: Vec<f64>) -> Nest {
        let f = (self.objective)(&pos);
        let fitness = if f.is_nan() { f64::INFINITY } else { f };
        let nest = Nest { pos, fitness };
        match &self.best {
            Some(b) if b.fitness <= fitness => {}
            _ => self.best = Some(nest.clone()),
        }
        self.trace.push(self.best.as_ref().map_or(fitness, |b| b.fitness));
        nest
    }

    fn init(&mut self, n: usize, bounds: &Bounds, rng: &mut RngStream) -> Vec<Nest> {
        (0..n)
            .map(|_| {
                let p = bounds.sample(rng);
                self.eval(p)
            })
            .collect()
    }

    fn record(&mut self, generation: usize, kind: StepKind, alpha: f64, in_bounds: bool) {
        self.steps.push(StepRecord {
            generation,
            kind,
            alpha,
            in_bounds,
        });
    }

    fn finish(self, generations: usize, population: Vec<Nest>) -> SearchOutcome {
        SearchOutcome {
            best: self.best.expect("at least one evaluation"),
            trace: self.trace,
            generations,
            steps: self.steps,
            population,
        }
    }
}

fn flight(x: &[f64], alpha: f64, step: &[f64]) -> Vec<f64> {
    x.iter().zip(step).map(|(xi, si)| xi + alpha * si).collect()
}

/// Plain cuckoo search: one cuckoo per generation followed by abandonment of
/// the worst `ceil(p_a * n)` nests.
pub fn cs_search<F>(objective: F, params: &CsParams, rng: &mut RngStream) -> Result<SearchOutcome>
where
    F: FnMut(&[f64]) -> f64,
{
    params.validate()?;
    let n = params.n_nests;
    let dim = params.bounds.dim();
    let beta = params.lambda - 1.0;
    let sigma = mantegna_sigma(beta);
    let n_abandon = ((params.p_a * n as f64).ceil() as usize).clamp(1, n - 1);

    let mut t = Tracker::new(objective, params.max_evals);
    let mut nests = t.init(n, &params.bounds, rng);
    let mut generation = 0;
    let mut idle = 0;

    while !t.exhausted() && idle < MAX_IDLE_GENERATIONS {
        generation += 1;
        let before = t.trace.len();

        let i = rng.index(n);
        let cand = flight(&nests[i].pos, params.alpha, &levy_with(rng, beta, sigma, dim));
        let ok = params.bounds.contains(&cand);
        t.record(generation, StepKind::Cuckoo, params.alpha, ok);
        if ok {
            let egg = t.eval(cand);
            let l = rng.index(n);
            if egg.fitness < nests[l].fitness {
                nests[l] = egg;
            }
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| nests[a].fitness.total_cmp(&nests[b].fitness));
        for &k in &order[n - n_abandon..] {
            if t.exhausted() {
                break;
            }
            let cand = flight(&nests[k].pos, params.alpha, &levy_with(rng, beta, sigma, dim));
            let ok = params.bounds.contains(&cand);
            t.record(generation, StepKind::Abandon, params.alpha, ok);
            if ok {
                nests[k] = t.eval(cand);
            }
        }
        idle = if t.trace.len() == before { idle + 1 } else { 0 };
    }
    Ok(t.finish(generation, nests))
}

/// Modified cuckoo search: shrinking flights for the abandoned group and
/// golden-ratio information exchange inside the top group.
pub fn mcs_search<F>(objective: F, params: &McsParams, rng: &mut RngStream) -> Result<SearchOutcome>
where
    F: FnMut(&[f64]) -> f64,
{
    params.validate()?;
    let n = params.n_nests;
    let dim = params.bounds.dim();
    let beta = params.lambda - 1.0;
    let sigma = mantegna_sigma(beta);
    let n_abandon = params.abandon_count();
    let n_top = params.top_count();

    let mut t = Tracker::new(objective, params.max_evals);
    let mut nests = t.init(n, &params.bounds, rng);
    let mut generation = 0;
    let mut idle = 0;

    while !t.exhausted() && idle < MAX_IDLE_GENERATIONS {
        generation += 1;
        let before = t.trace.len();
        let g = generation as f64;

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| nests[a].fitness.total_cmp(&nests[b].fitness));

        let alpha = params.a / g.sqrt();
        for &k in &order[n - n_abandon..] {
            if t.exhausted() {
                break;
            }
            let cand = flight(&nests[k].pos, alpha, &levy_with(rng, beta, sigma, dim));
            let ok = params.bounds.contains(&cand);
            t.record(generation, StepKind::Abandon, alpha, ok);
            if ok {
                nests[k] = t.eval(cand);
            }
        }

        let top = &order[..n_top];
        for &i in top {
            if t.exhausted() {
                break;
            }
            let j = top[rng.index(n_top)];
            let (cand, kind, step_alpha) = if i == j {
                let alpha = params.a / (g * g);
                let cand = flight(&nests[i].pos, alpha, &levy_with(rng, beta, sigma, dim));
                (cand, StepKind::Local, alpha)
            } else {
                (crossover(&nests[i], &nests[j]), StepKind::Crossover, 0.0)
            };
            let ok = params.bounds.contains(&cand);
            t.record(generation, kind, step_alpha, ok);
            if ok {
                let egg = t.eval(cand);
                let l = rng.index(n);
                if egg.fitness < nests[l].fitness {
                    nests[l] = egg;
                }
            }
        }
        idle = if t.trace.len() == before { idle + 1 } else { 0 };
    }
    Ok(t.finish(generation, nests))
}

/// New egg on the segment between two nests, `|x_i - x_j| / phi` away from the
/// worse one toward the better; the midpoint when their fitness ties.
pub fn crossover(a: &Nest, b: &Nest) -> Vec<f64> {
    let (worse, better, frac) = if a.fitness == b.fitness {
        (a, b, 0.5)
    } else if a.fitness < b.fitness {
        (b, a, 1.0 / GOLDEN_RATIO)
    } else {
        (a, b, 1.0 / GOLDEN_RATIO)
    };
    worse
        .pos
        .iter()
        .zip(&better.pos)
        .map(|(w, b)| w + (b - w) * frac)
        .collect()
}

/// Picks starting weights for `model`'s topology by minimizing the raw
/// mixture loss on `(x, y)` with modified cuckoo search.
pub fn init_weights_mcs(
    model: &MoeModel,
    x: &Matrix,
    y: &Matrix,
    params: &McsParams,
    rng: &mut RngStream,
) -> Result<WeightVector> {
    Ok(search_weights(model, x, y, params, rng)?.best.pos)
}

/// As [`init_weights_mcs`], returning the whole search record.
pub fn search_weights(
    model: &MoeModel,
    x: &Matrix,
    y: &Matrix,
    params: &McsParams,
    rng: &mut RngStream,
) -> Result<SearchOutcome> {
    check_dim("search dimension", model.param_count(), params.bounds.dim())?;
    model.check_data(x, y)?;
    mcs_search(|w| model.loss_unchecked(w, x, y), params, rng)
}

/// Sphere `sum x_i^2`.
pub fn sphere(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Rosenbrock `sum 100 (x_{i+1} - x_i^2)^2 + (1 - x_i)^2`.
pub fn rosenbrock(x: &[f64]) -> f64 {
    x.windows(2)
        .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
        .sum()
}

/// Rastrigin `10 n + sum x_i^2 - 10 cos(2 pi x_i)`.
pub fn rastrigin(x: &[f64]) -> f64 {
    10.0 * x.len() as f64 + x.iter().map(|v| v * v - 10.0 * (2.0 * PI * v).cos()).sum::<f64>()
}

/// Ackley function with the usual constants `(20, 0.2, 2 pi)`.
pub fn ackley(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let s1 = x.iter().map(|v| v * v).sum::<f64>() / n;
    let s2 = x.iter().map(|v| (2.0 * PI * v).cos()).sum::<f64>() / n;
    -20.0 * (-0.2 * s1.sqrt()).exp() - s2.exp() + 20.0 + std::f64::consts::E
}

/// Benchmark function by name, with its customary search box half-width.
pub fn benchmark(name: &str) -> Option<(fn(&[f64]) -> f64, f64)> {
    match name {
        "sphere" => Some((sphere, 5.0)),
        "rosenbrock" => Some((rosenbrock, 5.0)),
        "rastrigin" => Some((rastrigin, 5.12)),
        "ackley" => Some((ackley, 32.768)),
        _ => None,
    }
}
