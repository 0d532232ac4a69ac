//! Post-hoc calibration of logits: a scalar temperature or a Dirichlet
//! (affine, class-wise) map, both fitted on labeled validation logits by
//! full-batch gradient descent from the identity map.
//!
//! The Dirichlet objective is the mean cross-entropy of `A v + b` plus
//! `(λ1 / C) |b|²` and `(λ2 / C²) |offdiag(A)|²`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

pub const GAMMA_MIN: f64 = 0.05;
pub const GAMMA_MAX: f64 = 20.0;

/// Logit vector paired with its ground-truth class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledLogits {
    pub logits: Vec<f64>,
    pub label: usize,
}

impl LabeledLogits {
    pub fn new(logits: Vec<f64>, label: usize) -> Self {
        LabeledLogits { logits, label }
    }
}

/// Positive temperature multiplier applied to logits, kept in
/// `[GAMMA_MIN, GAMMA_MAX]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(transparent)]
pub struct TemperatureParam(f64);

impl TemperatureParam {
    pub const IDENTITY: TemperatureParam = TemperatureParam(1.0);

    pub fn new(gamma: f64) -> Result<Self> {
        if !(GAMMA_MIN..=GAMMA_MAX).contains(&gamma) {
            return Err(Error::data(format!(
                "temperature {gamma} outside [{GAMMA_MIN}, {GAMMA_MAX}]"
            )));
        }
        Ok(TemperatureParam(gamma))
    }

    pub fn gamma(self) -> f64 {
        self.0
    }
}

/// Affine logit map `v -> A v + b` with `A` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletMap {
    num_classes: usize,
    matrix: Vec<f64>,
    bias: Vec<f64>,
}

impl DirichletMap {
    pub fn identity(num_classes: usize) -> Self {
        Self::scalar(num_classes, 1.0)
    }

    /// `A = gamma * I`, `b = 0`.
    pub fn scalar(num_classes: usize, gamma: f64) -> Self {
        let mut matrix = vec![0.0; num_classes * num_classes];
        for i in 0..num_classes {
            matrix[i * num_classes + i] = gamma;
        }
        DirichletMap {
            num_classes,
            matrix,
            bias: vec![0.0; num_classes],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        let c = bias.len();
        if c == 0 || rows.len() != c || rows.iter().any(|r| r.len() != c) {
            return Err(Error::data(format!(
                "Dirichlet map must be C x C with a length-C bias (bias has {c} entries, matrix has {} rows)",
                rows.len()
            )));
        }
        let matrix: Vec<f64> = rows.into_iter().flatten().collect();
        if matrix.iter().chain(&bias).any(|x| !x.is_finite()) {
            return Err(Error::data("Dirichlet map has non-finite entries"));
        }
        Ok(DirichletMap {
            num_classes: c,
            matrix,
            bias,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn a(&self, row: usize, col: usize) -> f64 {
        self.matrix[row * self.num_classes + col]
    }

    /// Row-major entries of `A`.
    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.matrix
            .chunks(self.num_classes)
            .map(<[f64]>::to_vec)
            .collect()
    }

    fn affine_into(&self, v: &[f64], out: &mut [f64]) {
        let c = self.num_classes;
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.matrix[i * c..(i + 1) * c];
            *o = row.iter().zip(v).map(|(a, x)| a * x).sum::<f64>() + self.bias[i];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Convergence threshold on the gradient infinity-norm.
    pub grad_tolerance: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.01,
            max_iters: 5000,
            grad_tolerance: 1e-7,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::config("max_iters must be positive"));
        }
        if self.grad_tolerance.is_nan() || self.grad_tolerance <= 0.0 {
            return Err(Error::config("grad_tolerance must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::config("lambda1 and lambda2 must be nonnegative"));
        }
        Ok(())
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::data("softmax input has non-finite entries"));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(out)
}

/// Softmax without input validation, written into `out`.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = (x - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

pub(crate) fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::data(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

fn check_batch(data: &[LabeledLogits]) -> Result<usize> {
    let first = data
        .first()
        .ok_or_else(|| Error::data("empty validation set"))?;
    let c = first.logits.len();
    for (i, s) in data.iter().enumerate() {
        if s.logits.len() != c {
            return Err(Error::data(format!(
                "validation sample {i} has {} logits, expected {c}",
                s.logits.len()
            )));
        }
        if s.label >= c {
            return Err(Error::data(format!(
                "validation sample {i} label {} out of range",
                s.label
            )));
        }
    }
    Ok(c)
}

/// Mean cross-entropy over a batch.
pub fn mean_cross_entropy(data: &[LabeledLogits]) -> Result<f64> {
    check_batch(data)?;
    let total: f64 = data
        .iter()
        .map(|s| log_sum_exp(&s.logits) - s.logits[s.label])
        .sum();
    Ok(total / data.len() as f64)
}

pub fn apply_temperature(gamma: TemperatureParam, logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|x| gamma.0 * x).collect()
}

pub fn apply_dirichlet(map: &DirichletMap, logits: &[f64]) -> Result<Vec<f64>> {
    if logits.len() != map.num_classes {
        return Err(Error::data(format!(
            "Dirichlet map is {0}x{0} but logits have {1} entries",
            map.num_classes,
            logits.len()
        )));
    }
    let mut out = vec![0.0; map.num_classes];
    map.affine_into(logits, &mut out);
    Ok(out)
}

/// Mean NLL of `gamma * v` and its derivative with respect to `gamma`.
fn temperature_nll_and_slope(gamma: f64, data: &[LabeledLogits]) -> (f64, f64) {
    let c = data[0].logits.len();
    let mut scaled = vec![0.0; c];
    let mut probs = vec![0.0; c];
    let (mut nll, mut slope) = (0.0, 0.0);
    for s in data {
        for (z, v) in scaled.iter_mut().zip(&s.logits) {
            *z = gamma * v;
        }
        nll += log_sum_exp(&scaled) - scaled[s.label];
        softmax_into(&scaled, &mut probs);
        slope += probs.iter().zip(&s.logits).map(|(p, v)| p * v).sum::<f64>() - s.logits[s.label];
    }
    let n = data.len() as f64;
    (nll / n, slope / n)
}

/// Mean NLL of temperature-scaled logits.
pub fn temperature_objective(gamma: f64, data: &[LabeledLogits]) -> Result<f64> {
    check_batch(data)?;
    Ok(temperature_nll_and_slope(gamma, data).0)
}

fn penalties(map: &DirichletMap, reg: &RegularizerConfig) -> f64 {
    let c = map.num_classes;
    let cf = c as f64;
    let bias_sq: f64 = map.bias.iter().map(|b| b * b).sum();
    let mut off_sq = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i != j {
                off_sq += map.a(i, j).powi(2);
            }
        }
    }
    reg.lambda1 / cf * bias_sq + reg.lambda2 / (cf * cf) * off_sq
}

fn check_map(map: &DirichletMap, c: usize) -> Result<()> {
    if map.num_classes != c {
        return Err(Error::data(format!(
            "Dirichlet map dimension {} does not match {c} classes",
            map.num_classes
        )));
    }
    Ok(())
}

fn dirichlet_mean_ce(map: &DirichletMap, data: &[LabeledLogits]) -> f64 {
    let mut z = vec![0.0; map.num_classes];
    let total: f64 = data
        .iter()
        .map(|s| {
            map.affine_into(&s.logits, &mut z);
            log_sum_exp(&z) - z[s.label]
        })
        .sum();
    total / data.len() as f64
}

/// Regularized Dirichlet calibration objective.
pub fn dirichlet_objective(
    map: &DirichletMap,
    data: &[LabeledLogits],
    reg: &RegularizerConfig,
) -> Result<f64> {
    let c = check_batch(data)?;
    check_map(map, c)?;
    Ok(dirichlet_mean_ce(map, data) + penalties(map, reg))
}

/// Gradient of [`dirichlet_objective`] with `A` flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletGradient {
    pub matrix: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DirichletGradient {
    pub fn inf_norm(&self) -> f64 {
        self.matrix
            .iter()
            .chain(&self.bias)
            .fold(0.0, |m, g| m.max(g.abs()))
    }
}

pub fn dirichlet_gradient(
    map: &DirichletMap,
    data: &[LabeledLogits],
    reg: &RegularizerConfig,
) -> Result<DirichletGradient> {
    let c = check_batch(data)?;
    check_map(map, c)?;
    Ok(dirichlet_gradient_unchecked(map, data, reg))
}

fn dirichlet_gradient_unchecked(
    map: &DirichletMap,
    data: &[LabeledLogits],
    reg: &RegularizerConfig,
) -> DirichletGradient {
    let c = map.num_classes;
    let cf = c as f64;
    let n = data.len() as f64;
    let mut ga = vec![0.0; c * c];
    let mut gb = vec![0.0; c];
    let mut z = vec![0.0; c];
    let mut p = vec![0.0; c];
    for s in data {
        map.affine_into(&s.logits, &mut z);
        softmax_into(&z, &mut p);
        p[s.label] -= 1.0;
        for i in 0..c {
            gb[i] += p[i];
            let row = &mut ga[i * c..(i + 1) * c];
            for (g, v) in row.iter_mut().zip(&s.logits) {
                *g += p[i] * v;
            }
        }
    }
    ga.iter_mut().for_each(|g| *g /= n);
    gb.iter_mut().for_each(|g| *g /= n);
    for (g, b) in gb.iter_mut().zip(&map.bias) {
        *g += 2.0 * reg.lambda1 / cf * b;
    }
    for i in 0..c {
        for j in 0..c {
            if i != j {
                ga[i * c + j] += 2.0 * reg.lambda2 / (cf * cf) * map.a(i, j);
            }
        }
    }
    DirichletGradient {
        matrix: ga,
        bias: gb,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundHit {
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureFit {
    pub gamma: TemperatureParam,
    pub converged: bool,
    pub iters: usize,
    pub initial_nll: f64,
    pub final_nll: f64,
    /// Set when the optimum lies on (or beyond) a bound and was clipped.
    pub bound_hit: Option<BoundHit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirichletFit {
    pub map: DirichletMap,
    pub converged: bool,
    pub iters: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    /// Unregularized mean cross-entropy at the returned map.
    pub final_nll: f64,
    pub final_grad_norm: f64,
}

struct DescentOutcome {
    converged: bool,
    iters: usize,
}

/// Full-batch gradient descent at a fixed learning rate. A step that raises
/// the objective by more than rounding noise is halved until it does not.
/// Near the optimum the per-step decrease falls below `f64` resolution, so
/// steps within that slack are taken; `x` ends at the lowest-objective
/// iterate, which keeps the result no worse than the start.
fn descend(
    x: &mut Vec<f64>,
    cfg: &OptimizerConfig,
    objective: impl Fn(&[f64]) -> f64,
    gradient: impl Fn(&[f64]) -> Vec<f64>,
    project: impl Fn(&mut [f64]),
    stationary: impl Fn(&[f64], &[f64]) -> bool,
) -> DescentOutcome {
    const MAX_HALVINGS: usize = 60;
    let slack = |f: f64| 8.0 * f64::EPSILON * f.abs().max(1.0);
    let mut fx = objective(x);
    let mut best = (fx, x.clone());
    let mut cand = x.clone();
    let mut outcome = DescentOutcome {
        converged: false,
        iters: cfg.max_iters,
    };
    for iter in 0..cfg.max_iters {
        let g = gradient(x);
        if stationary(x, &g) {
            outcome = DescentOutcome {
                converged: true,
                iters: iter,
            };
            break;
        }
        let mut step = cfg.learning_rate;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            for ((c, xi), gi) in cand.iter_mut().zip(x.iter()).zip(&g) {
                *c = xi - step * gi;
            }
            project(&mut cand);
            let fc = objective(&cand);
            if fc <= fx + slack(fx) {
                fx = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No representable descent step: numerically stationary.
            outcome.iters = iter;
            break;
        }
        std::mem::swap(x, &mut cand);
        if fx < best.0 {
            best = (fx, x.clone());
        }
    }
    if outcome.iters == cfg.max_iters {
        outcome.converged = stationary(x, &gradient(x));
    }
    if objective(x) > best.0 {
        *x = best.1;
    }
    outcome
}

/// Fits the scalar temperature minimizing validation NLL, starting at 1.
pub fn fit_temperature(data: &[LabeledLogits], cfg: &OptimizerConfig) -> Result<TemperatureFit> {
    check_batch(data)?;
    cfg.validate()?;
    let tol = cfg.grad_tolerance;
    let initial_nll = temperature_nll_and_slope(1.0, data).0;
    let mut x = vec![1.0];
    let outcome = descend(
        &mut x,
        cfg,
        |g| temperature_nll_and_slope(g[0], data).0,
        |g| vec![temperature_nll_and_slope(g[0], data).1],
        |g| g[0] = g[0].clamp(GAMMA_MIN, GAMMA_MAX),
        |x, g| {
            g[0].abs() <= tol || (x[0] <= GAMMA_MIN && g[0] > 0.0) || (x[0] >= GAMMA_MAX && g[0] < 0.0)
        },
    );
    let gamma = x[0];
    let (final_nll, slope) = temperature_nll_and_slope(gamma, data);
    let bound_hit = if gamma <= GAMMA_MIN && slope > 0.0 {
        Some(BoundHit::Lower)
    } else if gamma >= GAMMA_MAX && slope < 0.0 {
        Some(BoundHit::Upper)
    } else {
        None
    };
    Ok(TemperatureFit {
        gamma: TemperatureParam(gamma),
        converged: outcome.converged,
        iters: outcome.iters,
        initial_nll,
        final_nll,
        bound_hit,
    })
}

/// Fits `A`, `b` from `A = I`, `b = 0`. Non-convergence is reported in the
/// result, not as an error.
pub fn fit_dirichlet(
    data: &[LabeledLogits],
    reg: &RegularizerConfig,
    cfg: &OptimizerConfig,
) -> Result<DirichletFit> {
    let c = check_batch(data)?;
    cfg.validate()?;
    reg.validate()?;
    let tol = cfg.grad_tolerance;
    let unpack = |x: &[f64]| DirichletMap {
        num_classes: c,
        matrix: x[..c * c].to_vec(),
        bias: x[c * c..].to_vec(),
    };
    let start = DirichletMap::identity(c);
    let initial_objective = dirichlet_mean_ce(&start, data) + penalties(&start, reg);
    let mut x: Vec<f64> = start.matrix.iter().chain(&start.bias).copied().collect();
    let outcome = descend(
        &mut x,
        cfg,
        |x| {
            let m = unpack(x);
            dirichlet_mean_ce(&m, data) + penalties(&m, reg)
        },
        |x| {
            let g = dirichlet_gradient_unchecked(&unpack(x), data, reg);
            g.matrix.into_iter().chain(g.bias).collect()
        },
        |_| {},
        |_, g| g.iter().all(|v| v.abs() <= tol),
    );
    let map = unpack(&x);
    let final_nll = dirichlet_mean_ce(&map, data);
    let final_objective = final_nll + penalties(&map, reg);
    let final_grad_norm = dirichlet_gradient_unchecked(&map, data, reg).inf_norm();
    Ok(DirichletFit {
        map,
        converged: outcome.converged,
        iters: outcome.iters,
        initial_objective,
        final_objective,
        final_nll,
        final_grad_norm,
    })
}

/// A fitted calibration map of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum CalibrationMap {
    Temperature(TemperatureParam),
    Dirichlet(DirichletMap),
}

impl CalibrationMap {
    pub fn kind(&self) -> &'static str {
        match self {
            CalibrationMap::Temperature(_) => "temperature",
            CalibrationMap::Dirichlet(_) => "dirichlet",
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self {
            CalibrationMap::Temperature(_) => None,
            CalibrationMap::Dirichlet(m) => Some(m.num_classes()),
        }
    }

    /// Calibrated logits for one vector.
    pub fn apply(&self, logits: &[f64]) -> Result<Vec<f64>> {
        match self {
            CalibrationMap::Temperature(g) => Ok(apply_temperature(*g, logits)),
            CalibrationMap::Dirichlet(m) => apply_dirichlet(m, logits),
        }
    }
}

/// Contents of a calibration file: the map plus its fit status.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationFile {
    pub map: CalibrationMap,
    pub converged: bool,
    pub iters: usize,
    pub final_nll: f64,
}

impl From<&TemperatureFit> for CalibrationFile {
    fn from(fit: &TemperatureFit) -> Self {
        CalibrationFile {
            map: CalibrationMap::Temperature(fit.gamma),
            converged: fit.converged,
            iters: fit.iters,
            final_nll: fit.final_nll,
        }
    }
}

impl From<&DirichletFit> for CalibrationFile {
    fn from(fit: &DirichletFit) -> Self {
        CalibrationFile {
            map: CalibrationMap::Dirichlet(fit.map.clone()),
            converged: fit.converged,
            iters: fit.iters,
            final_nll: fit.final_nll,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum MapRepr {
    Temperature {
        gamma: f64,
    },
    Dirichlet {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
    },
}

#[derive(Serialize, Deserialize)]
struct FileRepr {
    #[serde(flatten)]
    map: MapRepr,
    converged: bool,
    iters: usize,
    final_nll: f64,
}

impl CalibrationFile {
    pub fn to_json(&self) -> String {
        let map = match &self.map {
            CalibrationMap::Temperature(g) => MapRepr::Temperature { gamma: g.gamma() },
            CalibrationMap::Dirichlet(m) => MapRepr::Dirichlet {
                a: m.rows(),
                b: m.bias.clone(),
            },
        };
        let repr = FileRepr {
            map,
            converged: self.converged,
            iters: self.iters,
            final_nll: self.final_nll,
        };
        serde_json::to_string_pretty(&repr).expect("serializable calibration")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let repr: FileRepr = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        let map = match repr.map {
            MapRepr::Temperature { gamma } => CalibrationMap::Temperature(TemperatureParam::new(gamma)?),
            MapRepr::Dirichlet { a, b } => CalibrationMap::Dirichlet(DirichletMap::from_rows(a, b)?),
        };
        Ok(CalibrationFile {
            map,
            converged: repr.converged,
            iters: repr.iters,
            final_nll: repr.final_nll,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        jsonl::write_lines(path, [self.to_json()])
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
