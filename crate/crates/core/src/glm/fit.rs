use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Family;
use crate::smooth::{SmoothKind, SmoothTerm};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum FitError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("weight {value} at row {row} is not positive and finite")]
    BadWeight { row: usize, value: f64 },

    #[error("response {value} at row {row} is invalid for the {family} family")]
    BadResponse { row: usize, value: f64, family: &'static str },

    #[error("expected {expected} smoothing parameters, got {found}")]
    SmoothingCount { expected: usize, found: usize },

    #[error("term `{0}` still carries an unabsorbed constraint")]
    Unabsorbed(String),

    #[error("no convergence after {iterations} iterations (gradient {gradient:e}); trace: {trace}")]
    NoConvergence {
        iterations: usize,
        gradient: f64,
        trace: String,
    },

    #[error("penalized Hessian is not positive definite even after ridge stabilisation")]
    Singular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TermKind {
    Intercept,
    Linear,
    Dummy,
    Interaction,
    PSpline,
    Temporal,
    Tensor,
    RandomEffect,
}

impl From<SmoothKind> for TermKind {
    fn from(k: SmoothKind) -> Self {
        match k {
            SmoothKind::PSpline => TermKind::PSpline,
            SmoothKind::Temporal => TermKind::Temporal,
            SmoothKind::Tensor => TermKind::Tensor,
            SmoothKind::RandomEffect => TermKind::RandomEffect,
            SmoothKind::Dummy => TermKind::Dummy,
        }
    }
}

/// Columns of one model term inside the coefficient vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermLayout {
    pub name: String,
    pub kind: TermKind,
    pub start: usize,
    pub len: usize,
    pub penalized: bool,
}

/// Model matrix plus per-term penalties.
#[derive(Debug, Clone)]
pub struct StageDesign {
    pub x: DMatrix<f64>,
    pub terms: Vec<TermLayout>,
    /// Local penalty of each penalized term, in term order.
    pub penalties: Vec<DMatrix<f64>>,
}

impl StageDesign {
    pub fn builder(n_rows: usize) -> DesignBuilder {
        DesignBuilder {
            n_rows,
            blocks: Vec::new(),
        }
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn penalized_terms(&self) -> impl Iterator<Item = &TermLayout> {
        self.terms.iter().filter(|t| t.penalized)
    }

    /// `sum_k lambda_k S_k` embedded in the full coefficient space.
    pub fn penalty_matrix(&self, lambdas: &[f64]) -> DMatrix<f64> {
        let p = self.ncols();
        let mut s = DMatrix::zeros(p, p);
        for ((term, pen), &lambda) in self.penalized_terms().zip(&self.penalties).zip(lambdas) {
            let mut block = s.view_mut((term.start, term.start), (term.len, term.len));
            block += pen * lambda;
        }
        s
    }
}

pub struct DesignBuilder {
    n_rows: usize,
    blocks: Vec<(String, TermKind, DMatrix<f64>, Option<DMatrix<f64>>)>,
}

impl DesignBuilder {
    pub fn unpenalized(mut self, name: &str, kind: TermKind, columns: DMatrix<f64>) -> Self {
        self.blocks.push((name.to_string(), kind, columns, None));
        self
    }

    pub fn intercept(self) -> Self {
        let n = self.n_rows;
        self.unpenalized("(Intercept)", TermKind::Intercept, DMatrix::from_element(n, 1, 1.0))
    }

    pub fn smooth(mut self, term: &SmoothTerm) -> Result<Self, FitError> {
        if term.constraint.is_some() {
            return Err(FitError::Unabsorbed(term.name.clone()));
        }
        self.blocks.push((
            term.name.clone(),
            term.kind.into(),
            term.basis.clone(),
            Some(term.penalty.clone()),
        ));
        Ok(self)
    }

    pub fn build(self) -> Result<StageDesign, FitError> {
        let p: usize = self.blocks.iter().map(|b| b.2.ncols()).sum();
        let mut x = DMatrix::zeros(self.n_rows, p);
        let mut terms = Vec::with_capacity(self.blocks.len());
        let mut penalties = Vec::new();
        let mut start = 0;
        for (name, kind, cols, pen) in self.blocks {
            if cols.nrows() != self.n_rows {
                return Err(FitError::Dimension(format!(
                    "term `{name}` has {} rows, expected {}",
                    cols.nrows(),
                    self.n_rows
                )));
            }
            x.view_mut((0, start), (self.n_rows, cols.ncols())).copy_from(&cols);
            terms.push(TermLayout {
                name,
                kind,
                start,
                len: cols.ncols(),
                penalized: pen.is_some(),
            });
            if let Some(pen) = pen {
                penalties.push(pen);
            }
            start += cols.ncols();
        }
        Ok(StageDesign { x, terms, penalties })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Smoothing {
    /// Per-term GCV over a log10 grid, improved by coordinate sweeps.
    Gcv {
        log10_min: f64,
        log10_max: f64,
        points: usize,
        sweeps: usize,
    },
    Fixed(Vec<f64>),
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing::Gcv {
            log10_min: -4.0,
            log10_max: 6.0,
            points: 21,
            sweeps: 2,
        }
    }
}

impl Smoothing {
    fn grid(&self) -> Vec<f64> {
        match self {
            Smoothing::Gcv {
                log10_min,
                log10_max,
                points,
                ..
            } => {
                let n = (*points).max(2);
                (0..n)
                    .map(|i| {
                        let e = log10_min + (log10_max - log10_min) * i as f64 / (n - 1) as f64;
                        10f64.powf(e)
                    })
                    .collect()
            }
            Smoothing::Fixed(_) => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Gradient tolerance relative to the total weight.
    pub tol: f64,
    pub smoothing: Smoothing,
    /// Cap on alternations between Newton fits and smoothing selection.
    pub max_outer: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
            smoothing: Smoothing::default(),
            max_outer: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub iterations: usize,
    pub outer_iterations: usize,
    pub gradient_norm: f64,
    /// `-2 sum w l + beta' S beta` at the optimum.
    pub penalized_deviance: f64,
    pub edf: f64,
    pub ridge_stabilised: bool,
    /// Penalized deviance per Newton iteration of the final fit.
    pub trace: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedStage {
    pub family: Family,
    pub coefficients: Vec<f64>,
    /// One per penalized term, in term order.
    pub smoothing_params: Vec<f64>,
    pub terms: Vec<TermLayout>,
    /// Square roots of the diagonal of the inverse penalized Hessian.
    pub std_errors: Vec<f64>,
    pub report: ConvergenceReport,
}

impl FittedStage {
    pub fn term(&self, name: &str) -> Option<&TermLayout> {
        self.terms.iter().find(|t| t.name == name)
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.term(name).filter(|t| t.len == 1).map(|t| self.coefficients[t.start])
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.term(name).filter(|t| t.len == 1).map(|t| self.std_errors[t.start])
    }
}

pub fn predict_eta(stage: &FittedStage, x: &DMatrix<f64>) -> Result<DVector<f64>, FitError> {
    if x.ncols() != stage.coefficients.len() {
        return Err(FitError::Dimension(format!(
            "design has {} columns, stage has {} coefficients",
            x.ncols(),
            stage.coefficients.len()
        )));
    }
    Ok(x * DVector::from_column_slice(&stage.coefficients))
}

struct Problem<'a> {
    design: &'a StageDesign,
    y: &'a [f64],
    w: &'a [f64],
    family: Family,
}

struct State {
    eta: DVector<f64>,
    obj: f64,
    grad: DVector<f64>,
}

struct NewtonResult {
    beta: DVector<f64>,
    iterations: usize,
    grad_norm: f64,
    obj: f64,
    trace: Vec<f64>,
    hessian: Factor,
    xtwx: DMatrix<f64>,
    ridge: bool,
}

fn weighted_cross(x: &DMatrix<f64>, d: &[f64]) -> DMatrix<f64> {
    let mut xs = x.clone();
    for (mut row, &di) in xs.row_iter_mut().zip(d) {
        row *= di.max(0.0).sqrt();
    }
    xs.tr_mul(&xs)
}

/// Cholesky factor of `D h D` with `D = diag(h)^(-1/2)`. Penalties on the
/// order of 1e6 next to unpenalized columns make `h` badly scaled; the
/// symmetric rescaling keeps the factorisation accurate.
#[derive(Debug, Clone)]
struct Factor {
    chol: Cholesky<f64, Dyn>,
    d: DVector<f64>,
}

impl Factor {
    /// `||L^-1 D m||_F^2`, i.e. `tr(m' h^-1 m)`.
    fn quadratic_trace(&self, m: &DMatrix<f64>) -> f64 {
        let mut scaled = m.clone();
        for (mut row, &di) in scaled.row_iter_mut().zip(self.d.iter()) {
            row *= di;
        }
        self.chol.l_dirty().solve_lower_triangular_mut(&mut scaled);
        scaled.norm_squared()
    }

    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let scaled = b.component_mul(&self.d);
        self.chol.solve(&scaled).component_mul(&self.d)
    }

    fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.chol.inverse();
        for j in 0..inv.ncols() {
            for i in 0..inv.nrows() {
                inv[(i, j)] *= self.d[i] * self.d[j];
            }
        }
        inv
    }
}

/// Factorises `h`, adding a growing ridge to the rescaled matrix if needed.
fn stable_cholesky(h: &DMatrix<f64>) -> Option<(Factor, bool)> {
    let d = DVector::from_fn(h.nrows(), |i, _| {
        let hii = h[(i, i)];
        if hii > 0.0 && hii.is_finite() {
            1.0 / hii.sqrt()
        } else {
            1.0
        }
    });
    let mut scaled = h.clone();
    for j in 0..h.ncols() {
        for i in 0..h.nrows() {
            scaled[(i, j)] *= d[i] * d[j];
        }
    }
    if let Some(chol) = scaled.clone().cholesky() {
        return Some((Factor { chol, d }, false));
    }
    let mut ridge = 1e-10;
    for _ in 0..12 {
        let mut hr = scaled.clone();
        for i in 0..hr.nrows() {
            hr[(i, i)] += ridge;
        }
        if let Some(chol) = hr.cholesky() {
            return Some((Factor { chol, d }, true));
        }
        ridge *= 10.0;
    }
    None
}

impl Problem<'_> {
    fn objective_at(&self, eta: &DVector<f64>, beta: &DVector<f64>, s: &DMatrix<f64>) -> f64 {
        let ll: f64 = (0..self.y.len())
            .map(|i| self.w[i] * self.family.loglik(self.y[i], eta[i]))
            .sum();
        -ll + 0.5 * beta.dot(&(s * beta))
    }

    /// Rounding error of [`Self::objective_at`]: a strong penalty on a
    /// large coefficient swamps small changes in the objective.
    fn objective_noise(&self, eta: &DVector<f64>, beta: &DVector<f64>, s: &DMatrix<f64>) -> f64 {
        let ll: f64 = (0..self.y.len())
            .map(|i| (self.w[i] * self.family.loglik(self.y[i], eta[i])).abs())
            .sum();
        let b = beta.abs();
        let pen = 0.5 * b.dot(&(s.abs() * &b));
        64.0 * f64::EPSILON * (ll + pen)
    }

    fn state(&self, beta: &DVector<f64>, s: &DMatrix<f64>) -> State {
        let eta = &self.design.x * beta;
        let obj = self.objective_at(&eta, beta, s);
        let resid = DVector::from_fn(self.y.len(), |i, _| {
            self.w[i] * (self.y[i] - self.family.mean(eta[i]))
        });
        let grad = self.design.x.tr_mul(&resid) - s * beta;
        State { eta, obj, grad }
    }

    fn hessian_parts(&self, eta: &DVector<f64>) -> DMatrix<f64> {
        let d: Vec<f64> = (0..self.y.len())
            .map(|i| self.w[i] * self.family.hessian_weight(eta[i]))
            .collect();
        weighted_cross(&self.design.x, &d)
    }

    fn newton(&self, lambdas: &[f64], beta0: DVector<f64>, opts: &FitOptions) -> Result<NewtonResult, FitError> {
        let s = self.design.penalty_matrix(lambdas);
        let scale = self.w.iter().sum::<f64>().max(1.0);
        let threshold = opts.tol * scale;
        let mut beta = beta0;
        let mut st = self.state(&beta, &s);
        let mut trace = vec![2.0 * st.obj];
        let mut ridge_used = false;
        let mut polished = false;
        let mut flat = false;
        for iter in 0..opts.max_iter {
            let grad_norm = st.grad.amax();
            let small = grad_norm <= threshold;
            log::debug!(
                target: "hurdlecast::fit",
                "iteration={iter} deviance={:.12e} gradient={grad_norm:.3e}",
                2.0 * st.obj
            );
            let xtwx = self.hessian_parts(&st.eta);
            let h = &xtwx + &s;
            let (chol, ridge) = stable_cholesky(&h).ok_or(FitError::Singular)?;
            ridge_used |= ridge;
            if (small && polished) || flat {
                return Ok(NewtonResult {
                    beta,
                    iterations: iter,
                    grad_norm,
                    obj: st.obj,
                    trace,
                    hessian: chol,
                    xtwx,
                    ridge: ridge_used,
                });
            }
            let delta = chol.solve(&st.grad);
            // one more step once the remaining gain is below the resolution
            // of the objective
            let floor = (1e-12 * (1.0 + st.obj.abs())).max(self.objective_noise(&st.eta, &beta, &s));
            flat = st.grad.dot(&delta) <= floor;
            polished = small;
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let candidate = &beta + &delta * step;
                let eta = &self.design.x * &candidate;
                let obj = self.objective_at(&eta, &candidate, &s);
                if obj.is_finite() && obj <= st.obj {
                    accepted = Some(candidate);
                    break;
                }
                step *= 0.5;
            }
            match accepted {
                Some(b) => {
                    beta = b;
                    st = self.state(&beta, &s);
                    trace.push(2.0 * st.obj);
                }
                None if small || flat => {
                    // at the floating-point floor of the objective
                    polished = true;
                    flat = true;
                }
                None => {
                    return Err(FitError::NoConvergence {
                        iterations: iter,
                        gradient: grad_norm,
                        trace: format_trace(&trace),
                    })
                }
            }
        }
        Err(FitError::NoConvergence {
            iterations: opts.max_iter,
            gradient: st.grad.amax(),
            trace: format_trace(&trace),
        })
    }

    /// Per penalized term, `E_k'` with `S_k = E_k' E_k`, embedded in the full
    /// coefficient space.
    fn penalty_roots(&self) -> Vec<DMatrix<f64>> {
        let p = self.design.ncols();
        self.design
            .penalized_terms()
            .zip(&self.design.penalties)
            .map(|(term, pen)| {
                let eig = pen.clone().symmetric_eigen();
                let top = eig.eigenvalues.amax();
                let keep: Vec<usize> = (0..eig.eigenvalues.len())
                    .filter(|&i| eig.eigenvalues[i] > 1e-12 * top)
                    .collect();
                let mut root = DMatrix::zeros(p, keep.len());
                for (c, &i) in keep.iter().enumerate() {
                    let scale = eig.eigenvalues[i].sqrt();
                    for r in 0..term.len {
                        root[(term.start + r, c)] = eig.eigenvectors[(r, i)] * scale;
                    }
                }
                root
            })
            .collect()
    }

    /// Coordinate-wise GCV search on the working linear model at `beta`.
    fn select_smoothing(
        &self,
        beta: &DVector<f64>,
        current: &[f64],
        grid: &[f64],
        sweeps: usize,
    ) -> Vec<f64> {
        let eta = &self.design.x * beta;
        let n = self.y.len();
        let mut d = Vec::with_capacity(n);
        let mut wz = DVector::zeros(n);
        let mut zwz = 0.0;
        for i in 0..n {
            let v = self.family.hessian_weight(eta[i]).max(1e-300);
            let r = self.y[i] - self.family.mean(eta[i]);
            let di = self.w[i] * v;
            d.push(di);
            // W z with z = eta + r / v
            wz[i] = di * eta[i] + self.w[i] * r;
            zwz += di * eta[i] * eta[i] + 2.0 * self.w[i] * eta[i] * r + self.w[i] * r * r / v;
        }
        let xtwx = weighted_cross(&self.design.x, &d);
        let xtwz = self.design.x.tr_mul(&wz);
        let n_eff: f64 = self.w.iter().sum();
        let roots = self.penalty_roots();
        let p = self.design.ncols() as f64;
        let score = |lambdas: &[f64]| -> f64 {
            let h = &xtwx + self.design.penalty_matrix(lambdas);
            let Some((chol, _)) = stable_cholesky(&h) else {
                return f64::INFINITY;
            };
            let b = chol.solve(&xtwz);
            let rss = (zwz - 2.0 * b.dot(&xtwz) + b.dot(&(&xtwx * &b))).max(0.0);
            // tr(H^-1 X'WX) = p - sum_k lambda_k tr(E_k H^-1 E_k')
            let tr = p - roots
                .iter()
                .zip(lambdas)
                .map(|(e, &l)| l * chol.quadratic_trace(e))
                .sum::<f64>();
            let denom = n_eff - tr;
            if denom <= 0.0 {
                f64::INFINITY
            } else {
                n_eff * rss / (denom * denom)
            }
        };
        let mut lambdas = current.to_vec();
        let mut best = score(&lambdas);
        for _ in 0..sweeps {
            for k in 0..lambdas.len() {
                let mut best_value = lambdas[k];
                for &g in grid {
                    let mut trial = lambdas.clone();
                    trial[k] = g;
                    let sc = score(&trial);
                    if sc < best {
                        best = sc;
                        best_value = g;
                    }
                }
                lambdas[k] = best_value;
            }
        }
        lambdas
    }
}

fn format_trace(trace: &[f64]) -> String {
    trace
        .iter()
        .map(|d| format!("{d:.6e}"))
        .collect::<Vec<_>>()
        .join(" -> ")
}

fn validate(design: &StageDesign, y: &[f64], w: &[f64], family: Family) -> Result<(), FitError> {
    if design.nrows() != y.len() || y.len() != w.len() {
        return Err(FitError::Dimension(format!(
            "design has {} rows, y has {}, weights have {}",
            design.nrows(),
            y.len(),
            w.len()
        )));
    }
    if let Some((row, &value)) = w.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
        return Err(FitError::BadWeight { row, value });
    }
    if let Some((row, &value)) = y.iter().enumerate().find(|(_, v)| !family.validate(**v)) {
        return Err(FitError::BadResponse {
            row,
            value,
            family: family.name(),
        });
    }
    Ok(())
}

/// Maximises `sum_i w_i l_i(beta) - 1/2 sum_k lambda_k beta' S_k beta` by
/// step-halving Newton, selecting the `lambda_k` by GCV unless fixed.
pub fn fit_stage(
    design: &StageDesign,
    y: &[f64],
    weights: &[f64],
    family: Family,
    opts: &FitOptions,
) -> Result<FittedStage, FitError> {
    validate(design, y, weights, family)?;
    let m = design.penalties.len();
    let problem = Problem {
        design,
        y,
        w: weights,
        family,
    };

    let mut beta = DVector::zeros(design.ncols());
    if let Some(t) = design.terms.iter().find(|t| t.kind == TermKind::Intercept) {
        let total: f64 = weights.iter().sum();
        let mean = y.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>() / total;
        beta[t.start] = family.initial_eta(mean);
    }

    let grid = opts.smoothing.grid();
    let (mut lambdas, sweeps) = match &opts.smoothing {
        Smoothing::Fixed(l) => {
            if l.len() != m {
                return Err(FitError::SmoothingCount {
                    expected: m,
                    found: l.len(),
                });
            }
            (l.clone(), 0)
        }
        Smoothing::Gcv { sweeps, .. } => (vec![1.0; m], *sweeps),
    };

    let mut result = problem.newton(&lambdas, beta, opts)?;
    let mut outer = 1;
    if sweeps > 0 && m > 0 {
        while outer < opts.max_outer {
            let selected = problem.select_smoothing(&result.beta, &lambdas, &grid, sweeps);
            if selected == lambdas {
                break;
            }
            lambdas = selected;
            result = problem.newton(&lambdas, result.beta.clone(), opts)?;
            outer += 1;
        }
    }

    let vp = result.hessian.inverse();
    let edf = vp.component_mul(&result.xtwx).sum();
    let std_errors = vp.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();

    let mut warnings = Vec::new();
    if family == Family::BernoulliLogit {
        let eta = &design.x * &result.beta;
        let extreme = eta.iter().filter(|e| e.abs() > 30.0).count();
        let grid_max = grid.last().copied().unwrap_or(f64::INFINITY);
        if extreme as f64 > 0.01 * y.len() as f64 && lambdas.iter().any(|&l| l >= grid_max) {
            warnings.push(format!(
                "possible separation: {extreme} rows with |eta| > 30 while a smoothing parameter sits at the grid maximum"
            ));
        }
    }
    if result.ridge {
        warnings.push("penalized Hessian needed ridge stabilisation (aliased columns)".into());
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    Ok(FittedStage {
        family,
        coefficients: result.beta.iter().copied().collect(),
        smoothing_params: lambdas,
        terms: design.terms.clone(),
        std_errors,
        report: ConvergenceReport {
            iterations: result.iterations,
            outer_iterations: outer,
            gradient_norm: result.grad_norm,
            penalized_deviance: 2.0 * result.obj,
            edf,
            ridge_stabilised: result.ridge,
            trace: result.trace,
            warnings,
        },
    })
}

/// `sum_i w_i l_i(beta) - 1/2 beta' S_lambda beta`.
pub fn penalized_loglik(
    design: &StageDesign,
    y: &[f64],
    w: &[f64],
    family: Family,
    lambdas: &[f64],
    beta: &[f64],
) -> f64 {
    let problem = Problem {
        design,
        y,
        w,
        family,
    };
    let beta = DVector::from_column_slice(beta);
    let s = design.penalty_matrix(lambdas);
    let eta = &design.x * &beta;
    -problem.objective_at(&eta, &beta, &s)
}

/// Gradient of [`penalized_loglik`] in `beta`.
pub fn penalized_score(
    design: &StageDesign,
    y: &[f64],
    w: &[f64],
    family: Family,
    lambdas: &[f64],
    beta: &[f64],
) -> Vec<f64> {
    let problem = Problem {
        design,
        y,
        w,
        family,
    };
    let beta = DVector::from_column_slice(beta);
    let s = design.penalty_matrix(lambdas);
    problem.state(&beta, &s).grad.iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smooth::{absorb_constraint, pspline, KnotGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_design(x: &[[f64; 2]]) -> StageDesign {
        let cols = DMatrix::from_fn(x.len(), 2, |i, j| x[i][j]);
        StageDesign::builder(x.len())
            .intercept()
            .unpenalized("x", TermKind::Linear, cols)
            .build()
            .unwrap()
    }

    fn logistic_data(n: usize, seed: u64) -> (Vec<[f64; 2]>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n {
            let x = [rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0];
            let p = crate::glm::logistic(0.3 + 1.2 * x[0] - 0.8 * x[1]);
            xs.push(x);
            ys.push(f64::from(u8::from(rng.random::<f64>() < p)));
        }
        (xs, ys)
    }

    /// Textbook IRLS: solve (X'WX) b = X'Wz until b stops moving.
    fn textbook_irls(x: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
        let mut b = DVector::zeros(x.ncols());
        for _ in 0..100 {
            let eta = x * &b;
            let p: Vec<f64> = eta.iter().map(|e| 1.0 / (1.0 + (-e).exp())).collect();
            let w: Vec<f64> = p.iter().map(|p| p * (1.0 - p)).collect();
            let z = DVector::from_fn(y.len(), |i, _| eta[i] + (y[i] - p[i]) / w[i]);
            let wx = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| w[i] * x[(i, j)]);
            let next = (x.transpose() * &wx).lu().solve(&(wx.transpose() * z)).unwrap();
            let change = (&next - &b).amax();
            b = next;
            if change < 1e-14 {
                break;
            }
        }
        b
    }

    #[test]
    fn unpenalized_logistic_matches_textbook_irls() {
        let (xs, ys) = logistic_data(400, 3);
        let design = linear_design(&xs);
        let w = vec![1.0; ys.len()];
        let fit = fit_stage(&design, &ys, &w, Family::BernoulliLogit, &FitOptions::default()).unwrap();
        let oracle = textbook_irls(&design.x, &ys);
        for (a, b) in fit.coefficients.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
        assert!(fit.smoothing_params.is_empty());
    }

    #[test]
    fn deviance_never_increases() {
        let (xs, ys) = logistic_data(300, 9);
        let design = linear_design(&xs);
        let fit = fit_stage(&design, &ys, &vec![1.0; 300], Family::BernoulliLogit, &FitOptions::default()).unwrap();
        for pair in fit.report.trace.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
        assert!(fit.report.gradient_norm <= 1e-6 * 300.0);
    }

    fn smooth_design(x: &[f64]) -> (StageDesign, DMatrix<f64>) {
        let grid = KnotGrid::equispaced(0.0, 1.0, 10, 3, 2).unwrap();
        let term = absorb_constraint(&pspline("x", x, &grid).unwrap()).unwrap();
        let design = StageDesign::builder(x.len()).intercept().smooth(&term).unwrap().build().unwrap();
        let z = term.absorbed.unwrap();
        (design, z)
    }

    #[test]
    fn huge_penalty_collapses_smooth_to_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..300).map(|i| i as f64 / 299.0).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| f64::from(u8::from(rng.random::<f64>() < crate::glm::logistic((8.0 * v).sin()))))
            .collect();
        let (design, _) = smooth_design(&x);
        let opts = FitOptions {
            smoothing: Smoothing::Fixed(vec![1e12]),
            ..FitOptions::default()
        };
        let fit = fit_stage(&design, &y, &vec![1.0; 300], Family::BernoulliLogit, &opts).unwrap();
        let eta = predict_eta(&fit, &design.x).unwrap();
        // least-squares line through eta; residual must vanish
        let xm = DMatrix::from_fn(300, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
        let coef = (xm.transpose() * &xm).lu().solve(&(xm.transpose() * &eta)).unwrap();
        let resid = &eta - &xm * coef;
        assert!(resid.amax() < 1e-6, "nonlinearity {}", resid.amax());
    }

    #[test]
    fn gcv_is_reproducible_and_finds_smoothness() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| f64::from(u8::from(rng.random::<f64>() < crate::glm::logistic(2.0 * (6.0 * v).sin()))))
            .collect();
        let (design, _) = smooth_design(&x);
        let w = vec![1.0; 500];
        let a = fit_stage(&design, &y, &w, Family::BernoulliLogit, &FitOptions::default()).unwrap();
        let b = fit_stage(&design, &y, &w, Family::BernoulliLogit, &FitOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.smoothing_params.len(), 1);
        // a sine this strong must not be flattened to a line
        assert!(a.smoothing_params[0] < 1e6);
        assert!(a.report.edf > 3.0);
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..80).map(|_| rng.random::<f64>()).collect();
        let (design, _) = smooth_design(&x);
        let yb: Vec<f64> = (0..80).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
        let yc: Vec<f64> = (0..80).map(|i| 1.0 + (i % 5) as f64).collect();
        let w: Vec<f64> = (0..80).map(|i| 0.5 + (i % 4) as f64 / 4.0).collect();
        for (family, y) in [(Family::BernoulliLogit, &yb), (Family::ZtpoissonLog, &yc)] {
            let beta: Vec<f64> = (0..design.ncols()).map(|_| rng.random::<f64>() - 0.5).collect();
            let analytic = penalized_score(&design, y, &w, family, &[0.7], &beta);
            for j in 0..beta.len() {
                let h = 1e-5;
                let mut up = beta.clone();
                up[j] += h;
                let mut dn = beta.clone();
                dn[j] -= h;
                let fd = (penalized_loglik(&design, y, &w, family, &[0.7], &up)
                    - penalized_loglik(&design, y, &w, family, &[0.7], &dn))
                    / (2.0 * h);
                let rel = (fd - analytic[j]).abs() / analytic[j].abs().max(1.0);
                assert!(rel < 1e-5, "{family:?} coef {j}: {fd} vs {}", analytic[j]);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (xs, ys) = logistic_data(20, 1);
        let design = linear_design(&xs);
        let mut w = vec![1.0; 20];
        w[4] = 0.0;
        assert!(matches!(
            fit_stage(&design, &ys, &w, Family::BernoulliLogit, &FitOptions::default()),
            Err(FitError::BadWeight { row: 4, .. })
        ));
        let w = vec![1.0; 20];
        assert!(matches!(
            fit_stage(&design, &ys, &w, Family::ZtpoissonLog, &FitOptions::default()),
            Err(FitError::BadResponse { .. })
        ));
        assert!(matches!(
            fit_stage(&design, &ys[..10], &w, Family::BernoulliLogit, &FitOptions::default()),
            Err(FitError::Dimension(_))
        ));
    }

    #[test]
    fn predict_eta_arithmetic() {
        let stage = FittedStage {
            family: Family::BernoulliLogit,
            coefficients: vec![1.0, 2.0],
            smoothing_params: vec![],
            terms: vec![],
            std_errors: vec![0.0, 0.0],
            report: ConvergenceReport {
                iterations: 0,
                outer_iterations: 0,
                gradient_norm: 0.0,
                penalized_deviance: 0.0,
                edf: 2.0,
                ridge_stabilised: false,
                trace: vec![],
                warnings: vec![],
            },
        };
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 3.0]);
        assert_eq!(predict_eta(&stage, &x).unwrap()[0], 7.0);
        let zero = FittedStage {
            coefficients: vec![0.0, 0.0],
            ..stage
        };
        let eta = predict_eta(&zero, &x).unwrap()[0];
        assert_eq!(crate::glm::logistic(eta), 0.5);
    }

    #[test]
    fn aliased_column_is_stabilised() {
        let (xs, ys) = logistic_data(100, 4);
        let cols = DMatrix::from_fn(100, 2, |i, j| if j == 0 { xs[i][0] } else { 0.0 });
        let design = StageDesign::builder(100)
            .intercept()
            .unpenalized("x", TermKind::Linear, cols)
            .build()
            .unwrap();
        let fit = fit_stage(&design, &ys, &vec![1.0; 100], Family::BernoulliLogit, &FitOptions::default()).unwrap();
        assert!(fit.report.ridge_stabilised);
        assert!(fit.coefficients[2].abs() < 1e-6);
    }
}
