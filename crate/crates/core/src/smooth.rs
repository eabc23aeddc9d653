//! Design columns and penalty matrices for smooth effects: univariate
//! P-splines, the temporal trend, tensor-product spatial smooths, month
//! dummies and country random effects.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum BasisError {
    #[error("spline degree must be at least 1")]
    InvalidDegree,

    #[error("knots must be strictly increasing and at least two")]
    BadKnots,

    #[error("{value} lies outside the basis range [{lo}, {hi}] of `{name}`")]
    OutOfRange { name: String, value: f64, lo: f64, hi: f64 },

    #[error("penalty order {order} must be at least 1 and below the basis size {k}")]
    InvalidPenaltyOrder { order: usize, k: usize },

    #[error("`{0}` has no spread: all values are equal")]
    Degenerate(String),

    #[error("`{name}` has {unique} distinct values, fewer than the {k} basis functions requested; use a smaller basis")]
    TooFewValues { name: String, unique: usize, k: usize },

    #[error("temporal trend needs at least 5 basis functions, got {0}")]
    TrendTooSmall(usize),

    #[error("coordinate vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("country {0} was not present when the model was fit")]
    UnseenCountry(i64),

    #[error("term `{0}` carries no constraint to absorb")]
    NoConstraint(String),

    #[error("term `{0}` already has its constraint absorbed")]
    AlreadyAbsorbed(String),

    #[error("constraint of `{0}` is identically zero")]
    ZeroConstraint(String),
}

/// Breakpoints of a B-spline basis on `[first, last]` plus degree and
/// penalty order. The basis has `breakpoints.len() + degree - 1` functions;
/// the knot vector is extended beyond both ends by `degree` knots with the
/// end spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotGrid {
    pub breakpoints: Vec<f64>,
    pub degree: usize,
    pub order: usize,
}

impl KnotGrid {
    pub fn new(breakpoints: Vec<f64>, degree: usize, order: usize) -> Result<Self, BasisError> {
        if degree < 1 {
            return Err(BasisError::InvalidDegree);
        }
        if breakpoints.len() < 2 || breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(BasisError::BadKnots);
        }
        Ok(Self {
            breakpoints,
            degree,
            order,
        })
    }

    /// Equispaced grid on `[lo, hi]` yielding exactly `k` basis functions.
    pub fn equispaced(lo: f64, hi: f64, k: usize, degree: usize, order: usize) -> Result<Self, BasisError> {
        if degree < 1 {
            return Err(BasisError::InvalidDegree);
        }
        if k < degree + 1 {
            return Err(BasisError::BadKnots);
        }
        let n = k - degree + 1;
        let step = (hi - lo) / (n - 1) as f64;
        let mut pts: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
        pts[n - 1] = hi;
        Self::new(pts, degree, order)
    }

    pub fn num_basis(&self) -> usize {
        self.breakpoints.len() + self.degree - 1
    }

    pub fn range(&self) -> (f64, f64) {
        (self.breakpoints[0], *self.breakpoints.last().expect("non-empty"))
    }

    /// Full knot vector including the boundary extension.
    pub fn knots(&self) -> Vec<f64> {
        let b = &self.breakpoints;
        let n = b.len();
        let left = b[1] - b[0];
        let right = b[n - 1] - b[n - 2];
        let mut knots = Vec::with_capacity(n + 2 * self.degree);
        knots.extend((1..=self.degree).rev().map(|i| b[0] - left * i as f64));
        knots.extend_from_slice(b);
        knots.extend((1..=self.degree).map(|i| b[n - 1] + right * i as f64));
        knots
    }
}

/// B-spline basis evaluated at `x`, one row per value.
pub fn bspline_basis(x: &[f64], grid: &KnotGrid) -> Result<DMatrix<f64>, BasisError> {
    bspline_basis_named("x", x, grid)
}

pub(crate) fn bspline_basis_named(name: &str, x: &[f64], grid: &KnotGrid) -> Result<DMatrix<f64>, BasisError> {
    let k = grid.num_basis();
    let p = grid.degree;
    let knots = grid.knots();
    let (lo, hi) = grid.range();
    let slack = 1e-9 * (hi - lo);
    let n_spans = grid.breakpoints.len() - 1;
    let mut out = DMatrix::zeros(x.len(), k);
    let mut left = vec![0.0; p + 1];
    let mut right = vec![0.0; p + 1];
    let mut vals = vec![0.0; p + 1];
    for (row, &xi) in x.iter().enumerate() {
        if !(xi >= lo - slack && xi <= hi + slack) {
            return Err(BasisError::OutOfRange {
                name: name.to_string(),
                value: xi,
                lo,
                hi,
            });
        }
        let xi = xi.clamp(lo, hi);
        // breakpoint span containing xi; the last span is closed on the right
        let mut span = grid.breakpoints.partition_point(|&b| b <= xi).saturating_sub(1);
        span = span.min(n_spans - 1);
        let mu = span + p;
        // triangular Cox-de Boor evaluation of the p+1 nonzero functions
        vals[0] = 1.0;
        for j in 1..=p {
            left[j] = xi - knots[mu + 1 - j];
            right[j] = knots[mu + j] - xi;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        for (r, v) in vals.iter().enumerate() {
            out[(row, span + r)] = *v;
        }
    }
    Ok(out)
}

/// `D^T D` for the `order`-th difference operator `D` of shape `(k - order) x k`.
pub fn difference_penalty(k: usize, order: usize) -> Result<DMatrix<f64>, BasisError> {
    let d = difference_matrix(k, order)?;
    Ok(d.transpose() * d)
}

pub fn difference_matrix(k: usize, order: usize) -> Result<DMatrix<f64>, BasisError> {
    if order < 1 || k <= order {
        return Err(BasisError::InvalidPenaltyOrder { order, k });
    }
    let mut d = DMatrix::<f64>::identity(k, k);
    for _ in 0..order {
        let rows = d.nrows() - 1;
        d = DMatrix::from_fn(rows, k, |i, j| d[(i + 1, j)] - d[(i, j)]);
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmoothKind {
    PSpline,
    Temporal,
    Tensor,
    RandomEffect,
    Dummy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothTerm {
    pub name: String,
    pub kind: SmoothKind,
    pub basis: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
    /// Sum-to-zero constraint `c` with `c . beta = 0`, pending absorption.
    pub constraint: Option<DVector<f64>>,
    /// Reparameterisation `Z` (`K x (K-1)`) once the constraint is absorbed.
    pub absorbed: Option<DMatrix<f64>>,
}

impl SmoothTerm {
    pub fn width(&self) -> usize {
        self.basis.ncols()
    }
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

fn check_spread(name: &str, x: &[f64]) -> Result<(f64, f64), BasisError> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if x.is_empty() || !(hi > lo) {
        return Err(BasisError::Degenerate(name.to_string()));
    }
    Ok((lo, hi))
}

fn distinct(x: &[f64]) -> usize {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

/// Univariate P-spline over `grid` with a sum-to-zero constraint attached.
pub fn pspline(name: &str, x: &[f64], grid: &KnotGrid) -> Result<SmoothTerm, BasisError> {
    let basis = bspline_basis_named(name, x, grid)?;
    Ok(SmoothTerm {
        name: name.to_string(),
        kind: SmoothKind::PSpline,
        constraint: Some(column_sums(&basis)),
        penalty: difference_penalty(grid.num_basis(), grid.order)?,
        basis,
        absorbed: None,
    })
}

/// Cubic P-spline trend over month index with `k` basis functions and a
/// second-order penalty, spanning the observed months.
pub fn temporal_trend(t: &[f64], k: usize) -> Result<SmoothTerm, BasisError> {
    let (lo, hi) = check_spread("time", t)?;
    temporal_trend_on(t, k, (lo, hi))
}

/// As [`temporal_trend`], over an explicit month domain.
pub fn temporal_trend_on(t: &[f64], k: usize, domain: (f64, f64)) -> Result<SmoothTerm, BasisError> {
    if k < 5 {
        return Err(BasisError::TrendTooSmall(k));
    }
    check_spread("time", t)?;
    let unique = distinct(t);
    if unique < k {
        return Err(BasisError::TooFewValues {
            name: "time".into(),
            unique,
            k,
        });
    }
    let grid = KnotGrid::equispaced(domain.0, domain.1, k, 3, 2)?;
    let mut term = pspline("time", t, &grid)?;
    term.kind = SmoothKind::Temporal;
    Ok(term)
}

/// Row-wise Kronecker product: column `a * cols(b) + c` is `a_col * b_col`.
pub fn row_kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ka, kb) = (a.ncols(), b.ncols());
    DMatrix::from_fn(a.nrows(), ka * kb, |r, c| a[(r, c / kb)] * b[(r, c % kb)])
}

pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Tensor-product P-spline of longitude and latitude with penalty
/// `S_lon (x) I + I (x) S_lat` and a sum-to-zero constraint.
pub fn tensor_spatial(
    lon: &[f64],
    lat: &[f64],
    grid_lon: &KnotGrid,
    grid_lat: &KnotGrid,
) -> Result<SmoothTerm, BasisError> {
    if lon.len() != lat.len() {
        return Err(BasisError::LengthMismatch(lon.len(), lat.len()));
    }
    check_spread("lon", lon)?;
    check_spread("lat", lat)?;
    let b_lon = bspline_basis_named("lon", lon, grid_lon)?;
    let b_lat = bspline_basis_named("lat", lat, grid_lat)?;
    let basis = row_kronecker(&b_lon, &b_lat);
    Ok(SmoothTerm {
        name: "lon*lat".into(),
        kind: SmoothKind::Tensor,
        constraint: Some(column_sums(&basis)),
        penalty: tensor_penalty(grid_lon, grid_lat)?,
        basis,
        absorbed: None,
    })
}

pub fn tensor_penalty(grid_a: &KnotGrid, grid_b: &KnotGrid) -> Result<DMatrix<f64>, BasisError> {
    let (ka, kb) = (grid_a.num_basis(), grid_b.num_basis());
    let sa = difference_penalty(ka, grid_a.order)?;
    let sb = difference_penalty(kb, grid_b.order)?;
    Ok(kronecker(&sa, &DMatrix::identity(kb, kb)) + kronecker(&DMatrix::identity(ka, ka), &sb))
}

/// Eleven indicator columns for February..December; January is the reference.
pub fn month_dummies(t: &[i32]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(t.len(), 11);
    for (r, &m) in t.iter().enumerate() {
        let moy = m.rem_euclid(12) as usize;
        if moy > 0 {
            out[(r, moy - 1)] = 1.0;
        }
    }
    out
}

/// Indicator columns for `levels` with an identity (ridge) penalty.
pub fn random_effect_block(country_id: &[i64], levels: &[i64]) -> Result<SmoothTerm, BasisError> {
    let mut basis = DMatrix::zeros(country_id.len(), levels.len());
    for (r, id) in country_id.iter().enumerate() {
        let col = levels
            .iter()
            .position(|l| l == id)
            .ok_or(BasisError::UnseenCountry(*id))?;
        basis[(r, col)] = 1.0;
    }
    Ok(SmoothTerm {
        name: "country".into(),
        kind: SmoothKind::RandomEffect,
        basis,
        penalty: DMatrix::identity(levels.len(), levels.len()),
        constraint: None,
        absorbed: None,
    })
}

/// Orthonormal basis `Z` (`K x (K-1)`) of the null space of `c^T`, from a
/// Householder reflection mapping `c` onto the first axis.
pub fn constraint_null_space(c: &DVector<f64>) -> Option<DMatrix<f64>> {
    let k = c.len();
    let norm = c.norm();
    if !(norm > 0.0) || k < 2 {
        return None;
    }
    let mut v = c.clone();
    v[0] += if c[0] >= 0.0 { norm } else { -norm };
    let vtv = v.dot(&v);
    let h = DMatrix::identity(k, k) - (&v * v.transpose()) * (2.0 / vtv);
    Some(h.columns(1, k - 1).into_owned())
}

/// Reparameterises the term into `K - 1` coefficients satisfying its constraint.
pub fn absorb_constraint(term: &SmoothTerm) -> Result<SmoothTerm, BasisError> {
    if term.absorbed.is_some() {
        return Err(BasisError::AlreadyAbsorbed(term.name.clone()));
    }
    let c = term
        .constraint
        .as_ref()
        .ok_or_else(|| BasisError::NoConstraint(term.name.clone()))?;
    let z = constraint_null_space(c).ok_or_else(|| BasisError::ZeroConstraint(term.name.clone()))?;
    Ok(SmoothTerm {
        name: term.name.clone(),
        kind: term.kind,
        basis: &term.basis * &z,
        penalty: z.transpose() * &term.penalty * &z,
        constraint: None,
        absorbed: Some(z),
    })
}
