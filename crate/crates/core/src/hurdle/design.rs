//! Model matrices for one stage, rebuilt identically at fit and predict time.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::HurdleError;
use crate::glm::{StageDesign, TermKind};
use crate::panel::{Effect, LaggedPanel, LaggedRow, ModelSpec, Month, Stage, Transform};
use crate::smooth::{
    absorb_constraint, bspline_basis_named, difference_penalty, month_dummies, pspline,
    random_effect_block, row_kronecker, tensor_penalty, tensor_spatial, temporal_trend_on,
    BasisError, KnotGrid, SmoothKind, SmoothTerm,
};

/// Rows of one stage with feature lookup resolved for their level.
#[derive(Debug, Clone)]
pub struct Frame {
    pub rows: Vec<LaggedRow>,
    /// Cells aggregated into each row (1 for cell-level frames).
    pub cells: Vec<usize>,
    index: HashMap<String, usize>,
}

impl Frame {
    pub fn cell_level(panel: &LaggedPanel, rows: Vec<LaggedRow>) -> Self {
        let index = panel
            .feature_names()
            .iter()
            .filter_map(|n| panel.feature_index(n).map(|i| (n.clone(), i)))
            .collect();
        let cells = vec![1; rows.len()];
        Self { rows, cells, index }
    }

    /// One row per country-month. Derived features resolve to their
    /// country-level twins; other features are averaged over cells.
    pub fn country_level(panel: &LaggedPanel, rows: &[LaggedRow]) -> Self {
        let index = panel
            .feature_names()
            .iter()
            .filter_map(|n| panel.country_feature_index(n).map(|i| (n.clone(), i)))
            .collect();
        let (rows, cells) = country_rows(rows);
        Self { rows, cells, index }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn months(&self) -> Vec<Month> {
        self.rows.iter().map(|r| r.month).collect()
    }

    pub fn countries(&self) -> Vec<i64> {
        self.rows.iter().map(|r| r.country_id).collect()
    }

    /// Frame with each row repeated as many times as it has cells.
    pub fn expand_cells(&self) -> Frame {
        let mut rows = Vec::new();
        for (r, &n) in self.rows.iter().zip(&self.cells) {
            rows.extend(std::iter::repeat_n(r.clone(), n));
        }
        Frame {
            cells: vec![1; rows.len()],
            rows,
            index: self.index.clone(),
        }
    }

    pub(crate) fn append(&mut self, other: &Frame) {
        self.rows.extend(other.rows.iter().cloned());
        self.cells.extend_from_slice(&other.cells);
    }

    /// Transformed feature column.
    pub fn column(&self, stage: Stage, name: &str, transform: Transform) -> Result<Vec<f64>, HurdleError> {
        let idx = *self.index.get(name).ok_or_else(|| HurdleError::UnknownFeature {
            stage: stage.number(),
            name: name.to_string(),
        })?;
        self.rows
            .iter()
            .map(|r| transform.apply(name, r.features[idx]).map_err(HurdleError::from))
            .collect()
    }
}

fn country_rows(rows: &[LaggedRow]) -> (Vec<LaggedRow>, Vec<usize>) {
    let mut groups: BTreeMap<(i64, Month), Vec<&LaggedRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.country_id, r.month)).or_default().push(r);
    }
    let mut out = Vec::with_capacity(groups.len());
    let mut cells = Vec::with_capacity(groups.len());
    for ((country, month), members) in groups {
        let first = members[0];
        let n = members.len();
        let features = (0..first.features.len())
            .map(|k| {
                let v = first.features[k];
                if members.iter().all(|m| m.features[k] == v) {
                    v
                } else {
                    members.iter().map(|m| m.features[k]).sum::<f64>() / n as f64
                }
            })
            .collect();
        out.push(LaggedRow {
            cell_id: -1,
            country_id: country,
            month,
            source_month: members.iter().map(|m| m.source_month).max().expect("non-empty"),
            sb_fatalities: members.iter().map(|m| m.sb_fatalities).sum(),
            os_fatalities: members.iter().map(|m| m.os_fatalities).sum(),
            ns_fatalities: members.iter().map(|m| m.ns_fatalities).sum(),
            sb_source: members.iter().map(|m| m.sb_source).sum(),
            observed: members.iter().all(|m| m.observed),
            features,
        });
        cells.push(n);
    }
    (out, cells)
}

/// Everything needed to rebuild a term's columns on new rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TermRecipe {
    Intercept,
    Linear {
        feature: String,
        transform: Transform,
    },
    Interaction {
        a: String,
        a_transform: Transform,
        b: String,
        b_transform: Transform,
    },
    MonthDummies,
    PSpline {
        feature: String,
        transform: Transform,
        grid: KnotGrid,
        /// Constraint null space, column-major `K x (K-1)`.
        z: Vec<f64>,
    },
    Temporal {
        grid: KnotGrid,
        z: Vec<f64>,
    },
    Tensor {
        lon: String,
        lat: String,
        grid_lon: KnotGrid,
        grid_lat: KnotGrid,
        z: Vec<f64>,
    },
    RandomEffect {
        levels: Vec<i64>,
    },
}

impl TermRecipe {
    pub fn label(&self) -> String {
        match self {
            TermRecipe::Intercept => "(Intercept)".into(),
            TermRecipe::Linear { feature, .. } | TermRecipe::PSpline { feature, .. } => feature.clone(),
            TermRecipe::Interaction { a, b, .. } => format!("{a}:{b}"),
            TermRecipe::MonthDummies => "month".into(),
            TermRecipe::Temporal { .. } => "time".into(),
            TermRecipe::Tensor { lon, lat, .. } => format!("{lon}*{lat}"),
            TermRecipe::RandomEffect { .. } => "country".into(),
        }
    }
}

fn z_matrix(z: &[f64], k: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(k, k - 1, z)
}

fn absorbed(term: SmoothTerm) -> Result<(SmoothTerm, Vec<f64>), BasisError> {
    let term = absorb_constraint(&term)?;
    let z = term.absorbed.as_ref().expect("absorbed").as_slice().to_vec();
    Ok((term, z))
}

fn span(name: &str, values: &[f64]) -> Result<(f64, f64), BasisError> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(BasisError::Degenerate(name.to_string()));
    }
    Ok((lo, hi))
}

/// Chooses bases for every term of `stage`. Knot ranges cover `train` and
/// `domain`; constraints are centred on `train`.
pub fn plan_terms(
    spec: &ModelSpec,
    stage: Stage,
    train: &Frame,
    domain: Option<&Frame>,
) -> Result<Vec<TermRecipe>, HurdleError> {
    let mut full = train.clone();
    if let Some(d) = domain {
        full.append(d);
    }
    let b = spec.basis;
    let mut recipes = vec![TermRecipe::Intercept];
    for c in spec.stage_terms(stage) {
        let recipe = match &c.effect {
            Effect::Linear => TermRecipe::Linear {
                feature: c.name.clone(),
                transform: c.transform,
            },
            Effect::Interaction(other) => TermRecipe::Interaction {
                a: c.name.clone(),
                a_transform: c.transform,
                b: other.clone(),
                b_transform: spec.transform_of(stage, other).unwrap_or(Transform::Identity),
            },
            Effect::DummySet => TermRecipe::MonthDummies,
            Effect::PSpline => {
                let (lo, hi) = span(&c.name, &full.column(stage, &c.name, c.transform)?)?;
                let grid = KnotGrid::equispaced(lo, hi, b.pspline_k, b.degree, b.penalty_order)?;
                let x = train.column(stage, &c.name, c.transform)?;
                let (_, z) = absorbed(pspline(&c.name, &x, &grid)?)?;
                TermRecipe::PSpline {
                    feature: c.name.clone(),
                    transform: c.transform,
                    grid,
                    z,
                }
            }
            Effect::TemporalTrend => {
                // knots cover the training months only; later months reuse
                // the last fitted value rather than extrapolating the curve
                let t: Vec<f64> = train.months().iter().map(|&m| f64::from(m)).collect();
                let domain = span("time", &t)?;
                let (_, z) = absorbed(temporal_trend_on(&t, b.trend_k, domain)?)?;
                TermRecipe::Temporal {
                    grid: KnotGrid::equispaced(domain.0, domain.1, b.trend_k, 3, 2)?,
                    z,
                }
            }
            Effect::TensorSpatial(lat) => {
                let transform_lat = spec.transform_of(stage, lat).unwrap_or(Transform::Identity);
                let (lo_a, hi_a) = span(&c.name, &full.column(stage, &c.name, c.transform)?)?;
                let (lo_b, hi_b) = span(lat, &full.column(stage, lat, transform_lat)?)?;
                let grid_lon = KnotGrid::equispaced(lo_a, hi_a, b.tensor_k, b.degree, b.penalty_order)?;
                let grid_lat = KnotGrid::equispaced(lo_b, hi_b, b.tensor_k, b.degree, b.penalty_order)?;
                let x_lon = train.column(stage, &c.name, c.transform)?;
                let x_lat = train.column(stage, lat, transform_lat)?;
                let (_, z) = absorbed(tensor_spatial(&x_lon, &x_lat, &grid_lon, &grid_lat)?)?;
                TermRecipe::Tensor {
                    lon: c.name.clone(),
                    lat: lat.clone(),
                    grid_lon,
                    grid_lat,
                    z,
                }
            }
            Effect::RandomEffect => {
                let levels: BTreeSet<i64> = train.countries().into_iter().collect();
                TermRecipe::RandomEffect {
                    levels: levels.into_iter().collect(),
                }
            }
        };
        recipes.push(recipe);
    }
    Ok(recipes)
}

fn transformed_spline(name: &str, x: &[f64], grid: &KnotGrid, z: &[f64], kind: SmoothKind) -> Result<SmoothTerm, BasisError> {
    let k = grid.num_basis();
    let z = z_matrix(z, k);
    let basis = bspline_basis_named(name, x, grid)?;
    let penalty = difference_penalty(k, grid.order)?;
    Ok(SmoothTerm {
        name: name.to_string(),
        kind,
        basis: basis * &z,
        penalty: z.transpose() * penalty * &z,
        constraint: None,
        absorbed: Some(z),
    })
}

/// Model matrix for `frame` under `recipes`.
pub fn build_design(
    spec: &ModelSpec,
    stage: Stage,
    recipes: &[TermRecipe],
    frame: &Frame,
) -> Result<StageDesign, HurdleError> {
    let n = frame.len();
    let mut builder = StageDesign::builder(n);
    for recipe in recipes {
        builder = match recipe {
            TermRecipe::Intercept => builder.intercept(),
            TermRecipe::Linear { feature, transform } => {
                let x = frame.column(stage, feature, *transform)?;
                builder.unpenalized(feature, TermKind::Linear, DMatrix::from_column_slice(n, 1, &x))
            }
            TermRecipe::Interaction {
                a,
                a_transform,
                b,
                b_transform,
            } => {
                let xa = frame.column(stage, a, *a_transform)?;
                let xb = frame.column(stage, b, *b_transform)?;
                let x: Vec<f64> = xa.iter().zip(&xb).map(|(p, q)| p * q).collect();
                builder.unpenalized(&recipe.label(), TermKind::Interaction, DMatrix::from_column_slice(n, 1, &x))
            }
            TermRecipe::MonthDummies => builder.unpenalized("month", TermKind::Dummy, month_dummies(&frame.months())),
            TermRecipe::PSpline {
                feature,
                transform,
                grid,
                z,
            } => {
                let x = frame.column(stage, feature, *transform)?;
                builder.smooth(&transformed_spline(feature, &x, grid, z, SmoothKind::PSpline)?)?
            }
            TermRecipe::Temporal { grid, z } => {
                let (lo, hi) = grid.range();
                let t: Vec<f64> = frame.months().iter().map(|&m| f64::from(m).clamp(lo, hi)).collect();
                builder.smooth(&transformed_spline("time", &t, grid, z, SmoothKind::Temporal)?)?
            }
            TermRecipe::Tensor {
                lon,
                lat,
                grid_lon,
                grid_lat,
                z,
            } => {
                let t_lon = spec.transform_of(stage, lon).unwrap_or(Transform::Identity);
                let t_lat = spec.transform_of(stage, lat).unwrap_or(Transform::Identity);
                let x_lon = frame.column(stage, lon, t_lon)?;
                let x_lat = frame.column(stage, lat, t_lat)?;
                let k = grid_lon.num_basis() * grid_lat.num_basis();
                let z = z_matrix(z, k);
                let basis = row_kronecker(
                    &bspline_basis_named(lon, &x_lon, grid_lon)?,
                    &bspline_basis_named(lat, &x_lat, grid_lat)?,
                );
                let term = SmoothTerm {
                    name: recipe.label(),
                    kind: SmoothKind::Tensor,
                    basis: basis * &z,
                    penalty: z.transpose() * tensor_penalty(grid_lon, grid_lat)? * &z,
                    constraint: None,
                    absorbed: Some(z),
                };
                builder.smooth(&term)?
            }
            TermRecipe::RandomEffect { levels } => {
                builder.smooth(&random_effect_block(&frame.countries(), levels)?)?
            }
        };
    }
    Ok(builder.build()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{lag_covariates, simulate_panel, SimConfig};

    fn lagged() -> LaggedPanel {
        let sim = simulate_panel(&SimConfig {
            n_countries: 4,
            cells_per_country: 3,
            n_months: 30,
            ..SimConfig::default()
        })
        .unwrap();
        lag_covariates(&sim.panel, 2, &ModelSpec::default_conflict()).unwrap()
    }

    #[test]
    fn country_rows_aggregate_cells() {
        let l = lagged();
        let frame = Frame::country_level(&l, &l.rows);
        assert_eq!(frame.len(), 4 * 28);
        assert!(frame.cells.iter().all(|&n| n == 3));
        let r = &frame.rows[0];
        let cell_total: u64 = l
            .rows
            .iter()
            .filter(|c| c.country_id == r.country_id && c.month == r.month)
            .map(|c| c.sb_fatalities)
            .sum();
        assert_eq!(r.sb_fatalities, cell_total);
        // country-level covariates are shared by every cell
        let milex = frame.column(Stage::Country, "milex", Transform::Identity).unwrap();
        let cell = l
            .rows
            .iter()
            .find(|c| c.country_id == r.country_id && c.month == r.month)
            .unwrap();
        assert_eq!(milex[0], cell.features[l.feature_index("milex").unwrap()]);
        // derived features come from the country twin
        let since = frame.column(Stage::Country, "sb_since", Transform::Identity).unwrap();
        assert_eq!(since[0], cell.features[l.feature_index("cm_sb_since").unwrap()]);
    }

    #[test]
    fn design_rebuilds_identically() {
        let l = lagged();
        let spec = ModelSpec::default_conflict();
        for stage in Stage::ALL {
            let frame = if stage == Stage::Country {
                Frame::country_level(&l, &l.rows)
            } else {
                Frame::cell_level(&l, l.rows.clone())
            };
            let recipes = plan_terms(&spec, stage, &frame, None).unwrap();
            let a = build_design(&spec, stage, &recipes, &frame).unwrap();
            let json = serde_json::to_string(&recipes).unwrap();
            let back: Vec<TermRecipe> = serde_json::from_str(&json).unwrap();
            assert_eq!(back, recipes);
            let b = build_design(&spec, stage, &back, &frame).unwrap();
            assert_eq!(a.x, b.x);
            // constrained smooths are centred over the training rows
            for t in a.terms.iter().filter(|t| matches!(t.kind, TermKind::PSpline | TermKind::Tensor | TermKind::Temporal)) {
                for j in t.start..t.start + t.len {
                    assert!(a.x.column(j).sum().abs() < 1e-8, "{} column {j}", t.name);
                }
            }
        }
    }

    #[test]
    fn values_beyond_knots_are_refused() {
        let l = lagged();
        let spec = ModelSpec::default_conflict();
        let early: Vec<LaggedRow> = l.rows.iter().filter(|r| r.month < 20).cloned().collect();
        let late: Vec<LaggedRow> = l.rows.iter().filter(|r| r.month >= 20).cloned().collect();
        let train = Frame::cell_level(&l, early);
        let test = Frame::cell_level(&l, late);
        let recipes = plan_terms(&spec, Stage::Cell, &train, None).unwrap();
        assert!(matches!(
            build_design(&spec, Stage::Cell, &recipes, &test),
            Err(HurdleError::Basis(BasisError::OutOfRange { .. }))
        ));
        let recipes = plan_terms(&spec, Stage::Cell, &train, Some(&test)).unwrap();
        assert!(build_design(&spec, Stage::Cell, &recipes, &test).is_ok());
    }

    #[test]
    fn trend_is_held_after_training() {
        let l = lagged();
        let spec = ModelSpec::from_toml_str("[[covariate]]\nname = \"time\"\nstages = [3]\neffect = \"temporal-trend\"\n").unwrap();
        let train = Frame::cell_level(&l, l.rows.iter().filter(|r| r.month < 20).cloned().collect());
        let recipes = plan_terms(&spec, Stage::Count, &train, None).unwrap();
        let at = |month: Month| {
            let rows = l.rows.iter().filter(|r| r.month == month).take(1).cloned().collect();
            build_design(&spec, Stage::Count, &recipes, &Frame::cell_level(&l, rows)).unwrap().x
        };
        assert_eq!(at(19), at(25));
        assert_ne!(at(18), at(19));
    }
}
