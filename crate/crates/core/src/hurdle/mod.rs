//! Three-stage hurdle model: country gate, cell gate, zero-truncated count.

mod design;
mod io;

pub use design::{build_design, plan_terms, Frame, TermRecipe};
pub use io::{load_model, load_model_for_spec, model_from_str, model_to_string, save_model, MODEL_FORMAT_VERSION};

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glm::{
    fit_stage, predict_eta, ztpoisson_logpdf, ztpoisson_mean, Family, FitError, FitOptions, FittedStage,
};
use crate::panel::{LaggedPanel, LaggedRow, ModelSpec, Month, PanelError, SpecError, Stage};
use crate::smooth::BasisError;

#[derive(Error, Debug)]
pub enum HurdleError {
    #[error("stage {stage} has no training rows: {reason}")]
    EmptyStage { stage: u8, reason: &'static str },

    #[error("stage {stage}: {source}")]
    Fit {
        stage: u8,
        #[source]
        source: FitError,
    },

    #[error("stage {stage} references `{name}`, which the lagged panel does not provide")]
    UnknownFeature { stage: u8, name: String },

    #[error("threshold {0} lies outside [0, 1]")]
    Threshold(f64),

    #[error("panel is lagged by {found} months, the model by {expected}")]
    LagMismatch { expected: u32, found: u32 },

    #[error("training rows must have observed targets")]
    UnobservedTraining,

    #[error("model file: {0}")]
    Format(String),

    #[error("model file has format version {found}; this build reads version {expected}")]
    VersionMismatch { found: String, expected: u32 },

    #[error("model file checksum mismatch: the file is corrupt or was edited")]
    Checksum,

    #[error("model was fit under spec {model}, but the current spec hashes to {current}; refit the model")]
    SpecMismatch { model: String, current: String },

    #[error(transparent)]
    Basis(#[from] BasisError),

    #[error(transparent)]
    Design(#[from] FitError),

    #[error(transparent)]
    Panel(#[from] PanelError),

    #[error(transparent)]
    Spec(#[from] SpecError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How country-month rows enter the stage-1 likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage1Rows {
    /// One row per country-month with unit weight.
    #[default]
    CountryMonth,
    /// Each country-month repeated for its cells with weight `1 / n_cells`.
    WeightedCells,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HurdleOptions {
    pub fit: FitOptions,
    pub stage1_rows: Stage1Rows,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageModel {
    pub recipes: Vec<TermRecipe>,
    pub fit: FittedStage,
    pub n_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    /// First and last target month of the training rows.
    pub train_months: (Month, Month),
    pub seed: Option<u64>,
    pub software_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HurdleModel {
    pub lag: u32,
    pub spec: ModelSpec,
    pub stage1: StageModel,
    pub stage2: StageModel,
    pub stage3: StageModel,
    pub tau1: Option<f64>,
    pub tau2: Option<f64>,
    pub meta: FitMetadata,
}

impl HurdleModel {
    pub fn stage(&self, stage: Stage) -> &StageModel {
        match stage {
            Stage::Country => &self.stage1,
            Stage::Cell => &self.stage2,
            Stage::Count => &self.stage3,
        }
    }

    pub fn set_thresholds(&mut self, tau1: f64, tau2: f64) -> Result<(), HurdleError> {
        for t in [tau1, tau2] {
            if !(0.0..=1.0).contains(&t) {
                return Err(HurdleError::Threshold(t));
            }
        }
        self.tau1 = Some(tau1);
        self.tau2 = Some(tau2);
        Ok(())
    }

    pub fn thresholds(&self) -> Option<(f64, f64)> {
        self.tau1.zip(self.tau2)
    }
}

fn fit_one(
    spec: &ModelSpec,
    stage: Stage,
    frame: &Frame,
    domain: Option<&Frame>,
    y: &[f64],
    weights: &[f64],
    family: Family,
    opts: &FitOptions,
) -> Result<StageModel, HurdleError> {
    let recipes = plan_terms(spec, stage, frame, domain)?;
    let design = build_design(spec, stage, &recipes, frame)?;
    let fit = fit_stage(&design, y, weights, family, opts).map_err(|source| HurdleError::Fit {
        stage: stage.number(),
        source,
    })?;
    Ok(StageModel {
        recipes,
        fit,
        n_rows: frame.len(),
    })
}

/// Stage-1 frame, response and weights under the chosen row scheme.
pub fn stage1_data(train: &LaggedPanel, rows: Stage1Rows) -> (Frame, Vec<f64>, Vec<f64>) {
    let cm = Frame::country_level(train, &train.rows);
    match rows {
        Stage1Rows::CountryMonth => {
            let y = cm.rows.iter().map(|r| f64::from(u8::from(r.sb_fatalities > 0))).collect();
            let w = vec![1.0; cm.len()];
            (cm, y, w)
        }
        Stage1Rows::WeightedCells => {
            let w = cm
                .cells
                .iter()
                .flat_map(|&n| std::iter::repeat_n(1.0 / n as f64, n))
                .collect();
            let expanded = cm.expand_cells();
            let y = expanded
                .rows
                .iter()
                .map(|r| f64::from(u8::from(r.sb_fatalities > 0)))
                .collect();
            (expanded, y, w)
        }
    }
}

/// Fits the three stages on `train`; see [`fit_hurdle_with_domain`].
pub fn fit_hurdle(train: &LaggedPanel, spec: &ModelSpec, opts: &HurdleOptions) -> Result<HurdleModel, HurdleError> {
    fit_hurdle_with_domain(train, None, spec, opts)
}

/// Fits stage 1 on country-months, stage 2 on cells of country-months with
/// fatalities, and stage 3 on cells with fatalities. Spline knots span the
/// training rows together with `domain`, which should hold every row the
/// model will later predict.
pub fn fit_hurdle_with_domain(
    train: &LaggedPanel,
    domain: Option<&LaggedPanel>,
    spec: &ModelSpec,
    opts: &HurdleOptions,
) -> Result<HurdleModel, HurdleError> {
    if train.rows.iter().any(|r| !r.observed) {
        return Err(HurdleError::UnobservedTraining);
    }
    if train.is_empty() {
        return Err(HurdleError::EmptyStage {
            stage: 1,
            reason: "no country-month rows",
        });
    }

    let (frame1, y1, w1) = stage1_data(train, opts.stage1_rows);
    let domain1 = domain.map(|d| Frame::country_level(d, &d.rows));
    let stage1 = fit_one(
        spec,
        Stage::Country,
        &frame1,
        domain1.as_ref(),
        &y1,
        &w1,
        Family::BernoulliLogit,
        &opts.fit,
    )?;

    let active: BTreeSet<(i64, Month)> = frame1
        .rows
        .iter()
        .filter(|r| r.sb_fatalities > 0)
        .map(|r| (r.country_id, r.month))
        .collect();
    let rows2: Vec<LaggedRow> = train
        .rows
        .iter()
        .filter(|r| active.contains(&(r.country_id, r.month)))
        .cloned()
        .collect();
    if rows2.is_empty() {
        return Err(HurdleError::EmptyStage {
            stage: 2,
            reason: "no country-month with fatalities",
        });
    }
    let rows3: Vec<LaggedRow> = rows2.iter().filter(|r| r.sb_fatalities > 0).cloned().collect();
    let frame2 = Frame::cell_level(train, rows2);
    let mut domain_cells = Frame::cell_level(train, train.rows.clone());
    if let Some(d) = domain {
        domain_cells.append(&Frame::cell_level(d, d.rows.clone()));
    }
    let y2: Vec<f64> = frame2
        .rows
        .iter()
        .map(|r| f64::from(u8::from(r.sb_fatalities > 0)))
        .collect();
    let stage2 = fit_one(
        spec,
        Stage::Cell,
        &frame2,
        Some(&domain_cells),
        &y2,
        &vec![1.0; y2.len()],
        Family::BernoulliLogit,
        &opts.fit,
    )?;

    let frame3 = Frame::cell_level(train, rows3);
    let y3: Vec<f64> = frame3.rows.iter().map(|r| r.sb_fatalities as f64).collect();
    let stage3 = fit_one(
        spec,
        Stage::Count,
        &frame3,
        Some(&domain_cells),
        &y3,
        &vec![1.0; y3.len()],
        Family::ZtpoissonLog,
        &opts.fit,
    )?;

    let months = train.months();
    Ok(HurdleModel {
        lag: train.lag,
        spec: spec.clone(),
        stage1,
        stage2,
        stage3,
        tau1: None,
        tau2: None,
        meta: FitMetadata {
            train_months: (months[0], *months.last().expect("non-empty")),
            seed: opts.seed,
            software_version: env!("CARGO_PKG_VERSION").to_string(),
        },
    })
}

/// Stage quantities for one cell-month.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StagePrediction {
    pub cell_id: i64,
    pub country_id: i64,
    pub month: Month,
    pub pi1: f64,
    pub pi2: f64,
    pub lambda3: f64,
}

impl StagePrediction {
    pub fn joint_probability(&self, y: u64, y_tilde: bool) -> f64 {
        joint_probability(self.pi1, self.pi2, self.lambda3, y, y_tilde)
    }

    pub fn marginal_mean(&self) -> f64 {
        marginal_mean(self.pi1, self.pi2, self.lambda3)
    }
}

/// `P(country gate = y_tilde, y)`: `1 - pi1` for `(0, 0)`, `pi1 (1 - pi2)`
/// for `(1, 0)`, `pi1 pi2 f(y)` for `(1, y > 0)` with `f` the truncated
/// Poisson pmf, and 0 for a closed gate with a positive count.
pub fn joint_probability(pi1: f64, pi2: f64, lambda: f64, y: u64, y_tilde: bool) -> f64 {
    match (y_tilde, y) {
        (false, 0) => 1.0 - pi1,
        (false, _) => 0.0,
        (true, 0) => pi1 * (1.0 - pi2),
        (true, y) => pi1 * pi2 * ztpoisson_logpdf(y, lambda).map_or(0.0, f64::exp),
    }
}

/// `E[y] = pi1 pi2 lambda / (1 - e^{-lambda})`.
pub fn marginal_mean(pi1: f64, pi2: f64, lambda: f64) -> f64 {
    pi1 * pi2 * ztpoisson_mean(lambda).unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StagePredictions {
    pub rows: Vec<StagePrediction>,
}

impl StagePredictions {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn clamp_probability(p: f64) -> f64 {
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn stage_eta(model: &HurdleModel, stage: Stage, frame: &Frame) -> Result<Vec<f64>, HurdleError> {
    let sm = model.stage(stage);
    let design = build_design(&model.spec, stage, &sm.recipes, frame)?;
    Ok(predict_eta(&sm.fit, &design.x)?.iter().copied().collect())
}

/// Stage probabilities and count rate for every row of `panel`. The
/// country gate is evaluated once per country-month and shared by its cells.
pub fn predict_stages(model: &HurdleModel, panel: &LaggedPanel) -> Result<StagePredictions, HurdleError> {
    if panel.lag != model.lag {
        return Err(HurdleError::LagMismatch {
            expected: model.lag,
            found: panel.lag,
        });
    }
    if panel.is_empty() {
        return Ok(StagePredictions::default());
    }
    let cm = Frame::country_level(panel, &panel.rows);
    let eta1 = stage_eta(model, Stage::Country, &cm)?;
    let pi1: HashMap<(i64, Month), f64> = cm
        .rows
        .iter()
        .zip(&eta1)
        .map(|(r, &e)| ((r.country_id, r.month), clamp_probability(Family::BernoulliLogit.inverse_link(e))))
        .collect();
    let cells = Frame::cell_level(panel, panel.rows.clone());
    let eta2 = stage_eta(model, Stage::Cell, &cells)?;
    let eta3 = stage_eta(model, Stage::Count, &cells)?;
    let rows = panel
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| StagePrediction {
            cell_id: r.cell_id,
            country_id: r.country_id,
            month: r.month,
            pi1: pi1[&(r.country_id, r.month)],
            pi2: clamp_probability(Family::BernoulliLogit.inverse_link(eta2[i])),
            lambda3: Family::ZtpoissonLog.inverse_link(eta3[i]).max(f64::MIN_POSITIVE),
        })
        .collect();
    Ok(StagePredictions { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{lag_covariates, simulate_panel, SimConfig, StageTruth};

    fn small_run(seed: u64) -> LaggedPanel {
        let sim = simulate_panel(&SimConfig {
            n_countries: 8,
            cells_per_country: 6,
            n_months: 40,
            seed,
            ..SimConfig::default()
        })
        .unwrap();
        lag_covariates(&sim.panel, 2, &ModelSpec::default_conflict()).unwrap()
    }

    #[test]
    fn joint_probability_cases() {
        assert_eq!(joint_probability(0.3, 0.4, 2.0, 5, false), 0.0);
        assert!((joint_probability(0.3, 0.4, 2.0, 0, false) - 0.7).abs() < 1e-15);
        assert!((joint_probability(0.3, 0.4, 2.0, 0, true) - 0.18).abs() < 1e-15);
        let e = (-1f64).exp();
        let expected = 0.25 * e / (1.0 - e);
        assert!((joint_probability(0.5, 0.5, 1.0, 1, true) - expected).abs() < 1e-15);
        let total: f64 = joint_probability(0.37, 0.81, 4.2, 0, false)
            + (0..=200).map(|y| joint_probability(0.37, 0.81, 4.2, y, true)).sum::<f64>();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn marginal_mean_cases() {
        assert_eq!(marginal_mean(0.0, 0.7, 3.0), 0.0);
        assert_eq!(marginal_mean(1.0, 1.0, 3.0), ztpoisson_mean(3.0).unwrap());
        assert!((marginal_mean(0.5, 0.5, 1.0) - 0.395494).abs() < 1e-6);
        let brute: f64 = (1..=200u64)
            .map(|y| y as f64 * joint_probability(0.5, 0.5, 1.0, y, true))
            .sum();
        assert!((marginal_mean(0.5, 0.5, 1.0) - brute).abs() < 1e-12);
    }

    #[test]
    fn fit_and_predict_small_panel() {
        let l = small_run(3);
        let model = fit_hurdle(&l, &ModelSpec::default_conflict(), &HurdleOptions::default()).unwrap();
        assert_eq!(model.stage1.fit.family, Family::BernoulliLogit);
        assert_eq!(model.stage2.fit.family, Family::BernoulliLogit);
        assert_eq!(model.stage3.fit.family, Family::ZtpoissonLog);
        assert_eq!(model.thresholds(), None);
        let preds = predict_stages(&model, &l).unwrap();
        assert_eq!(preds.len(), l.len());
        for p in &preds.rows {
            assert!(p.pi1 > 0.0 && p.pi1 < 1.0);
            assert!(p.pi2 > 0.0 && p.pi2 < 1.0);
            assert!(p.lambda3 > 0.0);
        }
        // pi1 is shared by all cells of a country-month
        let mut by_cm: HashMap<(i64, Month), f64> = HashMap::new();
        for p in &preds.rows {
            let v = *by_cm.entry((p.country_id, p.month)).or_insert(p.pi1);
            assert_eq!(v, p.pi1);
        }
        // stage-2 rows come only from active country-months
        let active = l
            .rows
            .iter()
            .filter(|r| {
                l.rows
                    .iter()
                    .any(|o| o.country_id == r.country_id && o.month == r.month && o.sb_fatalities > 0)
            })
            .count();
        assert_eq!(model.stage2.n_rows, active);
        assert_eq!(model.stage3.n_rows, l.rows.iter().filter(|r| r.sb_fatalities > 0).count());
    }

    #[test]
    fn stage_weighting_schemes_agree() {
        let l = small_run(5);
        let spec = ModelSpec::from_toml_str(
            r#"
            [[covariate]]
            name = "milex"
            stages = [1, 2, 3]
            effect = "linear"
            transform = "log"

            [[covariate]]
            name = "polity"
            stages = [1, 2, 3]
            effect = "linear"

            [[covariate]]
            name = "month"
            stages = [1]
            effect = "dummy-set"

            [[covariate]]
            name = "country"
            stages = [1]
            effect = "random-effect"
            "#,
        )
        .unwrap();
        let cm = fit_hurdle(&l, &spec, &HurdleOptions::default()).unwrap();
        let pgm = fit_hurdle(
            &l,
            &spec,
            &HurdleOptions {
                stage1_rows: Stage1Rows::WeightedCells,
                ..HurdleOptions::default()
            },
        )
        .unwrap();
        assert_eq!(cm.stage1.fit.smoothing_params, pgm.stage1.fit.smoothing_params);
        for (a, b) in cm.stage1.fit.coefficients.iter().zip(&pgm.stage1.fit.coefficients) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn all_zero_panel_has_no_stage_two() {
        let sim = simulate_panel(&SimConfig {
            n_countries: 4,
            cells_per_country: 3,
            n_months: 30,
            stage1: StageTruth::intercept_only(-60.0),
            ..SimConfig::default()
        })
        .unwrap();
        let spec = ModelSpec::from_toml_str(
            r#"
            [[covariate]]
            name = "milex"
            stages = [1, 2, 3]
            effect = "linear"
            transform = "log"
            "#,
        )
        .unwrap();
        let l = lag_covariates(&sim.panel, 2, &spec).unwrap();
        let err = fit_hurdle(&l, &spec, &HurdleOptions::default()).unwrap_err();
        assert!(matches!(err, HurdleError::EmptyStage { stage: 2, .. }), "{err}");
    }

    #[test]
    fn null_model_predicts_even_odds() {
        let l = small_run(7);
        let mut model = fit_hurdle(&l, &ModelSpec::default_conflict(), &HurdleOptions::default()).unwrap();
        for s in [&mut model.stage1, &mut model.stage2, &mut model.stage3] {
            s.fit.coefficients.iter_mut().for_each(|c| *c = 0.0);
        }
        let preds = predict_stages(&model, &l).unwrap();
        assert!(preds
            .rows
            .iter()
            .all(|p| p.pi1 == 0.5 && p.pi2 == 0.5 && p.lambda3 == 1.0));
        assert!(model.set_thresholds(0.563, 0.263).is_ok());
        assert!(matches!(model.set_thresholds(1.2, 0.1), Err(HurdleError::Threshold(_))));
    }

    #[test]
    fn lag_mismatch_is_refused() {
        let l = small_run(3);
        let model = fit_hurdle(&l, &ModelSpec::default_conflict(), &HurdleOptions::default()).unwrap();
        let sim = simulate_panel(&SimConfig {
            n_countries: 8,
            cells_per_country: 6,
            n_months: 40,
            seed: 3,
            ..SimConfig::default()
        })
        .unwrap();
        let l3 = lag_covariates(&sim.panel, 3, &ModelSpec::default_conflict()).unwrap();
        assert!(matches!(
            predict_stages(&model, &l3),
            Err(HurdleError::LagMismatch { expected: 2, found: 3 })
        ));
    }
}
