//! Expanding-window evaluation, true forecasts, and scoring.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{apply_thresholds, calibrate, CalibrationError, DEConfig, Hurdles};
use crate::glm::FitOptions;
use crate::hurdle::{fit_hurdle_with_domain, predict_stages, HurdleError, HurdleModel, HurdleOptions, StagePredictions};
use crate::panel::{
    check_no_leakage, lag_covariates, lag_for_forecast, split_periodisation, LaggedPanel, LaggedRow, ModelSpec,
    Month, Panel, PanelError,
};

/// Steps supported by the forecasting setup.
pub const SUPPORTED_STEPS: std::ops::RangeInclusive<u32> = 2..=7;

#[derive(Error, Debug)]
pub enum EvalError {
    #[error("vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("negative count {0}")]
    Negative(f64),

    #[error("no months to score")]
    Empty,

    #[error("month {index} has no rows")]
    EmptyMonth { index: usize },

    #[error("step {0} is not supported; use 2 to 7")]
    UnsupportedStep(u32),

    #[error("panel ends at month {last}, before evaluation month {month}")]
    PanelTooShort { month: Month, last: Month },

    #[error("leakage at t = {t}, s = {s}: cell {cell} month {month} reads month {source_month}")]
    Leakage {
        t: Month,
        s: u32,
        cell: i64,
        month: Month,
        source_month: Month,
    },

    #[error("t = {t}, s = {s}: {source}")]
    Pair {
        t: Month,
        s: u32,
        #[source]
        source: Box<EvalError>,
    },

    #[error(transparent)]
    Hurdle(#[from] HurdleError),

    #[error(transparent)]
    Calibration(#[from] CalibrationError),

    #[error(transparent)]
    Panel(#[from] PanelError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("thread pool: {0}")]
    Threads(String),

    #[error("month {0} has no observed rows to calibrate on")]
    NoObservedRows(Month),

    #[error("model has no thresholds; calibrate it first")]
    Uncalibrated,

    #[error("scores file: {0}")]
    Scores(String),
}

/// `ln(1 + y_t) - ln(1 + y_{t-s})`, elementwise.
pub fn delta_transform(y_t: &[f64], y_tminus_s: &[f64]) -> Result<Vec<f64>, EvalError> {
    if y_t.len() != y_tminus_s.len() {
        return Err(EvalError::LengthMismatch(y_t.len(), y_tminus_s.len()));
    }
    if let Some(v) = y_t.iter().chain(y_tminus_s).find(|v| !(**v >= 0.0)) {
        return Err(EvalError::Negative(*v));
    }
    Ok(y_t.iter().zip(y_tminus_s).map(|(a, b)| a.ln_1p() - b.ln_1p()).collect())
}

fn per_month_mean(a: &[Vec<f64>], b: &[Vec<f64>], f: impl Fn(f64, f64) -> f64) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut total = 0.0;
    for (index, (x, y)) in a.iter().zip(b).enumerate() {
        if x.len() != y.len() {
            return Err(EvalError::LengthMismatch(x.len(), y.len()));
        }
        if x.is_empty() {
            return Err(EvalError::EmptyMonth { index });
        }
        total += x.iter().zip(y).map(|(p, q)| f(*p, *q)).sum::<f64>() / x.len() as f64;
    }
    Ok(total / a.len() as f64)
}

/// Mean over months of the within-month mean squared error.
pub fn mse_score(yhat_by_t: &[Vec<f64>], y_by_t: &[Vec<f64>]) -> Result<f64, EvalError> {
    per_month_mean(yhat_by_t, y_by_t, |p, q| (p - q) * (p - q))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaddaConfig {
    pub epsilon: f64,
}

impl Default for TaddaConfig {
    fn default() -> Self {
        Self { epsilon: 0.048 }
    }
}

/// Sign in {-1, 0, 1}.
fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// `|d - dhat| + |dhat| 1{sign dhat != sign d} 1{|dhat - d| > eps}`.
pub fn tadda_term(dhat: f64, d: f64, epsilon: f64) -> f64 {
    let gap = (d - dhat).abs();
    let penalty = if sign(dhat) != sign(d) && gap > epsilon {
        dhat.abs()
    } else {
        0.0
    };
    gap + penalty
}

/// TADDA averaged within each month, then across months.
pub fn tadda_score(dhat_by_t: &[Vec<f64>], d_by_t: &[Vec<f64>], cfg: TaddaConfig) -> Result<f64, EvalError> {
    per_month_mean(dhat_by_t, d_by_t, |p, q| tadda_term(p, q, cfg.epsilon))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub months: Vec<Month>,
    pub steps: Vec<u32>,
    pub de: DEConfig,
    pub tadda: TaddaConfig,
    pub fit: FitOptions,
    /// Worker threads for `(t, s)` pairs; results do not depend on it.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            months: Vec::new(),
            steps: SUPPORTED_STEPS.collect(),
            de: DEConfig::default(),
            tadda: TaddaConfig::default(),
            fit: FitOptions::default(),
            threads: 1,
        }
    }
}

/// One predicted cell-month.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub cell_id: i64,
    pub country_id: i64,
    pub month: Month,
    pub pi1: f64,
    pub pi2: f64,
    pub lambda3: f64,
    pub yhat: f64,
    pub delta_hat: f64,
    /// `NaN` for forecasts whose target is unknown.
    pub delta_true: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub t: Month,
    pub s: u32,
    pub hurdles: Hurdles,
    pub rows: Vec<PredictionRow>,
    /// Observed counts at `t`, aligned with `rows`.
    pub y: Vec<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skipped {
    pub t: Month,
    pub s: u32,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub s: u32,
    pub months: usize,
    pub mse: f64,
    pub tadda: f64,
    pub baseline_mse: f64,
    pub baseline_tadda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationRun {
    pub records: Vec<PairRecord>,
    pub skipped: Vec<Skipped>,
    pub scores: Vec<StepScore>,
}

fn pair_seed(seed: u64, t: Month, s: u32) -> u64 {
    seed ^ ((t as u64) << 8 | u64::from(s)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn observed_counts(rows: &[LaggedRow]) -> Vec<f64> {
    rows.iter().map(|r| r.sb_fatalities as f64).collect()
}

fn prediction_rows(preds: &StagePredictions, yhat: &[f64], rows: &[LaggedRow]) -> Vec<PredictionRow> {
    preds
        .rows
        .iter()
        .zip(yhat)
        .zip(rows)
        .map(|((p, &yh), r)| {
            let base = (r.sb_source as f64).ln_1p();
            PredictionRow {
                cell_id: p.cell_id,
                country_id: p.country_id,
                month: p.month,
                pi1: p.pi1,
                pi2: p.pi2,
                lambda3: p.lambda3,
                yhat: yh,
                delta_hat: yh.ln_1p() - base,
                delta_true: if r.observed {
                    (r.sb_fatalities as f64).ln_1p() - base
                } else {
                    f64::NAN
                },
            }
        })
        .collect()
}

fn options(fit: &FitOptions, seed: u64) -> HurdleOptions {
    HurdleOptions {
        fit: fit.clone(),
        seed: Some(seed),
        ..HurdleOptions::default()
    }
}

/// Pre-fit on `pre_train`, calibrate on `calibration`, refit on `train`.
/// Knots span `domain`.
pub fn fit_and_calibrate(
    pre_train: &LaggedPanel,
    calibration: &LaggedPanel,
    train: &LaggedPanel,
    domain: &LaggedPanel,
    spec: &ModelSpec,
    fit: &FitOptions,
    de: &DEConfig,
) -> Result<(HurdleModel, Hurdles), EvalError> {
    let opts = options(fit, de.seed);
    let pre = fit_hurdle_with_domain(pre_train, Some(domain), spec, &opts)?;
    let preds = predict_stages(&pre, calibration)?;
    let hurdles = calibrate(&preds, &observed_counts(&calibration.rows), de)?;
    let mut model = fit_hurdle_with_domain(train, Some(domain), spec, &opts)?;
    model.set_thresholds(hurdles.tau1, hurdles.tau2)?;
    Ok((model, hurdles))
}

enum PairOutcome {
    Done(PairRecord),
    Skipped(Skipped),
}

fn run_pair(panel: &Panel, spec: &ModelSpec, t: Month, s: u32, cfg: &EvalConfig) -> Result<PairOutcome, EvalError> {
    let start = Instant::now();
    let cutoff = t - s as Month;
    let skip = |reason: String| Ok(PairOutcome::Skipped(Skipped { t, s, reason }));
    // only what is known at t enters; covariates are filled from months <= t - s
    let data = panel.truncate(t).impute_missing_through(cutoff)?;
    let lagged = lag_covariates(&data, s, spec)?;
    let split = match split_periodisation(&lagged, t) {
        Ok(split) => split,
        Err(e @ PanelError::InsufficientHistory { .. }) => return skip(e.to_string()),
        Err(e) => return Err(e.into()),
    };
    for part in [&split.pre_train, &split.calibration, &split.train, &split.test, &lagged] {
        check_no_leakage(&part.rows, cutoff).map_err(|(cell, month, source_month)| EvalError::Leakage {
            t,
            s,
            cell,
            month,
            source_month,
        })?;
    }
    if split.test.is_empty() || split.calibration.is_empty() || split.pre_train.is_empty() {
        return skip("no rows in the test, calibration or pre-training period".into());
    }
    let de = DEConfig {
        seed: pair_seed(cfg.de.seed, t, s),
        ..cfg.de.clone()
    };
    let (model, hurdles) = match fit_and_calibrate(
        &split.pre_train,
        &split.calibration,
        &split.train,
        &lagged,
        spec,
        &cfg.fit,
        &de,
    ) {
        Ok(v) => v,
        Err(EvalError::Hurdle(e @ HurdleError::EmptyStage { .. })) => return skip(e.to_string()),
        Err(e) => return Err(e),
    };
    let preds = predict_stages(&model, &split.test)?;
    let yhat = apply_thresholds(&preds, hurdles.tau1, hurdles.tau2);
    Ok(PairOutcome::Done(PairRecord {
        t,
        s,
        hurdles,
        rows: prediction_rows(&preds, &yhat, &split.test.rows),
        y: observed_counts(&split.test.rows),
        seconds: start.elapsed().as_secs_f64(),
    }))
}

/// Per-step scores of the model and of the all-zero forecast.
pub fn score_records(records: &[PairRecord], tadda: TaddaConfig) -> Result<Vec<StepScore>, EvalError> {
    let mut by_step: BTreeMap<u32, Vec<&PairRecord>> = BTreeMap::new();
    for r in records {
        by_step.entry(r.s).or_default().push(r);
    }
    let mut out = Vec::new();
    for (s, recs) in by_step {
        let log_hat: Vec<Vec<f64>> = recs.iter().map(|r| r.rows.iter().map(|p| p.yhat.ln_1p()).collect()).collect();
        let log_y: Vec<Vec<f64>> = recs.iter().map(|r| r.y.iter().map(|v| v.ln_1p()).collect()).collect();
        let zeros: Vec<Vec<f64>> = log_y.iter().map(|m| vec![0.0; m.len()]).collect();
        let dhat: Vec<Vec<f64>> = recs.iter().map(|r| r.rows.iter().map(|p| p.delta_hat).collect()).collect();
        let d: Vec<Vec<f64>> = recs.iter().map(|r| r.rows.iter().map(|p| p.delta_true).collect()).collect();
        // the zero forecast's delta is minus the source-month level
        let dzero: Vec<Vec<f64>> = recs
            .iter()
            .map(|r| r.rows.iter().map(|p| p.delta_hat - p.yhat.ln_1p()).collect())
            .collect();
        out.push(StepScore {
            s,
            months: recs.len(),
            mse: mse_score(&log_hat, &log_y)?,
            tadda: tadda_score(&dhat, &d, tadda)?,
            baseline_mse: mse_score(&zeros, &log_y)?,
            baseline_tadda: tadda_score(&dzero, &d, tadda)?,
        });
    }
    Ok(out)
}

fn pool(threads: usize) -> Result<rayon::ThreadPool, EvalError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| EvalError::Threads(e.to_string()))
}

/// Expanding-window evaluation over every `(t, s)` in `cfg`. Pairs without
/// enough history are skipped and never scored.
pub fn run_evaluation(panel: &Panel, spec: &ModelSpec, cfg: &EvalConfig) -> Result<EvaluationRun, EvalError> {
    let Some((_, last)) = panel.month_range() else {
        return Err(EvalError::Empty);
    };
    if let Some(&month) = cfg.months.iter().find(|&&m| m > last) {
        return Err(EvalError::PanelTooShort { month, last });
    }
    if let Some(&s) = cfg.steps.iter().find(|&&s| s == 0) {
        return Err(EvalError::UnsupportedStep(s));
    }
    let pairs: Vec<(Month, u32)> = cfg
        .steps
        .iter()
        .flat_map(|&s| cfg.months.iter().map(move |&t| (t, s)))
        .collect();
    let outcomes: Vec<Result<PairOutcome, EvalError>> = pool(cfg.threads)?.install(|| {
        pairs
            .par_iter()
            .map(|&(t, s)| {
                run_pair(panel, spec, t, s, cfg).map_err(|e| EvalError::Pair {
                    t,
                    s,
                    source: Box::new(e),
                })
            })
            .collect()
    });
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o? {
            PairOutcome::Done(r) => records.push(r),
            PairOutcome::Skipped(s) => {
                log::info!("skipping t = {}, s = {}: {}", s.t, s.s, s.reason);
                skipped.push(s);
            }
        }
    }
    let scores = score_records(&records, cfg.tadda)?;
    Ok(EvaluationRun {
        records,
        skipped,
        scores,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastStep {
    pub s: u32,
    pub hurdles: Hurdles,
    pub rows: Vec<PredictionRow>,
}

/// Forecasts month `T0 + s` for each step, where `T0` is the last month of
/// the panel: fit with lag `s` on everything known, calibrate on `T0`.
pub fn run_forecast(panel: &Panel, spec: &ModelSpec, steps: &[u32], cfg: &EvalConfig) -> Result<Vec<ForecastStep>, EvalError> {
    if let Some(&s) = steps.iter().find(|s| !SUPPORTED_STEPS.contains(s)) {
        return Err(EvalError::UnsupportedStep(s));
    }
    let Some((_, t0)) = panel.month_range() else {
        return Err(EvalError::Empty);
    };
    let data = panel.impute_missing_through(t0)?;
    let run = |s: u32| -> Result<ForecastStep, EvalError> {
        let domain = forecast_domain(&data, s, spec)?;
        let lagged = domain.filter(|r| r.month <= t0);
        let target = domain.filter(|r| r.month > t0);
        let pre_train = lagged.filter(|r| r.month < t0);
        let calibration = lagged.filter(|r| r.month == t0);
        let de = DEConfig {
            seed: pair_seed(cfg.de.seed, t0, s),
            ..cfg.de.clone()
        };
        let (model, hurdles) = fit_and_calibrate(&pre_train, &calibration, &lagged, &domain, spec, &cfg.fit, &de)?;
        let preds = predict_stages(&model, &target)?;
        let yhat = apply_thresholds(&preds, hurdles.tau1, hurdles.tau2);
        Ok(ForecastStep {
            s,
            hurdles,
            rows: prediction_rows(&preds, &yhat, &target.rows),
        })
    };
    pool(cfg.threads)?.install(|| steps.par_iter().map(|&s| run(s)).collect())
}

/// Knot domain for a model fit on `panel` with lag `s`: every lagged row
/// plus the rows that forecast `T0 + s`.
pub fn forecast_domain(panel: &Panel, s: u32, spec: &ModelSpec) -> Result<LaggedPanel, EvalError> {
    let lagged = lag_covariates(panel, s, spec)?;
    let target = lag_for_forecast(panel, s, spec)?;
    let mut all = lagged.rows.clone();
    all.extend(target.rows.iter().cloned());
    Ok(lagged.with_rows(all))
}

/// Chooses thresholds for `model` on one month of `panel`.
pub fn calibrate_on_month(model: &HurdleModel, panel: &Panel, month: Month, de: &DEConfig) -> Result<Hurdles, EvalError> {
    let lagged = lag_covariates(panel, model.lag, &model.spec)?;
    let rows = lagged.filter(|r| r.month == month && r.observed);
    if rows.is_empty() {
        return Err(EvalError::NoObservedRows(month));
    }
    let preds = predict_stages(model, &rows)?;
    Ok(calibrate(&preds, &observed_counts(&rows.rows), de)?)
}

/// Thresholded forecast of month `T0 + lag` from a calibrated model.
pub fn forecast_with_model(model: &HurdleModel, panel: &Panel) -> Result<Vec<PredictionRow>, EvalError> {
    let (tau1, tau2) = model.thresholds().ok_or(EvalError::Uncalibrated)?;
    let target = lag_for_forecast(panel, model.lag, &model.spec)?;
    let preds = predict_stages(model, &target)?;
    let yhat = apply_thresholds(&preds, tau1, tau2);
    Ok(prediction_rows(&preds, &yhat, &target.rows))
}

fn number(x: f64) -> String {
    if x.is_nan() {
        "NA".into()
    } else {
        format!("{x}")
    }
}

pub const PREDICTION_HEADER: [&str; 9] = [
    "cell_id", "country_id", "month", "pi1", "pi2", "lambda3", "yhat", "delta_hat", "delta_true",
];

pub fn write_predictions<W: Write>(out: W, rows: &[PredictionRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PREDICTION_HEADER)?;
    for r in rows {
        w.write_record([
            r.cell_id.to_string(),
            r.country_id.to_string(),
            r.month.to_string(),
            number(r.pi1),
            number(r.pi2),
            number(r.lambda3),
            number(r.yhat),
            number(r.delta_hat),
            number(r.delta_true),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_scores<W: Write>(out: W, scores: &[StepScore]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["s", "mse", "tadda"])?;
    for s in scores {
        w.write_record([s.s.to_string(), number(s.mse), number(s.tadda)])?;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text table of per-step scores. Zero-baseline columns are left out
/// when unknown, e.g. for scores read back from CSV.
pub fn render_report(scores: &[StepScore], epsilon: f64) -> String {
    let baseline = scores.iter().any(|s| !s.baseline_mse.is_nan());
    let mut out = String::new();
    out.push_str("MSE on the log(1 + fatalities) scale; TADDA on log-change deltas\n");
    out.push_str(&format!("epsilon = {epsilon}\n\n"));
    out.push_str(&format!("{:>3}  {:>10}  {:>10}", "s", "MSE", "TADDA"));
    if baseline {
        out.push_str(&format!("  {:>13}  {:>15}", "zero MSE", "zero TADDA"));
    }
    out.push('\n');
    for s in scores {
        out.push_str(&format!("{:>3}  {:>10.4}  {:>10.4}", s.s, s.mse, s.tadda));
        if baseline {
            out.push_str(&format!("  {:>13.4}  {:>15.4}", s.baseline_mse, s.baseline_tadda));
        }
        out.push('\n');
    }
    out
}

/// Reads a scores CSV written by [`write_scores`]. Baseline fields are `NaN`.
pub fn read_scores<R: std::io::Read>(input: R) -> Result<Vec<StepScore>, EvalError> {
    let mut r = csv::Reader::from_reader(input);
    let parse = |v: &str| if v == "NA" { Ok(f64::NAN) } else { v.parse::<f64>() };
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let bad = |what: &str| EvalError::Scores(format!("line {}: bad {what}", out.len() + 2));
        out.push(StepScore {
            s: field(0).parse().map_err(|_| bad("step"))?,
            months: 0,
            mse: parse(field(1)).map_err(|_| bad("mse"))?,
            tadda: parse(field(2)).map_err(|_| bad("tadda"))?,
            baseline_mse: f64::NAN,
            baseline_tadda: f64::NAN,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{simulate_panel, SimConfig};
    use proptest::prelude::*;

    #[test]
    fn delta_cases() {
        let e = std::f64::consts::E;
        assert_eq!(delta_transform(&[3.0, 0.0], &[3.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!((delta_transform(&[e - 1.0], &[0.0]).unwrap()[0] - 1.0).abs() < 1e-15);
        assert!((delta_transform(&[0.0], &[e * e - 1.0]).unwrap()[0] + 2.0).abs() < 1e-15);
        assert!(matches!(delta_transform(&[1.0], &[]), Err(EvalError::LengthMismatch(1, 0))));
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse_score(&[vec![1.0, 2.0]], &[vec![1.0, 2.0]]).unwrap(), 0.0);
        assert_eq!(mse_score(&[vec![1.0, -1.0]], &[vec![0.0, 0.0]]).unwrap(), 1.0);
        let two = mse_score(
            &[vec![0.02f64.sqrt()], vec![0.2]],
            &[vec![0.0], vec![0.0]],
        )
        .unwrap();
        assert!((two - 0.03).abs() < 1e-15);
        assert!(matches!(mse_score(&[], &[]), Err(EvalError::Empty)));
        assert!(matches!(mse_score(&[vec![]], &[vec![]]), Err(EvalError::EmptyMonth { index: 0 })));
    }

    #[test]
    fn tadda_cases() {
        let cfg = TaddaConfig::default();
        assert_eq!(cfg.epsilon, 0.048);
        assert_eq!(tadda_score(&[vec![0.3, -0.1]], &[vec![0.3, -0.1]], cfg).unwrap(), 0.0);
        assert!((tadda_term(-0.2, 0.5, 0.048) - 0.9).abs() < 1e-15);
        assert!((tadda_term(0.46, 0.5, 0.048) - 0.04).abs() < 1e-15);
        // opposite signs within epsilon carry no penalty
        assert!((tadda_term(-0.01, 0.02, 0.048) - 0.03).abs() < 1e-15);
        // a zero prediction against a change costs only the gap
        assert_eq!(tadda_term(0.0, 0.5, 0.048), 0.5);
    }

    proptest! {
        #[test]
        fn tadda_dominates_absolute_error(
            pairs in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..40),
            eps in 0.0f64..0.5,
        ) {
            let (dhat, d): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let t = tadda_score(&[dhat.clone()], &[d.clone()], TaddaConfig { epsilon: eps }).unwrap();
            let mae = dhat.iter().zip(&d).map(|(a, b)| (a - b).abs()).sum::<f64>() / d.len() as f64;
            prop_assert!(t >= mae - 1e-12);
        }

        #[test]
        fn scores_ignore_row_order(
            mut rows in proptest::collection::vec((0.0f64..5.0, 0.0f64..5.0), 1..30),
            seed in any::<u64>(),
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = rows.iter().copied().unzip();
            let m1 = mse_score(&[a.clone()], &[b.clone()]).unwrap();
            let t1 = tadda_score(&[a], &[b], TaddaConfig::default()).unwrap();
            let n = rows.len();
            rows.swap(0, (seed as usize) % n);
            let (a, b): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
            prop_assert!((mse_score(&[a.clone()], &[b.clone()]).unwrap() - m1).abs() < 1e-12);
            prop_assert!((tadda_score(&[a], &[b], TaddaConfig::default()).unwrap() - t1).abs() < 1e-12);
        }
    }

    fn record(t: Month, s: u32, y: &[u64], yhat: &[f64]) -> PairRecord {
        let rows = y
            .iter()
            .zip(yhat)
            .enumerate()
            .map(|(i, (&v, &yh))| PredictionRow {
                cell_id: i as i64,
                country_id: 1,
                month: t,
                pi1: 0.5,
                pi2: 0.5,
                lambda3: 1.0,
                yhat: yh,
                delta_hat: yh.ln_1p() - 1f64.ln_1p(),
                delta_true: (v as f64).ln_1p() - 1f64.ln_1p(),
            })
            .collect();
        PairRecord {
            t,
            s,
            hurdles: Hurdles {
                tau1: 0.5,
                tau2: 0.5,
                achieved_loss: 0.0,
            },
            rows,
            y: y.iter().map(|&v| v as f64).collect(),
            seconds: 0.0,
        }
    }

    #[test]
    fn oracle_predictions_score_zero() {
        let recs = vec![
            record(10, 2, &[0, 3, 7], &[0.0, 3.0, 7.0]),
            record(11, 2, &[1, 0, 0], &[1.0, 0.0, 0.0]),
        ];
        let scores = score_records(&recs, TaddaConfig::default()).unwrap();
        assert_eq!(scores.len(), 1);
        assert_eq!(scores[0].mse, 0.0);
        assert_eq!(scores[0].tadda, 0.0);
        assert!(scores[0].baseline_mse > 0.0);
    }

    #[test]
    fn forecast_rejects_step_one() {
        let sim = simulate_panel(&SimConfig {
            n_countries: 3,
            cells_per_country: 2,
            n_months: 24,
            ..SimConfig::default()
        })
        .unwrap();
        let err = run_forecast(&sim.panel, &ModelSpec::default_conflict(), &[1], &EvalConfig::default()).unwrap_err();
        assert!(matches!(err, EvalError::UnsupportedStep(1)));
    }

    #[test]
    fn short_history_is_skipped() {
        let sim = simulate_panel(&SimConfig {
            n_countries: 3,
            cells_per_country: 2,
            n_months: 24,
            ..SimConfig::default()
        })
        .unwrap();
        let cfg = EvalConfig {
            months: vec![3],
            steps: vec![3],
            ..EvalConfig::default()
        };
        let run = run_evaluation(&sim.panel, &ModelSpec::default_conflict(), &cfg).unwrap();
        assert!(run.records.is_empty());
        assert_eq!(run.skipped.len(), 1);
        assert!(run.scores.is_empty());
        let cfg = EvalConfig {
            months: vec![30],
            ..cfg
        };
        assert!(matches!(
            run_evaluation(&sim.panel, &ModelSpec::default_conflict(), &cfg),
            Err(EvalError::PanelTooShort { month: 30, last: 23 })
        ));
    }

    #[test]
    fn csv_layout() {
        let rec = record(10, 2, &[0, 3], &[0.0, 2.5]);
        let mut buf = Vec::new();
        write_predictions(&mut buf, &rec.rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), PREDICTION_HEADER.join(","));
        assert!(lines.next().unwrap().starts_with("0,1,10,0.5,0.5,1,0,"));
        let mut buf = Vec::new();
        let scores = score_records(&[rec], TaddaConfig::default()).unwrap();
        write_scores(&mut buf, &scores).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("s,mse,tadda\n2,"));
        assert!(render_report(&scores, 0.048).contains("epsilon = 0.048"));
    }
}
