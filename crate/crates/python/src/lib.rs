//! Python bindings: panels, the hurdle model, calibration and scoring.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hurdlecast_core::calibration::{self, DEConfig};
use hurdlecast_core::eval::{self, EvalConfig, PredictionRow, TaddaConfig};
use hurdlecast_core::hurdle::{self, HurdleOptions};
use hurdlecast_core::panel::{self as core_panel, Month, SimConfig};

fn runtime<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn value<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Covariate layout of the three stages.
#[pyclass(name = "ModelSpec", module = "hurdlecast", frozen)]
struct PyModelSpec(core_panel::ModelSpec);

#[pymethods]
impl PyModelSpec {
    /// The built-in conflict-forecasting spec.
    #[staticmethod]
    fn default() -> Self {
        Self(core_panel::ModelSpec::default_conflict())
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        core_panel::ModelSpec::from_toml_str(text).map(Self).map_err(value)
    }

    fn to_toml(&self) -> String {
        self.0.to_toml_string()
    }

    fn hash(&self) -> String {
        self.0.hash()
    }
}

fn spec_or_default(spec: Option<&PyModelSpec>) -> core_panel::ModelSpec {
    spec.map_or_else(core_panel::ModelSpec::default_conflict, |s| s.0.clone())
}

/// Cell-month panel.
#[pyclass(name = "Panel", module = "hurdlecast", frozen)]
struct PyPanel(core_panel::Panel);

#[pymethods]
impl PyPanel {
    /// Synthetic panel from the default data-generating process.
    #[staticmethod]
    #[pyo3(signature = (countries, cells, months, seed, lag = 2))]
    fn simulate(countries: usize, cells: usize, months: usize, seed: u64, lag: u32) -> PyResult<Self> {
        let config = SimConfig {
            n_countries: countries,
            cells_per_country: cells,
            n_months: months,
            seed,
            lag,
            ..SimConfig::default()
        };
        let sim = core_panel::simulate_panel(&config).map_err(value)?;
        Ok(Self(sim.panel))
    }

    #[staticmethod]
    fn read_csv(path: PathBuf) -> PyResult<Self> {
        let file = std::fs::File::open(&path).map_err(runtime)?;
        core_panel::read_panel(file).map(Self).map_err(value)
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        let file = std::fs::File::create(&path).map_err(runtime)?;
        core_panel::write_panel(&self.0, std::io::BufWriter::new(file)).map_err(runtime)
    }

    /// `(first, last)` month, or `None` when empty.
    fn month_range(&self) -> Option<(Month, Month)> {
        self.0.month_range()
    }

    fn covariates(&self) -> Vec<String> {
        self.0.covariate_names().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

fn columns<'py>(py: Python<'py>, rows: &[PredictionRow]) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("cell_id", rows.iter().map(|r| r.cell_id).collect::<Vec<_>>())?;
    d.set_item("country_id", rows.iter().map(|r| r.country_id).collect::<Vec<_>>())?;
    d.set_item("month", rows.iter().map(|r| r.month).collect::<Vec<_>>())?;
    d.set_item("pi1", rows.iter().map(|r| r.pi1).collect::<Vec<_>>())?;
    d.set_item("pi2", rows.iter().map(|r| r.pi2).collect::<Vec<_>>())?;
    d.set_item("lambda3", rows.iter().map(|r| r.lambda3).collect::<Vec<_>>())?;
    d.set_item("yhat", rows.iter().map(|r| r.yhat).collect::<Vec<_>>())?;
    d.set_item("delta_hat", rows.iter().map(|r| r.delta_hat).collect::<Vec<_>>())?;
    d.set_item("delta_true", rows.iter().map(|r| r.delta_true).collect::<Vec<_>>())?;
    Ok(d)
}

/// Fitted three-stage hurdle model.
#[pyclass(name = "HurdleModel", module = "hurdlecast")]
struct PyHurdleModel(hurdle::HurdleModel);

#[pymethods]
impl PyHurdleModel {
    /// Fits on months up to `through` (default: the last month). Knots span
    /// every lagged row of `panel` and the rows forecasting `T0 + lag`.
    #[staticmethod]
    #[pyo3(signature = (panel, spec = None, lag = 2, through = None, seed = None))]
    fn fit(
        py: Python<'_>,
        panel: &PyPanel,
        spec: Option<&PyModelSpec>,
        lag: u32,
        through: Option<Month>,
        seed: Option<u64>,
    ) -> PyResult<Self> {
        let spec = spec_or_default(spec);
        let data = panel.0.impute_missing().map_err(value)?;
        py.detach(|| {
            let domain = eval::forecast_domain(&data, lag, &spec).map_err(value)?;
            let through = through.or(data.month_range().map(|r| r.1)).unwrap_or(0);
            let train = domain.filter(|r| r.month <= through && r.observed);
            let opts = HurdleOptions {
                seed,
                ..HurdleOptions::default()
            };
            hurdle::fit_hurdle_with_domain(&train, Some(&domain), &spec, &opts)
                .map(Self)
                .map_err(runtime)
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        hurdle::load_model(&path).map(Self).map_err(runtime)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        hurdle::save_model(&self.0, &path).map_err(runtime)
    }

    #[getter]
    fn lag(&self) -> u32 {
        self.0.lag
    }

    #[getter]
    fn train_months(&self) -> (Month, Month) {
        self.0.meta.train_months
    }

    #[getter]
    fn thresholds(&self) -> Option<(f64, f64)> {
        self.0.thresholds()
    }

    fn set_thresholds(&mut self, tau1: f64, tau2: f64) -> PyResult<()> {
        self.0.set_thresholds(tau1, tau2).map_err(value)
    }

    /// Coefficient of a named term in stage 1, 2 or 3, with its standard error.
    fn coefficient(&self, stage: u8, name: &str) -> PyResult<Option<(f64, f64)>> {
        let stage = core_panel::Stage::try_from(stage).map_err(value)?;
        let fit = &self.0.stage(stage).fit;
        Ok(fit.coefficient(name).zip(fit.std_error(name)))
    }

    /// Stage probabilities and rates for the cells of `month`, as columns.
    fn predict<'py>(&self, py: Python<'py>, panel: &PyPanel, month: Month) -> PyResult<Bound<'py, PyDict>> {
        let data = panel.0.impute_missing().map_err(value)?;
        let lagged = core_panel::lag_covariates(&data, self.0.lag, &self.0.spec).map_err(value)?;
        let rows = lagged.filter(|r| r.month == month);
        let preds = hurdle::predict_stages(&self.0, &rows).map_err(runtime)?;
        let d = PyDict::new(py);
        d.set_item("cell_id", preds.rows.iter().map(|p| p.cell_id).collect::<Vec<_>>())?;
        d.set_item("pi1", preds.rows.iter().map(|p| p.pi1).collect::<Vec<_>>())?;
        d.set_item("pi2", preds.rows.iter().map(|p| p.pi2).collect::<Vec<_>>())?;
        d.set_item("lambda3", preds.rows.iter().map(|p| p.lambda3).collect::<Vec<_>>())?;
        d.set_item("expected", preds.rows.iter().map(|p| p.marginal_mean()).collect::<Vec<_>>())?;
        Ok(d)
    }

    /// Chooses and stores thresholds on `month`; returns `(tau1, tau2, loss)`.
    #[pyo3(signature = (panel, month, seed, population = 40, generations = 200))]
    fn calibrate(
        &mut self,
        py: Python<'_>,
        panel: &PyPanel,
        month: Month,
        seed: u64,
        population: usize,
        generations: usize,
    ) -> PyResult<(f64, f64, f64)> {
        let de = DEConfig {
            population,
            generations,
            seed,
            ..DEConfig::default()
        };
        let data = panel.0.impute_missing().map_err(value)?;
        let model = &self.0;
        let h = py
            .detach(|| eval::calibrate_on_month(model, &data, month, &de))
            .map_err(runtime)?;
        self.0.set_thresholds(h.tau1, h.tau2).map_err(value)?;
        Ok((h.tau1, h.tau2, h.achieved_loss))
    }

    /// Thresholded forecast of the month `lag` months after the panel ends.
    fn forecast<'py>(&self, py: Python<'py>, panel: &PyPanel) -> PyResult<Bound<'py, PyDict>> {
        let data = panel.0.impute_missing().map_err(value)?;
        let rows = eval::forecast_with_model(&self.0, &data).map_err(runtime)?;
        columns(py, &rows)
    }
}

/// Expanding-window backtest; returns per-step scores as a list of dicts.
#[pyfunction]
#[pyo3(signature = (panel, months, steps, seed, spec = None, population = 40, generations = 200, epsilon = 0.048, threads = 1))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    panel: &PyPanel,
    months: Vec<Month>,
    steps: Vec<u32>,
    seed: u64,
    spec: Option<&PyModelSpec>,
    population: usize,
    generations: usize,
    epsilon: f64,
    threads: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let spec = spec_or_default(spec);
    let cfg = EvalConfig {
        months,
        steps,
        de: DEConfig {
            population,
            generations,
            seed,
            ..DEConfig::default()
        },
        tadda: TaddaConfig { epsilon },
        threads,
        ..EvalConfig::default()
    };
    let data = panel.0.impute_missing().map_err(value)?;
    let run = py.detach(|| eval::run_evaluation(&data, &spec, &cfg)).map_err(runtime)?;
    run.scores
        .iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("s", s.s)?;
            d.set_item("months", s.months)?;
            d.set_item("mse", s.mse)?;
            d.set_item("tadda", s.tadda)?;
            d.set_item("zero_mse", s.baseline_mse)?;
            d.set_item("zero_tadda", s.baseline_tadda)?;
            Ok(d)
        })
        .collect()
}

/// `P(country gate = y_tilde, y)` under the three-stage hurdle.
#[pyfunction]
fn joint_probability(pi1: f64, pi2: f64, lam: f64, y: u64, y_tilde: bool) -> f64 {
    hurdle::joint_probability(pi1, pi2, lam, y, y_tilde)
}

/// Expected count under the three-stage hurdle.
#[pyfunction]
fn marginal_mean(pi1: f64, pi2: f64, lam: f64) -> f64 {
    hurdle::marginal_mean(pi1, pi2, lam)
}

/// `|sum ln(1 + yhat) - sum ln(1 + y)|`.
#[pyfunction]
fn calibration_loss(yhat: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    calibration::calibration_loss(&yhat, &y).map_err(value)
}

#[pyfunction]
#[pyo3(signature = (dhat, d, epsilon = 0.048))]
fn tadda_term(dhat: f64, d: f64, epsilon: f64) -> f64 {
    eval::tadda_term(dhat, d, epsilon)
}

#[pymodule]
fn hurdlecast(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelSpec>()?;
    m.add_class::<PyPanel>()?;
    m.add_class::<PyHurdleModel>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(joint_probability, m)?)?;
    m.add_function(wrap_pyfunction!(marginal_mean, m)?)?;
    m.add_function(wrap_pyfunction!(calibration_loss, m)?)?;
    m.add_function(wrap_pyfunction!(tadda_term, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
