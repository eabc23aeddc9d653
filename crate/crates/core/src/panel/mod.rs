//! Panel data: one row per (cell, month), country membership, raw covariates.
//!
//! Months are integer indices counted from January 1990 (month 0). The
//! calendar month of year is `month.rem_euclid(12)`, so index 0 is January.

mod io;
mod lag;
mod simulate;
mod spec;

pub use io::{load_panel, read_panel, write_panel};
pub use lag::{
    aggregate_arms_imports, check_no_leakage, lag_covariates, lag_for_forecast, monthly_arms_imports,
    split_periodisation, LaggedPanel, LaggedRow, Periodisation, Split, DERIVED_FEATURES,
};
pub use simulate::{simulate_panel, SimConfig, Simulation, StageTruth, SIM_COVARIATES};
pub use spec::{CovariateSpec, Effect, ModelSpec, SpecError, Stage, Transform};

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

pub type Month = i32;

/// January 1990.
pub const EPOCH: Month = 0;

#[derive(Error, Debug)]
pub enum PanelError {
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },

    #[error("missing required column `{0}`")]
    MissingColumn(String),

    #[error("cell {cell} is mapped to countries {first} and {second}")]
    CellInTwoCountries { cell: i64, first: i64, second: i64 },

    #[error("duplicate record for cell {cell} in month {month}")]
    DuplicateRecord { cell: i64, month: Month },

    #[error("covariate `{0}` is missing in every row; cannot impute")]
    AllMissing(String),

    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),

    #[error("covariate `{name}` has no value for cell {cell} in month {month}")]
    MissingValue { name: String, cell: i64, month: Month },

    #[error("transform {transform} is undefined for covariate `{name}` at value {value}")]
    Domain { name: String, transform: &'static str, value: f64 },

    #[error("transform {0} applies to targets, not covariates")]
    TargetTransform(&'static str),

    #[error("arms imports incomplete: missing years {0:?}")]
    ImportsIncomplete(Vec<i32>),

    #[error("negative arms import value {value} in year {year}")]
    NegativeImports { year: i32, value: f64 },

    #[error("insufficient history: t={t}, s={s} leaves no pre-training months after epoch {epoch}")]
    InsufficientHistory { t: Month, s: u32, epoch: Month },

    #[error("lag must be at least 1 month")]
    ZeroLag,

    #[error("covariate `{name}` lag {lag} is shorter than the model lag {s}")]
    LagTooShort { name: String, lag: u32, s: u32 },

    #[error("simulation: {0}")]
    Simulation(String),

    #[error(transparent)]
    Spec(#[from] SpecError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One (cell, country, month) record.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelObservation {
    pub cell_id: i64,
    pub country_id: i64,
    pub month: Month,
    pub sb_fatalities: u64,
    pub os_fatalities: u64,
    pub ns_fatalities: u64,
    pub lon: f64,
    pub lat: f64,
    /// Raw covariates aligned with [`Panel::covariate_names`]; `None` marks a
    /// value that still needs imputation.
    pub covariates: Vec<Option<f64>>,
}

impl PanelObservation {
    pub fn needs_imputation(&self) -> bool {
        self.covariates.iter().any(Option::is_none)
    }
}

/// Country-month aggregate of state-based fatalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountryMonth {
    pub country_id: i64,
    pub month: Month,
    pub total_fatalities: u64,
    pub any_fatality: bool,
}

/// Validated panel, sorted by (country, cell, month).
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    covariate_names: Vec<String>,
    rows: Vec<PanelObservation>,
}

impl Panel {
    pub fn new(
        covariate_names: Vec<String>,
        mut rows: Vec<PanelObservation>,
    ) -> Result<Self, PanelError> {
        let mut country_of: HashMap<i64, i64> = HashMap::new();
        for row in &rows {
            if row.covariates.len() != covariate_names.len() {
                return Err(PanelError::Malformed {
                    line: 0,
                    message: format!(
                        "cell {} month {} has {} covariates, expected {}",
                        row.cell_id,
                        row.month,
                        row.covariates.len(),
                        covariate_names.len()
                    ),
                });
            }
            match country_of.insert(row.cell_id, row.country_id) {
                Some(prev) if prev != row.country_id => {
                    return Err(PanelError::CellInTwoCountries {
                        cell: row.cell_id,
                        first: prev.min(row.country_id),
                        second: prev.max(row.country_id),
                    })
                }
                _ => {}
            }
        }
        rows.sort_by_key(|r| (r.country_id, r.cell_id, r.month));
        for pair in rows.windows(2) {
            if pair[0].cell_id == pair[1].cell_id && pair[0].month == pair[1].month {
                return Err(PanelError::DuplicateRecord {
                    cell: pair[0].cell_id,
                    month: pair[0].month,
                });
            }
        }
        Ok(Self {
            covariate_names,
            rows,
        })
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|n| n == name)
    }

    pub fn rows(&self) -> &[PanelObservation] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn month_range(&self) -> Option<(Month, Month)> {
        let min = self.rows.iter().map(|r| r.month).min()?;
        let max = self.rows.iter().map(|r| r.month).max()?;
        Some((min, max))
    }

    pub fn needs_imputation(&self) -> bool {
        self.rows.iter().any(PanelObservation::needs_imputation)
    }

    /// Drops every record after `month`.
    pub fn truncate(&self, month: Month) -> Panel {
        Panel {
            covariate_names: self.covariate_names.clone(),
            rows: self
                .rows
                .iter()
                .filter(|r| r.month <= month)
                .cloned()
                .collect(),
        }
    }

    /// Number of distinct cells per country.
    pub fn cells_per_country(&self) -> BTreeMap<i64, usize> {
        let mut cells: BTreeMap<i64, Vec<i64>> = BTreeMap::new();
        for r in &self.rows {
            let list = cells.entry(r.country_id).or_default();
            if list.last() != Some(&r.cell_id) {
                list.push(r.cell_id);
            }
        }
        cells.into_iter().map(|(c, v)| (c, v.len())).collect()
    }

    pub fn country_months(&self) -> Vec<CountryMonth> {
        let mut totals: BTreeMap<(i64, Month), u64> = BTreeMap::new();
        for r in &self.rows {
            *totals.entry((r.country_id, r.month)).or_default() += r.sb_fatalities;
        }
        totals
            .into_iter()
            .map(|((country_id, month), total)| CountryMonth {
                country_id,
                month,
                total_fatalities: total,
                any_fatality: total > 0,
            })
            .collect()
    }

    /// Fills missing covariates. See [`impute_missing_through`].
    pub fn impute_missing(&self) -> Result<Panel, PanelError> {
        match self.month_range() {
            Some((_, max)) => self.impute_missing_through(max),
            None => Ok(self.clone()),
        }
    }

    /// Deterministic fill of missing covariate values using only records at
    /// or before `cutoff`: last observation carried forward within the cell,
    /// then the country mean, then the global mean. Records after `cutoff`
    /// are left untouched.
    pub fn impute_missing_through(&self, cutoff: Month) -> Result<Panel, PanelError> {
        if !self
            .rows
            .iter()
            .any(|r| r.month <= cutoff && r.needs_imputation())
        {
            return Ok(self.clone());
        }
        let mut rows = self.rows.clone();
        for (k, name) in self.covariate_names.iter().enumerate() {
            let mut country_sum: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
            let mut global = (0.0, 0usize);
            for r in self.rows.iter().filter(|r| r.month <= cutoff) {
                if let Some(v) = r.covariates[k] {
                    let e = country_sum.entry(r.country_id).or_insert((0.0, 0));
                    e.0 += v;
                    e.1 += 1;
                    global.0 += v;
                    global.1 += 1;
                }
            }
            let any_missing = rows
                .iter()
                .any(|r| r.month <= cutoff && r.covariates[k].is_none());
            if !any_missing {
                continue;
            }
            if global.1 == 0 {
                return Err(PanelError::AllMissing(name.clone()));
            }
            let global_mean = global.0 / global.1 as f64;
            // rows are sorted by (country, cell, month)
            let mut last: Option<(i64, f64)> = None;
            for r in rows.iter_mut().filter(|r| r.month <= cutoff) {
                if last.is_some_and(|(cell, _)| cell != r.cell_id) {
                    last = None;
                }
                match r.covariates[k] {
                    Some(v) => last = Some((r.cell_id, v)),
                    None => {
                        let fill = match last {
                            Some((_, v)) => v,
                            None => match country_sum.get(&r.country_id) {
                                Some(&(s, n)) if n > 0 => s / n as f64,
                                _ => global_mean,
                            },
                        };
                        r.covariates[k] = Some(fill);
                    }
                }
            }
        }
        Ok(Panel {
            covariate_names: self.covariate_names.clone(),
            rows,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(cell: i64, country: i64, month: Month, cov: Option<f64>) -> PanelObservation {
        PanelObservation {
            cell_id: cell,
            country_id: country,
            month,
            sb_fatalities: 0,
            os_fatalities: 0,
            ns_fatalities: 0,
            lon: 0.0,
            lat: 0.0,
            covariates: vec![cov],
        }
    }

    #[test]
    fn cell_in_two_countries_is_rejected() {
        let err = Panel::new(
            vec!["gdp".into()],
            vec![obs(7, 1, 0, Some(1.0)), obs(7, 2, 1, Some(1.0))],
        )
        .unwrap_err();
        assert!(matches!(
            err,
            PanelError::CellInTwoCountries {
                cell: 7,
                first: 1,
                second: 2
            }
        ));
    }

    #[test]
    fn locf_fills_gap() {
        let p = Panel::new(
            vec!["gdp".into()],
            vec![
                obs(1, 1, 0, Some(1.0)),
                obs(1, 1, 1, None),
                obs(1, 1, 2, Some(3.0)),
            ],
        )
        .unwrap();
        let filled = p.impute_missing().unwrap();
        let vals: Vec<_> = filled.rows().iter().map(|r| r.covariates[0]).collect();
        assert_eq!(vals, vec![Some(1.0), Some(1.0), Some(3.0)]);
    }

    #[test]
    fn leading_gap_uses_country_then_global_mean() {
        let p = Panel::new(
            vec!["gdp".into()],
            vec![
                obs(1, 1, 0, None),
                obs(1, 1, 1, Some(4.0)),
                obs(2, 1, 0, Some(2.0)),
                obs(3, 2, 0, None),
            ],
        )
        .unwrap();
        let filled = p.impute_missing().unwrap();
        let get = |cell, month| {
            filled
                .rows()
                .iter()
                .find(|r| r.cell_id == cell && r.month == month)
                .unwrap()
                .covariates[0]
                .unwrap()
        };
        assert_eq!(get(1, 0), 3.0);
        assert_eq!(get(3, 0), 3.0);
    }

    #[test]
    fn fully_observed_panel_is_unchanged() {
        let p = Panel::new(
            vec!["gdp".into()],
            vec![obs(1, 1, 0, Some(1.0)), obs(1, 1, 1, Some(2.0))],
        )
        .unwrap();
        assert_eq!(p.impute_missing().unwrap(), p);
    }

    #[test]
    fn all_missing_covariate_errors() {
        let p = Panel::new(
            vec!["gdp".into()],
            vec![obs(1, 1, 0, None), obs(2, 1, 0, None)],
        )
        .unwrap();
        match p.impute_missing() {
            Err(PanelError::AllMissing(name)) => assert_eq!(name, "gdp"),
            other => panic!("expected AllMissing, got {other:?}"),
        }
    }

    #[test]
    fn imputation_ignores_records_after_cutoff() {
        let p = Panel::new(
            vec!["gdp".into()],
            vec![
                obs(1, 1, 0, None),
                obs(2, 1, 0, Some(2.0)),
                obs(2, 1, 5, Some(100.0)),
            ],
        )
        .unwrap();
        let filled = p.impute_missing_through(0).unwrap();
        assert_eq!(filled.rows()[0].covariates[0], Some(2.0));
    }

    #[test]
    fn country_month_totals_match_cells() {
        let mut rows = vec![obs(1, 1, 0, Some(0.0)), obs(2, 1, 0, Some(0.0))];
        rows[0].sb_fatalities = 3;
        rows[1].sb_fatalities = 4;
        let p = Panel::new(vec!["gdp".into()], rows).unwrap();
        let cm = p.country_months();
        assert_eq!(cm.len(), 1);
        assert_eq!(cm[0].total_fatalities, 7);
        assert!(cm[0].any_fatality);
    }
}
