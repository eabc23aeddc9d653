//! Lag structure, derived event-history features, and train/calibrate/test
//! periodisation.

use std::collections::{BTreeMap, HashMap};
use std::ops::RangeInclusive;

use super::{ModelSpec, Month, Panel, PanelError, EPOCH};

/// Features computed by [`lag_covariates`] for every row, in addition to the
/// raw covariates. Each has a country-level twin prefixed `cm_`.
///
/// `*_any` are event dummies at the source month, `*_count` raw counts at the
/// source month, `*_since` is `ln(1 + months since the last event)` as of the
/// source month. A cell with no event on record counts from one month before
/// its first record.
pub const DERIVED_FEATURES: [&str; 11] = [
    "sb_any", "os_any", "ns_any", "sb_count", "os_count", "ns_count", "sb_since", "os_since",
    "ns_since", "lon", "lat",
];

const COUNTRY_PREFIX: &str = "cm_";

/// A target month paired with covariates observed `lag` months earlier.
#[derive(Debug, Clone, PartialEq)]
pub struct LaggedRow {
    pub cell_id: i64,
    pub country_id: i64,
    /// Target month `t`.
    pub month: Month,
    /// Latest month any feature of this row was read from (`t - s`).
    pub source_month: Month,
    pub sb_fatalities: u64,
    pub os_fatalities: u64,
    pub ns_fatalities: u64,
    /// State-based count at the source month, `y_{t-s}`.
    pub sb_source: u64,
    /// False for forecast rows whose target is not yet known.
    pub observed: bool,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaggedPanel {
    pub lag: u32,
    feature_names: Vec<String>,
    index: HashMap<String, usize>,
    pub rows: Vec<LaggedRow>,
    pub warnings: Vec<String>,
}

impl LaggedPanel {
    fn new(lag: u32, feature_names: Vec<String>, rows: Vec<LaggedRow>, warnings: Vec<String>) -> Self {
        let index = feature_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Self {
            lag,
            feature_names,
            index,
            rows,
            warnings,
        }
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Index used for country-level rows: derived features resolve to their
    /// `cm_` twins, everything else to itself.
    pub fn country_feature_index(&self, name: &str) -> Option<usize> {
        if DERIVED_FEATURES.contains(&name) {
            self.feature_index(&format!("{COUNTRY_PREFIX}{name}"))
        } else {
            self.feature_index(name)
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn filter(&self, keep: impl Fn(&LaggedRow) -> bool) -> LaggedPanel {
        LaggedPanel::new(
            self.lag,
            self.feature_names.clone(),
            self.rows.iter().filter(|r| keep(r)).cloned().collect(),
            Vec::new(),
        )
    }

    pub fn with_rows(&self, rows: Vec<LaggedRow>) -> LaggedPanel {
        LaggedPanel::new(self.lag, self.feature_names.clone(), rows, Vec::new())
    }

    pub fn months(&self) -> Vec<Month> {
        let mut m: Vec<Month> = self.rows.iter().map(|r| r.month).collect();
        m.sort_unstable();
        m.dedup();
        m
    }

    pub fn max_source_month(&self) -> Option<Month> {
        self.rows.iter().map(|r| r.source_month).max()
    }
}

/// Returns the first row whose features were read after `cutoff`, if any.
pub fn check_no_leakage(rows: &[LaggedRow], cutoff: Month) -> Result<(), (i64, Month, Month)> {
    match rows.iter().find(|r| r.source_month > cutoff) {
        Some(r) => Err((r.cell_id, r.month, r.source_month)),
        None => Ok(()),
    }
}

struct History {
    /// Per panel row: features at that month when used as a source.
    features: Vec<Vec<f64>>,
}

fn months_since(last: Option<Month>, now: Month, first: Month) -> f64 {
    let gap = match last {
        Some(e) => now - e,
        None => now - first + 1,
    };
    (gap as f64).ln_1p()
}

/// Derived features per panel row, cell-level then country-level.
fn event_history(panel: &Panel) -> History {
    let rows = panel.rows();
    let mut cm_totals: BTreeMap<(i64, Month), [u64; 3]> = BTreeMap::new();
    let mut cell_pos: BTreeMap<i64, (i64, f64, f64)> = BTreeMap::new();
    let mut country_first: HashMap<i64, Month> = HashMap::new();
    for r in rows {
        let t = cm_totals.entry((r.country_id, r.month)).or_default();
        t[0] += r.sb_fatalities;
        t[1] += r.os_fatalities;
        t[2] += r.ns_fatalities;
        cell_pos.insert(r.cell_id, (r.country_id, r.lon, r.lat));
        country_first
            .entry(r.country_id)
            .and_modify(|m| *m = (*m).min(r.month))
            .or_insert(r.month);
    }
    let mut centroid: HashMap<i64, (f64, f64, usize)> = HashMap::new();
    for (country, lon, lat) in cell_pos.values() {
        let e = centroid.entry(*country).or_insert((0.0, 0.0, 0));
        e.0 += lon;
        e.1 += lat;
        e.2 += 1;
    }

    // country-level features per (country, month)
    let mut cm_features: HashMap<(i64, Month), [f64; 9]> = HashMap::new();
    let mut last: [Option<Month>; 3] = [None; 3];
    let mut current = None;
    for (&(country, month), totals) in &cm_totals {
        if current != Some(country) {
            current = Some(country);
            last = [None; 3];
        }
        for k in 0..3 {
            if totals[k] > 0 {
                last[k] = Some(month);
            }
        }
        let first = country_first[&country];
        let mut f = [0.0; 9];
        for k in 0..3 {
            f[k] = f64::from(u8::from(totals[k] > 0));
            f[3 + k] = totals[k] as f64;
            f[6 + k] = months_since(last[k], month, first);
        }
        cm_features.insert((country, month), f);
    }

    let mut features = Vec::with_capacity(rows.len());
    let mut last: [Option<Month>; 3] = [None; 3];
    let mut first = 0;
    for (i, r) in rows.iter().enumerate() {
        if i == 0 || rows[i - 1].cell_id != r.cell_id {
            last = [None; 3];
            first = r.month;
        }
        let counts = [r.sb_fatalities, r.os_fatalities, r.ns_fatalities];
        for k in 0..3 {
            if counts[k] > 0 {
                last[k] = Some(r.month);
            }
        }
        let mut f = Vec::with_capacity(22);
        f.extend((0..3).map(|k| f64::from(u8::from(counts[k] > 0))));
        f.extend(counts.iter().map(|&c| c as f64));
        f.extend((0..3).map(|k| months_since(last[k], r.month, first)));
        f.push(r.lon);
        f.push(r.lat);
        let cm = cm_features[&(r.country_id, r.month)];
        f.extend_from_slice(&cm);
        let (lon, lat, n) = centroid[&r.country_id];
        f.push(lon / n as f64);
        f.push(lat / n as f64);
        features.push(f);
    }
    History { features }
}

fn feature_names(panel: &Panel) -> Vec<String> {
    let mut names: Vec<String> = panel.covariate_names().to_vec();
    names.extend(DERIVED_FEATURES.iter().map(|s| s.to_string()));
    names.extend(DERIVED_FEATURES.iter().map(|s| format!("{COUNTRY_PREFIX}{s}")));
    names
}

fn covariate_lags(panel: &Panel, s: u32, spec: &ModelSpec) -> Result<Vec<u32>, PanelError> {
    let mut lags = vec![s; panel.covariate_names().len()];
    for c in &spec.covariates {
        if let (Some(lag), Some(idx)) = (c.lag_months, panel.covariate_index(&c.name)) {
            if lag < s {
                return Err(PanelError::LagTooShort {
                    name: c.name.clone(),
                    lag,
                    s,
                });
            }
            lags[idx] = lags[idx].max(lag);
        }
    }
    Ok(lags)
}

struct LagBuilder<'a> {
    panel: &'a Panel,
    s: u32,
    lags: Vec<u32>,
    required: Vec<bool>,
    history: History,
    at: HashMap<(i64, Month), usize>,
}

impl<'a> LagBuilder<'a> {
    fn new(panel: &'a Panel, s: u32, spec: &ModelSpec) -> Result<Self, PanelError> {
        if s == 0 {
            return Err(PanelError::ZeroLag);
        }
        let referenced = spec.referenced_features();
        Ok(Self {
            panel,
            s,
            lags: covariate_lags(panel, s, spec)?,
            required: panel
                .covariate_names()
                .iter()
                .map(|n| referenced.contains(n))
                .collect(),
            history: event_history(panel),
            at: panel
                .rows()
                .iter()
                .enumerate()
                .map(|(i, r)| ((r.cell_id, r.month), i))
                .collect(),
        })
    }

    /// Features for a row of `cell` targeting month `t`, or `None` if the
    /// source records are absent.
    fn features(&self, cell: i64, t: Month) -> Result<Option<(Vec<f64>, u64)>, PanelError> {
        let source = t - self.s as Month;
        let Some(&src) = self.at.get(&(cell, source)) else {
            return Ok(None);
        };
        let rows = self.panel.rows();
        let mut features = Vec::with_capacity(self.lags.len() + 2 * DERIVED_FEATURES.len());
        for (k, &lag) in self.lags.iter().enumerate() {
            let from = t - lag as Month;
            let Some(&idx) = self.at.get(&(cell, from)) else {
                return Ok(None);
            };
            match rows[idx].covariates[k] {
                Some(v) => features.push(v),
                None if self.required[k] => {
                    return Err(PanelError::MissingValue {
                        name: self.panel.covariate_names()[k].clone(),
                        cell,
                        month: from,
                    })
                }
                None => features.push(f64::NAN),
            }
        }
        features.extend_from_slice(&self.history.features[src]);
        Ok(Some((features, rows[src].sb_fatalities)))
    }
}

/// Pairs each record at month `t` with covariates from `t - s` (or the
/// covariate's own longer lag) and derived event-history features at `t - s`.
/// Records without a source record are dropped; target columns are untouched.
pub fn lag_covariates(panel: &Panel, s: u32, spec: &ModelSpec) -> Result<LaggedPanel, PanelError> {
    let builder = LagBuilder::new(panel, s, spec)?;
    let mut rows = Vec::new();
    for r in panel.rows() {
        if let Some((features, sb_source)) = builder.features(r.cell_id, r.month)? {
            rows.push(LaggedRow {
                cell_id: r.cell_id,
                country_id: r.country_id,
                month: r.month,
                source_month: r.month - s as Month,
                sb_fatalities: r.sb_fatalities,
                os_fatalities: r.os_fatalities,
                ns_fatalities: r.ns_fatalities,
                sb_source,
                observed: true,
                features,
            });
        }
    }
    let mut warnings = Vec::new();
    if rows.is_empty() && !panel.is_empty() {
        let (lo, hi) = panel.month_range().expect("non-empty");
        let msg = format!("lag {s} exceeds the panel span of months {lo}..={hi}; no rows remain");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(LaggedPanel::new(s, feature_names(panel), rows, warnings))
}

/// Rows targeting `T0 + s` for every cell observed in the last panel month
/// `T0`, with covariates from `T0`. Targets are unknown and left at zero.
pub fn lag_for_forecast(panel: &Panel, s: u32, spec: &ModelSpec) -> Result<LaggedPanel, PanelError> {
    let builder = LagBuilder::new(panel, s, spec)?;
    let Some((_, last)) = panel.month_range() else {
        return Ok(LaggedPanel::new(s, feature_names(panel), Vec::new(), Vec::new()));
    };
    let target = last + s as Month;
    let mut rows = Vec::new();
    for r in panel.rows().iter().filter(|r| r.month == last) {
        if let Some((features, sb_source)) = builder.features(r.cell_id, target)? {
            rows.push(LaggedRow {
                cell_id: r.cell_id,
                country_id: r.country_id,
                month: target,
                source_month: last,
                sb_fatalities: 0,
                os_fatalities: 0,
                ns_fatalities: 0,
                sb_source,
                observed: false,
                features,
            });
        }
    }
    Ok(LaggedPanel::new(s, feature_names(panel), rows, Vec::new()))
}

/// Month ranges for one expanding-window step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Periodisation {
    pub pre_train: (Month, Month),
    pub calibration: Month,
    pub train: (Month, Month),
    pub test: Month,
}

impl Periodisation {
    pub fn new(t: Month, s: u32, epoch: Month) -> Result<Self, PanelError> {
        let calibration = t - s as Month;
        if calibration - 1 < epoch {
            return Err(PanelError::InsufficientHistory { t, s, epoch });
        }
        Ok(Self {
            pre_train: (epoch, calibration - 1),
            calibration,
            train: (epoch, calibration),
            test: t,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub periods: Periodisation,
    pub pre_train: LaggedPanel,
    pub calibration: LaggedPanel,
    pub train: LaggedPanel,
    pub test: LaggedPanel,
}

/// Splits a lagged panel for target month `t` using its lag as `s`.
pub fn split_periodisation(lagged: &LaggedPanel, t: Month) -> Result<Split, PanelError> {
    let periods = Periodisation::new(t, lagged.lag, EPOCH)?;
    let within = |(lo, hi): (Month, Month)| move |r: &LaggedRow| r.month >= lo && r.month <= hi;
    Ok(Split {
        periods,
        pre_train: lagged.filter(within(periods.pre_train)),
        calibration: lagged.filter(|r| r.month == periods.calibration),
        train: lagged.filter(within(periods.train)),
        test: lagged.filter(|r| r.month == periods.test),
    })
}

/// Short- and long-term arms imports for `year`:
/// `ln(1 + m_y + m_{y-1})` and `ln(1 + sum of m over y-10..=y-2)`.
pub fn aggregate_arms_imports(
    yearly_tiv: &BTreeMap<i32, f64>,
    year: i32,
) -> Result<(f64, f64), PanelError> {
    let missing: Vec<i32> = (year - 10..=year)
        .filter(|y| !yearly_tiv.contains_key(y))
        .collect();
    if !missing.is_empty() {
        return Err(PanelError::ImportsIncomplete(missing));
    }
    for y in year - 10..=year {
        let v = yearly_tiv[&y];
        if !(v >= 0.0) {
            return Err(PanelError::NegativeImports { year: y, value: v });
        }
    }
    let short = yearly_tiv[&year] + yearly_tiv[&(year - 1)];
    let long: f64 = (year - 10..=year - 2).map(|y| yearly_tiv[&y]).sum();
    Ok((short.ln_1p(), long.ln_1p()))
}

/// Expands yearly imports to months (constant within a calendar year).
/// Months whose year window is incomplete map to `None`.
pub fn monthly_arms_imports(
    yearly_tiv: &BTreeMap<i32, f64>,
    months: RangeInclusive<Month>,
) -> Vec<(Month, Option<(f64, f64)>)> {
    months
        .map(|m| {
            let year = 1990 + m.div_euclid(12);
            (m, aggregate_arms_imports(yearly_tiv, year).ok())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{CovariateSpec, Effect, PanelObservation, Transform};

    fn spec() -> ModelSpec {
        ModelSpec::new(
            Default::default(),
            vec![CovariateSpec::new("x", &[1, 2, 3], Effect::Linear, Transform::Identity)],
        )
        .unwrap()
    }

    fn cell_series(cell: i64, months: RangeInclusive<Month>, sb: impl Fn(Month) -> u64) -> Vec<PanelObservation> {
        months
            .map(|m| PanelObservation {
                cell_id: cell,
                country_id: 1,
                month: m,
                sb_fatalities: sb(m),
                os_fatalities: 0,
                ns_fatalities: 0,
                lon: 0.0,
                lat: 0.0,
                covariates: vec![Some(m as f64 / 2.0)],
            })
            .collect()
    }

    #[test]
    fn covariate_carried_from_source_month() {
        let panel = Panel::new(vec!["x".into()], cell_series(1, 0..=12, |_| 0)).unwrap();
        let lagged = lag_covariates(&panel, 2, &spec()).unwrap();
        let x = lagged.feature_index("x").unwrap();
        let row = lagged.rows.iter().find(|r| r.month == 12).unwrap();
        assert_eq!(row.features[x], 5.0);
        assert_eq!(row.source_month, 10);
        assert_eq!(lagged.len(), 11);
    }

    #[test]
    fn lag_beyond_span_gives_empty_with_warning() {
        let panel = Panel::new(vec!["x".into()], cell_series(1, 0..=2, |_| 0)).unwrap();
        let lagged = lag_covariates(&panel, 7, &spec()).unwrap();
        assert!(lagged.is_empty());
        assert_eq!(lagged.warnings.len(), 1);
    }

    /// Scans the raw event history directly.
    fn brute_months_since(events: &[(Month, u64)], at: Month) -> f64 {
        let first = events.iter().map(|e| e.0).min().unwrap();
        let last = events
            .iter()
            .filter(|(m, c)| *m <= at && *c > 0)
            .map(|e| e.0)
            .max();
        let gap = last.map_or(at - first + 1, |e| at - e);
        (gap as f64 + 1.0).ln()
    }

    #[test]
    fn months_since_matches_event_scan() {
        let sb = |m: Month| u64::from(m == 8 || m == 3);
        let panel = Panel::new(vec!["x".into()], cell_series(1, 0..=20, sb)).unwrap();
        let lagged = lag_covariates(&panel, 2, &spec()).unwrap();
        let idx = lagged.feature_index("sb_since").unwrap();
        let events: Vec<_> = (0..=20).map(|m| (m, sb(m))).collect();
        for r in &lagged.rows {
            assert!((r.features[idx] - brute_months_since(&events, r.source_month)).abs() < 1e-14);
        }
        let row12 = lagged.rows.iter().find(|r| r.month == 12).unwrap();
        assert!((row12.features[idx] - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn country_features_aggregate_cells() {
        let mut rows = cell_series(1, 0..=5, |m| u64::from(m == 1));
        rows.extend(cell_series(2, 0..=5, |m| 3 * u64::from(m == 1)));
        let panel = Panel::new(vec!["x".into()], rows).unwrap();
        let lagged = lag_covariates(&panel, 2, &spec()).unwrap();
        let cm = lagged.country_feature_index("sb_count").unwrap();
        let cell = lagged.feature_index("sb_count").unwrap();
        let r = lagged.rows.iter().find(|r| r.cell_id == 1 && r.month == 3).unwrap();
        assert_eq!(r.features[cell], 1.0);
        assert_eq!(r.features[cm], 4.0);
        assert_eq!(r.sb_source, 1);
    }

    #[test]
    fn periodisation_table() {
        let p = Periodisation::new(100, 2, 0).unwrap();
        assert_eq!(p.pre_train, (0, 97));
        assert_eq!(p.calibration, 98);
        assert_eq!(p.train, (0, 98));
        assert_eq!(p.test, 100);
        let p7 = Periodisation::new(100, 7, 0).unwrap();
        assert_eq!((p7.calibration, p7.test), (93, 100));
        assert!(Periodisation::new(2, 2, 0).is_err());
        assert!(Periodisation::new(3, 2, 0).is_ok());
    }

    #[test]
    fn split_parts_are_consistent() {
        let panel = Panel::new(vec!["x".into()], cell_series(1, 0..=30, |_| 0)).unwrap();
        let lagged = lag_covariates(&panel, 3, &spec()).unwrap();
        let split = split_periodisation(&lagged.filter(|r| r.month <= 30), 30).unwrap();
        assert_eq!(split.calibration.months(), vec![27]);
        assert_eq!(split.test.months(), vec![30]);
        let mut joined = split.pre_train.months();
        joined.extend(split.calibration.months());
        assert_eq!(joined, split.train.months());
        assert!(split.pre_train.months().iter().all(|&m| m < 27));
        assert!(check_no_leakage(&split.test.rows, 27).is_ok());
        assert!(check_no_leakage(&split.test.rows, 26).is_err());
    }

    #[test]
    fn forecast_rows_target_future_months() {
        let panel = Panel::new(vec!["x".into()], cell_series(1, 0..=10, |_| 0)).unwrap();
        let rows = lag_for_forecast(&panel, 4, &spec()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows.rows[0].month, 14);
        assert_eq!(rows.rows[0].source_month, 10);
        assert!(!rows.rows[0].observed);
    }

    #[test]
    fn arms_imports() {
        let zeros: BTreeMap<i32, f64> = (1990..=2000).map(|y| (y, 0.0)).collect();
        assert_eq!(aggregate_arms_imports(&zeros, 2000).unwrap(), (0.0, 0.0));

        let e = std::f64::consts::E;
        let mut m = zeros.clone();
        m.insert(2000, 1.0);
        m.insert(1999, e - 2.0);
        let (st, lt) = aggregate_arms_imports(&m, 2000).unwrap();
        assert!((st - 1.0).abs() < 1e-15);
        assert_eq!(lt, 0.0);

        let ones: BTreeMap<i32, f64> = (1990..=2000).map(|y| (y, 1.0)).collect();
        // hand count: st covers 2 years, lt covers 1990..=1998, 9 years
        let (st, lt) = aggregate_arms_imports(&ones, 2000).unwrap();
        assert!((st - 3f64.ln()).abs() < 1e-15);
        assert!((lt - 10f64.ln()).abs() < 1e-15);

        assert!(matches!(
            aggregate_arms_imports(&ones, 2001),
            Err(PanelError::ImportsIncomplete(v)) if v == vec![2001]
        ));
    }

    #[test]
    fn monthly_imports_constant_within_year() {
        let ones: BTreeMap<i32, f64> = (1990..=2001).map(|y| (y, 1.0)).collect();
        let months = monthly_arms_imports(&ones, 120..=131);
        assert!(months.iter().all(|(_, v)| *v == months[0].1));
        assert!(months[0].1.is_some());
        assert!(monthly_arms_imports(&ones, 0..=0)[0].1.is_none());
    }
}
