//! Synthetic panels drawn from the three-stage hurdle model.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, Uniform};
use serde::{Deserialize, Serialize};

use super::{aggregate_arms_imports, Month, Panel, PanelError, PanelObservation, Transform};
use crate::glm::logistic;

/// Raw covariates written by the simulator, in column order.
pub const SIM_COVARIATES: [&str; 11] = [
    "milex",
    "polity",
    "mcw_st",
    "mcw_lt",
    "gdp_country",
    "pop_country",
    "cap_dist",
    "gdp_cell",
    "pop_cell",
    "nightlights",
    "imr",
];

const COUNTRY_LEVEL: [&str; 6] = ["milex", "polity", "mcw_st", "mcw_lt", "gdp_country", "pop_country"];

/// Linear predictor of one stage. Coefficients apply to the transformed
/// covariate (see [`SimConfig::transform`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTruth {
    pub intercept: f64,
    #[serde(default)]
    pub coefficients: BTreeMap<String, f64>,
}

impl StageTruth {
    pub fn intercept_only(intercept: f64) -> Self {
        Self {
            intercept,
            coefficients: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &str, coef: f64) -> Self {
        self.coefficients.insert(name.to_string(), coef);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_countries: usize,
    pub cells_per_country: usize,
    pub n_months: usize,
    pub seed: u64,
    /// Months between the covariates and the target they drive.
    pub lag: u32,
    pub stage1: StageTruth,
    pub stage2: StageTruth,
    pub stage3: StageTruth,
    /// Standard deviation of the stage-1 country random effect.
    pub sigma_country: f64,
    /// AR(1) coefficient of the time-varying covariates.
    pub persistence: f64,
    /// Per-cell monthly probability of a one-sided / non-state event.
    pub other_event_rate: f64,
    /// Added to the stage-1 predictor of a country with state-based
    /// fatalities in the previous month.
    #[serde(default)]
    pub country_memory: f64,
    /// Added to the stage-2 predictor of a cell with state-based fatalities
    /// in the previous month.
    #[serde(default)]
    pub cell_memory: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_countries: 10,
            cells_per_country: 10,
            n_months: 60,
            seed: 1,
            lag: 2,
            stage1: StageTruth::intercept_only(-0.3)
                .with("milex", 0.8)
                .with("polity", -0.6),
            stage2: StageTruth::intercept_only(-1.0)
                .with("milex", 0.4)
                .with("cap_dist", -0.8)
                .with("nightlights", 0.6),
            stage3: StageTruth::intercept_only(1.0)
                .with("cap_dist", -0.4)
                .with("nightlights", 0.3),
            sigma_country: 0.5,
            persistence: 0.9,
            other_event_rate: 0.02,
            country_memory: 0.0,
            cell_memory: 0.0,
        }
    }
}

impl SimConfig {
    /// Transform under which a simulated covariate enters the truth.
    pub fn transform(name: &str) -> Transform {
        match name {
            "milex" | "gdp_country" | "pop_country" | "gdp_cell" | "pop_cell" => Transform::Log,
            _ => Transform::Identity,
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml_str(s: &str) -> Result<Self, PanelError> {
        toml::from_str(s).map_err(|e| PanelError::Simulation(e.to_string()))
    }

    fn validate(&self) -> Result<(), PanelError> {
        let bad = |m: String| Err(PanelError::Simulation(m));
        if self.n_countries == 0 || self.cells_per_country == 0 || self.n_months == 0 {
            return bad("dimensions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.persistence) {
            return bad(format!("persistence {} outside [0, 1)", self.persistence));
        }
        for (stage, truth) in [(1, &self.stage1), (2, &self.stage2), (3, &self.stage3)] {
            for name in truth.coefficients.keys() {
                if !SIM_COVARIATES.contains(&name.as_str()) {
                    return bad(format!("stage {stage} uses unknown covariate `{name}`"));
                }
                if stage == 1 && !COUNTRY_LEVEL.contains(&name.as_str()) {
                    return bad(format!("stage 1 uses cell-level covariate `{name}`"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub panel: Panel,
    pub config: SimConfig,
    /// Drawn stage-1 random effect per country, in country order.
    pub country_effects: Vec<f64>,
}

struct Ar1 {
    rho: f64,
    innovation: f64,
}

impl Ar1 {
    fn path(&self, rng: &mut ChaCha8Rng, n: usize, normal: &Normal<f64>) -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        let mut z = normal.sample(rng);
        for _ in 0..n {
            out.push(z);
            z = self.rho * z + self.innovation * normal.sample(rng);
        }
        out
    }
}

fn sample_zero_truncated_poisson(rng: &mut ChaCha8Rng, lambda: f64) -> u64 {
    if lambda < 0.05 {
        // rejection would waste ~1/lambda draws; invert the truncated pmf
        let norm = -(-lambda).exp_m1();
        let u: f64 = rng.random::<f64>() * norm;
        let mut k = 1u64;
        let mut pmf = lambda * (-lambda).exp();
        let mut cdf = pmf;
        while cdf < u && k < 1000 {
            k += 1;
            pmf *= lambda / k as f64;
            cdf += pmf;
        }
        return k;
    }
    let poisson = Poisson::new(lambda).expect("finite positive rate");
    loop {
        let draw: f64 = poisson.sample(rng);
        if draw >= 1.0 {
            return draw as u64;
        }
    }
}

fn eta(
    truth: &StageTruth,
    values: &BTreeMap<&str, f64>,
    extra: f64,
) -> Result<f64, PanelError> {
    let mut eta = truth.intercept + extra;
    for (name, coef) in &truth.coefficients {
        let raw = values[name.as_str()];
        let x = SimConfig::transform(name).apply(name, raw)?;
        let term = coef * x;
        if !term.is_finite() {
            return Err(PanelError::Simulation(format!(
                "non-finite linear predictor from covariate `{name}` (value {raw})"
            )));
        }
        eta += term;
    }
    if !eta.is_finite() {
        return Err(PanelError::Simulation("non-finite intercept".into()));
    }
    Ok(eta)
}

/// Draws a panel: per country-month a Bernoulli country gate, then per cell a
/// Bernoulli cell gate and a zero-truncated Poisson count. A country-month
/// whose gate opens but whose cells all come out zero is redrawn, since that
/// combination has probability zero under the joint model.
pub fn simulate_panel(config: &SimConfig) -> Result<Simulation, PanelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let ar = Ar1 {
        rho: config.persistence,
        innovation: (1.0 - config.persistence * config.persistence).sqrt(),
    };
    let n_months = config.n_months;
    let n_cells = config.cells_per_country;
    let side = (n_cells as f64).sqrt().ceil() as usize;
    let country_side = (config.n_countries as f64).sqrt().ceil() as usize;
    let years_before = 11;
    let n_years = n_months.div_ceil(12) + years_before;
    let tiv = Uniform::new(0.0, 400.0).expect("range");

    let mut rows = Vec::with_capacity(config.n_countries * n_cells * n_months);
    let mut country_effects = Vec::with_capacity(config.n_countries);
    for j in 0..config.n_countries {
        let country_id = j as i64 + 1;
        let u_j = config.sigma_country * normal.sample(&mut rng);
        country_effects.push(u_j);
        let milex = ar.path(&mut rng, n_months, &normal);
        let polity = ar.path(&mut rng, n_months, &normal);
        let gdp = ar.path(&mut rng, n_months, &normal);
        let pop = ar.path(&mut rng, n_months, &normal);
        let yearly: BTreeMap<i32, f64> = (0..n_years)
            .map(|k| {
                let year = 1990 - years_before as i32 + k as i32;
                let value = if rng.random::<f64>() < 0.5 { 0.0 } else { tiv.sample(&mut rng) };
                (year, value)
            })
            .collect();

        struct Cell {
            cap_dist: f64,
            nightlights: Vec<f64>,
            gdp: Vec<f64>,
            pop: Vec<f64>,
            imr: Vec<f64>,
        }
        // the first cell holds the capital
        let cells: Vec<Cell> = (0..n_cells)
            .map(|i| Cell {
                cap_dist: {
                    let u: f64 = rng.random();
                    if i == 0 {
                        0.0
                    } else {
                        2.0 * u
                    }
                },
                nightlights: ar.path(&mut rng, n_months, &normal),
                gdp: ar.path(&mut rng, n_months, &normal),
                pop: ar.path(&mut rng, n_months, &normal),
                imr: ar.path(&mut rng, n_months, &normal),
            })
            .collect();

        let covariates_at = |m: usize, c: &Cell| -> BTreeMap<&'static str, f64> {
            let year = 1990 + (m / 12) as i32;
            let (st, lt) = aggregate_arms_imports(&yearly, year).expect("window generated");
            BTreeMap::from([
                ("milex", milex[m].exp()),
                ("polity", polity[m]),
                ("mcw_st", st),
                ("mcw_lt", lt),
                ("gdp_country", (gdp[m] + 8.0).exp()),
                ("pop_country", (pop[m] + 15.0).exp()),
                ("cap_dist", c.cap_dist),
                ("gdp_cell", (c.gdp[m] + 6.0).exp()),
                ("pop_cell", (c.pop[m] + 10.0).exp()),
                ("nightlights", c.nightlights[m]),
                ("imr", c.imr[m]),
            ])
        };

        let base_lon = 5.0 * (j % country_side) as f64;
        let base_lat = 5.0 * (j / country_side) as f64;
        let mut previous = vec![0u64; n_cells];
        for m in 0..n_months {
            let source = m.saturating_sub(config.lag as usize);
            let cm_values = covariates_at(source, &cells[0]);
            let was_active = previous.iter().any(|&c| c > 0);
            let memory = if was_active { config.country_memory } else { 0.0 };
            let pi1 = logistic(eta(&config.stage1, &cm_values, u_j + memory)?);
            let cell_values: Vec<_> = cells.iter().map(|c| covariates_at(source, c)).collect();
            let mut pi2 = Vec::with_capacity(n_cells);
            let mut lambda = Vec::with_capacity(n_cells);
            for (v, &before) in cell_values.iter().zip(&previous) {
                let memory = if before > 0 { config.cell_memory } else { 0.0 };
                pi2.push(logistic(eta(&config.stage2, v, memory)?));
                lambda.push(eta(&config.stage3, v, 0.0)?.exp());
            }
            let country_gate = rng.random::<f64>() < pi1;
            let mut counts = vec![0u64; n_cells];
            if country_gate {
                let mut attempts = 0;
                loop {
                    for i in 0..n_cells {
                        counts[i] = if rng.random::<f64>() < pi2[i] {
                            sample_zero_truncated_poisson(&mut rng, lambda[i])
                        } else {
                            0
                        };
                    }
                    if counts.iter().any(|&c| c > 0) {
                        break;
                    }
                    attempts += 1;
                    if attempts >= 10_000 {
                        return Err(PanelError::Simulation(format!(
                            "country {country_id} month {m}: no positive cell after 10000 redraws"
                        )));
                    }
                }
            }
            for (i, cell) in cells.iter().enumerate() {
                let mut other = [0u64; 2];
                for o in &mut other {
                    if rng.random::<f64>() < config.other_event_rate {
                        *o = sample_zero_truncated_poisson(&mut rng, 2.0);
                    }
                }
                let values = covariates_at(m, cell);
                rows.push(PanelObservation {
                    cell_id: (j * n_cells + i) as i64 + 1,
                    country_id,
                    month: m as Month,
                    sb_fatalities: counts[i],
                    os_fatalities: other[0],
                    ns_fatalities: other[1],
                    lon: base_lon + 0.5 * (i % side) as f64,
                    lat: base_lat + 0.5 * (i / side) as f64,
                    covariates: SIM_COVARIATES.iter().map(|n| Some(values[n])).collect(),
                });
            }
            previous = counts;
        }
    }
    let panel = Panel::new(SIM_COVARIATES.iter().map(|s| s.to_string()).collect(), rows)?;
    Ok(Simulation {
        panel,
        config: config.clone(),
        country_effects,
    })
}
