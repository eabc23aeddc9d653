//! Thresholded sparse predictions and calibration of the two hurdles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hurdle::StagePredictions;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("negative value {value} at position {index}")]
    Negative { index: usize, value: f64 },

    #[error("calibration month has no rows")]
    Empty,

    #[error("invalid differential-evolution settings: {0}")]
    Config(String),

    #[error("hurdles file: {0}")]
    Format(String),
}

/// `0` where `pi1 < tau1` or `pi2 < tau2`, otherwise `lambda3`. A probability
/// equal to its threshold passes.
pub fn apply_thresholds(preds: &StagePredictions, tau1: f64, tau2: f64) -> Vec<f64> {
    preds
        .rows
        .iter()
        .map(|p| if p.pi1 < tau1 || p.pi2 < tau2 { 0.0 } else { p.lambda3 })
        .collect()
}

fn check_nonnegative(v: &[f64]) -> Result<(), CalibrationError> {
    match v.iter().position(|x| !(*x >= 0.0)) {
        Some(index) => Err(CalibrationError::Negative { index, value: v[index] }),
        None => Ok(()),
    }
}

/// `|sum ln(1 + yhat) - sum ln(1 + y)|`.
pub fn calibration_loss(yhat: &[f64], y: &[f64]) -> Result<f64, CalibrationError> {
    if yhat.len() != y.len() {
        return Err(CalibrationError::LengthMismatch(yhat.len(), y.len()));
    }
    check_nonnegative(yhat)?;
    check_nonnegative(y)?;
    let a: f64 = yhat.iter().map(|v| v.ln_1p()).sum();
    let b: f64 = y.iter().map(|v| v.ln_1p()).sum();
    Ok((a - b).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DEConfig {
    pub population: usize,
    pub generations: usize,
    /// Differential weight `F`.
    pub weight: f64,
    /// Crossover probability `CR`.
    pub crossover: f64,
    pub seed: u64,
    /// Stop once the best loss has not improved for this many generations.
    pub stall_generations: usize,
}

impl Default for DEConfig {
    fn default() -> Self {
        Self {
            population: 40,
            generations: 200,
            weight: 0.8,
            crossover: 0.9,
            seed: 0,
            stall_generations: 30,
        }
    }
}

impl DEConfig {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if self.population < 4 {
            return Err(CalibrationError::Config(format!(
                "population {} is below 4",
                self.population
            )));
        }
        if !(self.weight > 0.0 && self.weight < 2.0) {
            return Err(CalibrationError::Config(format!("F = {} outside (0, 2)", self.weight)));
        }
        if !(0.0..=1.0).contains(&self.crossover) {
            return Err(CalibrationError::Config(format!("CR = {} outside [0, 1]", self.crossover)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DEResult {
    pub best: Vec<f64>,
    pub loss: f64,
    pub generations: usize,
    /// Every member of every generation stayed within bounds.
    pub in_bounds: bool,
}

fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    let mut x = v;
    // a few reflections cover any overshoot with F < 2
    for _ in 0..4 {
        if x < lo {
            x = lo + (lo - x);
        } else if x > hi {
            x = hi - (x - hi);
        } else {
            return x;
        }
    }
    x.clamp(lo, hi)
}

/// DE/rand/1/bin over the box `bounds`. Trial vectors are generated
/// sequentially from one seeded stream and evaluated in parallel; selection
/// is greedy, keeping the trial on ties so the population can cross plateaus.
pub fn differential_evolution<F>(objective: F, bounds: &[(f64, f64)], cfg: &DEConfig) -> Result<DEResult, CalibrationError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    cfg.validate()?;
    let d = bounds.len();
    let np = cfg.population;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pop: Vec<Vec<f64>> = (0..np)
        .map(|_| bounds.iter().map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>()).collect())
        .collect();
    let mut losses: Vec<f64> = pop.par_iter().map(|x| objective(x)).collect();
    let first_best = |losses: &[f64]| {
        let mut b = 0;
        for (i, &l) in losses.iter().enumerate() {
            if l < losses[b] {
                b = i;
            }
        }
        b
    };
    let mut best = first_best(&losses);
    let mut best_loss = losses[best];
    let mut best_x = pop[best].clone();
    let mut stall = 0;
    let mut in_bounds = true;
    let mut generation = 0;
    while generation < cfg.generations && stall < cfg.stall_generations {
        generation += 1;
        let trials: Vec<Vec<f64>> = (0..np)
            .map(|i| {
                let pick = |rng: &mut ChaCha8Rng, taken: &[usize]| loop {
                    let k = rng.random_range(0..np);
                    if !taken.contains(&k) {
                        return k;
                    }
                };
                let a = pick(&mut rng, &[i]);
                let b = pick(&mut rng, &[i, a]);
                let c = pick(&mut rng, &[i, a, b]);
                let jrand = rng.random_range(0..d);
                (0..d)
                    .map(|j| {
                        let cross = rng.random::<f64>() < cfg.crossover || j == jrand;
                        if cross {
                            let v = pop[a][j] + cfg.weight * (pop[b][j] - pop[c][j]);
                            reflect(v, bounds[j].0, bounds[j].1)
                        } else {
                            pop[i][j]
                        }
                    })
                    .collect()
            })
            .collect();
        let trial_losses: Vec<f64> = trials.par_iter().map(|x| objective(x)).collect();
        for (i, (trial, loss)) in trials.into_iter().zip(trial_losses).enumerate() {
            in_bounds &= trial.iter().zip(bounds).all(|(v, &(lo, hi))| *v >= lo && *v <= hi);
            if loss <= losses[i] {
                pop[i] = trial;
                losses[i] = loss;
            }
        }
        best = first_best(&losses);
        if losses[best] < best_loss {
            best_loss = losses[best];
            best_x = pop[best].clone();
            stall = 0;
        } else {
            stall += 1;
        }
    }
    Ok(DEResult {
        best: best_x,
        loss: best_loss,
        generations: generation,
        in_bounds,
    })
}

/// Calibrated thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hurdles {
    pub tau1: f64,
    pub tau2: f64,
    pub achieved_loss: f64,
}

impl Hurdles {
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("plain struct serializes")
    }

    pub fn from_toml_str(s: &str) -> Result<Self, CalibrationError> {
        let h: Hurdles = toml::from_str(s).map_err(|e| CalibrationError::Format(e.to_string()))?;
        for t in [h.tau1, h.tau2] {
            if !(0.0..=1.0).contains(&t) {
                return Err(CalibrationError::Format(format!("threshold {t} outside [0, 1]")));
            }
        }
        Ok(h)
    }
}

/// Calibration loss of thresholding fixed predictions, with the per-row
/// terms precomputed.
struct ThresholdLoss<'a> {
    preds: &'a StagePredictions,
    gain: Vec<f64>,
    target: f64,
}

impl ThresholdLoss<'_> {
    fn eval(&self, tau1: f64, tau2: f64) -> f64 {
        let total: f64 = self
            .preds
            .rows
            .iter()
            .zip(&self.gain)
            .filter(|(p, _)| !(p.pi1 < tau1 || p.pi2 < tau2))
            .map(|(_, g)| g)
            .sum();
        (total - self.target).abs()
    }

    /// Exact minimum over every pair of levels: for each `tau1`, one walk
    /// down the rows in decreasing `pi2` gives the loss at every `tau2`.
    /// Ties keep the smallest `tau1`, then the largest `tau2`.
    fn profile(&self, l1: &[f64]) -> Hurdles {
        let rows = &self.preds.rows;
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&a, &b| rows[b].pi2.total_cmp(&rows[a].pi2));
        let mut best = Hurdles {
            tau1: 1.0,
            tau2: 1.0,
            achieved_loss: f64::INFINITY,
        };
        for &tau1 in l1 {
            let mut consider = |tau2: f64, total: f64| {
                let l = (total - self.target).abs();
                if l < best.achieved_loss {
                    best = Hurdles {
                        tau1,
                        tau2,
                        achieved_loss: l,
                    };
                }
            };
            // tau2 = 1 passes only rows at exactly 1
            if rows[order[0]].pi2 < 1.0 {
                consider(1.0, 0.0);
            }
            let mut total = 0.0;
            for (k, &i) in order.iter().enumerate() {
                if rows[i].pi1 >= tau1 {
                    total += self.gain[i];
                }
                let v = rows[i].pi2;
                if order.get(k + 1).is_some_and(|&j| rows[j].pi2 == v) {
                    continue;
                }
                consider(v, total);
            }
        }
        best
    }
}

/// Distinct values a threshold can usefully take: each predicted probability
/// (rows at or above it pass) and 1.
fn levels(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.chain([1.0]).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Threshold at rank position `u` in `[0, 1]`.
fn level_at(levels: &[f64], u: f64) -> f64 {
    let k = (u * levels.len() as f64) as usize;
    levels[k.min(levels.len() - 1)]
}

/// Chooses `(tau1, tau2)` minimising the calibration loss on one month.
/// Differential evolution searches `[0, 1]^2` in rank coordinates, where
/// `u` selects the `u`-quantile of the distinct predicted probabilities, so
/// every plateau of the piecewise-constant loss is equally wide. An exact
/// search over the stage-1 levels then replaces the DE answer if it finds a
/// lower loss: DE alone misses narrow optima, and stage-1 probabilities are
/// shared per country-month, so the levels are few.
pub fn calibrate(preds: &StagePredictions, y: &[f64], cfg: &DEConfig) -> Result<Hurdles, CalibrationError> {
    if preds.is_empty() {
        return Err(CalibrationError::Empty);
    }
    if preds.len() != y.len() {
        return Err(CalibrationError::LengthMismatch(preds.len(), y.len()));
    }
    check_nonnegative(y)?;
    let loss = ThresholdLoss {
        preds,
        gain: preds.rows.iter().map(|p| p.lambda3.ln_1p()).collect(),
        target: y.iter().map(|v| v.ln_1p()).sum(),
    };
    let l1 = levels(preds.rows.iter().map(|p| p.pi1));
    let l2 = levels(preds.rows.iter().map(|p| p.pi2));
    let tau = |u: &[f64]| (level_at(&l1, u[0]), level_at(&l2, u[1]));
    let de = differential_evolution(
        |u| {
            let (t1, t2) = tau(u);
            loss.eval(t1, t2)
        },
        &[(0.0, 1.0), (0.0, 1.0)],
        cfg,
    )?;
    let (tau1, tau2) = tau(&de.best);
    let exact = loss.profile(&l1);
    if exact.achieved_loss < de.loss {
        // report the loss as summed in row order, like the DE evaluations
        return Ok(Hurdles {
            achieved_loss: loss.eval(exact.tau1, exact.tau2),
            ..exact
        });
    }
    Ok(Hurdles {
        tau1,
        tau2,
        achieved_loss: de.loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hurdle::StagePrediction;
    use proptest::prelude::*;

    fn preds(rows: &[(f64, f64, f64)]) -> StagePredictions {
        StagePredictions {
            rows: rows
                .iter()
                .enumerate()
                .map(|(i, &(pi1, pi2, lambda3))| StagePrediction {
                    cell_id: i as i64,
                    country_id: 1,
                    month: 0,
                    pi1,
                    pi2,
                    lambda3,
                })
                .collect(),
        }
    }

    #[test]
    fn threshold_rule() {
        let p = preds(&[(0.6, 0.3, 2.5), (0.2, 0.9, 4.0)]);
        assert_eq!(apply_thresholds(&p, 0.0, 0.0), vec![2.5, 4.0]);
        assert_eq!(apply_thresholds(&p, 1.0, 0.0), vec![0.0, 0.0]);
        assert_eq!(apply_thresholds(&p, 0.563, 0.263), vec![2.5, 0.0]);
        assert_eq!(apply_thresholds(&p, 0.563, 0.31), vec![0.0, 0.0]);
        // equality passes the gate
        assert_eq!(apply_thresholds(&p, 0.6, 0.3), vec![2.5, 0.0]);
    }

    #[test]
    fn loss_cases() {
        let e = std::f64::consts::E;
        assert_eq!(calibration_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(calibration_loss(&[e - 1.0, 0.0], &[0.0, e - 1.0]).unwrap().abs() < 1e-15);
        let l = calibration_loss(&[0.0, 0.0], &[1.0, 3.0]).unwrap();
        assert!((l - 8f64.ln()).abs() < 1e-15);
        assert!(matches!(
            calibration_loss(&[-1.0], &[0.0]),
            Err(CalibrationError::Negative { index: 0, .. })
        ));
        assert!(calibration_loss(&[0.0], &[]).is_err());
    }

    #[test]
    fn de_finds_quadratic_minimum() {
        let f = |x: &[f64]| (x[0] - 0.3).powi(2) + (x[1] - 0.7).powi(2);
        let r = differential_evolution(f, &[(0.0, 1.0), (0.0, 1.0)], &DEConfig::default()).unwrap();
        assert!((r.best[0] - 0.3).abs() < 1e-4 && (r.best[1] - 0.7).abs() < 1e-4, "{:?}", r.best);
        assert!(r.in_bounds);
    }

    #[test]
    fn de_is_reproducible_and_seed_sensitive() {
        let f = |x: &[f64]| (x[0] * 7.0).sin() + (x[1] * 3.0).cos();
        let b = [(0.0, 1.0), (0.0, 1.0)];
        let a = differential_evolution(f, &b, &DEConfig::default()).unwrap();
        let a2 = differential_evolution(f, &b, &DEConfig::default()).unwrap();
        assert_eq!(a, a2);
        let cfg = DEConfig {
            generations: 1,
            seed: 99,
            ..DEConfig::default()
        };
        let c = differential_evolution(f, &b, &cfg).unwrap();
        assert_ne!(c.best, a.best);
    }

    #[test]
    fn config_is_validated() {
        let f = |_: &[f64]| 0.0;
        for cfg in [
            DEConfig { population: 3, ..DEConfig::default() },
            DEConfig { weight: 2.0, ..DEConfig::default() },
            DEConfig { crossover: 1.5, ..DEConfig::default() },
        ] {
            assert!(matches!(
                differential_evolution(f, &[(0.0, 1.0)], &cfg),
                Err(CalibrationError::Config(_))
            ));
        }
    }

    #[test]
    fn all_zero_month_closes_gates() {
        let p = preds(&[(0.4, 0.5, 2.0), (0.7, 0.2, 1.0), (0.55, 0.9, 3.0)]);
        let h = calibrate(&p, &[0.0, 0.0, 0.0], &DEConfig::default()).unwrap();
        assert_eq!(h.achieved_loss, 0.0);
        assert!(apply_thresholds(&p, h.tau1, h.tau2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_month_is_an_error() {
        assert_eq!(
            calibrate(&StagePredictions::default(), &[], &DEConfig::default()),
            Err(CalibrationError::Empty)
        );
    }

    #[test]
    fn hurdles_toml_round_trip() {
        let h = Hurdles {
            tau1: 0.563,
            tau2: 0.263,
            achieved_loss: 0.125,
        };
        assert_eq!(Hurdles::from_toml_str(&h.to_toml_string()).unwrap(), h);
        assert!(Hurdles::from_toml_str("tau1 = 1.5\ntau2 = 0.1\nachieved_loss = 0.0").is_err());
    }

    #[test]
    fn reflection_stays_inside() {
        assert_eq!(reflect(-0.25, 0.0, 1.0), 0.25);
        assert_eq!(reflect(1.5, 0.0, 1.0), 0.5);
        assert_eq!(reflect(0.3, 0.0, 1.0), 0.3);
        let r = reflect(-5.0, 0.0, 1.0);
        assert!((0.0..=1.0).contains(&r));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        // one pi1 per country from a narrow band, as in a real calibration month
        #[test]
        fn calibration_reaches_the_breakpoint_minimum(
            country_pi1 in prop::collection::vec(0.02f64..0.15, 20),
            cells in prop::collection::vec((0.0f64..1.0, 0.2f64..6.0, 0u8..20), 200),
            seed in 0u64..1000,
        ) {
            let rows: Vec<(f64, f64, f64)> = cells
                .iter()
                .enumerate()
                .map(|(i, &(pi2, lambda, _))| (country_pi1[i / 10], pi2, lambda))
                .collect();
            let y: Vec<f64> = cells.iter().map(|&(_, _, y)| if y < 18 { 0.0 } else { f64::from(y) }).collect();
            let p = preds(&rows);
            let h = calibrate(&p, &y, &DEConfig { seed, ..DEConfig::default() }).unwrap();
            let loss = |t1: f64, t2: f64| calibration_loss(&apply_thresholds(&p, t1, t2), &y).unwrap();
            prop_assert!((loss(h.tau1, h.tau2) - h.achieved_loss).abs() < 1e-9);
            let l1 = levels(rows.iter().map(|r| r.0));
            let l2 = levels(rows.iter().map(|r| r.1));
            let exact = l1
                .iter()
                .flat_map(|&a| l2.iter().map(move |&b| (a, b)))
                .map(|(a, b)| loss(a, b))
                .fold(f64::INFINITY, f64::min);
            prop_assert!(h.achieved_loss <= exact + 1e-9, "calibrated {} exact {}", h.achieved_loss, exact);
        }
    }
}

