use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use hurdlecast_core::calibration::{DEConfig, Hurdles};
use hurdlecast_core::eval::{
    calibrate_on_month, forecast_domain, forecast_with_model, read_scores, render_report, run_evaluation,
    run_forecast, write_predictions, write_scores, EvalConfig, PredictionRow, TaddaConfig,
};
use hurdlecast_core::hurdle::{fit_hurdle_with_domain, load_model, load_model_for_spec, save_model, HurdleModel, HurdleOptions};
use hurdlecast_core::panel::{load_panel, simulate_panel, write_panel, ModelSpec, Month, Panel, SimConfig};

use crate::DeArgs;

const MODEL_FILE: &str = "model.hcm";
const HURDLES_FILE: &str = "hurdles.toml";

fn load_spec(path: Option<&Path>) -> Result<ModelSpec> {
    match path {
        Some(p) => ModelSpec::load(p).with_context(|| format!("reading spec {}", p.display())),
        None => Ok(ModelSpec::default_conflict()),
    }
}

/// The input file is the whole information set: missing covariates are
/// filled from the records it holds.
fn load_input(path: &Path, spec: &ModelSpec) -> Result<Panel> {
    let panel = load_panel(path, spec).with_context(|| format!("reading panel {}", path.display()))?;
    Ok(panel.impute_missing()?)
}

fn last_month(panel: &Panel) -> Result<Month> {
    match panel.month_range() {
        Some((_, last)) => Ok(last),
        None => bail!("the panel has no rows"),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn de_config(de: &DeArgs, seed: u64) -> DEConfig {
    DEConfig {
        population: de.de_pop,
        generations: de.de_gens,
        seed,
        ..DEConfig::default()
    }
}

/// A missing upstream artifact is a runtime failure that names the step to run first.
fn upstream(path: Option<PathBuf>, out: &Path, default: &str, step: &str) -> Result<PathBuf> {
    let path = path.unwrap_or_else(|| out.join(default));
    if !path.is_file() {
        bail!("{} not found; run `hurdlecast {step}` first", path.display());
    }
    Ok(path)
}

fn read_model(path: &Path, spec: Option<&Path>) -> Result<HurdleModel> {
    let model = match spec {
        Some(s) => load_model_for_spec(path, &load_spec(Some(s))?),
        None => load_model(path),
    };
    model.with_context(|| format!("reading model {}", path.display()))
}

#[derive(Serialize)]
struct Truth<'a> {
    country_effects: &'a [f64],
    config: &'a SimConfig,
}

pub fn simulate(countries: usize, cells: usize, months: usize, seed: u64, lag: u32, out: &Path) -> Result<()> {
    let config = SimConfig {
        n_countries: countries,
        cells_per_country: cells,
        n_months: months,
        seed,
        lag,
        ..SimConfig::default()
    };
    let sim = simulate_panel(&config)?;
    create_dir(out)?;
    write_panel(&sim.panel, create(&out.join("panel.csv"))?)?;
    let truth = Truth {
        country_effects: &sim.country_effects,
        config: &sim.config,
    };
    write_text(&out.join("truth.toml"), &toml::to_string(&truth)?)?;
    log::info!("wrote {} rows to {}", sim.panel.len(), out.display());
    Ok(())
}

pub fn fit(input: &Path, spec: Option<&Path>, lag: u32, through: Option<Month>, seed: Option<u64>, out: &Path) -> Result<()> {
    let spec = load_spec(spec)?;
    let panel = load_input(input, &spec)?;
    let through = match through {
        Some(t) => t,
        None => last_month(&panel)?,
    };
    // knots span every row a later calibrate or forecast may predict
    let domain = forecast_domain(&panel, lag, &spec)?;
    let train = domain.filter(|r| r.month <= through && r.observed);
    let opts = HurdleOptions {
        seed,
        ..HurdleOptions::default()
    };
    let model = fit_hurdle_with_domain(&train, Some(&domain), &spec, &opts)?;
    create_dir(out)?;
    save_model(&model, &out.join(MODEL_FILE))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn calibrate(
    input: &Path,
    model: Option<PathBuf>,
    spec: Option<&Path>,
    seed: u64,
    month: Option<Month>,
    de: &DeArgs,
    out: &Path,
) -> Result<()> {
    let model_path = upstream(model, out, MODEL_FILE, "fit")?;
    let model = read_model(&model_path, spec)?;
    let panel = load_input(input, &model.spec)?;
    let (_, trained_through) = model.meta.train_months;
    let month = month.unwrap_or(trained_through + 1);
    if month <= trained_through {
        log::warn!("calibrating on month {month}, inside the training months");
    }
    let hurdles = calibrate_on_month(&model, &panel, month, &de_config(de, seed))?;
    create_dir(out)?;
    write_text(&out.join(HURDLES_FILE), &hurdles.to_toml_string())?;
    Ok(())
}

fn forecast_file(out: &Path, s: u32, rows: &[PredictionRow]) -> Result<()> {
    write_predictions(create(&out.join(format!("forecast_s{s}.csv")))?, rows)?;
    Ok(())
}

pub fn forecast(input: &Path, spec: Option<&Path>, model: Option<PathBuf>, hurdles: Option<PathBuf>, out: &Path) -> Result<()> {
    let model_path = upstream(model, out, MODEL_FILE, "fit")?;
    let hurdles_path = upstream(hurdles, out, HURDLES_FILE, "calibrate")?;
    let mut model = read_model(&model_path, spec)?;
    let text = fs::read_to_string(&hurdles_path).with_context(|| format!("reading {}", hurdles_path.display()))?;
    let hurdles = Hurdles::from_toml_str(&text)?;
    model.set_thresholds(hurdles.tau1, hurdles.tau2)?;
    let panel = load_input(input, &model.spec)?;
    let rows = forecast_with_model(&model, &panel)?;
    create_dir(out)?;
    forecast_file(out, model.lag, &rows)
}

pub fn forecast_all(
    input: &Path,
    spec: Option<&Path>,
    steps: &[u32],
    seed: u64,
    de: &DeArgs,
    parallel: usize,
    out: &Path,
) -> Result<()> {
    let spec = load_spec(spec)?;
    let panel = load_input(input, &spec)?;
    let cfg = EvalConfig {
        de: de_config(de, seed),
        threads: parallel,
        ..EvalConfig::default()
    };
    let forecasts = run_forecast(&panel, &spec, steps, &cfg)?;
    create_dir(out)?;
    for f in &forecasts {
        forecast_file(out, f.s, &f.rows)?;
        write_text(&out.join(format!("hurdles_s{}.toml", f.s)), &f.hurdles.to_toml_string())?;
    }
    Ok(())
}

pub struct EvaluateArgs {
    pub input: PathBuf,
    pub spec: Option<PathBuf>,
    pub seed: u64,
    pub steps: Vec<u32>,
    pub eval_months: Option<Vec<Month>>,
    pub de: DeArgs,
    pub epsilon: f64,
    pub parallel: usize,
    pub report: bool,
    pub out: PathBuf,
}

/// Everything needed to rerun an evaluation. Timings are left out so that
/// reruns produce identical files.
#[derive(Serialize)]
struct Manifest {
    software_version: &'static str,
    seed: u64,
    input: String,
    input_sha256: String,
    spec_sha256: String,
    steps: Vec<u32>,
    months: Vec<Month>,
    epsilon: f64,
    de: DEConfig,
    pairs: Vec<PairEntry>,
    skipped: Vec<SkippedEntry>,
}

#[derive(Serialize)]
struct PairEntry {
    t: Month,
    s: u32,
    tau1: f64,
    tau2: f64,
    calibration_loss: f64,
}

#[derive(Serialize)]
struct SkippedEntry {
    t: Month,
    s: u32,
    reason: String,
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let spec = load_spec(args.spec.as_deref())?;
    let panel = load_input(&args.input, &spec)?;
    let months = match &args.eval_months {
        Some(m) => m.clone(),
        None => {
            let last = last_month(&panel)?;
            ((last - 5).max(0)..=last).collect()
        }
    };
    let cfg = EvalConfig {
        months: months.clone(),
        steps: args.steps.clone(),
        de: de_config(&args.de, args.seed),
        tadda: TaddaConfig { epsilon: args.epsilon },
        threads: args.parallel,
        ..EvalConfig::default()
    };
    let run = run_evaluation(&panel, &spec, &cfg)?;

    let predictions = args.out.join("predictions");
    create_dir(&predictions)?;
    for r in &run.records {
        write_predictions(create(&predictions.join(format!("t{}_s{}.csv", r.t, r.s)))?, &r.rows)?;
    }
    write_scores(create(&args.out.join("scores.csv"))?, &run.scores)?;
    let manifest = Manifest {
        software_version: env!("CARGO_PKG_VERSION"),
        seed: args.seed,
        input: args.input.display().to_string(),
        input_sha256: sha256_file(&args.input)?,
        spec_sha256: spec.hash(),
        steps: args.steps.clone(),
        months,
        epsilon: args.epsilon,
        de: cfg.de.clone(),
        pairs: run
            .records
            .iter()
            .map(|r| PairEntry {
                t: r.t,
                s: r.s,
                tau1: r.hurdles.tau1,
                tau2: r.hurdles.tau2,
                calibration_loss: r.hurdles.achieved_loss,
            })
            .collect(),
        skipped: run
            .skipped
            .iter()
            .map(|s| SkippedEntry {
                t: s.t,
                s: s.s,
                reason: s.reason.clone(),
            })
            .collect(),
    };
    write_text(&args.out.join("manifest.toml"), &toml::to_string(&manifest)?)?;
    for s in &run.skipped {
        log::warn!("skipped t = {}, s = {}: {}", s.t, s.s, s.reason);
    }
    if args.report {
        let table = render_report(&run.scores, args.epsilon);
        write_text(&args.out.join("report.txt"), &table)?;
        print!("{table}");
    }
    Ok(())
}

pub fn report(input: &Path, epsilon: f64) -> Result<()> {
    let file = File::open(input).with_context(|| format!("opening {}", input.display()))?;
    let scores = read_scores(file)?;
    print!("{}", render_report(&scores, epsilon));
    Ok(())
}
