//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ion_calib::arma::ArmaSpec;
use ion_calib::datagen::{gaussian_noise, generate_synthetic_trace};
use ion_calib::eval::{
    decompose_prediction, posterior_predictive_score, relative_score_table, rmse, ScoreTable, FITC_FOOTNOTE,
};
use ion_calib::gp::{GpInputMode, GpMethod, KernelFamily, TrainedGp};
use ion_calib::inference::{
    default_priors, gp_inputs, rhat as split_rhat_all, CalibrationProblem, CmaesSettings, Discrepancy,
    DiscrepancyParams, McmcSettings, PriorOptions,
};
use ion_calib::model::steady_state;
use ion_calib::predict::{posterior_predictive, select_draws, ArmaMode, DEFAULT_PREDICTIVE_DRAWS};
use ion_calib::simulate::simulate_open_series;
use ion_calib::{ModelSpec, ParameterVector, Trace, TraceKind, VoltageProtocol};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bundle::{self, load_chains, Bundle, FitRecord};
use crate::config::{load_config, require, resolve, Manifest};
use crate::{
    ArmaHistory, EvaluateArgs, FitArgs, GenerateArgs, GpSolver, Kernel, PredictArgs, RhatArgs, SampleArgs, Variant,
};

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_protocol(path: &Path) -> Result<VoltageProtocol> {
    require("protocol", path)?;
    VoltageProtocol::load(path).with_context(|| format!("reading protocol {}", path.display()))
}

fn load_model(path: &Path) -> Result<ModelSpec> {
    require("model", path)?;
    ModelSpec::load(path).with_context(|| format!("reading model {}", path.display()))
}

fn load_params(path: &Path) -> Result<ParameterVector> {
    require("parameters", path)?;
    ParameterVector::load(path).with_context(|| format!("reading parameters {}", path.display()))
}

fn load_trace(path: &Path) -> Result<Trace> {
    require("data", path)?;
    Trace::load(path).with_context(|| format!("reading trace {}", path.display()))
}

fn kernel_family(k: Kernel) -> KernelFamily {
    match k {
        Kernel::Rbf => KernelFamily::Rbf,
        Kernel::Ou => KernelFamily::Ou,
        Kernel::Matern32 => KernelFamily::Matern32,
    }
}

fn arma_mode(m: ArmaHistory) -> ArmaMode {
    match m {
        ArmaHistory::ZeroMean => ArmaMode::ZeroMean,
        ArmaHistory::Conditioned => ArmaMode::Conditioned,
    }
}

fn variant_label(v: Variant) -> &'static str {
    match v {
        Variant::Iid => "iid",
        Variant::GpT => "gp-t",
        Variant::GpOv => "gp-ov",
        Variant::Arma => "arma",
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateSettings {
    sigma: f64,
    seed: u64,
    dt: f64,
    holding_voltage: Option<f64>,
}

impl Default for GenerateSettings {
    fn default() -> Self {
        Self {
            sigma: 25.0,
            seed: 0,
            dt: 0.1,
            holding_voltage: None,
        }
    }
}

pub fn generate(args: &GenerateArgs) -> Result<()> {
    let protocol = load_protocol(&args.protocol)?;
    let spec = load_model(&args.model)?;
    let params = load_params(&args.params)?;
    let config = load_config(args.config.as_deref())?;
    let s: GenerateSettings = resolve("generate", &args.flags, config.as_ref())?;
    params.validate(&spec)?;
    let grid = protocol.uniform_grid(s.dt)?;
    let trace = match s.holding_voltage {
        None => generate_synthetic_trace(&spec, &params, &protocol, &grid, s.sigma, s.seed)?,
        Some(v) => {
            if s.sigma.is_nan() || s.sigma < 0.0 || !s.sigma.is_finite() {
                bail!("noise level {} must be non-negative", s.sigma);
            }
            let x0 = steady_state(&spec, &params, v)?;
            let series = simulate_open_series(&spec, &params, &protocol, &grid, Some(&x0))?;
            let mut current = series.current(&params);
            if s.sigma > 0.0 {
                let noise = gaussian_noise(current.len(), s.sigma, s.seed);
                for (c, e) in current.iter_mut().zip(noise) {
                    *c += e;
                }
            }
            Trace::new(series.times, series.voltages, current, TraceKind::Current)?
        }
    };

    prepare_out(&args.out)?;
    let mut m = Manifest::new("generate", &s)?;
    m.input("model", &args.model)?;
    m.input("params", &args.params)?;
    m.input("protocol", &args.protocol)?;
    m.emit(&args.out, "trace.csv", trace.to_csv().as_bytes())?;
    m.detail("model", spec.name())?;
    m.detail("points", trace.len())?;
    m.detail("sigma", s.sigma)?;
    m.detail("seed", s.seed)?;
    m.write(&args.out)?;
    println!("{}", args.out.join("trace.csv").display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitSettings {
    discrepancy: Variant,
    kernel: Kernel,
    gp_method: GpSolver,
    inducing: Option<Vec<usize>>,
    arma_p: usize,
    arma_q: usize,
    fixed_sigma: Option<f64>,
    seed: u64,
    max_evaluations: usize,
    restarts: usize,
    box_factor: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            discrepancy: Variant::Iid,
            kernel: Kernel::Rbf,
            gp_method: GpSolver::Fitc,
            inducing: None,
            arma_p: 2,
            arma_q: 2,
            fixed_sigma: None,
            seed: 0,
            max_evaluations: 20_000,
            restarts: 2,
            box_factor: 10.0,
        }
    }
}

/// Clamps `v` into the prior box of parameter `j`.
fn inside(problem: &CalibrationProblem, j: usize, v: f64) -> f64 {
    let (lo, hi) = problem.priors().parameters[j].bounds;
    v.clamp(lo * 1.001 + 1e-12, hi * 0.999)
}

pub fn fit(args: &FitArgs) -> Result<()> {
    let protocol = load_protocol(&args.protocol)?;
    let spec = load_model(&args.model)?;
    let reference = load_params(&args.params)?;
    let data = load_trace(&args.data)?;
    let config = load_config(args.config.as_deref())?;
    let s: FitSettings = resolve("fit", &args.flags, config.as_ref())?;
    if s.fixed_sigma.is_some() && s.discrepancy != Variant::Iid {
        bail!("--fixed-sigma only applies to the iid discrepancy");
    }
    let options = PriorOptions {
        box_factor: s.box_factor,
        ..PriorOptions::default()
    };
    let cmaes = CmaesSettings {
        max_evaluations: s.max_evaluations,
        restarts: s.restarts,
        ..CmaesSettings::default()
    };
    let build = |disc: Discrepancy, center: Option<&ArmaSpec>| -> Result<CalibrationProblem> {
        let priors = default_priors(&spec, &reference, &disc, center, &options)?;
        Ok(CalibrationProblem::new(
            spec.clone(),
            reference.reversal,
            protocol.clone(),
            data.clone(),
            disc,
            priors,
        )?)
    };

    let iid = build(
        Discrepancy::Iid {
            fixed_sigma: s.fixed_sigma,
        },
        None,
    )?;
    log::info!("fitting {} parameters under the iid error model", iid.dim());
    let iid_map = iid.fit_map(None, &cmaes, s.seed)?;
    let k = spec.n_kinetic_params() + 1;
    let mechanistic = &iid_map.point[..k];

    let (problem, map, prepass) = match s.discrepancy {
        Variant::Iid => (iid, iid_map, None),
        Variant::Arma => {
            let pre = iid.arma_prepass(&iid_map.point, s.arma_p, s.arma_q, s.seed)?;
            log::info!("ARMA({},{}) pre-pass: tau = {:.4}", s.arma_p, s.arma_q, pre.tau);
            let problem = build(
                Discrepancy::Arma {
                    p: s.arma_p,
                    q: s.arma_q,
                    tau: pre.tau,
                },
                Some(&pre),
            )?;
            let mut x0 = mechanistic.to_vec();
            x0.extend(pre.phi.iter().chain(&pre.zeta));
            let settings = CmaesSettings {
                initial_step: Some(0.05),
                ..cmaes.clone()
            };
            let map = problem.fit_map(Some(&x0), &settings, s.seed)?;
            (problem, map, Some(pre))
        }
        Variant::GpT | Variant::GpOv => {
            let mode = if s.discrepancy == Variant::GpT {
                GpInputMode::TimeOnly
            } else {
                GpInputMode::OpenVoltage
            };
            let method = match (s.gp_method, &s.inducing) {
                (GpSolver::Dense, _) => GpMethod::Dense,
                (GpSolver::Fitc, Some(grid)) => GpMethod::Fitc { grid: grid.clone() },
                (GpSolver::Fitc, None) => GpMethod::default_for(mode),
            };
            let method = match method {
                GpMethod::Fitc { grid } if grid.iter().product::<usize>() >= data.len() => {
                    log::info!("inducing grid covers every training point; using the dense GP");
                    GpMethod::Dense
                }
                other => other,
            };
            let kernel = kernel_family(s.kernel);
            let disc = match mode {
                GpInputMode::TimeOnly => Discrepancy::GpT { kernel, method },
                GpInputMode::OpenVoltage => Discrepancy::GpOv { kernel, method },
            };
            let problem = build(disc, None)?;
            let sigma = iid_map.point.get(k).copied().or(s.fixed_sigma).unwrap_or(1.0);
            let mut x0 = mechanistic.to_vec();
            x0.push(inside(&problem, k, sigma));
            x0.push(inside(&problem, k + 1, sigma));
            for j in k + 2..problem.dim() {
                x0.push(inside(&problem, j, 0.5));
            }
            let settings = CmaesSettings {
                initial_step: Some(0.1),
                ..cmaes.clone()
            };
            let map = problem.fit_map(Some(&x0), &settings, s.seed)?;
            (problem, map, None)
        }
    };
    log::info!(
        "MAP log-posterior {:.4} after {} evaluations",
        map.log_posterior,
        map.evaluations
    );

    prepare_out(&args.out)?;
    let mut m = Manifest::new("fit", &s)?;
    m.input("model", &args.model)?;
    m.input("params", &args.params)?;
    m.input("protocol", &args.protocol)?;
    m.input("data", &args.data)?;
    for (name, src) in [
        (bundle::MODEL, &args.model),
        (bundle::PARAMS, &args.params),
        (bundle::PROTOCOL, &args.protocol),
        (bundle::DATA, &args.data),
    ] {
        m.emit(&args.out, name, &std::fs::read(src)?)?;
    }
    if let DiscrepancyParams::Gp {
        sigma,
        kernel,
        mode,
        method,
    } = &problem.decode(&map.point)?.discrepancy
    {
        let point = problem.decode(&map.point)?;
        let (series, r) = problem.residuals(&point.params)?;
        let gp = TrainedGp::fit(kernel, &gp_inputs(*mode, &series)?, &r, *sigma, method)?;
        gp.save(&args.out, bundle::GP_STEM)?;
        m.record(&args.out, &format!("{}.json", bundle::GP_STEM))?;
        m.record(&args.out, &format!("{}.bin", bundle::GP_STEM))?;
    }
    let record = FitRecord {
        model: spec.name().to_string(),
        discrepancy: problem.discrepancy().clone(),
        names: problem.names(),
        priors: problem.priors().clone(),
        map: map.clone(),
        arma_prepass: prepass,
    };
    m.emit(
        &args.out,
        bundle::FIT,
        format!("{}\n", serde_json::to_string_pretty(&record)?).as_bytes(),
    )?;
    m.detail("variant", problem.discrepancy().label())?;
    m.detail("log_posterior", map.log_posterior)?;
    m.write(&args.out)?;

    let point: BTreeMap<&str, f64> = record
        .names
        .iter()
        .map(String::as_str)
        .zip(map.point.iter().copied())
        .collect();
    println!(
        "{}",
        serde_json::to_string(
            &json!({"variant": record.discrepancy.label(), "map": point, "log_posterior": map.log_posterior})
        )?
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleSettings {
    seed: u64,
    chains: usize,
    iterations: usize,
    warmup: usize,
    burn_in: usize,
    max_retained: usize,
    heartbeat: usize,
    jobs: usize,
}

impl Default for SampleSettings {
    fn default() -> Self {
        let m = McmcSettings::default();
        Self {
            seed: 0,
            chains: 3,
            iterations: m.iterations,
            warmup: m.warmup,
            burn_in: m.burn_in,
            max_retained: m.max_retained,
            heartbeat: m.heartbeat,
            jobs: 0,
        }
    }
}

pub fn sample(args: &SampleArgs) -> Result<()> {
    let run = Bundle::load(&args.run)?;
    run.expect_variant(args.discrepancy.map(variant_label))?;
    let config = load_config(args.config.as_deref())?;
    let s: SampleSettings = resolve("sample", &args.flags, config.as_ref())?;
    if s.chains == 0 {
        bail!("--chains must be at least 1");
    }
    if s.burn_in >= s.iterations {
        bail!(
            "burn-in {} leaves no draws out of {} iterations",
            s.burn_in,
            s.iterations
        );
    }
    let settings = McmcSettings {
        iterations: s.iterations,
        warmup: s.warmup,
        burn_in: s.burn_in,
        max_retained: s.max_retained,
        heartbeat: s.heartbeat,
        ..McmcSettings::default()
    };
    let problem = run.problem()?;
    let seeds: Vec<u64> = (0..s.chains as u64).map(|k| s.seed.wrapping_add(k)).collect();
    let jobs = if s.jobs == 0 {
        std::thread::available_parallelism().map_or(1, usize::from)
    } else {
        s.jobs
    };
    let chains = problem.sample_chains(&run.fit.map.point, &settings, &seeds, jobs)?;

    prepare_out(&args.out)?;
    let mut m = Manifest::new("sample", &s)?;
    m.input("fit", &args.run.join(bundle::FIT))?;
    run.copy_into(&args.out, &mut m)?;
    let mut acceptance = Vec::new();
    for (k, c) in chains.iter().enumerate() {
        m.emit(&args.out, &format!("chain_{k}.csv"), c.to_csv().as_bytes())?;
        acceptance.push(c.acceptance_rate);
        println!(
            "chain {k} seed {} acceptance {:.4} draws {}",
            seeds[k],
            c.acceptance_rate,
            c.len()
        );
    }
    m.detail("variant", run.fit.discrepancy.label())?;
    m.detail("seeds", &seeds)?;
    m.detail("acceptance_rates", &acceptance)?;
    m.write(&args.out)?;
    Ok(())
}

pub fn rhat(args: &RhatArgs) -> Result<()> {
    let chains = load_chains(&args.paths)?;
    let values = split_rhat_all(&chains)?;
    let mut report = String::from("parameter,rhat\n");
    for (name, v) in chains[0].names.iter().zip(&values) {
        report.push_str(&format!("{name},{v}\n"));
    }
    prepare_out(&args.out)?;
    let mut m = Manifest::new("rhat", &json!({"chains": chains.len()}))?;
    for (i, p) in args.paths.iter().enumerate() {
        if p.is_file() {
            m.input(&format!("chain_{i}"), p)?;
        } else {
            for f in sorted_chain_files(p)? {
                let role = format!("{}/{}", i, f.file_name().and_then(|n| n.to_str()).unwrap_or_default());
                m.input(&role, &f)?;
            }
        }
    }
    m.emit(&args.out, "rhat.csv", report.as_bytes())?;
    let worst = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m.detail("max_rhat", worst)?;
    m.write(&args.out)?;
    print!("{report}");
    Ok(())
}

fn sorted_chain_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|f| {
            f.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("chain_") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    Ok(files)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictSettings {
    draws: usize,
    dt: f64,
    arma_mode: ArmaHistory,
}

impl Default for PredictSettings {
    fn default() -> Self {
        Self {
            draws: DEFAULT_PREDICTIVE_DRAWS,
            dt: 0.1,
            arma_mode: ArmaHistory::ZeroMean,
        }
    }
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    let protocol = load_protocol(&args.protocol)?;
    let observed = args.data.as_deref().map(load_trace).transpose()?;
    let run = Bundle::load(&args.run)?;
    run.expect_variant(args.discrepancy.map(variant_label))?;
    let config = load_config(args.config.as_deref())?;
    let s: PredictSettings = resolve("predict", &args.flags, config.as_ref())?;
    let problem = run.problem()?;
    let chains = run.chains()?;
    let draws = select_draws(&chains, s.draws);
    let grid = match &observed {
        Some(t) => t.times.clone(),
        None => protocol.uniform_grid(s.dt)?,
    };
    let mode = arma_mode(s.arma_mode);
    let pp = posterior_predictive(&problem, &draws, &protocol, &grid, mode)?;
    let decomposition = decompose_prediction(&problem, &run.fit.map.point, &protocol, &grid, mode)?;

    prepare_out(&args.out)?;
    let mut m = Manifest::new("predict", &s)?;
    m.input("protocol", &args.protocol)?;
    m.input("fit", &args.run.join(bundle::FIT))?;
    for f in sorted_chain_files(&args.run)? {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        m.input(&name, &f)?;
    }
    if let Some(p) = &args.data {
        m.input("data", p)?;
    }
    m.emit(&args.out, "predictive.csv", pp.to_csv().as_bytes())?;
    m.emit(&args.out, "quantiles.csv", pp.quantiles_csv().as_bytes())?;
    let values = observed.as_ref().map(|t| t.values.as_slice());
    m.emit(&args.out, "decomposition.csv", decomposition.to_csv(values).as_bytes())?;
    let mut summary = json!({
        "variant": run.fit.discrepancy.label(),
        "draws_used": pp.draws_used,
        "draws_dropped": pp.draws_dropped,
        "degraded": pp.degraded(),
    });
    if let Some(t) = &observed {
        summary["rmse_posterior_mean"] = json!(rmse(&pp.summary.mean, &t.values)?);
        summary["rmse_ode_only"] = json!(rmse(&decomposition.ode_only, &t.values)?);
        summary["rmse_map_combined"] = json!(rmse(&decomposition.combined, &t.values)?);
    }
    if let serde_json::Value::Object(map) = &summary {
        for (k, v) in map {
            m.detail(k, v)?;
        }
    }
    m.write(&args.out)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvaluateSettings {
    draws: usize,
    arma_mode: ArmaHistory,
}

impl Default for EvaluateSettings {
    fn default() -> Self {
        Self {
            draws: DEFAULT_PREDICTIVE_DRAWS,
            arma_mode: ArmaHistory::ZeroMean,
        }
    }
}

const VARIANT_ORDER: [&str; 4] = ["iid", "gp-t", "gp-ov", "arma"];

fn file_stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("data").to_string()
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    if args.protocols.len() != args.data.len() {
        bail!(
            "{} protocols but {} data files; pass them in matching pairs",
            args.protocols.len(),
            args.data.len()
        );
    }
    let validation: Vec<(VoltageProtocol, Trace)> = args
        .protocols
        .iter()
        .zip(&args.data)
        .map(|(p, d)| Ok((load_protocol(p)?, load_trace(d)?)))
        .collect::<Result<_>>()?;
    let config = load_config(args.config.as_deref())?;
    let s: EvaluateSettings = resolve("evaluate", &args.flags, config.as_ref())?;
    let runs: Vec<Bundle> = args.runs.iter().map(|r| Bundle::load(r)).collect::<Result<_>>()?;

    let mut columns: Vec<&str> = VARIANT_ORDER
        .iter()
        .copied()
        .filter(|v| runs.iter().any(|r| r.fit.discrepancy.label() == *v))
        .collect();
    columns.dedup();
    let mut models: Vec<String> = runs.iter().map(|r| r.fit.model.clone()).collect();
    models.sort();
    models.dedup();
    let mut seen = std::collections::BTreeSet::new();
    for r in &runs {
        if !seen.insert((r.fit.model.clone(), r.fit.discrepancy.label())) {
            bail!(
                "two runs for model `{}` with the `{}` discrepancy",
                r.fit.model,
                r.fit.discrepancy.label()
            );
        }
    }

    let names: Vec<String> = columns.iter().map(|c| c.to_string()).collect();
    let mut loglik = ScoreTable::new(names.clone());
    let mut errors = ScoreTable::new(names);
    let mode = arma_mode(s.arma_mode);
    let chains: Vec<_> = runs.iter().map(Bundle::chains).collect::<Result<_>>()?;
    for ((protocol, trace), data_path) in validation.iter().zip(&args.data) {
        for model in &models {
            let mut ll_row = vec![f64::NAN; columns.len()];
            let mut rmse_row = vec![f64::NAN; columns.len()];
            for (run, run_chains) in runs.iter().zip(&chains).filter(|(r, _)| &r.fit.model == model) {
                let j = columns
                    .iter()
                    .position(|c| *c == run.fit.discrepancy.label())
                    .unwrap_or(0);
                let problem = run.problem()?;
                let draws = select_draws(run_chains, s.draws);
                ll_row[j] = posterior_predictive_score(&problem, &draws, protocol, trace)?;
                let pp = posterior_predictive(&problem, &draws, protocol, &trace.times, mode)?;
                rmse_row[j] = rmse(&pp.summary.mean, &trace.values)?;
            }
            let label = format!("{}/{model}", file_stem(data_path));
            loglik.push_row(label.clone(), ll_row)?;
            errors.push_row(label, rmse_row)?;
        }
    }
    if columns.iter().any(|c| c.starts_with("gp")) {
        loglik.footnotes.push(FITC_FOOTNOTE.into());
    }
    let relative = relative_score_table(&loglik);

    prepare_out(&args.out)?;
    let mut m = Manifest::new("evaluate", &s)?;
    for (i, (p, d)) in args.protocols.iter().zip(&args.data).enumerate() {
        m.input(&format!("protocol_{i}"), p)?;
        m.input(&format!("data_{i}"), d)?;
    }
    for (i, r) in args.runs.iter().enumerate() {
        m.input(&format!("run_{i}/fit"), &r.join(bundle::FIT))?;
        for f in sorted_chain_files(r)? {
            let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            m.input(&format!("run_{i}/{name}"), &f)?;
        }
    }
    m.emit(&args.out, "loglik.csv", loglik.to_csv().as_bytes())?;
    m.emit(&args.out, "loglik_relative.csv", relative.to_csv().as_bytes())?;
    m.emit(&args.out, "loglik_relative.txt", relative.to_text().as_bytes())?;
    m.emit(&args.out, "rmse.csv", errors.to_csv().as_bytes())?;
    m.emit(&args.out, "rmse.txt", errors.to_text().as_bytes())?;
    m.write(&args.out)?;
    print!("{}", relative.to_text());
    Ok(())
}
