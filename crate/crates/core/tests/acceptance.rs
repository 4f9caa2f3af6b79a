//! Acceptance criteria. Each test prints one PASS/FAIL line followed by its
//! individual checks, then asserts. A shared lock keeps the heavy criteria
//! from competing for cores.

use std::f64::consts::PI;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use ion_calib::arma::{arma_log_likelihood, ArmaSpec};
use ion_calib::datagen::generate_synthetic_trace;
use ion_calib::eval::{decompose_prediction, posterior_predictive_score, relative_score_table, rmse, ScoreTable};
use ion_calib::gp::{
    gp_marginal_loglik_fitc, Covariates, DenseGp, FitcGp, GpMethod, InducingSet, KernelFamily, KernelSpec,
};
use ion_calib::inference::{
    default_priors, iid_log_likelihood, mcmc_sample, rhat, CalibrationProblem, CmaesSettings, Discrepancy, MapEstimate,
    McmcSettings, PosteriorSamples, PriorOptions,
};
use ion_calib::predict::{conditional_predictive, posterior_predictive_summary, select_draws, ArmaMode};
use ion_calib::protocol::Step;
use ion_calib::simulate::{initial_state, integrate_states, simulate_current};
use ion_calib::{ModelSpec, ParameterVector, Trace, VoltageProtocol};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

struct Report {
    id: u32,
    title: &'static str,
    started: Instant,
    checks: Vec<(bool, String)>,
}

impl Report {
    fn new(id: u32, title: &'static str) -> Self {
        Self {
            id,
            title,
            started: Instant::now(),
            checks: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, detail: impl Into<String>) {
        self.checks.push((ok, detail.into()));
    }

    fn runtime(&mut self, limit: Duration) {
        let elapsed = self.started.elapsed();
        self.check(
            elapsed <= limit,
            format!("runtime {:.1} s (limit {} s)", elapsed.as_secs_f64(), limit.as_secs()),
        );
    }

    fn finish(self) {
        let ok = self.checks.iter().all(|(ok, _)| *ok);
        let mut out = std::io::stdout().lock();
        let verdict = if ok { "PASS" } else { "FAIL" };
        writeln!(out, "{verdict} criterion {}: {}", self.id, self.title).unwrap();
        for (ok, detail) in &self.checks {
            writeln!(out, "    [{}] {detail}", if *ok { "ok" } else { "FAIL" }).unwrap();
        }
        drop(out);
        assert!(ok, "criterion {} failed", self.id);
    }
}

fn repo(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn model(stem: &str) -> (ModelSpec, ParameterVector) {
    let spec = ModelSpec::load(repo(&format!("models/{stem}.json"))).unwrap();
    let params = ParameterVector::load(repo(&format!("params/{stem}.json"))).unwrap();
    (spec, params)
}

fn protocol(stem: &str) -> VoltageProtocol {
    VoltageProtocol::load(repo(&format!("protocols/{stem}.csv"))).unwrap()
}

fn even_grid(p: &VoltageProtocol, n: usize) -> Vec<f64> {
    let dt = p.total_duration() / (n as f64 - 1.0);
    (0..n).map(|i| i as f64 * dt).collect()
}

fn pooled(chains: &[PosteriorSamples]) -> Vec<Vec<f64>> {
    chains.iter().flat_map(|c| c.draws.iter().cloned()).collect()
}

fn column(draws: &[Vec<f64>], j: usize) -> Vec<f64> {
    draws.iter().map(|d| d[j]).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let h = q * (s.len() - 1) as f64;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

/// Least-squares slope of `ln y` on `ln x`.
fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (mx, my) = (mean(&lx), mean(&ly));
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn iid_problem(spec: &ModelSpec, reference: &ParameterVector, p: &VoltageProtocol, data: Trace) -> CalibrationProblem {
    let disc = Discrepancy::Iid { fixed_sigma: None };
    let priors = default_priors(spec, reference, &disc, None, &PriorOptions::default()).unwrap();
    CalibrationProblem::new(spec.clone(), reference.reversal, p.clone(), data, disc, priors).unwrap()
}

fn mcmc(iterations: usize, burn_in: usize) -> McmcSettings {
    McmcSettings {
        iterations,
        burn_in,
        warmup: 1_000,
        max_retained: iterations,
        heartbeat: 0,
        ..Default::default()
    }
}

fn jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// The deliberately misspecified 2-state model starts from this guess.
fn two_state_reference() -> ParameterVector {
    ParameterVector::new(vec![2.0e-3, 5.0e-2, 5.0e-4, 3.0e-2], 152.4, -88.4)
}

#[test]
fn criterion_01_well_specified_recovery() {
    let _g = serial();
    let mut r = Report::new(1, "well-specified Model A recovery");
    let (spec, truth) = model("model_a");
    let prot = protocol("staircase");
    let grid = even_grid(&prot, 20_000);
    let data = generate_synthetic_trace(&spec, &truth, &prot, &grid, 25.0, 101).unwrap();
    let problem = iid_problem(&spec, &truth, &prot, data);

    let factors = [1.6, 0.6, 1.8, 0.7, 1.4, 0.55, 1.9, 0.65, 1.3, 0.8];
    let mut start: Vec<f64> = truth.kinetics.iter().chain([&truth.conductance]).cloned().collect();
    start.push(25.0);
    for (x, f) in start.iter_mut().zip(factors) {
        *x *= f;
    }
    let settings = CmaesSettings {
        max_evaluations: 30_000,
        restarts: 3,
        ..Default::default()
    };
    let map = problem.fit_map(Some(&start), &settings, 7).unwrap();
    let k = spec.n_kinetic_params();
    let worst = (0..k)
        .map(|j| (map.point[j] / truth.kinetics[j] - 1.0).abs())
        .fold(0.0, f64::max);
    let g_err = (map.point[k] / truth.conductance - 1.0).abs();
    r.check(
        worst <= 0.02,
        format!("max kinetic relative error {:.3}% (limit 2%)", 100.0 * worst),
    );
    r.check(
        g_err <= 0.005,
        format!("conductance relative error {:.3}% (limit 0.5%)", 100.0 * g_err),
    );

    let chains = problem
        .sample_chains(&map.point, &mcmc(20_000, 5_000), &[11, 12, 13], jobs())
        .unwrap();
    let draws = pooled(&chains);
    let generating: Vec<f64> = truth.kinetics.iter().chain([&truth.conductance]).cloned().collect();
    let mut covered = 0;
    let mut missed = Vec::new();
    for (j, &v) in generating.iter().enumerate() {
        let c = column(&draws, j);
        let (lo, hi) = (quantile(&c, 0.025), quantile(&c, 0.975));
        if lo <= v && v <= hi {
            covered += 1;
        } else {
            missed.push(format!("{} {v:.4e} outside [{lo:.4e}, {hi:.4e}]", problem.names()[j]));
        }
    }
    r.check(
        covered >= 8,
        format!("95% intervals cover {covered} of 9 generating values {missed:?}"),
    );
    let rh = rhat(&chains).unwrap();
    r.check(
        true,
        format!("split R-hat max {:.3}", rh.iter().cloned().fold(0.0, f64::max)),
    );
    r.runtime(Duration::from_secs(15 * 60));
    r.finish();
}

#[test]
fn criterion_02_pseudo_true_concentration() {
    let _g = serial();
    let mut r = Report::new(2, "misspecified posterior concentrates as 1/sqrt(N)");
    let (truth_spec, truth) = model("chain4");
    let (spec, _) = model("two_state");
    let reference = two_state_reference();
    let prot = protocol("staircase");
    let sizes = [2_000usize, 8_000, 32_000];
    let mut maps: Vec<MapEstimate> = Vec::new();
    let mut sds: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    for (i, &n) in sizes.iter().enumerate() {
        let grid = even_grid(&prot, n);
        let data = generate_synthetic_trace(&truth_spec, &truth, &prot, &grid, 25.0, 200 + i as u64).unwrap();
        let problem = iid_problem(&spec, &reference, &prot, data);
        let settings = CmaesSettings {
            max_evaluations: 20_000,
            restarts: 4,
            ..Default::default()
        };
        let map = problem.fit_map(None, &settings, 7).unwrap();
        let chains = problem
            .sample_chains(&map.point, &mcmc(20_000, 5_000), &[21, 22, 23], jobs())
            .unwrap();
        let draws = pooled(&chains);
        sds.push((0..problem.dim()).map(|j| std_dev(&column(&draws, j))).collect());
        names = problem.names();
        maps.push(map);
    }

    let ns: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let mechanistic = spec.n_kinetic_params() + 1;
    for (j, name) in names.iter().enumerate() {
        let slope = log_log_slope(&ns, &sds.iter().map(|s| s[j]).collect::<Vec<_>>());
        r.check(
            (slope + 0.5).abs() <= 0.15,
            format!("{name}: posterior sd log-log slope {slope:.3}"),
        );
    }
    let (a, b) = (&maps[1].point, &maps[2].point);
    for j in 0..mechanistic {
        let drift = (b[j] / a[j] - 1.0).abs();
        r.check(
            drift < 0.01,
            format!("{}: MAP drift 8k to 32k {:.3}%", names[j], 100.0 * drift),
        );
    }
    let sigma_drift = (b[mechanistic] / a[mechanistic] - 1.0).abs();
    r.check(
        true,
        format!(
            "sigma MAP drift 8k to 32k {:.3}% (noise level, not gated)",
            100.0 * sigma_drift
        ),
    );
    r.runtime(Duration::from_secs(20 * 60));
    r.finish();
}

#[test]
fn criterion_03_fitc_exact_with_coincident_inducing_points() {
    let _g = serial();
    let mut r = Report::new(3, "FITC equals dense GP with coincident inducing points");
    let n = 200;
    let times: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let x = Covariates::from_columns(&[&times]).unwrap();
    let inducing = InducingSet::new(x.clone(), n).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let residual: Vec<f64> = (0..n)
        .map(|i| (i as f64 / 15.0).sin() + 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let test_times: Vec<f64> = (0..97).map(|i| -5.0 + 2.1 * i as f64).collect();
    let xt = Covariates::from_columns(&[&test_times]).unwrap();
    for family in [KernelFamily::Rbf, KernelFamily::Ou, KernelFamily::Matern32] {
        let kernel = KernelSpec::new(family, 1.3, vec![1.0]).unwrap();
        let sigma = 0.4;
        let dense = DenseGp::fit(&kernel, &x, &residual, sigma).unwrap();
        let fitc = FitcGp::fit(&kernel, &x, &inducing, &residual, sigma).unwrap();
        let dl = (dense.log_likelihood() - fitc.log_likelihood()).abs();
        let pd = dense.predict(&xt).unwrap();
        let pf = fitc.predict(&xt).unwrap();
        let dm = pd
            .mean
            .iter()
            .zip(&pf.mean)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let dv = pd
            .latent_var
            .iter()
            .zip(&pf.latent_var)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let name = family.as_str();
        r.check(dl <= 1e-6, format!("{name}: |loglik difference| {dl:.2e} (limit 1e-6)"));
        r.check(
            dm <= 1e-8,
            format!("{name}: max predictive mean difference {dm:.2e} (limit 1e-8)"),
        );
        r.check(
            dv <= 1e-8,
            format!("{name}: max predictive variance difference {dv:.2e} (limit 1e-8)"),
        );
    }
    r.runtime(Duration::from_secs(60));
    r.finish();
}

#[test]
fn criterion_04_fitc_scaling() {
    let _g = serial();
    let mut r = Report::new(4, "FITC wall time grows sub-quadratically in N");
    let sizes = [5_000usize, 10_000, 20_000, 40_000];
    let kernel = KernelSpec::new(KernelFamily::Rbf, 1.0, vec![0.05]).unwrap();
    let mut times = Vec::new();
    for &n in &sizes {
        let t: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let data: Vec<f64> = t.iter().map(|v| (20.0 * v).sin()).collect();
        let zeros = vec![0.0; n];
        let x = Covariates::from_columns(&[&t]).unwrap();
        let inducing = InducingSet::grid(&x, &[64]).unwrap();
        let mut best = f64::INFINITY;
        for _ in 0..5 {
            let start = Instant::now();
            let ll = gp_marginal_loglik_fitc(&kernel, &x, &inducing, 0.1, &data, &zeros).unwrap();
            best = best.min(start.elapsed().as_secs_f64());
            assert!(ll.is_finite());
        }
        times.push(best);
    }
    let ns: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let exponent = log_log_slope(&ns, &times);
    let ms: Vec<String> = times.iter().map(|t| format!("{:.1} ms", 1e3 * t)).collect();
    r.check(
        exponent <= 1.3,
        format!("fitted exponent {exponent:.3} (limit 1.3), times {ms:?}"),
    );
    r.runtime(Duration::from_secs(5 * 60));
    r.finish();
}

fn iid_oracle(residuals: &[f64], sigma: f64) -> f64 {
    let ss: f64 = residuals.iter().map(|e| e * e).sum();
    -0.5 * residuals.len() as f64 * (2.0 * PI * sigma * sigma).ln() - ss / (2.0 * sigma * sigma)
}

/// Conditional ARMA likelihood from padded history buffers.
fn arma_oracle(e: &[f64], phi: &[f64], zeta: &[f64], tau: f64) -> f64 {
    let (p, q) = (phi.len(), zeta.len());
    let pad = p + q + 1;
    let mut ee = vec![0.0; e.len() + pad];
    let mut nn = vec![0.0; e.len() + pad];
    ee[pad..].copy_from_slice(e);
    let mut ll = 0.0;
    for i in (pad + p)..ee.len() {
        let ar: f64 = (0..p).map(|j| phi[j] * ee[i - j - 1]).sum();
        let ma: f64 = (0..q).map(|k| zeta[k] * nn[i - k - 1]).sum();
        nn[i] = ee[i] - ar - ma;
        ll += -0.5 * (2.0 * PI * tau * tau).ln() - nn[i] * nn[i] / (2.0 * tau * tau);
    }
    ll
}

#[test]
fn criterion_05_arma_reductions() {
    let _g = serial();
    let mut r = Report::new(5, "ARMA likelihood reductions");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst, mut worst_lib) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(20..2_000);
        let tau = rng.random_range(0.1..50.0);
        let e: Vec<f64> = (0..n).map(|_| tau * rng.sample::<f64, _>(StandardNormal)).collect();
        let spec = ArmaSpec::new(vec![], vec![], tau).unwrap();
        let arma = arma_log_likelihood(&e, &spec).unwrap();
        worst = worst.max((arma - iid_oracle(&e, tau)).abs());
        worst_lib = worst_lib.max((arma - iid_log_likelihood(&e, tau)).abs());
    }
    r.check(
        worst <= 1e-12,
        format!("ARMA(0,0) vs IID oracle max difference {worst:.2e} over 100 vectors (limit 1e-12)"),
    );
    r.check(
        worst_lib <= 1e-12,
        format!("ARMA(0,0) vs library IID likelihood max difference {worst_lib:.2e}"),
    );

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let phi = vec![rng.random_range(0.2..0.7), rng.random_range(-0.25..0.2)];
        let zeta = vec![rng.random_range(-0.6..0.6), rng.random_range(-0.3..0.3)];
        let tau = rng.random_range(0.5..5.0);
        let e: Vec<f64> = (0..1_000).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let spec = ArmaSpec::new(phi.clone(), zeta.clone(), tau).unwrap();
        let ours = arma_log_likelihood(&e, &spec).unwrap();
        let oracle = arma_oracle(&e, &phi, &zeta, tau);
        worst = worst.max((ours - oracle).abs() / oracle.abs().max(1.0));
    }
    r.check(
        worst <= 1e-10,
        format!("ARMA(2,2) vs recursion oracle max relative difference {worst:.2e} (limit 1e-10)"),
    );
    r.runtime(Duration::from_secs(60));
    r.finish();
}

#[test]
fn criterion_06_mixture_identities() {
    let _g = serial();
    let mut r = Report::new(6, "posterior-predictive mixture identities");
    let s = posterior_predictive_summary(&[(vec![0.0], vec![1.0]), (vec![2.0], vec![1.0])]).unwrap();
    r.check(
        s.mean[0] == 1.0 && s.var[0] == 2.0,
        format!("two-draw example E={} Var={}", s.mean[0], s.var[0]),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst, mut below) = (0.0f64, 0usize);
    for _ in 0..1_000 {
        let k = rng.random_range(1..40);
        let m = rng.random_range(1..6);
        let draws: Vec<(Vec<f64>, Vec<f64>)> = (0..k)
            .map(|_| {
                let mu = (0..m).map(|_| rng.random_range(-100.0..100.0)).collect();
                let v = (0..m).map(|_| rng.random_range(0.0..50.0)).collect();
                (mu, v)
            })
            .collect();
        let s = posterior_predictive_summary(&draws).unwrap();
        for i in 0..m {
            let mus: Vec<f64> = draws.iter().map(|d| d.0[i]).collect();
            let within = draws.iter().map(|d| d.1[i]).sum::<f64>() / k as f64;
            let centre = mean(&mus);
            let between = mus.iter().map(|x| (x - centre).powi(2)).sum::<f64>() / k as f64;
            let total = within + between;
            worst = worst.max((s.var[i] - total).abs() / total.max(1.0));
            if s.var[i] < within - 1e-9 * within.max(1.0) {
                below += 1;
            }
        }
    }
    r.check(
        worst <= 1e-12,
        format!("Var = E[var] + Var[mean] max relative error {worst:.2e}"),
    );
    r.check(
        below == 0,
        format!("mixture variance below mean draw variance in {below} entries"),
    );
    r.runtime(Duration::from_secs(60));
    r.finish();
}

struct Misspecified {
    cal_protocol: VoltageProtocol,
    cal: Trace,
    iid: (CalibrationProblem, MapEstimate),
    arma: (CalibrationProblem, MapEstimate),
    gp_t: (CalibrationProblem, MapEstimate),
    gp_ov: (CalibrationProblem, MapEstimate),
    iid_draws: Vec<Vec<f64>>,
    arma_draws: Vec<Vec<f64>>,
    validation: Vec<(String, VoltageProtocol, Trace)>,
    elapsed: Duration,
}

fn clamp_inside(problem: &CalibrationProblem, j: usize, v: f64) -> f64 {
    let (lo, hi) = problem.priors().parameters[j].bounds;
    v.clamp(lo * 1.001, hi * 0.999)
}

fn misspecified() -> &'static Misspecified {
    static SETUP: OnceLock<Misspecified> = OnceLock::new();
    SETUP.get_or_init(|| {
        let started = Instant::now();
        let (truth_spec, truth) = model("chain4");
        let (spec, _) = model("two_state");
        let reference = two_state_reference();
        let cal_protocol = protocol("staircase");
        let cal = generate_synthetic_trace(
            &truth_spec,
            &truth,
            &cal_protocol,
            &even_grid(&cal_protocol, 2_000),
            25.0,
            301,
        )
        .unwrap();
        let validation: Vec<(String, VoltageProtocol, Trace)> = ["ap", "sinusoid"]
            .iter()
            .enumerate()
            .map(|(i, stem)| {
                let p = protocol(stem);
                let t = generate_synthetic_trace(&truth_spec, &truth, &p, &even_grid(&p, 2_000), 25.0, 310 + i as u64)
                    .unwrap();
                (stem.to_string(), p, t)
            })
            .collect();

        let options = PriorOptions::default();
        let build = |disc: Discrepancy, centre: Option<&ArmaSpec>| {
            let priors = default_priors(&spec, &reference, &disc, centre, &options).unwrap();
            CalibrationProblem::new(
                spec.clone(),
                reference.reversal,
                cal_protocol.clone(),
                cal.clone(),
                disc,
                priors,
            )
            .unwrap()
        };
        let k = spec.n_kinetic_params() + 1;

        let iid = build(Discrepancy::Iid { fixed_sigma: None }, None);
        let iid_map = iid
            .fit_map(
                None,
                &CmaesSettings {
                    max_evaluations: 20_000,
                    restarts: 4,
                    ..Default::default()
                },
                7,
            )
            .unwrap();
        let sigma = iid_map.point[k];

        let pre = iid.arma_prepass(&iid_map.point, 2, 2, 7).unwrap();
        let arma = build(
            Discrepancy::Arma {
                p: 2,
                q: 2,
                tau: pre.tau,
            },
            Some(&pre),
        );
        let mut x0 = iid_map.point[..k].to_vec();
        x0.extend(pre.phi.iter().chain(&pre.zeta));
        let settings = CmaesSettings {
            max_evaluations: 8_000,
            restarts: 1,
            initial_step: Some(0.05),
            ..Default::default()
        };
        let arma_map = arma.fit_map(Some(&x0), &settings, 7).unwrap();

        let gp_fit = |disc: Discrepancy| {
            let problem = build(disc, None);
            let mut x0 = iid_map.point[..k].to_vec();
            x0.push(clamp_inside(&problem, k, sigma));
            x0.push(clamp_inside(&problem, k + 1, sigma));
            x0.resize(problem.dim(), 0.5);
            let settings = CmaesSettings {
                max_evaluations: 1_500,
                restarts: 0,
                initial_step: Some(0.1),
                ..Default::default()
            };
            let map = problem.fit_map(Some(&x0), &settings, 7).unwrap();
            (problem, map)
        };
        let gp_t = gp_fit(Discrepancy::GpT {
            kernel: KernelFamily::Rbf,
            method: GpMethod::Fitc { grid: vec![128] },
        });
        let gp_ov = gp_fit(Discrepancy::GpOv {
            kernel: KernelFamily::Rbf,
            method: GpMethod::Fitc { grid: vec![12, 12] },
        });

        let settings = mcmc(10_000, 3_000);
        let iid_chains = iid
            .sample_chains(&iid_map.point, &settings, &[31, 32, 33], jobs())
            .unwrap();
        let arma_chains = arma
            .sample_chains(&arma_map.point, &settings, &[41, 42, 43], jobs())
            .unwrap();
        Misspecified {
            cal_protocol,
            cal,
            iid_draws: select_draws(&iid_chains, 200),
            arma_draws: select_draws(&arma_chains, 200),
            iid: (iid, iid_map),
            arma: (arma, arma_map),
            gp_t,
            gp_ov,
            validation,
            elapsed: started.elapsed(),
        }
    })
}

#[test]
fn criterion_07_discrepancy_rmse_trend() {
    let _g = serial();
    let mut r = Report::new(7, "GP discrepancy improves calibration RMSE over IID");
    let m = misspecified();
    let grid = &m.cal.times;
    let combined_rmse = |(problem, map): &(CalibrationProblem, MapEstimate)| {
        let d = decompose_prediction(problem, &map.point, &m.cal_protocol, grid, ArmaMode::ZeroMean).unwrap();
        rmse(&d.combined, &m.cal.values).unwrap()
    };
    let iid = combined_rmse(&m.iid);
    let gp_ov = combined_rmse(&m.gp_ov);
    let gp_t = combined_rmse(&m.gp_t);
    r.check(gp_ov <= iid, format!("GP(O,V) RMSE {gp_ov:.2} pA vs IID {iid:.2} pA"));
    r.check(gp_t <= iid, format!("GP(t) RMSE {gp_t:.2} pA vs IID {iid:.2} pA"));

    let (problem, map) = &m.gp_t;
    let k = problem.spec().n_kinetic_params() + 1;
    let alpha = map.point[k + 1];
    let end = m.cal_protocol.total_duration();
    let mut steps: Vec<Step> = match m.cal_protocol.shape() {
        ion_calib::protocol::ProtocolShape::Steps(s) => s.clone(),
        _ => unreachable!("staircase is a step protocol"),
    };
    steps.push(Step {
        duration: 5_000.0,
        voltage: -80.0,
    });
    let extended = VoltageProtocol::steps(steps).unwrap();
    let far = [end + 4_000.0, end + 5_000.0 - 1.0];
    let c = conditional_predictive(problem, &map.point, &extended, &far, ArmaMode::ZeroMean).unwrap();
    let latent = c.latent_var.unwrap();
    let rel = latent
        .iter()
        .map(|v| (v / (alpha * alpha) - 1.0).abs())
        .fold(0.0, f64::max);
    r.check(
        rel <= 1e-3,
        format!(
            "latent var {:.4e} beyond the span vs alpha^2 {:.4e} (relative {rel:.1e})",
            latent[0],
            alpha * alpha
        ),
    );
    r.check(
        m.elapsed <= Duration::from_secs(30 * 60),
        format!("shared setup runtime {:.1} s (limit 1800 s)", m.elapsed.as_secs_f64()),
    );
    r.finish();
}

#[test]
fn criterion_08_predictive_scoring_trend() {
    let _g = serial();
    let mut r = Report::new(8, "ARMA posterior-predictive score beats IID on validation");
    let m = misspecified();
    let started = Instant::now();
    let mut table = ScoreTable::new(["iid", "gp-t", "gp-ov", "arma"].map(String::from).to_vec());
    for (name, p, data) in &m.validation {
        let iid = posterior_predictive_score(&m.iid.0, &m.iid_draws, p, data).unwrap();
        let arma = posterior_predictive_score(&m.arma.0, &m.arma_draws, p, data).unwrap();
        let gp_t = posterior_predictive_score(&m.gp_t.0, std::slice::from_ref(&m.gp_t.1.point), p, data).unwrap();
        let gp_ov = posterior_predictive_score(&m.gp_ov.0, std::slice::from_ref(&m.gp_ov.1.point), p, data).unwrap();
        r.check(arma > iid, format!("{name}: ARMA(2,2) {arma:.1} vs IID {iid:.1}"));
        table.push_row(name.clone(), vec![iid, gp_t, gp_ov, arma]).unwrap();
    }
    let relative = relative_score_table(&table);
    for (label, row) in &relative.rows {
        let zeros = row.iter().filter(|v| **v == 0.0).count();
        r.check(
            zeros == 1,
            format!("{label}: {zeros} zero entries in the relative row {row:?}"),
        );
    }
    let total = m.elapsed + started.elapsed();
    r.check(
        total <= Duration::from_secs(30 * 60),
        format!("runtime with shared setup {:.1} s (limit 1800 s)", total.as_secs_f64()),
    );
    r.finish();
}

#[test]
fn criterion_09_mcmc_on_standard_normal() {
    let _g = serial();
    let mut r = Report::new(9, "adaptive MCMC recovers a 2-D standard normal");
    let target = |x: &[f64]| -0.5 * (x[0] * x[0] + x[1] * x[1]);
    let settings = mcmc(50_000, 5_000);
    let names = vec!["x".to_string(), "y".to_string()];
    let chains: Vec<PosteriorSamples> = (0..3)
        .map(|c| {
            mcmc_sample(
                target,
                &[0.5 - c as f64, 0.5 * c as f64],
                None,
                names.clone(),
                &settings,
                90 + c as u64,
                c,
            )
            .unwrap()
        })
        .collect();
    let d = &chains[0].draws;
    let (x, y) = (column(d, 0), column(d, 1));
    let (mx, my) = (mean(&x), mean(&y));
    let n = x.len() as f64 - 1.0;
    let cxx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
    let cyy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
    let cxy = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    r.check(
        mx.abs() <= 0.05 && my.abs() <= 0.05,
        format!("means ({mx:.4}, {my:.4})"),
    );
    r.check(
        (cxx - 1.0).abs() <= 0.1 && (cyy - 1.0).abs() <= 0.1 && cxy.abs() <= 0.1,
        format!("covariance [[{cxx:.4}, {cxy:.4}], [{cxy:.4}, {cyy:.4}]]"),
    );
    let rh = rhat(&chains).unwrap();
    r.check(rh.iter().all(|v| *v < 1.05), format!("3-chain split R-hat {rh:.4?}"));
    r.runtime(Duration::from_secs(2 * 60));
    r.finish();
}

#[test]
fn criterion_10_simulator_invariants() {
    let _g = serial();
    let mut r = Report::new(10, "simulator invariants");
    let mut combos: Vec<(String, ModelSpec, ParameterVector, VoltageProtocol)> = Vec::new();
    for stem in ["model_a", "model_b", "model_c", "chain4", "two_state"] {
        let (spec, params) = model(stem);
        for prot in ["staircase", "sinusoid", "ap", "toy"] {
            combos.push((format!("{stem}/{prot}"), spec.clone(), params.clone(), protocol(prot)));
        }
    }
    let (spec, _) = model("two_state");
    combos.push((
        "two_state reference/staircase".into(),
        spec,
        two_state_reference(),
        protocol("staircase"),
    ));

    let mut worst_simplex = 0.0f64;
    let mut worst_linear = 0.0f64;
    let mut worst_negative = 0.0f64;
    for (_, spec, params, prot) in &combos {
        let grid = prot.uniform_grid(0.5).unwrap();
        let x0 = initial_state(spec, params, prot).unwrap();
        let traj = integrate_states(spec, params, prot, &grid, &x0).unwrap();
        for row in traj.rows() {
            worst_simplex = worst_simplex.max((row.iter().sum::<f64>() - 1.0).abs());
            worst_negative = worst_negative.max(row.iter().cloned().fold(0.0, |m, v| m.max(-v)));
        }
        let base = simulate_current(spec, params, prot, &grid).unwrap();
        let mut scaled = params.clone();
        scaled.conductance *= 2.5;
        let twice = simulate_current(spec, &scaled, prot, &grid).unwrap();
        for (a, b) in base.values.iter().zip(&twice.values) {
            let expected = 2.5 * a;
            if expected != 0.0 {
                worst_linear = worst_linear.max((b - expected).abs() / expected.abs());
            }
        }
    }
    r.check(
        worst_simplex < 1e-8,
        format!(
            "max |sum x - 1| {worst_simplex:.2e} over {} model/protocol pairs",
            combos.len()
        ),
    );
    r.check(
        worst_negative < 1e-8,
        format!("most negative occupancy {:.2e}", -worst_negative),
    );
    r.check(
        worst_linear <= 1e-12,
        format!("max relative deviation from linearity in g {worst_linear:.2e}"),
    );

    let mut at_reversal = 0.0f64;
    for (_, spec, params, _) in &combos {
        let hold = VoltageProtocol::steps(vec![
            Step {
                duration: 100.0,
                voltage: -80.0,
            },
            Step {
                duration: 200.0,
                voltage: params.reversal,
            },
        ])
        .unwrap();
        let grid: Vec<f64> = (0..200).map(|i| 100.0 + i as f64).collect();
        let t = simulate_current(spec, params, &hold, &grid).unwrap();
        at_reversal = at_reversal.max(t.values.iter().map(|v| v.abs()).fold(0.0, f64::max));
    }
    r.check(
        at_reversal == 0.0,
        format!("max |I| while clamped at the reversal potential {at_reversal:.2e}"),
    );
    r.runtime(Duration::from_secs(5 * 60));
    r.finish();
}
