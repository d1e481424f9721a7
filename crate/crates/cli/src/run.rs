//! One function per subcommand. Each returns its metrics, extra CSV files
//! and a JSON results block; `main` decides where they go.

use rand::RngCore;
use rayon::prelude::*;
use serde_json::{json, Value};
use stein_core::aggregation::{mean_mse, rate_slope, simulate_rates, RateConfig};
use stein_core::discrete::{BaseDistribution, ContinuousParameterization};
use stein_core::gof::gof_test;
use stein_core::kernels::KernelSpec;
use stein_core::ksd::{bbis_error_bound, bbis_weights, bbis_weights_matrix, stein_kernel_matrix, BbisOptions, SteinKernelMatrix};
use stein_core::mat::{mean, std_dev, Mat};
use stein_core::models::{
    brute_force_distribution, brute_force_means, finite_difference_score, gaussian_target, sample_exact, state_from_index,
    ContinuousTarget, Proposal, ScoreHidden, Shifted,
};
use stein_core::rng::{stream, substream};
use stein_core::steinis::{path_integration_logz, run_steinis, PathConfig, SteinIsConfig};
use stein_core::svgd::{linear_betas, run_svgd, ParticleEnsemble};
use stein_core::{gfsvgd, SteinError};

use crate::config::*;
use crate::output::{fmt_f64, Metrics, Table};

#[derive(Debug)]
pub enum RunError {
    Config(String),
    Stein(SteinError),
    Io(String),
}

impl From<SteinError> for RunError {
    fn from(e: SteinError) -> Self {
        RunError::Stein(e)
    }
}

pub type RunResult<T> = Result<T, RunError>;

pub enum FileBody {
    Table(Table),
    Records { header: Vec<&'static str>, rows: Vec<Vec<String>> },
}

#[derive(Default)]
pub struct Output {
    pub metrics: Metrics,
    pub files: Vec<(&'static str, FileBody)>,
    pub results: Value,
}

fn need_proposal<'a>(b: &'a Built, role: &str) -> RunResult<&'a dyn Proposal> {
    b.proposal().ok_or_else(|| RunError::Config(format!("{role} must be a distribution we can sample (gaussian or mixture)")))
}

fn positive(v: usize, what: &str) -> RunResult<()> {
    if v == 0 {
        return Err(RunError::Config(format!("{what} must be positive")));
    }
    Ok(())
}

fn draw(p: &dyn Proposal, n: usize, rng: &mut dyn RngCore) -> RunResult<Mat> {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| p.sample(rng)).collect();
    Ok(Mat::from_rows(&rows)?)
}

fn check_dims(a: &dyn ContinuousTarget, b: usize, what: &str) -> RunResult<()> {
    if a.dim() != b {
        return Err(RunError::Config(format!("{what} has dimension {b}, target has {}", a.dim())));
    }
    Ok(())
}

fn samples_table(m: &Mat) -> FileBody {
    FileBody::Table(Table { header: Table::coords(m.cols()), rows: m.to_rows() })
}

/// Squared KSD (V-statistic) of the particles against the target's score.
fn ksd2(points: &Mat, target: &dyn ContinuousTarget, kernel: &KernelSpec) -> stein_core::Result<f64> {
    let h = kernel.resolve(points)?;
    Ok(stein_kernel_matrix(points, target, h)?.v_statistic())
}

/// Observer that records KSD and coordinate means every `every` iterations
/// plus the final one. Errors are kept until the run returns.
struct Recorder<'a> {
    target: &'a dyn ContinuousTarget,
    kernel: &'a KernelSpec,
    every: usize,
    last: usize,
    metrics: Metrics,
    error: Option<SteinError>,
}

impl Recorder<'_> {
    fn observe(&mut self, ens: &ParticleEnsemble) {
        let it = ens.iteration;
        if self.error.is_some() || !(it % self.every == 0 || it == self.last) {
            return;
        }
        match ksd2(&ens.positions, self.target, self.kernel) {
            Ok(v) => self.metrics.push(it, "ksd2", v),
            Err(e) => self.error = Some(e),
        }
        self.metrics.extend_means(it, "mean", &ens.positions.column_means());
    }

    fn finish(self) -> RunResult<Metrics> {
        match self.error {
            Some(e) => Err(e.into()),
            None => Ok(self.metrics),
        }
    }
}

fn final_summary(ens: &ParticleEnsemble, target: &dyn ContinuousTarget, kernel: &KernelSpec) -> RunResult<Value> {
    Ok(json!({
        "iterations": ens.iteration,
        "final_ksd2": ksd2(&ens.positions, target, kernel)?,
        "final_mean": ens.positions.column_means(),
    }))
}

pub fn svgd(c: &SvgdConfig, seed: u64) -> RunResult<Output> {
    positive(c.n, "n")?;
    positive(c.record_every, "record_every")?;
    let target = c.target.build()?;
    let init = c.init.build()?;
    let q0 = need_proposal(&init, "init")?;
    check_dims(target.target(), q0.dim(), "init")?;
    let x0 = draw(q0, c.n, &mut stream(seed, 0))?;
    let t = target.target();
    let mut rec = Recorder { target: t, kernel: &c.kernel, every: c.record_every, last: c.iters, metrics: Metrics::default(), error: None };
    let ens = run_svgd(ParticleEnsemble::new(x0)?, t, c.iters, &c.kernel, &c.schedule, |e| rec.observe(e))?;
    let metrics = rec.finish()?;
    let results = final_summary(&ens, t, &c.kernel)?;
    Ok(Output { metrics, files: vec![("samples.csv", samples_table(&ens.positions))], results })
}

pub fn gfsvgd(c: &GfSvgdConfig, seed: u64) -> RunResult<Output> {
    positive(c.n, "n")?;
    positive(c.record_every, "record_every")?;
    let target = c.target.build()?;
    let t = target.target();
    let surrogate = c.surrogate.as_ref().map(|s| s.build()).transpose()?;
    let rho = surrogate.as_ref().map(|s| s.target()).unwrap_or(t);
    check_dims(t, rho.dim(), "surrogate")?;
    let init = c.init.build()?;
    let q0 = need_proposal(&init, "init")?;
    check_dims(t, q0.dim(), "init")?;
    let x0 = draw(q0, c.n, &mut stream(seed, 0))?;
    // the dynamics only see log-density values of the target
    let blind = ScoreHidden(t);
    let mut rec = Recorder { target: t, kernel: &c.kernel, every: c.record_every, last: c.iters, metrics: Metrics::default(), error: None };
    let (ens, ess) =
        gfsvgd::run_gf_svgd(ParticleEnsemble::new(x0)?, &blind, rho, c.iters, &c.kernel, &c.schedule, &c.weights.options(), |e| {
            rec.observe(e)
        })?;
    let mut metrics = rec.finish()?;
    for (i, v) in ess.iter().enumerate() {
        metrics.push(i, "ess", *v);
    }
    let mut results = final_summary(&ens, t, &c.kernel)?;
    results["min_ess"] = json!(ess.iter().copied().fold(f64::INFINITY, f64::min));
    Ok(Output { metrics, files: vec![("samples.csv", samples_table(&ens.positions))], results })
}

pub fn agf_svgd(c: &AgfSvgdConfig, seed: u64) -> RunResult<Output> {
    positive(c.n, "n")?;
    let target = c.target.build()?;
    let t = target.target();
    let base = c.base.build()?;
    let q0 = need_proposal(&base, "base")?;
    check_dims(t, q0.dim(), "base")?;
    let betas = match &c.betas {
        Some(b) => b.clone(),
        None => {
            positive(c.steps, "steps")?;
            linear_betas(c.steps)
        }
    };
    let x0 = draw(q0, c.n, &mut stream(seed, 0))?;
    let blind = ScoreHidden(t);
    let mut rec = Recorder { target: t, kernel: &c.kernel, every: 1, last: betas.len().saturating_sub(1), metrics: Metrics::default(), error: None };
    let (ens, ess) = gfsvgd::run_agf_svgd(
        ParticleEnsemble::new(x0)?,
        &blind,
        base.target(),
        &betas,
        &c.kernel,
        &c.schedule,
        c.smoothing.bandwidth,
        &c.weights.options(),
        |e| rec.observe(e),
    )?;
    let mut metrics = rec.finish()?;
    for (i, (v, b)) in ess.iter().zip(betas.iter().skip(1)).enumerate() {
        metrics.push(i, "ess", *v);
        metrics.push(i, "beta", *b);
    }
    let results = final_summary(&ens, t, &c.kernel)?;
    Ok(Output { metrics, files: vec![("samples.csv", samples_table(&ens.positions))], results })
}

fn default_proposal(spec: &Option<ContinuousSpec>, dim: usize, variance: f64) -> RunResult<Built> {
    match spec {
        Some(s) => Ok(s.build()?),
        None => Ok(Built::Sampleable(Box::new(gaussian_target(vec![0.0; dim], variance)?))),
    }
}

fn spread(values: &[f64]) -> Value {
    json!({ "mean": mean(values), "sd": if values.len() > 1 { std_dev(values) } else { 0.0 } })
}

pub fn steinis(c: &SteinIsSection, seed: u64) -> RunResult<Output> {
    positive(c.trials, "trials")?;
    let target = c.target.build()?;
    let t = Shifted { inner: target.target(), shift: c.log_scale };
    let prop = default_proposal(&c.proposal, t.dim(), 4.0)?;
    let q0 = need_proposal(&prop, "proposal")?;
    check_dims(&t, q0.dim(), "proposal")?;
    let cfg = SteinIsConfig {
        n_leaders: c.leaders,
        n_followers: c.followers,
        iterations: c.iterations,
        kernel: c.kernel,
        schedule: c.schedule,
        det_mode: c.det_mode,
        max_halvings: c.max_halvings,
    };
    let runs: Vec<_> = (0..c.trials)
        .into_par_iter()
        .map(|k| run_steinis(&t, q0, &cfg, &mut stream(seed, k as u64)))
        .collect::<stein_core::Result<Vec<_>>>()?;
    let mut metrics = Metrics::default();
    for (k, r) in runs.iter().enumerate() {
        metrics.push(k, "log_z", r.log_z_hat);
        metrics.push(k, "z", r.z_hat);
        metrics.push(k, "ess", r.sample.ess());
    }
    let z: Vec<f64> = runs.iter().map(|r| r.z_hat).collect();
    let log_z: Vec<f64> = runs.iter().map(|r| r.log_z_hat).collect();
    let first = &runs[0].sample;
    let mut header = Table::coords(first.positions.cols());
    header.push("log_weight".into());
    let rows = first.positions.iter_rows().zip(&first.log_weights).map(|(x, w)| x.iter().copied().chain([*w]).collect()).collect();
    let results = json!({ "trials": c.trials, "z": spread(&z), "log_z": spread(&log_z) });
    Ok(Output { metrics, files: vec![("samples.csv", FileBody::Table(Table { header, rows }))], results })
}

pub fn path_logz(c: &PathSection, seed: u64) -> RunResult<Output> {
    positive(c.trials, "trials")?;
    let target = c.target.build()?;
    let t = Shifted { inner: target.target(), shift: c.log_scale };
    let prop = default_proposal(&c.proposal, t.dim(), 2.0)?;
    let q0 = need_proposal(&prop, "proposal")?;
    check_dims(&t, q0.dim(), "proposal")?;
    let cfg = PathConfig { n: c.n, iterations: c.iterations, kernel: c.kernel, schedule: c.schedule, m0: c.m0 };
    let runs: Vec<_> = (0..c.trials)
        .into_par_iter()
        .map(|k| path_integration_logz(&t, q0, &cfg, &mut stream(seed, k as u64)))
        .collect::<stein_core::Result<Vec<_>>>()?;
    let mut metrics = Metrics::default();
    for (k, r) in runs.iter().enumerate() {
        metrics.push(k, "log_z", r.log_z);
        metrics.push(k, "kl_drop", r.kl_drop);
        metrics.push(k, "log_ratio", r.log_ratio);
    }
    let trace = FileBody::Records {
        header: vec!["trial", "step", "ksd2"],
        rows: runs
            .iter()
            .enumerate()
            .flat_map(|(k, r)| r.ksd_trace.iter().enumerate().map(move |(i, v)| vec![k.to_string(), i.to_string(), fmt_f64(*v)]))
            .collect(),
    };
    let log_z: Vec<f64> = runs.iter().map(|r| r.log_z).collect();
    Ok(Output { metrics, files: vec![("ksd_trace.csv", trace)], results: json!({ "trials": c.trials, "log_z": spread(&log_z) }) })
}

/// Exact site means, or `None` when the state space is too large to enumerate.
fn exact_means(model: &stein_core::discrete::DiscreteModel) -> RunResult<Option<Vec<f64>>> {
    match brute_force_means(model.as_target()) {
        Ok(m) => Ok(Some(m)),
        Err(SteinError::ResourceLimit(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

pub fn discrete_sample(c: &DiscreteSampleConfig, seed: u64) -> RunResult<Output> {
    positive(c.n, "n")?;
    let model = c.model.build()?;
    let t = model.as_target();
    let param = ContinuousParameterization::new(t.dims(), t.alphabet().to_vec(), c.base.clone())?;
    let out = stein_core::discrete::sample_discrete(
        &model,
        &param,
        c.surrogate,
        c.n,
        c.iters,
        &c.kernel,
        &c.schedule,
        &c.weights.options(),
        &mut stream(seed, 0),
    )?;
    let mut metrics = Metrics::default();
    for (i, v) in out.ess.iter().enumerate() {
        metrics.push(i, "ess", *v);
    }
    let d = t.dims();
    let site_means: Vec<f64> = (0..d).map(|j| out.states.iter().map(|s| s[j]).sum::<f64>() / c.n as f64).collect();
    let mut results = json!({ "n": c.n, "site_means": site_means, "min_ess": out.ess.iter().copied().fold(f64::INFINITY, f64::min) });
    if let Some(exact) = exact_means(&model)? {
        let err = site_means.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        results["exact_site_means"] = json!(exact);
        results["max_site_error"] = json!(err);
    }
    let states = FileBody::Table(Table { header: Table::coords(d), rows: out.states });
    Ok(Output { metrics, files: vec![("samples.csv", states)], results })
}

fn read_states(path: &str, dims: usize) -> RunResult<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| RunError::Io(format!("{path}: {e}")))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| RunError::Config(format!("{path}: {e}")))?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| RunError::Config(format!("{path} line {}: '{f}' is not a number", i + 1))))
            .collect::<RunResult<Vec<f64>>>()?;
        if row.len() != dims {
            return Err(RunError::Config(format!("{path} line {}: expected {dims} values, found {}", i + 1, row.len())));
        }
        out.push(row);
    }
    Ok(out)
}

pub fn gof(c: &GofSection, seed: u64) -> RunResult<Output> {
    positive(c.repetitions, "repetitions")?;
    let model = c.model.build()?;
    let t = model.as_target();
    let param = ContinuousParameterization::for_target(t)?;
    let file_data = match &c.data {
        DataSpec::File { path } => Some(read_states(path, t.dims())?),
        DataSpec::Sample { .. } => None,
    };
    let source = match &c.data {
        DataSpec::Sample { model: Some(m), .. } => Some(m.build()?),
        _ => None,
    };
    if let Some(s) = &source {
        if s.as_target().dims() != t.dims() || s.as_target().alphabet() != t.alphabet() {
            return Err(RunError::Config("data model must share the tested model's dimension and alphabet".into()));
        }
    }
    let reports = (0..c.repetitions)
        .into_par_iter()
        .map(|r| {
            let test_seed = substream(seed, r as u64, 0).next_u64();
            let z = match (&c.data, &file_data) {
                (_, Some(z)) => z.clone(),
                (DataSpec::Sample { n, .. }, None) => {
                    let src = source.as_ref().unwrap_or(&model);
                    sample_exact(src.as_target(), *n, &mut substream(seed, r as u64, 1))?
                }
                (DataSpec::File { .. }, None) => unreachable!("file data is read up front"),
            };
            gof_test(&z, &model, &param, &c.test, test_seed)
        })
        .collect::<stein_core::Result<Vec<_>>>()?;
    let mut metrics = Metrics::default();
    for (r, rep) in reports.iter().enumerate() {
        metrics.push(r, "statistic", rep.statistic);
        metrics.push(r, "critical_value", rep.critical_value);
        metrics.push(r, "p_value", rep.p_value);
        metrics.push(r, "reject", if rep.reject { 1.0 } else { 0.0 });
    }
    let rate = reports.iter().filter(|r| r.reject).count() as f64 / reports.len() as f64;
    let results = if reports.len() == 1 {
        json!({ "report": reports[0] })
    } else {
        json!({ "repetitions": reports.len(), "rejection_rate": rate })
    };
    Ok(Output { metrics, files: Vec::new(), results })
}

pub fn bbis(c: &BbisSection, seed: u64) -> RunResult<Output> {
    positive(c.n, "n")?;
    positive(c.trials, "trials")?;
    let target = c.target.build()?;
    let t = target.target();
    let surrogate = c.surrogate.as_ref().map(|s| s.build()).transpose()?;
    if let Some(s) = &surrogate {
        check_dims(t, s.target().dim(), "surrogate")?;
    }
    let prop = c.proposal.build()?;
    let q = need_proposal(&prop, "proposal")?;
    check_dims(t, q.dim(), "proposal")?;
    let truth = c.target.mean()?;
    let opts = BbisOptions { max_iter: c.max_iter, tol: c.tol };
    let blind = ScoreHidden(t);
    let trials = (0..c.trials)
        .into_par_iter()
        .map(|k| -> RunResult<_> {
            let x = draw(q, c.n, &mut stream(seed, k as u64))?;
            let h = c.kernel.resolve(&x)?;
            let (res, km): (_, SteinKernelMatrix) = match &surrogate {
                Some(s) => bbis_weights(&x, s.target(), &blind, h, opts)?,
                None => {
                    let km = stein_kernel_matrix(&x, t, h)?;
                    (bbis_weights_matrix(&km.values, opts)?, km)
                }
            };
            let bound = bbis_error_bound(&res.weights, &km)?;
            let weighted: Vec<f64> = (0..x.cols()).map(|j| x.iter_rows().zip(&res.weights).map(|(r, w)| w * r[j]).sum()).collect();
            Ok((res, bound, weighted, x.column_means()))
        })
        .collect::<RunResult<Vec<_>>>()?;
    let mut metrics = Metrics::default();
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
    let mut errs = (Vec::new(), Vec::new());
    for (k, (res, bound, weighted, plain)) in trials.iter().enumerate() {
        metrics.push(k, "objective", res.objective);
        metrics.push(k, "error_bound", *bound);
        metrics.push(k, "iterations", res.iterations as f64);
        metrics.push(k, "converged", if res.converged { 1.0 } else { 0.0 });
        if let Some(m) = &truth {
            let (a, b) = (sq(weighted, m), sq(plain, m));
            metrics.push(k, "mse_weighted", a);
            metrics.push(k, "mse_uniform", b);
            errs.0.push(a);
            errs.1.push(b);
        }
    }
    let mut results = json!({
        "trials": c.trials,
        "error_bound": spread(&trials.iter().map(|t| t.1).collect::<Vec<_>>()),
        "converged": trials.iter().filter(|t| t.0.converged).count(),
    });
    if truth.is_some() {
        let wins = errs.0.iter().zip(&errs.1).filter(|(a, b)| a < b).count();
        results["mse_weighted"] = json!(mean(&errs.0));
        results["mse_uniform"] = json!(mean(&errs.1));
        results["wins"] = json!(wins);
    }
    Ok(Output { metrics, files: Vec::new(), results })
}

pub fn aggregate(c: &RateConfig, seed: u64) -> RunResult<Output> {
    let rows = simulate_rates(c, seed)?;
    let mut metrics = Metrics::default();
    let mut slopes = serde_json::Map::new();
    for m in &c.methods {
        for (n, v) in mean_mse(&rows, *m) {
            metrics.push(n, format!("mse_{}", m.tag()), v);
        }
        let s = if c.grid.len() > 1 { json!(rate_slope(&rows, *m)) } else { Value::Null };
        slopes.insert(m.tag().to_string(), s);
    }
    let records = rows.iter().map(|r| vec![r.method.tag().to_string(), r.d.to_string(), r.n.to_string(), r.trial.to_string(), fmt_f64(r.mse)]).collect();
    let rates = FileBody::Records { header: vec!["method", "d", "n", "trial", "mse"], rows: records };
    Ok(Output { metrics, files: vec![("rates.csv", rates)], results: json!({ "slopes": slopes }) })
}

pub fn oracle(c: &OracleConfig, seed: u64) -> RunResult<Output> {
    match c {
        OracleConfig::BruteForce { model } => {
            let model = model.build()?;
            let t = model.as_target();
            let probs = brute_force_distribution(t)?;
            let means = brute_force_means(t)?;
            let mut header = vec!["index".to_string()];
            header.extend(Table::coords(t.dims()));
            header.push("probability".into());
            let rows = probs
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut r = vec![i as f64];
                    r.extend(state_from_index(i, t.dims(), t.alphabet()));
                    r.push(*p);
                    r
                })
                .collect();
            let mut metrics = Metrics::default();
            metrics.extend_means(0, "mean", &means);
            let files = vec![("distribution.csv", FileBody::Table(Table { header, rows }))];
            Ok(Output { metrics, files, results: json!({ "states": probs.len(), "site_means": means }) })
        }
        OracleConfig::ScoreCheck { model, points, spread } => {
            positive(*points, "points")?;
            if !(*spread > 0.0) {
                return Err(RunError::Config("spread must be positive".into()));
            }
            let built = model.build()?;
            let t = built.target();
            let probe = gaussian_target(vec![0.0; t.dim()], spread * spread)?;
            let x = draw(&probe, *points, &mut stream(seed, 0))?;
            let mut metrics = Metrics::default();
            let mut worst: f64 = 0.0;
            for (i, p) in x.iter_rows().enumerate() {
                let an = t.score(p).ok_or_else(|| RunError::Config("model has no analytic score".into()))?;
                let fd = finite_difference_score(t, p, 1e-5)?;
                let num = an.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                let den = an.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
                metrics.push(i, "relative_error", num / den);
                worst = worst.max(num / den);
            }
            Ok(Output { metrics, files: Vec::new(), results: json!({ "points": points, "max_relative_error": worst }) })
        }
        OracleConfig::Partition { k, base } => {
            if *k < 2 {
                return Err(RunError::Config("partition needs k >= 2".into()));
            }
            let alphabet: Vec<f64> = (0..*k).map(|i| i as f64).collect();
            let p = ContinuousParameterization::new(1, alphabet, base.clone())?;
            let masses = bin_masses(&p.thresholds, base);
            let mut metrics = Metrics::default();
            for (i, m) in masses.iter().enumerate() {
                metrics.push(i, "mass", *m);
            }
            Ok(Output { metrics, files: Vec::new(), results: json!({ "thresholds": p.thresholds, "masses": masses }) })
        }
    }
}

/// Base mass of each bin between consecutive inner cut points.
fn bin_masses(thresholds: &[f64], base: &BaseDistribution) -> Vec<f64> {
    let cuts: Vec<f64> = std::iter::once(f64::NEG_INFINITY).chain(thresholds.iter().copied()).chain([f64::INFINITY]).collect();
    cuts.windows(2).map(|w| base.cdf(w[1]) - base.cdf(w[0])).collect()
}
