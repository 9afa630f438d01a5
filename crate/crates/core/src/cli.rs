//! Batch runner: one JSON config per experiment, CSV/JSON outputs and a
//! manifest with checksums.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bounds::{
    explosion_report, sandwich_multi, transport_value, write_reports_csv, zero_noise_report, BoundKind, BoundParams,
    BoundReport, BoundsError, PairSetup,
};
use crate::kernels::{aronson_fit, draw_probes, invariant_sandwich_residual, AronsonFit, KernelError, TransitionKernel};
use crate::measures::{discretize_gaussian, GridMeasure, GridSpec, MeasureError, MeasureSpec, WeightedPoints};
use crate::schrodinger::{
    fit_longtime_constant, longtime_limits, schrodinger_lower_rhs_best, schrodinger_upper_rhs,
    schrodinger_value_sweep, write_sweep_csv, SchrodingerError, SinkhornOptions,
};
use crate::sde::{
    compressed_control_cost, cost_r, delayed_bridge_cost, simulate_bridge, BridgeSetup, CouplingSampler, Endpoints,
    FixedPair, GaussianMonotone, PairSampler, SdeError, SimOptions,
};
use crate::stats::{ks_normal, variance_stderr};
use crate::transport::{solve_exact, solve_quantile_1d, Coupling, TransportError, TransportResult};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INCOMPLETE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// File listing the configs a suite directory must contain.
pub const SUITE_INDEX: &str = "suite.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numerical(_) | CliError::Io(_) => EXIT_NUMERICAL,
        }
    }
}

macro_rules! numerical_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Numerical(e.to_string())
            }
        }
    )*};
}
numerical_from!(BoundsError, SdeError, SchrodingerError, TransportError, KernelError, MeasureError, csv::Error, serde_json::Error);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Transport,
    Schrodinger,
    Bridge,
    BoundsSweep,
    Longtime,
    ZeroNoise,
    Explosion,
    #[serde(rename = "collapse-r-lt-1")]
    CollapseRLt1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Monte Carlo slack in standard errors for expected values.
    pub stderrs: f64,
    pub sinkhorn_tol: f64,
    pub sinkhorn_max_iter: usize,
    /// `|v^S(t_max) - H(Q|m)|` allowed by the long-time check.
    pub longtime_abs: f64,
    /// Probes for the Aronson certificate; 0 skips it.
    pub aronson_probes: usize,
    /// Largest allowed `max / min` of `t v^S(t)` over the sweep.
    pub t_vs_spread: f64,
    /// Target for `envelope(n_last) / envelope(n_first)` in the collapse run.
    pub envelope_ratio: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            stderrs: 3.0,
            sinkhorn_tol: 1e-9,
            sinkhorn_max_iter: 50_000,
            longtime_abs: 0.05,
            aronson_probes: 0,
            t_vs_spread: 10.0,
            envelope_ratio: 0.1,
        }
    }
}

/// Constants of the general-cost comparison `L <= C |u|^r + C'`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeConstants {
    pub scale: f64,
    pub shift: f64,
}

impl Default for EnvelopeConstants {
    fn default() -> Self {
        EnvelopeConstants { scale: 1.0, shift: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    /// Output file stem; defaults to the config file stem.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub p: Option<MeasureSpec>,
    #[serde(default)]
    pub q: Option<MeasureSpec>,
    #[serde(default)]
    pub kernel: Option<TransitionKernel>,
    /// Bridge noise; defaults to the kernel's sigma.
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub r: Vec<f64>,
    #[serde(default)]
    pub times: Vec<f64>,
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub eps: Vec<f64>,
    #[serde(default)]
    pub deltas: Vec<f64>,
    /// Compression factors `n` for the collapse run.
    #[serde(default)]
    pub compress: Vec<f64>,
    /// Discretization grid for Gaussian marginals in Sinkhorn runs.
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub envelope: EnvelopeConstants,
    /// Expected mean cost at the first exponent (bridge runs).
    #[serde(default)]
    pub expect_value: Option<f64>,
}

fn default_paths() -> usize {
    10_000
}

fn default_substeps() -> usize {
    crate::sde::DEFAULT_SUBSTEPS
}

fn need<'a, T>(v: &'a Option<T>, field: &str) -> Result<&'a T, CliError> {
    v.as_ref().ok_or_else(|| CliError::Config(format!("missing field `{field}`")))
}

fn need_list(v: &[f64], field: &str) -> Result<(), CliError> {
    if v.is_empty() {
        return Err(CliError::Config(format!("`{field}` must be a nonempty list")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(CliError::Config(format!("`{field}` has a non-finite entry")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if cfg.name.is_none() {
            cfg.name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        }
        Ok(cfg)
    }

    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| "run".to_string())
    }

    /// Bridge noise: explicit `sigma`, else the kernel's.
    pub fn noise(&self) -> Result<f64, CliError> {
        match (self.sigma, &self.kernel) {
            (Some(s), _) => Ok(s),
            (None, Some(k)) => Ok(k.sigma()),
            (None, None) => Err(CliError::Config("missing field `sigma` (or `kernel`)".into())),
        }
    }

    /// Checks the fields each experiment needs.
    pub fn validate(&self) -> Result<(), CliError> {
        use Experiment::*;
        if self.n_paths < 2 {
            return Err(CliError::Config("`n_paths` must be at least 2".into()));
        }
        if self.substeps == 0 {
            return Err(CliError::Config("`substeps` must be positive".into()));
        }
        need(&self.p, "p")?;
        need(&self.q, "q")?;
        match self.experiment {
            Transport => need_list(&self.r, "r")?,
            Schrodinger | Longtime => {
                need(&self.kernel, "kernel")?;
                need_list(&self.times, "times")?;
            }
            Bridge => {
                need_list(&self.r, "r")?;
                need(&self.horizon, "horizon")?;
                self.noise()?;
            }
            BoundsSweep | Explosion => {
                need_list(&self.r, "r")?;
                need_list(&self.times, "times")?;
                self.noise()?;
            }
            ZeroNoise => {
                need_list(&self.r, "r")?;
                need_list(&self.eps, "eps")?;
                need(&self.horizon, "horizon")?;
                self.noise()?;
            }
            CollapseRLt1 => {
                need_list(&self.r, "r")?;
                need_list(&self.deltas, "deltas")?;
                need_list(&self.compress, "compress")?;
                need(&self.horizon, "horizon")?;
                self.noise()?;
            }
        }
        Ok(())
    }

    /// SHA-256 of the effective config.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Verdict of one check inside a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStatus {
    pub task: String,
    pub passed: bool,
    pub detail: String,
}

impl TaskStatus {
    fn new(task: &str, passed: bool, detail: String) -> Self {
        TaskStatus {
            task: task.to_string(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub experiment: Experiment,
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub wall_time_s: f64,
    pub tasks: Vec<TaskStatus>,
    pub outputs: Vec<OutputFile>,
    pub error: Option<String>,
    pub passed: bool,
}

impl RunManifest {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            EXIT_OK
        } else {
            EXIT_NUMERICAL
        }
    }
}

/// Collects files written by an experiment.
struct Sink {
    dir: PathBuf,
    stem: String,
    files: Vec<PathBuf>,
}

impl Sink {
    fn path(&mut self, suffix: &str) -> PathBuf {
        let p = self.dir.join(format!("{}_{suffix}", self.stem));
        self.files.push(p.clone());
        p
    }

    fn json<T: Serialize>(&mut self, suffix: &str, value: &T) -> Result<(), CliError> {
        let p = self.path(suffix);
        fs::write(p, serde_json::to_string_pretty(value)? + "\n")?;
        Ok(())
    }

    fn csv<T: Serialize>(&mut self, suffix: &str, rows: &[T]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(self.path(suffix))?;
        for row in rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn checksum(path: &Path) -> Result<OutputFile, CliError> {
    let bytes = fs::read(path)?;
    Ok(OutputFile {
        path: path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        bytes: bytes.len() as u64,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub dump_paths: bool,
}

/// Runs one experiment and writes its outputs plus `<name>_manifest.json` into `out`.
///
/// Numerical errors are recorded in the manifest; only I/O on the output
/// directory itself is returned as an error.
pub fn run(cfg: &ExperimentConfig, out: &Path, opts: RunOptions) -> Result<RunManifest, CliError> {
    fs::create_dir_all(out)?;
    let start = Instant::now();
    let mut sink = Sink {
        dir: out.to_path_buf(),
        stem: cfg.name(),
        files: Vec::new(),
    };
    let result = dispatch(cfg, &mut sink, opts);
    let (tasks, error) = match result {
        Ok(tasks) => (tasks, None),
        Err(e) => (Vec::new(), Some(e.to_string())),
    };
    let outputs = sink
        .files
        .iter()
        .filter(|p| p.exists())
        .map(|p| checksum(p))
        .collect::<Result<Vec<_>, _>>()?;
    let passed = error.is_none() && tasks.iter().all(|t| t.passed);
    let manifest = RunManifest {
        name: cfg.name(),
        experiment: cfg.experiment,
        config_hash: cfg.hash(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        wall_time_s: start.elapsed().as_secs_f64(),
        tasks,
        outputs,
        error,
        passed,
    };
    fs::write(
        out.join(format!("{}_manifest.json", cfg.name())),
        serde_json::to_string_pretty(&manifest).map_err(CliError::from)? + "\n",
    )?;
    Ok(manifest)
}

fn dispatch(cfg: &ExperimentConfig, sink: &mut Sink, opts: RunOptions) -> Result<Vec<TaskStatus>, CliError> {
    use Experiment::*;
    match cfg.experiment {
        Transport => run_transport(cfg, sink),
        Schrodinger => run_schrodinger(cfg, sink),
        Bridge => run_bridge(cfg, sink, opts),
        BoundsSweep => run_bounds_sweep(cfg, sink),
        Longtime => run_longtime(cfg, sink),
        ZeroNoise => run_zero_noise(cfg, sink),
        Explosion => run_explosion(cfg, sink),
        CollapseRLt1 => run_collapse(cfg, sink),
    }
}

fn measures(cfg: &ExperimentConfig) -> Result<(&MeasureSpec, &MeasureSpec), CliError> {
    Ok((need(&cfg.p, "p")?, need(&cfg.q, "q")?))
}

/// Owned endpoint law for the bridge estimators.
pub enum PairSource {
    Plan(Coupling),
    Fixed(FixedPair),
    Gaussian(GaussianMonotone),
}

impl PairSource {
    /// Optimal plan for discrete pairs (stratified), monotone map for 1-D Gaussians.
    pub fn new(p: &MeasureSpec, q: &MeasureSpec, r: f64) -> Result<Self, CliError> {
        match (p, q) {
            (MeasureSpec::Discrete(a), MeasureSpec::Discrete(b)) => {
                if a.weights().len() == 1 && b.weights().len() == 1 {
                    Ok(PairSource::Fixed(FixedPair {
                        dim: a.dim(),
                        y: a.points()[0],
                        z: b.points()[0],
                    }))
                } else {
                    Ok(PairSource::Plan(solve_exact(a, b, r.max(1.0))?.coupling))
                }
            }
            (MeasureSpec::Gaussian(a), MeasureSpec::Gaussian(b)) => {
                Ok(PairSource::Gaussian(GaussianMonotone::new(a.clone(), b.clone())?))
            }
            _ => Err(CliError::Config(
                "bridge endpoints need two discrete measures or two 1-D Gaussians".into(),
            )),
        }
    }

    pub fn endpoints(&self) -> Endpoints<'_> {
        match self {
            PairSource::Plan(c) => Endpoints::Coupling(c),
            PairSource::Fixed(f) => Endpoints::Sampler(f),
            PairSource::Gaussian(g) => Endpoints::Sampler(g),
        }
    }

    /// A per-path sampler; plans are sampled instead of stratified.
    pub fn sampler(&self) -> Result<Box<dyn PairSampler + '_>, CliError> {
        Ok(match self {
            PairSource::Plan(c) => Box::new(CouplingSampler::new(c)?),
            PairSource::Fixed(f) => Box::new(*f),
            PairSource::Gaussian(g) => Box::new(g.clone()),
        })
    }
}

#[derive(Serialize)]
struct TransportRow {
    r: f64,
    #[serde(flatten)]
    result: TransportResult,
    marginal_error: f64,
}

fn run_transport(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Vec<TaskStatus>, CliError> {
    let (p, q) = measures(cfg)?;
    let mut rows = Vec::new();
    for &r in &cfg.r {
        let (result, a, b) = match (p, q) {
            (MeasureSpec::Discrete(a), MeasureSpec::Discrete(b)) => {
                (solve_exact(a, b, r)?, a.weights().to_vec(), b.weights().to_vec())
            }
            (MeasureSpec::Grid(a), MeasureSpec::Grid(b)) => (solve_quantile_1d(a, b, r)?, a.masses(), b.masses()),
            _ => return Err(CliError::Config("transport needs two discrete or two 1-D grid measures".into())),
        };
        let marginal_error = result.coupling.marginal_error(&a, &b);
        rows.push(TransportRow { r, result, marginal_error });
    }
    let worst = rows.iter().map(|row| row.marginal_error).fold(0.0, f64::max);
    sink.json("transport.json", &rows)?;
    Ok(vec![TaskStatus::new(
        "marginals",
        worst <= 1e-9,
        format!("worst marginal error {worst:e}"),
    )])
}

fn on_grid(m: &MeasureSpec, grid: Option<&GridSpec>) -> Result<GridMeasure, CliError> {
    match m {
        MeasureSpec::Grid(g) => Ok(g.clone()),
        MeasureSpec::Gaussian(g) => {
            let grid = grid.ok_or_else(|| CliError::Config("Gaussian marginals need a `grid`".into()))?;
            Ok(discretize_gaussian(g, grid)?)
        }
        MeasureSpec::Discrete(_) => Err(CliError::Config("Sinkhorn runs need grid or Gaussian marginals".into())),
    }
}

fn sinkhorn_options(cfg: &ExperimentConfig) -> SinkhornOptions {
    SinkhornOptions {
        tol: cfg.tolerances.sinkhorn_tol,
        max_iter: cfg.tolerances.sinkhorn_max_iter,
        init: None,
    }
}

/// Aronson constant on `[0, horizon]` plus the invariant-density sandwich when an invariant law exists.
#[derive(Debug, Clone, Serialize)]
pub struct AronsonCertificate {
    pub fit: AronsonFit,
    pub invariant_residual: Option<f64>,
}

impl AronsonCertificate {
    pub fn tasks(&self) -> Vec<TaskStatus> {
        let mut out = vec![TaskStatus::new(
            "aronson_kernel_bounds",
            self.fit.residual <= 0.0,
            format!("C = {:.4}, worst log-violation {:.3e}", self.fit.c_tilde, self.fit.residual),
        )];
        if let Some(res) = self.invariant_residual {
            out.push(TaskStatus::new(
                "aronson_invariant_sandwich",
                res <= 0.0,
                format!("worst log-violation {res:.3e}"),
            ));
        }
        out
    }
}

pub fn aronson_certificate(k: &TransitionKernel, horizon: f64, probes: usize, seed: u64) -> Result<AronsonCertificate, CliError> {
    let fit = aronson_fit(k, horizon, probes, seed)?;
    let invariant_residual = match k.invariant_law() {
        Ok(_) => {
            let ys: Vec<_> = draw_probes(k.dim(), horizon, fit.box_half_width, probes, seed ^ 0x5EED)
                .iter()
                .map(|p| p.y)
                .collect();
            Some(invariant_sandwich_residual(k, &fit, &ys)?)
        }
        Err(KernelError::NoInvariant) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(AronsonCertificate { fit, invariant_residual })
}

fn run_schrodinger(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Vec<TaskStatus>, CliError> {
    let (p, q) = measures(cfg)?;
    let k = need(&cfg.kernel, "kernel")?;
    let (pg, qg) = (on_grid(p, cfg.grid.as_ref())?, on_grid(q, cfg.grid.as_ref())?);
    let opts = sinkhorn_options(cfg);
    let rows = schrodinger_value_sweep(&pg, &qg, k, &cfg.times, &opts)?;
    write_sweep_csv(&rows, &sink.path("sweep.csv"))?;
    let worst = rows.iter().map(|r| r.residual).fold(0.0, f64::max);
    let mut tasks = vec![TaskStatus::new(
        "marginal_residual",
        worst <= opts.tol,
        format!("worst residual {worst:e}"),
    )];
    let t_vs: Vec<f64> = rows.iter().map(|r| r.t_v_s).collect();
    let (lo, hi) = t_vs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    tasks.push(TaskStatus::new(
        "t_vS_bounded",
        lo > 0.0 && hi / lo <= cfg.tolerances.t_vs_spread,
        format!("t vS in [{lo:.4}, {hi:.4}]"),
    ));
    let horizon = cfg.times.iter().copied().fold(0.0, f64::max);
    if cfg.tolerances.aronson_probes > 0 {
        let cert = aronson_certificate(k, horizon, cfg.tolerances.aronson_probes, cfg.seed)?;
        sink.json("aronson.json", &cert)?;
        tasks.extend(cert.tasks());
        if matches!(k, TransitionKernel::Heat { .. }) && k.dim() == 1 {
            let t2 = transport_value(&MeasureSpec::Grid(pg.clone()), &MeasureSpec::Grid(qg.clone()), 2.0)?;
            let mut reports = Vec::new();
            for row in &rows {
                let params = BoundParams {
                    r: 2.0,
                    sigma: k.sigma_norm(),
                    eps: None,
                    t_r: t2,
                };
                let upper = schrodinger_upper_rhs(row.t, &pg, &qg, cert.fit.c_tilde, k.dim())?;
                let (lower, eps) = schrodinger_lower_rhs_best(row.t, t2, k.lambda_sup(), k.sigma_norm(), 0.0);
                reports.push(BoundReport::exact("schrodinger_upper", BoundKind::Upper, row.t, row.v_s, upper, params));
                reports.push(BoundReport::exact(
                    "schrodinger_lower",
                    BoundKind::Lower,
                    row.t,
                    row.v_s,
                    lower,
                    BoundParams { eps: Some(eps), ..params },
                ));
            }
            write_reports_csv(&reports, &sink.path("bounds.csv"))?;
            let bad = reports.iter().filter(|r| !r.satisfied).count();
            tasks.push(TaskStatus::new(
                "schrodinger_sandwich",
                bad == 0,
                format!("{bad} of {} comparisons violated", reports.len()),
            ));
        }
    }
    Ok(tasks)
}

#[derive(Serialize)]
struct CostRow {
    r: f64,
    mean: f64,
    stderr: f64,
    n_paths: usize,
    truncation_time: Option<f64>,
    truncation_bias: Option<f64>,
}

#[derive(Serialize)]
struct MarginalRow {
    t: f64,
    mean: f64,
    var: f64,
    var_stderr: f64,
    ks_statistic: Option<f64>,
    ks_pass: Option<bool>,
}

fn run_bridge(cfg: &ExperimentConfig, sink: &mut Sink, opts: RunOptions) -> Result<Vec<TaskStatus>, CliError> {
    let (p, q) = measures(cfg)?;
    let horizon = *need(&cfg.horizon, "horizon")?;
    let sigma = cfg.noise()?;
    let source = PairSource::new(p, q, cfg.r[0])?;
    let sampler = source.sampler()?;
    let setup = BridgeSetup {
        sigma,
        horizon,
        substeps: cfg.substeps,
        n_paths: cfg.n_paths,
        seed: cfg.seed,
    };
    let sim = SimOptions {
        record: cfg.times.clone(),
        record_all: opts.dump_paths,
        ..SimOptions::with_costs(&cfg.r)
    };
    let e = simulate_bridge(sampler.as_ref(), sigma, setup.grid(0.0)?, cfg.n_paths, cfg.seed, &sim)?;
    if opts.dump_paths {
        e.write_binary(&sink.path("paths.bin"))?;
    }
    let costs = cfg
        .r
        .iter()
        .map(|&r| cost_r(&e, r, None))
        .collect::<Result<Vec<_>, _>>()?;
    let cost_rows: Vec<CostRow> = costs
        .iter()
        .map(|c| CostRow {
            r: c.r,
            mean: c.mean,
            stderr: c.stderr,
            n_paths: c.n_paths,
            truncation_time: c.truncation_time,
            truncation_bias: c.truncation_bias,
        })
        .collect();
    sink.csv("cost.csv", &cost_rows)?;
    let mut tasks = Vec::new();
    let pinned = match &source {
        PairSource::Fixed(f) if f.dim == 1 => Some(*f),
        _ => None,
    };
    let mut rows = Vec::new();
    for &t in &cfg.times {
        let xs = e.marginal(t, 0);
        let (var, var_stderr) = variance_stderr(&xs);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let t_rec = e.recorded_time(t);
        let ks = pinned.filter(|_| t_rec > 0.0 && t_rec < horizon).map(|f| {
            let law_mean = f.y[0] + (f.z[0] - f.y[0]) * t_rec / horizon;
            let law_sd = sigma * (t_rec * (horizon - t_rec) / horizon).sqrt();
            ks_normal(&xs, law_mean, law_sd)
        });
        if let Some(f) = pinned {
            if t_rec > 0.0 && t_rec < horizon {
                let law_var = sigma * sigma * t_rec * (horizon - t_rec) / horizon;
                let slack = cfg.tolerances.stderrs * var_stderr;
                tasks.push(TaskStatus::new(
                    &format!("variance_t{t_rec}"),
                    (var - law_var).abs() <= slack,
                    format!("var {var:.5} vs {law_var:.5} (slack {slack:.5})"),
                ));
            }
            let _ = f;
        }
        if let Some(k) = ks {
            tasks.push(TaskStatus::new(
                &format!("ks_t{t_rec}"),
                k.pass,
                format!("D = {:.5}, critical {:.5}", k.statistic, k.critical),
            ));
        }
        rows.push(MarginalRow {
            t: t_rec,
            mean,
            var,
            var_stderr,
            ks_statistic: ks.map(|k| k.statistic),
            ks_pass: ks.map(|k| k.pass),
        });
    }
    if !rows.is_empty() {
        sink.csv("marginals.csv", &rows)?;
    }
    if let Some(f) = pinned {
        let off = (0..e.n_paths).filter(|&i| e.terminal(i)[0] != f.z[0]).count();
        tasks.push(TaskStatus::new("terminal_pinned", off == 0, format!("{off} paths off target")));
    }
    if let Some(v) = cfg.expect_value {
        let c = &costs[0];
        let slack = cfg.tolerances.stderrs * c.stderr;
        tasks.push(TaskStatus::new(
            "expected_cost",
            (c.mean - v).abs() <= slack,
            format!("cost {:.5} vs {v:.5} (slack {slack:.5})", c.mean),
        ));
    }
    Ok(tasks)
}

#[derive(Serialize)]
struct ConjectureRow {
    t: f64,
    r: f64,
    scaled_estimate: f64,
    t_r: f64,
    observed: bool,
}

fn run_bounds_sweep(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Vec<TaskStatus>, CliError> {
    let (p, q) = measures(cfg)?;
    let sigma = cfg.noise()?;
    let mut reports = Vec::new();
    let mut conjecture = Vec::new();
    let mut bad = 0;
    let mut total = 0;
    let exponents = cfg
        .r
        .iter()
        .map(|&r| Ok((r, transport_value(p, q, r)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    // In 1-D the monotone plan is optimal for every r >= 1, so one ensemble serves all exponents.
    let groups: Vec<Vec<(f64, f64)>> = if p.dim() == 1 {
        vec![exponents]
    } else {
        exponents.into_iter().map(|e| vec![e]).collect()
    };
    for group in groups {
        let source = PairSource::new(p, q, group[0].0)?;
        let pair = PairSetup {
            p,
            q,
            endpoints: source.endpoints(),
            t_r: group[0].1,
        };
        let cells = sandwich_multi(&pair, &group, sigma, &cfg.times, cfg.n_paths, cfg.substeps, cfg.seed)?;
        for c in &cells {
            let t_r = group.iter().find(|e| e.0 == c.r).map_or(f64::NAN, |e| e.1);
            total += 1;
            if !c.satisfied() {
                bad += 1;
            }
            reports.extend(c.reports(sigma, t_r));
            conjecture.push(ConjectureRow {
                t: c.t,
                r: c.r,
                scaled_estimate: c.estimate.mean * c.t.powf(c.r - 1.0),
                t_r,
                observed: c.conjecture_observed,
            });
        }
    }
    write_reports_csv(&reports, &sink.path("bounds.csv"))?;
    sink.csv("conjecture.csv", &conjecture)?;
    Ok(vec![TaskStatus::new(
        "sandwich",
        bad == 0,
        format!("{bad} of {total} cells outside the bracket"),
    )])
}

fn run_longtime(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Vec<TaskStatus>, CliError> {
    let (p, q) = measures(cfg)?;
    let k = need(&cfg.kernel, "kernel")?;
    let (pg, qg) = (on_grid(p, cfg.grid.as_ref())?, on_grid(q, cfg.grid.as_ref())?);
    let rep = longtime_limits(&pg, &qg, k, &cfg.times, &sinkhorn_options(cfg))?;
    write_sweep_csv(&rep.rows, &sink.path("sweep.csv"))?;
    let values: Vec<f64> = rep.rows.iter().map(|r| r.v_s).collect();
    let c_bar = fit_longtime_constant(&qg, &pg, &values)?;
    let last = rep.rows.last().expect("nonempty times");
    #[derive(Serialize)]
    struct Summary {
        h_q_m: f64,
        final_t: f64,
        final_value: f64,
        ckp_holds: bool,
        product_gap_decreasing: bool,
        longtime_constant: f64,
    }
    sink.json(
        "summary.json",
        &Summary {
            h_q_m: rep.h_q_m,
            final_t: last.t,
            final_value: last.v_s,
            ckp_holds: rep.ckp_holds,
            product_gap_decreasing: rep.product_gap_decreasing,
            longtime_constant: c_bar,
        },
    )?;
    let gap = (last.v_s - rep.h_q_m).abs();
    let mut tasks = vec![
        TaskStatus::new(
            "limit_value",
            gap <= cfg.tolerances.longtime_abs,
            format!("|vS({}) - H(Q|m)| = {gap:.4}", last.t),
        ),
        TaskStatus::new("product_gap_decreasing", rep.product_gap_decreasing, String::new()),
        TaskStatus::new("ckp", rep.ckp_holds, String::new()),
    ];
    if cfg.tolerances.aronson_probes > 0 {
        let horizon = cfg.times.iter().copied().fold(0.0, f64::max);
        let cert = aronson_certificate(k, horizon, cfg.tolerances.aronson_probes, cfg.seed)?;
        sink.json("aronson.json", &cert)?;
        tasks.extend(cert.tasks());
    }
    Ok(tasks)
}

#[derive(Serialize)]
struct NoiseCsvRow {
    eps: f64,
    mean: f64,
    stderr: f64,
}

fn run_zero_noise(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Vec<TaskStatus>, CliError> {
    let (p, q) = measures(cfg)?;
    let sigma = cfg.noise()?;
    let horizon = *need(&cfg.horizon, "horizon")?;
    let r = cfg.r[0];
    let t_r = transport_value(p, q, r)?;
    let source = PairSource::new(p, q, r)?;
    let pair = PairSetup {
        p,
        q,
        endpoints: source.endpoints(),
        t_r,
    };
    let rep = zero_noise_report(&pair, r, sigma, horizon, &cfg.eps, cfg.n_paths, cfg.substeps, cfg.seed)?;
    let rows: Vec<NoiseCsvRow> = rep
        .rows
        .iter()
        .map(|row| NoiseCsvRow {
            eps: row.eps,
            mean: row.estimate.mean,
            stderr: row.estimate.stderr,
        })
        .collect();
    sink.csv("sweep.csv", &rows)?;
    sink.json("fit.json", &rep)?;
    Ok(vec![TaskStatus::new(
        "zero_noise",
        rep.passed,
        format!(
            "coefficient {:.4} vs bound {:.4}; fit {:?}; intercept {:?} vs {:.4}",
            rep.coefficient, rep.coefficient_bound, rep.fit.map(|f| f.exponent), rep.intercept, rep.limit
        ),
    )])
}

#[derive(Serialize)]
struct ExplosionRow {
    t: f64,
    r: f64,
    upper: f64,
    stderr: f64,
    lower: f64,
}

fn run_explosion(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Vec<TaskStatus>, CliError> {
    let (p, q) = measures(cfg)?;
    let sigma = cfg.noise()?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut tasks = Vec::new();
    for &r in &cfg.r {
        let source = PairSource::new(p, q, r)?;
        let pair = PairSetup {
            p,
            q,
            endpoints: source.endpoints(),
            t_r: transport_value(p, q, r)?,
        };
        let rep = explosion_report(&pair, r, sigma, &cfg.times, cfg.n_paths, cfg.substeps, cfg.seed)?;
        for ((t, u), l) in rep.ts.iter().zip(&rep.upper).zip(&rep.lower) {
            rows.push(ExplosionRow {
                t: *t,
                r,
                upper: u.mean,
                stderr: u.stderr,
                lower: *l,
            });
        }
        tasks.push(TaskStatus::new(
            &format!("slopes_r{r}"),
            rep.passed,
            format!(
                "upper {:.3}, lower {:.3}, target {:.3}",
                rep.upper_fit.exponent, rep.lower_fit.exponent, rep.target
            ),
        ));
        reports.push(rep);
    }
    sink.csv("sweep.csv", &rows)?;
    sink.json("fits.json", &reports)?;
    Ok(tasks)
}

/// Delayed-bridge costs and compressed-control envelope for `r < 1`.
#[derive(Debug, Clone, Serialize)]
pub struct CollapseReport {
    pub r: f64,
    pub delays: Vec<(f64, crate::sde::CostEstimate)>,
    pub compressed: Vec<crate::sde::CompressedCost>,
    pub delay_decreasing: bool,
    pub envelope_ratio: f64,
}

/// Delay costs must fall by more than `slack` combined standard errors at each step.
pub fn collapse_report(
    pairs: &dyn PairSampler,
    setup: &BridgeSetup,
    r: f64,
    deltas: &[f64],
    ns: &[f64],
    constants: EnvelopeConstants,
    slack: f64,
) -> Result<CollapseReport, CliError> {
    let delays = deltas
        .iter()
        .map(|&d| Ok((d, delayed_bridge_cost(pairs, setup, d, r)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let delay_decreasing = delays.windows(2).all(|w| {
        let (a, b) = (&w[0].1, &w[1].1);
        a.mean - b.mean > slack * (a.stderr.powi(2) + b.stderr.powi(2)).sqrt()
    });
    let base = simulate_bridge(
        pairs,
        setup.sigma,
        setup.grid(0.0)?,
        setup.n_paths,
        setup.seed,
        &SimOptions::with_costs(&[r]),
    )?;
    let compressed = ns
        .iter()
        .map(|&n| Ok(compressed_control_cost(&base, n, r, constants.scale, constants.shift)?))
        .collect::<Result<Vec<_>, CliError>>()?;
    let envelope_ratio = match (compressed.first(), compressed.last()) {
        (Some(a), Some(b)) => b.envelope / a.envelope,
        _ => f64::NAN,
    };
    Ok(CollapseReport {
        r,
        delays,
        compressed,
        delay_decreasing,
        envelope_ratio,
    })
}

fn run_collapse(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<Vec<TaskStatus>, CliError> {
    let (p, q) = measures(cfg)?;
    let r = cfg.r[0];
    let source = PairSource::new(p, q, r)?;
    let sampler = source.sampler()?;
    let setup = BridgeSetup {
        sigma: cfg.noise()?,
        horizon: *need(&cfg.horizon, "horizon")?,
        substeps: cfg.substeps,
        n_paths: cfg.n_paths,
        seed: cfg.seed,
    };
    let rep = collapse_report(sampler.as_ref(), &setup, r, &cfg.deltas, &cfg.compress, cfg.envelope, 2.0)?;
    #[derive(Serialize)]
    struct DelayRow {
        delta: f64,
        mean: f64,
        stderr: f64,
    }
    #[derive(Serialize)]
    struct CompressRow {
        n: f64,
        simulated: f64,
        stderr: f64,
        envelope: f64,
    }
    let delay_rows: Vec<DelayRow> = rep
        .delays
        .iter()
        .map(|(d, e)| DelayRow {
            delta: *d,
            mean: e.mean,
            stderr: e.stderr,
        })
        .collect();
    let compress_rows: Vec<CompressRow> = rep
        .compressed
        .iter()
        .map(|c| CompressRow {
            n: c.n,
            simulated: c.simulated.mean,
            stderr: c.simulated.stderr,
            envelope: c.envelope,
        })
        .collect();
    sink.csv("delay.csv", &delay_rows)?;
    sink.csv("compress.csv", &compress_rows)?;
    Ok(vec![
        TaskStatus::new(
            "delay_decreasing",
            rep.delay_decreasing,
            format!("{:?}", delay_rows.iter().map(|d| d.mean).collect::<Vec<_>>()),
        ),
        TaskStatus::new(
            "envelope_collapse",
            rep.envelope_ratio < cfg.tolerances.envelope_ratio,
            format!("ratio {:.4}, target < {}", rep.envelope_ratio, cfg.tolerances.envelope_ratio),
        ),
    ])
}

/// Index of a suite directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteIndex {
    pub configs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteStatus {
    Pass,
    Fail,
    Missing,
    Invalid,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub config: String,
    pub status: SuiteStatus,
    pub seconds: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteSummary {
    pub entries: Vec<SuiteEntry>,
}

impl SuiteSummary {
    pub fn exit_code(&self) -> i32 {
        let any = |s: SuiteStatus| self.entries.iter().any(|e| e.status == s);
        if any(SuiteStatus::Missing) {
            EXIT_INCOMPLETE
        } else if any(SuiteStatus::Invalid) {
            EXIT_CONFIG
        } else if any(SuiteStatus::Fail) {
            EXIT_NUMERICAL
        } else {
            EXIT_OK
        }
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<28} {:<8} {:>8}  detail\n", "config", "status", "seconds");
        for e in &self.entries {
            let status = format!("{:?}", e.status).to_uppercase();
            s += &format!("{:<28} {:<8} {:>8.1}  {}\n", e.config, status, e.seconds, e.detail);
        }
        s
    }
}

/// Runs every config named in `<suite_dir>/suite.json`.
pub fn verify_all(suite_dir: &Path, out: &Path, seed: Option<u64>) -> Result<SuiteSummary, CliError> {
    let index_path = suite_dir.join(SUITE_INDEX);
    let text = fs::read_to_string(&index_path).map_err(|e| CliError::Config(format!("{}: {e}", index_path.display())))?;
    let index: SuiteIndex = serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    let mut entries = Vec::new();
    for name in &index.configs {
        let path = suite_dir.join(name);
        let start = Instant::now();
        let (status, detail) = if !path.exists() {
            (SuiteStatus::Missing, "config not found".to_string())
        } else {
            match ExperimentConfig::load(&path) {
                Err(e) => (SuiteStatus::Invalid, e.to_string()),
                Ok(mut cfg) => {
                    if let Some(s) = seed {
                        cfg.seed = s;
                    }
                    let m = run(&cfg, out, RunOptions::default())?;
                    let failed: Vec<String> = m
                        .tasks
                        .iter()
                        .filter(|t| !t.passed)
                        .map(|t| format!("{}: {}", t.task, t.detail))
                        .chain(m.error.clone())
                        .collect();
                    if m.passed {
                        (SuiteStatus::Pass, format!("{} checks", m.tasks.len()))
                    } else {
                        (SuiteStatus::Fail, failed.join("; "))
                    }
                }
            }
        };
        entries.push(SuiteEntry {
            config: name.clone(),
            status,
            seconds: start.elapsed().as_secs_f64(),
            detail,
        });
    }
    Ok(SuiteSummary { entries })
}

#[derive(Debug, Parser)]
#[command(name = "sotlab", version, about = "Stochastic optimal transport experiments")]
pub struct Cli {
    /// Worker threads (falls back to SOTLAB_THREADS).
    #[arg(long, global = true, env = "SOTLAB_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write simulated paths (bridge runs).
        #[arg(long)]
        dump_paths: bool,
    },
    /// Run every config listed in `<suite_dir>/suite.json`.
    VerifyAll {
        suite_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("thread pool: {e}");
        }
    }
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            dump_paths,
        } => {
            let mut cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{e}");
                    return e.exit_code();
                }
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            match run(&cfg, &out, RunOptions { dump_paths }) {
                Ok(m) => {
                    for t in &m.tasks {
                        println!("{} {} {}", if t.passed { "PASS" } else { "FAIL" }, t.task, t.detail);
                    }
                    if let Some(e) = &m.error {
                        eprintln!("error: {e}");
                    }
                    m.exit_code()
                }
                Err(e) => {
                    eprintln!("{e}");
                    e.exit_code()
                }
            }
        }
        Command::VerifyAll { suite_dir, seed, out } => match verify_all(&suite_dir, &out, seed) {
            Ok(summary) => {
                print!("{}", summary.table());
                summary.exit_code()
            }
            Err(e) => {
                eprintln!("{e}");
                e.exit_code()
            }
        },
    }
}
