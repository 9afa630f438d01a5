//! Closed-form bounds on the optimal cost `V_r(t, P, Q)` of steering `P` to
//! `Q` in time `t` with running cost `|u|^r`, and the sweeps that compare
//! them with bridge estimates.
//!
//! Every bound is reported on the scale of `V_r` itself, i.e. already
//! multiplied by `t^{1-r}`. `sigma` always denotes the Frobenius norm of the
//! diffusion matrix.

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::kernels::TransitionKernel;
use crate::measures::{discretize_gaussian, pow_abs, GaussianSpec, GridMeasure, GridSpec, MeasureError, MeasureSpec};
use crate::sde::{value_upper_estimates, BridgeSetup, CostEstimate, Endpoints, SdeError};
use crate::stats::{fit_loglog, weighted_least_squares, SlopeFit, StatsError, MIN_FIT_R2};
use crate::transport::{heat_smoothed_marginal, solve_exact, solve_quantile_1d, LineMeasure, TransportError};

/// Monte Carlo slack, in standard errors, for every bound comparison.
pub const SLACK_STDERRS: f64 = 3.0;
/// Relative tolerance on fitted limit coefficients.
pub const COEFFICIENT_TOLERANCE: f64 = 0.1;
/// Tolerance on fitted exponents.
pub const EXPONENT_TOLERANCE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("exponent fit unreliable (r2 = {}, need {MIN_FIT_R2})", .0.r2)]
    FitUnstable(SlopeFit),
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundKind {
    Upper,
    Lower,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct BoundParams {
    pub r: f64,
    pub sigma: f64,
    pub eps: Option<f64>,
    pub t_r: f64,
}

/// One comparison of an estimate against a bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub name: String,
    pub kind: BoundKind,
    pub t: f64,
    pub lhs: f64,
    pub stderr: f64,
    pub rhs: f64,
    pub satisfied: bool,
    pub params: BoundParams,
}

impl BoundReport {
    pub fn new(name: &str, kind: BoundKind, t: f64, est: &CostEstimate, rhs: f64, params: BoundParams) -> Self {
        let slack = SLACK_STDERRS * est.stderr;
        let satisfied = match kind {
            BoundKind::Upper => est.mean <= rhs + slack,
            BoundKind::Lower => est.mean >= rhs - slack,
        };
        BoundReport {
            name: name.to_string(),
            kind,
            t,
            lhs: est.mean,
            stderr: est.stderr,
            rhs,
            satisfied,
            params,
        }
    }

    /// Comparison of a deterministic value; no slack.
    pub fn exact(name: &str, kind: BoundKind, t: f64, lhs: f64, rhs: f64, params: BoundParams) -> Self {
        let satisfied = match kind {
            BoundKind::Upper => lhs <= rhs,
            BoundKind::Lower => lhs >= rhs,
        };
        BoundReport {
            name: name.to_string(),
            kind,
            t,
            lhs,
            stderr: 0.0,
            rhs,
            satisfied,
            params,
        }
    }
}

#[derive(Serialize)]
struct ReportRow<'a> {
    name: &'a str,
    t: f64,
    r: f64,
    lhs: f64,
    stderr: f64,
    rhs: f64,
    satisfied: bool,
}

pub fn write_reports_csv(reports: &[BoundReport], path: &Path) -> Result<(), BoundsError> {
    let mut w = csv::Writer::from_path(path)?;
    for rep in reports {
        w.serialize(ReportRow {
            name: &rep.name,
            t: rep.t,
            r: rep.params.r,
            lhs: rep.lhs,
            stderr: rep.stderr,
            rhs: rep.rhs,
            satisfied: rep.satisfied,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// `t^{1-r} (T_r + 2 sigma^r t^{r/2} / (2 - r))`, valid for `r in (0, 2)`.
pub fn upper_rhs(t: f64, r: f64, sigma: f64, t_r: f64) -> f64 {
    t.powf(1.0 - r) * (t_r + 2.0 * pow_abs(sigma, r) * t.powf(0.5 * r) / (2.0 - r))
}

/// `t^{1-r} [(1-e)^{r-1} T_r - e^{1-r} (1-e)^{r-1} sigma^r t^{r/2}]` for `r in [1, 2]`.
pub fn lower_rhs_eps(t: f64, r: f64, sigma: f64, t_r: f64, eps: f64) -> f64 {
    let keep = (1.0 - eps).powf(r - 1.0);
    t.powf(1.0 - r) * keep * (t_r - eps.powf(1.0 - r) * pow_abs(sigma, r) * t.powf(0.5 * r))
}

/// [`lower_rhs_eps`] maximized over `eps in (0, 1)`: log-spaced scan, then golden section.
pub fn lower_rhs_eps_best(t: f64, r: f64, sigma: f64, t_r: f64) -> (f64, f64) {
    let f = |u: f64| lower_rhs_eps(t, r, sigma, t_r, logistic(u));
    const N: usize = 2000;
    let (lo, hi) = (-30.0, 30.0);
    let h = (hi - lo) / N as f64;
    let best = (0..=N)
        .map(|k| lo + k as f64 * h)
        .max_by(|a, b| f(*a).total_cmp(&f(*b)))
        .unwrap_or(0.0);
    let (mut a, mut b) = (best - h, best + h);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let (c, d) = (b - g * (b - a), a + g * (b - a));
        if f(c) >= f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let u = 0.5 * (a + b);
    let u = if f(u) >= f(best) { u } else { best };
    (f(u), logistic(u))
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// `max(0, T_r^{1/r} - sigma sqrt(t))^r t^{1-r}`.
pub fn lower_rhs_root(t: f64, r: f64, sigma: f64, t_r: f64) -> f64 {
    (t_r.powf(1.0 / r) - sigma * t.sqrt()).max(0.0).powf(r) * t.powf(1.0 - r)
}

/// Grid discretization of a 1-D Gaussian wide and fine enough for quantile quadrature.
fn gaussian_grid(g: &GaussianSpec) -> Result<GridMeasure, MeasureError> {
    let (m, s) = (g.mean()[0], g.sd(0));
    let grid = GridSpec::interval(m - 8.0 * s, m + 8.0 * s, 4000)?;
    discretize_gaussian(g, &grid)
}

/// `T_r(P^{X^0(t)}, Q) t^{1-r}`: transport from the freely diffused initial law.
pub fn lower_zero_control(
    t: f64,
    r: f64,
    p: &MeasureSpec,
    q: &MeasureSpec,
    kernel: &TransitionKernel,
) -> Result<f64, BoundsError> {
    if !matches!(kernel, TransitionKernel::Heat { .. }) {
        return Err(BoundsError::BadParameter("zero-control bound needs a heat kernel".into()));
    }
    if kernel.dim() != 1 || q.dim() != 1 {
        return Err(TransportError::DimensionError(q.dim().max(kernel.dim())).into());
    }
    let smoothed = heat_smoothed_marginal(p, kernel, t)?;
    let mut store = None;
    let value = solve_quantile_1d(&smoothed, line_of(q, &mut store)?, r)?.value;
    Ok(value * t.powf(1.0 - r))
}

fn line_of<'a>(m: &'a MeasureSpec, store: &'a mut Option<GridMeasure>) -> Result<LineMeasure<'a>, MeasureError> {
    Ok(match m {
        MeasureSpec::Discrete(d) => LineMeasure::Atoms(d),
        MeasureSpec::Grid(g) => LineMeasure::Cells(g),
        MeasureSpec::Gaussian(g) => LineMeasure::Cells(&*store.insert(gaussian_grid(g)?)),
    })
}

/// `T_r(P, Q)`: exact LP for two discrete measures, quantile coupling otherwise (1-D only).
pub fn transport_value(p: &MeasureSpec, q: &MeasureSpec, r: f64) -> Result<f64, BoundsError> {
    if let (MeasureSpec::Discrete(a), MeasureSpec::Discrete(b)) = (p, q) {
        return Ok(solve_exact(a, b, r)?.value);
    }
    let (mut sp, mut sq) = (None, None);
    Ok(solve_quantile_1d(line_of(p, &mut sp)?, line_of(q, &mut sq)?, r)?.value)
}

/// What is known about a pair for the sweeps.
pub struct PairSetup<'a> {
    pub p: &'a MeasureSpec,
    pub q: &'a MeasureSpec,
    pub endpoints: Endpoints<'a>,
    /// `T_r(P, Q)` for the exponent in use.
    pub t_r: f64,
}

/// Estimate and all bounds at one `(t, r)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichCell {
    pub t: f64,
    pub r: f64,
    pub estimate: CostEstimate,
    pub upper: f64,
    pub lower_root: f64,
    pub lower_eps: f64,
    pub best_eps: f64,
    pub lower_zero_control: Option<f64>,
    /// `T_r <= t^{r-1} V + sigma^r t^{r/2}` held for the estimate.
    pub conjecture_observed: bool,
}

impl SandwichCell {
    pub fn lower(&self) -> f64 {
        self.lower_root
            .max(self.lower_eps)
            .max(self.lower_zero_control.unwrap_or(f64::NEG_INFINITY))
    }

    pub fn reports(&self, sigma: f64, t_r: f64) -> Vec<BoundReport> {
        let params = BoundParams {
            r: self.r,
            sigma,
            eps: None,
            t_r,
        };
        let mut out = vec![
            BoundReport::new("upper", BoundKind::Upper, self.t, &self.estimate, self.upper, params),
            BoundReport::new("lower_root", BoundKind::Lower, self.t, &self.estimate, self.lower_root, params),
            BoundReport::new(
                "lower_eps",
                BoundKind::Lower,
                self.t,
                &self.estimate,
                self.lower_eps,
                BoundParams {
                    eps: Some(self.best_eps),
                    ..params
                },
            ),
        ];
        if let Some(z) = self.lower_zero_control {
            out.push(BoundReport::new("lower_zero_control", BoundKind::Lower, self.t, &self.estimate, z, params));
        }
        out
    }

    pub fn satisfied(&self) -> bool {
        let slack = SLACK_STDERRS * self.estimate.stderr;
        self.estimate.mean <= self.upper + slack && self.estimate.mean >= self.lower() - slack
    }
}

fn check_r(r: f64, lo: f64, hi: f64) -> Result<(), BoundsError> {
    if r >= lo && r < hi {
        Ok(())
    } else {
        Err(BoundsError::BadParameter(format!("r = {r} outside [{lo}, {hi})")))
    }
}

fn heat_1d(sigma: f64, q: &MeasureSpec) -> Option<TransitionKernel> {
    (q.dim() == 1 && sigma > 0.0)
        .then(|| TransitionKernel::heat(sigma, 1).ok())
        .flatten()
}

/// Estimates `V_r(t)` by the bridge at each `t` and evaluates every bound.
pub fn sandwich(pair: &PairSetup<'_>, r: f64, sigma: f64, ts: &[f64], n_paths: usize, substeps: usize, seed: u64) -> Result<Vec<SandwichCell>, BoundsError> {
    sandwich_multi(pair, &[(r, pair.t_r)], sigma, ts, n_paths, substeps, seed)
}

/// [`sandwich`] for several `(r, T_r)` at once; one ensemble per `t` serves every exponent.
///
/// Cells are ordered by `t`, then by exponent. `pair.t_r` is ignored.
pub fn sandwich_multi(
    pair: &PairSetup<'_>,
    exponents: &[(f64, f64)],
    sigma: f64,
    ts: &[f64],
    n_paths: usize,
    substeps: usize,
    seed: u64,
) -> Result<Vec<SandwichCell>, BoundsError> {
    for &(r, _) in exponents {
        check_r(r, 1.0, 2.0)?;
    }
    let rs: Vec<f64> = exponents.iter().map(|e| e.0).collect();
    let kernel = heat_1d(sigma, pair.q);
    let mut cells = Vec::with_capacity(ts.len() * rs.len());
    for &t in ts {
        let setup = BridgeSetup {
            sigma,
            horizon: t,
            substeps,
            n_paths,
            seed,
        };
        let estimates = value_upper_estimates(pair.endpoints, &setup, &rs)?;
        for (&(r, t_r), estimate) in exponents.iter().zip(estimates) {
            let (lower_eps, best_eps) = lower_rhs_eps_best(t, r, sigma, t_r);
            let lower_zero_control = match &kernel {
                Some(k) => Some(lower_zero_control(t, r, pair.p, pair.q, k)?),
                None => None,
            };
            let scaled = estimate.mean * t.powf(r - 1.0);
            cells.push(SandwichCell {
                t,
                r,
                estimate,
                upper: upper_rhs(t, r, sigma, t_r),
                lower_root: lower_rhs_root(t, r, sigma, t_r),
                lower_eps,
                best_eps,
                lower_zero_control,
                conjecture_observed: t_r <= scaled + pow_abs(sigma, r) * t.powf(0.5 * r),
            });
        }
    }
    Ok(cells)
}

/// Short-time behavior of `t^{r-1} V_r` around `T_r`.
#[derive(Debug, Clone, Serialize)]
pub struct ShortTimeReport {
    pub r: f64,
    pub cells: Vec<SandwichCell>,
    pub diagonal: bool,
    /// Fit of `|t^{r-1} V - T_r|` against `t` (off-diagonal).
    pub gap_fit: Option<SlopeFit>,
    /// `max_t |t^{r-1} V - T_r| / sqrt(t)` and its limit bound `2 r sigma T_r^{1-1/r}`.
    pub gap_coefficient: f64,
    pub gap_bound: f64,
    /// `max_t |(t^{r-1} V)^{1/r} - T_r^{1/r}| / sqrt(t)` and `(2/(2-r))^{1/r} sigma`.
    pub root_gap_coefficient: f64,
    pub root_gap_bound: f64,
    /// `max_t t^{r/2-1} V` and `2 sigma^r / (2-r)` (diagonal).
    pub diagonal_coefficient: f64,
    pub diagonal_bound: f64,
    pub exponent_ok: bool,
    pub coefficient_ok: bool,
}

pub fn shorttime_report(pair: &PairSetup<'_>, r: f64, sigma: f64, ts: &[f64], n_paths: usize, substeps: usize, seed: u64) -> Result<ShortTimeReport, BoundsError> {
    if ts.iter().any(|&t| !(t > 0.0 && t <= 0.5)) {
        return Err(BoundsError::BadParameter("short-time window must lie in (0, 0.5]".into()));
    }
    let cells = sandwich(pair, r, sigma, ts, n_paths, substeps, seed)?;
    let diagonal = pair.t_r == 0.0;
    let tol = 1.0 + COEFFICIENT_TOLERANCE;
    let scaled: Vec<f64> = cells.iter().map(|c| c.estimate.mean * c.t.powf(r - 1.0)).collect();
    let gaps: Vec<f64> = scaled.iter().map(|s| (s - pair.t_r).abs()).collect();
    let gap_coefficient = gaps
        .iter()
        .zip(ts)
        .map(|(g, t)| g / t.sqrt())
        .fold(0.0, f64::max);
    let root_gap_coefficient = scaled
        .iter()
        .zip(ts)
        .map(|(s, t)| (s.powf(1.0 / r) - pair.t_r.powf(1.0 / r)).abs() / t.sqrt())
        .fold(0.0, f64::max);
    let diagonal_coefficient = cells
        .iter()
        .map(|c| c.estimate.mean * c.t.powf(0.5 * r - 1.0))
        .fold(0.0, f64::max);
    let gap_bound = 2.0 * r * sigma * pair.t_r.powf(1.0 - 1.0 / r);
    let root_gap_bound = (2.0 / (2.0 - r)).powf(1.0 / r) * sigma;
    let diagonal_bound = 2.0 * pow_abs(sigma, r) / (2.0 - r);
    let (gap_fit, exponent_ok, coefficient_ok) = if diagonal {
        (None, true, diagonal_coefficient <= tol * diagonal_bound)
    } else {
        let fit = fit_loglog(ts, &gaps)?;
        if !fit.reliable() {
            return Err(BoundsError::FitUnstable(fit));
        }
        (
            Some(fit),
            (fit.exponent - 0.5).abs() <= EXPONENT_TOLERANCE,
            gap_coefficient <= tol * gap_bound,
        )
    };
    Ok(ShortTimeReport {
        r,
        cells,
        diagonal,
        gap_fit,
        gap_coefficient,
        gap_bound,
        root_gap_coefficient,
        root_gap_bound,
        diagonal_coefficient,
        diagonal_bound,
        exponent_ok,
        coefficient_ok,
    })
}

/// One noise level of a zero-noise sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseRow {
    pub eps: f64,
    pub estimate: CostEstimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct ZeroNoiseReport {
    pub r: f64,
    pub horizon: f64,
    pub rows: Vec<NoiseRow>,
    /// Diagonal: fit of `V^eps` against `eps`; expected exponent `r/2`.
    pub fit: Option<SlopeFit>,
    /// Off-diagonal: weighted fit `V^eps ≈ a + b sqrt(eps) + c eps`.
    pub intercept: Option<(f64, f64)>,
    /// `T^{1-r} T_r`.
    pub limit: f64,
    /// Largest `eps^{-1/2} |V^eps - limit|` (off-diagonal) or `eps^{-r/2} V^eps` (diagonal).
    pub coefficient: f64,
    pub coefficient_bound: f64,
    pub passed: bool,
}

/// Seed used at noise level index `k`; level `eps = 1` keeps the base seed.
pub fn noise_seed(seed: u64, k: usize, eps: f64) -> u64 {
    if eps == 1.0 {
        seed
    } else {
        seed.wrapping_add((k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

pub fn zero_noise_report(
    pair: &PairSetup<'_>,
    r: f64,
    sigma: f64,
    horizon: f64,
    eps_list: &[f64],
    n_paths: usize,
    substeps: usize,
    seed: u64,
) -> Result<ZeroNoiseReport, BoundsError> {
    check_r(r, 1.0, 2.0)?;
    if eps_list.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
        return Err(BoundsError::BadParameter("noise levels must lie in (0, 1]".into()));
    }
    let rows: Vec<NoiseRow> = eps_list
        .iter()
        .enumerate()
        .map(|(k, &eps)| {
            let setup = BridgeSetup {
                sigma: eps.sqrt() * sigma,
                horizon,
                substeps,
                n_paths,
                seed: noise_seed(seed, k, eps),
            };
            let estimate = value_upper_estimates(pair.endpoints, &setup, &[r])?.remove(0);
            Ok(NoiseRow { eps, estimate })
        })
        .collect::<Result<_, BoundsError>>()?;
    let limit = horizon.powf(1.0 - r) * pair.t_r;
    let eps: Vec<f64> = rows.iter().map(|row| row.eps).collect();
    let means: Vec<f64> = rows.iter().map(|row| row.estimate.mean).collect();
    if pair.t_r == 0.0 {
        let fit = fit_loglog(&eps, &means)?;
        if !fit.reliable() {
            return Err(BoundsError::FitUnstable(fit));
        }
        let coefficient = rows
            .iter()
            .map(|row| row.estimate.mean / row.eps.powf(0.5 * r))
            .fold(0.0, f64::max);
        let coefficient_bound = 2.0 * pow_abs(sigma, r) * horizon.powf(1.0 - 0.5 * r) / (2.0 - r);
        let passed = (fit.exponent - 0.5 * r).abs() <= EXPONENT_TOLERANCE
            && coefficient <= (1.0 + COEFFICIENT_TOLERANCE) * coefficient_bound;
        Ok(ZeroNoiseReport {
            r,
            horizon,
            rows,
            fit: Some(fit),
            intercept: None,
            limit,
            coefficient,
            coefficient_bound,
            passed,
        })
    } else {
        // The proven rate is sqrt(eps); bridge fluctuations also leave an eps*log(eps) term.
        let design: Vec<Vec<f64>> = eps.iter().map(|&e| vec![1.0, e.sqrt(), e * e.ln(), e]).collect();
        let se: Vec<f64> = rows.iter().map(|row| row.estimate.stderr.max(1e-12)).collect();
        let wls = weighted_least_squares(&design, &means, &se)?;
        let intercept = (wls.coef[0], wls.stderr[0]);
        let coefficient = rows
            .iter()
            .map(|row| (row.estimate.mean - limit).abs() / row.eps.sqrt())
            .fold(0.0, f64::max);
        let coefficient_bound = 2.0 * r * sigma * horizon.powf(1.5 - r) * pair.t_r.powf(1.0 - 1.0 / r);
        let passed = (intercept.0 - limit).abs() <= SLACK_STDERRS * intercept.1
            && coefficient <= (1.0 + COEFFICIENT_TOLERANCE) * coefficient_bound;
        Ok(ZeroNoiseReport {
            r,
            horizon,
            rows,
            fit: None,
            intercept: Some(intercept),
            limit,
            coefficient,
            coefficient_bound,
            passed,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExplosionReport {
    pub r: f64,
    pub ts: Vec<f64>,
    pub upper: Vec<CostEstimate>,
    pub lower: Vec<f64>,
    pub upper_fit: SlopeFit,
    pub lower_fit: SlopeFit,
    /// `1 - r/2`.
    pub target: f64,
    pub upper_increasing: bool,
    pub passed: bool,
}

/// Growth of the bracket `[zero-control lower bound, bridge estimate]` over large times.
pub fn explosion_report(pair: &PairSetup<'_>, r: f64, sigma: f64, ts: &[f64], n_paths: usize, substeps: usize, seed: u64) -> Result<ExplosionReport, BoundsError> {
    check_r(r, 1.0, 2.0)?;
    if ts.iter().any(|&t| !(1.0..=100.0).contains(&t)) {
        return Err(BoundsError::BadParameter("explosion window must lie in [1, 100]".into()));
    }
    let kernel = TransitionKernel::heat(sigma, 1).map_err(|e| BoundsError::BadParameter(e.to_string()))?;
    let mut upper = Vec::with_capacity(ts.len());
    let mut lower = Vec::with_capacity(ts.len());
    for &t in ts {
        let setup = BridgeSetup {
            sigma,
            horizon: t,
            substeps,
            n_paths,
            seed,
        };
        upper.push(value_upper_estimates(pair.endpoints, &setup, &[r])?.remove(0));
        lower.push(lower_zero_control(t, r, pair.p, pair.q, &kernel)?);
    }
    let means: Vec<f64> = upper.iter().map(|e| e.mean).collect();
    let upper_fit = fit_loglog(ts, &means)?;
    let lower_fit = fit_loglog(ts, &lower)?;
    for fit in [upper_fit, lower_fit] {
        if !fit.reliable() {
            return Err(BoundsError::FitUnstable(fit));
        }
    }
    let target = 1.0 - 0.5 * r;
    let upper_increasing = means.windows(2).all(|w| w[1] > w[0]);
    let passed = (upper_fit.exponent - target).abs() <= EXPONENT_TOLERANCE
        && (lower_fit.exponent - target).abs() <= EXPONENT_TOLERANCE
        && upper_increasing;
    Ok(ExplosionReport {
        r,
        ts: ts.to_vec(),
        upper,
        lower,
        upper_fit,
        lower_fit,
        target,
        upper_increasing,
        passed,
    })
}

/// Lower and upper bound at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Envelope {
    pub t: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Constants relating a general running cost to `|u|^r`:
/// `c |u|^r - c' <= L(t, x; u) <= C |u|^r + C'`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostComparison {
    pub upper_scale: f64,
    pub lower_scale: f64,
    pub upper_shift: f64,
    pub lower_shift: f64,
}

/// Maps a sandwich on `V_r` into one on the value of the general cost:
/// `upper <- C upper + C' t`, `lower <- c lower - c' t`.
pub fn general_cost_envelope(rows: &[Envelope], k: &CostComparison) -> Result<Vec<Envelope>, BoundsError> {
    if [k.upper_scale, k.lower_scale].iter().any(|v| !(*v > 0.0)) || k.upper_shift < 0.0 || k.lower_shift < 0.0 {
        return Err(BoundsError::BadParameter("scales must be positive and shifts nonnegative".into()));
    }
    Ok(rows
        .iter()
        .map(|e| Envelope {
            t: e.t,
            lower: k.lower_scale * e.lower - k.lower_shift * e.t,
            upper: k.upper_scale * e.upper + k.upper_shift * e.t,
        })
        .collect())
}
