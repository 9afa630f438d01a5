//! Static Schrödinger problem on grids.
//!
//! The reference coupling is `R_ij = a_i K_ij / Z_i` with `a` the cell masses
//! of `P`, `K_ij = p(0, x_i; T, y_j) |cell_j|` and `Z_i = sum_j K_ij`, so that
//! `R` is a probability matrix whose rows are the grid-restricted transition
//! laws. Sinkhorn iterations run entirely on log-potentials.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::kernels::{KernelError, TransitionKernel};
use crate::measures::{GridMeasure, MeasureError, Point, WeightedPoints};
use crate::transport::Coupling;

pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 50_000;
/// Iterations between entries of the residual trace.
pub const TRACE_EVERY: usize = 10;

#[derive(Debug, Error)]
pub enum SchrodingerError {
    #[error("mass vectors have different shapes ({0} vs {1})")]
    ShapeMismatch(usize, usize),
    #[error("entropy of the target law is infinite on this grid")]
    EntropyInfinite,
    #[error("Sinkhorn stopped after {} iterations with residual {}", .0.iterations, .0.marginal_residual)]
    NotConverged(Box<SchrodingerSolution>),
    #[error("dimension mismatch between measures and kernel")]
    DimensionMismatch,
    #[error("time must be positive, got {0}")]
    BadTime(f64),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// A relative or differential entropy in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyValue {
    pub value: f64,
    pub finite: bool,
}

impl EntropyValue {
    fn infinite() -> Self {
        EntropyValue {
            value: f64::INFINITY,
            finite: false,
        }
    }
}

/// `sum_i mu_i log(mu_i / nu_i)` on a shared layout, with `0 log 0 = 0`.
///
/// Evaluated as `sum mu log(mu/nu) - mu + nu`, which is the same number for
/// equal total masses and never goes negative through cancellation.
pub fn relative_entropy_masses(mu: &[f64], nu: &[f64]) -> Result<EntropyValue, SchrodingerError> {
    if mu.len() != nu.len() {
        return Err(SchrodingerError::ShapeMismatch(mu.len(), nu.len()));
    }
    let mut total = 0.0;
    for (&m, &n) in mu.iter().zip(nu) {
        if m > 0.0 {
            if n <= 0.0 {
                return Ok(EntropyValue::infinite());
            }
            total += m * (m / n).ln() - m + n;
        } else {
            total += n;
        }
    }
    Ok(EntropyValue {
        value: total,
        finite: true,
    })
}

pub fn relative_entropy(mu: &GridMeasure, nu: &GridMeasure) -> Result<EntropyValue, SchrodingerError> {
    if mu.grid() != nu.grid() {
        return Err(SchrodingerError::ShapeMismatch(mu.len(), nu.len()));
    }
    relative_entropy_masses(&mu.masses(), &nu.masses())
}

pub fn relative_entropy_couplings(mu: &Coupling, nu: &Coupling) -> Result<EntropyValue, SchrodingerError> {
    if mu.rows() != nu.rows() || mu.cols() != nu.cols() {
        return Err(SchrodingerError::ShapeMismatch(mu.mass.len(), nu.mass.len()));
    }
    relative_entropy_masses(&mu.mass, &nu.mass)
}

/// Differential entropy `∫ q log q` of a grid density.
pub fn entropy_s(q: &GridMeasure) -> EntropyValue {
    let vol = q.grid().cell_volume();
    let value = q
        .density()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
        * vol;
    EntropyValue {
        value,
        finite: value.is_finite(),
    }
}

#[derive(Debug, Clone)]
pub struct SinkhornOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Starting column log-potential; zeros by default.
    pub init: Option<Vec<f64>>,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        SinkhornOptions {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            init: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SchrodingerSolution {
    #[serde(skip)]
    pub coupling: Coupling,
    /// `H(coupling | reference)` in nats.
    pub value: f64,
    /// The same value from the potentials.
    pub dual_value: f64,
    /// Terminal potential over the `Q` grid.
    pub phi1: Vec<f64>,
    /// Initial potential over the `P` grid, gauged so that `sum_i a_i phi2_i = 0`.
    pub phi2: Vec<f64>,
    pub iterations: usize,
    pub marginal_residual: f64,
    pub residual_trace: Vec<f64>,
    pub converged: bool,
    /// Row log-normalizers `log Z_i` of the reference.
    #[serde(skip)]
    pub log_row_norm: Vec<f64>,
    /// Column log-potential; can seed another solve.
    #[serde(skip)]
    pub col_potential: Vec<f64>,
}

impl SchrodingerSolution {
    /// The reference coupling itself, on the same supports.
    pub fn reference(&self, reference: &Reference) -> Coupling {
        Coupling {
            mass: reference.log_mass.iter().map(|l| l.exp()).collect(),
            ..self.coupling.clone()
        }
    }
}

/// The log-mass matrix of the reference coupling.
#[derive(Debug, Clone)]
pub struct Reference {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `log R_ij`.
    pub log_mass: Vec<f64>,
    /// Column-major copy for the column sweep.
    log_mass_t: Vec<f64>,
    pub log_row_norm: Vec<f64>,
    pub log_a: Vec<f64>,
    pub log_b: Vec<f64>,
    pub row_support: Vec<Point>,
    pub col_support: Vec<Point>,
    pub col_volume: f64,
    pub dim: usize,
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn safe_ln(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

impl Reference {
    pub fn build(p: &GridMeasure, q: &GridMeasure, k: &TransitionKernel, t: f64) -> Result<Self, SchrodingerError> {
        if !(t > 0.0) {
            return Err(SchrodingerError::BadTime(t));
        }
        if p.dim() != k.dim() || q.dim() != k.dim() {
            return Err(SchrodingerError::DimensionMismatch);
        }
        let xs = p.grid().centers();
        let ys = q.grid().centers();
        let (m, n) = (xs.len(), ys.len());
        let log_vol = q.grid().cell_volume().ln();
        let log_a: Vec<f64> = p.masses().into_iter().map(safe_ln).collect();
        let log_b: Vec<f64> = q.masses().into_iter().map(safe_ln).collect();
        let rows: Vec<(Vec<f64>, f64)> = xs
            .par_iter()
            .zip(&log_a)
            .map(|(x, &la)| {
                let lk: Vec<f64> = ys.iter().map(|y| k.log_density(t, x, y) + log_vol).collect();
                let lz = logsumexp(lk.iter().copied());
                (lk.into_iter().map(|v| la + v - lz).collect(), lz)
            })
            .collect();
        let mut log_mass = Vec::with_capacity(m * n);
        let mut log_row_norm = Vec::with_capacity(m);
        for (row, lz) in rows {
            log_mass.extend(row);
            log_row_norm.push(lz);
        }
        let mut log_mass_t = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                log_mass_t[j * m + i] = log_mass[i * n + j];
            }
        }
        Ok(Reference {
            rows: m,
            cols: n,
            log_mass,
            log_mass_t,
            log_row_norm,
            log_a,
            log_b,
            row_support: xs,
            col_support: ys,
            col_volume: q.grid().cell_volume(),
            dim: k.dim(),
        })
    }

    fn row_lse(&self, i: usize, g: &[f64]) -> f64 {
        let row = &self.log_mass[i * self.cols..(i + 1) * self.cols];
        logsumexp(row.iter().zip(g).map(|(r, gj)| r + gj))
    }

    /// Row-major `log mu_ij` of the plan with column log-potential `g`, rows rescaled onto `P`.
    pub fn log_coupling(&self, g: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for i in 0..self.rows {
            let f = self.log_a[i] - self.row_lse(i, g);
            let row = &self.log_mass[i * self.cols..(i + 1) * self.cols];
            out.extend(row.iter().zip(g).map(|(r, gj)| r + f + gj));
        }
        out
    }

    fn col_lse(&self, j: usize, f: &[f64]) -> f64 {
        let col = &self.log_mass_t[j * self.rows..(j + 1) * self.rows];
        logsumexp(col.iter().zip(f).map(|(r, fi)| r + fi))
    }
}

fn finite_or_zero(x: f64) -> f64 {
    if x.is_finite() {
        x
    } else {
        0.0
    }
}

/// Solves `min H(mu | R)` over couplings of `P` and `Q`.
pub fn sinkhorn_solve(
    p: &GridMeasure,
    q: &GridMeasure,
    k: &TransitionKernel,
    t: f64,
    opts: &SinkhornOptions,
) -> Result<SchrodingerSolution, SchrodingerError> {
    let reference = Reference::build(p, q, k, t)?;
    sinkhorn_on(&reference, opts)
}

pub fn sinkhorn_on(reference: &Reference, opts: &SinkhornOptions) -> Result<SchrodingerSolution, SchrodingerError> {
    let (m, n) = (reference.rows, reference.cols);
    let a: Vec<f64> = reference.log_a.iter().map(|l| l.exp()).collect();
    let mut f = vec![0.0; m];
    let mut g = match &opts.init {
        Some(init) if init.len() == n => init.clone(),
        Some(init) => return Err(SchrodingerError::ShapeMismatch(init.len(), n)),
        None => vec![0.0; n],
    };
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut residual;
    let mut first = true;
    loop {
        // Row sums of the current plan follow from the row log-sums.
        let lse: Vec<f64> = (0..m).map(|i| reference.row_lse(i, &g)).collect();
        if !first {
            residual = (0..m)
                .map(|i| {
                    let s = if reference.log_a[i] == f64::NEG_INFINITY {
                        0.0
                    } else {
                        (f[i] + lse[i]).exp()
                    };
                    (s - a[i]).abs()
                })
                .sum();
            if iterations % TRACE_EVERY == 0 {
                trace.push(residual);
            }
            if residual <= opts.tol || iterations >= opts.max_iter {
                break;
            }
        }
        first = false;
        for i in 0..m {
            f[i] = finite_or_zero(reference.log_a[i] - lse[i]);
        }
        for j in 0..n {
            g[j] = finite_or_zero(reference.log_b[j] - reference.col_lse(j, &f));
        }
        iterations += 1;
    }
    let solution = assemble(reference, &f, &g, iterations, residual, trace, opts.tol);
    if solution.converged {
        Ok(solution)
    } else {
        Err(SchrodingerError::NotConverged(Box::new(solution)))
    }
}

fn assemble(
    reference: &Reference,
    f: &[f64],
    g: &[f64],
    iterations: usize,
    residual: f64,
    trace: Vec<f64>,
    tol: f64,
) -> SchrodingerSolution {
    let (m, n) = (reference.rows, reference.cols);
    let mut mass = vec![0.0; m * n];
    let mut value = 0.0;
    for i in 0..m {
        for j in 0..n {
            let lm = reference.log_mass[i * n + j] + f[i] + g[j];
            let v = lm.exp();
            mass[i * n + j] = v;
            if v > 0.0 {
                value += v * (f[i] + g[j]);
            }
        }
    }
    let a: Vec<f64> = reference.log_a.iter().map(|l| l.exp()).collect();
    let b: Vec<f64> = reference.log_b.iter().map(|l| l.exp()).collect();
    let dual_value: f64 = a.iter().zip(f).map(|(x, y)| x * y).sum::<f64>()
        + b.iter().zip(g).map(|(x, y)| x * y).sum::<f64>();
    let log_vol = reference.col_volume.ln();
    let mut phi2: Vec<f64> = f
        .iter()
        .zip(&reference.log_row_norm)
        .map(|(fi, lz)| lz - fi)
        .collect();
    let mut phi1: Vec<f64> = g
        .iter()
        .zip(&reference.log_b)
        .map(|(gj, lb)| lb - gj - log_vol)
        .collect();
    let shift: f64 = phi2.iter().zip(&a).map(|(p, w)| p * w).sum();
    phi2.iter_mut().for_each(|p| *p -= shift);
    phi1.iter_mut().for_each(|p| *p += shift);
    let coupling = Coupling {
        dim: reference.dim,
        row_support: reference.row_support.clone(),
        col_support: reference.col_support.clone(),
        mass,
    };
    SchrodingerSolution {
        coupling,
        value,
        dual_value,
        phi1,
        phi2,
        iterations,
        marginal_residual: residual,
        residual_trace: trace,
        converged: residual <= tol,
        log_row_norm: reference.log_row_norm.clone(),
        col_potential: g.to_vec(),
    }
}

/// One row of a value sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub t: f64,
    #[serde(rename = "vS")]
    pub v_s: f64,
    #[serde(rename = "t_vS")]
    pub t_v_s: f64,
    #[serde(rename = "H_PxQ_mu")]
    pub h_product: f64,
    #[serde(rename = "TV")]
    pub tv: f64,
    #[serde(rename = "HQ_m")]
    pub h_q_m: Option<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// `H(P x Q | mu)` and the total variation distance `||mu - P x Q||_TV`.
pub fn product_gap(p: &GridMeasure, q: &GridMeasure, mu: &Coupling) -> Result<(f64, f64), SchrodingerError> {
    let a = p.masses();
    let b = q.masses();
    let product: Vec<f64> = a.iter().flat_map(|ai| b.iter().map(move |bj| ai * bj)).collect();
    let h = relative_entropy_masses(&product, &mu.mass)?;
    let tv = 0.5
        * product
            .iter()
            .zip(&mu.mass)
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>();
    Ok((h.value, tv))
}

/// `H(P x Q | mu)` from `log mu`, which stays finite where `mu` underflows.
fn product_entropy_log(reference: &Reference, log_mu: &[f64]) -> f64 {
    let n = reference.cols;
    let mut h = 0.0;
    for (i, la) in reference.log_a.iter().enumerate() {
        for (j, lb) in reference.log_b.iter().enumerate() {
            let lp = la + lb;
            if lp > f64::NEG_INFINITY {
                h += lp.exp() * (lp - log_mu[i * n + j]);
            }
        }
    }
    h
}

fn invariant_gap(q: &GridMeasure, k: &TransitionKernel) -> Result<Option<f64>, SchrodingerError> {
    match k.invariant_density_on(q.grid()) {
        Ok(m) => Ok(Some(relative_entropy(q, &m)?.value)),
        Err(KernelError::NoInvariant) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Solves at every `t` in parallel; results keep the order of `ts`.
pub fn schrodinger_value_sweep(
    p: &GridMeasure,
    q: &GridMeasure,
    k: &TransitionKernel,
    ts: &[f64],
    opts: &SinkhornOptions,
) -> Result<Vec<SweepRow>, SchrodingerError> {
    let h_q_m = invariant_gap(q, k)?;
    ts.par_iter()
        .map(|&t| {
            let reference = Reference::build(p, q, k, t)?;
            let sol = sinkhorn_on(&reference, opts)?;
            let h_product = product_entropy_log(&reference, &reference.log_coupling(&sol.col_potential));
            let (_, tv) = product_gap(p, q, &sol.coupling)?;
            Ok(SweepRow {
                t,
                v_s: sol.value,
                t_v_s: t * sol.value,
                h_product,
                tv,
                h_q_m,
                iterations: sol.iterations,
                residual: sol.marginal_residual,
            })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<(), SchrodingerError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// `∫∫ |x - y|^2 P(dx) Q(dy)` for independent `x ~ P`, `y ~ Q`.
pub fn product_second_moment<A: WeightedPoints, B: WeightedPoints>(p: &A, q: &B) -> f64 {
    let (mp, mq) = (p.mean(), q.mean());
    p.moment_r(2.0) + q.moment_r(2.0) - 2.0 * (mp[0] * mq[0] + mp[1] * mq[1])
}

/// Upper bound on `v^S(t)`: `[C ∫|x-y|^2 dP dQ + t S(Q) + t log(C t^{d/2})] / t`.
pub fn schrodinger_upper_rhs(
    t: f64,
    p: &GridMeasure,
    q: &GridMeasure,
    c_tilde: f64,
    d: usize,
) -> Result<f64, SchrodingerError> {
    let s = entropy_s(q);
    if !s.finite {
        return Err(SchrodingerError::EntropyInfinite);
    }
    let cross = product_second_moment(p, q);
    Ok(c_tilde * cross / t + s.value + (c_tilde * t.powf(0.5 * d as f64)).ln())
}

/// Lower bound on `v^S(t)`:
/// `{(1-e)^2 T2 - (1-e)^2 |sigma|^2 t / e - (1-e) |xi|^2 t^2 / e} / (2 lambda t)`.
pub fn schrodinger_lower_rhs(
    t: f64,
    t2: f64,
    lambda_sup: f64,
    sigma_sup: f64,
    xi_sup: f64,
    eps: f64,
) -> f64 {
    let keep = 1.0 - eps;
    let inner = keep * keep * t2
        - keep * keep * sigma_sup * sigma_sup * t / eps
        - keep * xi_sup * xi_sup * t * t / eps;
    inner / (2.0 * lambda_sup * t)
}

/// Best lower bound over a fine grid of `eps` in `(0, 1)`.
pub fn schrodinger_lower_rhs_best(t: f64, t2: f64, lambda_sup: f64, sigma_sup: f64, xi_sup: f64) -> (f64, f64) {
    (1..1000)
        .map(|k| {
            let eps = k as f64 / 1000.0;
            (schrodinger_lower_rhs(t, t2, lambda_sup, sigma_sup, xi_sup, eps), eps)
        })
        .fold((f64::NEG_INFINITY, 0.5), |best, cur| if cur.0 > best.0 { cur } else { best })
}

/// Long-time report at each requested time.
#[derive(Debug, Clone, Serialize)]
pub struct LongtimeReport {
    pub rows: Vec<SweepRow>,
    pub h_q_m: f64,
    /// `TV <= sqrt(2 H)` held at every time.
    pub ckp_holds: bool,
    /// `H(P x Q | mu_t)` decreased along the sweep.
    pub product_gap_decreasing: bool,
}

pub fn longtime_limits(
    p: &GridMeasure,
    q: &GridMeasure,
    k: &TransitionKernel,
    ts: &[f64],
    opts: &SinkhornOptions,
) -> Result<LongtimeReport, SchrodingerError> {
    let h_q_m = invariant_gap(q, k)?.ok_or(KernelError::NoInvariant)?;
    let rows = schrodinger_value_sweep(p, q, k, ts, opts)?;
    let ckp_holds = rows
        .iter()
        .all(|r| r.tv <= (2.0 * r.h_product.max(0.0)).sqrt() + 1e-9);
    let product_gap_decreasing = rows.windows(2).all(|w| w[1].h_product < w[0].h_product);
    Ok(LongtimeReport {
        rows,
        h_q_m,
        ckp_holds,
        product_gap_decreasing,
    })
}

/// Long-time upper bound `S(Q) + C (1 + ∫|x|^2 (P + Q))`.
pub fn upper_bound_longtime_rhs(q: &GridMeasure, p: &GridMeasure, c_bar: f64) -> Result<f64, SchrodingerError> {
    let s = entropy_s(q);
    if !s.finite {
        return Err(SchrodingerError::EntropyInfinite);
    }
    Ok(s.value + c_bar * (1.0 + p.moment_r(2.0) + q.moment_r(2.0)))
}

/// Smallest `C` on `1, 2, 4, ...` for which the long-time bound covers every value.
pub fn fit_longtime_constant(q: &GridMeasure, p: &GridMeasure, values: &[f64]) -> Result<f64, SchrodingerError> {
    let worst = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut c = 1.0;
    while upper_bound_longtime_rhs(q, p, c)? < worst {
        c *= 2.0;
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{discretize_gaussian, GaussianSpec, GridSpec, MeasureSpec};
    use crate::transport::heat_smoothed_marginal_on;

    fn normal(grid: &GridSpec, mean: f64, sd: f64) -> GridMeasure {
        discretize_gaussian(&GaussianSpec::normal_1d(mean, sd).unwrap(), grid).unwrap()
    }

    #[test]
    fn gaussian_relative_entropy() {
        let grid = GridSpec::interval(-10.0, 11.0, 4200).unwrap();
        let mu = normal(&grid, 1.0, 1.0);
        let nu = normal(&grid, 0.0, 1.0);
        let h = relative_entropy(&mu, &nu).unwrap();
        assert!((h.value - 0.5).abs() < 1e-3);
        assert!(relative_entropy(&mu, &mu).unwrap().value.abs() < 1e-15);
    }

    #[test]
    fn entropy_infinite_and_shapes() {
        let h = relative_entropy_masses(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(!h.finite);
        assert!(matches!(
            relative_entropy_masses(&[1.0], &[0.5, 0.5]),
            Err(SchrodingerError::ShapeMismatch(1, 2))
        ));
        assert_eq!(relative_entropy_masses(&[0.0, 1.0], &[0.0, 1.0]).unwrap().value, 0.0);
    }

    #[test]
    fn differential_entropies() {
        let unit = GridMeasure::uniform(GridSpec::interval(0.0, 1.0, 100).unwrap()).unwrap();
        assert!(entropy_s(&unit).value.abs() < 1e-12);
        let half = GridMeasure::uniform(GridSpec::interval(0.0, 0.5, 100).unwrap()).unwrap();
        assert!((entropy_s(&half).value - 2f64.ln()).abs() < 1e-12);
        let g = normal(&GridSpec::interval(-10.0, 10.0, 4000).unwrap(), 0.0, 1.0);
        let expected = -0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert!((entropy_s(&g).value - expected).abs() < 1e-3);
    }

    /// Damped Newton on the concave dual, with the last column potential fixed at 0.
    fn newton_oracle(reference: &Reference) -> f64 {
        let (m, n) = (reference.rows, reference.cols);
        let r: Vec<f64> = reference.log_mass.iter().map(|l| l.exp()).collect();
        let a: Vec<f64> = reference.log_a.iter().map(|l| l.exp()).collect();
        let b: Vec<f64> = reference.log_b.iter().map(|l| l.exp()).collect();
        let k = m + n - 1;
        let mut z = vec![0.0; k];
        let plan = |z: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    let g = if j < n - 1 { z[m + j] } else { 0.0 };
                    out[i * n + j] = r[i * n + j] * (z[i] + g).exp();
                }
            }
            out
        };
        let dual = |z: &[f64]| -> f64 {
            let pl = plan(z);
            let lin: f64 = (0..m).map(|i| a[i] * z[i]).sum::<f64>()
                + (0..n - 1).map(|j| b[j] * z[m + j]).sum::<f64>();
            lin - pl.iter().sum::<f64>() + 1.0
        };
        for _ in 0..200 {
            let pl = plan(&z);
            let mut grad = vec![0.0; k];
            let mut hess = vec![vec![0.0; k]; k];
            for i in 0..m {
                for j in 0..n {
                    let v = pl[i * n + j];
                    grad[i] -= v;
                    hess[i][i] += v;
                    if j < n - 1 {
                        grad[m + j] -= v;
                        hess[m + j][m + j] += v;
                        hess[i][m + j] += v;
                        hess[m + j][i] += v;
                    }
                }
            }
            for i in 0..m {
                grad[i] += a[i];
            }
            for j in 0..n - 1 {
                grad[m + j] += b[j];
            }
            let inv = crate::stats::weighted_least_squares(&hess, &grad, &vec![1.0; k]).unwrap();
            let step = inv.coef;
            let mut s = 1.0;
            let base = dual(&z);
            loop {
                let trial: Vec<f64> = z.iter().zip(&step).map(|(x, d)| x + s * d).collect();
                if dual(&trial) >= base - 1e-15 || s < 1e-8 {
                    z = trial;
                    break;
                }
                s *= 0.5;
            }
        }
        let pl = plan(&z);
        relative_entropy_masses(&pl, &r).unwrap().value
    }

    #[test]
    fn five_by_five_matches_newton_oracle() {
        let k = TransitionKernel::heat(1.0, 1).unwrap();
        let grid_p = GridSpec::interval(-1.0, 1.5, 5).unwrap();
        let grid_q = GridSpec::interval(-0.5, 2.0, 5).unwrap();
        let p = GridMeasure::from_density(grid_p, vec![1.0, 2.0, 3.0, 1.0, 0.5]).unwrap();
        let q = GridMeasure::from_density(grid_q, vec![0.5, 0.5, 1.0, 3.0, 2.0]).unwrap();
        let reference = Reference::build(&p, &q, &k, 0.5).unwrap();
        let sol = sinkhorn_on(&reference, &SinkhornOptions::default()).unwrap();
        let oracle = newton_oracle(&reference);
        assert!((sol.value - oracle).abs() < 1e-5, "{} vs {}", sol.value, oracle);
        assert!(sol.marginal_residual <= 1e-9);
        assert!((sol.value - sol.dual_value).abs() < 1e-6);
    }

    #[test]
    fn matched_marginal_costs_nothing() {
        let k = TransitionKernel::heat(1.0, 1).unwrap();
        let grid = GridSpec::interval(-6.0, 6.0, 240).unwrap();
        let p = normal(&grid, 0.0, 1.0);
        // Push P through the grid-restricted reference to get an exactly matched Q.
        let reference = Reference::build(&p, &p, &k, 0.5).unwrap();
        let n = reference.cols;
        let mut qd = vec![0.0; n];
        for i in 0..reference.rows {
            for j in 0..n {
                qd[j] += reference.log_mass[i * n + j].exp();
            }
        }
        let vol = grid.cell_volume();
        let q = GridMeasure::from_density(grid.clone(), qd.iter().map(|m| m / vol).collect()).unwrap();
        let sol = sinkhorn_solve(&p, &q, &k, 0.5, &SinkhornOptions::default()).unwrap();
        assert!(sol.value.abs() < 1e-6);
        // Same check against the continuum heat-evolved law.
        let evolved = heat_smoothed_marginal_on(
            &MeasureSpec::Gaussian(GaussianSpec::normal_1d(0.0, 1.0).unwrap()),
            &k,
            0.5,
            &grid,
        )
        .unwrap();
        let sol2 = sinkhorn_solve(&p, &evolved, &k, 0.5, &SinkhornOptions::default()).unwrap();
        assert!(sol2.value.abs() < 1e-4, "{}", sol2.value);
    }

    #[test]
    fn symmetric_two_cell_problem() {
        let k = TransitionKernel::heat(1.0, 1).unwrap();
        let grid = GridSpec::interval(-1.0, 1.0, 2).unwrap();
        let u = GridMeasure::uniform(grid).unwrap();
        let sol = sinkhorn_solve(&u, &u, &k, 1.0, &SinkhornOptions { tol: 1e-10, ..Default::default() }).unwrap();
        let c = &sol.coupling;
        assert!((c.get(0, 0) - c.get(1, 1)).abs() < 1e-12);
        assert!((c.get(0, 1) - c.get(1, 0)).abs() < 1e-12);
        assert!(sol.marginal_residual <= 1e-10);
    }

    #[test]
    fn factorization_and_gauge() {
        let k = TransitionKernel::ou(1.0, 2f64.sqrt(), 1).unwrap();
        let gp = GridSpec::interval(-6.0, 7.0, 65).unwrap();
        let gq = GridSpec::interval(-7.0, 5.0, 50).unwrap();
        let p = normal(&gp, 0.5, 1.0);
        let q = normal(&gq, -1.0, 0.8);
        let t = 0.7;
        let sol = sinkhorn_solve(&p, &q, &k, t, &SinkhornOptions::default()).unwrap();
        let a = p.masses();
        let gauge: f64 = sol.phi2.iter().zip(&a).map(|(x, y)| x * y).sum();
        assert!(gauge.abs() < 1e-10);
        let xs = gp.centers();
        let ys = gq.centers();
        for i in (0..65).step_by(7) {
            for j in (0..50).step_by(6) {
                let pd = p.density()[i] * q.density()[j] * gp.cell_volume() * gq.cell_volume();
                let expect = (-sol.phi1[j] - sol.phi2[i]).exp() * k.eval(0.0, &xs[i], t, &ys[j]).unwrap() * pd;
                let got = sol.coupling.get(i, j);
                assert!((got - expect).abs() <= 1e-7 * expect.max(1e-300), "{got} {expect}");
            }
        }
        let trace = &sol.residual_trace;
        assert!(trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)), "{trace:?}");
    }

    #[test]
    fn dual_identity_with_reported_potentials() {
        let k = TransitionKernel::heat(1.0, 1).unwrap();
        let g = GridSpec::interval(-6.0, 7.0, 130).unwrap();
        let p = normal(&g, 0.0, 1.0);
        let q = normal(&g, 1.0, 1.0);
        let sol = sinkhorn_solve(&p, &q, &k, 0.5, &SinkhornOptions::default()).unwrap();
        let a = p.masses();
        let b = q.masses();
        let vol = g.cell_volume();
        let dual = b.iter().map(|bj| bj * (bj / vol).ln()).sum::<f64>()
            - a.iter().zip(&sol.phi2).map(|(x, y)| x * y).sum::<f64>()
            - b.iter().zip(&sol.phi1).map(|(x, y)| x * y).sum::<f64>()
            + a.iter().zip(&sol.log_row_norm).map(|(x, y)| x * y).sum::<f64>();
        assert!((dual - sol.value).abs() < 1e-6);
    }

    #[test]
    fn unique_from_two_starts() {
        let k = TransitionKernel::heat(1.0, 1).unwrap();
        let g = GridSpec::interval(-6.0, 7.0, 100).unwrap();
        let p = normal(&g, 0.0, 1.0);
        let q = normal(&g, 1.0, 1.0);
        let a = sinkhorn_solve(&p, &q, &k, 0.3, &SinkhornOptions::default()).unwrap();
        let init: Vec<f64> = (0..100).map(|j| (j as f64 * 0.37).sin() * 3.0).collect();
        let b = sinkhorn_solve(&p, &q, &k, 0.3, &SinkhornOptions { init: Some(init), ..Default::default() }).unwrap();
        let l1: f64 = a.coupling.mass.iter().zip(&b.coupling.mass).map(|(x, y)| (x - y).abs()).sum();
        assert!(l1 < 1e-6);
    }

    #[test]
    fn not_converged_returns_iterate() {
        let k = TransitionKernel::heat(1.0, 1).unwrap();
        let g = GridSpec::interval(-6.0, 7.0, 100).unwrap();
        let p = normal(&g, 0.0, 1.0);
        let q = normal(&g, 1.0, 1.0);
        match sinkhorn_solve(&p, &q, &k, 0.1, &SinkhornOptions { max_iter: 2, ..Default::default() }) {
            Err(SchrodingerError::NotConverged(sol)) => {
                assert_eq!(sol.iterations, 2);
                assert!(!sol.converged);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rhs_formulas() {
        let lower = schrodinger_lower_rhs(0.01, 1.0, 1.0, 1.0, 0.0, 0.5);
        assert!((lower - 12.25).abs() < 1e-12);
        assert!(schrodinger_lower_rhs(0.3, 0.0, 1.0, 1.0, 0.5, 0.3) <= 0.0);
        let g = GridSpec::interval(-10.0, 10.0, 4000).unwrap();
        let n = normal(&g, 0.0, 1.0);
        let upper = schrodinger_upper_rhs(1.0, &n, &n, 2.0, 1).unwrap();
        let expected = 2.0 * 2.0 + entropy_s(&n).value + 2f64.ln();
        assert!((upper - expected).abs() < 1e-6);
        assert!((product_second_moment(&n, &n) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn longtime_approach_for_ou() {
        let k = TransitionKernel::ou(1.0, 2f64.sqrt(), 1).unwrap();
        let g = GridSpec::interval(-7.0, 7.0, 120).unwrap();
        let p = normal(&g, 1.0, 1.0);
        let q = normal(&g, -1.0, 1.0);
        let rep = longtime_limits(&p, &q, &k, &[1.0, 2.0, 5.0, 10.0], &SinkhornOptions::default()).unwrap();
        assert!(rep.ckp_holds);
        assert!(rep.product_gap_decreasing);
        assert!((rep.h_q_m - 0.5).abs() < 1e-3);
        let last = rep.rows.last().unwrap();
        assert!((last.v_s - rep.h_q_m).abs() < 0.05);
        let values: Vec<f64> = rep.rows.iter().map(|r| r.v_s).collect();
        let c = fit_longtime_constant(&q, &p, &values).unwrap();
        assert!(upper_bound_longtime_rhs(&q, &p, c).unwrap() >= values.iter().copied().fold(0.0, f64::max));
    }
}
