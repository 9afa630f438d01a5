//! Path simulation for controlled diffusions with additive noise.
//!
//! The central object is the pinned bridge
//! `dX = (Z - X)/(T - t) dt + sigma dB`, `X(0) = Y`, `X(T) = Z`,
//! whose control `u(t) = (Z - X(t))/(T - t)` drives `Y` to `Z`. Steps use the
//! exact Gaussian bridge transition between knots, so the only discretization
//! error sits in the Riemann sum of the running cost.
//!
//! Every path draws from its own ChaCha stream `(seed, path index)`, which
//! makes ensembles independent of the thread count.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::kernels::TransitionKernel;
use crate::measures::{pow_abs, GaussianSpec, Point, PointSampler, MAX_DIM};
use crate::stats::Summary;
use crate::transport::Coupling;

/// Default smallest step before the terminal time, relative to the horizon.
pub const DEFAULT_DT_MIN_REL: f64 = 1e-6;
/// Default equal substeps inside each halving block.
pub const DEFAULT_SUBSTEPS: usize = 128;

#[derive(Debug, Error)]
pub enum SdeError {
    #[error("bridge needs a geometric-tail grid")]
    GridNotRefined,
    #[error("invalid time grid: {0}")]
    BadGrid(String),
    #[error("cost exponent must be positive, got {0}")]
    BadExponent(f64),
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error("no per-path cost for r = {r} with truncation {truncation} and no stored controls")]
    MissingCost { r: f64, truncation: f64 },
    #[error("path dump needs every knot recorded")]
    PartialRecord,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Refinement {
    Uniform,
    GeometricTail { ratio: f64, dt_min: f64, substeps: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGrid {
    pub knots: Vec<f64>,
    pub refinement: Refinement,
}

impl TimeGrid {
    pub fn uniform(start: f64, end: f64, steps: usize) -> Result<Self, SdeError> {
        if !(end > start) || steps == 0 {
            return Err(SdeError::BadGrid(format!("[{start}, {end}] with {steps} steps")));
        }
        let knots = (0..=steps)
            .map(|k| {
                if k == steps {
                    end
                } else {
                    start + (end - start) * k as f64 / steps as f64
                }
            })
            .collect();
        Ok(TimeGrid {
            knots,
            refinement: Refinement::Uniform,
        })
    }

    /// Blocks `[end - L ratio^k, end - L ratio^(k+1)]`, `L = end - start`, each
    /// cut into `substeps` equal steps, until the gap to `end` reaches
    /// `dt_min`; then a single final step of length `dt_min`.
    pub fn geometric_tail(start: f64, end: f64, ratio: f64, dt_min: f64, substeps: usize) -> Result<Self, SdeError> {
        if !(end > start) || !(ratio > 0.0 && ratio < 1.0) || !(dt_min > 0.0) || substeps == 0 {
            return Err(SdeError::BadGrid(format!(
                "[{start}, {end}], ratio {ratio}, dt_min {dt_min}, substeps {substeps}"
            )));
        }
        let len = end - start;
        let mut knots = vec![start];
        if len > dt_min {
            let mut gap = len;
            while gap > dt_min {
                let lo = end - gap;
                let next_gap = (gap * ratio).max(dt_min);
                let hi = end - next_gap;
                for s in 1..=substeps {
                    let t = if s == substeps {
                        hi
                    } else {
                        lo + (hi - lo) * s as f64 / substeps as f64
                    };
                    knots.push(t);
                }
                gap = next_gap;
                if next_gap <= dt_min {
                    break;
                }
            }
        }
        knots.push(end);
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SdeError::BadGrid("knots not strictly increasing".into()));
        }
        Ok(TimeGrid {
            knots,
            refinement: Refinement::GeometricTail {
                ratio,
                dt_min,
                substeps,
            },
        })
    }

    /// Halving blocks down to `1e-6 * end` with the default substep count.
    pub fn bridge_default(start: f64, end: f64) -> Result<Self, SdeError> {
        Self::geometric_tail(start, end, 0.5, DEFAULT_DT_MIN_REL * end, DEFAULT_SUBSTEPS)
    }

    pub fn start(&self) -> f64 {
        self.knots[0]
    }

    pub fn end(&self) -> f64 {
        *self.knots.last().expect("nonempty grid")
    }

    pub fn steps(&self) -> usize {
        self.knots.len() - 1
    }

    /// Default truncation time for the running cost.
    pub fn default_truncation(&self) -> f64 {
        match self.refinement {
            Refinement::GeometricTail { dt_min, .. } => self.end() - dt_min,
            Refinement::Uniform => self.end(),
        }
    }

    pub fn nearest_knot(&self, t: f64) -> usize {
        let idx = self.knots.partition_point(|&k| k < t);
        if idx == 0 {
            return 0;
        }
        if idx >= self.knots.len() {
            return self.knots.len() - 1;
        }
        if (self.knots[idx] - t).abs() < (t - self.knots[idx - 1]).abs() {
            idx
        } else {
            idx - 1
        }
    }
}

/// Noise without control: Brownian with scalar `sigma >= 0`, or a closed-form kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Diffusion {
    Brownian { sigma: f64, d: usize },
    Kernel(TransitionKernel),
}

impl Diffusion {
    pub fn dim(&self) -> usize {
        match self {
            Diffusion::Brownian { d, .. } => *d,
            Diffusion::Kernel(k) => k.dim(),
        }
    }

    fn step_law(&self, x: &Point, dt: f64) -> (Point, f64) {
        match self {
            Diffusion::Brownian { sigma, .. } => (*x, sigma * dt.sqrt()),
            Diffusion::Kernel(k) => (k.mean(x, dt), k.variance(dt).sqrt()),
        }
    }
}

/// Source of `(Y, Z)` endpoint pairs.
pub trait PairSampler: Sync {
    fn dim(&self) -> usize;
    fn draw(&self, rng: &mut ChaCha8Rng) -> (Point, Point);
}

/// A fixed pair.
#[derive(Debug, Clone, Copy)]
pub struct FixedPair {
    pub dim: usize,
    pub y: Point,
    pub z: Point,
}

impl PairSampler for FixedPair {
    fn dim(&self) -> usize {
        self.dim
    }

    fn draw(&self, _: &mut ChaCha8Rng) -> (Point, Point) {
        (self.y, self.z)
    }
}

/// Draws cells of a discrete coupling with an alias table.
#[derive(Debug, Clone)]
pub struct CouplingSampler {
    dim: usize,
    cells: Vec<(Point, Point)>,
    alias: WeightedAliasIndex<f64>,
}

impl CouplingSampler {
    pub fn new(c: &Coupling) -> Result<Self, SdeError> {
        let mut cells = Vec::new();
        let mut weights = Vec::new();
        for (i, x) in c.row_support.iter().enumerate() {
            for (j, y) in c.col_support.iter().enumerate() {
                let m = c.get(i, j);
                if m > 0.0 {
                    cells.push((*x, *y));
                    weights.push(m);
                }
            }
        }
        let alias = WeightedAliasIndex::new(weights)
            .map_err(|e| SdeError::BadParameter(format!("coupling weights: {e}")))?;
        Ok(CouplingSampler {
            dim: c.dim,
            cells,
            alias,
        })
    }
}

impl PairSampler for CouplingSampler {
    fn dim(&self) -> usize {
        self.dim
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> (Point, Point) {
        self.cells[self.alias.sample(rng)]
    }
}

/// Monotone coupling of two 1-D Gaussians: `Z = m_Q + (s_Q/s_P)(Y - m_P)`.
#[derive(Debug, Clone)]
pub struct GaussianMonotone {
    pub p: GaussianSpec,
    pub q: GaussianSpec,
}

impl GaussianMonotone {
    pub fn new(p: GaussianSpec, q: GaussianSpec) -> Result<Self, SdeError> {
        if p.dim() != 1 || q.dim() != 1 {
            return Err(SdeError::BadParameter("monotone Gaussian pairs are 1-D".into()));
        }
        Ok(GaussianMonotone { p, q })
    }
}

impl PairSampler for GaussianMonotone {
    fn dim(&self) -> usize {
        1
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> (Point, Point) {
        let g: f64 = StandardNormal.sample(rng);
        let y = self.p.mean()[0] + self.p.sd(0) * g;
        let z = self.q.mean()[0] + self.q.sd(0) * g;
        ([y, 0.0], [z, 0.0])
    }
}

/// Per-path running cost `sum_k |u_k|^r dt_k` over knots `t_k < truncation`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathCosts {
    pub r: f64,
    pub truncation: f64,
    pub per_path: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    /// Times to record (snapped to the nearest knot); start and end are always kept.
    pub record: Vec<f64>,
    pub record_all: bool,
    pub keep_controls: bool,
    pub cost_exponents: Vec<f64>,
    /// Cost truncation time; the grid default when absent.
    pub truncation: Option<f64>,
    /// Offset added to path indices when choosing RNG streams.
    pub stream_offset: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            record: Vec::new(),
            record_all: false,
            keep_controls: false,
            cost_exponents: Vec::new(),
            truncation: None,
            stream_offset: 0,
        }
    }
}

impl SimOptions {
    pub fn with_costs(exponents: &[f64]) -> Self {
        SimOptions {
            cost_exponents: exponents.to_vec(),
            ..Default::default()
        }
    }
}

/// Simulated paths, stored only at recorded knots.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub dim: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub record_idx: Vec<usize>,
    /// `n_paths x record_idx.len() x dim`, row-major.
    pub states: Vec<f64>,
    /// `n_paths x steps x dim`, row-major, when requested.
    pub controls: Option<Vec<f64>>,
    pub costs: Vec<PathCosts>,
    /// `|Z - Y|^r` is recoverable from the first and last recorded states.
    pub horizon: f64,
    pub sigma_frobenius: f64,
}

impl PathEnsemble {
    /// States of every path at the recorded knot nearest to `t`.
    pub fn marginal(&self, t: f64, axis: usize) -> Vec<f64> {
        let knot = self.grid.nearest_knot(t);
        let slot = self
            .record_idx
            .iter()
            .position(|&k| k == knot)
            .unwrap_or_else(|| panic!("time {t} was not recorded"));
        let width = self.record_idx.len() * self.dim;
        (0..self.n_paths)
            .map(|p| self.states[p * width + slot * self.dim + axis])
            .collect()
    }

    pub fn recorded_time(&self, t: f64) -> f64 {
        self.grid.knots[self.grid.nearest_knot(t)]
    }

    pub fn state(&self, path: usize, slot: usize) -> Point {
        let width = self.record_idx.len() * self.dim;
        let mut p = [0.0; MAX_DIM];
        for (k, v) in p.iter_mut().enumerate().take(self.dim) {
            *v = self.states[path * width + slot * self.dim + k];
        }
        p
    }

    pub fn initial(&self, path: usize) -> Point {
        self.state(path, 0)
    }

    pub fn terminal(&self, path: usize) -> Point {
        self.state(path, self.record_idx.len() - 1)
    }

    pub fn control(&self, path: usize, step: usize) -> Option<Point> {
        let c = self.controls.as_ref()?;
        let steps = self.grid.steps();
        let mut p = [0.0; MAX_DIM];
        for (k, v) in p.iter_mut().enumerate().take(self.dim) {
            *v = c[(path * steps + step) * self.dim + k];
        }
        Some(p)
    }

    /// Writes the flat binary layout: a little-endian `u64` header
    /// `{n_paths, steps, dim, seed}`, the knots, then all states row-major.
    pub fn write_binary(&self, path: &Path) -> Result<(), SdeError> {
        if self.record_idx.len() != self.grid.knots.len() {
            return Err(SdeError::PartialRecord);
        }
        let mut w = BufWriter::new(File::create(path)?);
        for v in [self.n_paths as u64, self.grid.steps() as u64, self.dim as u64, self.seed] {
            w.write_all(&v.to_le_bytes())?;
        }
        for t in &self.grid.knots {
            w.write_all(&t.to_le_bytes())?;
        }
        for s in &self.states {
            w.write_all(&s.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }
}

fn norm_d(v: &Point, d: usize) -> f64 {
    if d == 1 {
        v[0].abs()
    } else {
        v[..d].iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

struct PathOut {
    states: Vec<f64>,
    controls: Vec<f64>,
    costs: Vec<f64>,
}

fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn record_plan(grid: &TimeGrid, opts: &SimOptions) -> (Vec<usize>, Vec<Option<usize>>) {
    let n = grid.knots.len();
    let mut idx: Vec<usize> = if opts.record_all {
        (0..n).collect()
    } else {
        let mut v: Vec<usize> = opts.record.iter().map(|&t| grid.nearest_knot(t)).collect();
        v.push(0);
        v.push(n - 1);
        v
    };
    idx.sort_unstable();
    idx.dedup();
    let mut slot = vec![None; n];
    for (s, &k) in idx.iter().enumerate() {
        slot[k] = Some(s);
    }
    (idx, slot)
}

fn check_exponents(opts: &SimOptions) -> Result<(), SdeError> {
    match opts.cost_exponents.iter().find(|r| !(**r > 0.0)) {
        Some(&r) => Err(SdeError::BadExponent(r)),
        None => Ok(()),
    }
}

/// Shared driver: runs `n_paths` paths in parallel and gathers them in order.
fn run_paths<F>(grid: TimeGrid, dim: usize, n_paths: usize, seed: u64, opts: &SimOptions, horizon: f64, sigma_frobenius: f64, truncation: f64, path: F) -> PathEnsemble
where
    F: Fn(&mut ChaCha8Rng, &[Option<usize>], usize) -> PathOut + Sync,
{
    let (record_idx, slots) = record_plan(&grid, opts);
    let outs: Vec<PathOut> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, opts.stream_offset + i as u64);
            path(&mut rng, &slots, record_idx.len())
        })
        .collect();
    let mut states = Vec::with_capacity(n_paths * record_idx.len() * dim);
    let mut controls = opts
        .keep_controls
        .then(|| Vec::with_capacity(n_paths * grid.steps() * dim));
    let mut costs: Vec<PathCosts> = opts
        .cost_exponents
        .iter()
        .map(|&r| PathCosts {
            r,
            truncation,
            per_path: Vec::with_capacity(n_paths),
        })
        .collect();
    for out in outs {
        states.extend(out.states);
        if let Some(c) = controls.as_mut() {
            c.extend(out.controls);
        }
        for (pc, v) in costs.iter_mut().zip(out.costs) {
            pc.per_path.push(v);
        }
    }
    PathEnsemble {
        grid,
        dim,
        n_paths,
        seed,
        record_idx,
        states,
        controls,
        costs,
        horizon,
        sigma_frobenius,
    }
}

/// Simulates the uncontrolled dynamics with exact Gaussian transitions.
pub fn simulate_uncontrolled(
    diffusion: &Diffusion,
    x0: &PointSampler,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<PathEnsemble, SdeError> {
    check_exponents(opts)?;
    let d = diffusion.dim();
    if x0.dim() != d {
        return Err(SdeError::BadParameter("initial law and diffusion dimensions differ".into()));
    }
    if let Diffusion::Brownian { sigma, .. } = diffusion {
        if !(*sigma >= 0.0) {
            return Err(SdeError::BadParameter(format!("sigma must be >= 0, got {sigma}")));
        }
    }
    let knots = grid.knots.clone();
    let steps = grid.steps();
    let keep = opts.keep_controls;
    let n_costs = opts.cost_exponents.len();
    let truncation = opts.truncation.unwrap_or(grid.end());
    let sigma_f = match diffusion {
        Diffusion::Brownian { sigma, d } => sigma * (*d as f64).sqrt(),
        Diffusion::Kernel(k) => k.sigma_norm(),
    };
    let horizon = grid.end() - grid.start();
    Ok(run_paths(grid, d, n_paths, seed, opts, horizon, sigma_f, truncation, |rng, slots, width| {
        let mut states = vec![0.0; width * d];
        let mut x = x0.draw(rng);
        let mut put = |k: usize, x: &Point| {
            if let Some(s) = slots[k] {
                states[s * d..(s + 1) * d].copy_from_slice(&x[..d]);
            }
        };
        put(0, &x);
        for k in 0..steps {
            let (mean, sd) = diffusion.step_law(&x, knots[k + 1] - knots[k]);
            for a in 0..d {
                let g: f64 = StandardNormal.sample(rng);
                x[a] = mean[a] + sd * g;
            }
            put(k + 1, &x);
        }
        PathOut {
            states,
            controls: if keep { vec![0.0; steps * d] } else { Vec::new() },
            costs: vec![0.0; n_costs],
        }
    }))
}

/// One bridge path from `x` at the first knot to `z` at the last.
#[allow(clippy::too_many_arguments)]
fn bridge_path(
    rng: &mut ChaCha8Rng,
    start: Point,
    z: Point,
    sigma: f64,
    d: usize,
    knots: &[f64],
    slots: &[Option<usize>],
    width: usize,
    exponents: &[f64],
    truncation: f64,
    keep: bool,
) -> PathOut {
    let end = *knots.last().expect("nonempty grid");
    let steps = knots.len() - 1;
    let mut states = vec![0.0; width * d];
    let mut controls = if keep { Vec::with_capacity(steps * d) } else { Vec::new() };
    let mut costs = vec![0.0; exponents.len()];
    let mut x = start;
    if let Some(s) = slots[0] {
        states[s * d..(s + 1) * d].copy_from_slice(&x[..d]);
    }
    for k in 0..steps {
        let (t0, t1) = (knots[k], knots[k + 1]);
        let dt = t1 - t0;
        let rem = end - t0;
        let mut u = [0.0; MAX_DIM];
        for a in 0..d {
            u[a] = (z[a] - x[a]) / rem;
        }
        if keep {
            controls.extend_from_slice(&u[..d]);
        }
        if t0 < truncation {
            let size = norm_d(&u, d);
            for (c, &r) in costs.iter_mut().zip(exponents) {
                *c += pow_abs(size, r) * dt;
            }
        }
        if k + 1 == steps {
            x = z;
        } else {
            let sd = sigma * (dt * (end - t1) / rem).sqrt();
            for a in 0..d {
                let g: f64 = if sd > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
                x[a] += u[a] * dt + sd * g;
            }
        }
        if let Some(s) = slots[k + 1] {
            states[s * d..(s + 1) * d].copy_from_slice(&x[..d]);
        }
    }
    PathOut {
        states,
        controls,
        costs,
    }
}

fn check_bridge(grid: &TimeGrid, sigma: f64, opts: &SimOptions) -> Result<(), SdeError> {
    match grid.refinement {
        Refinement::GeometricTail { dt_min, .. } if dt_min <= DEFAULT_DT_MIN_REL * grid.end() * (1.0 + 1e-9) => {}
        _ => return Err(SdeError::GridNotRefined),
    }
    if !(sigma >= 0.0) {
        return Err(SdeError::BadParameter(format!("sigma must be >= 0, got {sigma}")));
    }
    check_exponents(opts)
}

/// Simulates the pinned bridge on `[grid.start(), grid.end()]` with endpoints from `pairs`.
pub fn simulate_bridge(
    pairs: &dyn PairSampler,
    sigma: f64,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    opts: &SimOptions,
) -> Result<PathEnsemble, SdeError> {
    check_bridge(&grid, sigma, opts)?;
    let d = pairs.dim();
    let knots = grid.knots.clone();
    let truncation = opts.truncation.unwrap_or(grid.default_truncation());
    let horizon = grid.end() - grid.start();
    let exps = opts.cost_exponents.clone();
    let keep = opts.keep_controls;
    let sigma_f = sigma * (d as f64).sqrt();
    Ok(run_paths(grid, d, n_paths, seed, opts, horizon, sigma_f, truncation, |rng, slots, width| {
        let (y, z) = pairs.draw(rng);
        bridge_path(rng, y, z, sigma, d, &knots, slots, width, &exps, truncation, keep)
    }))
}

/// Monte Carlo estimate of a mean running cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub r: f64,
    pub truncation_time: Option<f64>,
    /// Upper bound on the discarded cost after the truncation time, when finite.
    pub truncation_bias: Option<f64>,
}

impl CostEstimate {
    fn from_summary(s: &Summary, r: f64, truncation_time: Option<f64>, truncation_bias: Option<f64>) -> Self {
        CostEstimate {
            mean: s.mean(),
            stderr: s.stderr(),
            n_paths: s.count(),
            r,
            truncation_time,
            truncation_bias,
        }
    }

    /// Scales mean and stderr by a positive factor.
    pub fn scaled(mut self, factor: f64) -> Self {
        self.mean *= factor;
        self.stderr *= factor;
        self.truncation_bias = self.truncation_bias.map(|b| b * factor);
        self
    }
}

/// Tail bound `2^{(r-1)+} [2 |sigma|^r delta^{1-r/2}/(2-r) + delta E|Y-Z|^r / T^r]`.
fn tail_bound(e: &PathEnsemble, r: f64, truncation: f64) -> Option<f64> {
    if r >= 2.0 {
        return None;
    }
    let delta = (e.grid.end() - truncation).max(0.0);
    if delta == 0.0 {
        return Some(0.0);
    }
    let gap: Summary = (0..e.n_paths)
        .map(|p| {
            let (y, z) = (e.initial(p), e.terminal(p));
            let mut diff = [0.0; MAX_DIM];
            for a in 0..e.dim {
                diff[a] = z[a] - y[a];
            }
            pow_abs(norm_d(&diff, e.dim), r)
        })
        .collect();
    let spread = 2.0 * pow_abs(e.sigma_frobenius, r) * delta.powf(1.0 - 0.5 * r) / (2.0 - r);
    let drift = delta * gap.mean() / e.horizon.powf(r);
    Some(2f64.powf((r - 1.0).max(0.0)) * (spread + drift))
}

/// Mean running cost `E sum_k |u_k|^r dt_k` over `t_k < truncation`.
pub fn cost_r(e: &PathEnsemble, r: f64, truncation: Option<f64>) -> Result<CostEstimate, SdeError> {
    if !(r > 0.0) {
        return Err(SdeError::BadExponent(r));
    }
    let trunc = truncation.unwrap_or(e.grid.default_truncation());
    let bias = tail_bound(e, r, trunc);
    if let Some(pc) = e
        .costs
        .iter()
        .find(|pc| pc.r == r && pc.truncation == trunc)
    {
        let s: Summary = pc.per_path.iter().copied().collect();
        return Ok(CostEstimate::from_summary(&s, r, Some(trunc), bias));
    }
    let Some(controls) = e.controls.as_ref() else {
        return Err(SdeError::MissingCost { r, truncation: trunc });
    };
    let steps = e.grid.steps();
    let d = e.dim;
    let s: Summary = (0..e.n_paths)
        .map(|p| {
            (0..steps)
                .filter(|&k| e.grid.knots[k] < trunc)
                .map(|k| {
                    let mut u = [0.0; MAX_DIM];
                    u[..d].copy_from_slice(&controls[(p * steps + k) * d..(p * steps + k + 1) * d]);
                    pow_abs(norm_d(&u, d), r) * (e.grid.knots[k + 1] - e.grid.knots[k])
                })
                .sum::<f64>()
        })
        .collect();
    Ok(CostEstimate::from_summary(&s, r, Some(trunc), bias))
}

/// Endpoint law for [`value_upper_estimate`].
#[derive(Clone, Copy)]
pub enum Endpoints<'a> {
    /// A discrete coupling; paths are allocated to its cells in proportion to mass.
    Coupling(&'a Coupling),
    /// Any sampler; pairs are drawn independently per path.
    Sampler(&'a dyn PairSampler),
}

/// Bridge parameters shared by the estimators.
#[derive(Debug, Clone, Copy)]
pub struct BridgeSetup {
    pub sigma: f64,
    pub horizon: f64,
    pub substeps: usize,
    pub n_paths: usize,
    pub seed: u64,
}

impl BridgeSetup {
    pub fn grid(&self, start: f64) -> Result<TimeGrid, SdeError> {
        TimeGrid::geometric_tail(
            start,
            self.horizon,
            0.5,
            DEFAULT_DT_MIN_REL * self.horizon,
            self.substeps,
        )
    }
}

/// Cost estimates for several exponents from one bridge ensemble.
///
/// With a discrete coupling the estimator is stratified over its cells: each
/// cell with mass `w` gets about `w n` paths and the cell means are combined
/// with weights `w`.
pub fn value_upper_estimates(
    endpoints: Endpoints<'_>,
    setup: &BridgeSetup,
    rs: &[f64],
) -> Result<Vec<CostEstimate>, SdeError> {
    let opts = SimOptions::with_costs(rs);
    match endpoints {
        Endpoints::Sampler(s) => {
            let e = simulate_bridge(s, setup.sigma, setup.grid(0.0)?, setup.n_paths, setup.seed, &opts)?;
            rs.iter().map(|&r| cost_r(&e, r, None)).collect()
        }
        Endpoints::Coupling(c) => {
            let mut out = vec![(0.0, 0.0, 0.0, 0usize); rs.len()];
            let mut offset = 0u64;
            for (i, x) in c.row_support.iter().enumerate() {
                for (j, y) in c.col_support.iter().enumerate() {
                    let w = c.get(i, j);
                    if w <= 0.0 {
                        continue;
                    }
                    let n = ((w * setup.n_paths as f64).round() as usize).max(2);
                    let pair = FixedPair { dim: c.dim, y: *x, z: *y };
                    let cell_opts = SimOptions {
                        stream_offset: offset,
                        ..opts.clone()
                    };
                    offset += n as u64;
                    let e = simulate_bridge(&pair, setup.sigma, setup.grid(0.0)?, n, setup.seed, &cell_opts)?;
                    for (k, &r) in rs.iter().enumerate() {
                        let est = cost_r(&e, r, None)?;
                        out[k].0 += w * est.mean;
                        out[k].1 += (w * est.stderr).powi(2);
                        out[k].2 += w * est.truncation_bias.unwrap_or(f64::INFINITY);
                        out[k].3 += n;
                    }
                }
            }
            let trunc = setup.grid(0.0)?.default_truncation();
            Ok(rs
                .iter()
                .zip(out)
                .map(|(&r, (mean, var, bias, n))| CostEstimate {
                    mean,
                    stderr: var.sqrt(),
                    n_paths: n,
                    r,
                    truncation_time: Some(trunc),
                    truncation_bias: bias.is_finite().then_some(bias),
                })
                .collect())
        }
    }
}

/// Bridge-based estimate of an upper bound on the optimal cost at exponent `r`.
pub fn value_upper_estimate(endpoints: Endpoints<'_>, setup: &BridgeSetup, r: f64) -> Result<CostEstimate, SdeError> {
    if !(1.0..2.0).contains(&r) {
        return Err(SdeError::BadExponent(r));
    }
    Ok(value_upper_estimates(endpoints, setup, &[r])?.remove(0))
}

/// Runs free until `T - delta`, then bridges to `Z` over `[T - delta, T]`.
pub fn delayed_bridge_cost(
    pairs: &dyn PairSampler,
    setup: &BridgeSetup,
    delta: f64,
    r: f64,
) -> Result<CostEstimate, SdeError> {
    let horizon = setup.horizon;
    if !(delta > 0.0 && delta < horizon) {
        return Err(SdeError::BadParameter(format!("delta must lie in (0, {horizon}), got {delta}")));
    }
    if !(r > 0.0) {
        return Err(SdeError::BadExponent(r));
    }
    let switch = horizon - delta;
    let grid = setup.grid(switch)?;
    let opts = SimOptions::with_costs(&[r]);
    check_bridge(&grid, setup.sigma, &opts)?;
    let d = pairs.dim();
    let knots = grid.knots.clone();
    let truncation = grid.default_truncation();
    let sigma = setup.sigma;
    let sigma_f = sigma * (d as f64).sqrt();
    let e = run_paths(grid, d, setup.n_paths, setup.seed, &opts, delta, sigma_f, truncation, |rng, slots, width| {
        let (y, z) = pairs.draw(rng);
        let mut x = y;
        let sd = sigma * switch.sqrt();
        for v in x.iter_mut().take(d) {
            let g: f64 = if sd > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
            *v += sd * g;
        }
        bridge_path(rng, x, z, sigma, d, &knots, slots, width, &[r], truncation, false)
    });
    cost_r(&e, r, None)
}

/// Cost of the time-compressed control and its analytic envelope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompressedCost {
    pub n: f64,
    pub simulated: CostEstimate,
    pub envelope: f64,
}

/// Squeezes the base control into `[T - 1/n, T]` as `nT u(nT(t - T + 1/n))`.
///
/// The compressed cost equals `(nT)^{r-1}` times the base cost path by path;
/// the envelope is `C (nT)^{r-1} base + C' / n`.
pub fn compressed_control_cost(
    base: &PathEnsemble,
    n: f64,
    r: f64,
    c_rt: f64,
    c_rt_prime: f64,
) -> Result<CompressedCost, SdeError> {
    let horizon = base.horizon;
    if !(n * horizon >= 1.0) {
        return Err(SdeError::BadParameter(format!("need n T >= 1, got n = {n}")));
    }
    if !(r > 0.0 && r < 1.0) {
        return Err(SdeError::BadExponent(r));
    }
    let base_cost = cost_r(base, r, None)?;
    let factor = (n * horizon).powf(r - 1.0);
    let simulated = base_cost.scaled(factor);
    Ok(CompressedCost {
        n,
        simulated,
        envelope: c_rt * factor * base_cost.mean + c_rt_prime / n,
    })
}

/// Knots and controls of the compressed control, for ensembles that kept controls.
pub fn compress_controls(base: &PathEnsemble, n: f64) -> Option<(Vec<f64>, Vec<f64>)> {
    let controls = base.controls.as_ref()?;
    let t0 = base.grid.start();
    let end = base.grid.end();
    let scale = n * base.horizon;
    let knots = base
        .grid
        .knots
        .iter()
        .map(|&s| end - 1.0 / n + (s - t0) / scale)
        .collect();
    Some((knots, controls.iter().map(|u| u * scale).collect()))
}
