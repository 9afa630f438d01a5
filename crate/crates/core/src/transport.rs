//! Optimal transport for the cost `|x - y|^r`, `r >= 1`.
//!
//! [`solve_exact`] runs the transportation simplex (MODI potentials on a
//! spanning-tree basis) on finite supports. [`solve_quantile_1d`] uses the
//! monotone rearrangement, which is optimal on the line for convex costs.

use std::collections::VecDeque;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::kernels::{KernelError, TransitionKernel};
use crate::measures::{
    dist, pow_abs, DiscreteMeasure, GaussianSpec, GridMeasure, GridSpec, MeasureError,
    MeasureSpec, Point, WeightedPoints,
};

/// Largest number of cost-matrix cells [`solve_exact`] accepts.
pub const MAX_EXACT_CELLS: usize = 1_000_000;
/// Midpoints used by the grid quantile quadrature.
pub const QUANTILE_NODES: usize = 10_000;
/// Consecutive zero-step pivots before switching to Bland's rule.
const DEGENERATE_STREAK: usize = 50;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("problem has {rows} x {cols} cells, above the limit of {MAX_EXACT_CELLS}")]
    SizeExceeded { rows: usize, cols: usize },
    #[error("cost exponent must satisfy r >= 1, got {0}")]
    CostExponent(f64),
    #[error("quantile coupling needs d = 1, got d = {0}")]
    DimensionError(usize),
    #[error("measures live in different dimensions ({0} and {1})")]
    DimensionMismatch(usize, usize),
    #[error("simplex did not terminate within {0} pivots")]
    IterationLimit(usize),
    #[error("unsupported input: {0}")]
    Unsupported(&'static str),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportMethod {
    ExactLp,
    Quantile1d,
}

/// A transport plan between two finite supports, stored densely row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub dim: usize,
    pub row_support: Vec<Point>,
    pub col_support: Vec<Point>,
    pub mass: Vec<f64>,
}

impl Coupling {
    pub fn rows(&self) -> usize {
        self.row_support.len()
    }

    pub fn cols(&self) -> usize {
        self.col_support.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.mass[i * self.cols() + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.mass.chunks(self.cols()).map(|c| c.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols()];
        for row in self.mass.chunks(self.cols()) {
            for (o, m) in out.iter_mut().zip(row) {
                *o += m;
            }
        }
        out
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// `sum_ij mass_ij |x_i - y_j|^r`.
    pub fn cost(&self, r: f64) -> f64 {
        let mut total = 0.0;
        for (i, x) in self.row_support.iter().enumerate() {
            for (j, y) in self.col_support.iter().enumerate() {
                let m = self.get(i, j);
                if m != 0.0 {
                    total += m * pow_abs(dist(x, y), r);
                }
            }
        }
        total
    }

    /// Largest marginal violation against the given weights.
    pub fn marginal_error(&self, row_weights: &[f64], col_weights: &[f64]) -> f64 {
        let (rs, cs) = (self.row_sums(), self.col_sums());
        let rows = rs.iter().zip(row_weights).map(|(a, b)| (a - b).abs());
        let cols = cs.iter().zip(col_weights).map(|(a, b)| (a - b).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransportResult {
    pub value: f64,
    pub method: TransportMethod,
    #[serde(flatten, serialize_with = "serialize_coupling")]
    pub coupling: Coupling,
}

fn trim(dim: usize, pts: &[Point]) -> Vec<Vec<f64>> {
    pts.iter().map(|p| p[..dim].to_vec()).collect()
}

fn serialize_coupling<S: Serializer>(c: &Coupling, s: S) -> Result<S::Ok, S::Error> {
    #[derive(Serialize)]
    struct Dense {
        rows: Vec<Vec<f64>>,
        cols: Vec<Vec<f64>>,
        mass: Vec<Vec<f64>>,
    }
    Dense {
        rows: trim(c.dim, &c.row_support),
        cols: trim(c.dim, &c.col_support),
        mass: c.mass.chunks(c.cols()).map(<[f64]>::to_vec).collect(),
    }
    .serialize(s)
}

fn check_exponent(r: f64) -> Result<(), TransportError> {
    if r >= 1.0 && r.is_finite() {
        Ok(())
    } else {
        Err(TransportError::CostExponent(r))
    }
}

fn lex_order(pts: &[Point]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    idx.sort_by(|&a, &b| {
        pts[a][0]
            .total_cmp(&pts[b][0])
            .then(pts[a][1].total_cmp(&pts[b][1]))
    });
    idx
}

struct Basis {
    rows: usize,
    cols: usize,
    cells: Vec<(usize, usize)>,
    flow: Vec<f64>,
}

impl Basis {
    /// Northwest-corner start along the given row and column orders.
    fn northwest(a: &[f64], b: &[f64], row_order: &[usize], col_order: &[usize]) -> Self {
        let (m, n) = (a.len(), b.len());
        let mut supply: Vec<f64> = row_order.iter().map(|&i| a[i]).collect();
        let mut demand: Vec<f64> = col_order.iter().map(|&j| b[j]).collect();
        let mut cells = Vec::with_capacity(m + n - 1);
        let mut flow = Vec::with_capacity(m + n - 1);
        let (mut p, mut q) = (0, 0);
        loop {
            let x = supply[p].min(demand[q]).max(0.0);
            cells.push((row_order[p], col_order[q]));
            flow.push(x);
            supply[p] -= x;
            demand[q] -= x;
            if p == m - 1 && q == n - 1 {
                break;
            }
            if p == m - 1 {
                q += 1;
            } else if q == n - 1 || supply[p] <= demand[q] {
                p += 1;
            } else {
                q += 1;
            }
        }
        Basis {
            rows: m,
            cols: n,
            cells,
            flow,
        }
    }

    /// Adjacency over nodes `0..rows` (rows) and `rows..rows+cols` (columns).
    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.rows + self.cols];
        for (k, &(i, j)) in self.cells.iter().enumerate() {
            adj[i].push((self.rows + j, k));
            adj[self.rows + j].push((i, k));
        }
        adj
    }

    fn potentials(&self, adj: &[Vec<(usize, usize)>], cost: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (m, n) = (self.rows, self.cols);
        let mut pot = vec![f64::NAN; m + n];
        pot[0] = 0.0;
        let mut queue = VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            for &(w, k) in &adj[u] {
                if pot[w].is_nan() {
                    let (i, j) = self.cells[k];
                    pot[w] = cost[i * n + j] - pot[u];
                    queue.push_back(w);
                }
            }
        }
        (pot[..m].to_vec(), pot[m..].to_vec())
    }

    /// Basis cells on the tree path from column `j` to row `i`, in order.
    fn path(&self, adj: &[Vec<(usize, usize)>], i: usize, j: usize) -> Vec<usize> {
        let total = self.rows + self.cols;
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; total];
        let mut seen = vec![false; total];
        seen[i] = true;
        let mut queue = VecDeque::from([i]);
        let target = self.rows + j;
        while let Some(u) = queue.pop_front() {
            if u == target {
                break;
            }
            for &(w, k) in &adj[u] {
                if !seen[w] {
                    seen[w] = true;
                    parent[w] = Some((u, k));
                    queue.push_back(w);
                }
            }
        }
        let mut out = Vec::new();
        let mut node = target;
        while node != i {
            let (prev, k) = parent[node].expect("basis is a spanning tree");
            out.push(k);
            node = prev;
        }
        out
    }
}

/// Transportation simplex on a dense cost matrix. Returns the row-major plan.
fn transport_simplex(a: &[f64], b: &[f64], cost: &[f64], basis: Basis) -> Result<Vec<f64>, TransportError> {
    let (m, n) = (a.len(), b.len());
    let scale = cost.iter().fold(0.0f64, |acc, c| acc.max(c.abs())).max(1.0);
    let tol = 1e-12 * scale;
    let max_pivots = 50 * (m + n) * (m + n) + 1000;
    let mut basis = basis;
    let mut in_basis = vec![false; m * n];
    for &(i, j) in &basis.cells {
        in_basis[i * n + j] = true;
    }
    let mut streak = 0usize;
    for _ in 0..max_pivots {
        let adj = basis.adjacency();
        let (u, v) = basis.potentials(&adj, cost);
        let bland = streak >= DEGENERATE_STREAK;
        let mut entering: Option<(usize, usize)> = None;
        let mut best = -tol;
        'scan: for i in 0..m {
            for j in 0..n {
                if in_basis[i * n + j] {
                    continue;
                }
                let reduced = cost[i * n + j] - u[i] - v[j];
                // Strict comparison keeps the lowest (i, j) among ties.
                if reduced < best {
                    best = reduced;
                    entering = Some((i, j));
                    if bland {
                        break 'scan;
                    }
                }
            }
        }
        let Some((ei, ej)) = entering else {
            let mut plan = vec![0.0; m * n];
            for (&(i, j), &f) in basis.cells.iter().zip(&basis.flow) {
                plan[i * n + j] = f;
            }
            return Ok(plan);
        };
        let path = basis.path(&adj, ei, ej);
        // Cells on the path alternate -, +, -, ... starting next to column ej.
        let mut leave_pos = 0;
        let mut theta = f64::INFINITY;
        let mut leave_cell = (usize::MAX, usize::MAX);
        for (pos, &k) in path.iter().enumerate().step_by(2) {
            let f = basis.flow[k];
            let cell = basis.cells[k];
            if f < theta || (f == theta && cell < leave_cell) {
                theta = f;
                leave_pos = pos;
                leave_cell = cell;
            }
        }
        let theta = theta.max(0.0);
        for (pos, &k) in path.iter().enumerate() {
            if pos % 2 == 0 {
                basis.flow[k] -= theta;
            } else {
                basis.flow[k] += theta;
            }
        }
        let k_out = path[leave_pos];
        let (oi, oj) = basis.cells[k_out];
        in_basis[oi * n + oj] = false;
        in_basis[ei * n + ej] = true;
        basis.cells[k_out] = (ei, ej);
        basis.flow[k_out] = theta;
        if theta > 0.0 {
            streak = 0;
        } else {
            streak += 1;
        }
    }
    Err(TransportError::IterationLimit(max_pivots))
}

fn cost_matrix(xs: &[Point], ys: &[Point], r: f64) -> Vec<f64> {
    let mut c = Vec::with_capacity(xs.len() * ys.len());
    for x in xs {
        for y in ys {
            c.push(pow_abs(dist(x, y), r));
        }
    }
    c
}

fn result(dim: usize, xs: &[Point], ys: &[Point], mass: Vec<f64>, r: f64, method: TransportMethod) -> TransportResult {
    let coupling = Coupling {
        dim,
        row_support: xs.to_vec(),
        col_support: ys.to_vec(),
        mass,
    };
    let value = coupling.cost(r);
    TransportResult {
        value,
        method,
        coupling,
    }
}

/// Exact optimal transport between two discrete measures.
pub fn solve_exact(p: &DiscreteMeasure, q: &DiscreteMeasure, r: f64) -> Result<TransportResult, TransportError> {
    check_exponent(r)?;
    if p.dim() != q.dim() {
        return Err(TransportError::DimensionMismatch(p.dim(), q.dim()));
    }
    let (m, n) = (p.len(), q.len());
    if m.saturating_mul(n) > MAX_EXACT_CELLS {
        return Err(TransportError::SizeExceeded { rows: m, cols: n });
    }
    let (a, b) = (p.weights(), q.weights());
    if m == 1 || n == 1 {
        let mass = a.iter().flat_map(|ai| b.iter().map(move |bj| ai * bj)).collect();
        return Ok(result(p.dim(), p.points(), q.points(), mass, r, TransportMethod::ExactLp));
    }
    let cost = cost_matrix(p.points(), q.points(), r);
    let basis = Basis::northwest(a, b, &lex_order(p.points()), &lex_order(q.points()));
    let plan = transport_simplex(a, b, &cost, basis)?;
    Ok(result(p.dim(), p.points(), q.points(), plan, r, TransportMethod::ExactLp))
}

/// A one-dimensional input for [`solve_quantile_1d`].
#[derive(Debug, Clone, Copy)]
pub enum LineMeasure<'a> {
    Atoms(&'a DiscreteMeasure),
    Cells(&'a GridMeasure),
}

impl<'a> From<&'a DiscreteMeasure> for LineMeasure<'a> {
    fn from(m: &'a DiscreteMeasure) -> Self {
        LineMeasure::Atoms(m)
    }
}

impl<'a> From<&'a GridMeasure> for LineMeasure<'a> {
    fn from(m: &'a GridMeasure) -> Self {
        LineMeasure::Cells(m)
    }
}

impl LineMeasure<'_> {
    fn dim(&self) -> usize {
        match self {
            LineMeasure::Atoms(m) => m.dim(),
            LineMeasure::Cells(m) => m.dim(),
        }
    }

    fn support(&self) -> Vec<Point> {
        match self {
            LineMeasure::Atoms(m) => m.points().to_vec(),
            LineMeasure::Cells(m) => m.grid().centers(),
        }
    }

    fn masses(&self) -> Vec<f64> {
        match self {
            LineMeasure::Atoms(m) => m.weights().to_vec(),
            LineMeasure::Cells(m) => m.masses(),
        }
    }

    /// Quantile function evaluated at increasing levels `us`.
    fn quantiles(&self, us: &[f64]) -> Vec<f64> {
        let masses = self.masses();
        let support = self.support();
        let order = lex_order(&support);
        let total: f64 = masses.iter().sum();
        let mut out = Vec::with_capacity(us.len());
        let mut k = 0;
        let mut below = 0.0;
        for &u in us {
            let level = u * total;
            while k + 1 < order.len() && below + masses[order[k]] < level {
                below += masses[order[k]];
                k += 1;
            }
            let idx = order[k];
            out.push(match self {
                LineMeasure::Atoms(_) => support[idx][0],
                LineMeasure::Cells(g) => {
                    let h = g.grid().spacing;
                    let lo = g.grid().corner(idx)[0];
                    let frac = ((level - below) / masses[idx]).clamp(0.0, 1.0);
                    lo + h * frac
                }
            });
        }
        out
    }
}

/// Monotone plan between two weighted supports on the line.
fn monotone_plan(xs: &[Point], a: &[f64], ys: &[Point], b: &[f64]) -> Vec<f64> {
    let (m, n) = (xs.len(), ys.len());
    let (ox, oy) = (lex_order(xs), lex_order(ys));
    let mut plan = vec![0.0; m * n];
    let mut ra: Vec<f64> = ox.iter().map(|&i| a[i]).collect();
    let mut rb: Vec<f64> = oy.iter().map(|&j| b[j]).collect();
    let (mut p, mut q) = (0, 0);
    while p < m && q < n {
        let x = ra[p].min(rb[q]);
        plan[ox[p] * n + oy[q]] += x;
        ra[p] -= x;
        rb[q] -= x;
        let last_p = p + 1 == m;
        let last_q = q + 1 == n;
        if last_p && last_q {
            break;
        }
        if last_p {
            q += 1;
        } else if last_q || ra[p] <= rb[q] {
            p += 1;
        } else {
            q += 1;
        }
    }
    plan
}

/// Optimal transport on the line through the quantile coupling.
///
/// Two atomic measures give the exact value. If either input is a grid,
/// the value comes from a midpoint rule on `[0, 1]` applied to the
/// piecewise-linear quantile functions, and the returned plan is the
/// monotone plan between cell centers.
pub fn solve_quantile_1d<'a, 'b>(
    p: impl Into<LineMeasure<'a>>,
    q: impl Into<LineMeasure<'b>>,
    r: f64,
) -> Result<TransportResult, TransportError> {
    let (p, q) = (p.into(), q.into());
    check_exponent(r)?;
    for m in [&p, &q] {
        if m.dim() != 1 {
            return Err(TransportError::DimensionError(m.dim()));
        }
    }
    let (xs, ys) = (p.support(), q.support());
    let plan = monotone_plan(&xs, &p.masses(), &ys, &q.masses());
    let mut out = result(1, &xs, &ys, plan, r, TransportMethod::Quantile1d);
    if matches!((p, q), (LineMeasure::Atoms(_), LineMeasure::Atoms(_))) {
        return Ok(out);
    }
    let us: Vec<f64> = (0..QUANTILE_NODES)
        .map(|k| (k as f64 + 0.5) / QUANTILE_NODES as f64)
        .collect();
    let (fp, fq) = (p.quantiles(&us), q.quantiles(&us));
    out.value = fp
        .iter()
        .zip(&fq)
        .map(|(a, b)| pow_abs(a - b, r))
        .sum::<f64>()
        / QUANTILE_NODES as f64;
    Ok(out)
}

/// Law of `X(t)` under the uncontrolled dynamics started from `p`, on `grid`.
pub fn heat_smoothed_marginal_on(
    p: &MeasureSpec,
    kernel: &TransitionKernel,
    t: f64,
    grid: &GridSpec,
) -> Result<GridMeasure, TransportError> {
    if grid.dim() != kernel.dim() || p.dim() != kernel.dim() {
        return Err(TransportError::DimensionMismatch(p.dim(), kernel.dim()));
    }
    let density: Vec<f64> = match p {
        MeasureSpec::Discrete(m) => grid
            .centers()
            .iter()
            .map(|y| {
                m.points()
                    .iter()
                    .zip(m.weights())
                    .map(|(x, w)| w * kernel.log_density(t, x, y).exp())
                    .sum()
            })
            .collect(),
        MeasureSpec::Gaussian(g) => {
            let law = smoothed_gaussian(g, kernel, t)?;
            grid.centers().iter().map(|y| law.density(y)).collect()
        }
        MeasureSpec::Grid(_) => return Err(TransportError::Unsupported("grid initial law")),
    };
    Ok(GridMeasure::from_density(grid.clone(), density)?)
}

fn smoothed_gaussian(g: &GaussianSpec, kernel: &TransitionKernel, t: f64) -> Result<GaussianSpec, TransportError> {
    let f = match kernel {
        TransitionKernel::Heat { .. } => 1.0,
        TransitionKernel::OrnsteinUhlenbeck { theta, .. } => (-theta * t).exp(),
    };
    let v = kernel.variance(t);
    let c = g.cov();
    let mean = g.mean();
    let mut cov = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            cov[i][j] = f * f * c[i][j] + if i == j { v } else { 0.0 };
        }
    }
    Ok(GaussianSpec::new(
        g.dim(),
        [f * mean[0], f * mean[1]],
        cov,
    )?)
}

/// Law of `X(t)` under the uncontrolled dynamics started from `p`, on an
/// automatically sized grid covering 8 standard deviations around every
/// component mean, with 20 cells per kernel standard deviation.
pub fn heat_smoothed_marginal(
    p: &MeasureSpec,
    kernel: &TransitionKernel,
    t: f64,
) -> Result<GridMeasure, TransportError> {
    if !(t > 0.0) {
        return Err(KernelError::TimeOrder { s: 0.0, t }.into());
    }
    let d = kernel.dim();
    let (centers, sd, fine): (Vec<Point>, f64, f64) = match p {
        MeasureSpec::Discrete(m) => {
            let sd = kernel.scale(t);
            (m.points().iter().map(|x| kernel.mean(x, t)).collect(), sd, sd)
        }
        MeasureSpec::Gaussian(g) => {
            let law = smoothed_gaussian(g, kernel, t)?;
            let sd = law.sd(0).max(if d == 2 { law.sd(1) } else { 0.0 });
            let fine = law.sd(0).min(if d == 2 { law.sd(1) } else { f64::INFINITY });
            (vec![law.mean()], sd, fine)
        }
        MeasureSpec::Grid(_) => return Err(TransportError::Unsupported("grid initial law")),
    };
    let reach = 8.0 * sd;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in &centers {
        for k in 0..d {
            lo = lo.min(c[k] - reach);
            hi = hi.max(c[k] + reach);
        }
    }
    let max_cells = if d == 1 { 200_000 } else { 400 };
    let cells = (((hi - lo) / (fine / 20.0)).ceil() as usize).clamp(16, max_cells);
    let grid = if d == 1 {
        GridSpec::interval(lo, hi, cells)?
    } else {
        GridSpec::square(lo, hi, cells)?
    };
    heat_smoothed_marginal_on(p, kernel, t, &grid)
}
