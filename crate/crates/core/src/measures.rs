//! Probability measures on R^d, d in {1, 2}.
//!
//! Three representations are used throughout the crate:
//!
//! * [`DiscreteMeasure`]: finitely many distinct atoms with positive weights.
//! * [`GridMeasure`]: a piecewise-constant density on an axis-aligned regular
//!   grid. Integrals use the midpoint rule, so each cell contributes
//!   `density * h^d` located at its center.
//! * [`GaussianSpec`]: a normal law, used mainly as a factory for the other two.
//!
//! Points are stored as `[f64; 2]`; in one dimension the second coordinate is
//! always zero, so Euclidean norms need no special casing.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported state-space dimension.
pub const MAX_DIM: usize = 2;

/// A point of R^d padded with zeros up to [`MAX_DIM`].
pub type Point = [f64; MAX_DIM];

const GRID_MASS_TOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-12;
/// Half-width, in standard deviations, a grid must cover around a Gaussian mean.
pub const GAUSSIAN_COVERAGE_SIGMAS: f64 = 6.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("empty input")]
    EmptyInput,
    #[error("dimension {0} is not supported (expected 1 or 2)")]
    Dimension(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("weights must be finite and strictly positive")]
    BadWeights,
    #[error("duplicate atom at index {0}")]
    DuplicatePoint(usize),
    #[error("density must be finite, nonnegative and have positive total mass")]
    BadDensity,
    #[error("grid must have positive spacing and nonzero counts on every axis")]
    BadGrid,
    #[error("grid too narrow on axis {axis}: [{lo}, {hi}] does not cover mean +/- 6 sd [{need_lo}, {need_hi}]")]
    GridTooNarrow {
        axis: usize,
        lo: f64,
        hi: f64,
        need_lo: f64,
        need_hi: f64,
    },
    #[error("covariance must be symmetric positive definite")]
    NotPositiveDefinite,
}

fn check_dim(dim: usize) -> Result<(), MeasureError> {
    if dim == 0 || dim > MAX_DIM {
        Err(MeasureError::Dimension(dim))
    } else {
        Ok(())
    }
}

/// Euclidean norm of a padded point.
pub fn norm(p: &Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1]).sqrt()
}

/// Euclidean distance between two padded points.
pub fn dist(a: &Point, b: &Point) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    (d0 * d0 + d1 * d1).sqrt()
}

fn point_from_slice(dim: usize, coords: &[f64]) -> Result<Point, MeasureError> {
    if coords.len() != dim {
        return Err(MeasureError::DimensionMismatch {
            expected: dim,
            found: coords.len(),
        });
    }
    let mut p = [0.0; MAX_DIM];
    p[..dim].copy_from_slice(coords);
    Ok(p)
}

fn bits(p: &Point) -> [u64; MAX_DIM] {
    [p[0].to_bits(), p[1].to_bits()]
}

/// Anything that can be viewed as a finite list of weighted atoms.
///
/// Grid measures expose their cell centers with cell masses.
pub trait WeightedPoints {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn point(&self, i: usize) -> Point;
    /// Probability mass of atom `i`.
    fn mass(&self, i: usize) -> f64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `∫ |x|^r dm`; exact for atoms, midpoint rule for grids.
    fn moment_r(&self, r: f64) -> f64 {
        (0..self.len())
            .map(|i| {
                let m = self.mass(i);
                if m == 0.0 {
                    0.0
                } else {
                    m * pow_abs(norm(&self.point(i)), r)
                }
            })
            .sum()
    }

    /// Componentwise mean.
    fn mean(&self) -> Point {
        let mut acc = [0.0; MAX_DIM];
        for i in 0..self.len() {
            let p = self.point(i);
            let m = self.mass(i);
            acc[0] += m * p[0];
            acc[1] += m * p[1];
        }
        acc
    }
}

/// `x^r` for `x >= 0` with `0^0 = 1` and `0^r = 0` for `r > 0`.
pub fn pow_abs(x: f64, r: f64) -> f64 {
    if r == 0.0 {
        1.0
    } else if x == 0.0 {
        0.0
    } else {
        (r * x.abs().ln()).exp()
    }
}

/// A finite collection of points, e.g. Monte Carlo draws.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub dim: usize,
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(dim: usize, points: Vec<Point>) -> Result<Self, MeasureError> {
        check_dim(dim)?;
        Ok(Self { dim, points })
    }

    pub fn from_1d(xs: &[f64]) -> Self {
        Self {
            dim: 1,
            points: xs.iter().map(|&x| [x, 0.0]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// First coordinates, convenient in one dimension.
    pub fn xs(&self) -> Vec<f64> {
        self.points.iter().map(|p| p[0]).collect()
    }
}

/// Weighted atoms with pairwise distinct locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DiscreteRaw", into = "DiscreteRaw")]
pub struct DiscreteMeasure {
    dim: usize,
    points: Vec<Point>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiscreteRaw {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl TryFrom<DiscreteRaw> for DiscreteMeasure {
    type Error = MeasureError;

    fn try_from(raw: DiscreteRaw) -> Result<Self, Self::Error> {
        let dim = raw.points.first().ok_or(MeasureError::EmptyInput)?.len();
        check_dim(dim)?;
        let points = raw
            .points
            .iter()
            .map(|p| point_from_slice(dim, p))
            .collect::<Result<Vec<_>, _>>()?;
        DiscreteMeasure::new(dim, points, raw.weights)
    }
}

impl From<DiscreteMeasure> for DiscreteRaw {
    fn from(m: DiscreteMeasure) -> Self {
        DiscreteRaw {
            points: m.points.iter().map(|p| p[..m.dim].to_vec()).collect(),
            weights: m.weights,
        }
    }
}

impl DiscreteMeasure {
    /// Builds a measure from atoms and unnormalized positive weights.
    pub fn new(dim: usize, points: Vec<Point>, weights: Vec<f64>) -> Result<Self, MeasureError> {
        check_dim(dim)?;
        if points.is_empty() {
            return Err(MeasureError::EmptyInput);
        }
        if points.len() != weights.len() {
            return Err(MeasureError::DimensionMismatch {
                expected: points.len(),
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(MeasureError::BadWeights);
        }
        let mut seen = HashMap::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            if p[dim..].iter().any(|&c| c != 0.0) {
                return Err(MeasureError::DimensionMismatch {
                    expected: dim,
                    found: MAX_DIM,
                });
            }
            if seen.insert(bits(p), i).is_some() {
                return Err(MeasureError::DuplicatePoint(i));
            }
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self {
            dim,
            points,
            weights,
        })
    }

    pub fn from_1d(xs: &[f64], weights: &[f64]) -> Result<Self, MeasureError> {
        Self::new(1, xs.iter().map(|&x| [x, 0.0]).collect(), weights.to_vec())
    }

    pub fn dirac(dim: usize, at: Point) -> Result<Self, MeasureError> {
        Self::new(dim, vec![at], vec![1.0])
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

impl WeightedPoints for DiscreteMeasure {
    fn dim(&self) -> usize {
        self.dim
    }
    fn len(&self) -> usize {
        self.points.len()
    }
    fn point(&self, i: usize) -> Point {
        self.points[i]
    }
    fn mass(&self, i: usize) -> f64 {
        self.weights[i]
    }
}

/// Empirical measure of a point cloud: uniform weights, exact duplicates merged.
pub fn empirical(cloud: &PointCloud) -> Result<DiscreteMeasure, MeasureError> {
    if cloud.is_empty() {
        return Err(MeasureError::EmptyInput);
    }
    let mut index: HashMap<[u64; MAX_DIM], usize> = HashMap::new();
    let mut points = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    for p in &cloud.points {
        match index.get(&bits(p)) {
            Some(&k) => counts[k] += 1.0,
            None => {
                index.insert(bits(p), points.len());
                points.push(*p);
                counts.push(1.0);
            }
        }
    }
    DiscreteMeasure::new(cloud.dim, points, counts)
}

/// Axis-aligned regular grid with square cells of side `spacing`.
///
/// `origin` is the lower corner of the first cell; cells are stored row-major
/// (last axis fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub origin: Vec<f64>,
    pub spacing: f64,
    pub counts: Vec<usize>,
}

impl GridSpec {
    pub fn new(origin: Vec<f64>, spacing: f64, counts: Vec<usize>) -> Result<Self, MeasureError> {
        let g = Self {
            origin,
            spacing,
            counts,
        };
        g.validate()?;
        Ok(g)
    }

    /// One-dimensional grid of `cells` cells tiling `[lo, hi]`.
    pub fn interval(lo: f64, hi: f64, cells: usize) -> Result<Self, MeasureError> {
        if !(hi > lo) || cells == 0 {
            return Err(MeasureError::BadGrid);
        }
        Self::new(vec![lo], (hi - lo) / cells as f64, vec![cells])
    }

    /// Square two-dimensional grid tiling `[lo, hi]^2`.
    pub fn square(lo: f64, hi: f64, cells: usize) -> Result<Self, MeasureError> {
        if !(hi > lo) || cells == 0 {
            return Err(MeasureError::BadGrid);
        }
        Self::new(vec![lo, lo], (hi - lo) / cells as f64, vec![cells, cells])
    }

    fn validate(&self) -> Result<(), MeasureError> {
        check_dim(self.origin.len())?;
        if self.counts.len() != self.origin.len() {
            return Err(MeasureError::DimensionMismatch {
                expected: self.origin.len(),
                found: self.counts.len(),
            });
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite())
            || self.counts.iter().any(|&c| c == 0)
            || self.origin.iter().any(|o| !o.is_finite())
        {
            return Err(MeasureError::BadGrid);
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.origin.len()
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `h^d`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dim() as i32)
    }

    pub fn lower(&self, axis: usize) -> f64 {
        self.origin[axis]
    }

    pub fn upper(&self, axis: usize) -> f64 {
        self.origin[axis] + self.spacing * self.counts[axis] as f64
    }

    pub fn center(&self, i: usize) -> Point {
        let h = self.spacing;
        match self.dim() {
            1 => [self.origin[0] + (i as f64 + 0.5) * h, 0.0],
            _ => {
                let n1 = self.counts[1];
                let (i0, i1) = (i / n1, i % n1);
                [
                    self.origin[0] + (i0 as f64 + 0.5) * h,
                    self.origin[1] + (i1 as f64 + 0.5) * h,
                ]
            }
        }
    }

    /// Lower corner of cell `i`.
    pub fn corner(&self, i: usize) -> Point {
        let c = self.center(i);
        let half = 0.5 * self.spacing;
        let mut p = [c[0] - half, 0.0];
        if self.dim() == 2 {
            p[1] = c[1] - half;
        }
        p
    }

    pub fn centers(&self) -> Vec<Point> {
        (0..self.len()).map(|i| self.center(i)).collect()
    }
}

/// Piecewise-constant density on a [`GridSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRaw", into = "GridRaw")]
pub struct GridMeasure {
    grid: GridSpec,
    density: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridRaw {
    origin: Vec<f64>,
    spacing: f64,
    counts: Vec<usize>,
    density: Vec<f64>,
}

impl TryFrom<GridRaw> for GridMeasure {
    type Error = MeasureError;

    fn try_from(raw: GridRaw) -> Result<Self, Self::Error> {
        let grid = GridSpec::new(raw.origin, raw.spacing, raw.counts)?;
        GridMeasure::from_density(grid, raw.density)
    }
}

impl From<GridMeasure> for GridRaw {
    fn from(m: GridMeasure) -> Self {
        GridRaw {
            origin: m.grid.origin,
            spacing: m.grid.spacing,
            counts: m.grid.counts,
            density: m.density,
        }
    }
}

impl GridMeasure {
    /// Normalizes `density` so that `sum(density) * h^d = 1`.
    pub fn from_density(grid: GridSpec, density: Vec<f64>) -> Result<Self, MeasureError> {
        grid.validate()?;
        if density.len() != grid.len() {
            return Err(MeasureError::DimensionMismatch {
                expected: grid.len(),
                found: density.len(),
            });
        }
        if density.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(MeasureError::BadDensity);
        }
        let total: f64 = density.iter().sum::<f64>() * grid.cell_volume();
        if !(total > 0.0) {
            return Err(MeasureError::BadDensity);
        }
        let density = density.into_iter().map(|d| d / total).collect();
        let m = Self { grid, density };
        debug_assert!((m.total_mass() - 1.0).abs() < GRID_MASS_TOL);
        Ok(m)
    }

    /// Evaluates `f` at every cell center and normalizes.
    pub fn from_fn(grid: GridSpec, f: impl Fn(&Point) -> f64) -> Result<Self, MeasureError> {
        let density = (0..grid.len()).map(|i| f(&grid.center(i))).collect();
        Self::from_density(grid, density)
    }

    /// Uniform density on the whole grid.
    pub fn uniform(grid: GridSpec) -> Result<Self, MeasureError> {
        let n = grid.len();
        Self::from_density(grid, vec![1.0; n])
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn masses(&self) -> Vec<f64> {
        let v = self.grid.cell_volume();
        self.density.iter().map(|d| d * v).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.grid.cell_volume()
    }
}

impl WeightedPoints for GridMeasure {
    fn dim(&self) -> usize {
        self.grid.dim()
    }
    fn len(&self) -> usize {
        self.grid.len()
    }
    fn point(&self, i: usize) -> Point {
        self.grid.center(i)
    }
    fn mass(&self, i: usize) -> f64 {
        self.density[i] * self.grid.cell_volume()
    }
}

/// Normal law N(mean, covariance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianRaw", into = "GaussianRaw")]
pub struct GaussianSpec {
    dim: usize,
    mean: Point,
    cov: [[f64; MAX_DIM]; MAX_DIM],
    chol: [[f64; MAX_DIM]; MAX_DIM],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianRaw {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl TryFrom<GaussianRaw> for GaussianSpec {
    type Error = MeasureError;

    fn try_from(raw: GaussianRaw) -> Result<Self, Self::Error> {
        let dim = raw.mean.len();
        check_dim(dim)?;
        if raw.cov.len() != dim || raw.cov.iter().any(|row| row.len() != dim) {
            return Err(MeasureError::DimensionMismatch {
                expected: dim,
                found: raw.cov.len(),
            });
        }
        let mut cov = [[0.0; MAX_DIM]; MAX_DIM];
        for (i, row) in raw.cov.iter().enumerate() {
            cov[i][..dim].copy_from_slice(row);
        }
        GaussianSpec::new(dim, point_from_slice(dim, &raw.mean)?, cov)
    }
}

impl From<GaussianSpec> for GaussianRaw {
    fn from(g: GaussianSpec) -> Self {
        GaussianRaw {
            mean: g.mean[..g.dim].to_vec(),
            cov: (0..g.dim).map(|i| g.cov[i][..g.dim].to_vec()).collect(),
        }
    }
}

impl GaussianSpec {
    pub fn new(
        dim: usize,
        mean: Point,
        cov: [[f64; MAX_DIM]; MAX_DIM],
    ) -> Result<Self, MeasureError> {
        check_dim(dim)?;
        let chol = match dim {
            1 => {
                if !(cov[0][0] > 0.0) || !cov[0][0].is_finite() {
                    return Err(MeasureError::NotPositiveDefinite);
                }
                [[cov[0][0].sqrt(), 0.0], [0.0, 0.0]]
            }
            _ => {
                let (a, b, c, d) = (cov[0][0], cov[0][1], cov[1][0], cov[1][1]);
                if (b - c).abs() > SYMMETRY_TOL {
                    return Err(MeasureError::NotPositiveDefinite);
                }
                // Smallest eigenvalue of a symmetric 2x2 matrix.
                let half_tr = 0.5 * (a + d);
                let disc = (0.25 * (a - d) * (a - d) + b * b).sqrt();
                if !(half_tr - disc > 0.0) {
                    return Err(MeasureError::NotPositiveDefinite);
                }
                let l00 = a.sqrt();
                let l10 = b / l00;
                let l11 = (d - l10 * l10).sqrt();
                [[l00, 0.0], [l10, l11]]
            }
        };
        let mut cov = cov;
        if dim == 1 {
            cov[0][1] = 0.0;
            cov[1][0] = 0.0;
            cov[1][1] = 0.0;
        }
        Ok(Self {
            dim,
            mean,
            cov,
            chol,
        })
    }

    /// One-dimensional N(mean, sd^2).
    pub fn normal_1d(mean: f64, sd: f64) -> Result<Self, MeasureError> {
        Self::new(1, [mean, 0.0], [[sd * sd, 0.0], [0.0, 0.0]])
    }

    /// Isotropic N(mean, var * I).
    pub fn isotropic(dim: usize, mean: Point, var: f64) -> Result<Self, MeasureError> {
        Self::new(dim, mean, [[var, 0.0], [0.0, if dim == 2 { var } else { 0.0 }]])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> Point {
        self.mean
    }

    pub fn cov(&self) -> [[f64; MAX_DIM]; MAX_DIM] {
        self.cov
    }

    pub fn sd(&self, axis: usize) -> f64 {
        self.cov[axis][axis].sqrt()
    }

    pub fn density(&self, x: &Point) -> f64 {
        let dx = [x[0] - self.mean[0], x[1] - self.mean[1]];
        match self.dim {
            1 => {
                let v = self.cov[0][0];
                (-0.5 * dx[0] * dx[0] / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
            }
            _ => {
                let [[a, b], [_, d]] = self.cov;
                let det = a * d - b * b;
                let q = (d * dx[0] * dx[0] - 2.0 * b * dx[0] * dx[1] + a * dx[1] * dx[1]) / det;
                (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
            }
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        let z0: f64 = StandardNormal.sample(rng);
        if self.dim == 1 {
            return [self.mean[0] + self.chol[0][0] * z0, 0.0];
        }
        let z1: f64 = StandardNormal.sample(rng);
        [
            self.mean[0] + self.chol[0][0] * z0,
            self.mean[1] + self.chol[1][0] * z0 + self.chol[1][1] * z1,
        ]
    }
}

/// Discretizes a Gaussian on `grid` by evaluating its density at cell centers.
///
/// The grid must contain `mean ± 6 sd` on every axis.
pub fn discretize_gaussian(g: &GaussianSpec, grid: &GridSpec) -> Result<GridMeasure, MeasureError> {
    grid.validate()?;
    if grid.dim() != g.dim() {
        return Err(MeasureError::DimensionMismatch {
            expected: g.dim(),
            found: grid.dim(),
        });
    }
    for axis in 0..g.dim() {
        let half = GAUSSIAN_COVERAGE_SIGMAS * g.sd(axis);
        let (need_lo, need_hi) = (g.mean[axis] - half, g.mean[axis] + half);
        let (lo, hi) = (grid.lower(axis), grid.upper(axis));
        let slack = 1e-9 * (1.0 + half);
        if lo > need_lo + slack || hi < need_hi - slack {
            return Err(MeasureError::GridTooNarrow {
                axis,
                lo,
                hi,
                need_lo,
                need_hi,
            });
        }
    }
    GridMeasure::from_fn(grid.clone(), |x| g.density(x))
}

/// Any of the three measure representations; the JSON form used by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum MeasureSpec {
    Discrete(DiscreteMeasure),
    Grid(GridMeasure),
    Gaussian(GaussianSpec),
}

impl MeasureSpec {
    pub fn dim(&self) -> usize {
        match self {
            MeasureSpec::Discrete(m) => m.dim(),
            MeasureSpec::Grid(m) => m.dim(),
            MeasureSpec::Gaussian(g) => g.dim(),
        }
    }
}

/// Precomputed sampler for a [`MeasureSpec`].
///
/// Discrete atoms and grid cells are drawn with an alias table; inside a grid
/// cell the point is uniform.
#[derive(Debug, Clone)]
pub enum PointSampler {
    Atoms {
        dim: usize,
        points: Vec<Point>,
        alias: WeightedAliasIndex<f64>,
    },
    Cells {
        grid: GridSpec,
        alias: WeightedAliasIndex<f64>,
    },
    Gaussian(GaussianSpec),
}

impl PointSampler {
    pub fn new(m: &MeasureSpec) -> Self {
        match m {
            MeasureSpec::Discrete(d) => PointSampler::Atoms {
                dim: d.dim(),
                points: d.points().to_vec(),
                alias: WeightedAliasIndex::new(d.weights().to_vec())
                    .expect("validated weights are positive"),
            },
            MeasureSpec::Grid(g) => PointSampler::Cells {
                grid: g.grid().clone(),
                alias: WeightedAliasIndex::new(g.masses()).expect("validated density has mass"),
            },
            MeasureSpec::Gaussian(g) => PointSampler::Gaussian(g.clone()),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            PointSampler::Atoms { dim, .. } => *dim,
            PointSampler::Cells { grid, .. } => grid.dim(),
            PointSampler::Gaussian(g) => g.dim(),
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        match self {
            PointSampler::Atoms { points, alias, .. } => points[alias.sample(rng)],
            PointSampler::Cells { grid, alias } => {
                let c = grid.corner(alias.sample(rng));
                let mut p = [c[0] + grid.spacing * rng.random::<f64>(), 0.0];
                if grid.dim() == 2 {
                    p[1] = c[1] + grid.spacing * rng.random::<f64>();
                }
                p
            }
            PointSampler::Gaussian(g) => g.draw(rng),
        }
    }
}

/// `n` i.i.d. draws from `m`, reproducible from `seed`.
pub fn sample(m: &MeasureSpec, n: usize, seed: u64) -> PointCloud {
    let sampler = PointSampler::new(m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud {
        dim: sampler.dim(),
        points: (0..n).map(|_| sampler.draw(&mut rng)).collect(),
    }
}
