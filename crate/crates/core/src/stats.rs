//! Small statistical helpers shared by the Monte Carlo checks.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use thiserror::Error;

/// Asymptotic Kolmogorov–Smirnov critical value at level 1%, times `sqrt(n)`.
pub const KS_CRITICAL_1PCT: f64 = 1.6276;
/// Minimum number of points for an exponent fit.
pub const MIN_FIT_POINTS: usize = 5;
/// Goodness of fit below which an exponent fit gives no verdict.
pub const MIN_FIT_R2: f64 = 0.95;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("log-log fit needs positive data, got ({x}, {y})")]
    NonPositive { x: f64, y: f64 },
    #[error("design matrix is singular")]
    Singular,
}

/// Welford accumulator for mean and standard error.
#[derive(Debug, Clone, Copy, Default)]
pub struct Summary {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Summary {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(self, other: Summary) -> Summary {
        if self.n == 0 {
            return other;
        }
        if other.n == 0 {
            return self;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * other.n as f64 / n as f64;
        let m2 = self.m2 + other.m2 + delta * delta * (self.n as f64 * other.n as f64) / n as f64;
        Summary { n, mean, m2 }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

impl FromIterator<f64> for Summary {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Summary::default();
        for x in iter {
            s.push(x);
        }
        s
    }
}

/// Standard error of the unbiased sample variance, from the fourth moment.
pub fn variance_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    let var = m2 * n / (n - 1.0);
    (var, ((m4 - m2 * m2) / n).max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub critical: f64,
    pub pass: bool,
}

/// One-sample KS test of `xs` against `N(mean, sd^2)` at level 1%.
pub fn ks_normal(xs: &[f64], mean: f64, sd: f64) -> KsResult {
    let law = Normal::new(mean, sd).expect("positive sd");
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let statistic = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = law.cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    let critical = KS_CRITICAL_1PCT / n.sqrt();
    KsResult {
        statistic,
        critical,
        pass: statistic <= critical,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson goodness-of-fit test of `counts` against cell probabilities `probs`.
///
/// Cells with zero probability must have zero counts; they do not add degrees of freedom.
pub fn chi_square(counts: &[u64], probs: &[f64]) -> ChiSquareResult {
    let n: u64 = counts.iter().sum();
    let mut statistic = 0.0;
    let mut cells = 0usize;
    for (&c, &p) in counts.iter().zip(probs) {
        if p <= 0.0 {
            if c > 0 {
                statistic = f64::INFINITY;
            }
            continue;
        }
        cells += 1;
        let e = p * n as f64;
        statistic += (c as f64 - e).powi(2) / e;
    }
    let dof = cells.saturating_sub(1);
    let p_value = if dof == 0 {
        if statistic.is_finite() { 1.0 } else { 0.0 }
    } else {
        ChiSquared::new(dof as f64).expect("positive dof").sf(statistic)
    };
    ChiSquareResult {
        statistic,
        dof,
        p_value,
    }
}

/// Least-squares fit of `log y = intercept + exponent * log x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub exponent: f64,
    /// Intercept on the log scale.
    pub intercept: f64,
    pub r2: f64,
    pub window: (f64, f64),
    /// Standard error of the exponent.
    pub exponent_stderr: f64,
}

impl SlopeFit {
    /// Multiplicative coefficient `exp(intercept)`.
    pub fn coefficient(&self) -> f64 {
        self.intercept.exp()
    }

    pub fn reliable(&self) -> bool {
        self.r2 >= MIN_FIT_R2
    }
}

pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Result<SlopeFit, StatsError> {
    if xs.len() < MIN_FIT_POINTS {
        return Err(StatsError::TooFewPoints {
            need: MIN_FIT_POINTS,
            got: xs.len(),
        });
    }
    for (&x, &y) in xs.iter().zip(ys) {
        if !(x > 0.0 && y > 0.0) {
            return Err(StatsError::NonPositive { x, y });
        }
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(StatsError::Singular);
    }
    let exponent = sxy / sxx;
    let intercept = my - exponent * mx;
    let sse: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - intercept - exponent * x).powi(2))
        .sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    let exponent_stderr = if n > 2.0 {
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(SlopeFit {
        exponent,
        intercept,
        r2,
        window: (lo, hi),
        exponent_stderr,
    })
}

/// Weighted least squares with known per-point standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct WlsFit {
    pub coef: Vec<f64>,
    /// Standard errors from the inverse weighted normal matrix.
    pub stderr: Vec<f64>,
}

/// Fits `y_i ≈ sum_k coef_k design[i][k]` with weights `1 / se_i^2`.
pub fn weighted_least_squares(design: &[Vec<f64>], y: &[f64], se: &[f64]) -> Result<WlsFit, StatsError> {
    let p = design.first().map_or(0, Vec::len);
    if design.len() < p || p == 0 {
        return Err(StatsError::TooFewPoints {
            need: p.max(1),
            got: design.len(),
        });
    }
    let mut normal = vec![vec![0.0; p]; p];
    let mut rhs = vec![0.0; p];
    for ((row, &yi), &si) in design.iter().zip(y).zip(se) {
        let w = 1.0 / (si * si);
        for a in 0..p {
            rhs[a] += w * row[a] * yi;
            for b in 0..p {
                normal[a][b] += w * row[a] * row[b];
            }
        }
    }
    let inv = invert(normal)?;
    let coef = (0..p)
        .map(|a| (0..p).map(|b| inv[a][b] * rhs[b]).sum())
        .collect();
    let stderr = (0..p).map(|a| inv[a][a].max(0.0).sqrt()).collect();
    Ok(WlsFit { coef, stderr })
}

/// Gauss–Jordan inverse with partial pivoting.
fn invert(mut a: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>, StatsError> {
    let n = a.len();
    let mut inv: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("nonempty");
        if a[pivot][col].abs() < 1e-300 {
            return Err(StatsError::Singular);
        }
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let d = a[col][col];
        for k in 0..n {
            a[col][k] /= d;
            inv[col][k] /= d;
        }
        for row in 0..n {
            if row != col {
                let f = a[row][col];
                if f != 0.0 {
                    for k in 0..n {
                        a[row][k] -= f * a[col][k];
                        inv[row][k] -= f * inv[col][k];
                    }
                }
            }
        }
    }
    Ok(inv)
}
