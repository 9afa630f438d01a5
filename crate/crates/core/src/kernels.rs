//! Closed-form Gaussian transition densities.
//!
//! Two time-homogeneous diffusions are covered:
//!
//! * heat: `dX = sigma dB`, transition `N(x, sigma^2 (t-s) I)`;
//! * Ornstein–Uhlenbeck: `dX = -theta X dt + sigma dB`, transition
//!   `N(e^{-theta tau} x, sigma^2 (1 - e^{-2 theta tau}) / (2 theta) I)` with
//!   invariant law `N(0, sigma^2 / (2 theta) I)`.
//!
//! [`aronson_fit`] certifies a constant for the two-sided Gaussian bounds
//! `C^{-1} tau^{-d/2} exp(-C|x-y|^2/tau) <= p(s,x;t,y) <= C tau^{-d/2} exp(-|x-y|^2/(C tau))`
//! on a sampled probe set.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measures::{discretize_gaussian, GaussianSpec, GridMeasure, GridSpec, MeasureError, Point};

/// Multiplicative step of the constant search ladder.
pub const ARONSON_LADDER_STEP: f64 = 1.05;
/// Largest constant tried before giving up.
pub const ARONSON_MAX_CONSTANT: f64 = 1e6;
/// Probe box half-width in units of the kernel scale at the horizon.
pub const ARONSON_BOX_SCALES: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("time order violated: need s < t, got s = {s}, t = {t}")]
    TimeOrder { s: f64, t: f64 },
    #[error("invalid kernel parameters: {0}")]
    InvalidParameters(String),
    #[error("heat kernel has no invariant probability density")]
    NoInvariant,
    #[error("no Aronson constant up to {max} fits the probes (worst log-violation {residual})")]
    FitFailed { max: f64, residual: f64 },
    #[error("at least {min} probes are required, got {got}")]
    TooFewProbes { min: usize, got: usize },
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// A transition density with a closed Gaussian form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelRaw", into = "KernelRaw")]
pub enum TransitionKernel {
    Heat { sigma: f64, d: usize },
    OrnsteinUhlenbeck { theta: f64, sigma: f64, d: usize },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelRaw {
    variant: KernelVariant,
    sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    theta: Option<f64>,
    d: usize,
}

#[derive(Serialize, Deserialize, Clone, Copy)]
#[serde(rename_all = "lowercase")]
enum KernelVariant {
    Heat,
    Ou,
}

impl TryFrom<KernelRaw> for TransitionKernel {
    type Error = KernelError;

    fn try_from(raw: KernelRaw) -> Result<Self, Self::Error> {
        match (raw.variant, raw.theta) {
            (KernelVariant::Heat, None) => TransitionKernel::heat(raw.sigma, raw.d),
            (KernelVariant::Heat, Some(_)) => Err(KernelError::InvalidParameters(
                "heat kernel takes no theta".into(),
            )),
            (KernelVariant::Ou, Some(theta)) => TransitionKernel::ou(theta, raw.sigma, raw.d),
            (KernelVariant::Ou, None) => {
                Err(KernelError::InvalidParameters("ou kernel needs theta".into()))
            }
        }
    }
}

impl From<TransitionKernel> for KernelRaw {
    fn from(k: TransitionKernel) -> Self {
        match k {
            TransitionKernel::Heat { sigma, d } => KernelRaw {
                variant: KernelVariant::Heat,
                sigma,
                theta: None,
                d,
            },
            TransitionKernel::OrnsteinUhlenbeck { theta, sigma, d } => KernelRaw {
                variant: KernelVariant::Ou,
                sigma,
                theta: Some(theta),
                d,
            },
        }
    }
}

fn check_common(sigma: f64, d: usize) -> Result<(), KernelError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(KernelError::InvalidParameters(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if d == 0 || d > 2 {
        return Err(KernelError::InvalidParameters(format!(
            "dimension must be 1 or 2, got {d}"
        )));
    }
    Ok(())
}

impl TransitionKernel {
    pub fn heat(sigma: f64, d: usize) -> Result<Self, KernelError> {
        check_common(sigma, d)?;
        Ok(TransitionKernel::Heat { sigma, d })
    }

    pub fn ou(theta: f64, sigma: f64, d: usize) -> Result<Self, KernelError> {
        check_common(sigma, d)?;
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(KernelError::InvalidParameters(format!(
                "theta must be positive, got {theta}"
            )));
        }
        Ok(TransitionKernel::OrnsteinUhlenbeck { theta, sigma, d })
    }

    pub fn dim(&self) -> usize {
        match *self {
            TransitionKernel::Heat { d, .. } | TransitionKernel::OrnsteinUhlenbeck { d, .. } => d,
        }
    }

    pub fn sigma(&self) -> f64 {
        match *self {
            TransitionKernel::Heat { sigma, .. }
            | TransitionKernel::OrnsteinUhlenbeck { sigma, .. } => sigma,
        }
    }

    /// Largest eigenvalue of `a = sigma sigma^*`.
    pub fn lambda_sup(&self) -> f64 {
        self.sigma() * self.sigma()
    }

    /// Frobenius norm of the diffusion matrix `sigma I_d`.
    pub fn sigma_norm(&self) -> f64 {
        self.sigma() * (self.dim() as f64).sqrt()
    }

    /// Per-axis variance of the transition law over a lag `tau`.
    pub fn variance(&self, tau: f64) -> f64 {
        match *self {
            TransitionKernel::Heat { sigma, .. } => sigma * sigma * tau,
            TransitionKernel::OrnsteinUhlenbeck { theta, sigma, .. } => {
                sigma * sigma * (-(-2.0 * theta * tau).exp_m1()) / (2.0 * theta)
            }
        }
    }

    /// Mean of the transition law from `x` over a lag `tau`.
    pub fn mean(&self, x: &Point, tau: f64) -> Point {
        match *self {
            TransitionKernel::Heat { .. } => *x,
            TransitionKernel::OrnsteinUhlenbeck { theta, .. } => {
                let f = (-theta * tau).exp();
                [f * x[0], f * x[1]]
            }
        }
    }

    /// Per-axis standard deviation at lag `horizon`; sets the probe box size.
    pub fn scale(&self, horizon: f64) -> f64 {
        self.variance(horizon).sqrt()
    }

    /// `log p(s, x; t, y)`.
    pub fn log_eval(&self, s: f64, x: &Point, t: f64, y: &Point) -> Result<f64, KernelError> {
        if !(s < t) {
            return Err(KernelError::TimeOrder { s, t });
        }
        Ok(self.log_density(t - s, x, y))
    }

    /// `p(s, x; t, y)`.
    pub fn eval(&self, s: f64, x: &Point, t: f64, y: &Point) -> Result<f64, KernelError> {
        self.log_eval(s, x, t, y).map(f64::exp)
    }

    /// Log transition density for a positive lag; no time-order check.
    pub fn log_density(&self, tau: f64, x: &Point, y: &Point) -> f64 {
        let v = self.variance(tau);
        let m = self.mean(x, tau);
        let d = self.dim();
        let mut sq = 0.0;
        for k in 0..d {
            let diff = y[k] - m[k];
            sq += diff * diff;
        }
        -0.5 * sq / v - 0.5 * d as f64 * (2.0 * PI * v).ln()
    }

    /// Invariant law, `N(0, sigma^2/(2 theta) I)`, for the OU variant.
    pub fn invariant_law(&self) -> Result<GaussianSpec, KernelError> {
        match *self {
            TransitionKernel::Heat { .. } => Err(KernelError::NoInvariant),
            TransitionKernel::OrnsteinUhlenbeck { theta, sigma, d } => {
                Ok(GaussianSpec::isotropic(d, [0.0; 2], sigma * sigma / (2.0 * theta))?)
            }
        }
    }

    /// Invariant density discretized on a grid covering 8 standard deviations.
    pub fn invariant_density(&self) -> Result<GridMeasure, KernelError> {
        let law = self.invariant_law()?;
        let half = 8.0 * law.sd(0);
        let grid = match self.dim() {
            1 => GridSpec::interval(-half, half, 801)?,
            _ => GridSpec::square(-half, half, 161)?,
        };
        Ok(discretize_gaussian(&law, &grid)?)
    }

    /// Invariant density discretized on a caller-supplied grid.
    pub fn invariant_density_on(&self, grid: &GridSpec) -> Result<GridMeasure, KernelError> {
        let law = self.invariant_law()?;
        Ok(GridMeasure::from_fn(grid.clone(), |y| law.density(y))?)
    }
}

/// A probe-set certificate for the two-sided Gaussian bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AronsonFit {
    pub c_tilde: f64,
    pub horizon: f64,
    /// Worst log-scale violation over the probes; `<= 0` certifies the fit.
    pub residual: f64,
    pub probes: usize,
    pub box_half_width: f64,
}

/// One `(s, x, t, y)` tuple.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub s: f64,
    pub x: Point,
    pub t: f64,
    pub y: Point,
}

/// Log of the lower and upper Gaussian envelopes at constant `c`.
pub fn aronson_log_bounds(c: f64, d: usize, tau: f64, sq_dist: f64) -> (f64, f64) {
    let base = -0.5 * d as f64 * tau.ln();
    let lower = -c.ln() + base - c * sq_dist / tau;
    let upper = c.ln() + base - sq_dist / (c * tau);
    (lower, upper)
}

fn sq_dist(a: &Point, b: &Point) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    d0 * d0 + d1 * d1
}

/// Largest log-violation of both envelopes at constant `c` over `probes`.
pub fn aronson_residual(k: &TransitionKernel, c: f64, probes: &[Probe]) -> f64 {
    let d = k.dim();
    probes
        .par_iter()
        .map(|p| {
            let tau = p.t - p.s;
            let lp = k.log_density(tau, &p.x, &p.y);
            let (lo, up) = aronson_log_bounds(c, d, tau, sq_dist(&p.x, &p.y));
            (lo - lp).max(lp - up)
        })
        .reduce(|| f64::NEG_INFINITY, f64::max)
}

/// Draws probe tuples with `0 <= s < t <= horizon` and `x, y` in `[-half, half]^d`.
pub fn draw_probes(d: usize, horizon: f64, half: f64, n: usize, seed: u64) -> Vec<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let a = horizon * rng.random::<f64>();
        let b = horizon * rng.random::<f64>();
        if a == b {
            continue;
        }
        let (s, t) = if a < b { (a, b) } else { (b, a) };
        let mut x = [0.0; 2];
        let mut y = [0.0; 2];
        for k in 0..d {
            x[k] = half * (2.0 * rng.random::<f64>() - 1.0);
            y[k] = half * (2.0 * rng.random::<f64>() - 1.0);
        }
        out.push(Probe { s, x, t, y });
    }
    out
}

fn ladder(k: u32) -> f64 {
    ARONSON_LADDER_STEP.powi(k as i32)
}

/// Smallest ladder index whose constant satisfies both envelopes at one probe.
fn probe_index(k: &TransitionKernel, p: &Probe, max_index: u32) -> Option<u32> {
    let tau = p.t - p.s;
    let lp = k.log_density(tau, &p.x, &p.y);
    let sq = sq_dist(&p.x, &p.y);
    let ok = |i: u32| {
        let (lo, up) = aronson_log_bounds(ladder(i), k.dim(), tau, sq);
        lo <= lp && lp <= up
    };
    if !ok(max_index) {
        return None;
    }
    // Both envelopes loosen monotonically in the constant.
    let (mut lo, mut hi) = (0u32, max_index);
    if ok(0) {
        return Some(0);
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Fits the Aronson constant on `probes` random tuples over `[0, horizon]`.
///
/// Returns the smallest constant on the ladder `1, 1.05, 1.05^2, ...` for
/// which every probe satisfies both envelopes.
pub fn aronson_fit(
    k: &TransitionKernel,
    horizon: f64,
    probes: usize,
    seed: u64,
) -> Result<AronsonFit, KernelError> {
    const MIN_PROBES: usize = 1000;
    if probes < MIN_PROBES {
        return Err(KernelError::TooFewProbes {
            min: MIN_PROBES,
            got: probes,
        });
    }
    let half = ARONSON_BOX_SCALES * k.scale(horizon);
    let set = draw_probes(k.dim(), horizon, half, probes, seed);
    let max_index = (ARONSON_MAX_CONSTANT.ln() / ARONSON_LADDER_STEP.ln()).floor() as u32;
    let needed = set
        .par_iter()
        .map(|p| probe_index(k, p, max_index))
        .try_reduce(|| 0u32, |a, b| Some(a.max(b)));
    match needed {
        Some(idx) => {
            let c = ladder(idx);
            Ok(AronsonFit {
                c_tilde: c,
                horizon,
                residual: aronson_residual(k, c, &set),
                probes,
                box_half_width: half,
            })
        }
        None => Err(KernelError::FitFailed {
            max: ARONSON_MAX_CONSTANT,
            residual: aronson_residual(k, ladder(max_index), &set),
        }),
    }
}

/// Worst log-violation of the invariant-density sandwich
/// `C T^{-d/2} >= m(y) >= 2^{-d} C^{-2(d+2)} exp(-2C|y|^2/T) m(0)` over `ys`.
pub fn invariant_sandwich_residual(
    k: &TransitionKernel,
    fit: &AronsonFit,
    ys: &[Point],
) -> Result<f64, KernelError> {
    let law = k.invariant_law()?;
    let d = k.dim() as f64;
    let c = fit.c_tilde;
    let horizon = fit.horizon;
    let log_m0 = law.density(&[0.0; 2]).ln();
    let upper = c.ln() - 0.5 * d * horizon.ln();
    Ok(ys
        .iter()
        .map(|y| {
            let lm = law.density(y).ln();
            let lower = -d * 2f64.ln() - 2.0 * (d + 2.0) * c.ln()
                - 2.0 * c * sq_dist(y, &[0.0; 2]) / horizon
                + log_m0;
            (lm - upper).max(lower - lm)
        })
        .fold(f64::NEG_INFINITY, f64::max))
}

/// `sup_y |p(0, x; t, y) - m(y)|` over the given points.
pub fn sup_distance_to_invariant(
    k: &TransitionKernel,
    x: &Point,
    t: f64,
    ys: &[Point],
) -> Result<f64, KernelError> {
    let law = k.invariant_law()?;
    let mut worst: f64 = 0.0;
    for y in ys {
        worst = worst.max((k.eval(0.0, x, t, y)? - law.density(y)).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::WeightedPoints;

    #[test]
    fn heat_density_at_origin() {
        let k = TransitionKernel::heat(1.0, 1).unwrap();
        let v = k.eval(0.0, &[0.0; 2], 1.0, &[0.0; 2]).unwrap();
        assert!((v - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn time_order_is_enforced() {
        let k = TransitionKernel::heat(1.0, 1).unwrap();
        assert_eq!(
            k.eval(1.0, &[0.0; 2], 1.0, &[0.0; 2]),
            Err(KernelError::TimeOrder { s: 1.0, t: 1.0 })
        );
        assert!(k.eval(2.0, &[0.0; 2], 1.0, &[0.0; 2]).is_err());
    }

    #[test]
    fn ou_forgets_its_start() {
        let k = TransitionKernel::ou(1.0, 2f64.sqrt(), 1).unwrap();
        for y in [-2.0, 0.0, 0.7] {
            let p = k.eval(0.0, &[3.0, 0.0], 60.0, &[y, 0.0]).unwrap();
            let m = (-0.5 * y * y).exp() / (2.0 * PI).sqrt();
            assert!((p - m).abs() < 1e-12);
        }
    }

    #[test]
    fn densities_integrate_to_one() {
        let grid = GridSpec::interval(-30.0, 30.0, 6000).unwrap();
        for k in [
            TransitionKernel::heat(1.3, 1).unwrap(),
            TransitionKernel::ou(0.7, 1.1, 1).unwrap(),
        ] {
            let mass: f64 = grid
                .centers()
                .iter()
                .map(|y| k.eval(0.2, &[0.5, 0.0], 1.7, y).unwrap())
                .sum::<f64>()
                * grid.spacing;
            assert!((mass - 1.0).abs() < 1e-8, "{k:?}: {mass}");
        }
    }

    #[test]
    fn invariant_laws() {
        let k = TransitionKernel::ou(1.0, 2f64.sqrt(), 1).unwrap();
        let m = k.invariant_density().unwrap();
        assert!((m.moment_r(2.0) - 1.0).abs() < 1e-6);
        let k2 = TransitionKernel::ou(2.0, 2f64.sqrt(), 1).unwrap();
        assert!((k2.invariant_law().unwrap().sd(0) - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(
            TransitionKernel::heat(1.0, 1).unwrap().invariant_density(),
            Err(KernelError::NoInvariant)
        );
    }

    #[test]
    fn invariant_density_is_stationary() {
        // m(x) = ∫ m(y) p(1, y, x) dy by midpoint quadrature.
        let k = TransitionKernel::ou(1.0, 2f64.sqrt(), 1).unwrap();
        let m = k.invariant_density().unwrap();
        let cells = m.grid().centers();
        let vol = m.grid().cell_volume();
        for (i, x) in cells.iter().enumerate().step_by(37) {
            let pushed: f64 = cells
                .iter()
                .zip(m.density())
                .map(|(y, my)| my * k.eval(0.0, y, 1.0, x).unwrap())
                .sum::<f64>()
                * vol;
            assert!((pushed - m.density()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn heat_aronson_constant_matches_gaussian_prefactor() {
        // At x = y the lower envelope needs 1/C <= 1/sqrt(2 pi).
        let k = TransitionKernel::heat(1.0, 1).unwrap();
        let fit = aronson_fit(&k, 1.0, 4000, 5).unwrap();
        let root = (2.0 * PI).sqrt();
        assert!(fit.c_tilde >= root && fit.c_tilde <= root * ARONSON_LADDER_STEP);
        assert!(fit.residual <= 0.0);
        assert!(fit.c_tilde >= 1.0);
    }

    #[test]
    fn fitted_constant_is_the_smallest_rung() {
        let k = TransitionKernel::ou(1.0, 2f64.sqrt(), 1).unwrap();
        let fit = aronson_fit(&k, 1.0, 2000, 1).unwrap();
        let probes = draw_probes(1, 1.0, fit.box_half_width, 2000, 1);
        assert!(aronson_residual(&k, fit.c_tilde, &probes) <= 0.0);
        assert!(aronson_residual(&k, fit.c_tilde / ARONSON_LADDER_STEP, &probes) > 0.0);
    }

    #[test]
    fn too_few_probes() {
        let k = TransitionKernel::heat(1.0, 1).unwrap();
        assert!(matches!(
            aronson_fit(&k, 1.0, 10, 0),
            Err(KernelError::TooFewProbes { .. })
        ));
    }

    #[test]
    fn chapman_kolmogorov_by_quadrature() {
        let grid = GridSpec::interval(-25.0, 25.0, 5000).unwrap();
        let zs = grid.centers();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for k in [
            TransitionKernel::heat(0.8, 1).unwrap(),
            TransitionKernel::ou(1.5, 1.2, 1).unwrap(),
        ] {
            for _ in 0..5 {
                let s = rng.random::<f64>();
                let u = s + 0.1 + rng.random::<f64>();
                let t = u + 0.1 + rng.random::<f64>();
                let x = [4.0 * rng.random::<f64>() - 2.0, 0.0];
                let y = [4.0 * rng.random::<f64>() - 2.0, 0.0];
                let composed: f64 = zs
                    .iter()
                    .map(|z| k.eval(s, &x, u, z).unwrap() * k.eval(u, z, t, &y).unwrap())
                    .sum::<f64>()
                    * grid.spacing;
                let direct = k.eval(s, &x, t, &y).unwrap();
                assert!((composed - direct).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ou_sup_distance_decreases() {
        let k = TransitionKernel::ou(1.0, 2f64.sqrt(), 1).unwrap();
        let ys = GridSpec::interval(-8.0, 8.0, 400).unwrap().centers();
        let x = [2.0, 0.0];
        let dists: Vec<f64> = [1.0, 2.0, 5.0, 10.0]
            .iter()
            .map(|&t| sup_distance_to_invariant(&k, &x, t, &ys).unwrap())
            .collect();
        assert!(dists.windows(2).all(|w| w[1] < w[0]), "{dists:?}");
    }

    #[test]
    fn kernel_json() {
        let k: TransitionKernel =
            serde_json::from_str(r#"{"variant":"ou","sigma":1.4,"theta":1.0,"d":1}"#).unwrap();
        assert_eq!(k, TransitionKernel::ou(1.0, 1.4, 1).unwrap());
        let h: TransitionKernel =
            serde_json::from_str(r#"{"variant":"heat","sigma":1.0,"d":2}"#).unwrap();
        assert_eq!(h.dim(), 2);
        assert!(serde_json::from_str::<TransitionKernel>(r#"{"variant":"heat","sigma":-1.0,"d":1}"#).is_err());
        assert!(serde_json::from_str::<TransitionKernel>(r#"{"variant":"ou","sigma":1.0,"d":1}"#).is_err());
    }
}
