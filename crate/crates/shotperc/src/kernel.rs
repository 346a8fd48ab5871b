//! Isotropic kernels with derivatives to second order, smooth finite-range
//! truncation, and the derived integral functionals: total mass, energy, and
//! the covariance that a kernel induces on its moving-average fields.
//!
//! Every kernel is radial, so evaluation routes through a profile in the
//! squared-radius variable s = |x|^2; partial derivatives follow from the
//! chain rule and never touch coordinates beyond the two that appear in the
//! requested multi-index.

use crate::error::{Error, Result};
use crate::fftconv::{self, FftEngine};
use crate::quad;
use statrs::function::gamma::gamma;
use std::f64::consts::PI;

/// Highest supported derivative order (total multi-index weight).
pub const DERIVATIVE_ORDER_MAX: u32 = 2;

/// Surface area of the unit sphere in R^d: 2 pi^{d/2} / Gamma(d/2).
pub fn surface_area(d: usize) -> f64 {
    2.0 * PI.powf(d as f64 / 2.0) / gamma(d as f64 / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    /// g(x) = (1 + |x|^2)^{-beta/2}, integrable for beta > d.
    Rational { beta: f64 },
    /// g(x) = exp(-(1 + |x|^2)^{gamma/2}) with gamma in (0,1).
    StretchedExp { gamma: f64 },
}

/// A parsed multi-index of weight <= 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivForm {
    Value,
    First(usize),
    /// Second derivative along one axis.
    Second(usize),
    /// Mixed second derivative along two distinct axes.
    Cross(usize, usize),
}

/// Validates a multi-index against the dimension and order cap.
pub fn parse_multi_index(alpha: &[u32], dimension: usize) -> Result<DerivForm> {
    if alpha.len() != dimension {
        return Err(Error::invalid(format!(
            "multi-index has {} entries for dimension {}",
            alpha.len(),
            dimension
        )));
    }
    let order: u32 = alpha.iter().sum();
    if order > DERIVATIVE_ORDER_MAX {
        return Err(Error::invalid(format!(
            "derivative order {order} exceeds the supported maximum {DERIVATIVE_ORDER_MAX}"
        )));
    }
    let nz: Vec<(usize, u32)> =
        alpha.iter().enumerate().filter(|(_, &a)| a > 0).map(|(i, &a)| (i, a)).collect();
    Ok(match nz.as_slice() {
        [] => DerivForm::Value,
        [(i, 1)] => DerivForm::First(*i),
        [(i, 2)] => DerivForm::Second(*i),
        [(i, 1), (j, 1)] => DerivForm::Cross(*i, *j),
        _ => unreachable!("weight <= 2 leaves no other pattern"),
    })
}

/// All multi-indices of weight <= 2 in the given dimension.
pub fn multi_indices_up_to_second(dimension: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0; dimension]];
    for i in 0..dimension {
        let mut a = vec![0; dimension];
        a[i] = 1;
        out.push(a);
    }
    for i in 0..dimension {
        let mut a = vec![0; dimension];
        a[i] = 2;
        out.push(a);
        for j in i + 1..dimension {
            let mut a = vec![0; dimension];
            a[i] = 1;
            a[j] = 1;
            out.push(a);
        }
    }
    out
}

fn eval_from_profile(form: DerivForm, prof: (f64, f64, f64), x: &[f64]) -> f64 {
    let (v, p1, p2) = prof;
    match form {
        DerivForm::Value => v,
        DerivForm::First(i) => 2.0 * x[i] * p1,
        DerivForm::Second(i) => 2.0 * p1 + 4.0 * x[i] * x[i] * p2,
        DerivForm::Cross(i, j) => 4.0 * x[i] * x[j] * p2,
    }
}

/// Common evaluation surface for base and truncated kernels.
pub trait EvalKernel: Send + Sync {
    fn dimension(&self) -> usize;

    /// Radial profile in s = |x|^2: value and first two s-derivatives.
    fn profile(&self, s: f64) -> (f64, f64, f64);

    /// Radius beyond which the kernel vanishes identically, if any.
    fn support_radius(&self) -> Option<f64>;

    /// Exponent b such that |d^a g(x)| (1+|x|)^b stays below `decay_constant`.
    fn decay_exponent(&self) -> f64;
    fn decay_constant(&self) -> f64;

    /// (integral of g, integral of g^2) over R^d.
    fn integrals(&self) -> Result<(f64, f64)>;

    /// Upper bound on the mass of g outside the ball of the given radius.
    fn radial_tail_mass(&self, radius: f64) -> f64;

    /// d^alpha g(x) with multi-index validation.
    fn eval(&self, alpha: &[u32], x: &[f64]) -> Result<f64> {
        let form = parse_multi_index(alpha, self.dimension())?;
        Ok(self.eval_form(form, x))
    }

    /// d^alpha g(x) with a pre-parsed multi-index (hot path, no validation).
    fn eval_form(&self, form: DerivForm, x: &[f64]) -> f64 {
        let s: f64 = x.iter().map(|&c| c * c).sum();
        eval_from_profile(form, self.profile(s), x)
    }

    fn value(&self, x: &[f64]) -> f64 {
        let s: f64 = x.iter().map(|&c| c * c).sum();
        self.profile(s).0
    }

    fn radial(&self, rho: f64) -> f64 {
        self.profile(rho * rho).0
    }

    /// Analytic bound on the tail mass of |d^alpha g| outside the given
    /// radius, uniform over |alpha| <= 2. Zero beyond a finite support.
    fn deriv_tail_bound(&self, radius: f64) -> f64 {
        if let Some(sup) = self.support_radius() {
            if radius >= sup {
                return 0.0;
            }
        }
        let d = self.dimension() as f64;
        let b = self.decay_exponent();
        // |d^a g| <= C (1+rho)^{-b}; integrate rho^{d-1} <= (1+rho)^{d-1}
        self.decay_constant() * surface_area(self.dimension()) * (1.0 + radius).powf(d - b)
            / (b - d)
    }
}

/// Scan the profile over radii and record the maximum of every derivative
/// form weighted by (1+rho)^b. The forms cover the directional maxima of the
/// radial chain rule, so the result bounds |d^alpha g| for every |alpha| <= 2.
fn scan_decay_constant<F: Fn(f64) -> (f64, f64, f64)>(
    profile: F,
    exponent: f64,
    rho_max_linear: f64,
) -> f64 {
    let mut best: f64 = 0.0;
    let mut probe = |rho: f64| {
        let (v, p1, p2) = profile(rho * rho);
        let w = (1.0 + rho).powf(exponent);
        let forms = [
            v.abs(),
            2.0 * rho * p1.abs(),
            (2.0 * p1 + 4.0 * rho * rho * p2).abs(),
            2.0 * p1.abs(),
            2.0 * rho * rho * p2.abs(),
        ];
        for f in forms {
            best = best.max(f * w);
        }
    };
    let n_lin = 6000;
    for i in 0..=n_lin {
        probe(rho_max_linear * i as f64 / n_lin as f64);
    }
    // log sweep out to large radii captures asymptotic suprema
    let n_log = 3000;
    for i in 0..=n_log {
        probe(rho_max_linear * (10f64.powf(3.0 * i as f64 / n_log as f64)));
    }
    best * 1.02
}

#[derive(Debug, Clone)]
pub struct Kernel {
    family: Family,
    dimension: usize,
    decay_exponent: f64,
    decay_constant: f64,
    /// Precomputed coefficient of the radial tail-mass bound.
    tail_coeff: f64,
}

impl Kernel {
    pub fn new(family: Family, dimension: usize) -> Result<Kernel> {
        if dimension == 0 {
            return Err(Error::invalid("kernel dimension must be at least 1"));
        }
        let d = dimension as f64;
        let decay_exponent = match family {
            Family::Rational { beta } => {
                if !beta.is_finite() || beta <= d {
                    return Err(Error::invalid(format!(
                        "rational kernel needs beta > d, got beta = {beta}, d = {dimension}"
                    )));
                }
                beta
            }
            Family::StretchedExp { gamma } => {
                if !(gamma > 0.0 && gamma < 1.0) {
                    return Err(Error::invalid(format!(
                        "stretched-exponential kernel needs gamma in (0,1), got {gamma}"
                    )));
                }
                // superpolynomial decay: any polynomial exponent works, fix d+2
                d + 2.0
            }
        };
        let mut k = Kernel {
            family,
            dimension,
            decay_exponent,
            decay_constant: 0.0,
            tail_coeff: 0.0,
        };
        k.decay_constant = scan_decay_constant(|s| k.raw_profile(s), decay_exponent, 10.0);
        k.tail_coeff = match family {
            // integral of rho^{d-1} g <= integral of rho^{d-1-beta}
            Family::Rational { beta } => surface_area(dimension) / (beta - d),
            // g <= sqrt(g(R)) sqrt(g) beyond R; premultiply mass of sqrt(g)
            Family::StretchedExp { gamma } => {
                let r_far = (160f64).powf(1.0 / gamma);
                let m_half = quad::integrate(
                    |rho| rho.powi(dimension as i32 - 1) * k.raw_profile(rho * rho).0.sqrt(),
                    0.0,
                    r_far,
                    1e-10,
                    1e-14,
                )
                .value;
                surface_area(dimension) * m_half
            }
        };
        Ok(k)
    }

    pub fn rational(beta: f64, dimension: usize) -> Result<Kernel> {
        Kernel::new(Family::Rational { beta }, dimension)
    }

    pub fn stretched_exp(gamma: f64, dimension: usize) -> Result<Kernel> {
        Kernel::new(Family::StretchedExp { gamma }, dimension)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    fn raw_profile(&self, s: f64) -> (f64, f64, f64) {
        match self.family {
            Family::Rational { beta } => {
                let t = 1.0 + s;
                let v = if beta == 3.0 {
                    // hot path for the default kernel: avoid powf
                    1.0 / (t * t.sqrt())
                } else {
                    t.powf(-beta / 2.0)
                };
                let p1 = -(beta / 2.0) * v / t;
                let p2 = (beta / 2.0) * (beta / 2.0 + 1.0) * v / (t * t);
                (v, p1, p2)
            }
            Family::StretchedExp { gamma } => {
                let t = 1.0 + s;
                let u = t.powf(gamma / 2.0);
                let v = (-u).exp();
                let u1 = (gamma / 2.0) * u / t;
                let u2 = (gamma / 2.0) * (gamma / 2.0 - 1.0) * u / (t * t);
                (v, -u1 * v, (u1 * u1 - u2) * v)
            }
        }
    }

    pub fn truncated(&self, range: f64) -> Result<TruncatedKernel> {
        TruncatedKernel::new(self.clone(), range)
    }

    /// Energy of the first partial derivative: the integral of (d_1 g)^2.
    /// By isotropy this equals (4 w_{d-1} / d) int rho^{d+1} profile'(rho^2)^2.
    pub fn gradient_energy(&self) -> f64 {
        let d = self.dimension;
        let mut r_far: f64 = 16.0;
        while r_far < 1e6 {
            let (_, p1, _) = self.raw_profile(r_far * r_far);
            if (r_far.powi(d as i32 + 1) * p1 * p1 * r_far).abs() < 1e-15 {
                break;
            }
            r_far *= 2.0;
        }
        let integral = quad::integrate(
            |rho| {
                let (_, p1, _) = self.raw_profile(rho * rho);
                rho.powi(d as i32 + 1) * p1 * p1
            },
            0.0,
            r_far,
            1e-11,
            1e-15,
        )
        .value;
        4.0 * surface_area(d) / d as f64 * integral
    }

    /// Correlation length proxy sqrt(K(0) / |K''(0)|) of the induced field.
    pub fn correlation_length(&self) -> Result<f64> {
        let (_, energy) = self.integrals()?;
        Ok((energy / self.gradient_energy()).sqrt())
    }
}

/// Integral of rho^{d-1} (1+rho^2)^{-p} over (0, inf), p > d/2.
///
/// The head [0,1] is smooth; the tail maps to [0,1] by rho -> 1/u followed by
/// u -> t^q, with q chosen to keep the transformed integrand C^1 at zero even
/// when 2p - d is small.
fn radial_power_integral(p: f64, d: usize) -> f64 {
    let head = quad::integrate(
        |rho| rho.powi(d as i32 - 1) * (1.0 + rho * rho).powf(-p),
        0.0,
        1.0,
        1e-12,
        1e-16,
    )
    .value;
    let a = 2.0 * p - d as f64;
    debug_assert!(a > 0.0);
    let q = (2.0 / a).ceil().max(1.0);
    let tail = q
        * quad::integrate(
            |t| t.powf(q * a - 1.0) * (1.0 + t.powf(2.0 * q)).powf(-p),
            0.0,
            1.0,
            1e-12,
            1e-16,
        )
        .value;
    head + tail
}

impl EvalKernel for Kernel {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn profile(&self, s: f64) -> (f64, f64, f64) {
        self.raw_profile(s)
    }

    fn support_radius(&self) -> Option<f64> {
        None
    }

    fn decay_exponent(&self) -> f64 {
        self.decay_exponent
    }

    fn decay_constant(&self) -> f64 {
        self.decay_constant
    }

    fn integrals(&self) -> Result<(f64, f64)> {
        let d = self.dimension;
        let omega = surface_area(d);
        match self.family {
            Family::Rational { beta } => Ok((
                omega * radial_power_integral(beta / 2.0, d),
                omega * radial_power_integral(beta, d),
            )),
            Family::StretchedExp { gamma } => {
                let mass = |c: f64| -> f64 {
                    let r_far = (160.0f64 / c).powf(1.0 / gamma).max(8.0);
                    quad::integrate(
                        |rho| {
                            rho.powi(d as i32 - 1)
                                * (-c * (1.0 + rho * rho).powf(gamma / 2.0)).exp()
                        },
                        0.0,
                        r_far,
                        1e-11,
                        1e-15,
                    )
                    .value
                };
                Ok((omega * mass(1.0), omega * mass(2.0)))
            }
        }
    }

    fn radial_tail_mass(&self, radius: f64) -> f64 {
        match self.family {
            Family::Rational { beta } => {
                self.tail_coeff * radius.powf(self.dimension as f64 - beta)
            }
            Family::StretchedExp { .. } => self.tail_coeff * self.radial(radius).sqrt(),
        }
    }
}

/// Radial C^2 cutoff: identically 1 up to the inner radius, identically 0
/// beyond the outer radius, quintic bridge between.
#[derive(Debug, Clone, Copy)]
pub struct CutoffFunction {
    pub inner_radius: f64,
    pub outer_radius: f64,
}

impl CutoffFunction {
    pub fn standard() -> CutoffFunction {
        CutoffFunction { inner_radius: 0.25, outer_radius: 0.5 }
    }

    /// chi(rho) with first and second radial derivatives.
    pub fn chi(&self, rho: f64) -> (f64, f64, f64) {
        if rho <= self.inner_radius {
            return (1.0, 0.0, 0.0);
        }
        if rho >= self.outer_radius {
            return (0.0, 0.0, 0.0);
        }
        let w = self.outer_radius - self.inner_radius;
        let t = (rho - self.inner_radius) / w;
        let s = t * t * t * (10.0 - 15.0 * t + 6.0 * t * t);
        let s1 = 30.0 * t * t * (1.0 - t) * (1.0 - t);
        let s2 = 60.0 * t * (1.0 - t) * (1.0 - 2.0 * t);
        (1.0 - s, -s1 / w, -s2 / (w * w))
    }
}

#[derive(Debug, Clone)]
pub struct TruncatedKernel {
    base: Kernel,
    range: f64,
    cutoff: CutoffFunction,
    decay_constant: f64,
}

impl TruncatedKernel {
    pub fn new(base: Kernel, range: f64) -> Result<TruncatedKernel> {
        if !(range.is_finite() && range > 0.0) {
            return Err(Error::invalid(format!(
                "truncation range must be positive and finite, got {range}"
            )));
        }
        let mut k = TruncatedKernel {
            base,
            range,
            cutoff: CutoffFunction::standard(),
            decay_constant: 0.0,
        };
        let exponent = k.base.decay_exponent;
        k.decay_constant =
            scan_decay_constant(|s| k.truncated_profile(s), exponent, (range / 2.0).max(10.0));
        Ok(k)
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn base(&self) -> &Kernel {
        &self.base
    }

    fn truncated_profile(&self, s: f64) -> (f64, f64, f64) {
        let r = self.range;
        let half = r / 2.0;
        if s >= half * half {
            return (0.0, 0.0, 0.0);
        }
        let (v, p1, p2) = self.base.raw_profile(s);
        let rho = s.sqrt();
        if rho <= self.cutoff.inner_radius * r {
            // cutoff is exactly 1 here: the base kernel bitwise
            return (v, p1, p2);
        }
        let (c, c1, c2) = self.cutoff.chi(rho / r);
        // chain rule from radial to squared-radius derivatives; rho >= r/4 > 0
        let t1 = c1 / (2.0 * r * rho);
        let t2 = c2 / (4.0 * r * r * rho * rho) - c1 / (4.0 * r * rho * rho * rho);
        (v * c, p1 * c + v * t1, p2 * c + 2.0 * p1 * t1 + v * t2)
    }
}

impl EvalKernel for TruncatedKernel {
    fn dimension(&self) -> usize {
        self.base.dimension
    }

    fn profile(&self, s: f64) -> (f64, f64, f64) {
        self.truncated_profile(s)
    }

    fn support_radius(&self) -> Option<f64> {
        Some(self.range / 2.0)
    }

    fn decay_exponent(&self) -> f64 {
        self.base.decay_exponent
    }

    fn decay_constant(&self) -> f64 {
        self.decay_constant
    }

    fn integrals(&self) -> Result<(f64, f64)> {
        let d = self.base.dimension;
        let omega = surface_area(d);
        let upper = self.range / 2.0;
        let one = quad::integrate(
            |rho| rho.powi(d as i32 - 1) * self.truncated_profile(rho * rho).0,
            0.0,
            upper,
            1e-12,
            1e-16,
        )
        .value;
        let two = quad::integrate(
            |rho| {
                let v = self.truncated_profile(rho * rho).0;
                rho.powi(d as i32 - 1) * v * v
            },
            0.0,
            upper,
            1e-12,
            1e-16,
        )
        .value;
        Ok((omega * one, omega * two))
    }

    fn radial_tail_mass(&self, radius: f64) -> f64 {
        if radius >= self.range / 2.0 {
            0.0
        } else {
            // g^r <= g pointwise
            self.base.radial_tail_mass(radius)
        }
    }
}

/// Lattice geometry of the sampled-autocorrelation covariance route.
#[derive(Debug, Clone, Copy)]
pub struct CovarianceSpec {
    /// Sample spacing; probe lags must lie on this lattice.
    pub spacing: f64,
    /// Kernel sampled on [-half_extent, half_extent]^d.
    pub half_extent: f64,
    /// Largest |lag| the table must support.
    pub max_lag: f64,
}

impl Default for CovarianceSpec {
    fn default() -> Self {
        CovarianceSpec { spacing: 0.125, half_extent: 48.0, max_lag: 8.0 }
    }
}

/// Dual-route covariance evaluator.
///
/// Every evaluation computes K(x) by adaptive quadrature of the convolution
/// integral and looks the same lag up in a precomputed FFT autocorrelation of
/// the sampled kernel; disagreement beyond the combined analytic error bound
/// is a numerical-consistency error. The quadrature value is returned.
pub struct CovarianceOracle {
    kernel: Kernel,
    spec: CovarianceSpec,
    table: Vec<f64>,
    dims: Vec<usize>,
    max_offset: i64,
    k0: f64,
}

impl CovarianceOracle {
    pub fn new(kernel: &Kernel, spec: CovarianceSpec) -> Result<CovarianceOracle> {
        let d = kernel.dimension;
        if d > 2 {
            return Err(Error::invalid(
                "covariance quadrature is implemented for dimensions 1 and 2".to_string(),
            ));
        }
        if !(spec.spacing > 0.0) || !(spec.half_extent > 0.0) || spec.max_lag < 0.0 {
            return Err(Error::invalid(format!(
                "covariance spec must have positive spacing and extent, got {spec:?}"
            )));
        }
        if spec.half_extent < 2.0 * spec.max_lag {
            return Err(Error::invalid(
                "covariance sample extent must be at least twice the maximum lag".to_string(),
            ));
        }
        let half_n = (spec.half_extent / spec.spacing).round() as i64;
        let n = (2 * half_n + 1) as usize;
        let t_off = (spec.max_lag / spec.spacing).ceil() as i64 + 2;
        let p = fftconv::next_good_len(n + t_off as usize);
        let dims = vec![p; d];

        // kernel samples at wrapped signed offsets
        let total: usize = dims.iter().product();
        let mut samples = vec![0.0f64; total];
        let wrap = |o: i64| -> usize { (o.rem_euclid(p as i64)) as usize };
        match d {
            1 => {
                for o in -half_n..=half_n {
                    let x = o as f64 * spec.spacing;
                    samples[wrap(o)] = kernel.raw_profile(x * x).0;
                }
            }
            2 => {
                for oi in -half_n..=half_n {
                    let xi = oi as f64 * spec.spacing;
                    let row = wrap(oi) * p;
                    for oj in -half_n..=half_n {
                        let xj = oj as f64 * spec.spacing;
                        samples[row + wrap(oj)] = kernel.raw_profile(xi * xi + xj * xj).0;
                    }
                }
            }
            _ => unreachable!(),
        }
        let mut engine = FftEngine::new();
        let mut table = fftconv::autocorrelation(&mut engine, &samples, &dims);
        let scale = spec.spacing.powi(d as i32);
        for v in table.iter_mut() {
            *v *= scale;
        }
        let mut oracle = CovarianceOracle {
            kernel: kernel.clone(),
            spec,
            table,
            dims,
            max_offset: t_off,
            k0: 0.0,
        };
        let zero = vec![0.0; d];
        oracle.k0 = oracle.eval(&zero)?;
        Ok(oracle)
    }

    /// K(0), cached at construction.
    pub fn k0(&self) -> f64 {
        self.k0
    }

    /// Dual-route K(x); the probe must lie on the sample lattice.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.kernel.dimension {
            return Err(Error::invalid(format!(
                "probe has {} coordinates for dimension {}",
                x.len(),
                self.kernel.dimension
            )));
        }
        let s = x.iter().map(|&c| c * c).sum::<f64>().sqrt();
        let (kq, err_q) = self.quadrature_route(s)?;
        if err_q >= 1e-6 {
            return Err(Error::invalid(format!(
                "covariance quadrature error estimate {err_q:.2e} exceeds 1e-6 at |x| = {s}"
            )));
        }
        let kf = self.table_lookup(x)?;
        let tol = (3.0 * (err_q + self.table_truncation_bound(s))).max(1e-6);
        if (kq - kf).abs() > tol {
            return Err(Error::inconsistent(format!(
                "covariance routes disagree at |x| = {s}: quadrature {kq:.9e}, \
                 autocorrelation {kf:.9e}, tolerance {tol:.2e}"
            )));
        }
        Ok(kq)
    }

    pub fn eval_many(&self, probes: &[Vec<f64>]) -> Result<Vec<f64>> {
        probes.iter().map(|x| self.eval(x)).collect()
    }

    /// Autocorrelation-route value alone (used by the consistency tests).
    pub fn table_lookup(&self, x: &[f64]) -> Result<f64> {
        let p = self.dims[0] as i64;
        let mut idx = 0usize;
        for &c in x {
            let o = (c / self.spec.spacing).round() as i64;
            if (c - o as f64 * self.spec.spacing).abs() > 1e-9 * c.abs().max(1.0) {
                return Err(Error::invalid(format!(
                    "covariance probe coordinate {c} is off the lattice of spacing {}",
                    self.spec.spacing
                )));
            }
            if o.abs() > self.max_offset {
                return Err(Error::invalid(format!(
                    "covariance probe coordinate {c} exceeds the table lag limit {}",
                    self.spec.max_lag
                )));
            }
            idx = idx * p as usize + o.rem_euclid(p) as usize;
        }
        Ok(self.table[idx])
    }

    /// Missing-mass bound of the finite sample block at lag distance s.
    fn table_truncation_bound(&self, s: f64) -> f64 {
        let e = self.spec.half_extent;
        self.kernel.radial((e - s).max(0.0)) * self.kernel.radial_tail_mass(e)
    }

    /// Adaptive quadrature of int g(y) g(y + x) dy, reduced by isotropy.
    fn quadrature_route(&self, s: f64) -> Result<(f64, f64)> {
        // outer cutoff by the analytic tail bound
        let mut r2 = (2.0 * (s + 8.0)).max(16.0);
        while self.kernel.radial((r2 - s).max(0.0)) * self.kernel.radial_tail_mass(r2) > 1e-10
            && r2 < 1e6
        {
            r2 *= 2.0;
        }
        let tail_bound = self.kernel.radial((r2 - s).max(0.0)) * self.kernel.radial_tail_mass(r2);
        match self.kernel.dimension {
            1 => {
                let f = |y: f64| {
                    let dy = y - s;
                    self.kernel.raw_profile(y * y).0 * self.kernel.raw_profile(dy * dy).0
                };
                let q = quad::integrate(f, -r2, r2, 1e-10, 1e-13);
                Ok((q.value, q.abs_error + tail_bound))
            }
            2 => {
                let inner_tol = 1e-11;
                let f = |rho: f64| {
                    let g_rho = self.kernel.raw_profile(rho * rho).0;
                    if g_rho == 0.0 {
                        return 0.0;
                    }
                    let ring = quad::integrate_periodic(
                        |theta| {
                            let sq = rho * rho + s * s - 2.0 * rho * s * theta.cos();
                            self.kernel.raw_profile(sq.max(0.0)).0
                        },
                        2.0 * PI,
                        inner_tol,
                    );
                    rho * g_rho * ring
                };
                let q = quad::integrate(f, 0.0, r2, 1e-10, 1e-13);
                Ok((q.value, q.abs_error + tail_bound + inner_tol * q.value.abs() * 10.0))
            }
            _ => Err(Error::invalid(
                "covariance quadrature is implemented for dimensions 1 and 2".to_string(),
            )),
        }
    }
}

/// One-shot dual-route covariance evaluation. Builds a fresh sample table;
/// use [`CovarianceOracle`] directly to amortize it over many probes.
pub fn covariance(kernel: &Kernel, x: &[f64], spec: CovarianceSpec) -> Result<f64> {
    CovarianceOracle::new(kernel, spec)?.eval(x)
}
