//! The `(G, p, η)` triple: lifetime law, offspring law and motion law, their
//! validation, derived constants and primitive samplers.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};
use thiserror::Error;

use crate::quadrature::{integrate, integrate_pieces};

/// Tolerance on `|Σ k p_k − 1|`.
pub const CRITICALITY_TOL: f64 = 1e-9;
/// Tolerance on `|Σ p_k − 1|`.
pub const PROBABILITY_SUM_TOL: f64 = 1e-12;
/// Relative tolerance of the ψ quadrature.
pub const PSI_REL_TOL: f64 = 1e-8;
/// Lifetime tail mass below which the ψ integral is truncated.
pub const TAIL_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("offspring law is not critical: mean {mean} differs from 1")]
    NotCritical { mean: f64 },
    #[error("lifetime law puts mass at zero")]
    MassAtZeroLifetime,
    #[error("offspring law is degenerate: {0}")]
    DegenerateOffspring(&'static str),
    #[error("ψ = ∫ v dG is not finite: {0}")]
    InfinitePsi(String),
    #[error("negative duration {0}")]
    NegativeDuration(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Lifetime distribution `G`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LifetimeLaw {
    Exponential { rate: f64 },
    Gamma { shape: f64, rate: f64 },
    Uniform { lo: f64, hi: f64 },
    Deterministic { value: f64 },
}

fn positive(name: &str, x: f64) -> Result<(), ModelError> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(ModelError::InvalidParameter(format!("{name} must be positive and finite, got {x}")))
    }
}

impl LifetimeLaw {
    pub fn check(&self) -> Result<(), ModelError> {
        match *self {
            LifetimeLaw::Exponential { rate } => positive("rate", rate),
            LifetimeLaw::Gamma { shape, rate } => {
                positive("shape", shape)?;
                positive("rate", rate)
            }
            LifetimeLaw::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 {
                    return Err(ModelError::InvalidParameter(format!("uniform bounds [{lo}, {hi}]")));
                }
                if hi <= 0.0 {
                    return Err(ModelError::MassAtZeroLifetime);
                }
                if lo >= hi {
                    return Err(ModelError::InvalidParameter(format!("uniform needs lo < hi, got [{lo}, {hi}]")));
                }
                Ok(())
            }
            LifetimeLaw::Deterministic { value } => {
                if value == 0.0 {
                    Err(ModelError::MassAtZeroLifetime)
                } else {
                    positive("value", value)
                }
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            // G(0) = 0 for every admissible law.
            return 0.0;
        }
        match *self {
            LifetimeLaw::Exponential { rate } => -(-rate * x).exp_m1(),
            LifetimeLaw::Gamma { shape, rate } => gamma_lr(shape, rate * x),
            LifetimeLaw::Uniform { lo, hi } => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
            LifetimeLaw::Deterministic { value } => {
                if x >= value {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// `1 − G(x)`.
    pub fn survival(&self, x: f64) -> f64 {
        match *self {
            LifetimeLaw::Exponential { rate } if x > 0.0 => (-rate * x).exp(),
            _ => 1.0 - self.cdf(x),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            LifetimeLaw::Exponential { rate } => 1.0 / rate,
            LifetimeLaw::Gamma { shape, rate } => shape / rate,
            LifetimeLaw::Uniform { lo, hi } => 0.5 * (lo + hi),
            LifetimeLaw::Deterministic { value } => value,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            LifetimeLaw::Exponential { rate } => 1.0 / (rate * rate),
            LifetimeLaw::Gamma { shape, rate } => shape / (rate * rate),
            LifetimeLaw::Uniform { lo, hi } => (hi - lo) * (hi - lo) / 12.0,
            LifetimeLaw::Deterministic { .. } => 0.0,
        }
    }

    /// `∫₀ˣ (1 − G(s)) ds` in closed form.
    pub fn integrated_survival(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        match *self {
            LifetimeLaw::Exponential { rate } => -(-rate * x).exp_m1() / rate,
            LifetimeLaw::Gamma { shape, rate } => {
                // μ − ∫ₓ^∞ (1 − G), the tail written as
                // ((k − y) Q(k, y) + yᵏ e^{−y} / Γ(k)) / β with y = βx.
                let y = rate * x;
                let density_term = (shape * y.ln() - y - ln_gamma(shape)).exp();
                let tail = ((shape - y) * gamma_ur(shape, y) + density_term) / rate;
                shape / rate - tail.max(0.0)
            }
            LifetimeLaw::Uniform { lo, hi } => {
                if x <= lo {
                    x
                } else if x >= hi {
                    0.5 * (lo + hi)
                } else {
                    let w = hi - lo;
                    lo + (w * w - (hi - x) * (hi - x)) / (2.0 * w)
                }
            }
            LifetimeLaw::Deterministic { value } => x.min(value),
        }
    }

    /// A point beyond which `1 − G < tail` (or the right end of the support).
    pub fn support_end(&self, tail: f64) -> f64 {
        match *self {
            LifetimeLaw::Exponential { rate } => -tail.ln() / rate,
            LifetimeLaw::Gamma { .. } => {
                let mut x = self.mean().max(1e-12);
                while self.survival(x) >= tail {
                    x *= 2.0;
                }
                x
            }
            LifetimeLaw::Uniform { hi, .. } => hi,
            LifetimeLaw::Deterministic { value } => value,
        }
    }

    /// Interior points where `1 − G` is not smooth.
    fn kinks(&self) -> Vec<f64> {
        match *self {
            LifetimeLaw::Uniform { lo, .. } if lo > 0.0 => vec![lo],
            _ => Vec::new(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            LifetimeLaw::Exponential { rate } => Exp::new(rate).expect("validated rate").sample(rng),
            LifetimeLaw::Gamma { shape, rate } => {
                Gamma::new(shape, 1.0 / rate).expect("validated gamma").sample(rng)
            }
            LifetimeLaw::Uniform { lo, hi } => rng.random_range(lo..hi),
            LifetimeLaw::Deterministic { value } => value,
        }
    }

    /// Full lifetime of an individual known to be alive at `age`, i.e. a draw
    /// from `G` conditioned on exceeding `age`.
    pub fn sample_beyond<R: Rng + ?Sized>(&self, age: f64, rng: &mut R) -> f64 {
        if age <= 0.0 {
            return self.sample(rng);
        }
        match *self {
            LifetimeLaw::Exponential { rate } => age + Exp::new(rate).expect("validated rate").sample(rng),
            LifetimeLaw::Uniform { lo, hi } => rng.random_range(lo.max(age)..hi),
            LifetimeLaw::Deterministic { value } => value,
            LifetimeLaw::Gamma { .. } => {
                // Inversion of the conditional cdf by bisection.
                let g0 = self.cdf(age);
                let u = g0 + (1.0 - g0) * rng.random::<f64>();
                let (mut lo, mut hi) = (age, age.max(self.mean()) * 2.0 + 1.0);
                while self.cdf(hi) < u {
                    hi *= 2.0;
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.cdf(mid) < u {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo <= 1e-14 * hi {
                        break;
                    }
                }
                0.5 * (lo + hi)
            }
        }
    }
}

/// Offspring distribution `(p_0, …, p_K)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffspringLaw {
    probabilities: Vec<f64>,
}

impl OffspringLaw {
    /// Checks nonnegativity and normalisation; criticality is checked by
    /// [`validate_model`].
    pub fn new(probabilities: Vec<f64>) -> Result<Self, ModelError> {
        if probabilities.len() < 2 {
            return Err(ModelError::InvalidParameter("offspring law needs at least p_0 and p_1".into()));
        }
        if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(ModelError::InvalidParameter("offspring probabilities must be nonnegative".into()));
        }
        let sum: f64 = probabilities.iter().sum();
        if (sum - 1.0).abs() > PROBABILITY_SUM_TOL {
            return Err(ModelError::InvalidParameter(format!("offspring probabilities sum to {sum}")));
        }
        Ok(OffspringLaw { probabilities })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn mean(&self) -> f64 {
        self.probabilities.iter().enumerate().map(|(k, p)| k as f64 * p).sum()
    }

    /// `Σ k² p_k − m²`.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let second: f64 = self.probabilities.iter().enumerate().map(|(k, p)| (k * k) as f64 * p).sum();
        second - m * m
    }

    /// Generating function `F(s) = Σ p_k s^k`.
    pub fn pgf(&self, s: f64) -> f64 {
        self.probabilities.iter().rev().fold(0.0, |acc, p| acc * s + p)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, p) in self.probabilities.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        // Rounding slack: return the largest value with positive mass.
        self.probabilities.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }
}

/// Continuous motion scale `σ(u)` of a time-inhomogeneous diffusion
/// `∫₀ᵗ σ(u) dB(u)`; `u` is the age of the carrier.
#[derive(Clone)]
pub struct SigmaFn {
    label: String,
    sigma: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    /// Coefficients of σ², when σ is a polynomial (exact variance integrals).
    squared_poly: Option<Vec<f64>>,
    /// Multiplier applied to every variance.
    variance_scale: f64,
}

impl SigmaFn {
    pub fn new(label: impl Into<String>, sigma: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        SigmaFn { label: label.into(), sigma: Arc::new(sigma), squared_poly: None, variance_scale: 1.0 }
    }

    /// `σ(u) = c₀ + c₁u + c₂u² + …`
    pub fn polynomial(coeffs: Vec<f64>) -> Self {
        let mut sq = vec![0.0; 2 * coeffs.len().max(1) - 1];
        for (i, a) in coeffs.iter().enumerate() {
            for (j, b) in coeffs.iter().enumerate() {
                sq[i + j] += a * b;
            }
        }
        let label = format!(
            "poly:{}",
            coeffs.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
        );
        let c = coeffs.clone();
        SigmaFn {
            label,
            sigma: Arc::new(move |u| c.iter().rev().fold(0.0, |acc, a| acc * u + a)),
            squared_poly: Some(sq),
            variance_scale: 1.0,
        }
    }

    /// Same shape with every variance multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.variance_scale *= factor;
        out
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn eval(&self, u: f64) -> f64 {
        (self.sigma)(u)
    }

    /// `scale · σ²(u)`.
    pub fn variance_rate(&self, u: f64) -> f64 {
        let s = self.eval(u);
        self.variance_scale * s * s
    }

    /// `scale · ∫ₐᵇ σ²(u) du`.
    pub fn variance_between(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        let raw = match &self.squared_poly {
            Some(sq) => {
                let anti = |x: f64| {
                    sq.iter()
                        .enumerate()
                        .rev()
                        .fold(0.0, |acc, (k, c)| acc * x + c / (k as f64 + 1.0))
                        * x
                };
                anti(b) - anti(a)
            }
            None => integrate(|u: f64| self.eval(u).powi(2), a, b, 1e-10, 1e-300).unwrap_or(f64::NAN),
        };
        self.variance_scale * raw
    }
}

impl fmt::Debug for SigmaFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigmaFn")
            .field("label", &self.label)
            .field("variance_scale", &self.variance_scale)
            .finish()
    }
}

/// Motion law `η`; all supported laws have independent Gaussian increments.
#[derive(Debug, Clone)]
pub enum MotionLaw {
    Brownian { diffusion: f64 },
    TimeInhomogeneous(SigmaFn),
}

impl MotionLaw {
    pub fn check(&self) -> Result<(), ModelError> {
        match self {
            MotionLaw::Brownian { diffusion } => positive("diffusion", *diffusion),
            MotionLaw::TimeInhomogeneous(s) => {
                if s.variance_scale.is_finite() && s.variance_scale >= 0.0 {
                    Ok(())
                } else {
                    Err(ModelError::InvalidParameter("motion variance scale".into()))
                }
            }
        }
    }

    /// Variance of the displacement accumulated between ages `from` and `to`.
    pub fn variance_between(&self, from: f64, to: f64) -> f64 {
        if to <= from {
            return 0.0;
        }
        match self {
            MotionLaw::Brownian { diffusion } => diffusion * (to - from),
            MotionLaw::TimeInhomogeneous(s) => s.variance_between(from, to),
        }
    }

    /// `v(t)`: second moment of the displacement over a life of duration `t`.
    pub fn v(&self, t: f64) -> f64 {
        self.variance_between(0.0, t)
    }

    /// Instantaneous variance rate `v'(u)`.
    fn variance_rate(&self, u: f64) -> f64 {
        match self {
            MotionLaw::Brownian { diffusion } => *diffusion,
            MotionLaw::TimeInhomogeneous(s) => s.variance_rate(u),
        }
    }

    /// Same law with variances multiplied by `factor` (the `1/√n` motion scaling).
    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            MotionLaw::Brownian { diffusion } => MotionLaw::Brownian { diffusion: diffusion * factor },
            MotionLaw::TimeInhomogeneous(s) => MotionLaw::TimeInhomogeneous(s.scaled(factor)),
        }
    }

    pub fn sample_increment<R: Rng + ?Sized>(&self, from: f64, to: f64, rng: &mut R) -> f64 {
        let var = self.variance_between(from, to);
        if var <= 0.0 {
            return 0.0;
        }
        let z: f64 = StandardNormal.sample(rng);
        var.sqrt() * z
    }

    pub fn describe(&self) -> String {
        match self {
            MotionLaw::Brownian { diffusion } => format!("bm:{diffusion}"),
            MotionLaw::TimeInhomogeneous(s) => format!("{}*{}", s.label(), s.variance_scale),
        }
    }
}

/// Unvalidated model description.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub lifetime: LifetimeLaw,
    pub offspring: OffspringLaw,
    pub motion: MotionLaw,
    pub initial_age: f64,
    pub initial_position: f64,
}

impl ModelSpec {
    pub fn new(lifetime: LifetimeLaw, offspring: OffspringLaw, motion: MotionLaw) -> Self {
        ModelSpec { lifetime, offspring, motion, initial_age: 0.0, initial_position: 0.0 }
    }

    /// Exponential(`rate`) lifetimes, offspring (½, 0, ½), Brownian(1) motion.
    pub fn binary_exponential(rate: f64) -> Self {
        ModelSpec::new(
            LifetimeLaw::Exponential { rate },
            OffspringLaw::new(vec![0.5, 0.0, 0.5]).expect("valid law"),
            MotionLaw::Brownian { diffusion: 1.0 },
        )
    }

    pub fn with_initial(mut self, age: f64, position: f64) -> Self {
        self.initial_age = age;
        self.initial_position = position;
        self
    }

    pub fn validate(self) -> Result<ValidatedModel, ModelError> {
        validate_model(self)
    }

    /// Canonical text form; stable across runs, used for digests.
    pub fn canonical(&self) -> String {
        let lifetime = match self.lifetime {
            LifetimeLaw::Exponential { rate } => format!("exp:{rate}"),
            LifetimeLaw::Gamma { shape, rate } => format!("gamma:{shape},{rate}"),
            LifetimeLaw::Uniform { lo, hi } => format!("unif:{lo},{hi}"),
            LifetimeLaw::Deterministic { value } => format!("det:{value}"),
        };
        let offspring =
            self.offspring.probabilities().iter().map(|p| p.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "lifetime={lifetime};offspring={offspring};motion={};initial_age={};initial_position={}",
            self.motion.describe(),
            self.initial_age,
            self.initial_position
        )
    }
}

/// `μ`, `σ²` and `ψ` of a validated model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    pub mu: f64,
    pub sigma2: f64,
    pub psi: f64,
}

/// A model whose invariants have been checked. Immutable.
#[derive(Debug, Clone)]
pub struct ValidatedModel {
    spec: ModelSpec,
    constants: DerivedConstants,
}

/// `ψ = ∫ v dG`, computed as `∫₀^∞ v'(u) (1 − G(u)) du` by adaptive quadrature.
pub fn psi_by_quadrature(lifetime: &LifetimeLaw, motion: &MotionLaw) -> Result<f64, ModelError> {
    let end = lifetime.support_end(TAIL_CUTOFF);
    let mut points = vec![0.0];
    points.extend(lifetime.kinks());
    points.push(end);
    let psi = integrate_pieces(
        |u: f64| motion.variance_rate(u) * lifetime.survival(u),
        &points,
        PSI_REL_TOL,
        1e-300,
    )
    .map_err(|e| ModelError::InfinitePsi(e.to_string()))?;
    if psi.is_finite() {
        Ok(psi)
    } else {
        Err(ModelError::InfinitePsi(format!("quadrature returned {psi}")))
    }
}

fn psi_of(lifetime: &LifetimeLaw, motion: &MotionLaw) -> Result<f64, ModelError> {
    match (motion, lifetime) {
        (MotionLaw::Brownian { diffusion }, _) => Ok(diffusion * lifetime.mean()),
        (_, LifetimeLaw::Deterministic { value }) => Ok(motion.v(*value)),
        _ => psi_by_quadrature(lifetime, motion),
    }
}

/// Checks the model invariants and computes the derived constants.
pub fn validate_model(spec: ModelSpec) -> Result<ValidatedModel, ModelError> {
    spec.lifetime.check()?;
    spec.motion.check()?;
    let p = spec.offspring.probabilities();
    if p[0] >= 1.0 {
        return Err(ModelError::DegenerateOffspring("p_0 = 1"));
    }
    let mean = spec.offspring.mean();
    if (mean - 1.0).abs() > CRITICALITY_TOL {
        return Err(ModelError::NotCritical { mean });
    }
    let sigma2 = spec.offspring.variance();
    if sigma2 <= 0.0 {
        return Err(ModelError::DegenerateOffspring("offspring variance is zero"));
    }
    if !(spec.initial_age.is_finite() && spec.initial_age >= 0.0) || !spec.initial_position.is_finite() {
        return Err(ModelError::InvalidParameter("initial age/position".into()));
    }
    if spec.lifetime.survival(spec.initial_age) <= 0.0 {
        return Err(ModelError::InvalidParameter(format!(
            "no lifetime exceeds the initial age {}",
            spec.initial_age
        )));
    }
    let psi = psi_of(&spec.lifetime, &spec.motion)?;
    if psi <= 0.0 {
        return Err(ModelError::InfinitePsi(format!("ψ = {psi} is not positive")));
    }
    let constants = DerivedConstants { mu: spec.lifetime.mean(), sigma2, psi };
    Ok(ValidatedModel { spec, constants })
}

impl ValidatedModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn lifetime(&self) -> &LifetimeLaw {
        &self.spec.lifetime
    }

    pub fn offspring(&self) -> &OffspringLaw {
        &self.spec.offspring
    }

    pub fn motion(&self) -> &MotionLaw {
        &self.spec.motion
    }

    pub fn initial_age(&self) -> f64 {
        self.spec.initial_age
    }

    pub fn initial_position(&self) -> f64 {
        self.spec.initial_position
    }

    pub fn derived_constants(&self) -> DerivedConstants {
        self.constants
    }

    /// `ψ/μ`, the variance of the limiting scaled position.
    pub fn limit_position_variance(&self) -> f64 {
        self.constants.psi / self.constants.mu
    }

    /// `(1/μ) ∫₀ˣ (1 − G(s)) ds`.
    pub fn limit_age_cdf(&self, x: f64) -> f64 {
        (self.spec.lifetime.integrated_survival(x) / self.constants.mu).clamp(0.0, 1.0)
    }

    /// Draws from the limiting age law by inverting `limit_age_cdf`.
    pub fn sample_limit_age<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if let LifetimeLaw::Exponential { rate } = self.spec.lifetime {
            return Exp::new(rate).expect("validated rate").sample(rng);
        }
        let u: f64 = rng.random();
        let (mut lo, mut hi) = (0.0, self.constants.mu.max(1e-12));
        while self.limit_age_cdf(hi) < u {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.limit_age_cdf(mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-14 * hi.max(1e-300) {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    /// One lifetime and one offspring count, independent.
    pub fn sample_event<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, usize) {
        let lifetime = self.spec.lifetime.sample(rng);
        let count = self.spec.offspring.sample(rng);
        (lifetime, count)
    }

    /// Displacement accumulated over a fresh life of the given duration.
    pub fn sample_displacement<R: Rng + ?Sized>(&self, duration: f64, rng: &mut R) -> Result<f64, ModelError> {
        if duration < 0.0 || duration.is_nan() {
            return Err(ModelError::NegativeDuration(duration));
        }
        Ok(self.spec.motion.sample_increment(0.0, duration, rng))
    }

    /// Short hex digest of the canonical model description.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let hash = Sha256::digest(self.spec.canonical().as_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
