//! Rescaled particle systems approximating the age-structured super-process.
//!
//! For scale `n` the system starts from a Poisson field with intensity `n·ν`,
//! runs with `Exp(λ)` lifetimes, a critical offspring law and motion whose
//! variance is divided by `n`, up to microscopic time `n·t`; each survivor
//! then carries mass `1/n`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{alive_configuration, par_replicates, EngineError, Root};
use crate::loglaplace::{self, GridSpec, LogLaplaceError};
use crate::model::{LifetimeLaw, ModelError, ModelSpec, MotionLaw, OffspringLaw, ValidatedModel};
use crate::rng::SeedPath;
use crate::stats::Estimate;

/// Default lower end of the macroscopic time window.
pub const DEFAULT_EPSILON: f64 = 0.01;

/// Number of grid points used by [`asf_error`].
pub const ASF_GRID_POINTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SuperprocessError {
    #[error("scale n = {0} is below 2")]
    NTooSmall(usize),
    #[error("initial intensity has infinite mass")]
    InfiniteMass,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("time {t} is below the cutoff {epsilon}")]
    BeforeCutoff { t: f64, epsilon: f64 },
    #[error("unknown test function `{0}` (expected const:<c>, gauss or age-exp)")]
    UnknownTestFunction(String),
    #[error("the finite-n equation needs Brownian motion and an age-free test function")]
    NoFiniteScaleEquation,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solver(#[from] LogLaplaceError),
}

/// `(1/n, 1 − 2/n, 1/n)`: critical, with variance `2/n`.
pub fn near_critical_binary_family(n: usize) -> Result<OffspringLaw, SuperprocessError> {
    if n < 2 {
        return Err(SuperprocessError::NTooSmall(n));
    }
    let p = 1.0 / n as f64;
    Ok(OffspringLaw::new(vec![p, 1.0 - 2.0 * p, p])?)
}

/// `(2/3, 0, 0, 1/3)`: critical with variance 2, so that
/// `F(1 − x) − (1 − x) = x² − x³/3`.
pub fn variance_two_family() -> OffspringLaw {
    OffspringLaw::new(vec![2.0 / 3.0, 0.0, 0.0, 1.0 / 3.0]).expect("valid law")
}

/// `n²(F(1 − u/n) − (1 − u/n))`, expanded in binomial moments
/// `b_j = E C(K, j)` as `n²[(b₀ − 1) + x(1 − b₁) + Σ_{j≥2} (−x)^j b_j]`
/// with `x = u/n`, which avoids cancelling `F(s)` against `s`.
pub fn scaled_pgf_gap(offspring: &OffspringLaw, n: usize, u: f64) -> f64 {
    let nf = n as f64;
    let x = u / nf;
    let b = binomial_moments(offspring.probabilities());
    let mut tail = 0.0;
    for bj in b.iter().skip(2).rev() {
        tail = tail * (-x) + bj;
    }
    nf * nf * ((b[0] - 1.0) + x * (1.0 - b[1]) + x * x * tail)
}

fn binomial_moments(p: &[f64]) -> Vec<f64> {
    let mut b = vec![0.0; p.len().max(2)];
    for (k, pk) in p.iter().enumerate() {
        let mut c = 1.0;
        for (j, bj) in b.iter_mut().enumerate().take(k + 1) {
            *bj += pk * c;
            c = c * (k - j) as f64 / (j + 1) as f64;
        }
    }
    b
}

/// `sup_{0 ≤ u ≤ cap} |n²(F(1 − u/n) − (1 − u/n)) − u²|` over a uniform grid.
pub fn asf_error(offspring: &OffspringLaw, n: usize, cap: f64) -> f64 {
    if cap <= 0.0 {
        return scaled_pgf_gap(offspring, n, 0.0).abs();
    }
    (0..ASF_GRID_POINTS)
        .map(|i| cap * i as f64 / (ASF_GRID_POINTS - 1) as f64)
        .map(|u| (scaled_pgf_gap(offspring, n, u) - u * u).abs())
        .fold(0.0, f64::max)
}

/// Initial intensity `ν = mass · Exp(age_rate) ⊗ N(mean, sd²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialIntensity {
    pub mass: f64,
    pub age_rate: f64,
    pub mean: f64,
    pub sd: f64,
}

impl InitialIntensity {
    /// Unit mass, `Exp(λ)` ages, standard Gaussian positions.
    pub fn standard(lambda: f64) -> Self {
        InitialIntensity { mass: 1.0, age_rate: lambda, mean: 0.0, sd: 1.0 }
    }

    pub fn check(&self) -> Result<(), SuperprocessError> {
        if self.mass.is_infinite() {
            return Err(SuperprocessError::InfiniteMass);
        }
        if !(self.mass >= 0.0) || !(self.age_rate > 0.0) || !(self.sd > 0.0) || !self.mean.is_finite() || !self.sd.is_finite() {
            return Err(SuperprocessError::InvalidParameter(format!("{self:?}")));
        }
        Ok(())
    }

    /// Density of the spatial marginal, including the mass.
    pub fn spatial_density(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd;
        self.mass * (-0.5 * z * z).exp() / (self.sd * (2.0 * std::f64::consts::PI).sqrt())
    }
}

/// Registry of bounded nonnegative test functions `f(age, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TestFunction {
    Constant(f64),
    /// `e^{−x²}`
    Gauss,
    /// `e^{−a}`
    AgeExp,
}

impl TestFunction {
    pub fn eval(&self, age: f64, x: f64) -> f64 {
        match self {
            TestFunction::Constant(c) => *c,
            TestFunction::Gauss => (-x * x).exp(),
            TestFunction::AgeExp => (-age).exp(),
        }
    }

    pub fn is_age_free(&self) -> bool {
        !matches!(self, TestFunction::AgeExp)
    }

    pub fn sup(&self) -> f64 {
        match self {
            TestFunction::Constant(c) => *c,
            _ => 1.0,
        }
    }
}

impl FromStr for TestFunction {
    type Err = SuperprocessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || SuperprocessError::UnknownTestFunction(s.to_string());
        match s.trim() {
            "gauss" => Ok(TestFunction::Gauss),
            "age-exp" => Ok(TestFunction::AgeExp),
            other => {
                let c: f64 = other.strip_prefix("const:").ok_or_else(unknown)?.parse().map_err(|_| unknown())?;
                if c.is_finite() && c >= 0.0 {
                    Ok(TestFunction::Constant(c))
                } else {
                    Err(unknown())
                }
            }
        }
    }
}

impl fmt::Display for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TestFunction::Constant(c) => write!(f, "const:{c}"),
            TestFunction::Gauss => write!(f, "gauss"),
            TestFunction::AgeExp => write!(f, "age-exp"),
        }
    }
}

/// Parameters of the `n`-th system.
#[derive(Debug, Clone)]
pub struct ScalingFamily {
    pub n: usize,
    pub lambda: f64,
    pub offspring: OffspringLaw,
    /// Motion before the `1/n` variance scaling.
    pub motion: MotionLaw,
    pub nu: InitialIntensity,
    pub epsilon: f64,
}

impl ScalingFamily {
    /// Variance-two offspring, Brownian(1) motion and the standard intensity.
    pub fn standard(n: usize, lambda: f64) -> Result<Self, SuperprocessError> {
        let fam = ScalingFamily {
            n,
            lambda,
            offspring: variance_two_family(),
            motion: MotionLaw::Brownian { diffusion: 1.0 },
            nu: InitialIntensity::standard(lambda),
            epsilon: DEFAULT_EPSILON,
        };
        fam.check()?;
        Ok(fam)
    }

    pub fn check(&self) -> Result<(), SuperprocessError> {
        if self.n == 0 {
            return Err(SuperprocessError::InvalidParameter("n must be positive".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(SuperprocessError::InvalidParameter(format!("λ = {}", self.lambda)));
        }
        if !(self.epsilon > 0.0) {
            return Err(SuperprocessError::InvalidParameter(format!("ε = {}", self.epsilon)));
        }
        self.nu.check()?;
        self.microscopic_model()?;
        Ok(())
    }

    /// The unscaled model; its `ψ/μ = λψ` is the limit diffusion rate.
    pub fn base_model(&self) -> Result<ValidatedModel, SuperprocessError> {
        Ok(ModelSpec::new(LifetimeLaw::Exponential { rate: self.lambda }, self.offspring.clone(), self.motion.clone()).validate()?)
    }

    /// The model simulated at scale `n` (motion variance divided by `n`).
    pub fn microscopic_model(&self) -> Result<ValidatedModel, SuperprocessError> {
        let motion = self.motion.scaled(1.0 / self.n as f64);
        Ok(ModelSpec::new(LifetimeLaw::Exponential { rate: self.lambda }, self.offspring.clone(), motion).validate()?)
    }

    /// `λψ` of the limit semigroup.
    pub fn diffusion_rate(&self) -> Result<f64, SuperprocessError> {
        let dc = self.base_model()?.derived_constants();
        Ok(dc.psi / dc.mu)
    }
}

/// Atoms of `(1/n) Y_{nt}`, each of weight `1/n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledMeasure {
    pub atoms: Vec<(f64, f64)>,
    pub time: f64,
    pub n: usize,
}

impl ScaledMeasure {
    pub fn weight(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.len() as f64 * self.weight()
    }

    pub fn integrate(&self, f: impl Fn(f64, f64) -> f64) -> f64 {
        self.atoms.iter().map(|(a, x)| f(*a, *x)).sum::<f64>() * self.weight()
    }
}

/// Poisson field with intensity `n·ν`.
pub fn sample_poisson_field<R: Rng + ?Sized>(n: usize, nu: &InitialIntensity, rng: &mut R) -> Result<Vec<Root>, SuperprocessError> {
    nu.check()?;
    let rate = n as f64 * nu.mass;
    if rate == 0.0 {
        return Ok(Vec::new());
    }
    let count = Poisson::new(rate).map_err(|e| SuperprocessError::InvalidParameter(e.to_string()))?.sample(rng) as usize;
    let ages = Exp::new(nu.age_rate).expect("checked rate");
    let positions = Normal::new(nu.mean, nu.sd).expect("checked sd");
    Ok((0..count).map(|_| Root { age: ages.sample(rng), position: positions.sample(rng) }).collect())
}

/// One field of the `n`-th system observed at macroscopic time `t`.
///
/// The field uses the stream tagged `field` under `seed_path`; the tree of
/// initial particle `i` uses child `i`.
pub fn run_scaled(family: &ScalingFamily, t: f64, seed_path: SeedPath, particle_cap: usize) -> Result<ScaledMeasure, SuperprocessError> {
    let model = family.microscopic_model()?;
    run_scaled_with(family, &model, t, seed_path, particle_cap)
}

fn run_scaled_with(
    family: &ScalingFamily,
    model: &ValidatedModel,
    t: f64,
    seed_path: SeedPath,
    particle_cap: usize,
) -> Result<ScaledMeasure, SuperprocessError> {
    if !(t >= family.epsilon) {
        return Err(SuperprocessError::BeforeCutoff { t, epsilon: family.epsilon });
    }
    let key = seed_path.key();
    let roots = sample_poisson_field(family.n, &family.nu, &mut key.tagged("field").stream())?;
    let horizon = family.n as f64 * t;
    let trees = key.tagged("trees");
    let mut atoms = Vec::new();
    for (i, root) in roots.into_iter().enumerate() {
        alive_configuration(model, root, horizon, trees.child(i as u64), particle_cap, &mut atoms)?;
    }
    Ok(ScaledMeasure { atoms, time: t, n: family.n })
}

/// Monte Carlo estimate of `−log E exp(−⟨f, 𝒴ⁿ_t⟩)` over `reps` fields, with
/// a delta-method standard error.
pub fn laplace_mc(
    family: &ScalingFamily,
    f: TestFunction,
    t: f64,
    reps: u64,
    seed: u64,
    particle_cap: usize,
) -> Result<Estimate, SuperprocessError> {
    if reps < 100 {
        return Err(SuperprocessError::InvalidParameter(format!("need at least 100 fields, got {reps}")));
    }
    let model = family.microscopic_model()?;
    let draws = par_replicates(reps, |r| {
        run_scaled_with(family, &model, t, SeedPath::new(seed, r), particle_cap).map(|m| (-m.integrate(|a, x| f.eval(a, x))).exp())
    });
    let draws: Vec<f64> = draws.into_iter().collect::<Result<_, _>>()?;
    let e = Estimate::from_samples(&draws).expect("reps ≥ 100");
    Ok(Estimate { value: -e.value.ln(), stderr: e.stderr / e.value, n: e.n })
}

/// Numerical settings for the deterministic targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub nx: usize,
    pub dt: f64,
    /// Half-width added to `10·√(λψt)`; widened if `ν` needs more room.
    pub radius: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { nx: 1601, dt: 1e-3, radius: 8.0 }
    }
}

fn grid_for(family: &ScalingFamily, t: f64, s: SolverSettings) -> Result<GridSpec<f64>, SuperprocessError> {
    let rate = family.diffusion_rate()?;
    Ok(GridSpec::centred(family.lambda, rate / family.lambda, t, s.radius.max(family.nu.mean.abs() + 8.0 * family.nu.sd), s.nx, s.dt)?)
}

/// `⟨u_t f, ν⟩` from the limit equation.
pub fn solver_target(family: &ScalingFamily, f: TestFunction, t: f64, settings: SolverSettings) -> Result<f64, SuperprocessError> {
    let grid = grid_for(family, t, settings)?;
    let psi = family.diffusion_rate()? / family.lambda;
    let sol = loglaplace::solve_u(|a, x| f.eval(a, x), family.lambda, psi, grid)?;
    Ok(sol.pair_final(|x| family.nu.spatial_density(x))?)
}

/// `⟨uⁿ_t f, ν⟩` from the exact equation of the `n`-th system:
/// initial value `n(1 − e^{−f/n})` and nonlinearity `n²(F(1 − u/n) − (1 − u/n))`.
/// Exact for Brownian motion and age-free `f`, where the ages drop out.
pub fn finite_scale_target(family: &ScalingFamily, f: TestFunction, t: f64, settings: SolverSettings) -> Result<f64, SuperprocessError> {
    if !f.is_age_free() || !matches!(family.motion, MotionLaw::Brownian { .. }) {
        return Err(SuperprocessError::NoFiniteScaleEquation);
    }
    let grid = grid_for(family, t, settings)?;
    let psi = family.diffusion_rate()? / family.lambda;
    let nf = family.n as f64;
    let u0: Vec<f64> = grid.xs().into_iter().map(|x| nf * (-(-f.eval(0.0, x) / nf).exp_m1())).collect();
    let offspring = family.offspring.clone();
    let n = family.n;
    let sol = loglaplace::solve_with(u0, |u| scaled_pgf_gap(&offspring, n, u), family.lambda, psi, grid)?;
    Ok(sol.pair_final(|x| family.nu.spatial_density(x))?)
}

/// JSONL row of the `superprocess` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplaceRow {
    pub n: usize,
    pub t: f64,
    pub f: String,
    pub estimate: f64,
    pub stderr: f64,
    pub solver_target: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::DEFAULT_PARTICLE_CAP;
    use crate::rng::RandomStream;

    #[test]
    fn gap_expansion_matches_pgf() {
        let laws = [variance_two_family(), near_critical_binary_family(7).unwrap(), OffspringLaw::new(vec![0.3, 0.5, 0.2]).unwrap()];
        for law in &laws {
            for n in [1usize, 3, 10] {
                for u in [0.0, 0.3, 1.0, 2.5] {
                    let s = 1.0 - u / n as f64;
                    let direct = (n * n) as f64 * (law.pgf(s) - s);
                    assert!((scaled_pgf_gap(law, n, u) - direct).abs() < 1e-12 * (n * n) as f64, "{law:?} n={n} u={u}");
                }
            }
        }
    }

    #[test]
    fn binary_family_values() {
        assert_eq!(near_critical_binary_family(2).unwrap().probabilities(), &[0.5, 0.0, 0.5]);
        let f10 = near_critical_binary_family(10).unwrap();
        assert_eq!(f10.probabilities(), &[0.1, 0.8, 0.1]);
        assert!((f10.mean() - 1.0).abs() < 1e-15);
        assert_eq!(near_critical_binary_family(1), Err(SuperprocessError::NTooSmall(1)));
    }

    #[test]
    fn asf_error_against_direct_grid() {
        // F(s) = s + (1−s)²/n, so the scaled gap is u²/n.
        for n in [2usize, 10, 100, 1000] {
            let law = near_critical_binary_family(n).unwrap();
            let direct = (0..ASF_GRID_POINTS)
                .map(|i| 10.0 * i as f64 / 999.0)
                .map(|u| (u * u / n as f64 - u * u).abs())
                .fold(0.0, f64::max);
            assert!((asf_error(&law, n, 10.0) - direct).abs() < 1e-9 * direct.max(1.0));
        }
        // variance-two law: gap u² − u³/(3n), error N³/(3n) on [0, N]
        let v2 = variance_two_family();
        for n in [10usize, 100, 1000] {
            assert!((asf_error(&v2, n, 10.0) - 1000.0 / (3.0 * n as f64)).abs() < 1e-7);
        }
        let fixed = OffspringLaw::new(vec![0.5, 0.0, 0.5]).unwrap();
        assert!((asf_error(&fixed, 10, 10.0) - 50.0).abs() < 1e-9);
        assert_eq!(asf_error(&v2, 10, 0.0), 0.0);
    }

    #[test]
    fn test_function_registry() {
        assert_eq!("const:1.5".parse::<TestFunction>().unwrap(), TestFunction::Constant(1.5));
        assert_eq!("gauss".parse::<TestFunction>().unwrap(), TestFunction::Gauss);
        assert_eq!("age-exp".parse::<TestFunction>().unwrap(), TestFunction::AgeExp);
        for bad in ["const:", "const:-1", "x^2", "const:inf"] {
            assert!(bad.parse::<TestFunction>().is_err(), "{bad}");
        }
        assert_eq!(TestFunction::Gauss.to_string(), "gauss");
    }

    #[test]
    fn poisson_field_moments() {
        let nu = InitialIntensity::standard(1.0);
        let mut rng = RandomStream::seed_from_u64(1);
        let reps = 2000;
        let counts: Vec<f64> = (0..reps).map(|_| sample_poisson_field(100, &nu, &mut rng).unwrap().len() as f64).collect();
        let e = Estimate::from_samples(&counts).unwrap();
        assert!((e.value - 100.0).abs() < 3.0 * 10.0 / (reps as f64).sqrt());
        let empty = InitialIntensity { mass: 0.0, ..nu };
        assert!(sample_poisson_field(100, &empty, &mut rng).unwrap().is_empty());
        let inf = InitialIntensity { mass: f64::INFINITY, ..nu };
        assert_eq!(sample_poisson_field(1, &inf, &mut rng), Err(SuperprocessError::InfiniteMass));
        let a = sample_poisson_field(50, &nu, &mut RandomStream::seed_from_u64(9)).unwrap();
        let b = sample_poisson_field(50, &nu, &mut RandomStream::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn run_scaled_contract() {
        let fam = ScalingFamily::standard(20, 1.0).unwrap();
        let a = run_scaled(&fam, 0.5, SeedPath::new(3, 1), DEFAULT_PARTICLE_CAP).unwrap();
        let b = run_scaled(&fam, 0.5, SeedPath::new(3, 1), DEFAULT_PARTICLE_CAP).unwrap();
        assert_eq!(a, b);
        assert!((a.total_mass() - a.atoms.len() as f64 / 20.0).abs() < 1e-15);
        assert!(matches!(run_scaled(&fam, 0.001, SeedPath::new(3, 1), DEFAULT_PARTICLE_CAP), Err(SuperprocessError::BeforeCutoff { .. })));
    }

    #[test]
    fn unit_scale_is_the_plain_process() {
        let fam = ScalingFamily::standard(1, 1.0).unwrap();
        let seed = SeedPath::new(4, 0);
        let m = run_scaled(&fam, 1.0, seed, DEFAULT_PARTICLE_CAP).unwrap();
        let key = seed.key();
        let roots = sample_poisson_field(1, &fam.nu, &mut key.tagged("field").stream()).unwrap();
        let model = fam.base_model().unwrap();
        let mut atoms = Vec::new();
        for (i, r) in roots.into_iter().enumerate() {
            alive_configuration(&model, r, 1.0, key.tagged("trees").child(i as u64), DEFAULT_PARTICLE_CAP, &mut atoms).unwrap();
        }
        assert_eq!(m.atoms, atoms);
    }

    #[test]
    fn laplace_of_zero_is_zero() {
        let fam = ScalingFamily::standard(10, 1.0).unwrap();
        let e = laplace_mc(&fam, TestFunction::Constant(0.0), 1.0, 100, 1, DEFAULT_PARTICLE_CAP).unwrap();
        assert_eq!((e.value, e.stderr), (0.0, 0.0));
    }

    #[test]
    fn finite_scale_equation_matches_simulation() {
        // At n = 5 the exact finite-n equation differs visibly from the limit
        let fam = ScalingFamily::standard(5, 1.0).unwrap();
        let settings = SolverSettings { nx: 801, dt: 2e-3, radius: 8.0 };
        let exact = finite_scale_target(&fam, TestFunction::Gauss, 0.5, settings).unwrap();
        let limit = solver_target(&fam, TestFunction::Gauss, 0.5, settings).unwrap();
        let mc = laplace_mc(&fam, TestFunction::Gauss, 0.5, 40_000, 2, DEFAULT_PARTICLE_CAP).unwrap();
        assert!(mc.covers(exact, 4.0), "mc {mc} exact {exact} limit {limit}");
        assert!((exact - limit).abs() > 4.0 * mc.stderr, "exact {exact} limit {limit} se {}", mc.stderr);
    }

    #[test]
    fn constant_targets_agree_with_riccati() {
        let fam = ScalingFamily::standard(200, 1.0).unwrap();
        let s = SolverSettings { nx: 1201, dt: 1e-3, radius: 8.0 };
        let limit = solver_target(&fam, TestFunction::Constant(1.0), 1.0, s).unwrap();
        assert!((limit - 0.5).abs() < 1e-6);
        let exact = finite_scale_target(&fam, TestFunction::Constant(1.0), 1.0, s).unwrap();
        assert!((exact - 0.5).abs() < 5e-3);
    }
}
