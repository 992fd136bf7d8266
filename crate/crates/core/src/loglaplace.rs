//! Deterministic solver for the limiting log-Laplace equation
//!
//! ```text
//! u_t = U_t f − λ ∫₀ᵗ U_{t−s}(u_s²) ds,   U_t g(x) = E g(ℰ, x + √(λψ) B_t),  ℰ ~ Exp(λ).
//! ```
//!
//! The age coordinate is averaged out against `Exp(λ)` once at `t = 0`;
//! afterwards everything lives on a uniform spatial grid. Time marching uses
//! the equivalent one-step form
//!
//! ```text
//! u_{k+1} = U_dt[u_k − λ(dt/2) N(u_k)] − λ(dt/2) N(u_{k+1})
//! ```
//!
//! (trapezoidal rule on each step), with `N(u) = u²` for the limit equation.

use thiserror::Error;

use crate::quadrature::{integrate, QuadratureError};
use crate::scalar::Real;

const MAX_SWEEPS: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LogLaplaceError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("kernel standard deviation {stddev} is below the grid spacing {spacing}")]
    GridTooCoarse { stddev: f64, spacing: f64 },
    #[error("implicit step does not contract (λ·dt·max u = {contraction})")]
    StepTooLarge { contraction: f64 },
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// Uniform spatial grid and time step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec<T> {
    x_lo: T,
    x_hi: T,
    nx: usize,
    dt: T,
    t_final: T,
}

impl<T: Real> GridSpec<T> {
    pub fn new(x_lo: T, x_hi: T, nx: usize, dt: T, t_final: T) -> Result<Self, LogLaplaceError> {
        let invalid = |m: String| Err(LogLaplaceError::InvalidGrid(m));
        if !(x_lo < x_hi) || !x_lo.is_finite() || !x_hi.is_finite() {
            return invalid(format!("need x_lo < x_hi, got [{:?}, {:?}]", x_lo, x_hi));
        }
        if nx < 16 {
            return invalid(format!("need nx ≥ 16, got {nx}"));
        }
        if !(dt > T::zero()) || !(t_final > T::zero()) {
            return invalid("dt and T must be positive".into());
        }
        let steps = (t_final / dt).round();
        let tol = T::lit(1e-12).max(T::epsilon() * T::lit(64.0)) * t_final.max(T::one());
        if (steps * dt - t_final).abs() > tol {
            return invalid(format!("dt = {:?} does not divide T = {:?}", dt, t_final));
        }
        Ok(GridSpec { x_lo, x_hi, nx, dt, t_final })
    }

    /// Domain `±(10·√(λψT) + radius)`; `radius` should cover the support of
    /// the test function and of the spatial intensity.
    pub fn centred(lambda: T, psi: T, t_final: T, radius: T, nx: usize, dt: T) -> Result<Self, LogLaplaceError> {
        let half = T::lit(10.0) * (lambda * psi * t_final).sqrt() + radius;
        Self::new(-half, half, nx, dt, t_final)
    }

    pub fn x_lo(&self) -> T {
        self.x_lo
    }

    pub fn x_hi(&self) -> T {
        self.x_hi
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn t_final(&self) -> T {
        self.t_final
    }

    pub fn spacing(&self) -> T {
        (self.x_hi - self.x_lo) / T::from_usize(self.nx - 1).expect("nx fits")
    }

    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round().to_usize().expect("positive step count")
    }

    pub fn x(&self, i: usize) -> T {
        self.x_lo + self.spacing() * T::from_usize(i).expect("index fits")
    }

    pub fn xs(&self) -> Vec<T> {
        (0..self.nx).map(|i| self.x(i)).collect()
    }

    /// Same domain with `dt/2` and `2·nx − 1` points (every old node kept).
    pub fn refined(&self) -> Self {
        GridSpec { nx: 2 * self.nx - 1, dt: self.dt / T::lit(2.0), ..*self }
    }
}

/// Trajectory of the solver at every time step.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSolution<T> {
    pub grid: GridSpec<T>,
    pub times: Vec<T>,
    pub values: Vec<Vec<T>>,
    pub lambda: T,
    pub psi: T,
}

impl<T: Real> GridSolution<T> {
    pub fn final_values(&self) -> &[T] {
        self.values.last().expect("trajectory includes t = 0")
    }

    /// Linear interpolation of `u_T`, constant beyond the grid.
    pub fn interpolate(&self, x: T) -> T {
        interpolate(&self.grid, self.final_values(), x)
    }

    /// `∫ u_T(x) ρ(x) dx` for a spatial density `ρ`.
    pub fn pair_final(&self, density: impl Fn(T) -> T) -> Result<T, LogLaplaceError> {
        pair(&self.grid, self.final_values(), density)
    }

    /// Largest value over the whole trajectory.
    pub fn max_value(&self) -> T {
        self.values.iter().flatten().fold(T::zero(), |m, v| m.max(*v))
    }

    pub fn min_value(&self) -> T {
        self.values.iter().flatten().fold(T::infinity(), |m, v| m.min(*v))
    }

    /// CSV rows `t,x,u` for every stored step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,u\n");
        let xs = self.grid.xs();
        for (t, row) in self.times.iter().zip(&self.values) {
            for (x, u) in xs.iter().zip(row) {
                out.push_str(&format!("{:?},{:?},{:?}\n", t.as_f64(), x.as_f64(), u.as_f64()));
            }
        }
        out
    }
}

fn interpolate<T: Real>(grid: &GridSpec<T>, g: &[T], x: T) -> T {
    if x <= grid.x_lo {
        return g[0];
    }
    if x >= grid.x_hi {
        return g[g.len() - 1];
    }
    let s = (x - grid.x_lo) / grid.spacing();
    let i = s.floor().to_usize().unwrap_or(0).min(g.len() - 2);
    let w = s - T::from_usize(i).expect("index fits");
    g[i] * (T::one() - w) + g[i + 1] * w
}

/// `∫ g ρ` with `g` linearly interpolated and held constant outside the grid.
pub fn pair<T: Real>(grid: &GridSpec<T>, g: &[T], density: impl Fn(T) -> T) -> Result<T, LogLaplaceError> {
    let xs = grid.xs();
    let inner = crate::quadrature::integrate_pieces(|x| interpolate(grid, g, x) * density(x), &xs, T::lit(1e-10), T::lit(1e-14))?;
    let far = T::lit(1e3) * (grid.x_hi - grid.x_lo);
    let left = integrate(&density, grid.x_lo - far, grid.x_lo, T::lit(1e-10), T::lit(1e-14))?;
    let right = integrate(&density, grid.x_hi, grid.x_hi + far, T::lit(1e-10), T::lit(1e-14))?;
    Ok(inner + g[0] * left + g[g.len() - 1] * right)
}

fn gaussian_weights<T: Real>(stddev: T, spacing: T) -> Vec<T> {
    let half = (T::lit(8.5) * stddev / spacing).ceil().to_usize().expect("finite width");
    let mut w: Vec<T> = (0..=2 * half)
        .map(|j| {
            let z = (T::from_usize(j).expect("fits") - T::from_usize(half).expect("fits")) * spacing / stddev;
            (-(z * z) / T::lit(2.0)).exp()
        })
        .collect();
    let total = w.iter().fold(T::zero(), |a, b| a + *b);
    w.iter_mut().for_each(|v| *v = *v / total);
    w
}

fn convolve<T: Real>(g: &[T], weights: &[T]) -> Vec<T> {
    let n = g.len() as isize;
    let half = (weights.len() / 2) as isize;
    (0..n)
        .map(|i| {
            weights.iter().enumerate().fold(T::zero(), |acc, (j, w)| {
                let k = (i + j as isize - half).clamp(0, n - 1);
                acc + *w * g[k as usize]
            })
        })
        .collect()
}

fn kernel<T: Real>(t: T, lambda: T, psi: T, grid: &GridSpec<T>) -> Result<Option<Vec<T>>, LogLaplaceError> {
    if t < T::zero() || lambda < T::zero() || psi < T::zero() {
        return Err(LogLaplaceError::InvalidParameter(format!("t, λ, ψ must be nonnegative (t={:?}, λ={:?}, ψ={:?})", t, lambda, psi)));
    }
    let stddev = (lambda * psi * t).sqrt();
    if stddev == T::zero() {
        return Ok(None);
    }
    let h = grid.spacing();
    if stddev < h {
        return Err(LogLaplaceError::GridTooCoarse { stddev: stddev.as_f64(), spacing: h.as_f64() });
    }
    Ok(Some(gaussian_weights(stddev, h)))
}

/// Heat flow with variance `λψt` applied to an age-free grid function.
pub fn semigroup_apply<T: Real>(g: &[T], t: T, lambda: T, psi: T, grid: &GridSpec<T>) -> Result<Vec<T>, LogLaplaceError> {
    if g.len() != grid.nx {
        return Err(LogLaplaceError::InvalidGrid(format!("vector has {} points, grid has {}", g.len(), grid.nx)));
    }
    Ok(match kernel(t, lambda, psi, grid)? {
        Some(w) => convolve(g, &w),
        None => g.to_vec(),
    })
}

/// `x ↦ E f(ℰ, x)` with `ℰ ~ Exp(λ)`, by the substitution `a = −ln(1−s)/λ`.
/// With `λ = 0` the age is taken to be 0.
pub fn age_average<T: Real>(f: impl Fn(T, T) -> T, lambda: T, grid: &GridSpec<T>) -> Result<Vec<T>, LogLaplaceError> {
    grid.xs()
        .into_iter()
        .map(|x| {
            if lambda == T::zero() {
                return Ok(f(T::zero(), x));
            }
            let v = integrate(|s: T| f(-(T::one() - s).ln() / lambda, x), T::zero(), T::one(), T::lit(1e-10), T::lit(1e-13))?;
            Ok(v)
        })
        .collect()
}

/// Solves the limit equation for a bounded nonnegative `f(age, x)`.
pub fn solve_u<T: Real>(f: impl Fn(T, T) -> T, lambda: T, psi: T, grid: GridSpec<T>) -> Result<GridSolution<T>, LogLaplaceError> {
    let u0 = age_average(f, lambda, &grid)?;
    solve_with(u0, |u| u * u, lambda, psi, grid)
}

/// One-step marching from an age-free initial vector with nonlinearity `N`.
pub fn solve_with<T: Real>(
    u0: Vec<T>,
    nonlinearity: impl Fn(T) -> T,
    lambda: T,
    psi: T,
    grid: GridSpec<T>,
) -> Result<GridSolution<T>, LogLaplaceError> {
    if u0.len() != grid.nx {
        return Err(LogLaplaceError::InvalidGrid(format!("initial vector has {} points, grid has {}", u0.len(), grid.nx)));
    }
    if u0.iter().any(|v| !(v.is_finite() && *v >= T::zero())) {
        return Err(LogLaplaceError::InvalidParameter("initial values must be finite and nonnegative".into()));
    }
    let weights = kernel(grid.dt, lambda, psi, &grid)?;
    let c = lambda * grid.dt / T::lit(2.0);
    let steps = grid.steps();
    let mut times = Vec::with_capacity(steps + 1);
    let mut values = Vec::with_capacity(steps + 1);
    times.push(T::zero());
    values.push(u0);
    for k in 1..=steps {
        let prev = values.last().expect("nonempty");
        let contraction = lambda * grid.dt * prev.iter().fold(T::zero(), |m, v| m.max(*v));
        if contraction >= T::one() {
            return Err(LogLaplaceError::StepTooLarge { contraction: contraction.as_f64() });
        }
        let half: Vec<T> = prev.iter().map(|u| *u - c * nonlinearity(*u)).collect();
        let b = match &weights {
            Some(w) => convolve(&half, w),
            None => half,
        };
        let next = implicit_step(&b, c, &nonlinearity)
            .ok_or(LogLaplaceError::StepTooLarge { contraction: contraction.as_f64() })?;
        times.push(grid.dt * T::from_usize(k).expect("fits"));
        values.push(next);
    }
    Ok(GridSolution { grid, times, values, lambda, psi })
}

/// Fixed point of `u = b − c·N(u)`, node by node.
fn implicit_step<T: Real>(b: &[T], c: T, nonlinearity: &impl Fn(T) -> T) -> Option<Vec<T>> {
    let tol = T::epsilon() * T::lit(64.0);
    b.iter()
        .map(|&bi| {
            let mut u = bi;
            for _ in 0..MAX_SWEEPS {
                let next = bi - c * nonlinearity(u);
                let done = (next - u).abs() <= tol * bi.abs().max(T::one());
                u = next;
                if done {
                    return Some(u.max(T::zero()));
                }
            }
            None
        })
        .collect()
}

/// `c/(1 + λct)`, the solution for constant `f ≡ c`.
pub fn constant_oracle<T: Real>(c: T, lambda: T, t: T) -> T {
    c / (T::one() + lambda * c * t)
}
