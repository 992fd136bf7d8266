//! Adaptive Gauss–Kronrod (7/15) quadrature.

use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuadratureError {
    #[error("integrand is not finite near x = {0}")]
    NonFinite(f64),
    #[error("no convergence after {intervals} subintervals (error estimate {error:e})")]
    NonConvergence { intervals: usize, error: f64 },
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];

// Gauss weights for XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_INTERVALS: usize = 4000;

#[derive(Debug, Clone, Copy)]
struct Piece<T> {
    lo: T,
    hi: T,
    value: T,
    error: T,
}

fn kronrod<T: Real, F: Fn(T) -> T>(f: &F, lo: T, hi: T) -> Result<Piece<T>, QuadratureError> {
    let half = (hi - lo) / T::lit(2.0);
    let mid = lo + half;
    let fc = f(mid);
    let mut kron = fc * T::lit(WGK[7]);
    let mut gauss = fc * T::lit(WG[3]);
    for (j, (&x, &w)) in XGK.iter().zip(WGK.iter()).take(7).enumerate() {
        let dx = half * T::lit(x);
        let pair = f(mid - dx) + f(mid + dx);
        kron = kron + pair * T::lit(w);
        if j % 2 == 1 {
            gauss = gauss + pair * T::lit(WG[j / 2]);
        }
    }
    let value = kron * half;
    let error = ((kron - gauss) * half).abs();
    if !value.is_finite() || !error.is_finite() {
        return Err(QuadratureError::NonFinite(mid.as_f64()));
    }
    Ok(Piece { lo, hi, value, error })
}

/// Integrates `f` over `[lo, hi]` until the summed error estimate drops
/// below `max(abs_tol, rel_tol * |integral|)`.
pub fn integrate<T, F>(f: F, lo: T, hi: T, rel_tol: T, abs_tol: T) -> Result<T, QuadratureError>
where
    T: Real,
    F: Fn(T) -> T,
{
    if hi == lo {
        return Ok(T::zero());
    }
    if hi < lo {
        return integrate(f, hi, lo, rel_tol, abs_tol).map(|v| -v);
    }
    let mut pieces = vec![kronrod(&f, lo, hi)?];
    loop {
        let total = pieces.iter().fold(T::zero(), |acc, p| acc + p.value);
        let err = pieces.iter().fold(T::zero(), |acc, p| acc + p.error);
        if err <= abs_tol.max(rel_tol * total.abs()) {
            return Ok(total);
        }
        if pieces.len() >= MAX_INTERVALS {
            return Err(QuadratureError::NonConvergence { intervals: pieces.len(), error: err.as_f64() });
        }
        let worst = pieces
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.error.partial_cmp(&b.1.error).expect("finite errors"))
            .map(|(i, _)| i)
            .expect("non-empty");
        let p = pieces.swap_remove(worst);
        let mid = p.lo + (p.hi - p.lo) / T::lit(2.0);
        if mid <= p.lo || mid >= p.hi {
            // Interval cannot be split further at this precision.
            return Err(QuadratureError::NonConvergence { intervals: pieces.len() + 1, error: err.as_f64() });
        }
        pieces.push(kronrod(&f, p.lo, mid)?);
        pieces.push(kronrod(&f, mid, p.hi)?);
    }
}

/// Sum of integrals over consecutive intervals `[points[i], points[i+1]]`,
/// useful when the integrand has kinks at known locations.
pub fn integrate_pieces<T, F>(f: F, points: &[T], rel_tol: T, abs_tol: T) -> Result<T, QuadratureError>
where
    T: Real,
    F: Fn(T) -> T,
{
    let mut total = T::zero();
    for w in points.windows(2) {
        total = total + integrate(&f, w[0], w[1], rel_tol, abs_tol)?;
    }
    Ok(total)
}
