//! Vector-valued interpolating cubic splines on arbitrary knots.
//!
//! Two families are provided: monotone cubic Hermite (Fritsch–Carlson
//! tangents) and natural cubic. Both produce a [`PiecewiseCubic`] whose
//! interval `i` and dimension `j` hold the local polynomial
//! `a·s³ + b·s² + c·s + d` with `s = t - t_i`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::points::Points;

/// Minimum separation between consecutive knot times.
pub const MIN_KNOT_GAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplineFamily {
    #[default]
    MonotoneHermite,
    NaturalCubic,
}

impl SplineFamily {
    pub fn fit(self, knots: Knots) -> Result<PiecewiseCubic> {
        match self {
            SplineFamily::MonotoneHermite => fit_monotone_hermite(knots),
            SplineFamily::NaturalCubic => fit_natural_cubic(knots),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SplineFamily::MonotoneHermite => "monotone-hermite",
            SplineFamily::NaturalCubic => "natural-cubic",
        }
    }
}

impl std::str::FromStr for SplineFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "monotone-hermite" | "hermite" | "pchip" => Ok(SplineFamily::MonotoneHermite),
            "natural-cubic" | "natural" => Ok(SplineFamily::NaturalCubic),
            other => Err(invalid(format!(
                "unknown spline family '{other}' (expected monotone-hermite or natural-cubic)"
            ))),
        }
    }
}

/// Control points `(t_i, x_i)`: strictly increasing times and one row of
/// values per time.
#[derive(Debug, Clone, PartialEq)]
pub struct Knots {
    times: Vec<f64>,
    values: Points,
}

impl Knots {
    pub fn new(times: Vec<f64>, values: Points) -> Result<Self> {
        if times.len() < 2 {
            return Err(invalid(format!(
                "a spline needs at least 2 knots, got {}",
                times.len()
            )));
        }
        if values.rows() != times.len() {
            return Err(invalid(format!(
                "{} knot times but {} value rows",
                times.len(),
                values.rows()
            )));
        }
        if values.dim() == 0 {
            return Err(invalid("knot values have zero dimensions"));
        }
        if times.iter().any(|t| !t.is_finite()) || !values.all_finite() {
            return Err(invalid("knot times and values must be finite"));
        }
        for (i, w) in times.windows(2).enumerate() {
            if w[1] - w[0] < MIN_KNOT_GAP {
                return Err(invalid(format!(
                    "knot times must be strictly increasing (t[{}] = {}, t[{}] = {})",
                    i,
                    w[0],
                    i + 1,
                    w[1]
                )));
            }
        }
        Ok(Self { times, values })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &Points {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.dim()
    }

    pub fn intervals(&self) -> usize {
        self.times.len() - 1
    }
}

/// Local cubic coefficients `(a, b, c, d)`.
pub type Cubic = [f64; 4];

/// A fitted spline. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseCubic {
    knots: Knots,
    // indexed by interval * dim + dimension
    coeffs: Vec<Cubic>,
}

impl PiecewiseCubic {
    pub fn knots(&self) -> &Knots {
        &self.knots
    }

    pub fn dim(&self) -> usize {
        self.knots.dim()
    }

    pub fn domain(&self) -> (f64, f64) {
        let t = &self.knots.times;
        (t[0], t[t.len() - 1])
    }

    /// Coefficients of interval `i` for every dimension.
    pub fn interval_coeffs(&self, i: usize) -> &[Cubic] {
        let d = self.dim();
        &self.coeffs[i * d..(i + 1) * d]
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let (lo, hi) = self.domain();
        if !(t >= lo && t <= hi) {
            return Err(Error::OutOfRange { t, lo, hi });
        }
        let times = &self.knots.times;
        // last knot index with times[i] <= t, clamped to the final interval
        let i = times.partition_point(|&k| k <= t).saturating_sub(1);
        let i = i.min(times.len() - 2);
        Ok((i, t - times[i]))
    }

    /// Writes `S(t)` into `out` (length `dim`).
    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let (i, s) = self.locate(t)?;
        for (o, &[a, b, c, d]) in out.iter_mut().zip(self.interval_coeffs(i)) {
            *o = ((a * s + b) * s + c) * s + d;
        }
        Ok(())
    }

    /// Writes `dS/dt` into `out` (length `dim`).
    pub fn eval_derivative_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let (i, s) = self.locate(t)?;
        for (o, &[a, b, c, _]) in out.iter_mut().zip(self.interval_coeffs(i)) {
            *o = (3.0 * a * s + 2.0 * b) * s + c;
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }

    pub fn eval_derivative(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.eval_derivative_into(t, &mut out)?;
        Ok(out)
    }
}

fn secants(times: &[f64], values: &Points, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let h: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let delta = h
        .iter()
        .enumerate()
        .map(|(i, hi)| (values.row(i + 1)[dim] - values.row(i)[dim]) / hi)
        .collect();
    (h, delta)
}

fn hermite_cubic(x0: f64, x1: f64, m0: f64, m1: f64, h: f64) -> Cubic {
    let delta = (x1 - x0) / h;
    [
        (m0 + m1 - 2.0 * delta) / (h * h),
        (3.0 * delta - 2.0 * m0 - m1) / h,
        m0,
        x0,
    ]
}

/// Endpoint tangent: the one-sided secant, zeroed or capped at `3·δ` so the
/// end interval stays monotone.
fn clamp_end_tangent(m: f64, delta: f64) -> f64 {
    if delta == 0.0 || m.signum() != delta.signum() {
        0.0
    } else if m.abs() > 3.0 * delta.abs() {
        3.0 * delta
    } else {
        m
    }
}

/// Monotone cubic Hermite interpolation with Fritsch–Carlson tangents.
///
/// Interior tangents are zero where neighbouring secants change sign (or
/// either vanishes) and otherwise the weighted harmonic mean with weights
/// `2h_k + h_{k-1}` and `h_k + 2h_{k-1}`. Each dimension is monotone on
/// every interval.
pub fn fit_monotone_hermite(knots: Knots) -> Result<PiecewiseCubic> {
    let n = knots.intervals();
    let dim = knots.dim();
    let mut coeffs = vec![[0.0; 4]; n * dim];
    let mut m = vec![0.0; n + 1];
    for j in 0..dim {
        let (h, delta) = secants(&knots.times, &knots.values, j);
        for k in 1..n {
            let (dl, dr) = (delta[k - 1], delta[k]);
            m[k] = if dl == 0.0 || dr == 0.0 || dl.signum() != dr.signum() {
                0.0
            } else {
                let w1 = 2.0 * h[k] + h[k - 1];
                let w2 = h[k] + 2.0 * h[k - 1];
                (w1 + w2) / (w1 / dl + w2 / dr)
            };
        }
        m[0] = clamp_end_tangent(delta[0], delta[0]);
        m[n] = clamp_end_tangent(delta[n - 1], delta[n - 1]);
        for i in 0..n {
            let x0 = knots.values.row(i)[j];
            let x1 = knots.values.row(i + 1)[j];
            coeffs[i * dim + j] = hermite_cubic(x0, x1, m[i], m[i + 1], h[i]);
        }
    }
    Ok(PiecewiseCubic { knots, coeffs })
}

/// Natural cubic spline (`S'' = 0` at both ends), C² at interior knots.
///
/// The tridiagonal system for the knot second derivatives is shared by all
/// dimensions; it is factored once and each dimension costs one forward and
/// one backward sweep.
pub fn fit_natural_cubic(knots: Knots) -> Result<PiecewiseCubic> {
    let n = knots.intervals();
    let dim = knots.dim();
    let times = &knots.times;
    let h: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();

    // Unknowns are M_1..M_{n-1}; row r corresponds to knot r + 1.
    let interior = n - 1;
    let mut c_prime = vec![0.0; interior];
    let mut denom = vec![0.0; interior];
    for r in 0..interior {
        let diag = 2.0 * (h[r] + h[r + 1]);
        let sub = h[r];
        let d = if r == 0 {
            diag
        } else {
            diag - sub * c_prime[r - 1]
        };
        denom[r] = d;
        c_prime[r] = h[r + 1] / d;
    }

    let mut coeffs = vec![[0.0; 4]; n * dim];
    let mut second = vec![0.0; n + 1];
    let mut rhs = vec![0.0; interior];
    for j in 0..dim {
        let (_, delta) = secants(times, &knots.values, j);
        for r in 0..interior {
            let b = 6.0 * (delta[r + 1] - delta[r]);
            rhs[r] = if r == 0 {
                b / denom[r]
            } else {
                (b - h[r] * rhs[r - 1]) / denom[r]
            };
        }
        second[0] = 0.0;
        second[n] = 0.0;
        for r in (0..interior).rev() {
            let next = if r + 1 < interior { second[r + 2] } else { 0.0 };
            second[r + 1] = rhs[r] - c_prime[r] * next;
        }
        for i in 0..n {
            let (mi, mi1) = (second[i], second[i + 1]);
            coeffs[i * dim + j] = [
                (mi1 - mi) / (6.0 * h[i]),
                mi / 2.0,
                delta[i] - h[i] * (2.0 * mi + mi1) / 6.0,
                knots.values.row(i)[j],
            ];
        }
    }
    Ok(PiecewiseCubic { knots, coeffs })
}
