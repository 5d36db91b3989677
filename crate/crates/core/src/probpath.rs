//! Gaussian conditional probability paths `N(μ_t, σ_t² I)` over a window,
//! with closed-form flow and score regression targets.
//!
//! `μ_t` is a spline through one aligned tuple; `σ_t` is a Brownian-bridge
//! profile with constant diffusion `g(t) = σ`, either over global time
//! (`σ√(t(1−t))`) or reparameterized over the window `[a, b]`
//! (`σ√(r(1−r))`, `r = (t−a)/(b−a)`).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::spline::PiecewiseCubic;

/// Default lower bound applied to `σ_t`.
pub const DEFAULT_SIGMA_MIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    Global,
    #[default]
    WindowLocal,
}

impl std::str::FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(ScheduleMode::Global),
            "window-local" | "window_local" | "local" => Ok(ScheduleMode::WindowLocal),
            other => Err(invalid(format!(
                "unknown schedule mode '{other}' (expected global or window-local)"
            ))),
        }
    }
}

/// Brownian-bridge standard deviation schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaSchedule {
    mode: ScheduleMode,
    sigma: f64,
    window: (f64, f64),
    floor: Option<f64>,
}

impl SigmaSchedule {
    pub fn global(sigma: f64) -> Result<Self> {
        Self::new(
            ScheduleMode::Global,
            sigma,
            (0.0, 1.0),
            Some(DEFAULT_SIGMA_MIN),
        )
    }

    pub fn window_local(sigma: f64, a: f64, b: f64) -> Result<Self> {
        Self::new(
            ScheduleMode::WindowLocal,
            sigma,
            (a, b),
            Some(DEFAULT_SIGMA_MIN),
        )
    }

    /// `window` is only consulted in window-local mode, but it is always the
    /// domain on which `t` is accepted for that mode. `floor = None`
    /// disables the lower bound on `σ_t`.
    pub fn new(
        mode: ScheduleMode,
        sigma: f64,
        window: (f64, f64),
        floor: Option<f64>,
    ) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(invalid(format!("sigma must be positive, got {sigma}")));
        }
        if !(window.0 < window.1) {
            return Err(invalid(format!(
                "schedule window must satisfy a < b, got ({}, {})",
                window.0, window.1
            )));
        }
        if let Some(f) = floor {
            if !(f > 0.0) || f >= sigma {
                return Err(invalid(format!(
                    "sigma floor must be in (0, sigma), got {f}"
                )));
            }
        }
        Ok(Self {
            mode,
            sigma,
            window,
            floor,
        })
    }

    pub fn with_floor(mut self, floor: Option<f64>) -> Result<Self> {
        self = Self::new(self.mode, self.sigma, self.window, floor)?;
        Ok(self)
    }

    pub fn mode(&self) -> ScheduleMode {
        self.mode
    }

    /// Diffusion scale `g(t) = σ`.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn window(&self) -> (f64, f64) {
        self.window
    }

    pub fn floor(&self) -> Option<f64> {
        self.floor
    }

    fn domain(&self) -> (f64, f64) {
        match self.mode {
            ScheduleMode::Global => (0.0, 1.0),
            ScheduleMode::WindowLocal => self.window,
        }
    }

    /// `(σ_t, σ_t')`. When the floor binds, `σ_t'` is reported as 0.
    pub fn sigma_at(&self, t: f64) -> Result<(f64, f64)> {
        let (lo, hi) = self.domain();
        if !(t >= lo && t <= hi) {
            return Err(Error::OutOfRange { t, lo, hi });
        }
        let (r, dr_dt) = match self.mode {
            ScheduleMode::Global => (t, 1.0),
            ScheduleMode::WindowLocal => ((t - lo) / (hi - lo), 1.0 / (hi - lo)),
        };
        let q = (r * (1.0 - r)).max(0.0);
        let s = self.sigma * q.sqrt();
        if let Some(f) = self.floor {
            if s <= f {
                return Ok((f, 0.0));
            }
        }
        if q == 0.0 {
            // derivative is unbounded at the pinned ends
            return Ok((0.0, 0.0));
        }
        let ds = self.sigma * (1.0 - 2.0 * r) / (2.0 * q.sqrt()) * dr_dt;
        Ok((s, ds))
    }

    /// `λ(t) = 2σ_t / g²`.
    pub fn lambda_weight(&self, t: f64) -> Result<f64> {
        let (s, _) = self.sigma_at(t)?;
        Ok(2.0 * s / (self.sigma * self.sigma))
    }
}

/// Conditional Gaussian path over one window.
#[derive(Debug, Clone)]
pub struct GaussianPath<'a> {
    mean: &'a PiecewiseCubic,
    schedule: SigmaSchedule,
}

/// Everything the regression targets need at one `t`.
#[derive(Debug, Clone, Copy)]
struct PathPoint {
    sigma_t: f64,
    dsigma_t: f64,
}

impl<'a> GaussianPath<'a> {
    pub fn new(mean: &'a PiecewiseCubic, schedule: SigmaSchedule) -> Result<Self> {
        if schedule.mode() == ScheduleMode::WindowLocal {
            let (lo, hi) = mean.domain();
            let (a, b) = schedule.window();
            if a < lo || b > hi {
                return Err(invalid(format!(
                    "mean spline on [{lo}, {hi}] does not cover schedule window [{a}, {b}]"
                )));
            }
        }
        Ok(Self { mean, schedule })
    }

    pub fn mean(&self) -> &PiecewiseCubic {
        self.mean
    }

    pub fn schedule(&self) -> &SigmaSchedule {
        &self.schedule
    }

    fn point(&self, t: f64) -> Result<PathPoint> {
        let (sigma_t, dsigma_t) = self.schedule.sigma_at(t)?;
        Ok(PathPoint { sigma_t, dsigma_t })
    }

    fn nonsingular(&self, t: f64) -> Result<PathPoint> {
        let p = self.point(t)?;
        if p.sigma_t <= 0.0 {
            return Err(Error::SingularVariance { t });
        }
        Ok(p)
    }

    /// `x = μ_t + σ_t ε`.
    pub fn sample_x_into(&self, t: f64, eps: &[f64], out: &mut [f64]) -> Result<()> {
        if eps.iter().any(|e| !e.is_finite()) {
            return Err(invalid("noise vector must be finite"));
        }
        let p = self.point(t)?;
        self.mean.eval_into(t, out)?;
        for (o, e) in out.iter_mut().zip(eps) {
            *o += p.sigma_t * e;
        }
        Ok(())
    }

    pub fn sample_x(&self, t: f64, eps: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.mean.dim()];
        self.sample_x_into(t, eps, &mut out)?;
        Ok(out)
    }

    /// `u_t°(x|z) = (σ_t'/σ_t)(x − μ_t) + μ_t'`.
    pub fn flow_target_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let p = self.nonsingular(t)?;
        let ratio = p.dsigma_t / p.sigma_t;
        let mut mu = vec![0.0; x.len()];
        self.mean.eval_into(t, &mut mu)?;
        self.mean.eval_derivative_into(t, out)?;
        for ((o, xi), m) in out.iter_mut().zip(x).zip(&mu) {
            *o += ratio * (xi - m);
        }
        Ok(())
    }

    pub fn flow_target(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.mean.dim()];
        self.flow_target_into(t, x, &mut out)?;
        Ok(out)
    }

    /// `∇ log p_t(x|z) = (μ_t − x) / σ_t²`.
    pub fn score_target(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let p = self.nonsingular(t)?;
        let mut mu = self.mean.eval(t)?;
        let inv = 1.0 / (p.sigma_t * p.sigma_t);
        for (m, xi) in mu.iter_mut().zip(x) {
            *m = (*m - xi) * inv;
        }
        Ok(mu)
    }

    pub fn lambda_weight(&self, t: f64) -> Result<f64> {
        self.schedule.lambda_weight(t)
    }
}
