//! Trajectory generation from the learned drift.
//!
//! The SDE `dX = u(X, t) dt + σ dW` is integrated with fixed-step
//! Euler–Maruyama; the flow alone can be integrated deterministically with
//! classical RK4. Particles are independent and run in parallel, each with
//! its own ChaCha stream derived from the master seed, so results do not
//! depend on the thread count.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::nn::{Mlp, Scratch};
use crate::points::Points;

/// A time-dependent vector field `f(x, t)`.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn eval_into(&self, x: &[f64], t: f64, out: &mut [f64]);
}

impl VectorField for Mlp {
    fn dim(&self) -> usize {
        Mlp::dim(self)
    }

    fn eval_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.forward_into(x, t, &mut Scratch::default(), out);
    }
}

/// Adapts a closure into a [`VectorField`].
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], f64, &mut [f64]) + Sync> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64], f64, &mut [f64]) + Sync> VectorField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (self.f)(x, t, out)
    }
}

/// Learned SDE: drift from the flow and score networks, constant diffusion.
pub struct SdeSpec<'a> {
    pub flow: &'a dyn VectorField,
    pub score: Option<&'a dyn VectorField>,
    pub sigma: f64,
    /// The score network outputs `(σ²/2)∇log p` directly.
    pub score_is_scaled: bool,
}

impl<'a> SdeSpec<'a> {
    pub fn new(
        flow: &'a dyn VectorField,
        score: Option<&'a dyn VectorField>,
        sigma: f64,
    ) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(invalid(format!(
                "diffusion must be nonnegative, got {sigma}"
            )));
        }
        if let Some(s) = score {
            if s.dim() != flow.dim() {
                return Err(invalid("flow and score networks disagree on dimension"));
            }
        }
        Ok(Self {
            flow,
            score,
            sigma,
            score_is_scaled: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.flow.dim()
    }

    /// `u = v + ŝ` (scaled) or `u = v + (σ²/2) s` (unscaled).
    pub fn drift_into(&self, x: &[f64], t: f64, out: &mut [f64], tmp: &mut [f64]) {
        self.flow.eval_into(x, t, out);
        if let Some(s) = self.score {
            s.eval_into(x, t, tmp);
            let w = if self.score_is_scaled {
                1.0
            } else {
                0.5 * self.sigma * self.sigma
            };
            for (o, v) in out.iter_mut().zip(tmp.iter()) {
                *o += w * v;
            }
        }
    }

    pub fn drift(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        let mut tmp = vec![0.0; self.dim()];
        self.drift_into(x, t, &mut out, &mut tmp);
        out
    }
}

/// States of many particles on a shared time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectories {
    times: Vec<f64>,
    dim: usize,
    particles: usize,
    // particle-major: [particle][step][dim]
    states: Vec<f64>,
}

impl Trajectories {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn state(&self, particle: usize, step: usize) -> &[f64] {
        let off = (particle * self.times.len() + step) * self.dim;
        &self.states[off..off + self.dim]
    }

    /// Every particle's state at grid step `step`.
    pub fn at_step(&self, step: usize) -> Points {
        let mut data = Vec::with_capacity(self.particles * self.dim);
        for p in 0..self.particles {
            data.extend_from_slice(self.state(p, step));
        }
        Points::new(data, self.particles, self.dim).expect("sized buffer")
    }

    pub fn final_states(&self) -> Points {
        self.at_step(self.times.len() - 1)
    }

    /// Grid step closest to `t`, or `None` when `t` lies outside the grid.
    pub fn nearest_step(&self, t: f64) -> Option<usize> {
        let (lo, hi) = (self.times[0], self.times[self.times.len() - 1]);
        if !(t >= lo - 1e-12 && t <= hi + 1e-12) {
            return None;
        }
        self.times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(i, _)| i)
    }

    /// Writes `particle_id,t,x_0,…,x_{d-1}`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["particle_id".to_string(), "t".to_string()];
        header.extend((0..self.dim).map(|j| format!("x_{j}")));
        out.write_record(&header)
            .map_err(|e| invalid(e.to_string()))?;
        let mut rec = Vec::with_capacity(self.dim + 2);
        for p in 0..self.particles {
            for (n, t) in self.times.iter().enumerate() {
                rec.clear();
                rec.push(p.to_string());
                rec.push(t.to_string());
                rec.extend(self.state(p, n).iter().map(|v| v.to_string()));
                out.write_record(&rec).map_err(|e| invalid(e.to_string()))?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the format written by [`Trajectories::write_csv`]: rows grouped
    /// by particle id `0, 1, …`, every particle on the same time grid.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let width = rdr
            .headers()
            .map_err(|e| Error::Parse {
                line: 1,
                msg: e.to_string(),
            })?
            .len();
        if width < 3 {
            return Err(Error::Parse {
                line: 1,
                msg: "expected header particle_id,t,x_0,...".into(),
            });
        }
        let dim = width - 2;
        let mut times: Vec<f64> = Vec::new();
        let mut states = Vec::new();
        // (particle id, rows seen for it)
        let mut current: Option<(usize, usize)> = None;
        let mut last_line = 1;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            last_line = line;
            let perr = |msg: String| Error::Parse { line, msg };
            let pid: usize = rec[0]
                .parse()
                .map_err(|_| perr(format!("bad particle id '{}'", &rec[0])))?;
            let t: f64 = rec[1]
                .parse()
                .map_err(|_| perr(format!("bad time '{}'", &rec[1])))?;
            let row = match current {
                None if pid == 0 => 0,
                Some((p, n)) if p == pid => n,
                Some((p, n)) if pid == p + 1 => {
                    if n != times.len() {
                        return Err(perr(format!(
                            "particle {p} has {n} steps, expected {}",
                            times.len()
                        )));
                    }
                    0
                }
                _ => return Err(perr(format!("unexpected particle id {pid}"))),
            };
            if pid == 0 {
                times.push(t);
            } else if row >= times.len() || times[row] != t {
                return Err(perr("particles must share one time grid".into()));
            }
            current = Some((pid, row + 1));
            for f in rec.iter().skip(2) {
                states.push(
                    f.parse::<f64>()
                        .map_err(|_| perr(format!("'{f}' is not a number")))?,
                );
            }
        }
        let Some((last, n)) = current else {
            return Err(Error::Parse {
                line: 1,
                msg: "no trajectory rows".into(),
            });
        };
        if n != times.len() {
            return Err(Error::Parse {
                line: last_line,
                msg: format!("particle {last} is truncated"),
            });
        }
        Ok(Self {
            times,
            dim,
            particles: last + 1,
            states,
        })
    }
}

/// `steps_per_unit · (t1 − t0)` uniform steps from `t0` to `t1` inclusive.
pub fn uniform_grid(t0: f64, t1: f64, steps_per_unit: usize) -> Result<Vec<f64>> {
    if !(t1 > t0) || steps_per_unit == 0 {
        return Err(invalid("grid needs t1 > t0 and a positive step count"));
    }
    let n = ((t1 - t0) * steps_per_unit as f64).round().max(1.0) as usize;
    Ok((0..=n)
        .map(|i| {
            if i == n {
                t1
            } else {
                t0 + (t1 - t0) * i as f64 / n as f64
            }
        })
        .collect())
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(invalid("integration grid needs at least two times"));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) || grid.iter().any(|t| !t.is_finite()) {
        return Err(invalid("integration grid must be strictly increasing"));
    }
    Ok(())
}

fn check_start(x0: &Points, dim: usize) -> Result<()> {
    if x0.dim() != dim {
        return Err(invalid(format!(
            "initial conditions have {} dimensions, field has {dim}",
            x0.dim()
        )));
    }
    if !x0.all_finite() {
        return Err(invalid("initial conditions must be finite"));
    }
    Ok(())
}

/// Runs `step` for every particle in parallel; `step(p, out)` fills the
/// particle's `[steps × dim]` block and returns the first diverged step.
fn run_particles(
    x0: &Points,
    grid: &[f64],
    step: impl Fn(usize, &mut [f64]) -> std::result::Result<(), usize> + Sync,
) -> Result<Trajectories> {
    let dim = x0.dim();
    let block = grid.len() * dim;
    let mut states = vec![0.0; x0.rows() * block];
    let failures: Vec<(usize, usize)> = states
        .par_chunks_mut(block.max(1))
        .enumerate()
        .filter_map(|(p, out)| {
            out[..dim].copy_from_slice(x0.row(p));
            step(p, out).err().map(|s| (p, s))
        })
        .collect();
    if let Some(&(_, s)) = failures.iter().min() {
        return Err(Error::IntegrationDiverged { step: s });
    }
    Ok(Trajectories {
        times: grid.to_vec(),
        dim,
        particles: x0.rows(),
        states,
    })
}

/// Euler–Maruyama: `x_{n+1} = x_n + u(x_n, t_n)Δt + σ√Δt ξ_n`.
pub fn integrate_sde(
    spec: &SdeSpec<'_>,
    x0: &Points,
    grid: &[f64],
    seed: u64,
) -> Result<Trajectories> {
    check_grid(grid)?;
    check_start(x0, spec.dim())?;
    let dim = spec.dim();
    run_particles(x0, grid, |p, out| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        let mut drift = vec![0.0; dim];
        let mut tmp = vec![0.0; dim];
        for n in 0..grid.len() - 1 {
            let dt = grid[n + 1] - grid[n];
            let noise = spec.sigma * dt.sqrt();
            let (cur, next) = out[n * dim..(n + 2) * dim].split_at_mut(dim);
            spec.drift_into(cur, grid[n], &mut drift, &mut tmp);
            for j in 0..dim {
                let xi: f64 = StandardNormal.sample(&mut rng);
                next[j] = cur[j] + drift[j] * dt + noise * xi;
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(n + 1);
            }
        }
        Ok(())
    })
}

/// Explicit Euler on `dx/dt = f(x, t)`.
pub fn integrate_ode_euler(
    field: &dyn VectorField,
    x0: &Points,
    grid: &[f64],
) -> Result<Trajectories> {
    check_grid(grid)?;
    check_start(x0, field.dim())?;
    let dim = field.dim();
    run_particles(x0, grid, |_, out| {
        let mut k = vec![0.0; dim];
        for n in 0..grid.len() - 1 {
            let dt = grid[n + 1] - grid[n];
            let (cur, next) = out[n * dim..(n + 2) * dim].split_at_mut(dim);
            field.eval_into(cur, grid[n], &mut k);
            for j in 0..dim {
                next[j] = cur[j] + dt * k[j];
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(n + 1);
            }
        }
        Ok(())
    })
}

/// Classical fourth-order Runge–Kutta on `dx/dt = f(x, t)`.
pub fn integrate_ode(field: &dyn VectorField, x0: &Points, grid: &[f64]) -> Result<Trajectories> {
    check_grid(grid)?;
    check_start(x0, field.dim())?;
    let dim = field.dim();
    run_particles(x0, grid, |_, out| {
        let mut k1 = vec![0.0; dim];
        let mut k2 = vec![0.0; dim];
        let mut k3 = vec![0.0; dim];
        let mut k4 = vec![0.0; dim];
        let mut y = vec![0.0; dim];
        for n in 0..grid.len() - 1 {
            let t = grid[n];
            let h = grid[n + 1] - t;
            let (cur, next) = out[n * dim..(n + 2) * dim].split_at_mut(dim);
            field.eval_into(cur, t, &mut k1);
            for j in 0..dim {
                y[j] = cur[j] + 0.5 * h * k1[j];
            }
            field.eval_into(&y, t + 0.5 * h, &mut k2);
            for j in 0..dim {
                y[j] = cur[j] + 0.5 * h * k2[j];
            }
            field.eval_into(&y, t + 0.5 * h, &mut k3);
            for j in 0..dim {
                y[j] = cur[j] + h * k3[j];
            }
            field.eval_into(&y, t + h, &mut k4);
            for j in 0..dim {
                next[j] = cur[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(n + 1);
            }
        }
        Ok(())
    })
}
