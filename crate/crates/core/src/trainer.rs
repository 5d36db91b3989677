//! Rolling-window score and flow matching over consecutive marginals.
//!
//! Each gradient step takes one window of `k + 1` marginals, aligns fresh
//! mini-batches with the Markov chain of OT plans, draws a spline mean
//! through every aligned tuple, samples times stratified by sub-interval and
//! regresses the flow network onto `(σ_t'/σ_t)(x − μ_t) + μ_t'` and the
//! score network onto the λ-scaled score (loss `‖λ(t)ŝ + ε‖²`).

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::MarginalDataset;
use crate::error::{invalid, Error, Result};
use crate::nn::{AdamW, Mlp, DEFAULT_HIDDEN};
use crate::ot::{sample_aligned_window, AlignedWindow, SampleBatch};
use crate::points::Points;
use crate::probpath::{GaussianPath, ScheduleMode, SigmaSchedule, DEFAULT_SIGMA_MIN};
use crate::spline::{Knots, SplineFamily};

/// Fraction of each sub-interval excluded at both ends when sampling times.
pub const TIME_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Window size: each mini-flow spans `k + 1` marginals.
    pub k: usize,
    /// Constant diffusion scale `g(t) = σ`.
    pub sigma: f64,
    /// Tuples per window step; must be divisible by `k`.
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleMode,
    pub spline: SplineFamily,
    /// Lower bound on `σ_t`; `None` disables it.
    pub sigma_min: Option<f64>,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub hold_out: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 2,
            sigma: 0.15,
            batch_size: 120,
            steps: 2500,
            lr: 1e-4,
            weight_decay: 1e-2,
            schedule: ScheduleMode::WindowLocal,
            spline: SplineFamily::MonotoneHermite,
            sigma_min: Some(DEFAULT_SIGMA_MIN),
            hidden: DEFAULT_HIDDEN.to_vec(),
            seed: 0,
            hold_out: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(invalid("window size k must be at least 1"));
        }
        if self.batch_size == 0 || self.batch_size % self.k != 0 {
            return Err(invalid(format!(
                "batch size {} must be a positive multiple of k = {}",
                self.batch_size, self.k
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(invalid("sigma must be positive"));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(invalid(
                "learning rate must be positive and weight decay nonnegative",
            ));
        }
        Ok(())
    }

    /// Schedule for the window `[a, b]`.
    pub fn schedule_for(&self, a: f64, b: f64) -> Result<SigmaSchedule> {
        SigmaSchedule::new(self.schedule, self.sigma, (a, b), self.sigma_min)
    }
}

/// Start indices `i = 0..=M−k` of the rolling windows over `n_times` points.
pub fn window_starts(n_times: usize, k: usize) -> Result<std::ops::RangeInclusive<usize>> {
    let m = n_times.saturating_sub(1);
    if k == 0 || k > m {
        return Err(invalid(format!(
            "window size k = {k} must be in 1..={m} for {n_times} marginals"
        )));
    }
    Ok(0..=m - k)
}

/// `b / k` uniform draws on each open sub-interval of the window, in
/// interval order. Draws stay `TIME_MARGIN · h` away from every knot.
pub fn stratified_times<R: Rng + ?Sized>(
    window: &[f64],
    b: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if window.len() < 2 {
        return Err(invalid("a window needs at least two times"));
    }
    let k = window.len() - 1;
    if b % k != 0 {
        return Err(invalid(format!(
            "batch size {b} is not divisible by k = {k}"
        )));
    }
    let per = b / k;
    let mut out = Vec::with_capacity(b);
    for w in window.windows(2) {
        let h = w[1] - w[0];
        if !(h > 0.0) {
            return Err(invalid("window times must be strictly increasing"));
        }
        let lo = w[0] + TIME_MARGIN * h;
        let width = h * (1.0 - 2.0 * TIME_MARGIN);
        for _ in 0..per {
            let u: f64 = rng.random();
            out.push(lo + u * width);
        }
    }
    Ok(out)
}

/// Network inputs and regression targets for one window step.
#[derive(Debug, Clone)]
pub struct WindowTargets {
    pub xs: Points,
    pub ts: Vec<f64>,
    pub flow: Points,
    pub eps: Points,
    pub lambda: Vec<f64>,
}

/// Builds `x = μ_t + σ_t ε`, the flow target and `λ(t)` for every aligned
/// tuple `j` at time `ts[j]` with noise `eps[j]`.
pub fn window_targets(
    window: &AlignedWindow,
    ts: &[f64],
    eps: &Points,
    cfg: &TrainConfig,
) -> Result<WindowTargets> {
    let b = window.len();
    let d = window.dim();
    if ts.len() != b || eps.rows() != b || eps.dim() != d {
        return Err(invalid(format!(
            "window has {b} tuples but {} times and {} noise rows",
            ts.len(),
            eps.rows()
        )));
    }
    let (a, end) = (window.times[0], window.times[window.times.len() - 1]);
    let schedule = cfg.schedule_for(a, end)?;
    let mut xs = Points::zeros(b, d);
    let mut flow = Points::zeros(b, d);
    let mut lambda = Vec::with_capacity(b);
    let mut tuple = Vec::with_capacity(window.times.len() * d);
    for j in 0..b {
        window.tuple_into(j, &mut tuple);
        let knots = Knots::new(
            window.times.clone(),
            Points::new(tuple.clone(), window.times.len(), d)?,
        )?;
        let mean = cfg.spline.fit(knots)?;
        let path = GaussianPath::new(&mean, schedule)?;
        let t = ts[j];
        path.sample_x_into(t, eps.row(j), xs.row_mut(j))?;
        path.flow_target_into(t, xs.row(j), flow.row_mut(j))?;
        lambda.push(path.lambda_weight(t)?);
    }
    Ok(WindowTargets {
        xs,
        ts: ts.to_vec(),
        flow,
        eps: eps.clone(),
        lambda,
    })
}

#[derive(Debug, Clone)]
pub struct WindowLoss {
    /// Mean over the batch of `‖v − u°‖²`.
    pub flow_loss: f64,
    /// Mean over the batch of `‖λŝ + ε‖²`.
    pub score_loss: f64,
    pub flow_grads: Vec<f64>,
    pub score_grads: Vec<f64>,
}

impl WindowLoss {
    pub fn total(&self) -> f64 {
        self.flow_loss + self.score_loss
    }
}

/// Mean squared regression loss `mean_i ‖f(x_i, t_i) − y_i‖²` and its
/// parameter gradient.
pub fn regression_grad(
    net: &Mlp,
    xs: &Points,
    ts: &[f64],
    targets: &Points,
) -> Result<(f64, Vec<f64>)> {
    let tape = net.record(xs, ts)?;
    let out = tape.output();
    let n = xs.rows() as f64;
    let mut loss = 0.0;
    let mut dout = Vec::with_capacity(out.as_slice().len());
    for (v, u) in out.as_slice().iter().zip(targets.as_slice()) {
        let r = v - u;
        loss += r * r;
        dout.push(2.0 * r / n);
    }
    let mut grads = vec![0.0; net.num_params()];
    net.backward(
        &tape,
        &Points::new(dout, out.rows(), out.dim())?,
        &mut grads,
    )?;
    Ok((loss / n, grads))
}

/// Scaled score loss `mean_i ‖λ_i ŝ(x_i, t_i) + ε_i‖²` and its gradient.
pub fn scaled_score_grad(
    net: &Mlp,
    xs: &Points,
    ts: &[f64],
    lambda: &[f64],
    eps: &Points,
) -> Result<(f64, Vec<f64>)> {
    let tape = net.record(xs, ts)?;
    let out = tape.output();
    let d = out.dim();
    let n = xs.rows() as f64;
    let mut loss = 0.0;
    let mut dout = Points::zeros(out.rows(), d);
    for i in 0..out.rows() {
        let l = lambda[i];
        for ((g, s), e) in dout.row_mut(i).iter_mut().zip(out.row(i)).zip(eps.row(i)) {
            let r = l * s + e;
            loss += r * r;
            *g = 2.0 * l * r / n;
        }
    }
    let mut grads = vec![0.0; net.num_params()];
    net.backward(&tape, &dout, &mut grads)?;
    Ok((loss / n, grads))
}

/// Flow and scaled-score losses with gradients for one aligned window.
pub fn window_loss(
    window: &AlignedWindow,
    ts: &[f64],
    eps: &Points,
    flow_net: &Mlp,
    score_net: &Mlp,
    cfg: &TrainConfig,
) -> Result<WindowLoss> {
    let tg = window_targets(window, ts, eps, cfg)?;
    let (flow_loss, flow_grads) = regression_grad(flow_net, &tg.xs, &tg.ts, &tg.flow)?;
    let (score_loss, score_grads) =
        scaled_score_grad(score_net, &tg.xs, &tg.ts, &tg.lambda, &tg.eps)?;
    Ok(WindowLoss {
        flow_loss,
        score_loss,
        flow_grads,
        score_grads,
    })
}

/// Single-interval loss written as a sum over the `k` overlapping mini-flow
/// targets: `mean_i Σ_j ‖v − u_j‖²`.
pub fn interval_loss_separate(
    net: &Mlp,
    xs: &Points,
    ts: &[f64],
    targets: &[Points],
) -> Result<(f64, Vec<f64>)> {
    let mut loss = 0.0;
    let mut grads = vec![0.0; net.num_params()];
    for u in targets {
        let (l, g) = regression_grad(net, xs, ts, u)?;
        loss += l;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grads))
}

/// The same interval loss in combined form:
/// `mean_i ‖v − Σ_j u_j‖² + (k − 1)‖v‖²`, which differs from the separate
/// form by a θ-independent constant.
pub fn interval_loss_combined(
    net: &Mlp,
    xs: &Points,
    ts: &[f64],
    targets: &[Points],
) -> Result<(f64, Vec<f64>)> {
    let k = targets.len();
    if k == 0 {
        return Err(invalid("need at least one target"));
    }
    let mut sum = Points::zeros(xs.rows(), xs.dim());
    for u in targets {
        for i in 0..xs.rows() {
            for (s, v) in sum.row_mut(i).iter_mut().zip(u.row(i)) {
                *s += v;
            }
        }
    }
    let (l1, mut g1) = regression_grad(net, xs, ts, &sum)?;
    let zeros = Points::zeros(xs.rows(), xs.dim());
    let (l0, g0) = regression_grad(net, xs, ts, &zeros)?;
    let extra = (k - 1) as f64;
    for (a, b) in g1.iter_mut().zip(&g0) {
        *a += extra * b;
    }
    Ok((l1 + extra * l0, g1))
}

/// Losses recorded for one gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub window: usize,
    pub flow_loss: f64,
    pub score_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub flow: Mlp,
    pub score: Mlp,
    pub flow_opt: AdamW,
    pub score_opt: AdamW,
    pub history: Vec<LossRecord>,
}

/// The dataset actually trained on: `data` minus the held-out marginal.
pub fn training_view(data: &MarginalDataset, cfg: &TrainConfig) -> Result<MarginalDataset> {
    match cfg.hold_out {
        Some(h) => data.without(h),
        None => Ok(data.clone()),
    }
}

/// Time labels of every window visited in one sweep.
pub fn planned_windows(data: &MarginalDataset, cfg: &TrainConfig) -> Result<Vec<Vec<f64>>> {
    let view = training_view(data, cfg)?;
    let times = view.times();
    Ok(window_starts(times.len(), cfg.k)?
        .map(|i| times[i..=i + cfg.k].to_vec())
        .collect())
}

fn draw_batch<R: Rng + ?Sized>(m: &SampleBatch, b: usize, rng: &mut R) -> Result<SampleBatch> {
    if m.is_empty() {
        return Err(invalid(format!(
            "marginal at t = {} has no samples",
            m.source_time
        )));
    }
    let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..m.len())).collect();
    SampleBatch::new(m.points.select(&idx), m.source_time)
}

fn normal_points<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Points {
    let data = (0..rows * dim)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Points::new(data, rows, dim).expect("sized buffer")
}

/// Seeds the networks and the sampling stream from `cfg.seed`.
pub fn init_networks(dim: usize, cfg: &TrainConfig) -> Result<(Mlp, Mlp)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let flow = Mlp::new(dim, &cfg.hidden, &mut rng)?;
    let score = Mlp::new(dim, &cfg.hidden, &mut rng)?;
    Ok((flow, score))
}

/// Runs the rolling-window training loop for `cfg.steps` gradient steps, one
/// step per window, sweeping windows `i = 0..=M−k` in order.
pub fn train(data: &MarginalDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(data, cfg, |_| {})
}

/// [`train`] with a callback invoked after every step.
pub fn train_with(
    data: &MarginalDataset,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let view = training_view(data, cfg)?;
    let starts = window_starts(view.len(), cfg.k)?;
    let (mut flow, mut score) = init_networks(view.dim(), cfg)?;
    let mut flow_opt = AdamW::new(flow.num_params(), cfg.lr, cfg.weight_decay);
    let mut score_opt = AdamW::new(score.num_params(), cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let b = cfg.batch_size;
    let mut history = Vec::with_capacity(cfg.steps);
    let mut step = 0;
    while step < cfg.steps {
        for i in starts.clone() {
            if step == cfg.steps {
                break;
            }
            let batches = view.marginals[i..=i + cfg.k]
                .iter()
                .map(|m| draw_batch(m, b, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let window = sample_aligned_window(&batches, b, &mut rng)?;
            let ts = stratified_times(&window.times, b, &mut rng)?;
            let eps = normal_points(b, view.dim(), &mut rng);
            let loss = window_loss(&window, &ts, &eps, &flow, &score, cfg)?;
            if !loss.total().is_finite() {
                return Err(Error::TrainingDiverged { step });
            }
            flow_opt.step(flow.params_mut(), &loss.flow_grads)?;
            score_opt.step(score.params_mut(), &loss.score_grads)?;
            let rec = LossRecord {
                step,
                window: i,
                flow_loss: loss.flow_loss,
                score_loss: loss.score_loss,
            };
            on_step(&rec);
            history.push(rec);
            step += 1;
        }
    }
    Ok(TrainOutcome {
        flow,
        score,
        flow_opt,
        score_opt,
        history,
    })
}

/// Writes `step,window,flow_loss,score_loss`.
pub fn write_loss_log<W: Write>(history: &[LossRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "window", "flow_loss", "score_loss"])
        .map_err(|e| invalid(e.to_string()))?;
    for r in history {
        out.write_record([
            r.step.to_string(),
            r.window.to_string(),
            r.flow_loss.to_string(),
            r.score_loss.to_string(),
        ])
        .map_err(|e| invalid(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}
