//! Oracles shared by the integration tests.
#![allow(dead_code)]

use mmsfm::ot::Matrix;
use mmsfm::Points;
use proptest::test_runner::Config;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn proptest_config(cases: u32) -> Config {
    Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    }
}

/// Minimum of `Σ_i cost[i][σ(i)] / n` over all permutations σ.
pub fn brute_force_assignment(cost: &Matrix) -> f64 {
    let n = cost.rows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let c: f64 = p.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
        best = best.min(c);
    });
    best / n as f64
}

fn permute(p: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        visit(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, visit);
        p.swap(k, i);
    }
}

pub fn gaussian_points(rng: &mut ChaCha8Rng, n: usize, dim: usize, scale: f64) -> Points {
    let data = (0..n * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>();
    Points::new(data, n, dim).unwrap()
}

pub fn uniform_points(rng: &mut ChaCha8Rng, n: usize, dim: usize, lo: f64, hi: f64) -> Points {
    let data = (0..n * dim).map(|_| rng.random_range(lo..hi)).collect();
    Points::new(data, n, dim).unwrap()
}

/// Relative error with an absolute floor of one.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Inputs whose hidden pre-activations all clear `margin`.
pub fn kink_free_inputs(
    net: &mmsfm::nn::Mlp,
    n: usize,
    margin: f64,
    rng: &mut ChaCha8Rng,
) -> (Points, Vec<f64>) {
    let d = net.dim();
    let mut xs = Points::zeros(0, d);
    let mut ts = Vec::with_capacity(n);
    while ts.len() < n {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t = rng.random_range(0.0..1.0);
        let pre = net.hidden_preactivations(&x, t).unwrap();
        if pre.iter().all(|z| z.abs() > margin) {
            xs.push_row(&x).unwrap();
            ts.push(t);
        }
    }
    (xs, ts)
}

/// Largest relative error between backprop and central differences for the
/// linear functional `L = Σ_i w_i · f(x_i, t_i)`, over every parameter.
pub fn max_gradient_error(net: &mmsfm::nn::Mlp, xs: &Points, ts: &[f64], w: &Points) -> f64 {
    let loss = |n: &mmsfm::nn::Mlp| -> f64 {
        let out = n.forward_batch(xs, ts).unwrap();
        out.as_slice()
            .iter()
            .zip(w.as_slice())
            .map(|(a, b)| a * b)
            .sum()
    };
    let tape = net.record(xs, ts).unwrap();
    let mut grads = vec![0.0; net.num_params()];
    net.backward(&tape, w, &mut grads).unwrap();
    let h = 1e-6;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (p, &g) in grads.iter().enumerate() {
        let orig = probe.params()[p];
        probe.params_mut()[p] = orig + h;
        let up = loss(&probe);
        probe.params_mut()[p] = orig - h;
        let down = loss(&probe);
        probe.params_mut()[p] = orig;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-3));
    }
    worst
}

/// Default-architecture network with nonzero biases.
pub fn perturbed_net(dim: usize, seed: u64) -> mmsfm::nn::Mlp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = mmsfm::nn::Mlp::new(dim, &mmsfm::nn::DEFAULT_HIDDEN, &mut rng).unwrap();
    for p in net.params_mut() {
        *p += 0.1 * rng.random_range(-1.0..1.0);
    }
    net
}

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale.max(1e-300)
}

/// Relative gradient gap between `mean Σ_j ‖v − u_j‖²` and
/// `mean ‖v − Σ_j u_j‖² + (k − 1)‖v‖²` on random targets.
pub fn theorem1_gap(seed: u64, k: usize) -> f64 {
    use mmsfm::trainer::{interval_loss_combined, interval_loss_separate};
    let net = perturbed_net(2, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let xs = gaussian_points(&mut rng, 32, 2, 2.0);
    let ts: Vec<f64> = (0..32).map(|_| rng.random_range(0.0..1.0)).collect();
    let targets: Vec<Points> = (0..k)
        .map(|_| gaussian_points(&mut rng, 32, 2, 3.0))
        .collect();
    let (_, sep) = interval_loss_separate(&net, &xs, &ts, &targets).unwrap();
    let (_, comb) = interval_loss_combined(&net, &xs, &ts, &targets).unwrap();
    max_rel_diff(&sep, &comb)
}

fn line_window(times: &[f64], speed: [f64; 2], offsets: &Points) -> mmsfm::ot::AlignedWindow {
    let batches = times
        .iter()
        .map(|&t| {
            let rows: Vec<[f64; 2]> = offsets
                .iter_rows()
                .map(|o| [o[0] + speed[0] * t, o[1] + speed[1] * t])
                .collect();
            Points::from_rows(&rows).unwrap()
        })
        .collect();
    mmsfm::ot::AlignedWindow {
        batches,
        times: times.to_vec(),
        source_rows: vec![(0..offsets.rows()).collect(); times.len()],
    }
}

/// Two overlapping `k = 2` windows over collinear equal-speed tuples share
/// the interval `(0.5, 1)`; their summed flow gradient against 2× the
/// pairwise gradient on that interval, as a relative gap.
pub fn corollary1_gap(seed: u64) -> f64 {
    use mmsfm::trainer::{interval_loss_separate, regression_grad, window_targets, TrainConfig};
    let net = perturbed_net(2, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0);
    let b = 24;
    let offsets = gaussian_points(&mut rng, b, 2, 1.0);
    let speed = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
    let ts: Vec<f64> = (0..b)
        .map(|_| rng.random_range(0.5 + 1e-3..1.0 - 1e-3))
        .collect();
    let eps = Points::zeros(b, 2);
    let cfg = TrainConfig::default();
    let targets = |times: &[f64]| {
        window_targets(&line_window(times, speed, &offsets), &ts, &eps, &cfg).unwrap()
    };
    let a = targets(&[0.0, 0.5, 1.0]);
    let c = targets(&[0.5, 1.0, 1.5]);
    let pair = targets(&[0.5, 1.0]);
    let (_, summed) = interval_loss_separate(&net, &a.xs, &ts, &[a.flow, c.flow]).unwrap();
    let (_, single) = regression_grad(&net, &pair.xs, &ts, &pair.flow).unwrap();
    let doubled: Vec<f64> = single.iter().map(|g| 2.0 * g).collect();
    max_rel_diff(&summed, &doubled)
}
