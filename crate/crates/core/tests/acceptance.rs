//! One test per acceptance criterion. Each prints a single
//! `criterion N: PASS|FAIL ...` line before asserting.

mod common;

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{
    brute_force_assignment, corollary1_gap, gaussian_points, kink_free_inputs, max_gradient_error,
    perturbed_net, theorem1_gap,
};
use mmsfm::data::{
    gen_gaussian_sequence, grid_by_name, s_shape_means, GaussianSequenceSpec, GeneratedData,
};
use mmsfm::metrics::{mmd, wasserstein, Kernel};
use mmsfm::ot::{cost_matrix, exact_plan, uniform_weights, Matrix};
use mmsfm::probpath::{GaussianPath, SigmaSchedule};
use mmsfm::sim::{integrate_ode, integrate_sde, uniform_grid, FnField, SdeSpec};
use mmsfm::spline::{fit_monotone_hermite, fit_natural_cubic, Knots, PiecewiseCubic};
use mmsfm::trainer::{train, TrainConfig};
use mmsfm::Points;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Writes past the test harness's output capture so passing criteria are
/// also listed.
macro_rules! say {
    ($($arg:tt)*) => {
        let _ = writeln!(std::io::stderr(), $($arg)*);
    };
}

fn report(n: u32, checks: &[(&str, bool)], elapsed: Duration, limit: Duration) {
    let timed = elapsed < limit;
    let pass = timed && checks.iter().all(|c| c.1);
    let detail: Vec<String> = checks
        .iter()
        .map(|(name, ok)| format!("{name}={}", if *ok { "ok" } else { "FAIL" }))
        .collect();
    say!(
        "criterion {n}: {} [{}; {:.1}s < {}s {}]",
        if pass { "PASS" } else { "FAIL" },
        detail.join(", "),
        elapsed.as_secs_f64(),
        limit.as_secs(),
        if timed { "ok" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} failed");
}

fn random_knots(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Knots {
    let mut t = vec![rng.random_range(-1.0..1.0)];
    for _ in 1..n {
        let last = *t.last().unwrap();
        t.push(last + rng.random_range(0.01..1.0));
    }
    let data = (0..n * dim)
        .map(|_| rng.random_range(-10.0..10.0))
        .collect();
    Knots::new(t, Points::new(data, n, dim).unwrap()).unwrap()
}

fn dense_range(s: &PiecewiseCubic, a: f64, b: f64, dim: usize, n: usize) -> (f64, f64) {
    (0..=n)
        .map(|i| s.eval((a + (b - a) * i as f64 / n as f64).min(b)).unwrap()[dim])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
            (lo.min(x), hi.max(x))
        })
}

#[test]
fn criterion_1_spline_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut exact = true;
    let mut monotone = true;
    let mut c2 = true;
    for _ in 0..1000 {
        let n = rng.random_range(2..10);
        let knots = random_knots(&mut rng, n, 2);
        let times = knots.times().to_vec();
        let values = knots.values().clone();
        let hermite = fit_monotone_hermite(knots.clone()).unwrap();
        let natural = fit_natural_cubic(knots).unwrap();
        for (i, &t) in times.iter().enumerate() {
            for s in [&hermite, &natural] {
                let v = s.eval(t).unwrap();
                exact &= v
                    .iter()
                    .zip(values.row(i))
                    .all(|(a, b)| (a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
        for i in 0..n - 1 {
            for d in 0..2 {
                let (a, b) = (values.row(i)[d], values.row(i + 1)[d]);
                let (lo, hi) = dense_range(&hermite, times[i], times[i + 1], d, 200);
                monotone &= lo >= a.min(b) - 1e-9 && hi <= a.max(b) + 1e-9;
            }
        }
        // S'' from the left and right of every interior knot
        for i in 1..n - 1 {
            let h = times[i] - times[i - 1];
            for (l, r) in natural
                .interval_coeffs(i - 1)
                .iter()
                .zip(natural.interval_coeffs(i))
            {
                // stored highest degree first
                let left = 6.0 * l[0] * h + 2.0 * l[1];
                let right = 2.0 * r[1];
                c2 &= (left - right).abs() <= 1e-6 * left.abs().max(right.abs()).max(1.0);
            }
        }
    }
    let t = [0.27, 0.3, 0.88];
    let knots = || {
        Knots::new(
            t.to_vec(),
            Points::from_rows(&[[0.0], [1.0], [1.2]]).unwrap(),
        )
        .unwrap()
    };
    let (lo, hi) = dense_range(&fit_natural_cubic(knots()).unwrap(), 0.3, 0.88, 0, 2000);
    let natural_overshoots = lo < 1.0 - 1e-3 || hi > 1.2 + 1e-3;
    let (lo, hi) = dense_range(&fit_monotone_hermite(knots()).unwrap(), 0.3, 0.88, 0, 2000);
    let hermite_contained = lo >= 1.0 - 1e-12 && hi <= 1.2 + 1e-12;
    report(
        1,
        &[
            ("interpolation", exact),
            ("hermite_monotone", monotone),
            ("natural_c2", c2),
            ("natural_overshoot", natural_overshoots),
            ("hermite_no_overshoot", hermite_contained),
        ],
        start.elapsed(),
        Duration::from_secs(5),
    );
}

#[test]
fn criterion_2_ot_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let b = rng.random_range(1..=6);
        let x = gaussian_points(&mut rng, b, 2, 5.0);
        let y = gaussian_points(&mut rng, b, 2, 5.0);
        let cost = cost_matrix(&x, &y).unwrap();
        let plan = exact_plan(&cost, &uniform_weights(b), &uniform_weights(b)).unwrap();
        let oracle = brute_force_assignment(&cost);
        worst = worst.max((plan.cost(&cost) - oracle).abs() / oracle.max(1.0));
    }
    say!("  max relative gap to brute force: {worst:.3e}");
    report(
        2,
        &[("brute_force_1e-10", worst <= 1e-10)],
        start.elapsed(),
        Duration::from_secs(30),
    );
}

#[test]
fn criterion_3_theorem_and_corollary() {
    let start = Instant::now();
    let t1 = (0..5)
        .flat_map(|s| (1..=4).map(move |k| theorem1_gap(s, k)))
        .fold(0.0, f64::max);
    let c1 = (0..5).map(corollary1_gap).fold(0.0, f64::max);
    say!("  theorem gap {t1:.3e}, corollary gap {c1:.3e}");
    report(
        3,
        &[("theorem_1e-8", t1 < 1e-8), ("corollary_1e-6", c1 < 1e-6)],
        start.elapsed(),
        Duration::from_secs(10),
    );
}

#[test]
fn criterion_4_targets() {
    let start = Instant::now();
    let values = Points::from_rows(&[[0.0, 1.0], [2.0, -1.0], [3.0, 4.0]]).unwrap();
    let mean = fit_monotone_hermite(Knots::new(vec![0.27, 0.3, 0.88], values).unwrap()).unwrap();
    let sigma = 0.15;
    let path = GaussianPath::new(
        &mean,
        SigmaSchedule::window_local(sigma, 0.27, 0.88).unwrap(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut flow_ok, mut score_ok) = (true, true);
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
    for _ in 0..500 {
        let t: f64 = rng.random_range(0.28..0.87);
        if (t - 0.3).abs() < 1e-4 {
            continue;
        }
        let eps: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = path.sample_x(t, &eps).unwrap();
        let h = 1e-6;
        let (xp, xm) = (
            path.sample_x(t + h, &eps).unwrap(),
            path.sample_x(t - h, &eps).unwrap(),
        );
        let u = path.flow_target(t, &x).unwrap();
        let score = path.score_target(t, &x).unwrap();
        let (st, _) = path.schedule().sigma_at(t).unwrap();
        let mu = mean.eval(t).unwrap();
        let log_p = |y: &[f64]| {
            -0.5 * y.iter().zip(&mu).map(|(a, m)| (a - m).powi(2)).sum::<f64>() / (st * st)
        };
        for d in 0..2 {
            flow_ok &= rel(u[d], (xp[d] - xm[d]) / (2.0 * h)) < 1e-4;
            let hs = 1e-5 * st;
            let (mut yp, mut ym) = (x.clone(), x.clone());
            yp[d] += hs;
            ym[d] -= hs;
            score_ok &= rel(score[d], (log_p(&yp) - log_p(&ym)) / (2.0 * hs)) < 1e-4;
            score_ok &= rel(score[d], -eps[d] / st) < 1e-4;
        }
    }
    let mut finite = true;
    let (flow_net, score_net) = (perturbed_net(2, 1), perturbed_net(2, 2));
    for (a, b) in [(0.27, 0.3), (0.3, 0.88)] {
        for t in [a + 1e-6 * (b - a), b - 1e-6 * (b - a)] {
            let eps = [0.8, -1.7];
            let x = path.sample_x(t, &eps).unwrap();
            let lambda = path.lambda_weight(t).unwrap();
            let s = score_net.forward(&x, t).unwrap();
            let v = flow_net.forward(&x, t).unwrap();
            let u = path.flow_target(t, &x).unwrap();
            let loss: f64 = (0..2)
                .map(|d| (lambda * s[d] + eps[d]).powi(2) + (v[d] - u[d]).powi(2))
                .sum();
            finite &= loss.is_finite();
        }
    }
    report(
        4,
        &[
            ("flow_target", flow_ok),
            ("score_target", score_ok),
            ("finite_near_knots", finite),
        ],
        start.elapsed(),
        Duration::from_secs(5),
    );
}

#[test]
fn criterion_5_gradient_check() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let net = perturbed_net(2, 50 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(60 + seed);
        let (xs, ts) = kink_free_inputs(&net, 4, 1e-3, &mut rng);
        let w = gaussian_points(&mut rng, 4, 2, 1.0);
        worst = worst.max(max_gradient_error(&net, &xs, &ts, &w));
    }
    say!("  worst relative gradient error over 3×4546 parameters: {worst:.3e}");
    report(
        5,
        &[("central_differences_1e-4", worst < 1e-4)],
        start.elapsed(),
        Duration::from_secs(30),
    );
}

#[test]
fn criterion_6_integrator() {
    let start = Instant::now();
    let c = [2.0, -0.75];
    let constant = FnField::new(2, move |_: &[f64], _: f64, out: &mut [f64]| {
        out.copy_from_slice(&c)
    });
    let x0 = gaussian_points(&mut ChaCha8Rng::seed_from_u64(6), 10, 2, 1.0);
    let grid = uniform_grid(0.0, 1.0, 100).unwrap();
    let end = integrate_sde(&SdeSpec::new(&constant, None, 0.0).unwrap(), &x0, &grid, 0)
        .unwrap()
        .final_states();
    let exact =
        (0..10).all(|p| (0..2).all(|d| (end.row(p)[d] - x0.row(p)[d] - c[d]).abs() < 1e-12));

    let sigma: f64 = 0.15;
    let zero = FnField::new(2, |_: &[f64], _: f64, out: &mut [f64]| out.fill(0.0));
    let n = 10_000;
    let end = integrate_sde(
        &SdeSpec::new(&zero, None, sigma).unwrap(),
        &Points::zeros(n, 2),
        &grid,
        7,
    )
    .unwrap()
    .final_states();
    let mut brownian = true;
    for d in 0..2 {
        let xs: Vec<f64> = end.iter_rows().map(|r| r[d]).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = sigma * sigma * (2.0 / (n - 1) as f64).sqrt();
        say!(
            "  dim {d}: variance {var:.6} vs {:.6} ± {:.6}",
            sigma * sigma,
            3.0 * sd
        );
        brownian &= (var - sigma * sigma).abs() < 3.0 * sd;
    }

    let growth = FnField::new(1, |x: &[f64], _: f64, out: &mut [f64]| out[0] = x[0]);
    let one = Points::new(vec![1.0], 1, 1).unwrap();
    let err = |steps: usize| {
        let end = integrate_ode(&growth, &one, &uniform_grid(0.0, 1.0, steps).unwrap())
            .unwrap()
            .final_states();
        (end.row(0)[0] - std::f64::consts::E).abs()
    };
    let ratios: Vec<f64> = [10, 20, 40].iter().map(|&s| err(s) / err(2 * s)).collect();
    say!(
        "  RK4 error ratios on halving: {ratios:?}; error at 1000 steps {:.2e}",
        err(1000)
    );
    let order4 = ratios.iter().all(|r| (r - 16.0).abs() < 1.5) && err(1000) < 1e-6;
    report(
        6,
        &[
            ("constant_drift", exact),
            ("brownian_variance", brownian),
            ("rk4_order4", order4),
        ],
        start.elapsed(),
        Duration::from_secs(30),
    );
}

#[test]
fn criterion_7_metrics() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut brute, mut symmetric, mut scaling) = (true, true, true);
    for _ in 0..300 {
        let b = rng.random_range(1..=6);
        let x = gaussian_points(&mut rng, b, 2, 3.0);
        let y = gaussian_points(&mut rng, b, 2, 3.0);
        let dist = Matrix::from_fn(b, b, |i, j| {
            x.row(i)
                .iter()
                .zip(y.row(j))
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt()
        });
        let w1 = wasserstein(&x, &y, 1).unwrap();
        let w2 = wasserstein(&x, &y, 2).unwrap();
        let o1 = brute_force_assignment(&dist);
        let o2 = brute_force_assignment(&cost_matrix(&x, &y).unwrap());
        brute &= (w1 - o1).abs() <= 1e-10 * o1.max(1.0) && (w2 - o2).abs() <= 1e-10 * o2.max(1.0);
        let k = Kernel::Gaussian { gamma: 0.2 };
        let mix = Kernel::Mixture {
            gammas: vec![0.05, 0.2, 0.8],
        };
        symmetric &= (w1 - wasserstein(&y, &x, 1).unwrap()).abs() <= 1e-10 * w1.max(1.0);
        symmetric &= (w2 - wasserstein(&y, &x, 2).unwrap()).abs() <= 1e-10 * w2.max(1.0);
        symmetric &= (mmd(&x, &y, &k).unwrap() - mmd(&y, &x, &k).unwrap()).abs() < 1e-10;
        symmetric &= (mmd(&x, &y, &mix).unwrap() - mmd(&y, &x, &mix).unwrap()).abs() < 1e-10;
        let c = rng.random_range(0.1..10.0);
        let (xs, ys) = (x.scaled(c), y.scaled(c));
        scaling &=
            (wasserstein(&xs, &ys, 1).unwrap() - c * w1).abs() <= 1e-12 * (c * w1).max(1e-300);
        scaling &= (wasserstein(&xs, &ys, 2).unwrap() - c * c * w2).abs()
            <= 1e-12 * (c * c * w2).max(1e-300);
    }
    let x = Points::from_rows(&[[0.0, 0.0]]).unwrap();
    let y = Points::from_rows(&[[3.0, 4.0]]).unwrap();
    let gamma = 0.1;
    let singleton = (mmd(&x, &y, &Kernel::Gaussian { gamma }).unwrap()
        - (2.0 - 2.0 * (-gamma * 25.0f64).exp()))
    .abs()
        < 1e-15;
    report(
        7,
        &[
            ("brute_force_w", brute),
            ("mmd_singleton", singleton),
            ("symmetry", symmetric),
            ("scale_laws", scaling),
        ],
        start.elapsed(),
        Duration::from_secs(30),
    );
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn s_shape_data(grid: &str) -> GeneratedData {
    gen_gaussian_sequence(
        &GaussianSequenceSpec::new(s_shape_means(), 0),
        &grid_by_name(grid).unwrap(),
    )
    .unwrap()
}

fn protocol_config(k: usize, seed: u64, hold_out: Option<usize>) -> TrainConfig {
    TrainConfig {
        k,
        sigma: 0.15,
        steps: 2500,
        lr: 1e-4,
        batch_size: 120,
        seed,
        hold_out,
        ..TrainConfig::default()
    }
}

/// Trains, then integrates the SDE from the initial pool and returns W₁ at
/// each requested marginal index.
fn trained_w1(data: &GeneratedData, cfg: &TrainConfig, indices: &[usize]) -> Vec<f64> {
    let out = train(&data.dataset, cfg).unwrap();
    let spec = SdeSpec::new(&out.flow, Some(&out.score), cfg.sigma).unwrap();
    let traj = integrate_sde(
        &spec,
        &data.initial,
        &uniform_grid(0.0, 1.0, 100).unwrap(),
        cfg.seed,
    )
    .unwrap();
    indices
        .iter()
        .map(|&i| {
            let m = &data.dataset.marginals[i];
            let step = traj.nearest_step(m.source_time).unwrap();
            wasserstein(&traj.at_step(step), &m.points, 1).unwrap()
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_8_held_out_s_shape() {
    let start = Instant::now();
    let data = s_shape_data("T1");
    let held = 5;
    let baseline = wasserstein(&data.initial, &data.dataset.marginals[held].points, 1).unwrap();
    let runs = |k: usize| -> Vec<f64> {
        SEEDS
            .iter()
            .map(|&s| trained_w1(&data, &protocol_config(k, s, Some(held)), &[held])[0])
            .collect()
    };
    let triplet = runs(2);
    let pairwise = runs(1);
    let (mt, mp) = (median(triplet.clone()), median(pairwise.clone()));
    say!("  baseline W1 {baseline:.3}; triplet {triplet:.3?} (median {mt:.3}); pairwise {pairwise:.3?} (median {mp:.3})");
    say!(
        "  (a) needs {mt:.3} < {:.3}; (b) needs {mt:.3} <= {:.3}",
        0.25 * baseline,
        1.25 * mp
    );
    report(
        8,
        &[
            ("a_below_quarter_baseline", mt < 0.25 * baseline),
            ("b_triplet_vs_pairwise", mt <= 1.25 * mp),
        ],
        start.elapsed(),
        Duration::from_secs(15 * 60),
    );
}

#[test]
fn criterion_9_irregular_grid() {
    let start = Instant::now();
    let data = s_shape_data("T3");
    let all: Vec<usize> = (1..data.dataset.len()).collect();
    let runs = |k: usize| -> Vec<f64> {
        SEEDS
            .iter()
            .map(|&s| {
                let w = trained_w1(&data, &protocol_config(k, s, None), &all);
                w.iter().sum::<f64>() / w.len() as f64
            })
            .collect()
    };
    let triplet = runs(2);
    let pairwise = runs(1);
    let (mt, mp) = (median(triplet.clone()), median(pairwise.clone()));
    say!("  mean W1 triplet {triplet:.3?} (median {mt:.3}); pairwise {pairwise:.3?} (median {mp:.3})");
    report(
        9,
        &[("triplet_below_pairwise", mt < mp)],
        start.elapsed(),
        Duration::from_secs(15 * 60),
    );
}

fn pipeline(dir: &Path) {
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_mmsfm"))
            .args(args)
            .current_dir(dir)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    run(&[
        "synth",
        "--dataset",
        "s-shape",
        "--grid",
        "T1",
        "--seed",
        "0",
        "--out",
        "data",
    ]);
    run(&[
        "train",
        "--data",
        "data",
        "--k",
        "2",
        "--hold-out",
        "5",
        "--seed",
        "0",
        "--out",
        "model",
    ]);
    run(&[
        "generate", "--model", "model", "--seed", "1", "--out", "traj.csv",
    ]);
    run(&[
        "evaluate",
        "--trajectories",
        "traj.csv",
        "--data",
        "data",
        "--index",
        "5",
        "--out",
        "report.json",
    ]);
}

fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn criterion_10_pipeline_determinism() {
    let start = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    let names: Vec<&str> = sa.iter().map(|f| f.0.as_str()).collect();
    say!("  compared {} files: {names:?}", sa.len());
    let complete = [
        "data/marginals.csv",
        "model/flow.ckpt",
        "model/score.ckpt",
        "traj.csv",
        "report.json",
    ]
    .iter()
    .all(|f| names.contains(f));
    report(
        10,
        &[("outputs_present", complete), ("byte_identical", sa == sb)],
        start.elapsed(),
        Duration::from_secs(20 * 60),
    );
}
