mod common;

use common::{gaussian_points, kink_free_inputs, max_gradient_error, perturbed_net};
use mmsfm::nn::{param_count, AdamW, Mlp, CHECKPOINT_VERSION, DEFAULT_HIDDEN};
use mmsfm::{Error, Points};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn default_parameter_count() {
    assert_eq!(param_count(&[3, 64, 64, 2]), 4546);
    let net = Mlp::new(2, &DEFAULT_HIDDEN, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(net.widths(), &[3, 64, 64, 2]);
    assert_eq!(net.num_params(), 4546);
}

#[test]
fn zero_output_layer_gives_zero_output() {
    let mut net = perturbed_net(3, 1);
    net.zero_output_layer();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-10.0..10.0)).collect();
        assert_eq!(
            net.forward(&x, rng.random_range(0.0..1.0)).unwrap(),
            vec![0.0; 3]
        );
    }
}

#[test]
fn batched_forward_equals_rowwise_forward() {
    let net = perturbed_net(2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xs = gaussian_points(&mut rng, 17, 2, 2.0);
    let ts: Vec<f64> = (0..17).map(|_| rng.random_range(0.0..1.0)).collect();
    let out = net.forward_batch(&xs, &ts).unwrap();
    for i in 0..17 {
        let row = net.forward(xs.row(i), ts[i]).unwrap();
        for (a, b) in out.row(i).iter().zip(&row) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn output_is_continuous_in_time() {
    let net = perturbed_net(2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let t = rng.random_range(0.0..0.999);
        let a = net.forward(&x, t).unwrap();
        let b = net.forward(&x, t + 1e-7).unwrap();
        assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-4));
    }
}

#[test]
fn non_finite_inputs_are_rejected() {
    let net = perturbed_net(2, 7);
    assert!(matches!(
        net.forward(&[f64::NAN, 0.0], 0.5),
        Err(Error::InvalidInput(_))
    ));
    assert!(matches!(
        net.forward(&[0.0, 0.0], f64::INFINITY),
        Err(Error::InvalidInput(_))
    ));
    assert!(matches!(
        net.forward(&[0.0], 0.5),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn gradients_match_central_differences() {
    for seed in 0..3 {
        let net = perturbed_net(2, 10 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(20 + seed);
        let (xs, ts) = kink_free_inputs(&net, 4, 1e-3, &mut rng);
        let w = gaussian_points(&mut rng, 4, 2, 1.0);
        let err = max_gradient_error(&net, &xs, &ts, &w);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn last_bias_gradient_vanishes_at_zero_output() {
    let mut net = perturbed_net(2, 8);
    net.zero_output_layer();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xs = gaussian_points(&mut rng, 5, 2, 1.0);
    let ts = vec![0.3; 5];
    let tape = net.record(&xs, &ts).unwrap();
    // ∂‖f‖²/∂f = 2f = 0
    let dout = tape.output().scaled(2.0);
    let mut g = vec![0.0; net.num_params()];
    net.backward(&tape, &dout, &mut g).unwrap();
    assert!(g.iter().all(|v| *v == 0.0));
}

#[test]
fn batch_gradient_is_the_sum_of_sample_gradients() {
    let net = perturbed_net(2, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let xs = gaussian_points(&mut rng, 6, 2, 1.5);
    let ts: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
    let w = gaussian_points(&mut rng, 6, 2, 1.0);
    let mut whole = vec![0.0; net.num_params()];
    net.backward(&net.record(&xs, &ts).unwrap(), &w, &mut whole)
        .unwrap();
    let mut parts = vec![0.0; net.num_params()];
    for i in 0..6 {
        let x = Points::new(xs.row(i).to_vec(), 1, 2).unwrap();
        let wi = Points::new(w.row(i).to_vec(), 1, 2).unwrap();
        net.backward(&net.record(&x, &ts[i..=i]).unwrap(), &wi, &mut parts)
            .unwrap();
    }
    for (a, b) in whole.iter().zip(&parts) {
        assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
    }
}

#[test]
fn backward_rejects_mismatched_shapes() {
    let net = perturbed_net(2, 13);
    let xs = Points::zeros(3, 2);
    let tape = net.record(&xs, &[0.1, 0.2, 0.3]).unwrap();
    let mut g = vec![0.0; net.num_params()];
    assert!(net.backward(&tape, &Points::zeros(2, 2), &mut g).is_err());
    assert!(net
        .backward(&tape, &Points::zeros(3, 2), &mut g[1..])
        .is_err());
    assert!(net.record(&xs, &[0.1]).is_err());
}

#[test]
fn adamw_examples() {
    let mut theta = vec![0.5, -2.0, 3.0];
    let before = theta.clone();
    let mut opt = AdamW::new(3, 0.1, 0.0);
    opt.step(&mut theta, &[0.0; 3]).unwrap();
    assert_eq!(theta, before);

    let mut x = vec![1.0];
    let mut opt = AdamW::new(1, 0.1, 0.0);
    opt.step(&mut x, &[2.0]).unwrap();
    assert!(x[0] < 1.0);

    // f(θ) = (θ₀ − 1)² + 10(θ₁ + 2)²
    let mut theta = vec![3.0, 3.0];
    let mut opt = AdamW::new(2, 0.1, 0.0);
    for _ in 0..200 {
        let g = [2.0 * (theta[0] - 1.0), 20.0 * (theta[1] + 2.0)];
        opt.step(&mut theta, &g).unwrap();
    }
    let dist = ((theta[0] - 1.0).powi(2) + (theta[1] + 2.0).powi(2)).sqrt();
    assert!(dist < 1e-3, "{theta:?}");
    assert_eq!(opt.step, 200);
}

#[test]
fn adamw_decoupled_decay() {
    let mut theta = vec![2.0];
    let mut opt = AdamW::new(1, 0.1, 0.5);
    opt.step(&mut theta, &[0.0]).unwrap();
    assert!((theta[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    assert!(opt.step(&mut theta, &[0.0, 1.0]).is_err());
}

#[test]
fn initialisation_is_deterministic() {
    let a = Mlp::new(2, &DEFAULT_HIDDEN, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let b = Mlp::new(2, &DEFAULT_HIDDEN, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
    let c = Mlp::new(2, &DEFAULT_HIDDEN, &mut ChaCha8Rng::seed_from_u64(43)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let net = perturbed_net(3, 14);
    let mut opt = AdamW::new(net.num_params(), 1e-3, 1e-2);
    let g: Vec<f64> = (0..net.num_params()).map(|i| (i as f64).sin()).collect();
    let mut p = net.params().to_vec();
    opt.step(&mut p, &g).unwrap();
    let mut buf = Vec::new();
    net.write_checkpoint(Some(&opt), &mut buf).unwrap();
    let (back, back_opt) = Mlp::read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back, net);
    assert_eq!(back_opt.unwrap(), opt);
    let mut again = Vec::new();
    back.write_checkpoint(None, &mut again).unwrap();
    let (plain, none) = Mlp::read_checkpoint(again.as_slice()).unwrap();
    assert!(none.is_none());
    assert!(plain
        .params()
        .iter()
        .zip(net.params())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn checkpoint_errors() {
    let net = perturbed_net(2, 15);
    let mut buf = Vec::new();
    net.write_checkpoint(None, &mut buf).unwrap();
    let mut wrong = buf.clone();
    wrong[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    let err = Mlp::read_checkpoint(wrong.as_slice()).unwrap_err();
    assert!(matches!(&err, Error::Checkpoint(m) if m.contains("version")));
    assert!(matches!(
        Mlp::read_checkpoint(&buf[..buf.len() - 3]),
        Err(Error::Checkpoint(_))
    ));
    assert!(matches!(
        Mlp::read_checkpoint(&b"MMSFMNX\0"[..]),
        Err(Error::Checkpoint(_))
    ));
    let mut bad_flag = buf.clone();
    *bad_flag.last_mut().unwrap() = 7;
    assert!(Mlp::read_checkpoint(bad_flag.as_slice()).is_err());
}
