use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatrl_core::density::Action;
use splatrl_core::policy::{sample_actions, ActionDist, PolicyNet, FEATURE_DIM};
use splatrl_core::ppo::{net_backward, Batch};

fn random_net(seed: u64, width: usize, blocks: usize) -> PolicyNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = PolicyNet::zeros(FEATURE_DIM, width, blocks);
    for p in &mut net.params {
        *p = rng.random_range(-0.8..0.8);
    }
    net
}

fn random_features(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n * FEATURE_DIM).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn rel_ok(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-6_f64.max(1e-3 * a.abs().max(b.abs()))
}

#[test]
fn backward_matches_finite_differences() {
    for seed in 0..4 {
        let net = random_net(seed, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = random_features(&mut rng, 3);
        let w: Vec<[f64; 4]> = (0..3).map(|_| [rng.random(), rng.random(), rng.random(), rng.random()]).collect();
        let f = |n: &PolicyNet| -> f64 {
            n.logits(&x).unwrap().iter().zip(&w).map(|(z, c)| (0..4).map(|k| z[k] * c[k]).sum::<f64>()).sum()
        };
        let g = net.backward(&x, &w).unwrap();
        let h = 1e-6;
        for i in 0..net.param_count() {
            let mut p = net.clone();
            p.params[i] += h;
            let mut m = net.clone();
            m.params[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!(rel_ok(g[i], fd), "param {i}: {} vs {fd}", g[i]);
        }
    }
}

#[test]
fn unclipped_gradient_is_advantage_times_score() {
    let net = random_net(7, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_features(&mut rng, 1);
    for action in Action::ALL {
        let logp = |n: &PolicyNet| n.forward(&x).unwrap()[0].log_prob(action);
        let adv = -1.7;
        let batch = Batch { features: x.clone(), actions: vec![action], old_logp: vec![logp(&net)], advantages: vec![adv] };
        let (g, stats) = net_backward(&net, &batch, 0.2, 0.0).unwrap();
        assert!((stats.mean_ratio - 1.0).abs() < 1e-12);
        let h = 1e-6;
        for i in 0..net.param_count() {
            let mut p = net.clone();
            p.params[i] += h;
            let mut m = net.clone();
            m.params[i] -= h;
            let fd = adv * (logp(&p) - logp(&m)) / (2.0 * h);
            // net_backward returns the gradient of the negated objective
            assert!(rel_ok(-g[i], fd), "{action} param {i}: {} vs {fd}", -g[i]);
        }
    }
}

#[test]
fn entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let z: [f64; 4] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
        let g = ActionDist::from_logits(z).entropy_grad();
        for k in 0..4 {
            let mut p = z;
            p[k] += 1e-6;
            let mut m = z;
            m[k] -= 1e-6;
            let fd = (ActionDist::from_logits(p).entropy() - ActionDist::from_logits(m).entropy()) / 2e-6;
            assert!(rel_ok(g[k], fd), "{} vs {fd}", g[k]);
        }
    }
}

#[test]
fn zero_advantages_leave_only_entropy() {
    let net = random_net(1, 6, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_features(&mut rng, 5);
    let dists = net.forward(&x).unwrap();
    let (actions, logp) = sample_actions(&dists, &mut rng);
    let batch = Batch { features: x, actions, old_logp: logp, advantages: vec![0.0; 5] };
    let (g, _) = net_backward(&net, &batch, 0.2, 0.0).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
    let (g, _) = net_backward(&net, &batch, 0.2, 1e-3).unwrap();
    assert!(g.iter().any(|&v| v != 0.0));
}

#[test]
fn clipped_samples_have_no_ratio_gradient() {
    let net = random_net(4, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_features(&mut rng, 1);
    let lp = net.forward(&x).unwrap()[0].log_prob(Action::Clone);
    // ratio e^0.5 > 1.2 with positive advantage, ratio e^-0.5 < 0.8 with negative
    for (shift, adv) in [(-0.5, 1.0), (0.5, -1.0)] {
        let batch = Batch { features: x.clone(), actions: vec![Action::Clone], old_logp: vec![lp + shift], advantages: vec![adv] };
        let (g, stats) = net_backward(&net, &batch, 0.2, 0.0).unwrap();
        assert_eq!(stats.clip_fraction, 1.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn uniform_sampling_frequencies() {
    let z = [0.0, 0.0, 0.0, (0.25f64 / 0.75).ln()];
    let d = ActionDist::from_logits(z);
    for p in d.probs {
        assert!((p - 0.25).abs() < 1e-12);
    }
    let n = 10_000;
    let (actions, _) = sample_actions(&vec![d; n], &mut ChaCha8Rng::seed_from_u64(42));
    let sd = (n as f64 * 0.25 * 0.75).sqrt();
    for a in Action::ALL {
        let c = actions.iter().filter(|&&x| x == a).count() as f64;
        assert!((c - 2500.0).abs() < 3.0 * sd, "{a}: {c}");
    }
}

#[test]
fn forward_is_batch_order_invariant() {
    let net = random_net(9, 8, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random_features(&mut rng, 6);
    let a = net.forward(&x).unwrap();
    let mut rev = Vec::new();
    for r in (0..6).rev() {
        rev.extend_from_slice(&x[r * FEATURE_DIM..(r + 1) * FEATURE_DIM]);
    }
    let b = net.forward(&rev).unwrap();
    for r in 0..6 {
        assert_eq!(a[r], b[5 - r]);
    }
    assert!(net.forward(&x[..5]).is_err());
}

proptest! {
    #[test]
    fn rows_are_simplices(z in prop::array::uniform4(-60.0f64..60.0)) {
        let d = ActionDist::from_logits(z);
        prop_assert!(d.probs.iter().all(|&p| p >= 0.0));
        prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for a in Action::ALL {
            let p = d.probs[a.index()];
            if p > 1e-300 {
                prop_assert!((d.log_prob(a).exp() - p).abs() < 1e-9);
            }
        }
        prop_assert!(d.entropy() >= -1e-12);
    }

    #[test]
    fn network_rows_are_simplices(seed in any::<u64>()) {
        let net = random_net(seed, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = random_features(&mut rng, 40);
        for d in net.forward(&x).unwrap() {
            prop_assert!(d.probs.iter().all(|&p| p >= 0.0));
            prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
