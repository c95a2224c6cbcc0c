//! Counterfactual baseline, λ-return and masked attention properties.

use ccoma::critic::{counterfactual_advantage, td_lambda_targets};
use ccoma::policy::{AdjacencyMask, CommPolicy, PolicyConfig, Readout};
use ccoma::{Tape64, Tensor64, Var};
use proptest::prelude::*;
use proptest::test_runner::TestRunner;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn q_and_policy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize)> {
    (2usize..8).prop_flat_map(|n| {
        (
            prop::collection::vec(-100.0f64..100.0, n),
            prop::collection::vec(0.0f64..1.0, n),
            0..n,
        )
            .prop_map(|(q, w, a)| {
                let w: Vec<f64> = w.into_iter().map(|x| x + 1e-3).collect();
                let total: f64 = w.iter().sum();
                (q, w.into_iter().map(|x| x / total).collect(), a)
            })
    })
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    })
}

pub fn baseline_has_zero_mean_under_the_policy() {
    runner(10_000)
        .run(&q_and_policy(), |(q, pi, _a)| {
            let mean: f64 = (0..q.len())
                .map(|b| pi[b] * counterfactual_advantage(&q, &pi, b).unwrap())
                .sum();
            prop_assert!(mean.abs() <= 1e-8, "policy-weighted advantage {}", mean);
            Ok(())
        })
        .unwrap();
}

pub fn advantage_ignores_a_constant_shift() {
    runner(10_000)
        .run(&(q_and_policy(), -1e3f64..1e3), |((q, pi, a), shift)| {
            let shifted: Vec<f64> = q.iter().map(|v| v + shift).collect();
            let base = counterfactual_advantage(&q, &pi, a).unwrap();
            let moved = counterfactual_advantage(&shifted, &pi, a).unwrap();
            prop_assert!((base - moved).abs() <= 1e-8, "{} vs {}", base, moved);
            Ok(())
        })
        .unwrap();
}

pub fn worked_advantage_example() {
    let a = counterfactual_advantage(&[1.0, 2.0, 3.0], &[0.2, 0.3, 0.5], 2).unwrap();
    assert_eq!(a, 0.7);
}

/// Weighted sum of n-step returns, each written out term by term.
fn brute_force_lambda_return(
    rewards: &[f64],
    next_values: &[f64],
    gamma: f64,
    lambda: f64,
    terminal: bool,
    t: usize,
) -> f64 {
    let len = rewards.len();
    let horizon = len - t;
    let n_step = |n: usize| -> f64 {
        let mut g = 0.0;
        for k in 0..n {
            g += gamma.powi(k as i32) * rewards[t + k];
        }
        let bootstrap = if t + n == len && terminal { 0.0 } else { next_values[t + n - 1] };
        g + gamma.powi(n as i32) * bootstrap
    };
    let mut total = 0.0;
    for n in 1..horizon {
        total += (1.0 - lambda) * lambda.powi(n as i32 - 1) * n_step(n);
    }
    total + lambda.powi(horizon as i32 - 1) * n_step(horizon)
}

pub fn lambda_returns_match_brute_force() {
    let episodes = (1usize..=10).prop_flat_map(|n| {
        (prop::collection::vec(-5.0f64..5.0, n), prop::collection::vec(-20.0f64..20.0, n))
    });
    let inputs = (episodes, 0.0f64..1.0, 0.0f64..1.0, any::<bool>());
    runner(1_000)
        .run(&inputs, |((rewards, next_values), gamma, lambda, terminal)| {
            let fast = td_lambda_targets(&rewards, &next_values, gamma, lambda, terminal).unwrap();
            for t in 0..rewards.len() {
                let slow = brute_force_lambda_return(&rewards, &next_values, gamma, lambda, terminal, t);
                prop_assert!((fast[t] - slow).abs() <= 1e-10, "t {}: {} vs {}", t, fast[t], slow);
            }
            Ok(())
        })
        .unwrap();
}

pub fn lambda_extremes_collapse_exactly() {
    let rewards = [1.0, -2.0, 0.5, 3.0];
    let next_values = [4.0, 8.0, -1.0, 2.0];
    let gamma = 0.5;
    // One-step targets.
    let one = td_lambda_targets(&rewards, &next_values, gamma, 0.0, false).unwrap();
    assert_eq!(one, vec![3.0, 2.0, 0.0, 4.0]);
    let one = td_lambda_targets(&rewards, &next_values, gamma, 0.0, true).unwrap();
    assert_eq!(one, vec![3.0, 2.0, 0.0, 3.0]);
    // Discounted Monte Carlo returns.
    let mc = td_lambda_targets(&rewards, &next_values, gamma, 1.0, true).unwrap();
    assert_eq!(mc, vec![0.5, -1.0, 2.0, 3.0]);
    let mc = td_lambda_targets(&rewards, &next_values, gamma, 1.0, false).unwrap();
    assert_eq!(mc, vec![0.625, -0.75, 2.5, 4.0]);
}

fn policy(rng: &mut ChaCha8Rng, n_layers: usize) -> CommPolicy<f64> {
    let cfg = PolicyConfig {
        obs_dim: 4,
        n_actions: 2,
        embed_dim: 8,
        n_layers,
        n_heads: 4,
        head_dim: 3,
        hidden_dim: 5,
        readout: Readout::Concat,
    };
    CommPolicy::new(cfg, rng).unwrap()
}

fn random_obs(rng: &mut ChaCha8Rng, n: usize) -> Tensor64 {
    Tensor64::matrix(n, 4, (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> AdjacencyMask {
    let upper: Vec<bool> = (0..n * n).map(|_| rng.random_bool(0.4)).collect();
    AdjacencyMask::from_fn(n, 0, |i, j| i == j || upper[i.min(j) * n + i.max(j)])
}

pub fn attention_rows_are_distributions_over_neighbours() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let n = rng.random_range(1..7);
        let pol = policy(&mut rng, 2);
        let adj = random_mask(&mut rng, n);
        let mask = adj.to_tensor::<f64>();
        let mut tape = Tape64::new();
        let p = pol.bind(&mut tape, false);
        let obs = tape.constant(random_obs(&mut rng, n));
        let h = pol.encode(&mut tape, &p, obs).unwrap();
        for layer in 0..2 {
            for alpha in pol.attention_weights(&mut tape, &p, layer, h, &mask).unwrap() {
                let alpha = tape.value(alpha);
                for i in 0..n {
                    let row = alpha.row(i);
                    let total: f64 = row.iter().sum();
                    assert!((total - 1.0).abs() <= 1e-9, "row sums to {total}");
                    for j in 0..n {
                        if !adj.get(i, j) {
                            assert_eq!(row[j], 0.0, "weight on non-edge {i}->{j}");
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of row `target` of `out` with respect to the observation matrix.
fn obs_gradient(
    pol: &CommPolicy<f64>,
    obs: &Tensor64,
    mask: &Tensor64,
    layers: usize,
    target: usize,
) -> Tensor64 {
    let mut tape = Tape64::new();
    let p = pol.bind(&mut tape, false);
    let x = tape.param(obs.clone());
    let stack = pol.communicate(&mut tape, &p, x, mask).unwrap();
    let out: Var = stack[layers];
    let row = tape.gather_rows(out, &[target]).unwrap();
    let loss = tape.sum(row, None).unwrap();
    tape.backward(loss).unwrap().get_or_zero(x)
}

fn row_norm(t: &Tensor64, r: usize) -> f64 {
    t.row(r).iter().map(|v| v.abs()).sum()
}

pub fn no_gradient_crosses_a_non_edge() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let n = rng.random_range(2..7);
        let pol = policy(&mut rng, 1);
        let adj = random_mask(&mut rng, n);
        let obs = random_obs(&mut rng, n);
        let target = rng.random_range(0..n);
        let grad = obs_gradient(&pol, &obs, &adj.to_tensor(), 1, target);
        for j in 0..n {
            if !adj.get(target, j) {
                assert_eq!(row_norm(&grad, j), 0.0, "gradient leaked from {j} to {target}");
            }
        }
    }
}

pub fn two_layers_reach_two_hops_on_a_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let path = AdjacencyMask::from_rows(&[vec![1, 1, 0], vec![1, 1, 1], vec![0, 1, 1]]).unwrap();
    let mask = path.to_tensor::<f64>();
    let mut reached = 0;
    for _ in 0..20 {
        let pol = policy(&mut rng, 2);
        let obs = random_obs(&mut rng, 3);
        let one_hop = obs_gradient(&pol, &obs, &mask, 1, 0);
        assert_eq!(row_norm(&one_hop, 2), 0.0);
        let two_hop = obs_gradient(&pol, &obs, &mask, 2, 0);
        reached += (row_norm(&two_hop, 2) > 0.0) as usize;
    }
    // A ReLU layer can occasionally switch every path off; most draws must not.
    assert!(reached >= 18, "two-hop signal reached node 0 in {reached}/20 draws");
}

#[cfg(test)]
mod cases {
    #[test]
    fn baseline_has_zero_mean_under_the_policy() {
        super::baseline_has_zero_mean_under_the_policy()
    }

    #[test]
    fn advantage_ignores_a_constant_shift() {
        super::advantage_ignores_a_constant_shift()
    }

    #[test]
    fn lambda_returns_match_brute_force() {
        super::lambda_returns_match_brute_force()
    }

    #[test]
    fn worked_advantage_example() {
        super::worked_advantage_example()
    }

    #[test]
    fn lambda_extremes_collapse_exactly() {
        super::lambda_extremes_collapse_exactly()
    }

    #[test]
    fn attention_rows_are_distributions_over_neighbours() {
        super::attention_rows_are_distributions_over_neighbours()
    }

    #[test]
    fn no_gradient_crosses_a_non_edge() {
        super::no_gradient_crosses_a_non_edge()
    }

    #[test]
    fn two_layers_reach_two_hops_on_a_path() {
        super::two_layers_reach_two_hops_on_a_path()
    }
}
