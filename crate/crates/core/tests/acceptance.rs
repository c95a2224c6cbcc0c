//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! The quick criteria reuse the checks of the sibling test files and fail
//! the run when they fail. The two learning criteria train real models for
//! about an hour in total; their outcome is reported but does not fail the
//! run, since it is an empirical result rather than a correctness check.

#[path = "properties.rs"]
mod properties;
#[path = "reproducibility.rs"]
mod reproducibility;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ccoma::env::traffic::TrafficMode;
use ccoma::train::eval::evaluate;
use ccoma::train::{Algorithm, EnvChoice, NoObserver, Selection, TrainConfig, Trainer};

struct Outcome {
    pass: bool,
    detail: String,
}

fn checks(list: &[(&str, fn())]) -> Outcome {
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = Vec::new();
    for (name, check) in list {
        if let Err(e) = catch_unwind(AssertUnwindSafe(check)) {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            failed.push(format!("{name}: {msg}"));
        }
    }
    std::panic::set_hook(hook);
    Outcome {
        pass: failed.is_empty(),
        detail: if failed.is_empty() {
            format!("{} checks", list.len())
        } else {
            failed.join("; ")
        },
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut out = checks(&[
        ("matmul", gradients::matmul_and_transpose),
        ("elementwise", gradients::elementwise_binary),
        ("scalar ops", gradients::scalar_ops),
        ("concat/slice/gather", gradients::concat_slice_gather),
        ("reductions", gradients::reductions),
        ("activations", gradients::activations),
        ("softmaxes", gradients::softmaxes),
        ("actor", gradients::full_actor_graph),
        ("critic", gradients::full_critic_graph),
        ("single agent", gradients::single_agent_actor_critic_gradient),
    ]);
    let took = start.elapsed();
    out.pass &= took < Duration::from_secs(120);
    out.detail = format!("{}, {:.1}s", out.detail, took.as_secs_f64());
    out
}

/// Trains with the default configuration for `steps` environment steps.
fn train(algo: Algorithm, seed: u64, env: &EnvChoice, steps: u64) -> Trainer<f32> {
    let config = TrainConfig { algo, seed, total_steps: steps, record_wall_time: false, ..TrainConfig::default() };
    let mut trainer = Trainer::<f32>::new(config, env.clone()).expect("valid configuration");
    trainer.run(None, "", &mut |_| {}).expect("training runs");
    trainer
}

fn success(trainer: &Trainer<f32>, episodes: usize) -> f64 {
    trainer.evaluate(episodes).expect("evaluation runs").success_rate.expect("traffic defines success")
}

fn easy_traffic_learning() -> Outcome {
    let env = EnvChoice::traffic(TrafficMode::Easy);
    let start = Instant::now();
    let trainer = train(Algorithm::Ccoma, 0, &env, 200_000);
    let took = start.elapsed();
    let learned = success(&trainer, 500);
    let (random, _) = evaluate(
        &trainer.policy,
        &env,
        500,
        trainer.config.seed,
        trainer.step(),
        Selection::Explore(1.0),
        trainer.comm_mode(),
        &mut NoObserver,
    )
    .expect("evaluation runs");
    let random = random.success_rate.expect("traffic defines success");
    Outcome {
        pass: learned >= 0.9 && learned - random >= 0.4 && took < Duration::from_secs(3600),
        detail: format!(
            "greedy success {:.1}%, uniform random {:.1}%, trained in {:.0}s",
            100.0 * learned,
            100.0 * random,
            took.as_secs_f64()
        ),
    }
}

fn hard_traffic_ordering() -> Outcome {
    let env = EnvChoice::traffic(TrafficMode::Hard);
    let algos = [Algorithm::Ccoma, Algorithm::Coma, Algorithm::IqlComm];
    let mut means = Vec::new();
    let mut detail = Vec::new();
    for algo in algos {
        let rates: Vec<f64> = (0..3).map(|seed| success(&train(algo, seed, &env, 300_000), 500)).collect();
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        let per_seed: Vec<String> = rates.iter().map(|r| format!("{:.1}", 100.0 * r)).collect();
        detail.push(format!("{algo} {:.1}% ({})", 100.0 * mean, per_seed.join("/")));
        means.push(mean);
    }
    Outcome {
        pass: means[0] >= means[1] && means[1] >= means[2],
        detail: detail.join(", "),
    }
}

fn main() {
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        (
            "counterfactual advantage",
            Box::new(|| {
                checks(&[
                    ("zero mean", properties::baseline_has_zero_mean_under_the_policy),
                    ("shift", properties::advantage_ignores_a_constant_shift),
                    ("worked example", properties::worked_advantage_example),
                ])
            }),
        ),
        (
            "lambda returns",
            Box::new(|| {
                checks(&[
                    ("brute force", properties::lambda_returns_match_brute_force),
                    ("extremes", properties::lambda_extremes_collapse_exactly),
                ])
            }),
        ),
        (
            "masked attention",
            Box::new(|| {
                checks(&[
                    ("rows", properties::attention_rows_are_distributions_over_neighbours),
                    ("non-edges", properties::no_gradient_crosses_a_non_edge),
                    ("two hops", properties::two_layers_reach_two_hops_on_a_path),
                ])
            }),
        ),
        (
            "environment oracles",
            Box::new(|| {
                checks(&[
                    ("collisions", env_oracles::traffic_collisions_match_occupancy_scan),
                    ("gas", env_oracles::traffic_cars_move_only_on_gas),
                    ("line reward", env_oracles::manufacture_reward_matches_formula_and_buffer_is_conserved),
                    ("maintain only", env_oracles::severely_worn_machines_can_only_be_maintained),
                    ("determinism", env_oracles::fixed_seeds_give_bit_identical_trajectories),
                    ("snapshot", env_oracles::traffic_snapshot_resumes_identically),
                ])
            }),
        ),
        ("traffic easy learning", Box::new(easy_traffic_learning)),
        ("traffic hard ordering", Box::new(hard_traffic_ordering)),
        (
            "manufacture sanity",
            Box::new(|| {
                checks(&[
                    ("all stop", manufacture_policies::all_stop_pays_only_the_idle_fee),
                    ("maintenance", manufacture_policies::timely_maintenance_beats_running_to_failure),
                ])
            }),
        ),
        (
            "checkpoint and metrics formats",
            Box::new(|| {
                checks(&[
                    ("rerun", reproducibility::identical_seeds_give_identical_files),
                    ("round trip", reproducibility::checkpoint_bytes_survive_a_round_trip),
                    ("saved eval", reproducibility::saved_policy_evaluates_like_the_live_one),
                    ("resume", reproducibility::resumed_training_matches_an_uninterrupted_run),
                ])
            }),
        ),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let reported_only = [6, 7];
    let mut all_pass = true;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let outcome = run();
        all_pass &= outcome.pass || reported_only.contains(&n);
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!("{verdict} criterion {n} ({name}): {}", outcome.detail);
    }
    if !all_pass {
        std::process::exit(1);
    }
}
