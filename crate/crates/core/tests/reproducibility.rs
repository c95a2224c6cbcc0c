//! Byte-level reproducibility of training runs and checkpoint files.

use std::fs;
use std::path::Path;

use ccoma::checkpoint;
use ccoma::env::manufacture::ManufactureConfig;
use ccoma::env::traffic::TrafficMode;
use ccoma::train::eval::evaluate_greedy;
use ccoma::train::trainer::{policy_from_entries, CHECKPOINT_FILE, METRICS_FILE};
use ccoma::train::{Algorithm, CommMode, EnvChoice, TrainConfig, Trainer};

fn small(algo: Algorithm, total_steps: u64) -> TrainConfig {
    TrainConfig {
        algo,
        total_steps,
        embed_dim: 8,
        n_heads: 2,
        head_dim: 4,
        hidden_dim: 8,
        critic_hidden: 16,
        eval_period: 640,
        eval_episodes: 8,
        record_wall_time: false,
        ..TrainConfig::default()
    }
}

fn train_into(dir: &Path, config: TrainConfig, env: EnvChoice) -> Trainer<f32> {
    let mut trainer = Trainer::<f32>::new(config, env).unwrap();
    trainer.run(Some(dir), "# test run\n", &mut |_| {}).unwrap();
    trainer
}

pub fn identical_seeds_give_identical_files() {
    let envs = [
        EnvChoice::traffic(TrafficMode::Easy),
        EnvChoice::Manufacture(ManufactureConfig::default()),
    ];
    for env in envs {
        for algo in [Algorithm::Ccoma, Algorithm::Coma, Algorithm::IqlComm] {
            let dir = tempfile::tempdir().unwrap();
            let (a, b) = (dir.path().join("a"), dir.path().join("b"));
            train_into(&a, small(algo, 1280), env.clone());
            train_into(&b, small(algo, 1280), env.clone());
            for file in [METRICS_FILE, CHECKPOINT_FILE, "manifest.json"] {
                let (x, y) = (fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap());
                assert!(!x.is_empty());
                assert_eq!(x, y, "{algo} on {} differs in {file}", env.name());
            }
        }
    }
}

pub fn checkpoint_bytes_survive_a_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    train_into(dir.path(), small(Algorithm::Ccoma, 320), EnvChoice::traffic(TrafficMode::Easy));
    let path = dir.path().join(CHECKPOINT_FILE);
    let bytes = fs::read(&path).unwrap();
    let stored = checkpoint::load(&path).unwrap();
    assert_eq!(checkpoint::encode_stored(&stored).unwrap(), bytes);
    let typed = checkpoint::load_as::<f32>(&path).unwrap();
    assert_eq!(checkpoint::encode(&typed).unwrap(), bytes);

    let wide: Vec<_> = typed.iter().map(|(n, t)| (n.clone(), t.cast::<f64>())).collect();
    let wide_bytes = checkpoint::encode(&wide).unwrap();
    let back = checkpoint::decode(&wide_bytes).unwrap();
    assert_eq!(checkpoint::encode_stored(&back).unwrap(), wide_bytes);
}

pub fn saved_policy_evaluates_like_the_live_one() {
    let dir = tempfile::tempdir().unwrap();
    let env = EnvChoice::traffic(TrafficMode::Easy);
    let config = small(Algorithm::Ccoma, 640);
    let trainer = train_into(dir.path(), config.clone(), env.clone());
    let entries = checkpoint::load_as::<f32>(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    let spec = env.spec().unwrap();
    let restored = policy_from_entries(config.policy_config(&spec), &entries).unwrap();
    let live = trainer.evaluate(96).unwrap();
    let saved = evaluate_greedy(&restored, &env, 96, config.seed, trainer.step(), CommMode::Graph).unwrap();
    assert_eq!(live.success_rate, saved.success_rate);
    assert_eq!(live.mean_return.to_bits(), saved.mean_return.to_bits());
}

pub fn resumed_training_matches_an_uninterrupted_run() {
    let env = EnvChoice::traffic(TrafficMode::Easy);
    let dir = tempfile::tempdir().unwrap();
    let (whole, part) = (dir.path().join("whole"), dir.path().join("part"));
    train_into(&whole, small(Algorithm::Ccoma, 1280), env.clone());
    train_into(&part, small(Algorithm::Ccoma, 640), env.clone());

    let mut resumed = Trainer::<f32>::new(small(Algorithm::Ccoma, 1280), env).unwrap();
    resumed.resume(&part).unwrap();
    assert_eq!(resumed.step(), 640);
    resumed.run(Some(&part), "# test run\n", &mut |_| {}).unwrap();
    assert_eq!(
        fs::read(whole.join(CHECKPOINT_FILE)).unwrap(),
        fs::read(part.join(CHECKPOINT_FILE)).unwrap()
    );
}

#[cfg(test)]
mod cases {
    #[test]
    fn identical_seeds_give_identical_files() {
        super::identical_seeds_give_identical_files()
    }

    #[test]
    fn checkpoint_bytes_survive_a_round_trip() {
        super::checkpoint_bytes_survive_a_round_trip()
    }

    #[test]
    fn saved_policy_evaluates_like_the_live_one() {
        super::saved_policy_evaluates_like_the_live_one()
    }

    #[test]
    fn resumed_training_matches_an_uninterrupted_run() {
        super::resumed_training_matches_an_uninterrupted_run()
    }
}
