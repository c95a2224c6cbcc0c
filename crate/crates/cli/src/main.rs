use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccoma::analysis::AnalysisGrid;
use ccoma::checkpoint;
use ccoma::config::{RunConfig, RunSettings};
use ccoma::policy::CommPolicy;
use ccoma::trace::TraceWriter;
use ccoma::train::eval::evaluate;
use ccoma::train::trainer::{policy_from_entries, Manifest, MANIFEST_FILE};
use ccoma::train::{CommMode, EnvChoice, NoObserver, RolloutObserver, Selection, Trainer};
use ccoma::Error;
use clap::{Parser, Subcommand};
use serde_json::json;

/// Train and inspect communicating multi-agent policies.
#[derive(Parser)]
#[command(name = "ccoma", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.jsonl, checkpoint.bin and manifest.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        algo: Option<String>,
        /// traffic, traffic-easy, traffic-hard, traffic-harder or manufacture
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a saved checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 96)]
        episodes: usize,
        /// Pick the most likely action instead of sampling.
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Write a JSON-lines trace of every environment step.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-cell brake probability and message norm grids for a traffic model.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "traffic")]
        env: String,
        #[arg(long, default_value_t = 500)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(command: Command) -> ccoma::Result<()> {
    match command {
        Command::Train {
            config,
            algo,
            env,
            seed,
            steps,
            out,
        } => {
            let mut raw = RunConfig::load(&config)?;
            if let Some(a) = algo {
                raw.set("train", "algo", &a)?;
            }
            if let Some(e) = env {
                raw.set_env(&e)?;
            }
            if let Some(s) = seed {
                raw.set("train", "seed", &s.to_string())?;
            }
            if let Some(n) = steps {
                raw.set("train", "total_steps", &n.to_string())?;
            }
            let settings = raw.resolve()?;
            let out = out.unwrap_or_else(|| {
                PathBuf::from("runs").join(format!(
                    "{}-{}-{}-s{}",
                    settings.train.algo,
                    settings.env.name(),
                    settings.env.mode(),
                    settings.train.seed
                ))
            });
            let text = settings.to_text();
            let mut trainer = Trainer::<f32>::new(settings.train, settings.env)?;
            trainer.run(Some(&out), &text, &mut |rec| {
                if let Ok(line) = serde_json::to_string(rec) {
                    println!("{line}");
                }
            })?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            episodes,
            greedy,
            seed,
            trace,
            out,
        } => {
            let (settings, policy, manifest) = load_run(&checkpoint)?;
            let comm = comm_mode(&settings);
            let selection = if greedy { Selection::Greedy } else { Selection::Sample };
            let seed = seed.unwrap_or(settings.train.seed);
            let mut tracer = match &trace {
                Some(p) => Some(TraceWriter::new(BufWriter::new(File::create(p)?))),
                None => None,
            };
            let mut quiet = NoObserver;
            let observer: &mut dyn RolloutObserver = match tracer.as_mut() {
                Some(t) => t,
                None => &mut quiet,
            };
            let (metrics, eps) = evaluate(
                &policy,
                &settings.env,
                episodes,
                seed,
                manifest.step,
                selection,
                comm,
                observer,
            )?;
            if let Some(t) = tracer {
                t.finish()?;
            }
            let dir = out.unwrap_or_else(|| parent_dir(&checkpoint));
            fs::create_dir_all(&dir)?;
            let summary = json!({
                "checkpoint": checkpoint.display().to_string(),
                "step": manifest.step,
                "algo": manifest.algo.to_string(),
                "env": settings.env.name(),
                "mode": settings.env.mode(),
                "greedy": greedy,
                "episodes": metrics.episodes,
                "success_rate": metrics.success_rate,
                "mean_return": metrics.mean_return,
            });
            fs::write(dir.join("eval.json"), format!("{summary:#}\n"))?;
            let mut lines = BufWriter::new(File::create(dir.join("eval_episodes.jsonl"))?);
            for (i, e) in eps.iter().enumerate() {
                let rec = json!({
                    "episode": i,
                    "seed": e.seed,
                    "return": e.total_return(),
                    "success": e.success,
                });
                writeln!(lines, "{rec}")?;
            }
            lines.flush()?;
            println!("{summary}");
            Ok(())
        }
        Command::Analyze {
            checkpoint,
            env,
            episodes,
            seed,
            out,
        } => {
            if env != "traffic" {
                return Err(Error::Config(format!("analyze supports --env traffic, got {env}")));
            }
            let (settings, policy, manifest) = load_run(&checkpoint)?;
            let EnvChoice::Traffic(tc) = &settings.env else {
                return Err(Error::Config("checkpoint was not trained on traffic".into()));
            };
            let table = tc.route_table();
            let mut grid = AnalysisGrid::new(table.rows, table.cols);
            evaluate(
                &policy,
                &settings.env,
                episodes,
                seed.unwrap_or(settings.train.seed),
                manifest.step,
                Selection::Greedy,
                comm_mode(&settings),
                &mut grid,
            )?;
            let dir = out.unwrap_or_else(|| parent_dir(&checkpoint));
            fs::create_dir_all(&dir)?;
            let brake = dir.join("brake_probability.csv");
            let norm = dir.join("message_norm.csv");
            fs::write(&brake, grid.to_csv(&grid.brake_probability()))?;
            fs::write(&norm, grid.to_csv(&grid.mean_message_norm()))?;
            println!("{}\n{}", brake.display(), norm.display());
            Ok(())
        }
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn comm_mode(settings: &RunSettings) -> CommMode {
    if settings.train.algo.communicates() {
        CommMode::Graph
    } else {
        CommMode::Isolated
    }
}

fn load_run(checkpoint: &Path) -> ccoma::Result<(RunSettings, CommPolicy<f32>, Manifest)> {
    let manifest = Manifest::read(&parent_dir(checkpoint).join(MANIFEST_FILE))?;
    let settings = RunConfig::parse(&manifest.config)?.resolve()?;
    let entries = checkpoint::load_as::<f32>(checkpoint)?;
    let spec = settings.env.spec()?;
    let policy = policy_from_entries(settings.train.policy_config(&spec), &entries)?;
    Ok((settings, policy, manifest))
}
