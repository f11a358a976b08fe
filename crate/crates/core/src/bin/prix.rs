use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use prix::checkpoint::Checkpoint;
use prix::config::RunConfig;
use prix::planner::Trajectory;
use prix::score::MetricConfig;
use prix::sim::{generate_dataset, read_scenes, write_scenes, SceneKind};
use prix::train::{ablate, ablation_csv, evaluate_model, log_csv, score_trajectories, train, EvalSummary, Study};
use prix::Error;

#[derive(Parser)]
#[command(name = "prix", version, about = "Camera-only diffusion planner: train, evaluate, ablate, score")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write a checkpoint plus a per-epoch CSV log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the checkpoint path with a .csv extension.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Plan on every scene and write Table-1 metrics plus a per-scene CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        /// Defaults to the metrics path with a .csv extension.
        #[arg(long)]
        per_scene: Option<PathBuf>,
    },
    /// Train and evaluate every variant of a study.
    Ablate {
        #[arg(long)]
        study: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Timed passes per variant for the throughput columns.
        #[arg(long, default_value_t = 100)]
        timing_runs: usize,
    },
    /// Score externally produced trajectories.
    Score {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        submission: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
        /// Optional metric config JSON.
        #[arg(long)]
        metric_config: Option<PathBuf>,
    },
    /// Generate a JSON-lines scene file. `--kind all` cycles every kind.
    GenScenes {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Format(_) | Error::Json(_) | Error::Io(_) | Error::Contract(_) | Error::Shape(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("prix: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write(path: &Path, text: &str) -> prix::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn run(cmd: Cmd) -> prix::Result<()> {
    match cmd {
        Cmd::Train { config, out, log } => {
            let cfg = RunConfig::load(&config)?;
            let scenes = cfg.data.train_split()?;
            let res = train(&cfg, &scenes)?;
            write(&log.unwrap_or_else(|| out.with_extension("csv")), &log_csv(&res.log))?;
            Checkpoint::from_model(&res.model, &cfg, res.step).save(&out)?;
            if let Some(msg) = res.aborted {
                return Err(Error::NonFinite(format!("{msg}; last good parameters saved to {}", out.display())));
            }
            if let Some(last) = res.log.last() {
                println!("trained {} steps, final epoch loss {:.4}", res.step, last.total);
            }
            Ok(())
        }
        Cmd::Eval {
            ckpt,
            scenes,
            metrics,
            per_scene,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let mut cfg = ck.config.clone();
            cfg.apply_env()?;
            let model = ck.to_model()?;
            let scenes = read_scenes(&scenes)?;
            let summary = evaluate_model(&model, &scenes, &cfg)?;
            finish(&summary, &metrics, per_scene)
        }
        Cmd::Ablate {
            study,
            config,
            out,
            timing_runs,
        } => {
            let study: Study = study.parse()?;
            let cfg = RunConfig::load(&config)?;
            let rows = ablate(study, &cfg, timing_runs)?;
            write(&out, &ablation_csv(&rows))
        }
        Cmd::Score {
            scenes,
            submission,
            metrics,
            metric_config,
        } => {
            let mcfg = match metric_config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                    serde_json::from_str::<MetricConfig>(&text).map_err(|e| Error::Config(e.to_string()))?
                }
                None => MetricConfig::default(),
            };
            let scenes = read_scenes(&scenes)?;
            let subs = read_submission(&submission)?;
            let missing: Vec<String> = (0..scenes.len()).filter(|i| !subs.contains_key(i)).map(|i| i.to_string()).collect();
            if !missing.is_empty() {
                return Err(Error::Data(format!("submission lacks scene_id {}", missing.join(", "))));
            }
            if let Some(extra) = subs.keys().find(|&&k| k >= scenes.len()) {
                return Err(Error::Data(format!("scene_id {extra} is not in the scene file")));
            }
            let trajs: Vec<Trajectory> = subs.into_values().collect();
            let summary = score_trajectories(&scenes, &trajs, &mcfg)?;
            finish(&summary, &metrics, None)
        }
        Cmd::GenScenes { kind, count, seed, out } => {
            let kinds = if kind == "all" {
                SceneKind::ALL.to_vec()
            } else {
                vec![kind.parse::<SceneKind>()?]
            };
            write_scenes(&out, &generate_dataset(&kinds, count, seed))
        }
    }
}

fn finish(summary: &EvalSummary, metrics: &Path, per_scene: Option<PathBuf>) -> prix::Result<()> {
    write(metrics, &summary.metrics_json())?;
    write(&per_scene.unwrap_or_else(|| metrics.with_extension("csv")), &summary.per_scene_csv())?;
    print!("{}", summary.metrics_json());
    if !summary.errors.is_empty() {
        let ids: Vec<String> = summary.errors.iter().map(|(i, e)| format!("{i} ({e})")).collect();
        return Err(Error::Data(format!("scenes failed to score: {}", ids.join("; "))));
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    scene_id: usize,
    waypoints: Vec<[f64; 3]>,
}

fn read_submission(path: &Path) -> prix::Result<BTreeMap<usize, Trajectory>> {
    let f = std::fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: String| Error::Data(format!("{}:{}: {e}", path.display(), i + 1));
        let e: Entry = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        let t = Trajectory::new(e.waypoints).map_err(|e| at(e.to_string()))?;
        if out.insert(e.scene_id, t).is_some() {
            return Err(at(format!("duplicate scene_id {}", e.scene_id)));
        }
    }
    Ok(out)
}
