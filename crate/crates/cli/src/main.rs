mod alloc;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use fmocc::config::RunConfig;
use fmocc::metrics::miou;
use fmocc::pipeline::{self, Split, CONFIG_SNAPSHOT, FINAL_CHECKPOINT};
use fmocc::scene::{save_scene, Scene};

#[global_allocator]
static ALLOC: alloc::CountingAlloc = alloc::CountingAlloc::new();

#[derive(Parser)]
#[command(name = "fmocc", version, about = "Flow-matching occupancy refinement on synthetic voxel scenes")]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out_dir` in the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training and evaluation scenes into <out>/data.
    Gen {
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_eval: Option<usize>,
    },
    /// Train a model into <out>/runs/<run>.
    Train {
        /// Run name; defaults to the config file stem.
        #[arg(long)]
        run: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from the newest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on masked inputs.
    Eval {
        #[arg(long)]
        run: Option<String>,
        /// Defaults to the run's final checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
        /// Repeatable; defaults to 0.
        #[arg(long = "mask-ratio")]
        mask_ratios: Vec<f64>,
        /// Use every ratio in `eval.mask_ratios`.
        #[arg(long, conflicts_with = "mask_ratios")]
        sweep: bool,
    },
    /// Predict labels for one scene file.
    Infer {
        #[arg(long)]
        run: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Output scene file holding the predicted labels.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Time the scan and end-to-end inference; writes <out>/bench.csv.
    Bench,
    /// Render robustness and loss curves from metrics files or run directories.
    Plot {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Defaults to <out>/plots.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, fallback) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if p.is_file() => RunConfig::load(p)?,
        _ => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_name(cli: &Cli, run: &Option<String>) -> String {
    run.clone().unwrap_or_else(|| {
        cli.config
            .as_ref()
            .and_then(|p| p.file_stem())
            .and_then(|s| s.to_str())
            .unwrap_or("default")
            .to_string()
    })
}

/// The run directory under the configured output root. It is resolved
/// before the config is loaded so the run's own snapshot can serve as the
/// fallback config.
fn run_dir(cli: &Cli, run: &Option<String>) -> Result<PathBuf> {
    let root = match &cli.out {
        Some(o) => o.clone(),
        None => match &cli.config {
            Some(p) => RunConfig::load(p)?.out_dir,
            None => RunConfig::default().out_dir,
        },
    };
    Ok(root.join("runs").join(run_name(cli, run)))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen { n_train, n_eval } => {
            let mut cfg = load_config(cli, None)?;
            if let Some(n) = n_train {
                cfg.data.n_train = *n;
            }
            if let Some(n) = n_eval {
                cfg.data.n_eval = *n;
            }
            cfg.validate()?;
            let dir = cfg.data_dir();
            let m = pipeline::generate_dataset(&cfg, &dir)?;
            println!(
                "wrote {} scenes to {} (scene hash {})",
                m.train_seeds.len() + m.eval_seeds.len(),
                dir.display(),
                m.scene_hash
            );
        }
        Command::Train { run, data, resume } => {
            let cfg = load_config(cli, None)?;
            let dir = cfg.runs_dir().join(run_name(cli, run));
            let data = data.clone().unwrap_or_else(|| cfg.data_dir());
            let t = pipeline::train_run(&cfg, &data, &dir, *resume)?;
            if let Some(last) = t.state.history.last() {
                println!(
                    "trained {} steps; last flow_loss {} ce_loss {}; checkpoints in {}",
                    t.state.step,
                    last.flow_loss,
                    last.ce_loss,
                    pipeline::checkpoint_dir(&dir).display()
                );
            }
        }
        Command::Eval {
            run,
            checkpoint,
            data,
            split,
            mask_ratios,
            sweep,
        } => {
            let dir = run_dir(cli, run)?;
            let cfg = load_config(cli, Some(&dir.join(CONFIG_SNAPSHOT)))?;
            let ck = checkpoint
                .clone()
                .unwrap_or_else(|| pipeline::checkpoint_dir(&dir).join(FINAL_CHECKPOINT));
            let data = data.clone().unwrap_or_else(|| cfg.data_dir());
            let ratios = if *sweep {
                cfg.eval.mask_ratios.clone()
            } else if mask_ratios.is_empty() {
                vec![0.0]
            } else {
                mask_ratios.clone()
            };
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Eval => Split::Eval,
            };
            let out = dir.join("eval");
            let name = run_name(cli, run);
            for (ratio, r) in pipeline::eval_run(&cfg, &ck, &data, split, &ratios, &out, &name)? {
                println!(
                    "mask_ratio {ratio}: miou {:.4} rayiou 1m {:.4} 2m {:.4} 4m {:.4} mean {:.4}",
                    r.miou, r.rayiou_1m, r.rayiou_2m, r.rayiou_4m, r.rayiou_mean
                );
            }
            println!("metrics written to {}", out.display());
        }
        Command::Infer {
            run,
            checkpoint,
            scene,
            steps,
            output,
        } => {
            let dir = run_dir(cli, run)?;
            let cfg = load_config(cli, Some(&dir.join(CONFIG_SNAPSHOT)))?;
            let ck = checkpoint
                .clone()
                .unwrap_or_else(|| pipeline::checkpoint_dir(&dir).join(FINAL_CHECKPOINT));
            let steps = steps.unwrap_or(cfg.inference_steps());
            if steps == 0 {
                bail!("--steps must be at least 1");
            }
            let (input, pred) = pipeline::infer_scene(&cfg, &ck, scene, steps)?;
            let score = miou(&pred, &input.labels)?;
            let stem = scene.file_stem().and_then(|s| s.to_str()).unwrap_or("scene");
            let output = output.clone().unwrap_or_else(|| dir.join("infer").join(format!("{stem}.pred.fmoc")));
            if let Some(parent) = output.parent() {
                fs::create_dir_all(parent).with_context(|| parent.display().to_string())?;
            }
            let predicted = Scene {
                labels: pred.clone(),
                ..input
            };
            save_scene(&output, &predicted)?;
            println!("class counts {:?}", pred.class_counts());
            println!("miou against stored labels {:.4}", score.miou);
            println!("prediction written to {}", output.display());
        }
        Command::Bench => {
            let cfg = load_config(cli, None)?;
            let rows = pipeline::run_bench(&cfg, &ALLOC)?;
            let csv = pipeline::bench_csv(&rows);
            fs::create_dir_all(&cfg.out_dir).with_context(|| cfg.out_dir.display().to_string())?;
            let path = cfg.out_dir.join("bench.csv");
            fs::write(&path, &csv).with_context(|| path.display().to_string())?;
            print!("{csv}");
            let time = |n| rows.iter().find(|r| r.kind == "ssm_scan" && r.size == n).map(|r| r.median_seconds);
            if let (Some(a), Some(b)) = (time(1024), time(4096)) {
                println!("ssm_scan time ratio L=4096/L=1024: {:.3}", b / a);
            }
        }
        Command::Plot { inputs, dest } => {
            let cfg = load_config(cli, None)?;
            let dest = dest.clone().unwrap_or_else(|| cfg.out_dir.join("plots"));
            for f in plot::render(inputs, &dest)? {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}
