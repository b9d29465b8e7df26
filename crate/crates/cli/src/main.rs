use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mlr_cli::ablation::{render_table, run_ablation, write_csv, Grid};
use mlr_cli::config::{load_config, parse_override};
use mlr_cli::error::{CliError, Result};
use mlr_cli::plot::{emit_plots, plot_profiles, profile_curves};
use mlr_cli::runner::{run_pretrain, run_train, Trainer};

#[derive(Parser)]
#[command(name = "mlr", about = "Train and evaluate masked latent reconstruction agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Replace the configured seed list with one seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate the policy stored in a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
    /// Run a grid of config overrides and print the score table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        grid: PathBuf,
    },
    /// Plot evaluation curves from metric logs and optional score profiles.
    Plot {
        #[arg(long = "log", required = true)]
        logs: Vec<PathBuf>,
        /// Score matrix CSV (header of task ids, one row per run).
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
    /// Train an encoder on the MLR objective alone over random-policy data.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the fully resolved configuration.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn overrides(args: &ConfigArgs) -> Result<Vec<(String, String)>> {
    let mut pairs = args.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    if let Some(seed) = args.seed {
        pairs.push(("seeds".into(), format!("[{seed}]")));
    }
    Ok(pairs)
}

fn resolve(args: &ConfigArgs) -> Result<mlr_cli::ExperimentConfig> {
    let mut cfg = load_config(args.config.as_deref(), &overrides(args)?)?;
    if let Some(out) = &args.out {
        cfg.output.dir = out.display().to_string();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, resume } => {
            let summaries = match resume {
                Some(ck) => {
                    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("runs/resumed"));
                    vec![Trainer::resume(&ck, Some(&out))?.run()?]
                }
                None => {
                    let c = resolve(&cfg)?;
                    run_train(&c, Some(Path::new(&c.output.dir)))?
                }
            };
            for s in summaries {
                println!(
                    "seed {}: {} env steps, {} updates, final return {}",
                    s.seed,
                    s.env_steps,
                    s.updates,
                    s.final_return.map_or_else(|| "-".into(), |r| format!("{r:.3}"))
                );
            }
        }
        Command::Eval { checkpoint, episodes } => {
            let mut t = Trainer::resume(&checkpoint, None)?;
            let stats = t.evaluate(episodes)?;
            println!("{}", serde_json::json!({ "mean": stats.mean, "std": stats.std, "episodes": stats.episodes }));
        }
        Command::Ablate { cfg, grid } => {
            let text = std::fs::read_to_string(&grid).map_err(|_| CliError::FileNotFound(grid.clone()))?;
            let g = Grid::parse(&text)?;
            let mut base = match &cfg.config {
                Some(p) => mlr_cli::config::parse_pairs(
                    &std::fs::read_to_string(p).map_err(|_| CliError::FileNotFound(p.clone()))?,
                )?,
                None => Vec::new(),
            };
            base.extend(overrides(&cfg)?);
            let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("runs/ablation"));
            let rows = run_ablation(&base, &g, Some(&out));
            println!("{}", render_table(&g, &rows));
            std::fs::create_dir_all(&out)?;
            write_csv(&g, &rows, std::fs::File::create(out.join("ablation.csv"))?)?;
        }
        Command::Plot { logs, scores, out } => {
            let (path, _) = emit_plots(&logs, &out)?;
            println!("{}", path.display());
            if let Some(s) = scores {
                let f = std::fs::File::open(&s).map_err(|_| CliError::FileNotFound(s.clone()))?;
                let mut r = csv::Reader::from_reader(f);
                let n = r.headers()?.len();
                let m = mlr::eval::ScoreMatrix::read_csv(std::fs::File::open(&s)?, vec![(0.0, 1.0); n])?;
                let taus: Vec<f64> = (0..=40).map(|i| i as f64 * 0.05).collect();
                let curves = profile_curves(&[("scores".into(), m.scores)], &taus);
                let p = out.join("performance_profile.svg");
                plot_profiles(&curves, &p)?;
                println!("{}", p.display());
            }
        }
        Command::Pretrain { cfg } => {
            let c = resolve(&cfg)?;
            for &seed in &c.seeds {
                let s = run_pretrain(&c, seed)?;
                println!(
                    "seed {seed}: {} updates, final loss {}, regression accuracy {:.3} -> {:.3}",
                    s.losses.len(),
                    s.losses.last().map_or_else(|| "-".into(), |l| format!("{l:.4}")),
                    s.regression_before,
                    s.regression_after
                );
            }
        }
        Command::Config { cfg } => print!("{}", resolve(&cfg)?.to_text()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
