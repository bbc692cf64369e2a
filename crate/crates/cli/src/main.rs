use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use autonomy_client::Client;
use autonomy_core::ccbp::{estimate_length_scale, BetaParams};
use autonomy_core::harness::log::parse_jsonl;
use autonomy_core::harness::{
    decade_grid, run_cost_sweep, run_experiment_with, run_length_scale_protocol, run_limited_demo_experiment, sweep_csv,
    synthetic_length_scale_data, EpisodeLog, LengthScaleProtocol, RunConfig, RunSummary, EPISODES_FILE, EVAL_FILE,
    SUMMARY_FILE,
};
use autonomy_core::protocol::{EventKind, LogFormat, Mode};
use autonomy_core::ControllerId;
use autonomy_service::SessionSettings;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "autonomy", version, about = "Cost-aware controller selection with a demonstration-trained learner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = RunConfig::from_path(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.out = Some(out.clone());
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment headless and write its logs.
    Run(RunArgs),
    /// Limited-demonstration run: capped human episodes, evaluation after every episode.
    Limited(RunArgs),
    /// Repeat a run across failure costs and seeds.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [3.0, 5.0, 7.0])]
        failure_costs: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2, 3, 4])]
        seeds: Vec<u64>,
    },
    /// Fit the kernel length scale by holdout likelihood.
    EstimateL {
        /// Run configuration whose environment and learner are used.
        #[arg(long, required_unless_present = "synthetic")]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Candidate length scales.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        /// Use synthetic outcomes generated with `--true-scale` instead of rollouts.
        #[arg(long)]
        synthetic: bool,
        #[arg(long, default_value_t = 0.03)]
        true_scale: f64,
    },
    /// Summarize a written run directory.
    Report {
        /// Directory holding episodes.jsonl.
        dir: PathBuf,
    },
    /// Serve live sessions over HTTP and WebSocket.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Seconds a live human episode waits before the scripted human takes over.
        #[arg(long, default_value_t = 30.0)]
        human_timeout: f64,
    },
    /// Drive a run through a running server and fetch its logs.
    Remote {
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        server: String,
        #[command(flatten)]
        run: RunArgs,
        /// Wait for operator input during human episodes.
        #[arg(long)]
        live: bool,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Run(args) => {
            let config = args.load()?;
            let summary = run_experiment_with(&config, progress(config.episodes))?;
            finish_run(&config, &summary)
        }
        Command::Limited(args) => {
            let config = args.load()?;
            let summary = run_limited_demo_experiment(&config)?;
            finish_run(&config, &summary)
        }
        Command::Sweep {
            run,
            failure_costs,
            seeds,
        } => {
            let config = run.load()?;
            let rows = run_cost_sweep(&config, &failure_costs, &seeds)?;
            let csv = sweep_csv(&rows);
            print!("{csv}");
            if let Some(dir) = &config.out {
                write_file(dir, "sweep.csv", &csv)?;
            }
            Ok(())
        }
        Command::EstimateL {
            config,
            seed,
            grid,
            synthetic,
            true_scale,
        } => estimate_l(config.as_deref(), seed, grid, synthetic, true_scale),
        Command::Report { dir } => report(&dir),
        Command::Serve { addr, human_timeout } => serve(&addr, human_timeout),
        Command::Remote { server, run, live } => remote(&server, &run, live),
    }
}

fn progress(total: u64) -> impl FnMut(&EpisodeLog) {
    move |log| {
        let k = log.episode + 1;
        if k % 50 == 0 || k == total {
            eprintln!(
                "episode {k}/{total}  cumulative cost {:.0}  last {} {}",
                log.cumulative_cost,
                log.controller,
                if log.success { "success" } else { "failure" }
            );
        }
    }
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn finish_run(config: &RunConfig, summary: &RunSummary) -> Result<()> {
    if let Some(dir) = &config.out {
        summary.write_to(dir)?;
        eprintln!("logs written to {}", dir.display());
    }
    print_summary(&summary.episodes, summary.eval_success_rate());
    Ok(())
}

fn print_summary(episodes: &[EpisodeLog], eval_rate: Option<f64>) {
    let total = episodes.last().map_or(0.0, |l| l.cumulative_cost);
    println!("episodes      {}", episodes.len());
    println!("total cost    {total}");
    let mut by: BTreeMap<ControllerId, (usize, usize)> = BTreeMap::new();
    for l in episodes {
        let e = by.entry(l.controller).or_default();
        e.0 += 1;
        e.1 += l.success as usize;
    }
    for (c, (n, wins)) in by {
        println!("{:<13} {n} episodes, {wins} successes", c.to_string());
    }
    let fallbacks = episodes.iter().filter(|l| l.teleop_fallback).count();
    if fallbacks > 0 {
        println!("teleop fallbacks {fallbacks}");
    }
    if let Some(rate) = eval_rate {
        println!("eval success  {rate:.3}");
    }
}

fn estimate_l(config: Option<&Path>, seed: Option<u64>, grid: Option<Vec<f64>>, synthetic: bool, true_scale: f64) -> Result<()> {
    if synthetic {
        let prior = match config {
            Some(p) => RunConfig::from_path(p)?.ccbp.settings()?.prior,
            None => BetaParams::from_moments(0.8, 0.35)?,
        };
        let grid = grid.unwrap_or_else(|| decade_grid(true_scale));
        let (train, holdout) = synthetic_length_scale_data(seed.unwrap_or(0), true_scale, 50, 50, prior)?;
        let fit = estimate_length_scale(&train, &holdout, &grid, prior)?;
        println!("{}", serde_json::to_string_pretty(&fit)?);
        return Ok(());
    }
    let Some(path) = config else {
        bail!("--config is required unless --synthetic is given");
    };
    let mut config = RunConfig::from_path(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let grid = grid.unwrap_or_else(|| vec![0.003, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0]);
    let report = run_length_scale_protocol(&config, &LengthScaleProtocol::default(), &grid)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn report(dir: &Path) -> Result<()> {
    let path = dir.join(EPISODES_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let episodes: Vec<EpisodeLog> = parse_jsonl(&text).with_context(|| format!("parsing {}", path.display()))?;
    let eval_path = dir.join(EVAL_FILE);
    let eval_rate = match std::fs::read_to_string(&eval_path) {
        Ok(csv) => {
            let rows: Vec<&str> = csv.lines().skip(1).filter(|l| !l.is_empty()).collect();
            let wins = rows.iter().filter(|l| l.split(',').nth(1) == Some("1")).count();
            (!rows.is_empty()).then(|| wins as f64 / rows.len() as f64)
        }
        Err(_) => None,
    };
    print_summary(&episodes, eval_rate);
    Ok(())
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn serve(addr: &str, human_timeout: f64) -> Result<()> {
    if !(human_timeout > 0.0 && human_timeout.is_finite()) {
        bail!("--human-timeout must be a positive number of seconds");
    }
    let settings = SessionSettings {
        human_timeout: Duration::from_secs_f64(human_timeout),
        ..SessionSettings::default()
    };
    runtime()?.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        autonomy_service::serve_until(listener, settings, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}

fn remote(server: &str, args: &RunArgs, live: bool) -> Result<()> {
    let text = std::fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let config = args.load()?;
    let client = Client::new(server);
    runtime()?.block_on(async {
        // Send the file as written unless flags changed it, so the server's
        // diagnostics refer to the user's own text.
        let id = if args.seed.is_none() && args.out.is_none() {
            client.create_session_raw(text).await?
        } else {
            client.create_session(&config).await?
        };
        eprintln!("session {id}");
        if live {
            client.set_mode(&id, Mode::LiveHuman).await?;
        }
        let mut events = client.events(&id).await?;
        let total = config.episodes;
        let mut note = progress(total);
        while let Some(ev) = events.next().await {
            match ev?.kind {
                EventKind::EpisodeEnd { log } => note(&log),
                EventKind::AwaitingHuman { episode, step, .. } if step == 0 => {
                    eprintln!("episode {} waits for the operator", episode + 1);
                }
                EventKind::RunError { message } => bail!("server stopped the run: {message}"),
                EventKind::RunEnd { .. } => break,
                _ => {}
            }
        }
        let jsonl = client.log(&id, LogFormat::Episodes).await?;
        if let Some(dir) = &config.out {
            write_file(dir, EPISODES_FILE, &jsonl)?;
            write_file(dir, SUMMARY_FILE, &client.log(&id, LogFormat::Summary).await?)?;
            let eval = client.log(&id, LogFormat::Eval).await?;
            if eval.lines().count() > 1 {
                write_file(dir, EVAL_FILE, &eval)?;
            }
            eprintln!("logs written to {}", dir.display());
        }
        let episodes: Vec<EpisodeLog> = parse_jsonl(&jsonl)?;
        print_summary(&episodes, None);
        Ok(())
    })
}
