use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use nearfar::config::{RunConfig, Scenario};
use nearfar::pipeline::{self, Method, MetricsReport, WindowMetrics};
use nearfar::sequence::{write_sequence, ScanFormat, SimSource};

#[derive(Parser)]
#[command(name = "nearfar", version, about = "Near-to-far traversability learning on simulated drives")]
struct Cli {
    /// Run configuration (TOML). Defaults apply to anything left out.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a simulated sensor sequence to disk.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenario: Option<Scenario>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Binary)]
        scans: Format,
    },
    /// Run every method over the configured scenario and seeds.
    Run {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<Scenario>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Sequence directory for the replay scenario.
        #[arg(long)]
        replay: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
        #[arg(long)]
        pipelined: bool,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Recompute metrics of a finished run from its logs.
    Eval {
        /// A seed directory written by `run`.
        run_dir: PathBuf,
    },
    /// Measure embedding distances and losses to set ensemble thresholds.
    Calibrate {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 30.0)]
        duration: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Binary,
    Text,
}

fn load(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = load(&cli.config)?;
    match cli.command {
        Command::Simulate {
            out,
            scenario,
            seed,
            scans,
        } => {
            let scenario = scenario.unwrap_or(cfg.scenario);
            if scenario == Scenario::Replay {
                bail!("choose a simulated scenario");
            }
            let plan = pipeline::plan_for(&cfg, scenario, seed)?;
            let mut src = SimSource::new(plan, cfg.execution())?;
            let format = match scans {
                Format::Binary => ScanFormat::Binary,
                Format::Text => ScanFormat::Text,
            };
            let ticks = write_sequence(&mut src, &out, format, scenario.name())?;
            println!("wrote {ticks} ticks to {}", out.display());
        }
        Command::Run {
            out,
            scenario,
            seeds,
            replay,
            sequential,
            pipelined,
            dry_run,
        } => {
            if let Some(s) = scenario {
                cfg.scenario = s;
            }
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(r) = replay {
                cfg.scenario = Scenario::Replay;
                cfg.replay_dir = Some(r);
            }
            if out.is_some() {
                cfg.output.dir = out;
            }
            cfg.parallel &= !sequential;
            cfg.pipelined |= pipelined;
            cfg.validate()?;
            if dry_run {
                print!("{}", cfg.to_toml_string()?);
                return Ok(());
            }
            for report in pipeline::run_baselines(&cfg)? {
                print_report(&report);
            }
        }
        Command::Eval { run_dir } => {
            let windows = pipeline::recompute_windows(&run_dir)?;
            let path = run_dir.join("report.json");
            let stored: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            print_windows(&windows);
            let same = windows.iter().zip(&stored.windows).all(|(a, b)| a.methods == b.methods);
            println!("matches report.json: {same}");
            if !same {
                bail!("recomputed metrics differ from {}", path.display());
            }
        }
        Command::Calibrate { seed, duration } => {
            let c = pipeline::calibrate(&cfg, seed, duration)?;
            println!("{}", serde_json::to_string_pretty(&c)?);
            println!("\n[ensemble]\ncd_new = {:.3}\ncd_lidar = {:.3}\nl_usable = {:.2}", c.cd_new, c.cd_lidar, c.l_usable);
        }
    }
    Ok(())
}

fn print_report(r: &MetricsReport) {
    println!("scenario {} seed {}", r.scenario.name(), r.seed);
    print_windows(&r.windows);
}

fn print_windows(windows: &[WindowMetrics]) {
    print!("{:<20}{:>7}{:>7}", "window", "frames", "lidar");
    for m in Method::ALL {
        print!("{:>14}", m.name());
    }
    println!();
    for w in windows {
        print!("{:<20}{:>7}{:>7}", w.window.name, w.eval_frames, w.lidar_frames);
        for m in Method::ALL {
            match &w.method(m).beyond {
                Some(r) => print!("{:>14.3}", r.miou),
                None => print!("{:>14}", "-"),
            }
        }
        println!();
    }
}
