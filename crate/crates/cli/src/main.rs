use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use revstress::run::{self, ContourBounds, RunConfig, TargetName};
use revstress::Error;

#[derive(Parser)]
#[command(name = "revstress", version, about = "Reverse stress testing for credit portfolios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Seed for every random stream; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; without one, results go to stdout.
    #[arg(long, env = "REVSTRESS_OUT_DIR")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Neighbourhood,
    NearOptimal,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the most plausible breaching scenario.
    DesignPoint {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        starts: Option<usize>,
    },
    /// Design point plus a diverse list of breaching scenarios around it.
    ScenarioList {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        starts: Option<usize>,
        #[arg(long, value_enum)]
        target: Option<TargetArg>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Candidate pool size.
        #[arg(long)]
        pool: Option<usize>,
        /// Number of scenarios in the list.
        #[arg(long)]
        list: Option<usize>,
        /// Drivers reported per scenario.
        #[arg(long)]
        drivers: Option<usize>,
    },
    /// Grid of d², ratio, breach and membership over (g, x1).
    Contour {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 101)]
        resolution: usize,
        /// g range as LO,HI.
        #[arg(long, value_parser = parse_range)]
        g_range: Option<(f64, f64)>,
        /// x1 range as LO,HI.
        #[arg(long, value_parser = parse_range)]
        x_range: Option<(f64, f64)>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Load every input and run consistency checks without solving.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Compare the analytic loss quantile with a Monte Carlo estimate.
    McCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200_000)]
        n_sims: usize,
        /// Scenario as comma-separated values; defaults to the baseline.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        scenario: Option<Vec<f64>>,
    },
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected LO,HI")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{lo}: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{hi}: {e}"))?;
    Ok((lo, hi))
}

fn load(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::from_file(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &RunConfig) -> Option<PathBuf> {
    common
        .out
        .clone()
        .or_else(|| cfg.output_dir.as_deref().map(|p| cfg.resolve(p)))
}

fn emit(dir: Option<&Path>, name: &str, body: &[u8]) -> Result<(), Error> {
    match dir {
        Some(dir) => {
            let path = dir.join(name);
            std::fs::create_dir_all(dir)
                .and_then(|_| std::fs::write(&path, body))
                .map_err(|source| Error::Io {
                    path: path.clone(),
                    source,
                })?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        None => std::io::stdout().write_all(body).map_err(|source| Error::Io {
            path: "<stdout>".into(),
            source,
        }),
    }
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::DesignPoint { common, starts } => {
            let mut cfg = load(&common)?;
            if let Some(n) = starts {
                cfg.solver.n_starts = n;
            }
            cfg.scenarios = None;
            let report = run::run(&cfg)?;
            emit(
                out_dir(&common, &cfg).as_deref(),
                "design_point.json",
                report.to_json().as_bytes(),
            )
        }
        Command::ScenarioList {
            common,
            starts,
            target,
            eta,
            epsilon,
            pool,
            list,
            drivers,
        } => {
            let mut cfg = load(&common)?;
            if let Some(n) = starts {
                cfg.solver.n_starts = n;
            }
            let sc = cfg.scenarios.get_or_insert_with(Default::default);
            if let Some(t) = target {
                sc.target = match t {
                    TargetArg::Neighbourhood => TargetName::Neighbourhood,
                    TargetArg::NearOptimal => TargetName::NearOptimal,
                };
            } else if eta.is_some() && epsilon.is_none() {
                sc.target = TargetName::Neighbourhood;
            } else if epsilon.is_some() && eta.is_none() {
                sc.target = TargetName::NearOptimal;
            }
            sc.eta = eta.unwrap_or(sc.eta);
            sc.epsilon = epsilon.unwrap_or(sc.epsilon);
            sc.pool = pool.unwrap_or(sc.pool);
            sc.list = list.unwrap_or(sc.list);
            sc.drivers = drivers.unwrap_or(sc.drivers);
            let report = run::run(&cfg)?;
            emit(
                out_dir(&common, &cfg).as_deref(),
                "scenario_list.json",
                report.to_json().as_bytes(),
            )
        }
        Command::Contour {
            common,
            resolution,
            g_range,
            x_range,
            eta,
            epsilon,
        } => {
            let mut cfg = load(&common)?;
            let sc = cfg.scenarios.get_or_insert_with(Default::default);
            sc.eta = eta.unwrap_or(sc.eta);
            sc.epsilon = epsilon.unwrap_or(sc.epsilon);
            let inputs = run::load(&cfg)?;
            let bounds = match (g_range, x_range) {
                (None, None) => None,
                (g, x) => {
                    let d = run::default_contour_bounds(None);
                    Some(ContourBounds {
                        g: g.unwrap_or(d.g),
                        x: x.unwrap_or(d.x),
                    })
                }
            };
            let grid = run::emit_contours(&cfg, &inputs, bounds, resolution)?;
            let mut buf = Vec::new();
            grid.write_csv(&mut buf)?;
            emit(out_dir(&common, &cfg).as_deref(), "contour.csv", &buf)
        }
        Command::Validate { common } => {
            let cfg = load(&common)?;
            let summary = run::validate(&cfg)?;
            for w in &summary.warnings {
                log::warn!("{w}");
            }
            emit(
                out_dir(&common, &cfg).as_deref(),
                "validation.json",
                summary.to_json().as_bytes(),
            )
        }
        Command::McCheck {
            common,
            n_sims,
            scenario,
        } => {
            let cfg = load(&common)?;
            let check = run::mc_check(&cfg, scenario, n_sims, cfg.seed)?;
            emit(
                out_dir(&common, &cfg).as_deref(),
                "mc_check.json",
                check.to_json().as_bytes(),
            )
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut inner = &e;
            while let Error::Stage { source, .. } = inner {
                inner = source;
            }
            if let Error::NonConvergence { best: Some(best), .. } = inner {
                eprintln!("best iterate: {best:?}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
