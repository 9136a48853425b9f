//! `mindsim` command-line driver.
//!
//! Exit status: 0 for a clean run, 2 when the run completed under directory
//! capacity pressure, 1 for any error (including a non-empty verify diff).

use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgMatches, Args, FromArgMatches, Parser, Subcommand};
use mindsim::simrun::config::{parse_size, KEYS};
use mindsim::simrun::sweep::{self, standard_tradeoff_trace};
use mindsim::simrun::verify::{verify, verify_batch};
use mindsim::simrun::{self as sim, trace, GeneratorSpec, RunOptions, SimConfig, TraceOp};

#[derive(Parser)]
#[command(name = "mindsim", version, about = "In-network memory management simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one trace or generated workload; writes per-epoch metrics and a summary.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        gen: GenArgs,
        /// Metrics CSV path (default: stdout).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Summary JSON path (default: stderr).
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// IOPS for every (read-ratio, sharing-ratio) cell.
    SweepGrid {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        read_ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        sharing_ratios: Vec<f64>,
        /// Output CSV path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Entry count and false invalidations per (initial region, epoch length).
    SweepSplit {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Trace to sweep over (default: the built-in mixed-sharing trace).
        #[arg(long)]
        trace: Option<String>,
        #[arg(long, value_delimiter = ',', default_value = "4K,16K,64K,256K,2M")]
        initial_regions: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,10,100")]
        epochs_ms: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the simulator against the page-granular oracle.
    Verify {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Trace file, or `-` for stdin. Without it, random traces are checked.
        #[arg(long)]
        trace: Option<String>,
        /// Number of random traces to check.
        #[arg(long, default_value_t = 100)]
        random: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
    },
}

#[derive(Args)]
struct Input {
    /// Trace file, or `-` for stdin. Without it, the generator is used.
    #[arg(long)]
    trace: Option<String>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0.5)]
    read_ratio: f64,
    #[arg(long, default_value_t = 0.5)]
    sharing_ratio: f64,
    /// Working set in pages.
    #[arg(long, default_value_t = 4096)]
    working_set: u64,
    /// Generator blade count (default: compute-blades).
    #[arg(long)]
    blades: Option<u16>,
    #[arg(long, default_value_t = 65536)]
    ops_per_blade: u64,
    #[arg(long, default_value_t = 0)]
    gen_seed: u64,
}

impl GenArgs {
    fn spec(&self, cfg: &SimConfig) -> GeneratorSpec {
        GeneratorSpec {
            read_ratio: self.read_ratio,
            sharing_ratio: self.sharing_ratio,
            working_set_pages: self.working_set,
            blades: self.blades.unwrap_or(cfg.compute_blades as u16),
            ops_per_blade: self.ops_per_blade,
            seed: self.gen_seed,
            page_size: cfg.page_size,
        }
    }
}

/// `--config FILE` plus one `--<key> VALUE` override per config key.
struct ConfigArgs {
    file: Option<PathBuf>,
    overrides: Vec<(&'static str, String)>,
}

impl ConfigArgs {
    fn load(&self) -> Result<SimConfig> {
        let mut cfg = match &self.file {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                SimConfig::parse(&text)?
            }
            None => SimConfig::default(),
        };
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromArgMatches for ConfigArgs {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let file = m.get_one::<PathBuf>("config").cloned();
        let overrides = KEYS.iter().filter_map(|&k| m.get_one::<String>(k).map(|v| (k, v.clone()))).collect();
        Ok(ConfigArgs { file, overrides })
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for ConfigArgs {
    fn augment_args(cmd: clap::Command) -> clap::Command {
        let cmd = cmd.arg(
            clap::Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key=value config file"),
        );
        KEYS.iter().fold(cmd, |cmd, &k| {
            cmd.arg(clap::Arg::new(k).long(k).value_name("VALUE").help_heading("Config overrides"))
        })
    }

    fn augment_args_for_update(cmd: clap::Command) -> clap::Command {
        Self::augment_args(cmd)
    }
}

fn read_trace(src: &str) -> Result<Vec<TraceOp>> {
    let ops = if src == "-" {
        trace::parse_reader(io::stdin().lock())?
    } else {
        let f = fs::File::open(src).with_context(|| format!("opening {src}"))?;
        trace::parse_reader(BufReader::new(f))?
    };
    Ok(ops)
}

fn emit(path: Option<&Path>, text: &str, fallback: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => Ok(fallback.write_all(text.as_bytes())?),
    }
}

fn execute(cmd: Cmd) -> Result<u8> {
    match cmd {
        Cmd::Run { cfg, input, gen, metrics, summary } => {
            let mut cfg = cfg.load()?;
            let ops = match &input.trace {
                Some(src) => read_trace(src)?,
                None => {
                    let spec = gen.spec(&cfg);
                    cfg.compute_blades = cfg.compute_blades.max(spec.blades as usize);
                    spec.generate()
                }
            };
            let out = sim::run(cfg, &ops, RunOptions::default())?;
            emit(metrics.as_deref(), &out.csv(), &mut io::stdout())?;
            emit(summary.as_deref(), &out.summary_json(), &mut io::stderr())?;
            Ok(out.summary.status.exit_code() as u8)
        }
        Cmd::SweepGrid { cfg, gen, read_ratios, sharing_ratios, out } => {
            let cfg = cfg.load()?;
            for r in read_ratios.iter().chain(&sharing_ratios) {
                if !(0.0..=1.0).contains(r) {
                    bail!("ratio {r} outside [0, 1]");
                }
            }
            let cells = sweep::sweep_throughput_grid(&cfg, gen.spec(&cfg), &read_ratios, &sharing_ratios)?;
            emit(out.as_deref(), &sweep::to_csv(&cells), &mut io::stdout())?;
            Ok(0)
        }
        Cmd::SweepSplit { cfg, trace, initial_regions, epochs_ms, out } => {
            let cfg = cfg.load()?;
            let sizes = initial_regions
                .iter()
                .map(|s| parse_size(s).with_context(|| format!("bad region size `{s}`")))
                .collect::<Result<Vec<u64>>>()?;
            let ops = match &trace {
                Some(src) => read_trace(src)?,
                None => standard_tradeoff_trace(),
            };
            let rows = sweep::sweep_splitting_tradeoff(&cfg, &ops, &sizes, &epochs_ms)?;
            emit(out.as_deref(), &sweep::to_csv(&rows), &mut io::stdout())?;
            Ok(0)
        }
        Cmd::Verify { cfg, trace, random, first_seed } => {
            let cfg = cfg.load()?;
            let mut stdout = io::stdout().lock();
            let clean = match &trace {
                Some(src) => {
                    let (_, report) = verify(cfg, &read_trace(src)?)?;
                    write!(stdout, "{report}")?;
                    report.is_empty()
                }
                None => {
                    let seeds: Vec<u64> = (first_seed..first_seed + random).collect();
                    let cases = verify_batch(&cfg, &seeds, None)?;
                    let mut bad = 0;
                    for c in &cases {
                        if !c.passed() {
                            bad += 1;
                            writeln!(stdout, "seed {}:\n{}", c.seed, c.report)?;
                        }
                    }
                    writeln!(stdout, "{} traces, {} with differences", cases.len(), bad)?;
                    bad == 0
                }
            };
            Ok(if clean { 0 } else { 1 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
