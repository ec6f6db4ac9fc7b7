use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cortexgrid::harness::{self, AnalyzeOptions, SimConfig};
use cortexgrid::{Error, Result};

/// Cortical-column grid simulator.
#[derive(Parser, Debug)]
#[command(name = "cortexgrid", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Config file with `key = value` lines.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set grid=8x8`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (same as `--set output=DIR`).
    #[arg(short, long)]
    output: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<SimConfig> {
        let mut cfg = match &self.config {
            Some(p) => SimConfig::load(p)?,
            None => SimConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(o) = &self.output {
            cfg.output = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the network (or only count synapses) and report its size.
    Build {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Count synapses without storing them.
        #[arg(long)]
        dry_run: bool,
    },
    /// Build and simulate; writes spikes, metrics and the config.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Rates, spectrum, log-MUA and wave speed of a spike log.
    Analyze {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Spike log; defaults to the one `run` wrote into the output directory.
        #[arg(long)]
        spikes: Option<PathBuf>,
        #[arg(long, default_value_t = 5.0)]
        bin_ms: f64,
        /// Welch segment length in bins.
        #[arg(long, default_value_t = 256)]
        segment: usize,
        #[arg(long, default_value_t = 4.0)]
        low_band_hz: f64,
        /// log-MUA threshold; default is the midpoint of the histogram modes.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
    },
    /// Nullclines, fixed points and an optional trajectory of the rate model.
    Meanfield {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 10.0)]
        c_max: f64,
        #[arg(long, default_value_t = 101)]
        c_points: usize,
        /// Initial state `nuF,nuB,nuI,cF,cB`.
        #[arg(long)]
        init: Option<String>,
        #[arg(long, default_value_t = 10_000.0)]
        duration_ms: f64,
    },
    /// Scaling sweep over rank counts and grid sizes.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        ranks: Vec<u32>,
        /// Grids as `WxH`, comma separated; default is the configured grid.
        #[arg(long, value_delimiter = ',')]
        grids: Vec<String>,
    },
}

fn parse_grid(s: &str) -> Result<(u32, u32)> {
    let bad = || Error::Config(format!("grid must be WxH, got `{s}`"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((w.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?))
}

fn parse_state(s: &str) -> Result<[f64; 5]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("bad number `{x}` in --init"))))
        .collect::<Result<_>>()?;
    v.try_into().map_err(|_| Error::Config("--init needs five values: nuF,nuB,nuI,cF,cB".into()))
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Build { cfg, dry_run } => print_json(&harness::build_command(&cfg.resolve()?, dry_run)?),
        Command::Run { cfg } => {
            let cfg = cfg.resolve()?;
            let res = harness::run_command(&cfg)?;
            eprintln!("wrote {}", cfg.output.display());
            print_json(&res.metrics)
        }
        Command::Analyze { cfg, spikes, bin_ms, segment, low_band_hz, threshold, noise_seed } => {
            let cfg = cfg.resolve()?;
            let path = spikes.unwrap_or_else(|| cfg.output.join(cfg.spike_format.file_name()));
            let mut opts = AnalyzeOptions { bin_ms, segment, low_band_hz, ..AnalyzeOptions::default() };
            opts.transitions.threshold = threshold;
            opts.log_mua.seed = noise_seed;
            print_json(&harness::analyze_command(&cfg, &path, &opts)?)
        }
        Command::Meanfield { cfg, c_max, c_points, init, duration_ms } => {
            let init = init.as_deref().map(parse_state).transpose()?;
            print_json(&harness::meanfield_command(&cfg.resolve()?, c_max, c_points, init, duration_ms)?)
        }
        Command::Bench { cfg, ranks, grids } => {
            let grids = grids.iter().map(|g| parse_grid(g)).collect::<Result<Vec<_>>>()?;
            let rows = harness::bench_command(&cfg.resolve()?, &ranks, &grids)?;
            print!("{}", harness::bench_csv(&rows));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
