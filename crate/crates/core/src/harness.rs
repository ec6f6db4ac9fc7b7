//! Run configuration, orchestration of build/run/analyze/meanfield/bench,
//! and the throughput and memory metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{self, LogMuaField, LogMuaParams, Modes, TransitionParams};
use crate::connectivity::{ConnectivityParams, DelaySpec, NetworkPlan};
use crate::engine::{Network, RunOptions, RunOutput, SpikeLog, Transport};
use crate::error::{Error, Result};
use crate::meanfield::{self, MeanFieldSystem, Stability};
use crate::model::{preset, ColumnSizes, PopulationKind, PresetName, StatePreset};
use crate::topology::{partition, GridSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpikeFormat {
    Binary,
    Csv,
}

impl FromStr for SpikeFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" | "bin" => Ok(SpikeFormat::Binary),
            "csv" => Ok(SpikeFormat::Csv),
            other => Err(Error::Config(format!("unknown spike format `{other}` (binary, csv)"))),
        }
    }
}

impl SpikeFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            SpikeFormat::Binary => "binary",
            SpikeFormat::Csv => "csv",
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            SpikeFormat::Binary => "spikes.bin",
            SpikeFormat::Csv => "spikes.csv",
        }
    }
}

/// Everything needed to reproduce one simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub width: u32,
    pub height: u32,
    pub module_scale: f64,
    /// Divide efficacies by the module scale.
    pub j_rescale: bool,
    pub preset: PresetName,
    pub lambda: f64,
    pub delays: DelaySpec,
    pub ranks: u32,
    pub transport: Transport,
    pub duration_ms: u64,
    pub transient_ms: u64,
    pub seed: u64,
    pub imd_mm: f64,
    pub output: PathBuf,
    pub spike_format: SpikeFormat,
    pub trace_traffic: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            width: 4,
            height: 4,
            module_scale: 1.0,
            j_rescale: false,
            preset: PresetName::Async8_8,
            lambda: 0.5,
            delays: DelaySpec::Fixed(1),
            ranks: 1,
            transport: Transport::Loopback,
            duration_ms: 1000,
            transient_ms: 0,
            seed: 1,
            imd_mm: 0.4,
            output: PathBuf::from("out"),
            spike_format: SpikeFormat::Binary,
            trace_traffic: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

pub fn parse_delays(value: &str) -> Result<DelaySpec> {
    let bad = || Error::Config(format!("`delays`: expected `fixed:D` or `uniform:MAX` with 1..=255 ms, got `{value}`"));
    let (kind, n) = value.split_once(':').ok_or_else(bad)?;
    let n: u8 = n.trim().parse().map_err(|_| bad())?;
    if n == 0 {
        return Err(bad());
    }
    match kind.trim() {
        "fixed" => Ok(DelaySpec::Fixed(n)),
        "uniform" => Ok(DelaySpec::Uniform { max: n }),
        _ => Err(bad()),
    }
}

fn delays_text(d: DelaySpec) -> String {
    match d {
        DelaySpec::Fixed(n) => format!("fixed:{n}"),
        DelaySpec::Uniform { max } => format!("uniform:{max}"),
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "grid",
    "module_scale",
    "j_rescale",
    "preset",
    "lambda",
    "delays",
    "ranks",
    "transport",
    "duration_ms",
    "transient_ms",
    "seed",
    "imd_mm",
    "output",
    "spike_format",
    "trace_traffic",
];

impl SimConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = SimConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{}`", n + 1, raw.trim())))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "grid" => {
                let (w, h) = value
                    .split_once(['x', 'X'])
                    .ok_or_else(|| Error::Config(format!("`grid`: expected WxH, got `{value}`")))?;
                self.width = parse(key, w.trim())?;
                self.height = parse(key, h.trim())?;
            }
            "module_scale" => self.module_scale = parse(key, value)?,
            "j_rescale" => self.j_rescale = parse_bool(key, value)?,
            "preset" => self.preset = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "delays" => self.delays = parse_delays(value)?,
            "ranks" => self.ranks = parse(key, value)?,
            "transport" => self.transport = parse(key, value)?,
            "duration_ms" => self.duration_ms = parse(key, value)?,
            "transient_ms" => self.transient_ms = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "imd_mm" => self.imd_mm = parse(key, value)?,
            "output" => self.output = PathBuf::from(value),
            "spike_format" => self.spike_format = parse(key, value)?,
            "trace_traffic" => self.trace_traffic = parse_bool(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown key `{other}`; known keys: {}", CONFIG_KEYS.join(", "))))
            }
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        m.insert("grid", format!("{}x{}", self.width, self.height));
        m.insert("module_scale", self.module_scale.to_string());
        m.insert("j_rescale", self.j_rescale.to_string());
        m.insert("preset", self.preset.to_string());
        m.insert("lambda", self.lambda.to_string());
        m.insert("delays", delays_text(self.delays));
        m.insert("ranks", self.ranks.to_string());
        m.insert("transport", self.transport.as_str().to_string());
        m.insert("duration_ms", self.duration_ms.to_string());
        m.insert("transient_ms", self.transient_ms.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert("imd_mm", self.imd_mm.to_string());
        m.insert("output", self.output.display().to_string());
        m.insert("spike_format", self.spike_format.as_str().to_string());
        m.insert("trace_traffic", self.trace_traffic.to_string());
        m
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_map() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// The config as `# ` comment lines, for CSV headers.
    pub fn comment_block(&self) -> String {
        self.to_text().lines().map(|l| format!("# {l}\n")).collect()
    }

    pub fn sizes(&self) -> Result<ColumnSizes> {
        ColumnSizes::scaled(self.module_scale)
    }

    pub fn grid(&self) -> Result<GridSpec> {
        let mut g = GridSpec::new(self.width, self.height, self.sizes()?)?;
        g.imd_mm = Some(self.imd_mm);
        Ok(g)
    }

    pub fn state_preset(&self) -> StatePreset {
        let mut p = preset(self.preset);
        if self.j_rescale {
            p.synaptic = p.synaptic.rescaled(self.module_scale);
        }
        p
    }

    pub fn connectivity(&self) -> ConnectivityParams {
        ConnectivityParams { delays: self.delays, ..ConnectivityParams::new(self.lambda) }
    }

    /// Checks every field before anything large is allocated.
    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        self.connectivity().validate()?;
        self.state_preset().excitatory.validate()?;
        if !(self.imd_mm > 0.0) {
            return Err(Error::Config(format!("imd_mm must be > 0, got {}", self.imd_mm)));
        }
        if self.transient_ms > self.duration_ms {
            return Err(Error::Config(format!(
                "transient_ms ({}) exceeds duration_ms ({})",
                self.transient_ms, self.duration_ms
            )));
        }
        partition(&grid, self.ranks)?;
        Ok(())
    }
}

/// Throughput and memory figures of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub init_seconds: f64,
    pub sim_seconds: f64,
    pub spikes: u64,
    pub recurrent_events: u64,
    pub external_events: u64,
    /// Recurrent plus external synapses per neuron.
    pub synapses_per_neuron: f64,
    pub equivalent_events_per_s: f64,
    pub exact_events_per_s: f64,
    pub recurrent_synapses: u64,
    pub peak_live_records: u64,
    pub bytes_per_synapse: f64,
    pub memory_note: String,
}

pub const MEMORY_NOTE: &str =
    "count-based: 12 bytes per live synapse record at the construction peak; excludes allocator and transport overhead";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricInputs {
    pub init_seconds: f64,
    pub wall_seconds: f64,
    pub spikes: u64,
    pub recurrent_events: u64,
    pub external_events: u64,
    pub neurons: u64,
    pub recurrent_synapses: u64,
    pub external_per_neuron: f64,
    pub peak_live_records: u64,
}

pub fn bench_metrics(m: &MetricInputs) -> Result<RunMetrics> {
    if !(m.wall_seconds > 0.0) {
        return Err(Error::Config(format!("wall time must be > 0 s, got {}", m.wall_seconds)));
    }
    let per_neuron = if m.neurons == 0 {
        0.0
    } else {
        m.recurrent_synapses as f64 / m.neurons as f64 + m.external_per_neuron
    };
    let bytes = if m.recurrent_synapses == 0 {
        0.0
    } else {
        12.0 * m.peak_live_records as f64 / m.recurrent_synapses as f64
    };
    Ok(RunMetrics {
        init_seconds: m.init_seconds,
        sim_seconds: m.wall_seconds,
        spikes: m.spikes,
        recurrent_events: m.recurrent_events,
        external_events: m.external_events,
        synapses_per_neuron: per_neuron,
        equivalent_events_per_s: per_neuron * m.spikes as f64 / m.wall_seconds,
        exact_events_per_s: (m.recurrent_events + m.external_events) as f64 / m.wall_seconds,
        recurrent_synapses: m.recurrent_synapses,
        peak_live_records: m.peak_live_records,
        bytes_per_synapse: bytes,
        memory_note: MEMORY_NOTE.to_string(),
    })
}

fn external_per_neuron(p: &StatePreset, sizes: ColumnSizes) -> f64 {
    let total: f64 = PopulationKind::ALL
        .iter()
        .map(|&k| f64::from(sizes.of(k)) * f64::from(p.synaptic.external(k).n_ext))
        .sum();
    total / f64::from(sizes.total())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub config: BTreeMap<String, String>,
    pub neurons: u64,
    pub recurrent_synapses: u64,
    pub external_synapses: u64,
    /// True when synapses were only counted, never stored.
    pub dry_run: bool,
    pub init_seconds: f64,
    pub peak_live_records: u64,
    pub bytes_per_synapse: f64,
    pub memory_note: String,
}

fn config_map(cfg: &SimConfig) -> BTreeMap<String, String> {
    cfg.to_map().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Builds (or, with `dry_run`, only counts) the network.
pub fn build_command(cfg: &SimConfig, dry_run: bool) -> Result<BuildReport> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let part = partition(&grid, cfg.ranks)?;
    let preset = cfg.state_preset();
    let plan = NetworkPlan::new(&part, cfg.connectivity(), &preset, cfg.seed)?;
    let neurons = grid.total_neurons();
    let external = (external_per_neuron(&preset, grid.sizes) * neurons as f64).round() as u64;
    let start = Instant::now();
    let (synapses, peak) = if dry_run {
        (plan.count_all(), 0)
    } else {
        let net = Network::build(&plan, cfg.transport)?;
        (net.build.recurrent_synapses, net.build.peak_live_records)
    };
    let init_seconds = start.elapsed().as_secs_f64();
    let bytes = if synapses == 0 { 0.0 } else { 12.0 * peak as f64 / synapses as f64 };
    Ok(BuildReport {
        config: config_map(cfg),
        neurons,
        recurrent_synapses: synapses,
        external_synapses: external,
        dry_run,
        init_seconds,
        peak_live_records: peak,
        bytes_per_synapse: bytes,
        memory_note: MEMORY_NOTE.to_string(),
    })
}

#[derive(Clone, Debug)]
pub struct SimulationResult {
    pub config: SimConfig,
    pub output: RunOutput,
    pub metrics: RunMetrics,
    pub neurons: u64,
}

/// Builds and runs one simulation without touching the filesystem.
pub fn simulate(cfg: &SimConfig) -> Result<SimulationResult> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let part = partition(&grid, cfg.ranks)?;
    let preset = cfg.state_preset();
    let plan = NetworkPlan::new(&part, cfg.connectivity(), &preset, cfg.seed)?;
    let mut net = Network::build(&plan, cfg.transport)?;
    let opts = RunOptions {
        steps: cfg.duration_ms,
        transient_steps: cfg.transient_ms,
        transport: cfg.transport,
        trace_traffic: cfg.trace_traffic,
        record: true,
    };
    let output = net.run(&opts)?;
    let neurons = net.neuron_count();
    let wall = if output.window_seconds > 0.0 { output.window_seconds } else { output.sim_seconds.max(f64::MIN_POSITIVE) };
    let metrics = bench_metrics(&MetricInputs {
        init_seconds: net.init_seconds,
        wall_seconds: wall,
        spikes: output.window.spikes,
        recurrent_events: output.window.recurrent_events,
        external_events: output.window.external_events,
        neurons,
        recurrent_synapses: net.build.recurrent_synapses,
        external_per_neuron: external_per_neuron(&preset, grid.sizes),
        peak_live_records: net.build.peak_live_records,
    })?;
    Ok(SimulationResult { config: cfg.clone(), output, metrics, neurons })
}

#[derive(Clone, Debug, Serialize)]
struct MetricsFile<'a> {
    config: BTreeMap<String, String>,
    metrics: &'a RunMetrics,
    protocol: &'a crate::engine::ProtocolStats,
}

/// `run`: build, simulate, and write the spike log, metrics and config.
pub fn run_command(cfg: &SimConfig) -> Result<SimulationResult> {
    let result = simulate(cfg)?;
    fs::create_dir_all(&cfg.output)?;
    fs::write(cfg.output.join("config.txt"), cfg.to_text())?;
    let spikes = fs::File::create(cfg.output.join(cfg.spike_format.file_name()))?;
    let mut w = std::io::BufWriter::new(spikes);
    match cfg.spike_format {
        SpikeFormat::Binary => result.output.log.write_binary(&mut w)?,
        SpikeFormat::Csv => {
            use std::io::Write;
            w.write_all(cfg.comment_block().as_bytes())?;
            result.output.log.write_csv(&mut w)?;
        }
    }
    let file = MetricsFile { config: config_map(cfg), metrics: &result.metrics, protocol: &result.output.protocol };
    fs::write(cfg.output.join("metrics.json"), serde_json::to_string_pretty(&file)?)?;
    if cfg.trace_traffic {
        fs::write(cfg.output.join("traffic.csv"), crate::comm::traffic_csv(&result.output.traffic))?;
    }
    Ok(result)
}

/// Reads a spike log written by `run`, choosing the format by extension.
pub fn read_spike_log(path: &Path) -> Result<SpikeLog> {
    let f = fs::File::open(path).map_err(|e| Error::Config(format!("cannot open spike log {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "csv") {
        SpikeLog::read_csv(f)
    } else {
        SpikeLog::read_binary(f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOptions {
    pub bin_ms: f64,
    /// Welch segment length in bins; 50% overlap.
    pub segment: usize,
    pub low_band_hz: f64,
    pub log_mua: LogMuaParams,
    pub transitions: TransitionParams,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            bin_ms: analysis::DEFAULT_BIN_MS,
            segment: 256,
            low_band_hz: 4.0,
            log_mua: LogMuaParams::default(),
            transitions: TransitionParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub window_ms: (f64, f64),
    /// Mean rates of F, B, I in Hz.
    pub mean_rates_hz: [f64; 3],
    pub dominant_frequency_hz: Option<f64>,
    pub low_frequency_fraction: Option<f64>,
    pub psd_resolution_hz: Option<f64>,
    pub modes: Option<Modes>,
    pub threshold: Option<f64>,
    pub waves: usize,
    pub mean_speed_imd_per_s: Option<f64>,
    pub mean_speed_mm_per_s: Option<f64>,
    pub speed_points: usize,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct AnalysisArtifacts {
    pub report: AnalysisReport,
    pub rates: analysis::RateSeries,
    pub psd: Option<analysis::Psd>,
    pub waves: Vec<analysis::TransitionField>,
    pub speeds: Vec<analysis::WaveSpeed>,
}

/// Rates, spectrum of the global F rate, log-MUA modes and wave speed
/// over `[start_ms, end_ms)`.
pub fn analyze(log: &SpikeLog, grid: &GridSpec, start_ms: f64, end_ms: f64, opts: &AnalyzeOptions) -> Result<AnalysisArtifacts> {
    let rates = analysis::rates(log, grid, opts.bin_ms, start_ms, end_ms)?;
    let mut notes = Vec::new();
    let f_rate = rates.population_rate(PopulationKind::F);
    let psd = match analysis::psd_welch(&f_rate, rates.sample_rate_hz(), opts.segment, opts.segment / 2) {
        Ok(p) => Some(p),
        Err(e) => {
            notes.push(format!("spectrum skipped: {e}"));
            None
        }
    };
    let mut modes = None;
    let mut threshold = None;
    let mut waves = Vec::new();
    let mut speeds = Vec::new();
    match LogMuaField::from_rates(&rates, &opts.log_mua) {
        Ok(field) => {
            modes = analysis::histogram_modes(&field.pooled());
            match analysis::transitions(&field, &opts.transitions) {
                Ok((th, w)) => {
                    threshold = Some(th);
                    waves = w;
                }
                Err(e) => notes.push(format!("transitions skipped: {e}")),
            }
        }
        Err(e) => notes.push(format!("log-MUA skipped: {e}")),
    }
    for w in &waves {
        if let Ok(s) = analysis::wave_speed(w, grid.imd_mm, analysis::EPS_GRAD) {
            speeds.push(s);
        }
    }
    let points: usize = speeds.iter().map(|s| s.valid).sum();
    let mean_speed = (points > 0)
        .then(|| speeds.iter().map(|s| s.mean_imd_per_s * s.valid as f64).sum::<f64>() / points as f64);
    let report = AnalysisReport {
        window_ms: (start_ms, start_ms + rates.bins as f64 * rates.bin_ms),
        mean_rates_hz: PopulationKind::ALL.map(|k| rates.mean_rate(k)),
        dominant_frequency_hz: psd.as_ref().and_then(|p| p.dominant_frequency()),
        low_frequency_fraction: psd.as_ref().map(|p| p.low_frequency_fraction(opts.low_band_hz)),
        psd_resolution_hz: psd.as_ref().map(|p| p.resolution_hz()),
        modes,
        threshold,
        waves: waves.len(),
        mean_speed_imd_per_s: mean_speed,
        mean_speed_mm_per_s: mean_speed.zip(grid.imd_mm).map(|(v, mm)| v * mm),
        speed_points: points,
        notes,
    };
    Ok(AnalysisArtifacts { report, rates, psd, waves, speeds })
}

/// `analyze`: reads a spike log and writes rate, spectrum, transition and
/// speed tables plus a JSON summary into the config's output directory.
pub fn analyze_command(cfg: &SimConfig, log_path: &Path, opts: &AnalyzeOptions) -> Result<AnalysisReport> {
    let grid = cfg.grid()?;
    let log = read_spike_log(log_path)?;
    let art = analyze(&log, &grid, cfg.transient_ms as f64, cfg.duration_ms as f64, opts)?;
    fs::create_dir_all(&cfg.output)?;
    let head = cfg.comment_block();
    let out = &cfg.output;
    fs::write(out.join("rates.csv"), format!("{head}{}", art.rates.to_csv()))?;
    if let Some(p) = &art.psd {
        fs::write(out.join("psd.csv"), format!("{head}{}", p.to_csv()))?;
    }
    fs::write(out.join("transitions.csv"), format!("{head}{}", analysis::transition_csv(&art.waves)))?;
    fs::write(out.join("speeds.csv"), format!("{head}{}", analysis::speed_csv(&art.speeds, grid.width)))?;
    let json = serde_json::json!({ "config": config_map(cfg), "analysis": &art.report });
    fs::write(out.join("analysis.json"), serde_json::to_string_pretty(&json)?)?;
    Ok(art.report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldReport {
    pub preset: PresetName,
    pub fixed_points: Vec<meanfield::FixedPoint>,
    pub stable_nu_f: Option<f64>,
}

/// `meanfield`: nullclines over `c` in `[0, c_max]`, fixed points, and a
/// trajectory from `init`.
pub fn meanfield_command(cfg: &SimConfig, c_max: f64, c_points: usize, init: Option<meanfield::MfState>, duration_ms: f64) -> Result<MeanFieldReport> {
    let sys = MeanFieldSystem::new(cfg.state_preset(), cfg.sizes()?);
    let n = c_points.max(2);
    let cs: Vec<f64> = (0..n).map(|i| c_max * i as f64 / (n - 1) as f64).collect();
    let null = sys.nullclines(&cs)?;
    let fps = sys.fixed_points()?;
    fs::create_dir_all(&cfg.output)?;
    let head = cfg.comment_block();
    fs::write(cfg.output.join("nullclines.csv"), format!("{head}{}", meanfield::nullclines_csv(&null, &sys)))?;
    fs::write(cfg.output.join("fixed_points.csv"), format!("{head}{}", meanfield::fixed_points_csv(&fps)))?;
    if let Some(x0) = init {
        let traj = sys.integrate(x0, duration_ms, 0.5, 10)?;
        fs::write(cfg.output.join("trajectory.csv"), format!("{head}{}", meanfield::trajectory_csv(&traj)))?;
    }
    let stable_nu_f = fps.iter().find(|f| f.stability == Stability::Stable).map(|f| f.state[0]);
    Ok(MeanFieldReport { preset: cfg.preset, fixed_points: fps, stable_nu_f })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub ranks: u32,
    pub width: u32,
    pub height: u32,
    pub neurons: u64,
    pub recurrent_synapses: u64,
    pub init_seconds: f64,
    pub sim_seconds: f64,
    pub spikes: u64,
    pub equivalent_events_per_s: f64,
    pub exact_events_per_s: f64,
    pub bytes_per_synapse: f64,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(
        "ranks,width,height,neurons,recurrent_synapses,init_seconds,sim_seconds,spikes,equivalent_events_per_s,exact_events_per_s,bytes_per_synapse\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.4},{:.4},{},{:.6e},{:.6e},{:.3}",
            r.ranks,
            r.width,
            r.height,
            r.neurons,
            r.recurrent_synapses,
            r.init_seconds,
            r.sim_seconds,
            r.spikes,
            r.equivalent_events_per_s,
            r.exact_events_per_s,
            r.bytes_per_synapse
        );
    }
    s
}

/// Runs the config once per (grid, ranks) pair; an empty `grids` keeps the
/// configured grid (strong scaling).
pub fn bench_sweep(cfg: &SimConfig, ranks: &[u32], grids: &[(u32, u32)]) -> Result<Vec<BenchRow>> {
    let grids = if grids.is_empty() { vec![(cfg.width, cfg.height)] } else { grids.to_vec() };
    let mut rows = Vec::new();
    for &(w, h) in &grids {
        for &r in ranks {
            let c = SimConfig { width: w, height: h, ranks: r, ..cfg.clone() };
            let res = simulate(&c)?;
            log::info!("bench {w}x{h} R={r}: {:.3} s simulation", res.metrics.sim_seconds);
            rows.push(BenchRow {
                ranks: r,
                width: w,
                height: h,
                neurons: res.neurons,
                recurrent_synapses: res.metrics.recurrent_synapses,
                init_seconds: res.metrics.init_seconds,
                sim_seconds: res.metrics.sim_seconds,
                spikes: res.metrics.spikes,
                equivalent_events_per_s: res.metrics.equivalent_events_per_s,
                exact_events_per_s: res.metrics.exact_events_per_s,
                bytes_per_synapse: res.metrics.bytes_per_synapse,
            });
        }
    }
    Ok(rows)
}

/// `bench`: sweep and write `bench.csv`.
pub fn bench_command(cfg: &SimConfig, ranks: &[u32], grids: &[(u32, u32)]) -> Result<Vec<BenchRow>> {
    let rows = bench_sweep(cfg, ranks, grids)?;
    fs::create_dir_all(&cfg.output)?;
    fs::write(cfg.output.join("bench.csv"), format!("{}{}", cfg.comment_block(), bench_csv(&rows)))?;
    Ok(rows)
}

/// Process exit code for an error class.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownPreset { .. } | Error::Grid(_) => 2,
        Error::InfeasiblePartition { .. } => 3,
        Error::Io(_) | Error::Json(_) => 4,
        Error::Numerical(_) | Error::Analysis(_) => 5,
        _ => 1,
    }
}
