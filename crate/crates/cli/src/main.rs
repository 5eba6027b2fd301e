//! `cryptolor`: run attack scenarios, sweep color sizes, print color-bit
//! overheads and produce cold-boot dumps.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cryptolor_core::analytics::{self, ColorBits, REFERENCE_COLOR_CONFIGS};
use cryptolor_core::harness::{self, Mechanism, MonteCarlo, Scenario, ScenarioFile, TrialResult, DEFAULT_CANARY};
use cryptolor_core::stats::DetectionStats;
use cryptolor_core::{Policy, SimConfig};

const SEED_ENV: &str = "CRYPTOLOR_SEED";

#[derive(Parser)]
#[command(name = "cryptolor", version, about = "Cryptographically colored memory simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every scenario of a scenario file; JSON lines on stdout.
    Run {
        scenario_file: PathBuf,
        #[command(flatten)]
        sim: SimArgs,
        /// Write the trace here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detection rate across color sizes as CSV.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        ts_list: Vec<u32>,
        /// Scenario file; the first scenario is used unless --name is given.
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        name: Option<String>,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Cache color-bit storage. Without geometry flags prints the reference table.
    Cachebits {
        #[arg(long)]
        ts: Option<u32>,
        #[arg(long)]
        tg: Option<usize>,
        #[arg(long)]
        sets: Option<usize>,
        #[arg(long)]
        ways: Option<usize>,
        #[arg(long)]
        line: Option<usize>,
    },
    /// Store a canary, flush and write the raw memory dump.
    Dump {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = DEFAULT_CANARY)]
        canary: String,
        #[command(flatten)]
        sim: SimArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    S1,
    S2,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, value_enum, default_value = "s1")]
    policy: PolicyArg,
    #[arg(long, default_value_t = 25)]
    ts: u32,
    #[arg(long, default_value_t = 16)]
    tg: usize,
    #[arg(long, default_value_t = 64)]
    sets: usize,
    #[arg(long, default_value_t = 4)]
    ways: usize,
    #[arg(long, default_value_t = 64)]
    line: usize,
    #[arg(long, default_value_t = 64 * 1024)]
    mem: u64,
    /// Overridden by the CRYPTOLOR_SEED environment variable.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    trials: u64,
    #[arg(long)]
    recolor_on_free: bool,
}

impl SimArgs {
    fn config(&self) -> Result<SimConfig> {
        let seed = match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?,
            Err(_) => self.seed,
        };
        let cfg = SimConfig {
            ts: self.ts,
            tg: self.tg,
            line_size: self.line,
            n_sets: self.sets,
            m_ways: self.ways,
            policy: match self.policy {
                PolicyArg::S1 => Policy::S1,
                PolicyArg::S2 => Policy::S2,
            },
            mem_size: self.mem,
            seed,
            recolor_on_free: self.recolor_on_free,
        };
        cfg.validate().context("invalid configuration")?;
        if self.trials == 0 {
            bail!("--trials must be at least 1");
        }
        Ok(cfg)
    }
}

/// Closed-form reference values for the configured color size.
#[derive(Serialize)]
struct Analytic {
    detection_probability: Option<f64>,
    unreserved_detection_probability: f64,
    color_bits: u64,
    color_bit_overhead_percent: f64,
}

impl Analytic {
    fn for_config(cfg: &SimConfig) -> Result<Self> {
        let bits = analytics::color_bits(cfg)?;
        Ok(Self {
            detection_probability: analytics::detection_probability(cfg.ts).ok(),
            unreserved_detection_probability: analytics::unreserved_detection_probability(cfg.ts),
            color_bits: bits.bits,
            color_bit_overhead_percent: bits.overhead_percent(),
        })
    }
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    scenario: &'a str,
    trial: u64,
    #[serde(flatten)]
    result: &'a TrialResult,
}

#[derive(Serialize)]
struct ScenarioReport<'a> {
    name: &'a str,
    stats: &'a DetectionStats,
    rate: f64,
    wilson95: (f64, f64),
    majority: Mechanism,
    expected: Option<Mechanism>,
    passed: bool,
}

#[derive(Serialize)]
struct RunReport<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    config: &'a SimConfig,
    trials: u64,
    scenarios: Vec<ScenarioReport<'a>>,
    counters: cryptolor_core::machine::EventCounters,
    cache: cryptolor_core::cache::CacheStats,
    analytic: Analytic,
}

/// Failure of the command itself, as opposed to a failed expectation.
struct UsageError(anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for UsageError {
    fn from(e: E) -> Self {
        UsageError(e.into())
    }
}

fn load_scenarios(path: &Path) -> Result<Vec<Scenario>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let file: ScenarioFile = serde_json::from_str(&text).map_err(|e| {
        anyhow!(
            "{}:{}:{}: malformed scenario file: {e}",
            path.display(),
            e.line(),
            e.column()
        )
    })?;
    if file.scenarios.is_empty() {
        bail!("{}: no scenarios", path.display());
    }
    Ok(file.scenarios)
}

fn output(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// Returns whether every scenario met its expectation.
fn cmd_run(path: &Path, sim: &SimArgs, out: Option<&Path>) -> Result<bool, UsageError> {
    let cfg = sim.config()?;
    let scenarios = load_scenarios(path)?;
    let runs: Vec<MonteCarlo> = scenarios
        .iter()
        .map(|sc| harness::monte_carlo(&cfg, sc, sim.trials, cfg.seed))
        .collect::<Result<_, _>>()?;
    let mut w = output(out)?;
    for (sc, mc) in scenarios.iter().zip(&runs) {
        for (i, result) in mc.results.iter().enumerate() {
            let rec = TraceRecord {
                kind: "trial",
                scenario: &sc.name,
                trial: i as u64,
                result,
            };
            serde_json::to_writer(&mut w, &rec)?;
            writeln!(w)?;
        }
    }
    let mut report = RunReport {
        kind: "summary",
        config: &cfg,
        trials: sim.trials,
        scenarios: Vec::new(),
        counters: Default::default(),
        cache: Default::default(),
        analytic: Analytic::for_config(&cfg)?,
    };
    for (sc, mc) in scenarios.iter().zip(&runs) {
        let majority = mc.majority();
        let expected = sc.expect.for_policy(cfg.policy);
        report.counters += mc.counters;
        report.cache += mc.cache;
        report.scenarios.push(ScenarioReport {
            name: &sc.name,
            stats: &mc.stats,
            rate: mc.stats.rate(),
            wilson95: mc.stats.wilson95(),
            majority,
            expected,
            passed: expected.is_none_or(|e| e == majority),
        });
    }
    let passed = report.scenarios.iter().all(|s| s.passed);
    serde_json::to_writer(&mut w, &report)?;
    writeln!(w)?;
    w.flush()?;
    for s in report.scenarios.iter().filter(|s| !s.passed) {
        eprintln!(
            "scenario {:?}: expected {:?}, observed {:?}",
            s.name,
            s.expected.expect("failed implies expected"),
            s.majority
        );
    }
    Ok(passed)
}

fn cmd_sweep(ts_list: &[u32], path: &Path, name: Option<&str>, sim: &SimArgs) -> Result<(), UsageError> {
    let base = sim.config()?;
    let scenarios = load_scenarios(path)?;
    let sc = match name {
        Some(n) => scenarios
            .iter()
            .find(|s| s.name == n)
            .ok_or_else(|| anyhow!("{}: no scenario named {n:?}", path.display()))?,
        None => &scenarios[0],
    };
    for &ts in ts_list {
        SimConfig { ts, ..base.clone() }
            .validate()
            .with_context(|| format!("ts={ts}"))?;
    }
    let rows = harness::ts_sweep(&base, sc, ts_list, sim.trials, base.seed)?;
    let mut w = csv::Writer::from_writer(io::stdout().lock());
    w.write_record(["ts", "empirical", "analytic", "paper_style"])?;
    for row in &rows {
        w.write_record([
            row.ts.to_string(),
            format!("{:.5}", row.stats.rate()),
            format!("{:.5}", row.analytic),
            format!("{:.5}", row.unreserved),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cachebits_row(ts: u32, tg: usize, bits: &ColorBits) -> String {
    format!("TS={ts}, TG={tg}\t{}\t{:.2}", bits.bits, bits.overhead_percent::<f64>())
}

fn cmd_cachebits(
    ts: Option<u32>,
    tg: Option<usize>,
    sets: Option<usize>,
    ways: Option<usize>,
    line: Option<usize>,
) -> Result<(), UsageError> {
    let d = SimConfig::default();
    let custom = ts.is_some() || tg.is_some() || sets.is_some() || ways.is_some() || line.is_some();
    let configs: Vec<SimConfig> = if custom {
        vec![SimConfig {
            ts: ts.unwrap_or(d.ts),
            tg: tg.unwrap_or(d.tg),
            n_sets: sets.unwrap_or(d.n_sets),
            m_ways: ways.unwrap_or(d.m_ways),
            line_size: line.unwrap_or(d.line_size),
            ..d
        }]
    } else {
        REFERENCE_COLOR_CONFIGS
            .iter()
            .map(|&(ts, tg)| SimConfig { ts, tg, ..d.clone() })
            .collect()
    };
    let mut out = io::stdout().lock();
    for cfg in &configs {
        let bits = analytics::color_bits(cfg).context("invalid cache geometry")?;
        writeln!(out, "{}", cachebits_row(cfg.ts, cfg.tg, &bits))?;
    }
    Ok(())
}

fn cmd_dump(out: &Path, canary: &str, sim: &SimArgs) -> Result<(), UsageError> {
    let cfg = sim.config()?;
    let dump = harness::canary_dump(&cfg, canary.as_bytes())?;
    fs::write(out, &dump).with_context(|| format!("cannot write {}", out.display()))?;
    eprintln!("wrote {} bytes to {}", dump.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            scenario_file,
            sim,
            out,
        } => cmd_run(scenario_file, sim, out.as_deref()),
        Command::Sweep {
            ts_list,
            scenario,
            name,
            sim,
        } => cmd_sweep(ts_list, scenario, name.as_deref(), sim).map(|()| true),
        Command::Cachebits {
            ts,
            tg,
            sets,
            ways,
            line,
        } => cmd_cachebits(*ts, *tg, *sets, *ways, *line).map(|()| true),
        Command::Dump { out, canary, sim } => cmd_dump(out, canary, sim).map(|()| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(UsageError(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
