//! `flora`: benchmark reproduction and adapter management.
//!
//! CSV on stdout/files is the only data channel; human-readable progress and
//! summaries go to stderr. Every CSV starts with a header row recording the
//! seed, a hash of the resolved configuration and the artifact version, so
//! any output is reproducible from its own metadata.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flora_core::adapters::{init_adapter, AdapterKind, AdapterRecord, InitStrategy};
use flora_core::costmodel::{
    calibrate, crossover_rank, measure_kernel_grid, CalibrationFit, KernelKind, MeasureSpec,
    TimingSample, TIMINGS_CSV_HEADER,
};
use flora_core::model::BlockConfig;
use flora_core::numkit::SeedRng;
use flora_core::registry::{self, AnyAdapter};
use flora_core::scheduler::{
    latency_inflection, read_workload_csv, run_continuous, run_static, sweep, throughput_inflection,
    ArrivalProcess, CostSource, ServeConfig, ServeStrategy, SweepSpec, METRICS_CSV_HEADER,
};
use flora_core::trainer::{train_recovery, Teacher, TrainConfig};

#[derive(Parser)]
#[command(name = "flora", version, about = "Per-example adapter serving engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time the matmul/bmm kernels on this machine and fit the cost
    /// coefficients.
    Calibrate(CalibrateArgs),
    /// Throughput / latency tables over rank for both serving strategies.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Run one serving simulation and write its metrics row.
    Simulate(SimulateArgs),
    /// Train an adapter against a planted teacher and write the loss trace.
    Train(TrainArgs),
    /// Create, inspect or verify adapter files.
    #[command(subcommand)]
    Adapter(AdapterCommand),
}

#[derive(Args)]
struct CalibrateArgs {
    /// Hidden widths to measure, comma separated (e.g. 256,512).
    #[arg(long, required = true)]
    d: String,
    /// Ranks to measure, comma separated or a range (e.g. 1,2,4,8 or 1-8).
    #[arg(long, required = true)]
    r: String,
    #[arg(long, default_value_t = 4)]
    b: u32,
    #[arg(long, default_value_t = 16)]
    l: u32,
    /// Timing repetitions per grid cell (median kept).
    #[arg(long, default_value_t = 3)]
    reps: u32,
    #[arg(long, env = "FLORA_SEED", default_value_t = 0)]
    seed: u64,
    /// Skip measurement: generate timings exactly from the closed forms with
    /// these coefficients (format c1=VALUE,c2=VALUE).
    #[arg(long)]
    synthetic: Option<String>,
    /// Multiplicative gaussian noise applied to synthetic timings.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Fit report destination (key,value CSV).
    #[arg(long, required = true)]
    out: PathBuf,
    /// Also write the raw timing samples here.
    #[arg(long)]
    timings: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Tokens/second vs rank, all requests arriving at once.
    Throughput(BenchArgs),
    /// Seconds per output token vs rank under request-rate pressure.
    Latency(BenchArgs),
}

#[derive(Args)]
struct BenchArgs {
    /// Ranks to sweep (e.g. 1-16 or 1,2,4,8).
    #[arg(long, required = true)]
    ranks: String,
    /// Hidden width the cost model prices.
    #[arg(long, required = true)]
    d: u32,
    /// Fit report from `calibrate` to read c1/c2 from.
    #[arg(long, conflicts_with_all = ["c1", "c2"])]
    fit: Option<PathBuf>,
    #[arg(long, requires = "c2")]
    c1: Option<f64>,
    #[arg(long, requires = "c1")]
    c2: Option<f64>,
    /// Request rates (requests/second); latency runs require at least one,
    /// throughput runs ignore it.
    #[arg(long)]
    rate: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Request length range LO,HI (prompt and output lengths).
    #[arg(long, default_value = "50,2000")]
    len: String,
    /// Token budget of the running batch; defaults to 8192 for throughput
    /// and 2560 for latency.
    #[arg(long)]
    max_batched_tokens: Option<u32>,
    /// Adapters per example (amplifies the bmm term).
    #[arg(long, default_value_t = 1)]
    m: u32,
    #[arg(long, env = "FLORA_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, required = true)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Key=value config file; explicit flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Workload CSV (id,adapter_id,prompt_len,output_len,arrival_time);
    /// omit to generate one.
    #[arg(long)]
    workload: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    len: Option<String>,
    /// Poisson request rate; omitted means all requests arrive at t=0.
    #[arg(long, conflicts_with = "interval")]
    rate: Option<f64>,
    /// Fixed inter-arrival interval in seconds.
    #[arg(long)]
    interval: Option<f64>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    rank: Option<u32>,
    #[arg(long, conflicts_with_all = ["c1", "c2"])]
    fit: Option<PathBuf>,
    #[arg(long, requires = "c2")]
    c1: Option<f64>,
    #[arg(long, requires = "c1")]
    c2: Option<f64>,
    #[arg(long)]
    d: Option<u32>,
    #[arg(long)]
    max_batched_tokens: Option<u32>,
    #[arg(long)]
    m: Option<u32>,
    /// Use the static-batching baseline instead of continuous batching.
    #[arg(long = "static")]
    static_mode: bool,
    /// Smoke mode: time a real toy block per step instead of the cost model.
    #[arg(long)]
    live_smoke: bool,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    /// Mandatory seed (FLORA_SEED accepted).
    #[arg(long, env = "FLORA_SEED", required = true)]
    seed: u64,
    #[arg(long, required = true)]
    out: PathBuf,
    /// Optional per-request completion trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Key=value config file; explicit flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Adapter kind to train: flora, lora or ia3.
    #[arg(long)]
    kind: Option<String>,
    /// Planted teacher: multiplicative, additive or non-column-scaling;
    /// defaults to the kind's natural task.
    #[arg(long)]
    teacher: Option<String>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<u32>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Mandatory seed (FLORA_SEED accepted).
    #[arg(long, env = "FLORA_SEED", required = true)]
    seed: u64,
    /// Loss trace CSV destination.
    #[arg(long, required = true)]
    out: PathBuf,
    /// Store the trained adapter here in the binary format.
    #[arg(long)]
    save_adapter: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AdapterCommand {
    /// Write a freshly initialized adapter file.
    Create(AdapterCreateArgs),
    /// Print the header fields of an adapter file.
    Inspect { path: PathBuf },
    /// Re-validate invariants and the no-op-at-init property.
    Verify {
        path: PathBuf,
        #[arg(long, env = "FLORA_SEED", default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct AdapterCreateArgs {
    #[arg(long, required = true)]
    kind: String,
    #[arg(long, required = true)]
    d: usize,
    #[arg(long, required = true)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    r: usize,
    #[arg(long, default_value = "f64")]
    dtype: String,
    #[arg(long, env = "FLORA_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, required = true)]
    out: PathBuf,
}

/// Usage problems exit 2 (like clap's own); runtime failures exit 1.
enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<flora_core::Error> for CliError {
    fn from(e: flora_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Bench(BenchCommand::Throughput(args)) => cmd_bench(args, BenchMode::Throughput),
        Command::Bench(BenchCommand::Latency(args)) => cmd_bench(args, BenchMode::Latency),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Train(args) => cmd_train(args),
        Command::Adapter(cmd) => cmd_adapter(cmd),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

// ---- shared helpers ---------------------------------------------------

fn fnv1a64(text: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for byte in text.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    hash
}

/// `# seed=… config_hash=… version=…` header line for every CSV output.
fn meta_line(seed: u64, config: &str) -> String {
    format!(
        "# seed={seed} config_hash={:016x} version={}\n",
        fnv1a64(config),
        env!("CARGO_PKG_VERSION")
    )
}

fn write_output(path: &Path, content: &str) -> CliResult {
    std::fs::write(path, content)
        .map_err(|e| usage(format!("cannot write output {}: {e}", path.display())))
}

fn parse_u32_list(spec: &str, what: &str) -> CliResult<Vec<u32>> {
    let mut out = Vec::new();
    for token in spec.split(',').filter(|t| !t.is_empty()) {
        if let Some((lo, hi)) = token.split_once('-') {
            let lo: u32 = lo.trim().parse().map_err(|_| usage(format!("bad {what} `{token}`")))?;
            let hi: u32 = hi.trim().parse().map_err(|_| usage(format!("bad {what} `{token}`")))?;
            if lo == 0 || hi < lo {
                return Err(usage(format!("bad {what} range `{token}`")));
            }
            out.extend(lo..=hi);
        } else {
            let v: u32 = token.trim().parse().map_err(|_| usage(format!("bad {what} `{token}`")))?;
            out.push(v);
        }
    }
    if out.is_empty() {
        return Err(usage(format!("empty {what} list")));
    }
    Ok(out)
}

fn parse_len_range(spec: &str) -> CliResult<(u32, u32)> {
    let (lo, hi) = spec
        .split_once(',')
        .ok_or_else(|| usage(format!("length range must be LO,HI, got `{spec}`")))?;
    let lo = lo.trim().parse().map_err(|_| usage(format!("bad length `{lo}`")))?;
    let hi = hi.trim().parse().map_err(|_| usage(format!("bad length `{hi}`")))?;
    if lo == 0 || hi < lo {
        return Err(usage(format!("bad length range `{spec}`")));
    }
    Ok((lo, hi))
}

fn parse_kind(s: &str) -> CliResult<AdapterKind> {
    s.parse().map_err(|_| usage(format!("unknown adapter kind `{s}` (expected flora, lora or ia3)")))
}

fn parse_strategy(s: &str) -> CliResult<ServeStrategy> {
    s.parse()
        .map_err(|_| usage(format!("unknown strategy `{s}` (expected flora or bmm_lora)")))
}

/// Reads (c1, c2) back out of a fit report written by `calibrate`.
fn load_fit(path: &Path) -> CliResult<(f64, f64)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read fit file {}: {e}", path.display())))?;
    let mut c1 = None;
    let mut c2 = None;
    for line in text.lines() {
        if let Some((key, value)) = line.split_once(',') {
            match key.trim() {
                "c1" => c1 = value.trim().parse().ok(),
                "c2" => c2 = value.trim().parse().ok(),
                _ => {}
            }
        }
    }
    match (c1, c2) {
        (Some(c1), Some(c2)) => Ok((c1, c2)),
        _ => Err(usage(format!(
            "fit file {} does not contain c1 and c2 rows",
            path.display()
        ))),
    }
}

fn resolve_coefficients(
    fit: &Option<PathBuf>,
    c1: Option<f64>,
    c2: Option<f64>,
) -> CliResult<(f64, f64)> {
    match (fit, c1, c2) {
        (Some(path), _, _) => load_fit(path),
        (None, Some(c1), Some(c2)) => Ok((c1, c2)),
        _ => Err(usage("provide either --fit FILE or both --c1 and --c2")),
    }
}

/// Plain `key = value` config file; `#` starts a comment. Keys mirror the
/// serve/train/block configuration fields; explicit flags win over entries.
struct ConfigFile(std::collections::BTreeMap<String, String>);

impl ConfigFile {
    fn load(path: Option<&PathBuf>) -> CliResult<Self> {
        let mut map = std::collections::BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    usage(format!(
                        "config line {} is not `key = value`: `{raw}`",
                        lineno + 1
                    ))
                })?;
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(Self(map))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| usage(format!("bad config value for {key}: `{raw}`"))),
        }
    }
}

// ---- calibrate ---------------------------------------------------------

fn synthetic_timings(
    spec: &MeasureSpec,
    c1: f64,
    c2: f64,
    noise: f64,
    seed: u64,
) -> Vec<TimingSample> {
    let mut rng = SeedRng::new(seed).derive(0x5E);
    let mut out = Vec::new();
    for &d in &spec.ds {
        for &r in &spec.rs {
            for kernel in [KernelKind::Bmm, KernelKind::Matmul] {
                let mut sample = TimingSample {
                    kernel,
                    b: spec.b,
                    l: spec.l,
                    d,
                    r,
                    seconds: 0.0,
                };
                let coef = match kernel {
                    KernelKind::Bmm => c1,
                    KernelKind::Matmul => c2,
                };
                let mut t = coef * sample.units();
                if noise > 0.0 {
                    t *= 1.0 + rng.normal(0.0, noise);
                }
                sample.seconds = t.max(0.0);
                out.push(sample);
            }
        }
    }
    out
}

fn fit_report_csv(fit: &CalibrationFit, seed: u64, config: &str) -> String {
    let mut body = meta_line(seed, config);
    body.push_str("key,value\n");
    let _ = writeln!(body, "c1,{:e}", fit.c1);
    let _ = writeln!(body, "c2,{:e}", fit.c2);
    let _ = writeln!(body, "ratio,{:e}", fit.ratio());
    let _ = writeln!(body, "residual_rms,{:e}", fit.residual_rms);
    let _ = writeln!(body, "bmm_rel_rms,{:e}", fit.bmm_rel_rms);
    let _ = writeln!(body, "matmul_rel_rms,{:e}", fit.matmul_rel_rms);
    let _ = writeln!(body, "n_bmm,{}", fit.n_bmm);
    let _ = writeln!(body, "n_matmul,{}", fit.n_matmul);
    let _ = writeln!(body, "poor_fit,{}", fit.poor_fit);
    body
}

fn cmd_calibrate(args: CalibrateArgs) -> CliResult {
    let spec = MeasureSpec {
        ds: parse_u32_list(&args.d, "width")?,
        rs: parse_u32_list(&args.r, "rank")?,
        b: args.b,
        l: args.l,
        reps: args.reps,
        seed: args.seed,
    };
    let config = format!(
        "calibrate d={:?} r={:?} b={} l={} reps={} synthetic={:?} noise={}",
        spec.ds, spec.rs, spec.b, spec.l, spec.reps, args.synthetic, args.noise
    );

    let samples = match &args.synthetic {
        Some(coeffs) => {
            let mut c1 = None;
            let mut c2 = None;
            for part in coeffs.split(',') {
                match part.trim().split_once('=') {
                    Some(("c1", v)) => c1 = v.parse().ok(),
                    Some(("c2", v)) => c2 = v.parse().ok(),
                    _ => {}
                }
            }
            let (c1, c2) = match (c1, c2) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(usage("--synthetic expects c1=VALUE,c2=VALUE")),
            };
            eprintln!("generating synthetic timings with c1={c1}, c2={c2}, noise={}", args.noise);
            synthetic_timings(&spec, c1, c2, args.noise, args.seed)
        }
        None => {
            eprintln!(
                "timing kernels over d={:?}, r={:?} (b={}, l={}, {} reps)",
                spec.ds, spec.rs, spec.b, spec.l, spec.reps
            );
            measure_kernel_grid(&spec)?
        }
    };

    if let Some(timings_path) = &args.timings {
        let mut body = meta_line(args.seed, &config);
        body.push_str(TIMINGS_CSV_HEADER);
        body.push('\n');
        for s in &samples {
            body.push_str(&s.csv_row());
            body.push('\n');
        }
        write_output(timings_path, &body)?;
    }

    let fit = calibrate(&samples)?;
    write_output(&args.out, &fit_report_csv(&fit, args.seed, &config))?;

    eprintln!(
        "fit: c1={:.3e} c2={:.3e} ratio={:.2} (bmm rel rms {:.1}%, matmul rel rms {:.1}%{})",
        fit.c1,
        fit.c2,
        fit.ratio(),
        100.0 * fit.bmm_rel_rms,
        100.0 * fit.matmul_rel_rms,
        if fit.poor_fit { "; POOR FIT" } else { "" }
    );
    for &d in &spec.ds {
        eprintln!(
            "  d={d}: predicted crossover rank {}",
            crossover_rank(fit.c1, fit.c2, f64::from(d), 1.0)
        );
    }
    Ok(())
}

// ---- bench -------------------------------------------------------------

enum BenchMode {
    Throughput,
    Latency,
}

fn cmd_bench(args: BenchArgs, mode: BenchMode) -> CliResult {
    let ranks = parse_u32_list(&args.ranks, "rank")?;
    let len_range = parse_len_range(&args.len)?;
    let (c1, c2) = resolve_coefficients(&args.fit, args.c1, args.c2)?;
    let rates: Vec<Option<f64>> = match mode {
        BenchMode::Throughput => vec![None],
        BenchMode::Latency => {
            if args.rate.is_empty() {
                return Err(usage("bench latency needs at least one --rate"));
            }
            args.rate.iter().map(|&r| Some(r)).collect()
        }
    };
    let max_batched_tokens = args.max_batched_tokens.unwrap_or(match mode {
        BenchMode::Throughput => ServeConfig::MAX_BATCHED_TOKENS_THROUGHPUT,
        BenchMode::Latency => ServeConfig::MAX_BATCHED_TOKENS_LATENCY,
    });
    let spec = SweepSpec {
        n_requests: args.n,
        len_range,
        max_batched_tokens,
        c1,
        c2,
        d: args.d,
        adapters_per_example: args.m,
        seed: args.seed,
    };
    let config = format!(
        "bench ranks={ranks:?} rates={rates:?} d={} n={} len={len_range:?} budget={max_batched_tokens} m={} c1={c1:e} c2={c2:e}",
        args.d, args.n, args.m
    );
    let strategies = [ServeStrategy::Flora, ServeStrategy::BmmLora];
    let rows = sweep(&spec, &strategies, &ranks, &rates)?;

    let mut body = meta_line(args.seed, &config);
    body.push_str(METRICS_CSV_HEADER);
    body.push('\n');
    for row in &rows {
        body.push_str(&row.csv_row());
        body.push('\n');
    }
    write_output(&args.out, &body)?;

    let predicted = crossover_rank(c1, c2, f64::from(args.d), f64::from(args.m));
    eprintln!("predicted crossover rank at d={}: {predicted}", args.d);
    for &rate in &rates {
        let inflection = match mode {
            BenchMode::Throughput => throughput_inflection(&rows, rate),
            BenchMode::Latency => latency_inflection(&rows, rate),
        };
        let label = rate.map_or("inf".to_string(), |r| r.to_string());
        match inflection {
            Some(r) => eprintln!("rate={label}: inflection rank {r}"),
            None => eprintln!("rate={label}: no inflection within the swept ranks"),
        }
    }
    Ok(())
}

// ---- simulate ----------------------------------------------------------

fn cmd_simulate(args: SimulateArgs) -> CliResult {
    let file = ConfigFile::load(args.config.as_ref())?;
    let strategy_name = match args.strategy.or(file.get::<String>("strategy")?) {
        Some(s) => s,
        None => return Err(usage("simulate needs --strategy (or `strategy` in the config file)")),
    };
    let strategy = parse_strategy(&strategy_name)?;
    let rank = match args.rank.or(file.get("rank")?) {
        Some(r) => r,
        None => return Err(usage("simulate needs --rank (or `rank` in the config file)")),
    };
    let n = args.n.or(file.get("n")?).unwrap_or(100);
    let len_spec = args
        .len
        .or(file.get::<String>("len")?)
        .unwrap_or_else(|| "50,2000".to_string());
    let rate = match args.rate {
        Some(r) => Some(r),
        None => file.get("rate")?,
    };
    let interval = match args.interval {
        Some(i) => Some(i),
        None => file.get("interval")?,
    };
    let max_batched_tokens = args
        .max_batched_tokens
        .or(file.get("max_batched_tokens")?)
        .unwrap_or(ServeConfig::MAX_BATCHED_TOKENS_THROUGHPUT);
    let m = args.m.or(file.get("m")?).unwrap_or(1);
    let live_smoke = args.live_smoke || file.get("live_smoke")?.unwrap_or(false);

    let workload = match &args.workload {
        Some(path) => read_workload_csv(path)?,
        None => {
            let arrivals = match (rate, interval) {
                (Some(_), Some(_)) => {
                    return Err(usage("give either a rate or a fixed interval, not both"))
                }
                (Some(rate), None) => ArrivalProcess::Poisson { rate },
                (None, Some(interval)) => ArrivalProcess::FixedInterval { interval },
                (None, None) => ArrivalProcess::Immediate,
            };
            flora_core::scheduler::generate_workload(
                n,
                parse_len_range(&len_spec)?,
                arrivals,
                args.seed,
            )?
        }
    };

    let d = match args.d.or(file.get("d")?) {
        Some(d) => d,
        None => return Err(usage("simulate needs --d (or `d` in the config file)")),
    };
    let cost = if live_smoke {
        let d_model = args.d_model.or(file.get("d_model")?).unwrap_or(32);
        let n_heads = args.n_heads.or(file.get("n_heads")?).unwrap_or(4);
        let d_ff = args.d_ff.or(file.get("d_ff")?).unwrap_or(64);
        let block_cfg = BlockConfig::query_key(d_model, n_heads, d_ff)
            .map_err(|e| usage(format!("bad block config: {e}")))?;
        CostSource::LiveBlock {
            cfg: block_cfg,
            seed: args.seed,
        }
    } else {
        let (c1, c2) = match (args.c1, args.c2) {
            (Some(c1), Some(c2)) => (c1, c2),
            _ => match (&args.fit, file.get("c1")?, file.get("c2")?) {
                (Some(path), _, _) => load_fit(path)?,
                (None, Some(c1), Some(c2)) => (c1, c2),
                _ => {
                    return Err(usage(
                        "provide --fit FILE, both --c1/--c2, or c1/c2 in the config file",
                    ))
                }
            },
        };
        CostSource::Model { c1, c2, d }
    };
    let cfg = ServeConfig {
        max_batched_tokens,
        strategy,
        rank,
        adapters_per_example: m,
        cost,
        seed: args.seed,
    };
    let config = format!(
        "simulate strategy={} rank={rank} d={d} budget={max_batched_tokens} m={m} static={} live={live_smoke} workload={:?} n={}",
        strategy.name(),
        args.static_mode,
        args.workload,
        workload.len()
    );

    let metrics = if args.static_mode {
        run_static(&cfg, &workload)?
    } else {
        run_continuous(&cfg, &workload)?
    };

    let rate_cell = rate.map_or("inf".to_string(), |r| r.to_string());
    let status = if metrics.rejections.is_empty() {
        "ok".to_string()
    } else {
        format!("rejected={}", metrics.rejections.len())
    };
    let mut body = meta_line(args.seed, &config);
    body.push_str(METRICS_CSV_HEADER);
    body.push('\n');
    let _ = writeln!(
        body,
        "{},{rank},{rate_cell},{:.9e},{:.9e},{:.9e},{:.9e},{status}",
        strategy.name(),
        metrics.throughput_tok_s,
        metrics.latency_mean_s_per_tok,
        metrics.latency_p50_s_per_tok,
        metrics.latency_p95_s_per_tok,
    );
    write_output(&args.out, &body)?;

    if let Some(trace_path) = &args.trace {
        let mut trace = meta_line(args.seed, &config);
        trace.push_str("request_id,adapter_id,arrival,admitted,finished,output_len\n");
        for c in &metrics.completions {
            let _ = writeln!(
                trace,
                "{},{},{},{},{},{}",
                c.request_id, c.adapter_id, c.arrival, c.admitted, c.finished, c.output_len
            );
        }
        write_output(trace_path, &trace)?;
    }

    eprintln!(
        "{} requests: {} completed, {} rejected; {:.1} tok/s, {:.4} s/tok mean latency",
        workload.len(),
        metrics.completions.len(),
        metrics.rejections.len(),
        metrics.throughput_tok_s,
        metrics.latency_mean_s_per_tok
    );
    Ok(())
}

// ---- train -------------------------------------------------------------

fn cmd_train(args: TrainArgs) -> CliResult {
    let file = ConfigFile::load(args.config.as_ref())?;
    let kind_name = match args.kind.or(file.get::<String>("kind")?) {
        Some(k) => k,
        None => return Err(usage("train needs --kind (or `kind` in the config file)")),
    };
    let kind = parse_kind(&kind_name)?;
    let d = args.d.or(file.get("d")?).unwrap_or(8);
    let k = args.k.or(file.get("k")?).unwrap_or(6);
    let teacher_choice = match args.teacher {
        Some(t) => Some(t),
        None => file.get::<String>("teacher")?,
    };
    let teacher_name = teacher_choice.unwrap_or_else(|| {
        match kind {
            AdapterKind::Flora => "multiplicative",
            AdapterKind::Lora => "additive",
            AdapterKind::Ia3 => "non-column-scaling",
        }
        .to_string()
    });
    let teacher = match teacher_name.as_str() {
        "multiplicative" => Teacher::multiplicative_rank1(d, k, args.seed),
        "additive" => Teacher::additive_rank1(d, k, args.seed),
        "non-column-scaling" => Teacher::non_column_scaling(d, k, args.seed),
        other => return Err(usage(format!("unknown teacher `{other}`"))),
    };
    let mut cfg = TrainConfig::default_for(kind);
    cfg.seed = args.seed;
    if let Some(momentum) = args.momentum.or(file.get("momentum")?) {
        cfg.momentum = momentum;
    }
    if let Some(lr) = args.lr.or(file.get("lr")?) {
        cfg.learning_rate = lr;
    }
    if let Some(steps) = args.steps.or(file.get("steps")?) {
        cfg.steps = steps;
    }
    if let Some(batch) = args.batch.or(file.get("batch")?) {
        cfg.batch_size = batch;
    }
    let config = format!(
        "train kind={} teacher={teacher_name} d={d} k={k} lr={} steps={} batch={} momentum={}",
        kind.name(),
        cfg.learning_rate,
        cfg.steps,
        cfg.batch_size,
        cfg.momentum
    );

    let outcome = train_recovery(&teacher, &cfg).map_err(anyhow::Error::from)?;

    let mut body = meta_line(args.seed, &config);
    body.push_str(flora_core::trainer::TRACE_CSV_HEADER);
    body.push('\n');
    for (i, loss) in outcome.loss_trace.iter().enumerate() {
        let _ = writeln!(body, "{i},{loss:e}");
    }
    write_output(&args.out, &body)?;

    if let Some(path) = &args.save_adapter {
        registry::store(&outcome.adapter, path).map_err(anyhow::Error::from)?;
    }
    eprintln!(
        "trained {} for {} steps: final loss {:.3e}, held-out mse {:.3e}",
        kind.name(),
        outcome.loss_trace.len(),
        outcome.loss_trace.last().copied().unwrap_or(f64::NAN),
        outcome.final_heldout_mse
    );
    Ok(())
}

// ---- adapter -----------------------------------------------------------

fn cmd_adapter(cmd: AdapterCommand) -> CliResult {
    match cmd {
        AdapterCommand::Create(args) => {
            let kind = parse_kind(&args.kind)?;
            match args.dtype.as_str() {
                "f64" => {
                    let rec = init_adapter::<f64>(kind, args.d, args.k, args.r, args.seed, InitStrategy::NoOp)?;
                    registry::store(&rec, &args.out)
                        .map_err(|e| usage(format!("cannot write {}: {e}", args.out.display())))?;
                }
                "f32" => {
                    let rec = init_adapter::<f32>(kind, args.d, args.k, args.r, args.seed, InitStrategy::NoOp)?;
                    registry::store(&rec, &args.out)
                        .map_err(|e| usage(format!("cannot write {}: {e}", args.out.display())))?;
                }
                other => return Err(usage(format!("unknown dtype `{other}` (expected f32 or f64)"))),
            }
            eprintln!(
                "created {} adapter ({}x{}, r={}, {}) at {}",
                kind.name(),
                args.d,
                args.k,
                args.r,
                args.dtype,
                args.out.display()
            );
            Ok(())
        }
        AdapterCommand::Inspect { path } => {
            let (header, payload_bytes) = registry::inspect(&path).map_err(anyhow::Error::from)?;
            println!("key,value");
            println!("kind,{}", header.kind.name());
            println!("version,{}", header.version);
            println!("d,{}", header.d);
            println!("k,{}", header.k);
            println!("r,{}", header.r);
            println!("dtype,{}", header.dtype);
            println!(
                "reduction,{}",
                match header.reduction.code() {
                    0 => "sum",
                    _ => "mean",
                }
            );
            println!("payload_bytes,{payload_bytes}");
            Ok(())
        }
        AdapterCommand::Verify { path, seed } => {
            let loaded = registry::load_any(&path).map_err(anyhow::Error::from)?;
            eprintln!("structure: PASS ({} adapter)", loaded.kind().name());
            let noop_ok = match &loaded {
                AnyAdapter::F64(rec) => verify_noop(rec, seed)?,
                AnyAdapter::F32(rec) => verify_noop(&upcast(rec), seed)?,
            };
            if noop_ok {
                eprintln!("no-op at init: PASS");
                Ok(())
            } else {
                eprintln!("no-op at init: FAIL (adapter changes the output of a seeded layer)");
                Err(CliError::Runtime(anyhow::anyhow!(
                    "adapter is not output-preserving"
                )))
            }
        }
    }
}

fn upcast(rec: &AdapterRecord<f32>) -> AdapterRecord<f64> {
    use flora_core::adapters::{FloraAdapter, Ia3Adapter, LoraAdapter};
    match rec {
        AdapterRecord::Lora(ad) => AdapterRecord::Lora(
            LoraAdapter::new(ad.id, ad.b.cast(), ad.a.cast()).expect("valid factors"),
        ),
        AdapterRecord::Flora(ad) => AdapterRecord::Flora(
            FloraAdapter::new(ad.id, ad.b.cast(), ad.a.cast(), ad.reduction).expect("valid factors"),
        ),
        AdapterRecord::Ia3(ad) => {
            AdapterRecord::Ia3(Ia3Adapter::new(ad.id, ad.scale.cast()).expect("valid scale"))
        }
    }
}

/// Checks that the adapter leaves a seeded layer's output unchanged (the
/// defining property of a freshly initialized adapter).
fn verify_noop(rec: &AdapterRecord<f64>, seed: u64) -> CliResult<bool> {
    use flora_core::adapters::AdaptedLinear;
    use flora_core::numkit::{matmul, Activation};
    let (d, k) = match rec.dims() {
        (0, k) => (k.max(4), k), // ia3 does not pin d
        dims => dims,
    };
    let mut rng = SeedRng::new(seed ^ 0x5A17);
    let layer = AdaptedLinear::new(
        rng.tensor_normal::<f64>(vec![d, k], 0.0, 1.0),
        None,
        Activation::Identity,
    )
    .map_err(anyhow::Error::from)?;
    let x = rng.tensor_normal::<f64>(vec![3, d], 0.0, 1.0);
    let base = matmul(&x, &layer.w0).map_err(anyhow::Error::from)?;
    let adapted = flora_core::trainer::adapter_forward(&x, &layer, rec).map_err(anyhow::Error::from)?;
    Ok(adapted.max_rel_err(&base) < 1e-9)
}
