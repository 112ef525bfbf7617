use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use apr_bench::csr::CsrMatrix;
use apr_bench::ghostcell::{run_ghostcell, GhostParams};
use apr_bench::io_overlap::{expected_file, run_io_overlap, IoParams};
use apr_bench::launcher::{launch, JobSpec, ENV_CSV_FRAGMENT, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};
use apr_bench::model::{median_by_tw, OverlapSample};
use apr_bench::output::{self, write_csv};
use apr_bench::overlap::{run_overlap, OverlapParams, Variant};
use apr_bench::partition::partition_rows_by_nnz;
use apr_bench::pingpong::{fit_model, run_pingpong};
use apr_bench::spmv::{gather_to_root, relative_error, rhs, run_spmvm, serial_reference, LocalProblem, SpmvMode, SpmvParams};
use apr_bench::stats::linear_fit;
use apr_bench::Mode;
use apr_core::fileio::ENV_IO_THROTTLE;
use apr_core::runtime::{ENV_EAGER_THRESHOLD, ENV_LINK_BANDWIDTH};
use apr_core::shim::{Shim, ShimConfig, ENV_ASYNC_CPU_LIST};
use apr_core::{Error, Result, Runtime, ThreadLevel};
use clap::{Args, Parser, Subcommand};

const ENV_JOB_ID: &str = "APR_JOB_ID";
const MIB: usize = 1 << 20;

#[derive(Parser, Debug)]
#[command(name = "apr", version, about = "Asynchronous-progress benchmarks on a local multi-process job")]
struct Cli {
    /// Number of rank processes.
    #[arg(long, global = true, default_value_t = 2)]
    ranks: usize,
    /// Progress thread on or off; both series when omitted.
    #[arg(long = "async", global = true, value_parser = ["on", "off"])]
    async_mode: Option<String>,
    /// Largest eagerly sent (and shim-bypassed) message, bytes.
    #[arg(long, global = true)]
    eager_threshold: Option<usize>,
    /// Progress-thread cores, one per local process, e.g. 0_2_4.
    #[arg(long, global = true)]
    async_cpu_list: Option<String>,
    /// Output file; CSV goes to stdout when omitted.
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Repetitions per measurement point (benchmark-specific default).
    #[arg(long, global = true)]
    reps: Option<usize>,
    /// Pace remote links to this many bytes per second.
    #[arg(long, global = true, env = ENV_LINK_BANDWIDTH)]
    link_bandwidth: Option<u64>,
    /// Kill the job after this many seconds.
    #[arg(long, global = true, default_value_t = 600)]
    timeout: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    #[command(flatten)]
    Bench(Bench),
    /// Internal: run one rank of a job started by the launcher.
    #[command(hide = true)]
    Worker {
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        argv: Vec<String>,
    },
}

#[derive(Subcommand, Debug, Clone)]
enum Bench {
    /// Isend / work / wait overlap sweep (2 ranks).
    Overlap(OverlapArgs),
    /// Ping-pong bandwidth and latency fit (2 ranks).
    Pingpong(PingpongArgs),
    /// Ring halo exchange with strong-scaled triad work.
    Ghostcell(GhostArgs),
    /// Distributed sparse matrix-vector multiply.
    Spmvm(SpmvmArgs),
    /// Non-blocking file write overlapped with work.
    IoOverlap(IoArgs),
}

#[derive(Args, Debug, Clone)]
struct OverlapArgs {
    /// Message size in bytes.
    #[arg(long, default_value_t = 10 * MIB)]
    size: usize,
    #[arg(long, default_value = "isend-recv", value_parser = ["isend-recv", "irecv-send", "isend-irecv"])]
    variant: String,
    /// Work times in seconds, comma separated.
    #[arg(long, value_delimiter = ',')]
    tw: Option<Vec<f64>>,
    /// Work times as multiples of the measured t_c (used without --tw).
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,1,2,4")]
    tw_multiples: Vec<f64>,
}

#[derive(Args, Debug, Clone)]
struct PingpongArgs {
    #[arg(long, value_delimiter = ',', default_value = "1024,16384,262144,1048576,4194304,10485760")]
    sizes: Vec<usize>,
    /// Smallest size included in the model fit.
    #[arg(long, default_value_t = MIB)]
    fit_min: usize,
}

#[derive(Args, Debug, Clone)]
struct GhostArgs {
    #[arg(long, default_value_t = MIB)]
    halo: usize,
    /// Whole-job work per iteration in milliseconds, split across ranks.
    #[arg(long, default_value_t = 50.0)]
    base_work_ms: f64,
    #[arg(long, default_value_t = 20)]
    iterations: usize,
    /// Triad array length (f64 elements).
    #[arg(long, default_value_t = 4096)]
    array_len: usize,
    /// compute spins through the work time, idle sleeps through it.
    #[arg(long, default_value = "compute", value_parser = ["compute", "idle"])]
    work: String,
}

#[derive(Args, Debug, Clone)]
struct SpmvmArgs {
    /// Matrix Market file; a synthetic matrix is generated when omitted.
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long, default_value = "banded", value_parser = ["banded", "random"])]
    synthetic: String,
    #[arg(long, default_value_t = 20_000)]
    rows: usize,
    #[arg(long, default_value_t = 20)]
    nnz_per_row: usize,
    /// Half bandwidth of the banded generator (default rows / 8).
    #[arg(long)]
    half_bandwidth: Option<usize>,
    #[arg(long, default_value_t = 2)]
    threads: usize,
    #[arg(long, default_value = "all", value_parser = ["vector", "vector-shim", "task", "all"])]
    mode: String,
    #[arg(long, default_value_t = 10)]
    iterations: usize,
}

#[derive(Args, Debug, Clone)]
struct IoArgs {
    /// Bytes written per rank and repetition.
    #[arg(long, default_value_t = 64 * MIB)]
    volume: usize,
    /// File throttle in bytes per second.
    #[arg(long, env = ENV_IO_THROTTLE, default_value_t = 64 * MIB as u64)]
    throttle: u64,
    /// Shared output file (a temporary file when omitted).
    #[arg(long)]
    file: Option<PathBuf>,
    /// Work times in seconds, comma separated.
    #[arg(long, value_delimiter = ',')]
    tw: Option<Vec<f64>>,
    /// Work times as multiples of volume / throttle (used without --tw).
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,2")]
    tw_multiples: Vec<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { EXIT_OK as u8 });
        }
    };
    let code = match &cli.command {
        Command::Worker { argv } => worker(argv),
        Command::Bench(_) => launcher(&cli),
    };
    ExitCode::from(code as u8)
}

fn launcher(cli: &Cli) -> i32 {
    let exe = match std::env::current_exe() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("apr: cannot locate own executable: {e}");
            return apr_bench::launcher::EXIT_LAUNCH;
        }
    };
    let mut env = vec![(ENV_JOB_ID.to_string(), std::process::id().to_string())];
    if let Some(t) = cli.eager_threshold {
        env.push((ENV_EAGER_THRESHOLD.into(), t.to_string()));
    }
    if let Some(l) = &cli.async_cpu_list {
        env.push((ENV_ASYNC_CPU_LIST.into(), l.clone()));
    }
    if let Some(b) = cli.link_bandwidth {
        env.push((ENV_LINK_BANDWIDTH.into(), b.to_string()));
    }
    let spec = JobSpec {
        exe,
        ranks: cli.ranks,
        args: std::env::args().skip(1).collect(),
        env,
        timeout: Duration::from_secs(cli.timeout),
    };
    match launch(&spec) {
        Ok(out) => {
            let written = match &cli.csv {
                Some(p) => std::fs::write(p, &out.csv),
                None => {
                    print!("{}", out.csv);
                    Ok(())
                }
            };
            match written {
                Ok(()) => EXIT_OK,
                Err(e) => {
                    eprintln!("apr: writing CSV: {e}");
                    EXIT_FAILURE
                }
            }
        }
        Err(e) => {
            eprintln!("apr: {e}");
            e.exit_code()
        }
    }
}

struct Ctx {
    rt: Arc<Runtime>,
    base: ShimConfig,
    modes: Vec<Mode>,
    seed: u64,
    reps: Option<usize>,
}

impl Ctx {
    fn shim(&self, mode: Mode) -> Result<Shim> {
        Shim::attach(self.rt.clone(), mode.config(&self.base))
    }

    fn rank(&self) -> usize {
        self.rt.rank()
    }

    /// Prints on rank 0 only.
    fn say(&self, msg: impl AsRef<str>) {
        if self.rank() == 0 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

type Table = (&'static [&'static str], Vec<Vec<String>>);

fn worker(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(std::iter::once("apr".to_string()).chain(argv.iter().cloned())) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_USAGE;
        }
    };
    let Command::Bench(bench) = cli.command.clone_bench() else {
        eprintln!("worker needs a benchmark subcommand");
        return EXIT_USAGE;
    };
    match run_worker(&cli, &bench) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            // bad flag values surface as configuration errors
            if e.is_usage() || matches!(e, Error::Config(_)) {
                EXIT_USAGE
            } else {
                EXIT_FAILURE
            }
        }
    }
}

impl Command {
    fn clone_bench(&self) -> Command {
        match self {
            Command::Bench(b) => Command::Bench(b.clone()),
            Command::Worker { argv } => Command::Worker { argv: argv.clone() },
        }
    }
}

fn run_worker(cli: &Cli, bench: &Bench) -> Result<()> {
    let rt = Arc::new(Runtime::init_from_env(ThreadLevel::Multiple)?);
    let modes = match cli.async_mode.as_deref() {
        Some("on") => vec![Mode::ShimOn],
        Some("off") => vec![Mode::ShimOff],
        _ => Mode::BOTH.to_vec(),
    };
    let ctx = Ctx { rt: rt.clone(), base: ShimConfig::from_env()?, modes, seed: cli.seed, reps: cli.reps };
    let result = match bench {
        Bench::Overlap(a) => overlap(&ctx, a),
        Bench::Pingpong(a) => pingpong(&ctx, a),
        Bench::Ghostcell(a) => ghostcell(&ctx, a),
        Bench::Spmvm(a) => spmvm(&ctx, a),
        Bench::IoOverlap(a) => io_overlap(&ctx, a),
    };
    let (header, rows) = match result {
        Ok(t) => t,
        Err(e) => {
            // a usage error is raised identically on every rank; leave without
            // the shutdown exchange so no rank waits for a peer that is gone
            if !e.is_usage() && !matches!(e, Error::Config(_)) {
                let _ = rt.finalize();
            }
            return Err(e);
        }
    };
    if let Ok(path) = std::env::var(ENV_CSV_FRAGMENT) {
        let f = std::fs::File::create(&path)?;
        write_csv(f, header, &rows)?;
    }
    rt.finalize()
}

/// t_c of `v` bytes from a ping-pong fit without the progress thread; every
/// rank gets rank 0's value.
fn measure_t_c(ctx: &Ctx, v: usize) -> Result<f64> {
    let mut shim = ctx.shim(Mode::ShimOff)?;
    let sizes = [v / 4, v / 2, v];
    let pts = run_pingpong(&shim, &sizes, 3)?;
    let world = shim.world();
    let t_c = if ctx.rank() == 0 {
        let t = fit_model(&pts, 0)?.t_c(v);
        ctx.rt.send(t.to_le_bytes().to_vec(), 1, 99, &world)?;
        t
    } else {
        let (_, b) = ctx.rt.recv(8, 0usize, 99, &world)?;
        f64::from_le_bytes(b[..].try_into().map_err(|_| Error::Usage("bad t_c message".into()))?)
    };
    shim.detach()?;
    Ok(t_c)
}

fn overlap(ctx: &Ctx, a: &OverlapArgs) -> Result<Table> {
    if ctx.rt.size() != 2 {
        return Err(Error::Usage(format!("overlap benchmark needs exactly 2 ranks, job has {}", ctx.rt.size())));
    }
    let sweep: Vec<Duration> = match &a.tw {
        Some(tw) => tw.iter().map(|&s| Duration::from_secs_f64(s)).collect(),
        None => {
            let t_c = measure_t_c(ctx, a.size)?;
            ctx.say(format!("t_c({} bytes) = {:.6} s from ping-pong fit", a.size, t_c));
            a.tw_multiples.iter().map(|&m| Duration::from_secs_f64(m * t_c)).collect()
        }
    };
    let params = OverlapParams { v: a.size, sweep, reps: ctx.reps.unwrap_or(20), variant: a.variant.parse::<Variant>()? };
    let mut all: Vec<OverlapSample> = Vec::new();
    for &mode in &ctx.modes {
        let mut shim = ctx.shim(mode)?;
        let samples = run_overlap(&shim, &params)?;
        shim.detach()?;
        if ctx.rank() == 0 {
            let med = median_by_tw(&samples);
            if med.len() >= 2 {
                match linear_fit(&med) {
                    Ok(fit) => ctx.say(format!("{mode}: t_t = {:.3} * t_w + {:.6} s", fit.slope, fit.intercept)),
                    Err(e) => ctx.say(format!("{mode}: no fit ({e})")),
                }
            }
        }
        all.extend(samples);
    }
    Ok((&output::OVERLAP_HEADER, output::overlap_rows(&all)))
}

fn pingpong(ctx: &Ctx, a: &PingpongArgs) -> Result<Table> {
    let mut all = Vec::new();
    for &mode in &ctx.modes {
        let mut shim = ctx.shim(mode)?;
        let pts = run_pingpong(&shim, &a.sizes, ctx.reps.unwrap_or(10))?;
        shim.detach()?;
        if ctx.rank() == 0 {
            // the samples are still written when they do not fit the model
            match fit_model(&pts, a.fit_min) {
                Ok(m) => ctx.say(format!("{mode}: B_N = {:.1} MB/s, t_l = {:.2} us", m.bandwidth / 1e6, m.latency * 1e6)),
                Err(e) => ctx.say(format!("{mode}: no fit ({e})")),
            }
        }
        all.extend(pts);
    }
    Ok((&output::PINGPONG_HEADER, output::pingpong_rows(&all)))
}

fn ghostcell(ctx: &Ctx, a: &GhostArgs) -> Result<Table> {
    let params = GhostParams {
        halo_bytes: a.halo,
        base_work: Duration::from_secs_f64(a.base_work_ms / 1e3),
        iterations: ctx.reps.unwrap_or(a.iterations),
        array_len: a.array_len,
        seed: ctx.seed,
        work_kind: a.work.parse()?,
    };
    let mut all = Vec::new();
    for &mode in &ctx.modes {
        let mut shim = ctx.shim(mode)?;
        let b = run_ghostcell(&shim, &params)?;
        shim.detach()?;
        ctx.say(format!(
            "{mode}: t_w = {:.6} s, visible comm = {:.6} s, total = {:.6} s (rank 0)",
            b.t_w, b.t_visible_comm, b.t_total
        ));
        all.push(b);
    }
    Ok((&output::GHOST_HEADER, output::ghost_rows(&all)))
}

fn spmvm(ctx: &Ctx, a: &SpmvmArgs) -> Result<Table> {
    let m = match &a.matrix {
        Some(p) => CsrMatrix::read_matrix_market(std::io::BufReader::new(std::fs::File::open(p)?))?,
        None if a.synthetic == "random" => CsrMatrix::random(a.rows, a.nnz_per_row, ctx.seed),
        None => CsrMatrix::banded(a.rows, a.half_bandwidth.unwrap_or(a.rows / 8), a.nnz_per_row, ctx.seed),
    };
    if m.n_rows != m.n_cols {
        return Err(Error::Usage(format!("spMVM needs a square matrix, got {}x{}", m.n_rows, m.n_cols)));
    }
    let size = ctx.rt.size();
    let part = partition_rows_by_nnz(&m, size)?;
    let me = ctx.rank();
    let prob = LocalProblem::new(&m, &part, me);
    let x = rhs(m.n_rows, ctx.seed);
    let x_local = &x[prob.rows.clone()];
    let reference = if me == 0 { serial_reference(&m, &x, a.iterations) } else { Vec::new() };

    let wanted: Vec<SpmvMode> = match a.mode.as_str() {
        "all" => SpmvMode::ALL.to_vec(),
        one => vec![one.parse()?],
    };
    let mut rows = Vec::new();
    for mode in wanted {
        let shim_mode = if mode == SpmvMode::VectorShim { Mode::ShimOn } else { Mode::ShimOff };
        if !ctx.modes.contains(&shim_mode) {
            continue;
        }
        let mut shim = ctx.shim(shim_mode)?;
        let params = SpmvParams { mode, threads: a.threads, iterations: a.iterations };
        let out = run_spmvm(&shim, &prob, x_local, &params)?;
        let gathered = gather_to_root(&shim, &out.y)?;
        shim.detach()?;
        let err = gathered.map(|y| relative_error(&y, &reference));
        if let Some(e) = err {
            ctx.say(format!(
                "{}: {:.6} s/multiply, relative error {:.2e}",
                mode.name(),
                out.seconds_per_multiply,
                e
            ));
            if e > 1e-12 {
                return Err(Error::Protocol { rank: 0, reason: format!("{} result off by {e:.2e}", mode.name()) });
            }
        }
        rows.push(vec![
            mode.name().to_string(),
            size.to_string(),
            me.to_string(),
            a.threads.to_string(),
            m.n_rows.to_string(),
            m.nnz().to_string(),
            format!("{:.9}", out.seconds_per_multiply),
            format!("{:.3}", 1.0 / out.seconds_per_multiply),
            err.map_or(String::new(), |e| format!("{e:.3e}")),
        ]);
    }
    Ok((&output::SPMVM_HEADER, rows))
}

fn io_overlap(ctx: &Ctx, a: &IoArgs) -> Result<Table> {
    let job = std::env::var(ENV_JOB_ID).unwrap_or_else(|_| "0".into());
    let (path, temporary) = match &a.file {
        Some(p) => (p.clone(), false),
        None => (std::env::temp_dir().join(format!("apr-io-{job}.bin")), true),
    };
    let t_io = a.volume as f64 / a.throttle as f64;
    let sweep: Vec<Duration> = match &a.tw {
        Some(tw) => tw.iter().map(|&s| Duration::from_secs_f64(s)).collect(),
        None => a.tw_multiples.iter().map(|&m| Duration::from_secs_f64(m * t_io)).collect(),
    };
    let params = IoParams {
        path: path.clone(),
        volume: a.volume,
        sweep,
        reps: ctx.reps.unwrap_or(3),
        throttle: Some(a.throttle),
        seed: ctx.seed,
    };
    let mut rows = Vec::new();
    for &mode in &ctx.modes {
        let mut shim = ctx.shim(mode)?;
        let samples = run_io_overlap(&shim, &params)?;
        shim.detach()?;
        if ctx.rank() == 0 {
            for (t_w, t_t) in median_by_tw(&samples) {
                ctx.say(format!("{mode}: t_w = {t_w:.3} s, t_t = {t_t:.3} s"));
            }
        }
        rows.extend(output::io_rows(ctx.rank(), &samples));
    }
    if ctx.rank() == 0 {
        let written = std::fs::read(&path)?;
        let ok = written == expected_file(ctx.rt.size(), a.volume, ctx.seed);
        if temporary {
            let _ = std::fs::remove_file(&path);
        }
        if !ok {
            return Err(Error::Protocol { rank: 0, reason: format!("{} does not match the expected contents", path.display()) });
        }
        ctx.say("file contents verified");
    }
    Ok((&output::IO_HEADER, rows))
}
