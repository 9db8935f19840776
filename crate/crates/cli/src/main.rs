use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::mpsc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use offload_core::bench::{self, BenchError, CgBench, SvdBench, SvdMode, TransferBench};
use offload_core::datagen::{self, DatagenSpec, Kind};
use offload_core::server::{Server, ServerConfig, ServerHandle};

#[derive(Parser)]
#[command(
    name = "offload",
    version,
    about = "Matrix offload server, data generator and benches"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the server until interrupted.
    Serve(ServeArgs),
    /// Write a synthetic matrix file.
    Datagen(DatagenArgs),
    /// Random features + CG over a sweep of feature counts.
    BenchCg(BenchCgArgs),
    /// Truncated SVD with client-side or server-side loading.
    BenchSvd(BenchSvdArgs),
    /// Upload throughput over client count × worker count.
    BenchTransfer(BenchTransferArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 7070)]
    port: u16,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u16).range(1..))]
    workers: u16,
    /// Bytes of matrix data the server may hold.
    #[arg(long, default_value_t = 4 << 30)]
    memory_limit: u64,
    /// Host name written into worker endpoints.
    #[arg(long)]
    advertise_host: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Gaussian,
    Lowrank,
    SpeechLike,
}

#[derive(Args)]
struct DatagenArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Defaults: gaussian 1000, lowrank 2000, speech-like 100000.
    #[arg(long)]
    rows: Option<usize>,
    /// Defaults: gaussian 50, lowrank 500, speech-like 440.
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Planted rank (lowrank).
    #[arg(long, default_value_t = 20)]
    rank: usize,
    /// Gaussian noise scale (lowrank).
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    /// Label classes (speech-like).
    #[arg(long, default_value_t = datagen::SPEECH_CLASSES)]
    classes: usize,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct Target {
    /// Driver address of a running server; without it an in-process server
    /// is started.
    #[arg(long)]
    connect: Option<String>,
    #[arg(long, default_value_t = 128)]
    batch_rows: usize,
}

#[derive(Args)]
struct BenchCgArgs {
    #[arg(long, value_delimiter = ',', default_value = "1000,2000,3000")]
    features: Vec<usize>,
    #[arg(long, default_value_t = 1e-5)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    #[arg(long, default_value_t = 50)]
    max_iter: i64,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u16).range(1..))]
    workers: u16,
    #[arg(long, default_value_t = 1)]
    clients: usize,
    #[arg(long, default_value_t = 20_000)]
    rows: usize,
    #[arg(long, default_value_t = datagen::SPEECH_COLS)]
    cols: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 10.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    target: Target,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    ClientLoad,
    ServerLoad,
    Replicate,
}

impl From<ModeArg> for SvdMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::ClientLoad => SvdMode::ClientLoad,
            ModeArg::ServerLoad => SvdMode::ServerLoad,
            ModeArg::Replicate => SvdMode::Replicate,
        }
    }
}

#[derive(Args)]
struct BenchSvdArgs {
    #[arg(long, value_enum, value_delimiter = ',', default_value = "client-load,server-load")]
    mode: Vec<ModeArg>,
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Column replication factors for replicate mode; replica r runs on
    /// r × --workers workers.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    replicas: Vec<usize>,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u16).range(1..))]
    workers: u16,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Matrix file; without it a 2000 × 500 lowrank matrix is generated.
    #[arg(long)]
    file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    target: Target,
}

#[derive(Args)]
struct BenchTransferArgs {
    #[arg(long, default_value_t = 20_000)]
    rows: usize,
    #[arg(long, default_value_t = 440)]
    cols: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    client_procs: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    workers: Vec<u16>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    target: Target,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Command::Serve(_)) {
        "info"
    } else {
        "warn"
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level)).init();
    let result = match cli.command {
        Command::Serve(a) => serve(a),
        Command::Datagen(a) => run_datagen(a),
        Command::BenchCg(a) => bench_cg(a),
        Command::BenchSvd(a) => bench_svd(a),
        Command::BenchTransfer(a) => bench_transfer(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

type CliResult = Result<bool, Box<dyn std::error::Error>>;

fn serve(a: ServeArgs) -> CliResult {
    let handle = Server::start(ServerConfig {
        bind: format!("{}:{}", a.host, a.port),
        workers: a.workers as usize,
        memory_limit: a.memory_limit,
        advertise_host: a.advertise_host,
    })?;
    println!("listening on {}", handle.addr());
    for ep in handle.worker_endpoints() {
        println!("worker {} at {}", ep.worker_id, ep.addr);
    }
    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })?;
    let _ = rx.recv();
    log::info!("shutting down");
    handle.shutdown();
    Ok(true)
}

fn run_datagen(a: DatagenArgs) -> CliResult {
    let (kind, rows, cols) = match a.kind {
        KindArg::Gaussian => (Kind::Gaussian, 1000, 50),
        KindArg::Lowrank => (Kind::Lowrank, 2000, 500),
        KindArg::SpeechLike => (Kind::SpeechLike, datagen::SPEECH_ROWS, datagen::SPEECH_COLS),
    };
    let spec = DatagenSpec {
        kind,
        rows: a.rows.unwrap_or(rows),
        cols: a.cols.unwrap_or(cols),
        seed: a.seed,
        rank: a.rank,
        noise: a.noise,
        classes: a.classes,
    };
    if spec.rows == 0 || spec.cols == 0 {
        return Err(format!("invalid dimensions {} × {}", spec.rows, spec.cols).into());
    }
    if kind == Kind::Lowrank && (spec.rank == 0 || spec.rank > spec.rows.min(spec.cols)) {
        return Err(format!("rank {} must be in [1, {}]", spec.rank, spec.rows.min(spec.cols)).into());
    }
    if kind == Kind::SpeechLike && spec.classes == 0 {
        return Err("classes must be >= 1".into());
    }
    for path in datagen::generate(&spec, &a.out)? {
        println!("wrote {}", path.display());
    }
    Ok(true)
}

/// Either an external server or one started for this run.
struct Endpoint {
    address: String,
    _server: Option<ServerHandle>,
}

fn endpoint(target: &Target, workers: usize) -> Result<Endpoint, Box<dyn std::error::Error>> {
    match &target.connect {
        Some(addr) => Ok(Endpoint {
            address: addr.clone(),
            _server: None,
        }),
        None => {
            let server = Server::start(ServerConfig::local(workers))?;
            Ok(Endpoint {
                address: server.addr().to_string(),
                _server: Some(server),
            })
        }
    }
}

fn check(name: &str, ok: bool, detail: String) -> bool {
    println!(
        "assert name={name} result={} {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    ok
}

fn print_reports(reports: &[bench::BenchReport]) {
    print!("{}", bench::table(reports));
    for r in reports {
        for line in r.kv_lines() {
            println!("{line}");
        }
    }
}

fn bench_cg(a: BenchCgArgs) -> CliResult {
    let ep = endpoint(&a.target, a.workers as usize)?;
    let cfg = CgBench {
        address: ep.address.clone(),
        workers: a.workers,
        rows: a.rows,
        cols: a.cols,
        classes: a.classes,
        features: a.features.clone(),
        lambda: a.lambda,
        tol: a.tol,
        max_iter: a.max_iter,
        sigma: a.sigma,
        seed: a.seed,
        clients: a.clients,
        batch_rows: a.target.batch_rows,
    };
    let out = bench::bench_cg(&cfg)?;
    print_reports(&out.reports);
    for (d, c) in a.features.iter().zip(&out.converged) {
        if !c {
            println!("note D={d} did not converge within {} iterations", a.max_iter);
        }
    }
    let mut ok = check("per-iteration-linear-in-D", out.linear, "tolerance=25%".into());
    if a.clients > 1 {
        ok &= check("client-isolation", out.isolated, format!("clients={}", a.clients));
    }
    Ok(ok)
}

fn bench_svd(a: BenchSvdArgs) -> CliResult {
    let modes: Vec<SvdMode> = a.mode.iter().map(|&m| m.into()).collect();
    let _dir;
    let path = match &a.file {
        Some(p) => p.clone(),
        None => {
            _dir = tempfile::tempdir()?;
            let p = _dir.path().join("lowrank.bin");
            let spec = DatagenSpec {
                kind: Kind::Lowrank,
                rows: 2000,
                cols: 500,
                seed: a.seed,
                rank: 20,
                noise: 0.01,
                classes: 0,
            };
            datagen::generate(&spec, &p)?;
            p
        }
    };
    let max_replica = a.replicas.iter().copied().max().unwrap_or(1);
    let needs = if modes.contains(&SvdMode::Replicate) {
        a.workers as usize * max_replica
    } else {
        a.workers as usize
    };
    let ep = endpoint(&a.target, needs)?;
    let base = SvdBench {
        address: ep.address.clone(),
        workers: a.workers,
        mode: SvdMode::ClientLoad,
        path,
        k: a.k,
        replicas: 1,
        reps: a.reps,
        batch_rows: a.target.batch_rows,
    };
    let mut reports = Vec::new();
    let mut totals = Vec::new();
    let mut scaling = Vec::new();
    for &mode in &modes {
        if mode == SvdMode::Replicate {
            for &r in &a.replicas {
                let workers = u16::try_from(a.workers as usize * r).map_err(|_| "too many workers")?;
                let cfg = SvdBench {
                    mode,
                    replicas: r,
                    workers,
                    ..base.clone()
                };
                let mut out = bench::bench_svd(&cfg)?;
                out.report.label = format!("replicate x{r}");
                scaling.push((r, out.report.phases.compute));
                reports.push(out.report);
            }
        } else {
            let out = bench::bench_svd(&SvdBench { mode, ..base.clone() })?;
            totals.push((mode, out.report.phases.total()));
            reports.push(out.report);
        }
    }
    print_reports(&reports);
    let mut ok = true;
    let total = |m| totals.iter().find(|(mode, _)| *mode == m).map(|t| t.1);
    if let (Some(client), Some(server)) = (total(SvdMode::ClientLoad), total(SvdMode::ServerLoad)) {
        ok &= check(
            "server-load-faster",
            server < client,
            format!("server_load_total={server:.6} client_load_total={client:.6}"),
        );
    }
    if let Some(&(r0, t0)) = scaling.first() {
        for &(r, t) in &scaling[1..] {
            let ratio = t / t0;
            ok &= check(
                "weak-scaling",
                (0.5..=1.5).contains(&ratio),
                format!("replicas={r} baseline_replicas={r0} compute_ratio={ratio:.3}"),
            );
        }
    }
    Ok(ok)
}

fn bench_transfer(a: BenchTransferArgs) -> CliResult {
    let max_workers = a.workers.iter().copied().max().unwrap_or(1) as usize;
    if a.workers.contains(&0) {
        return Err(BenchError::Invalid("worker counts must be >= 1".into()).into());
    }
    let ep = endpoint(&a.target, max_workers)?;
    let cells = bench::bench_transfer(&TransferBench {
        address: ep.address.clone(),
        rows: a.rows,
        cols: a.cols,
        client_procs: a.client_procs,
        workers: a.workers,
        reps: a.reps,
        batch_rows: a.target.batch_rows,
        seed: a.seed,
    })?;
    print!("{}", bench::transfer_table(&cells));
    for line in bench::transfer_kv(&cells) {
        println!("{line}");
    }
    Ok(true)
}
