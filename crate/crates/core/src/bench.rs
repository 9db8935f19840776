//! Timing harnesses for the offload pipeline.
//!
//! Every bench talks to a server through the client SDK and times phases on
//! the client side. Reports print as a human table plus `key=value` lines.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Barrier;
use std::time::Instant;

use thiserror::Error;

use crate::binfile::{self, BinFileError};
use crate::client::{CgOptions, ClientConfig, ClientError, LocalMatrix, Session, SvdOptions};
use crate::datagen;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    File(#[from] BinFileError),
    #[error("{0}")]
    Invalid(String),
}

/// Seconds spent in each phase of one run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Phases {
    /// Reading the input, excluded from the total.
    pub load: f64,
    pub upload: f64,
    pub compute: f64,
    pub download: f64,
}

impl Phases {
    pub fn total(&self) -> f64 {
        self.upload + self.compute + self.download
    }

    /// Phase-wise median of several runs.
    pub fn median(runs: &[Phases]) -> Phases {
        let med = |f: fn(&Phases) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
        Phases {
            load: med(|p| p.load),
            upload: med(|p| p.upload),
            compute: med(|p| p.compute),
            download: med(|p| p.download),
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub bench: String,
    pub label: String,
    pub phases: Phases,
    pub workers: usize,
    pub clients: usize,
    /// Per-iteration seconds (mean, std), for iterative routines.
    pub per_iteration: Option<(f64, f64)>,
    pub fields: Vec<(String, String)>,
}

impl BenchReport {
    fn new(bench: &str, label: impl Into<String>, workers: usize, clients: usize) -> Self {
        BenchReport {
            bench: bench.into(),
            label: label.into(),
            phases: Phases::default(),
            workers,
            clients,
            per_iteration: None,
            fields: Vec::new(),
        }
    }

    pub fn field(&mut self, key: &str, value: impl ToString) {
        self.fields.push((key.into(), value.to_string()));
    }

    /// One `key=value` record per phase, then one for the extra fields.
    pub fn kv_lines(&self) -> Vec<String> {
        let head = format!(
            "bench={} label={} workers={} clients={}",
            self.bench, self.label, self.workers, self.clients
        );
        let p = &self.phases;
        let mut lines: Vec<String> = [
            ("load", p.load),
            ("upload", p.upload),
            ("compute", p.compute),
            ("download", p.download),
            ("total", p.total()),
        ]
        .iter()
        .map(|(name, s)| format!("{head} phase={name} seconds={s:.6}"))
        .collect();
        if let Some((m, s)) = self.per_iteration {
            lines.push(format!("{head} phase=iteration mean={m:.6} std={s:.6}"));
        }
        if !self.fields.is_empty() {
            let extra: Vec<String> = self.fields.iter().map(|(k, v)| format!("{k}={v}")).collect();
            lines.push(format!("{head} {}", extra.join(" ")));
        }
        lines
    }
}

/// Renders reports as an aligned table.
pub fn table(reports: &[BenchReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:>7} {:>7} {:>10} {:>10} {:>10} {:>10} {:>10} {:>20}",
        "run", "workers", "clients", "load s", "upload s", "compute s", "download s", "total s", "iteration s"
    );
    for r in reports {
        let p = &r.phases;
        let iter = r
            .per_iteration
            .map(|(m, s)| format!("{m:.4} ± {s:.4}"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<24} {:>7} {:>7} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>20}",
            r.label,
            r.workers,
            r.clients,
            p.load,
            p.upload,
            p.compute,
            p.download,
            p.total(),
            iter
        );
    }
    out
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvdMode {
    /// The client reads the file and uploads it.
    ClientLoad,
    /// The server reads the file itself.
    ServerLoad,
    /// The server reads the file and tiles it column-wise before the SVD.
    Replicate,
}

impl SvdMode {
    pub fn name(&self) -> &'static str {
        match self {
            SvdMode::ClientLoad => "client-load",
            SvdMode::ServerLoad => "server-load",
            SvdMode::Replicate => "replicate",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SvdBench {
    pub address: String,
    pub workers: u16,
    pub mode: SvdMode,
    pub path: PathBuf,
    pub k: usize,
    pub replicas: usize,
    pub reps: usize,
    pub batch_rows: usize,
}

#[derive(Debug, Clone)]
pub struct SvdBenchOutcome {
    /// Phase-wise medians over the repetitions.
    pub report: BenchReport,
    pub runs: Vec<Phases>,
    pub singular_values: Vec<f64>,
}

pub fn bench_svd(cfg: &SvdBench) -> Result<SvdBenchOutcome, BenchError> {
    if cfg.reps == 0 || cfg.replicas == 0 {
        return Err(BenchError::Invalid("reps and replicas must be >= 1".into()));
    }
    let header = binfile::read_header(&cfg.path)?;
    let cols = header.cols
        * if cfg.mode == SvdMode::Replicate {
            cfg.replicas as u64
        } else {
            1
        };
    if cfg.k == 0 || cfg.k as u64 > header.rows.min(cols) {
        return Err(BenchError::Invalid(format!(
            "k = {} must be in [1, {}] for a {} × {cols} matrix",
            cfg.k,
            header.rows.min(cols),
            header.rows
        )));
    }
    let path = cfg
        .path
        .to_str()
        .ok_or_else(|| BenchError::Invalid("path is not UTF-8".into()))?
        .to_owned();
    let session = Session::connect(ClientConfig::new(cfg.address.clone(), cfg.workers).batch_rows(cfg.batch_rows))?;
    let lib = session.builtin()?;
    let mut runs = Vec::with_capacity(cfg.reps);
    let mut values: Option<Vec<f64>> = None;
    for _ in 0..cfg.reps {
        let mut p = Phases::default();
        let a = match cfg.mode {
            SvdMode::ClientLoad => {
                let (local, t) = timed(|| -> Result<LocalMatrix, BenchError> {
                    let (h, data) = binfile::read_matrix(&cfg.path)?;
                    Ok(LocalMatrix::from_row_major(h.rows as usize, h.cols as usize, data)?)
                });
                p.load = t;
                let local = local?;
                let (h, t) = timed(|| session.send_matrix(&local));
                p.upload = t;
                h?
            }
            SvdMode::ServerLoad => {
                let (h, t) = timed(|| lib.load(&path));
                p.load = t;
                h?
            }
            SvdMode::Replicate => {
                let (h, t) = timed(|| -> Result<_, ClientError> {
                    let base = lib.load(&path)?;
                    let tiled = lib.tile_columns(&base, cfg.replicas)?;
                    session.release(&base)?;
                    Ok(tiled)
                });
                p.load = t;
                h?
            }
        };
        let (out, t) = timed(|| lib.svd(&a, cfg.k, SvdOptions::default()));
        p.compute = t;
        let out = out?;
        let (fetched, t) = timed(|| -> Result<_, ClientError> {
            Ok((session.fetch_row_major(&out.u)?, session.fetch_row_major(&out.v)?))
        });
        p.download = t;
        fetched?;
        for h in [&a, &out.u, &out.v] {
            session.release(h)?;
        }
        if let Some(prev) = &values {
            if prev != &out.s {
                return Err(BenchError::Invalid(
                    "singular values changed between repetitions".into(),
                ));
            }
        }
        values = Some(out.s);
        runs.push(p);
    }
    session.close()?;
    let s = values.unwrap_or_default();
    let mut report = BenchReport::new("svd", cfg.mode.name(), cfg.workers as usize, 1);
    report.phases = Phases::median(&runs);
    report.field("rows", header.rows);
    report.field("cols", cols);
    report.field("k", cfg.k);
    report.field("reps", cfg.reps);
    report.field("s_max", format!("{:?}", s.first().copied().unwrap_or(f64::NAN)));
    report.field("s_min", format!("{:?}", s.last().copied().unwrap_or(f64::NAN)));
    Ok(SvdBenchOutcome {
        report,
        runs,
        singular_values: s,
    })
}

#[derive(Debug, Clone)]
pub struct TransferBench {
    pub address: String,
    pub rows: usize,
    pub cols: usize,
    pub client_procs: Vec<usize>,
    pub workers: Vec<u16>,
    pub reps: usize,
    pub batch_rows: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferCell {
    pub clients: usize,
    pub workers: u16,
    pub seconds: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub mb_per_s: f64,
}

/// Upload-time grid over client concurrency × worker count. With `c`
/// clients, each uploads a contiguous `rows / c` slice in its own session.
pub fn bench_transfer(cfg: &TransferBench) -> Result<Vec<TransferCell>, BenchError> {
    if cfg.rows == 0 || cfg.cols == 0 || cfg.reps == 0 {
        return Err(BenchError::Invalid("rows, cols and reps must be >= 1".into()));
    }
    let data = datagen::gaussian(cfg.rows, cfg.cols, cfg.seed);
    let bytes = (cfg.rows * cfg.cols * 8) as f64;
    let mut cells = Vec::new();
    for &c in &cfg.client_procs {
        if c == 0 || c > cfg.rows {
            return Err(BenchError::Invalid(format!("client count {c} must be in [1, rows]")));
        }
        let per = cfg.rows.div_ceil(c);
        let pieces: Vec<LocalMatrix> = data
            .chunks(per * cfg.cols)
            .map(|chunk| LocalMatrix::from_row_major(chunk.len() / cfg.cols, cfg.cols, chunk.to_vec()))
            .collect::<Result<_, _>>()?;
        for &w in &cfg.workers {
            let mut seconds = Vec::with_capacity(cfg.reps);
            for _ in 0..cfg.reps {
                seconds.push(upload_round(cfg, &pieces, w)?);
            }
            let (mean, std) = mean_std(&seconds);
            cells.push(TransferCell {
                clients: c,
                workers: w,
                seconds,
                mean,
                std,
                mb_per_s: bytes / mean / 1e6,
            });
        }
    }
    Ok(cells)
}

/// Uploads every piece from its own session in parallel; returns seconds
/// from the common start to the last `MATRIX_READY`.
fn upload_round(cfg: &TransferBench, pieces: &[LocalMatrix], workers: u16) -> Result<f64, BenchError> {
    let sessions: Vec<Session> = pieces
        .iter()
        .map(|_| Session::connect(ClientConfig::new(cfg.address.clone(), workers).batch_rows(cfg.batch_rows)))
        .collect::<Result<_, _>>()?;
    let barrier = Barrier::new(pieces.len() + 1);
    let (results, elapsed) = std::thread::scope(|s| {
        let handles: Vec<_> = sessions
            .iter()
            .zip(pieces)
            .map(|(session, piece)| {
                let barrier = &barrier;
                s.spawn(move || {
                    barrier.wait();
                    session.send_matrix(piece)
                })
            })
            .collect();
        barrier.wait();
        let start = Instant::now();
        let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        (results, start.elapsed().as_secs_f64())
    });
    for (session, r) in sessions.iter().zip(results) {
        session.release(&r?)?;
        session.close()?;
    }
    Ok(elapsed)
}

pub fn transfer_table(cells: &[TransferCell]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>7} {:>7} {:>12} {:>10} {:>10}",
        "clients", "workers", "mean s", "std s", "MB/s"
    );
    for c in cells {
        let _ = writeln!(
            out,
            "{:>7} {:>7} {:>12.4} {:>10.4} {:>10.1}",
            c.clients, c.workers, c.mean, c.std, c.mb_per_s
        );
    }
    out
}

pub fn transfer_kv(cells: &[TransferCell]) -> Vec<String> {
    cells
        .iter()
        .map(|c| {
            format!(
                "bench=transfer clients={} workers={} reps={} mean_s={:.6} std_s={:.6} mb_per_s={:.3}",
                c.clients,
                c.workers,
                c.seconds.len(),
                c.mean,
                c.std,
                c.mb_per_s
            )
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CgBench {
    pub address: String,
    pub workers: u16,
    pub rows: usize,
    pub cols: usize,
    pub classes: usize,
    pub features: Vec<usize>,
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: i64,
    pub sigma: f64,
    pub seed: u64,
    pub clients: usize,
    pub batch_rows: usize,
}

#[derive(Debug, Clone)]
pub struct CgBenchOutcome {
    /// One report per feature count, from the first client.
    pub reports: Vec<BenchReport>,
    /// Per-iteration cost never grows faster than linearly in D (25% slack).
    pub linear: bool,
    /// All clients computed bit-identical W for every D.
    pub isolated: bool,
    pub converged: Vec<bool>,
}

struct CgRun {
    phases: Phases,
    iterations: i64,
    converged: bool,
    per_iteration: (f64, f64),
    w: Vec<f64>,
}

fn cg_pipeline(cfg: &CgBench, x: &LocalMatrix, y: &LocalMatrix, d: usize) -> Result<CgRun, BenchError> {
    let session = Session::connect(ClientConfig::new(cfg.address.clone(), cfg.workers).batch_rows(cfg.batch_rows))?;
    let lib = session.builtin()?;
    let mut p = Phases::default();
    let (uploaded, t) = timed(|| -> Result<_, ClientError> { Ok((session.send_matrix(x)?, session.send_matrix(y)?)) });
    p.upload = t;
    let (xh, yh) = uploaded?;
    let opts = CgOptions {
        lambda: cfg.lambda,
        tol: cfg.tol,
        max_iter: cfg.max_iter,
    };
    let (out, t) = timed(|| -> Result<_, ClientError> {
        let z = lib.random_features(&xh, d, cfg.sigma, cfg.seed as i64)?;
        let out = lib.cg(&z, &yh, opts);
        session.release(&z)?;
        out
    });
    p.compute = t;
    let (w, summary) = out?;
    let (w_local, t) = timed(|| session.fetch_row_major(&w));
    p.download = t;
    let w_local = w_local?;
    session.close()?;
    Ok(CgRun {
        phases: p,
        iterations: summary.iterations,
        converged: summary.converged,
        per_iteration: (summary.iter_time_mean, summary.iter_time_std),
        w: w_local,
    })
}

/// For each D: upload raw features and labels, expand features and solve on
/// the server, fetch W.
pub fn bench_cg(cfg: &CgBench) -> Result<CgBenchOutcome, BenchError> {
    if cfg.features.is_empty() || cfg.clients == 0 || cfg.rows == 0 {
        return Err(BenchError::Invalid(
            "need at least one D, one client and one row".into(),
        ));
    }
    let (xv, labels) = datagen::speech_like(cfg.rows, cfg.cols, cfg.classes, cfg.seed);
    let x = LocalMatrix::from_row_major(cfg.rows, cfg.cols, xv)?;
    let y = LocalMatrix::from_row_major(cfg.rows, cfg.classes, datagen::one_hot(&labels, cfg.classes))?;
    let mut reports = Vec::new();
    let mut isolated = true;
    let mut converged = Vec::new();
    for &d in &cfg.features {
        let runs: Vec<Result<CgRun, BenchError>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..cfg.clients)
                .map(|_| s.spawn(|| cg_pipeline(cfg, &x, &y, d)))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let runs: Vec<CgRun> = runs.into_iter().collect::<Result<_, _>>()?;
        isolated &= runs.iter().all(|r| r.w == runs[0].w);
        let first = &runs[0];
        converged.push(first.converged);
        let mut report = BenchReport::new("cg", format!("D={d}"), cfg.workers as usize, cfg.clients);
        report.phases = first.phases;
        report.per_iteration = Some(first.per_iteration);
        report.field("rows", cfg.rows);
        report.field("D", d);
        report.field("classes", cfg.classes);
        report.field("lambda", format!("{:?}", cfg.lambda));
        report.field("iterations", first.iterations);
        report.field("converged", first.converged);
        reports.push(report);
    }
    let base = reports[0].per_iteration.map_or(0.0, |p| p.0);
    let d0 = cfg.features[0] as f64;
    let linear = cfg.features.iter().zip(&reports).all(|(&d, r)| {
        let t = r.per_iteration.map_or(0.0, |p| p.0);
        t <= 1.25 * base * (d as f64 / d0).max(1.0)
    });
    Ok(CgBenchOutcome {
        reports,
        linear,
        isolated,
        converged,
    })
}
