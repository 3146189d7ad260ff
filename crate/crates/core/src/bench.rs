//! Network measurement harness and the compute cost model.
//!
//! Throughput is measured by timing fresh-file copies between two
//! directories; latency by round-tripping small payloads against an echo
//! responder. Both report sample statistics over n trials. The absolute
//! numbers depend entirely on the hardware underneath — the harness
//! guarantees internally consistent statistics, not any particular value.
//!
//! Costs are computed at full precision and rounded half-up to cents only
//! for display; the amortized local rate in particular must stay unrounded
//! until the final total or the cents come out wrong.
//!
//! Unit discipline: GB means 10^9 bytes and Gb/s means 10^9 bits per second
//! throughout.

use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unwritable: {path}: {source}")]
    Unwritable {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("insufficient space under {path}")]
    InsufficientSpace { path: PathBuf },
    #[error("endpoint unreachable: {endpoint}: {source}")]
    Unreachable {
        endpoint: String,
        #[source]
        source: io::Error,
    },
    #[error("probe timed out after {0:?}")]
    Timeout(Duration),
    #[error("invalid argument: {0}")]
    BadArgument(String),
}

/// Sample mean; caller guarantees nonempty.
fn mean(samples: &[f64]) -> f64 {
    samples.iter().sum::<f64>() / samples.len() as f64
}

/// Sample standard deviation (n-1 denominator); 0 for a single sample.
fn sample_stdev(samples: &[f64]) -> f64 {
    if samples.len() < 2 {
        return 0.0;
    }
    let m = mean(samples);
    let var = samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
    var.sqrt()
}

/// Decimal gigabits per second for `bytes` moved in `seconds`.
pub fn gbps(bytes: u64, seconds: f64) -> f64 {
    (bytes as f64 * 8.0) / (seconds * 1e9)
}

/// Throughput statistics over n copy trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputResult {
    pub mean_gbps: f64,
    pub stdev_gbps: f64,
    pub n: usize,
    pub bytes_per_trial: u64,
}

/// Round-trip latency statistics over n probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyResult {
    pub mean_ms: f64,
    pub stdev_ms: f64,
    pub n: usize,
    pub payload_bytes: usize,
}

/// Default probe payload in bytes.
pub const DEFAULT_PAYLOAD_BYTES: usize = 64;
/// Default probe count.
pub const DEFAULT_LATENCY_TRIALS: usize = 100;

/// Desk-scale throughput defaults used by tests and CI.
pub const DESK_BYTES_PER_TRIAL: u64 = 16 * 1024 * 1024;
pub const DESK_TRIALS: usize = 20;
/// Full-scale method: a 1 GB file copied 100 times.
pub const FULL_BYTES_PER_TRIAL: u64 = 1_000_000_000;
pub const FULL_TRIALS: usize = 100;

fn space_error(path: &Path, e: io::Error) -> BenchError {
    // ENOSPC / quota conditions surface as their own variant.
    if matches!(
        e.kind(),
        io::ErrorKind::StorageFull | io::ErrorKind::QuotaExceeded
    ) {
        BenchError::InsufficientSpace {
            path: path.to_path_buf(),
        }
    } else {
        BenchError::Unwritable {
            path: path.to_path_buf(),
            source: e,
        }
    }
}

/// Times `n_trials` copies of a fresh `bytes_per_trial` file from `src_dir`
/// to `dst_dir` and reports Gb/s statistics. Trials run strictly
/// sequentially; temp files are removed afterwards.
pub fn measure_throughput(
    src_dir: &Path,
    dst_dir: &Path,
    bytes_per_trial: u64,
    n_trials: usize,
) -> Result<ThroughputResult, BenchError> {
    if bytes_per_trial == 0 || n_trials == 0 {
        return Err(BenchError::BadArgument(
            "bytes_per_trial and n_trials must be at least 1".into(),
        ));
    }
    fs::create_dir_all(src_dir).map_err(|e| space_error(src_dir, e))?;
    fs::create_dir_all(dst_dir).map_err(|e| space_error(dst_dir, e))?;

    let mut samples = Vec::with_capacity(n_trials);
    for trial in 0..n_trials {
        let src = src_dir.join(format!(".bench_src_{trial}"));
        let dst = dst_dir.join(format!(".bench_dst_{trial}"));
        write_pattern_file(&src, bytes_per_trial, trial as u64)?;

        let start = Instant::now();
        copy_file(&src, &dst)?;
        let seconds = start.elapsed().as_secs_f64().max(1e-9);
        samples.push(gbps(bytes_per_trial, seconds));

        let _ = fs::remove_file(&src);
        let _ = fs::remove_file(&dst);
    }
    Ok(ThroughputResult {
        mean_gbps: mean(&samples),
        stdev_gbps: sample_stdev(&samples),
        n: samples.len(),
        bytes_per_trial,
    })
}

/// Fills a file with a cheap non-constant pattern so copies cannot be
/// short-circuited by sparse-file tricks.
fn write_pattern_file(path: &Path, bytes: u64, seed: u64) -> Result<(), BenchError> {
    let mut file = File::create(path).map_err(|e| space_error(path, e))?;
    let mut block = vec![0u8; 1 << 20];
    for (i, b) in block.iter_mut().enumerate() {
        *b = (i as u64 ^ seed) as u8;
    }
    let mut remaining = bytes;
    while remaining > 0 {
        let n = remaining.min(block.len() as u64) as usize;
        file.write_all(&block[..n]).map_err(|e| space_error(path, e))?;
        remaining -= n as u64;
    }
    file.sync_all().map_err(|e| space_error(path, e))?;
    Ok(())
}

fn copy_file(src: &Path, dst: &Path) -> Result<(), BenchError> {
    let mut reader = File::open(src).map_err(|e| BenchError::Unwritable {
        path: src.to_path_buf(),
        source: e,
    })?;
    let mut writer = File::create(dst).map_err(|e| space_error(dst, e))?;
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = reader.read(&mut buf).map_err(|e| BenchError::Unwritable {
            path: src.to_path_buf(),
            source: e,
        })?;
        if n == 0 {
            break;
        }
        writer.write_all(&buf[..n]).map_err(|e| space_error(dst, e))?;
    }
    writer.sync_all().map_err(|e| space_error(dst, e))?;
    Ok(())
}

/// Delays precisely by busy-waiting for short intervals; `thread::sleep`
/// oversleeps by scheduler quanta, which would swamp a millisecond-scale
/// calibration delay.
fn spin_delay(delay: Duration) {
    if delay > Duration::from_millis(20) {
        std::thread::sleep(delay);
        return;
    }
    let deadline = Instant::now() + delay;
    while Instant::now() < deadline {
        std::hint::spin_loop();
    }
}

/// A sequential TCP echo responder (one probe at a time), optionally
/// delaying each reply by a fixed duration for harness calibration tests.
pub struct EchoServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl EchoServer {
    /// Binds `addr` (use port 0 for ephemeral) and serves echoes until drop.
    pub fn spawn(addr: &str, reply_delay: Duration) -> Result<EchoServer, BenchError> {
        let listener = TcpListener::bind(addr).map_err(|e| BenchError::Unreachable {
            endpoint: addr.to_string(),
            source: e,
        })?;
        let local = listener.local_addr().map_err(|e| BenchError::Unreachable {
            endpoint: addr.to_string(),
            source: e,
        })?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = Arc::clone(&stop);
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if stop_flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(mut stream) = stream else { continue };
                let _ = stream.set_nodelay(true);
                let mut buf = [0u8; 4096];
                loop {
                    match stream.read(&mut buf) {
                        Ok(0) | Err(_) => break,
                        Ok(n) => {
                            if !reply_delay.is_zero() {
                                spin_delay(reply_delay);
                            }
                            if stream.write_all(&buf[..n]).is_err() {
                                break;
                            }
                        }
                    }
                }
            }
        });
        Ok(EchoServer {
            addr: local,
            stop,
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for EchoServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

/// Round-trips `payload_bytes` against `endpoint` `n_trials` times over one
/// connection and reports millisecond statistics. Latency is reported as
/// round-trip time.
pub fn measure_latency(
    endpoint: &str,
    payload_bytes: usize,
    n_trials: usize,
) -> Result<LatencyResult, BenchError> {
    if payload_bytes == 0 || n_trials == 0 {
        return Err(BenchError::BadArgument(
            "payload_bytes and n_trials must be at least 1".into(),
        ));
    }
    let timeout = Duration::from_secs(10);
    let mut stream = TcpStream::connect(endpoint).map_err(|e| BenchError::Unreachable {
        endpoint: endpoint.to_string(),
        source: e,
    })?;
    stream.set_nodelay(true).ok();
    stream.set_read_timeout(Some(timeout)).ok();
    stream.set_write_timeout(Some(timeout)).ok();

    let payload: Vec<u8> = (0..payload_bytes).map(|i| i as u8).collect();
    let mut back = vec![0u8; payload_bytes];
    let mut samples = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let start = Instant::now();
        stream.write_all(&payload).map_err(|e| map_probe_error(e, timeout))?;
        read_exact_timeout(&mut stream, &mut back, timeout)?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(LatencyResult {
        mean_ms: mean(&samples),
        stdev_ms: sample_stdev(&samples),
        n: samples.len(),
        payload_bytes,
    })
}

fn map_probe_error(e: io::Error, timeout: Duration) -> BenchError {
    if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) {
        BenchError::Timeout(timeout)
    } else {
        BenchError::Unreachable {
            endpoint: String::new(),
            source: e,
        }
    }
}

fn read_exact_timeout(
    stream: &mut TcpStream,
    buf: &mut [u8],
    timeout: Duration,
) -> Result<(), BenchError> {
    let mut filled = 0;
    while filled < buf.len() {
        match stream.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(BenchError::Unreachable {
                    endpoint: String::new(),
                    source: io::Error::new(io::ErrorKind::UnexpectedEof, "echo closed"),
                })
            }
            Ok(n) => filled += n,
            Err(e) => return Err(map_probe_error(e, timeout)),
        }
    }
    Ok(())
}

/// Inputs of one cost computation: a labeled environment, its hourly rate,
/// and the job batch it runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostScenario {
    pub label: String,
    pub cost_per_hour: f64,
    pub n_jobs: u64,
    pub avg_minutes_per_job: f64,
}

/// Total dollars, kept at full precision; display rounds to cents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostResult {
    pub total_dollars: f64,
}

impl CostResult {
    /// Half-up rounding to cents, applied at display time only.
    pub fn display(&self) -> String {
        format!("{:.2}", round_half_up_cents(self.total_dollars))
    }
}

/// Rounds half-up to two decimals (f64::round is half-away-from-zero, which
/// is half-up for the nonnegative dollar amounts used here).
pub fn round_half_up_cents(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// `total = n_jobs x (avg_minutes / 60) x cost_per_hour`, full precision.
pub fn compute_job_cost(scenario: &CostScenario) -> CostResult {
    CostResult {
        total_dollars: scenario.n_jobs as f64 * (scenario.avg_minutes_per_job / 60.0)
            * scenario.cost_per_hour,
    }
}

/// Hours in a (non-leap) year, the amortization denominator.
pub const HOURS_PER_YEAR: f64 = 8760.0;

/// Purchase price spread over the hardware lifetime: `price / (years x
/// 8760)`. Returned at full precision — rounding this rate before the total
/// shifts the final cents.
pub fn amortized_hourly_rate(price_dollars: f64, lifetime_years: f64) -> f64 {
    price_dollars / (lifetime_years * HOURS_PER_YEAR)
}

/// Display form of an hourly rate, 4 decimals.
pub fn display_rate(rate: f64) -> String {
    format!("{rate:.4}")
}

/// Annual storage cost: terabytes times dollars per TB-year.
pub fn storage_cost_annual(tb: f64, rate_per_tb_year: f64) -> f64 {
    tb * rate_per_tb_year
}

/// Cold-archive backup cost: gigabytes times a per-GB-month rate times the
/// number of months.
pub fn backup_cost(gb: f64, rate_per_gb_month: f64, months: f64) -> f64 {
    gb * rate_per_gb_month * months
}

/// One labeled column of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub throughput: Option<ThroughputResult>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub latency: Option<LatencyResult>,
    pub cost: CostScenario,
}

/// The five metric rows of the environment comparison.
const METRICS: [&str; 5] = [
    "throughput_gbps",
    "latency_ms",
    "cost_per_hour_usd",
    "avg_minutes_per_job",
    "total_cost_usd",
];

/// Renders the comparison as an aligned text table (display-rounded) plus a
/// long-format CSV `metric,label,value,stdev` carrying full-precision
/// values. Missing measurements render as `—` in the table and are omitted
/// from the CSV.
pub fn comparison_table(rows: &[ComparisonRow]) -> Result<(String, String), BenchError> {
    if rows.is_empty() {
        return Err(BenchError::BadArgument("no comparison rows".into()));
    }
    let cell = |metric: &str, row: &ComparisonRow| -> String {
        match metric {
            "throughput_gbps" => row
                .throughput
                .as_ref()
                .map(|t| format!("{:.3} ± {:.3}", t.mean_gbps, t.stdev_gbps))
                .unwrap_or_else(|| "—".into()),
            "latency_ms" => row
                .latency
                .as_ref()
                .map(|l| format!("{:.2} ± {:.2}", l.mean_ms, l.stdev_ms))
                .unwrap_or_else(|| "—".into()),
            "cost_per_hour_usd" => display_rate(row.cost.cost_per_hour),
            "avg_minutes_per_job" => format!("{:.1}", row.cost.avg_minutes_per_job),
            "total_cost_usd" => compute_job_cost(&row.cost).display(),
            _ => unreachable!(),
        }
    };

    let mut width = vec![0usize; rows.len() + 1];
    width[0] = METRICS.iter().map(|m| m.len()).max().unwrap();
    for (i, row) in rows.iter().enumerate() {
        width[i + 1] = row.label.chars().count().max(
            METRICS
                .iter()
                .map(|m| cell(m, row).chars().count())
                .max()
                .unwrap(),
        );
    }

    let mut table = String::new();
    let pad = |s: &str, w: usize| {
        let len = s.chars().count();
        format!("{s}{}", " ".repeat(w.saturating_sub(len)))
    };
    table.push_str(&pad("metric", width[0]));
    for (i, row) in rows.iter().enumerate() {
        table.push_str("  ");
        table.push_str(&pad(&row.label, width[i + 1]));
    }
    table.push('\n');
    for metric in METRICS {
        table.push_str(&pad(metric, width[0]));
        for (i, row) in rows.iter().enumerate() {
            table.push_str("  ");
            table.push_str(&pad(&cell(metric, row), width[i + 1]));
        }
        table.push('\n');
    }

    let mut csv = String::from("metric,label,value,stdev\n");
    for row in rows {
        if let Some(t) = &row.throughput {
            csv.push_str(&format!(
                "throughput_gbps,{},{},{}\n",
                row.label, t.mean_gbps, t.stdev_gbps
            ));
        }
        if let Some(l) = &row.latency {
            csv.push_str(&format!(
                "latency_ms,{},{},{}\n",
                row.label, l.mean_ms, l.stdev_ms
            ));
        }
        csv.push_str(&format!(
            "cost_per_hour_usd,{},{},\n",
            row.label, row.cost.cost_per_hour
        ));
        csv.push_str(&format!(
            "avg_minutes_per_job,{},{},\n",
            row.label, row.cost.avg_minutes_per_job
        ));
        csv.push_str(&format!(
            "total_cost_usd,{},{},\n",
            row.label,
            compute_job_cost(&row.cost).total_dollars
        ));
    }
    Ok((table, csv))
}

/// Parses the long-format comparison CSV back into
/// `(metric, label, value, stdev)` tuples. f64 values round-trip exactly
/// because the writer uses shortest-roundtrip formatting.
pub fn parse_comparison_csv(
    text: &str,
) -> Result<Vec<(String, String, f64, Option<f64>)>, BenchError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line != "metric,label,value,stdev" {
                return Err(BenchError::BadArgument(format!("bad header {line:?}")));
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(BenchError::BadArgument(format!("bad row {line:?}")));
        }
        let value = fields[2]
            .parse::<f64>()
            .map_err(|e| BenchError::BadArgument(format!("bad value in {line:?}: {e}")))?;
        let stdev = if fields[3].is_empty() {
            None
        } else {
            Some(
                fields[3]
                    .parse::<f64>()
                    .map_err(|e| BenchError::BadArgument(format!("bad stdev in {line:?}: {e}")))?,
            )
        };
        out.push((fields[0].to_string(), fields[1].to_string(), value, stdev));
    }
    Ok(out)
}
