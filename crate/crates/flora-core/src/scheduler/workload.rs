//! Request records and workload generation.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::SeedRng;

/// One generation request. Each request names its own adapter, so a batch of
/// requests generally needs as many adapters as it has members.
#[derive(Clone, Debug, PartialEq)]
pub struct Request {
    pub id: u64,
    pub adapter_id: u64,
    pub prompt_len: u32,
    pub output_len: u32,
    pub arrival_time: f64,
}

impl Request {
    pub fn new(id: u64, adapter_id: u64, prompt_len: u32, output_len: u32, arrival_time: f64) -> Result<Self> {
        if prompt_len == 0 || output_len == 0 {
            return Err(Error::Config(format!(
                "request {id}: prompt_len and output_len must be at least 1"
            )));
        }
        if !(arrival_time >= 0.0 && arrival_time.is_finite()) {
            return Err(Error::Config(format!(
                "request {id}: arrival_time must be finite and nonnegative, got {arrival_time}"
            )));
        }
        Ok(Self {
            id,
            adapter_id,
            prompt_len,
            output_len,
            arrival_time,
        })
    }

    /// Token footprint the scheduler reserves for this request.
    pub fn token_need(&self) -> u64 {
        u64::from(self.prompt_len) + u64::from(self.output_len)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.id, self.adapter_id, self.prompt_len, self.output_len, self.arrival_time
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Format(format!(
                "workload row needs 5 fields (id,adapter_id,prompt_len,output_len,arrival_time), got {}: `{line}`",
                fields.len()
            )));
        }
        let parse = |s: &str, what: &str| -> Result<u64> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad {what} `{s}` in workload row")))
        };
        Request::new(
            parse(fields[0], "id")?,
            parse(fields[1], "adapter_id")?,
            parse(fields[2], "prompt_len")? as u32,
            parse(fields[3], "output_len")? as u32,
            fields[4]
                .parse()
                .map_err(|_| Error::Format(format!("bad arrival_time `{}`", fields[4])))?,
        )
    }
}

pub const WORKLOAD_CSV_HEADER: &str = "id,adapter_id,prompt_len,output_len,arrival_time";

/// How request arrival times are drawn.
#[derive(Copy, Clone, Debug, PartialEq)]
pub enum ArrivalProcess {
    /// Everything arrives at t = 0 (throughput runs; "infinite" rate).
    Immediate,
    /// Poisson process: exponential inter-arrival times at `rate` per second.
    Poisson { rate: f64 },
    /// Deterministic arrivals every `interval` seconds, starting at 0.
    FixedInterval { interval: f64 },
}

impl ArrivalProcess {
    /// Rate recorded in metrics rows: requests per second, `None` when all
    /// requests arrive at once.
    pub fn rate(&self) -> Option<f64> {
        match self {
            ArrivalProcess::Immediate => None,
            ArrivalProcess::Poisson { rate } => Some(*rate),
            ArrivalProcess::FixedInterval { interval } => Some(1.0 / interval),
        }
    }
}

/// Draws `n` requests with prompt and output lengths uniform over
/// `len_range` (inclusive) and arrivals from the given process. Each request
/// gets a distinct adapter id. Deterministic under `seed`.
pub fn generate_workload(
    n: usize,
    len_range: (u32, u32),
    arrivals: ArrivalProcess,
    seed: u64,
) -> Result<Vec<Request>> {
    let (lo, hi) = len_range;
    if n == 0 {
        return Err(Error::Config("workload needs at least one request".into()));
    }
    if lo == 0 || hi < lo {
        return Err(Error::Config(format!(
            "bad length range {lo}..={hi}: need 1 ≤ lo ≤ hi"
        )));
    }
    match arrivals {
        ArrivalProcess::Poisson { rate } if !(rate > 0.0 && rate.is_finite()) => {
            return Err(Error::Config(format!("bad request rate {rate}")));
        }
        ArrivalProcess::FixedInterval { interval } if !(interval > 0.0 && interval.is_finite()) => {
            return Err(Error::Config(format!("bad arrival interval {interval}")));
        }
        _ => {}
    }
    let mut len_rng = SeedRng::new(seed).derive(0x57);
    let mut arr_rng = SeedRng::new(seed).derive(0xA1);
    let mut t = 0.0f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let prompt_len = len_rng.uniform_u32(lo, hi);
        let output_len = len_rng.uniform_u32(lo, hi);
        let arrival = match arrivals {
            ArrivalProcess::Immediate => 0.0,
            ArrivalProcess::Poisson { rate } => {
                t += arr_rng.exponential(rate);
                t
            }
            ArrivalProcess::FixedInterval { interval } => i as f64 * interval,
        };
        out.push(Request::new(i as u64, i as u64, prompt_len, output_len, arrival)?);
    }
    Ok(out)
}

pub fn write_workload_csv(path: impl AsRef<Path>, requests: &[Request]) -> Result<()> {
    let mut body = String::from(WORKLOAD_CSV_HEADER);
    body.push('\n');
    for r in requests {
        body.push_str(&r.csv_row());
        body.push('\n');
    }
    std::fs::write(path, body)?;
    Ok(())
}

pub fn read_workload_csv(path: impl AsRef<Path>) -> Result<Vec<Request>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line == WORKLOAD_CSV_HEADER {
            continue;
        }
        out.push(Request::from_csv_row(line)?);
    }
    Ok(out)
}
