//! Rank/rate sweeps over the serving simulator and inflection-rank readout.

use crate::error::Result;
use crate::scheduler::sim::{run_continuous, CostSource, ServeConfig, ServeStrategy};
use crate::scheduler::workload::{generate_workload, ArrivalProcess};

/// Everything a sweep cell needs besides (strategy, rank, rate).
#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub n_requests: usize,
    pub len_range: (u32, u32),
    pub max_batched_tokens: u32,
    pub c1: f64,
    pub c2: f64,
    pub d: u32,
    pub adapters_per_example: u32,
    pub seed: u64,
}

/// One sweep cell's metrics.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub strategy: ServeStrategy,
    pub rank: u32,
    /// Requests per second; `None` means everything arrived at t = 0.
    pub rate: Option<f64>,
    pub throughput_tok_s: f64,
    pub latency_mean_s_per_tok: f64,
    pub latency_p50_s_per_tok: f64,
    pub latency_p95_s_per_tok: f64,
    /// "ok", "rejected=N", or an error message for a failed cell.
    pub status: String,
}

pub const METRICS_CSV_HEADER: &str =
    "strategy,rank,rate,throughput_tok_s,latency_s_per_tok_mean,p50,p95,status";

fn rate_cell(rate: Option<f64>) -> String {
    match rate {
        None => "inf".into(),
        Some(r) => format!("{r}"),
    }
}

impl SweepRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.9e},{:.9e},{:.9e},{:.9e},{}",
            self.strategy.name(),
            self.rank,
            rate_cell(self.rate),
            self.throughput_tok_s,
            self.latency_mean_s_per_tok,
            self.latency_p50_s_per_tok,
            self.latency_p95_s_per_tok,
            self.status
        )
    }
}

/// Runs the cross-product of strategies × ranks × rates through the
/// continuous-batching simulator. Workloads are regenerated per rate from the
/// same seed, so every strategy/rank cell at one rate sees the identical
/// request stream. Per-cell failures become flagged rows, not errors.
pub fn sweep(
    spec: &SweepSpec,
    strategies: &[ServeStrategy],
    ranks: &[u32],
    rates: &[Option<f64>],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(strategies.len() * ranks.len() * rates.len());
    for &rate in rates {
        let arrivals = match rate {
            None => ArrivalProcess::Immediate,
            Some(r) => ArrivalProcess::Poisson { rate: r },
        };
        let workload = generate_workload(spec.n_requests, spec.len_range, arrivals, spec.seed)?;
        for &strategy in strategies {
            for &rank in ranks {
                let cfg = ServeConfig {
                    max_batched_tokens: spec.max_batched_tokens,
                    strategy,
                    rank,
                    adapters_per_example: spec.adapters_per_example,
                    cost: CostSource::Model {
                        c1: spec.c1,
                        c2: spec.c2,
                        d: spec.d,
                    },
                    seed: spec.seed,
                };
                match run_continuous(&cfg, &workload) {
                    Ok(m) => rows.push(SweepRow {
                        strategy,
                        rank,
                        rate,
                        throughput_tok_s: m.throughput_tok_s,
                        latency_mean_s_per_tok: m.latency_mean_s_per_tok,
                        latency_p50_s_per_tok: m.latency_p50_s_per_tok,
                        latency_p95_s_per_tok: m.latency_p95_s_per_tok,
                        status: if m.rejections.is_empty() {
                            "ok".into()
                        } else {
                            format!("rejected={}", m.rejections.len())
                        },
                    }),
                    Err(e) => rows.push(SweepRow {
                        strategy,
                        rank,
                        rate,
                        throughput_tok_s: f64::NAN,
                        latency_mean_s_per_tok: f64::NAN,
                        latency_p50_s_per_tok: f64::NAN,
                        latency_p95_s_per_tok: f64::NAN,
                        status: format!("error: {e}"),
                    }),
                }
            }
        }
    }
    Ok(rows)
}

fn paired_ranks(rows: &[SweepRow], rate: Option<f64>) -> Vec<(u32, &SweepRow, &SweepRow)> {
    let same_rate = |r: &&SweepRow| match (r.rate, rate) {
        (None, None) => true,
        (Some(a), Some(b)) => a == b,
        _ => false,
    };
    let mut ranks: Vec<u32> = rows
        .iter()
        .filter(same_rate)
        .map(|r| r.rank)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    ranks.sort_unstable();
    let mut out = Vec::new();
    for rank in ranks {
        let find = |s: ServeStrategy| {
            rows.iter()
                .filter(same_rate)
                .find(|r| r.rank == rank && r.strategy == s && r.status.starts_with("ok"))
        };
        if let (Some(f), Some(b)) = (find(ServeStrategy::Flora), find(ServeStrategy::BmmLora)) {
            out.push((rank, f, b));
        }
    }
    out
}

/// Smallest rank at which the bmm route's throughput reaches the
/// multiplicative route's, read off a sweep table.
pub fn throughput_inflection(rows: &[SweepRow], rate: Option<f64>) -> Option<u32> {
    paired_ranks(rows, rate)
        .into_iter()
        .find(|(_, flora, bmm)| bmm.throughput_tok_s >= flora.throughput_tok_s)
        .map(|(rank, _, _)| rank)
}

/// Smallest rank at which the bmm route's mean latency drops to the
/// multiplicative route's.
pub fn latency_inflection(rows: &[SweepRow], rate: Option<f64>) -> Option<u32> {
    paired_ranks(rows, rate)
        .into_iter()
        .find(|(_, flora, bmm)| bmm.latency_mean_s_per_tok <= flora.latency_mean_s_per_tok)
        .map(|(rank, _, _)| rank)
}
