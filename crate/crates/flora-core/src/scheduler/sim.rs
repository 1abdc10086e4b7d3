//! Discrete-event serving simulator: continuous batching and the static
//! baseline.
//!
//! The clock advances one decoding step at a time for the whole running
//! batch. A step's duration comes from the calibrated cost model at the
//! current batch composition (or from timing a real toy block in smoke
//! mode). Admission reserves `prompt_len + output_len` tokens against
//! `max_batched_tokens`; the prefill of an admitted request is costed as one
//! closed-form step with `l = prompt_len` and yields the request's first
//! output token.

use std::time::Instant;

use crate::adapters::{AdapterKind, InitStrategy};
use crate::costmodel::{bmm_lora_cost, flora_cost, CostParams};
use crate::error::{Error, Result};
use crate::model::{AdapterBundle, Block, BlockConfig, BlockStrategy};
use crate::numkit::SeedRng;
use crate::scheduler::workload::Request;

/// Which adapter strategy the simulated server runs.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ServeStrategy {
    Flora,
    BmmLora,
}

impl ServeStrategy {
    pub fn name(self) -> &'static str {
        match self {
            ServeStrategy::Flora => "flora",
            ServeStrategy::BmmLora => "bmm_lora",
        }
    }
}

impl std::str::FromStr for ServeStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flora" => Ok(ServeStrategy::Flora),
            "bmm_lora" | "bmm-lora" => Ok(ServeStrategy::BmmLora),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

/// Where step durations come from.
#[derive(Clone, Debug)]
pub enum CostSource {
    /// Calibrated closed forms: fast, deterministic, scales to any width.
    Model { c1: f64, c2: f64, d: u32 },
    /// Smoke mode: time a real toy block forward per step. Wall-clock, so
    /// runs are not bit-reproducible.
    LiveBlock { cfg: BlockConfig, seed: u64 },
}

/// Simulator configuration.
#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub max_batched_tokens: u32,
    pub strategy: ServeStrategy,
    pub rank: u32,
    /// Adapters per example (`m` in the cost expressions).
    pub adapters_per_example: u32,
    pub cost: CostSource,
    pub seed: u64,
}

impl ServeConfig {
    /// Default token budget for throughput runs.
    pub const MAX_BATCHED_TOKENS_THROUGHPUT: u32 = 8192;
    /// Default token budget for latency runs.
    pub const MAX_BATCHED_TOKENS_LATENCY: u32 = 2560;

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("serve rank must be at least 1".into()));
        }
        if self.adapters_per_example == 0 {
            return Err(Error::Config("adapters_per_example must be at least 1".into()));
        }
        if self.max_batched_tokens == 0 {
            return Err(Error::Config("max_batched_tokens must be positive".into()));
        }
        if let CostSource::Model { c1, c2, d } = self.cost {
            if !(c1 > 0.0 && c2 > 0.0 && c1.is_finite() && c2.is_finite()) || d == 0 {
                return Err(Error::Config(format!(
                    "bad cost-model parameters c1={c1}, c2={c2}, d={d}"
                )));
            }
        }
        Ok(())
    }
}

/// One finished request in the trace.
#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub request_id: u64,
    pub adapter_id: u64,
    pub arrival: f64,
    /// Time its prefill began.
    pub admitted: f64,
    pub finished: f64,
    pub output_len: u32,
}

impl Completion {
    /// Seconds per output token, queueing included.
    pub fn latency_per_token(&self) -> f64 {
        (self.finished - self.arrival) / f64::from(self.output_len)
    }
}

/// A request the scheduler could never run.
#[derive(Clone, Debug, PartialEq)]
pub struct Rejection {
    pub request_id: u64,
    pub reason: String,
}

/// What an occupancy sample was taken after.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum SampleEvent {
    /// A request finished its prefill and joined (or completed immediately).
    Admission,
    /// The admission scan reached a fixpoint and a decode step is about to
    /// run: every waiting request either has not arrived or does not fit.
    StepStart,
    /// A decode step finished; completed sequences have left.
    StepEnd,
}

/// Batch composition at one event boundary.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct OccupancySample {
    pub time: f64,
    pub active: usize,
    pub reserved_tokens: u64,
    pub event: SampleEvent,
}

/// Throughput/latency accounting over one simulated run.
#[derive(Clone, Debug, Default)]
pub struct ServeMetrics {
    pub throughput_tok_s: f64,
    pub latency_mean_s_per_tok: f64,
    pub latency_p50_s_per_tok: f64,
    pub latency_p95_s_per_tok: f64,
    pub total_tokens: u64,
    /// Last completion minus first completed arrival.
    pub duration_s: f64,
    pub completions: Vec<Completion>,
    pub rejections: Vec<Rejection>,
    pub occupancy: Vec<OccupancySample>,
}

impl ServeMetrics {
    /// Recomputes tokens/second from the raw completion trace; must equal the
    /// reported `throughput_tok_s` identically.
    pub fn recompute_throughput(&self) -> f64 {
        let total: u64 = self.completions.iter().map(|c| u64::from(c.output_len)).sum();
        let start = self
            .completions
            .iter()
            .map(|c| c.arrival)
            .fold(f64::INFINITY, f64::min);
        let end = self
            .completions
            .iter()
            .map(|c| c.finished)
            .fold(f64::NEG_INFINITY, f64::max);
        let span = end - start;
        if total == 0 || span <= 0.0 || span.is_nan() {
            0.0
        } else {
            total as f64 / span
        }
    }

    fn finalize(mut self) -> Self {
        self.total_tokens = self.completions.iter().map(|c| u64::from(c.output_len)).sum();
        let start = self
            .completions
            .iter()
            .map(|c| c.arrival)
            .fold(f64::INFINITY, f64::min);
        let end = self
            .completions
            .iter()
            .map(|c| c.finished)
            .fold(f64::NEG_INFINITY, f64::max);
        self.duration_s = if self.completions.is_empty() { 0.0 } else { end - start };
        self.throughput_tok_s = self.recompute_throughput();

        let mut lats: Vec<f64> = self.completions.iter().map(|c| c.latency_per_token()).collect();
        if lats.is_empty() {
            self.latency_mean_s_per_tok = 0.0;
            self.latency_p50_s_per_tok = 0.0;
            self.latency_p95_s_per_tok = 0.0;
        } else {
            lats.sort_by(|a, b| a.partial_cmp(b).expect("finite latencies"));
            self.latency_mean_s_per_tok = lats.iter().sum::<f64>() / lats.len() as f64;
            self.latency_p50_s_per_tok = percentile(&lats, 0.50);
            self.latency_p95_s_per_tok = percentile(&lats, 0.95);
        }
        self
    }
}

/// Nearest-rank percentile of a sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

/// Step-duration source shared by both scheduling modes.
enum Coster {
    Model {
        c1: f64,
        c2: f64,
        d: f64,
    },
    Live {
        block: Block<f32>,
        bundles: Vec<AdapterBundle<f32>>,
        strategy: BlockStrategy,
    },
}

/// Size of the adapter pool in live smoke mode; compositions larger than the
/// pool cycle through it.
const LIVE_POOL: usize = 16;

impl Coster {
    fn build(cfg: &ServeConfig) -> Coster {
        match &cfg.cost {
            CostSource::Model { c1, c2, d } => Coster::Model {
                c1: *c1,
                c2: *c2,
                d: f64::from(*d),
            },
            CostSource::LiveBlock { cfg: block_cfg, seed } => {
                let block = Block::<f32>::new(block_cfg.clone(), *seed);
                let kind = match cfg.strategy {
                    ServeStrategy::Flora => AdapterKind::Flora,
                    ServeStrategy::BmmLora => AdapterKind::Lora,
                };
                let strategy = match cfg.strategy {
                    ServeStrategy::Flora => BlockStrategy::Flora,
                    ServeStrategy::BmmLora => BlockStrategy::BmmLora,
                };
                let mut bundles = Vec::with_capacity(LIVE_POOL);
                for i in 0..LIVE_POOL {
                    let slots = block_cfg
                        .placements
                        .iter()
                        .map(|&p| {
                            let layer = block.layer(p);
                            let rec = crate::adapters::init_adapter::<f32>(
                                kind,
                                layer.d(),
                                layer.k(),
                                cfg.rank as usize,
                                cfg.seed ^ (i as u64) << 8 ^ p as u64,
                                InitStrategy::Random { std: 0.05 },
                            )
                            .expect("valid live adapter");
                            (p, rec)
                        })
                        .collect();
                    bundles.push(AdapterBundle::new(i as u64, slots));
                }
                Coster::Live {
                    block,
                    bundles,
                    strategy,
                }
            }
        }
    }

    /// Duration of processing `l_tokens` per sequence for `batch` sequences
    /// under the given strategy.
    fn step_seconds(&self, cfg: &ServeConfig, batch: usize, l_tokens: u32) -> f64 {
        match self {
            Coster::Model { c1, c2, d } => {
                let p = CostParams {
                    c1: *c1,
                    c2: *c2,
                    d: *d,
                    b: batch as f64,
                    l: f64::from(l_tokens),
                    r: f64::from(cfg.rank),
                    m: f64::from(cfg.adapters_per_example),
                };
                match cfg.strategy {
                    ServeStrategy::Flora => flora_cost(&p),
                    ServeStrategy::BmmLora => bmm_lora_cost(&p),
                }
            }
            Coster::Live {
                block,
                bundles,
                strategy,
            } => {
                let d_model = block.config().d_model;
                let mut rng = SeedRng::new(cfg.seed ^ 0x11CE);
                let x = rng.tensor_normal::<f32>(
                    vec![batch, l_tokens as usize, d_model],
                    0.0,
                    1.0,
                );
                let pool: Vec<AdapterBundle<f32>> = (0..batch)
                    .map(|i| bundles[i % bundles.len()].clone())
                    .collect();
                let start = Instant::now();
                block
                    .forward(&x, &pool, *strategy)
                    .expect("live block forward");
                start.elapsed().as_secs_f64()
            }
        }
    }

    /// Decode step: every active sequence advances one token.
    fn decode(&self, cfg: &ServeConfig, batch: usize) -> f64 {
        self.step_seconds(cfg, batch, 1)
    }

    /// Prefill of one admitted request; yields its first output token.
    fn prefill(&self, cfg: &ServeConfig, prompt_len: u32) -> f64 {
        self.step_seconds(cfg, 1, prompt_len)
    }
}

struct ActiveSeq {
    request: Request,
    generated: u32,
    admitted: f64,
}

struct SimState<'a> {
    cfg: &'a ServeConfig,
    coster: Coster,
    now: f64,
    active: Vec<ActiveSeq>,
    reserved_tokens: u64,
    metrics: ServeMetrics,
}

impl<'a> SimState<'a> {
    fn new(cfg: &'a ServeConfig) -> Self {
        Self {
            cfg,
            coster: Coster::build(cfg),
            now: 0.0,
            active: Vec::new(),
            reserved_tokens: 0,
            metrics: ServeMetrics::default(),
        }
    }

    fn sample_occupancy(&mut self, event: SampleEvent) {
        self.metrics.occupancy.push(OccupancySample {
            time: self.now,
            active: self.active.len(),
            reserved_tokens: self.reserved_tokens,
            event,
        });
    }

    fn fits(&self, r: &Request) -> bool {
        self.reserved_tokens + r.token_need() <= u64::from(self.cfg.max_batched_tokens)
    }

    /// Runs the request's prefill (advancing the clock), granting its first
    /// output token; single-token requests complete immediately.
    fn admit(&mut self, request: Request) {
        let admitted = self.now;
        self.now += self.coster.prefill(self.cfg, request.prompt_len);
        if request.output_len == 1 {
            self.metrics.completions.push(Completion {
                request_id: request.id,
                adapter_id: request.adapter_id,
                arrival: request.arrival_time,
                admitted,
                finished: self.now,
                output_len: 1,
            });
        } else {
            self.reserved_tokens += request.token_need();
            self.active.push(ActiveSeq {
                request,
                generated: 1,
                admitted,
            });
        }
        self.sample_occupancy(SampleEvent::Admission);
    }

    /// One decode step for the whole batch; finished sequences leave.
    /// `costed_width` lets static batching pay for padded slots.
    fn decode_step(&mut self, costed_width: usize) {
        self.now += self.coster.decode(self.cfg, costed_width);
        let now = self.now;
        let (metrics, reserved) = (&mut self.metrics, &mut self.reserved_tokens);
        self.active.retain_mut(|seq| {
            seq.generated += 1;
            if seq.generated >= seq.request.output_len {
                metrics.completions.push(Completion {
                    request_id: seq.request.id,
                    adapter_id: seq.request.adapter_id,
                    arrival: seq.request.arrival_time,
                    admitted: seq.admitted,
                    finished: now,
                    output_len: seq.request.output_len,
                });
                *reserved -= seq.request.token_need();
                false
            } else {
                true
            }
        });
        self.sample_occupancy(SampleEvent::StepEnd);
    }
}

/// Splits off requests that can never run under the token budget.
fn prescreen(cfg: &ServeConfig, workload: &[Request]) -> (Vec<Request>, Vec<Rejection>) {
    let mut ok = Vec::with_capacity(workload.len());
    let mut rejected = Vec::new();
    for r in workload {
        if r.token_need() > u64::from(cfg.max_batched_tokens) {
            rejected.push(Rejection {
                request_id: r.id,
                reason: format!(
                    "needs {} batched tokens, budget is {}",
                    r.token_need(),
                    cfg.max_batched_tokens
                ),
            });
        } else {
            ok.push(r.clone());
        }
    }
    // stable arrival order; ties broken by id for determinism
    ok.sort_by(|a, b| {
        a.arrival_time
            .partial_cmp(&b.arrival_time)
            .expect("finite arrivals")
            .then(a.id.cmp(&b.id))
    });
    (ok, rejected)
}

/// Continuous batching: a waiting request that fits is admitted at every
/// event boundary. The queue is scanned in arrival order; requests that do
/// not fit are skipped, so a small request may overtake a large one.
pub fn run_continuous(cfg: &ServeConfig, workload: &[Request]) -> Result<ServeMetrics> {
    cfg.validate()?;
    let (mut queue, rejections) = prescreen(cfg, workload);
    let mut sim = SimState::new(cfg);
    sim.metrics.rejections = rejections;

    loop {
        // admit everything that has arrived and fits (work conservation)
        let mut i = 0;
        while i < queue.len() {
            if queue[i].arrival_time <= sim.now && sim.fits(&queue[i]) {
                let req = queue.remove(i);
                sim.admit(req);
                // clock moved during prefill: rescan from the front
                i = 0;
            } else {
                i += 1;
            }
        }
        if sim.active.is_empty() {
            match queue
                .iter()
                .map(|r| r.arrival_time)
                .fold(f64::INFINITY, f64::min)
            {
                next if next.is_finite() => {
                    sim.now = sim.now.max(next);
                    continue;
                }
                _ => break,
            }
        }
        sim.sample_occupancy(SampleEvent::StepStart);
        let width = sim.active.len();
        sim.decode_step(width);
    }
    Ok(sim.metrics.finalize())
}

/// Static batching baseline: a batch is formed, padded to its widest
/// composition, and runs until its longest member finishes before anything
/// new is admitted.
pub fn run_static(cfg: &ServeConfig, workload: &[Request]) -> Result<ServeMetrics> {
    cfg.validate()?;
    let (mut queue, rejections) = prescreen(cfg, workload);
    let mut sim = SimState::new(cfg);
    sim.metrics.rejections = rejections;

    while !queue.is_empty() {
        // wait for the first arrival if the server is idle
        let first = queue
            .iter()
            .map(|r| r.arrival_time)
            .fold(f64::INFINITY, f64::min);
        sim.now = sim.now.max(first);

        // form one batch from whatever has arrived, in arrival order
        let mut i = 0;
        while i < queue.len() {
            if queue[i].arrival_time <= sim.now && sim.fits(&queue[i]) {
                let req = queue.remove(i);
                sim.admit(req);
                i = 0;
            } else {
                i += 1;
            }
        }
        // run the batch to completion at its padded width
        let width = sim.active.len();
        while !sim.active.is_empty() {
            sim.sample_occupancy(SampleEvent::StepStart);
            sim.decode_step(width);
        }
    }
    Ok(sim.metrics.finalize())
}
