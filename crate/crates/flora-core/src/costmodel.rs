//! Closed-form serving-cost expressions, the strategy-preference inequality,
//! crossover-rank computation and coefficient calibration from kernel timings.
//!
//! Units: `c1` is seconds per `d·b·l·r` batched-matmul unit, `c2` is seconds
//! per `b·l·r·d²` plain-matmul unit. One unit corresponds to one
//! multiply-accumulate group of the respective kernel, so the two closed
//! forms price the exact work the adapter forward paths perform:
//!
//! * additive adapters through batched matmul: `2·(m·c1)·(d·b·l·r) + c2·(b·l·d²)`
//!   (two skinny batched matmuls around one shared base matmul);
//! * multiplicative adapters: `c2·(r·b·l·d²)` (one plain matmul with an
//!   r-fold left operand; the elementwise scalings are negligible and
//!   deliberately not modeled).

use crate::error::{Error, Result};

/// Coefficients and dimensions entering the cost expressions.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct CostParams {
    /// Batched-matmul cost coefficient, seconds per `d·b·l·r` unit.
    pub c1: f64,
    /// Plain-matmul cost coefficient, seconds per `b·l·r·d²` unit.
    pub c2: f64,
    /// Hidden width of the adapted projection (assumes `d = k`).
    pub d: f64,
    /// Batch size.
    pub b: f64,
    /// Sequence length.
    pub l: f64,
    /// Adapter rank.
    pub r: f64,
    /// Adapters per example; multiplies the effective batched-matmul batch.
    pub m: f64,
}

impl CostParams {
    pub fn new(c1: f64, c2: f64, d: f64, b: f64, l: f64, r: f64, m: f64) -> Result<Self> {
        for (name, v) in [
            ("c1", c1),
            ("c2", c2),
            ("d", d),
            ("b", b),
            ("l", l),
            ("m", m),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "cost parameter {name} must be positive and finite, got {v}"
                )));
            }
        }
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Error::Config(format!(
                "cost parameter r must be nonnegative, got {r}"
            )));
        }
        Ok(Self {
            c1,
            c2,
            d,
            b,
            l,
            r,
            m,
        })
    }
}

/// Cost of serving per-example additive adapters via batched matmul:
/// `2·(m·c1)·(d·b·l·r) + c2·(b·l·d²)`. With `r = 0` this degenerates to the
/// bare base-layer cost.
pub fn bmm_lora_cost(p: &CostParams) -> f64 {
    2.0 * (p.m * p.c1) * (p.d * p.b * p.l * p.r) + p.c2 * (p.b * p.l * p.d * p.d)
}

/// Cost of serving per-example multiplicative adapters: `c2·(r·b·l·d²)`.
/// Invariant to the number of adapters per example.
pub fn flora_cost(p: &CostParams) -> f64 {
    p.c2 * (p.r * p.b * p.l * p.d * p.d)
}

/// True when the multiplicative route is (weakly) cheaper:
/// `2·m·c1/(d·c2) + 1/r ≥ 1`. Ties go to the multiplicative route.
pub fn flora_preferred(p: &CostParams) -> bool {
    debug_assert!(p.r > 0.0, "preference needs an actual adapter rank");
    2.0 * p.m * p.c1 / (p.d * p.c2) + 1.0 / p.r >= 1.0
}

/// Largest rank at which the multiplicative route stays preferred.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum CrossoverRank {
    /// Preferred for every rank up to and including this one.
    UpTo(u32),
    /// Preferred at every rank.
    Unbounded,
}

impl CrossoverRank {
    pub fn bound(self) -> Option<u32> {
        match self {
            CrossoverRank::UpTo(r) => Some(r),
            CrossoverRank::Unbounded => None,
        }
    }
}

impl std::fmt::Display for CrossoverRank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CrossoverRank::UpTo(r) => write!(f, "{r}"),
            CrossoverRank::Unbounded => write!(f, "unbounded"),
        }
    }
}

/// Largest integer rank with [`flora_preferred`] true:
/// `floor(1 / (1 − 2·m·c1/(d·c2)))` when `2·m·c1/(d·c2) < 1`, else unbounded.
pub fn crossover_rank(c1: f64, c2: f64, d: f64, m: f64) -> CrossoverRank {
    let lead = 2.0 * m * c1 / (d * c2);
    if lead >= 1.0 {
        CrossoverRank::Unbounded
    } else {
        CrossoverRank::UpTo((1.0 / (1.0 - lead)).floor() as u32)
    }
}

/// Coefficient ratio implied by an observed crossover rank at equality:
/// `c1/c2 = d·(1 − 1/r*)/2`.
pub fn infer_coeff_ratio(d: f64, crossover: u32) -> f64 {
    d * (1.0 - 1.0 / crossover as f64) / 2.0
}

/// Which kernel a timing sample measured.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum KernelKind {
    /// Batched matmul of `b` slices `[l,d]×[d,r]`: `b·l·d·r` units.
    Bmm,
    /// Plain matmul `[(b·l·r), d]×[d, d]`: `b·l·r·d²` units.
    Matmul,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Bmm => "bmm",
            KernelKind::Matmul => "matmul",
        }
    }
}

impl std::str::FromStr for KernelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bmm" => Ok(KernelKind::Bmm),
            "matmul" => Ok(KernelKind::Matmul),
            other => Err(Error::Format(format!("unknown kernel kind `{other}`"))),
        }
    }
}

/// One measured kernel runtime at a grid point.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct TimingSample {
    pub kernel: KernelKind,
    pub b: u32,
    pub l: u32,
    pub d: u32,
    pub r: u32,
    pub seconds: f64,
}

impl TimingSample {
    /// Units of the sample's kernel at its grid point.
    pub fn units(&self) -> f64 {
        let (b, l, d, r) = (
            self.b as f64,
            self.l as f64,
            self.d as f64,
            self.r as f64,
        );
        match self.kernel {
            KernelKind::Bmm => b * l * d * r,
            KernelKind::Matmul => b * l * r * d * d,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.9e}",
            self.kernel.name(),
            self.b,
            self.l,
            self.d,
            self.r,
            self.seconds
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Format(format!(
                "timing row needs 6 fields (kernel,b,l,d,r,seconds), got {}: `{line}`",
                fields.len()
            )));
        }
        let parse_u32 = |s: &str, what: &str| -> Result<u32> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad {what} `{s}` in timing row")))
        };
        Ok(Self {
            kernel: fields[0].parse()?,
            b: parse_u32(fields[1], "b")?,
            l: parse_u32(fields[2], "l")?,
            d: parse_u32(fields[3], "d")?,
            r: parse_u32(fields[4], "r")?,
            seconds: fields[5]
                .parse()
                .map_err(|_| Error::Format(format!("bad seconds `{}` in timing row", fields[5])))?,
        })
    }
}

/// Header for timings CSV files.
pub const TIMINGS_CSV_HEADER: &str = "kernel,b,l,d,r,seconds";

/// Least-squares fit of the two coefficients plus residual diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationFit {
    pub c1: f64,
    pub c2: f64,
    /// Root-mean-square of absolute residuals, seconds.
    pub residual_rms: f64,
    /// RMS of residuals relative to the measured times, per kernel.
    pub bmm_rel_rms: f64,
    pub matmul_rel_rms: f64,
    pub n_bmm: usize,
    pub n_matmul: usize,
    /// Set when the model explains the data poorly (relative RMS > 25%)
    /// or a coefficient came out non-positive.
    pub poor_fit: bool,
}

impl CalibrationFit {
    pub fn ratio(&self) -> f64 {
        self.c1 / self.c2
    }
}

const POOR_FIT_REL_RMS: f64 = 0.25;

/// Fits `(c1, c2)` by least squares against the two closed forms.
///
/// The design is block-diagonal — bmm rows only involve `c1`, matmul rows
/// only `c2` — so the normal equations separate into two 1-D projections.
pub fn calibrate(timings: &[TimingSample]) -> Result<CalibrationFit> {
    let mut uu = [0.0f64; 2];
    let mut ut = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for s in timings {
        if !(s.seconds.is_finite() && s.seconds >= 0.0) {
            return Err(Error::Calibration(format!(
                "timing sample has invalid seconds {}",
                s.seconds
            )));
        }
        let col = match s.kernel {
            KernelKind::Bmm => 0,
            KernelKind::Matmul => 1,
        };
        let u = s.units();
        uu[col] += u * u;
        ut[col] += u * s.seconds;
        counts[col] += 1;
    }
    if uu[0] == 0.0 || uu[1] == 0.0 {
        return Err(Error::Calibration(
            "design is rank-deficient: need timings for both the bmm and matmul kernels".into(),
        ));
    }
    let c1 = ut[0] / uu[0];
    let c2 = ut[1] / uu[1];

    let mut sq_sum = 0.0;
    let mut rel_sq = [0.0f64; 2];
    let mut rel_n = [0usize; 2];
    for s in timings {
        let (coef, col) = match s.kernel {
            KernelKind::Bmm => (c1, 0),
            KernelKind::Matmul => (c2, 1),
        };
        let predicted = coef * s.units();
        let resid = predicted - s.seconds;
        sq_sum += resid * resid;
        if s.seconds > 0.0 {
            rel_sq[col] += (resid / s.seconds).powi(2);
            rel_n[col] += 1;
        }
    }
    let rel_rms = |col: usize| {
        if rel_n[col] == 0 {
            0.0
        } else {
            (rel_sq[col] / rel_n[col] as f64).sqrt()
        }
    };
    let bmm_rel_rms = rel_rms(0);
    let matmul_rel_rms = rel_rms(1);
    let poor_fit = c1 <= 0.0
        || c2 <= 0.0
        || bmm_rel_rms > POOR_FIT_REL_RMS
        || matmul_rel_rms > POOR_FIT_REL_RMS;
    Ok(CalibrationFit {
        c1,
        c2,
        residual_rms: (sq_sum / timings.len() as f64).sqrt(),
        bmm_rel_rms,
        matmul_rel_rms,
        n_bmm: counts[0],
        n_matmul: counts[1],
        poor_fit,
    })
}

/// Grid for [`measure_kernel_grid`].
#[derive(Clone, Debug)]
pub struct MeasureSpec {
    pub ds: Vec<u32>,
    pub rs: Vec<u32>,
    pub b: u32,
    pub l: u32,
    /// Timing repetitions per cell; the median is kept.
    pub reps: u32,
    pub seed: u64,
}

impl Default for MeasureSpec {
    fn default() -> Self {
        Self {
            ds: vec![128, 256, 512],
            rs: vec![1, 2, 4, 8],
            b: 4,
            l: 16,
            reps: 3,
            seed: 0,
        }
    }
}

fn median(mut times: Vec<f64>) -> f64 {
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    times[times.len() / 2]
}

/// Times the two kernels at the benchmark width (f32) over the grid.
///
/// The bmm cell multiplies `b` slices `[l,d]×[d,r]`; the matmul cell runs one
/// `[(b·l·r), d]×[d, d]` product, matching the unit conventions of
/// [`TimingSample::units`]. Timed sections must run exclusively; callers are
/// responsible for not racing other work against them.
pub fn measure_kernel_grid(spec: &MeasureSpec) -> Result<Vec<TimingSample>> {
    use crate::numkit::{bmm, matmul, SeedRng, Tensor};
    if spec.ds.is_empty() || spec.rs.is_empty() || spec.reps == 0 {
        return Err(Error::Config("measurement grid must be non-empty".into()));
    }
    let mut rng = SeedRng::new(spec.seed);
    let (b, l) = (spec.b as usize, spec.l as usize);
    let mut out = Vec::new();
    for &d in &spec.ds {
        let du = d as usize;
        let w: Tensor<f32> = rng.tensor_uniform(vec![du, du], -1.0, 1.0);
        for &r in &spec.rs {
            let ru = r as usize;
            let x_bmm: Tensor<f32> = rng.tensor_uniform(vec![b, l, du], -1.0, 1.0);
            let b_stack: Tensor<f32> = rng.tensor_uniform(vec![b, du, ru], -1.0, 1.0);
            let x_mm: Tensor<f32> = rng.tensor_uniform(vec![b * l * ru, du], -1.0, 1.0);

            std::hint::black_box(bmm(&x_bmm, &b_stack)?);
            let mut times = Vec::with_capacity(spec.reps as usize);
            for _ in 0..spec.reps {
                let t0 = std::time::Instant::now();
                std::hint::black_box(bmm(&x_bmm, &b_stack)?);
                times.push(t0.elapsed().as_secs_f64());
            }
            out.push(TimingSample {
                kernel: KernelKind::Bmm,
                b: spec.b,
                l: spec.l,
                d,
                r,
                seconds: median(times),
            });

            std::hint::black_box(matmul(&x_mm, &w)?);
            let mut times = Vec::with_capacity(spec.reps as usize);
            for _ in 0..spec.reps {
                let t0 = std::time::Instant::now();
                std::hint::black_box(matmul(&x_mm, &w)?);
                times.push(t0.elapsed().as_secs_f64());
            }
            out.push(TimingSample {
                kernel: KernelKind::Matmul,
                b: spec.b,
                l: spec.l,
                d,
                r,
                seconds: median(times),
            });
        }
    }
    Ok(out)
}

/// The two serving kernel paths whose measured crossover validates the model.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ForwardPath {
    Flora,
    BmmLora,
}

/// Median wall time of one full strategy forward pass at f32: the
/// multiplicative path (input scaling, one shared matmul, output scaling and
/// rank fold) or the additive path (base matmul plus two batched matmuls).
pub fn measure_forward_seconds(
    path: ForwardPath,
    d: u32,
    r: u32,
    b: u32,
    l: u32,
    reps: u32,
    seed: u64,
) -> Result<f64> {
    use crate::adapters::{
        bmm_lora_forward, flora_forward_batched, AdaptedLinear, FloraAdapter, LoraAdapter,
    };
    use crate::numkit::{Activation, Reduction, SeedRng};
    let mut rng = SeedRng::new(seed);
    let (du, ru, bu, lu) = (d as usize, r as usize, b as usize, l as usize);
    let layer = AdaptedLinear::new(
        rng.tensor_uniform::<f32>(vec![du, du], -0.5, 0.5),
        None,
        Activation::Identity,
    )?;
    let x = rng.tensor_uniform::<f32>(vec![bu, lu, du], -1.0, 1.0);
    let run: Box<dyn Fn() -> Result<()>> = match path {
        ForwardPath::Flora => {
            let ads: Vec<FloraAdapter<f32>> = (0..bu)
                .map(|i| {
                    FloraAdapter::new(
                        i as u64,
                        rng.tensor_uniform(vec![du, ru], 0.5, 1.5),
                        rng.tensor_uniform(vec![ru, du], 0.0, 1.0),
                        Reduction::Sum,
                    )
                    .expect("valid factors")
                })
                .collect();
            let (x, layer) = (x.clone(), layer.clone());
            Box::new(move || {
                std::hint::black_box(flora_forward_batched(&x, &layer, &ads)?);
                Ok(())
            })
        }
        ForwardPath::BmmLora => {
            let ads: Vec<LoraAdapter<f32>> = (0..bu)
                .map(|i| {
                    LoraAdapter::new(
                        i as u64,
                        rng.tensor_uniform(vec![du, ru], -0.5, 0.5),
                        rng.tensor_uniform(vec![ru, du], -0.5, 0.5),
                    )
                    .expect("valid factors")
                })
                .collect();
            let (x, layer) = (x.clone(), layer.clone());
            Box::new(move || {
                std::hint::black_box(bmm_lora_forward(&x, &layer, &ads)?);
                Ok(())
            })
        }
    };
    run()?; // warmup
    let mut times = Vec::with_capacity(reps.max(1) as usize);
    for _ in 0..reps.max(1) {
        let t0 = std::time::Instant::now();
        run()?;
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

/// Wall-time ratio `bmm / flora` of one full forward pass at the benchmark
/// width (f32), computed as the ratio of per-path minima over `reps`
/// interleaved repetitions.
///
/// Interleaving spreads bursty interference evenly over both paths and the
/// minimum discards it entirely, so the ratio converges to the quiet-machine
/// comparison. A result above 1 means the multiplicative path was faster.
pub fn measure_path_ratio(d: u32, r: u32, b: u32, l: u32, reps: u32, seed: u64) -> Result<f64> {
    use crate::adapters::{
        bmm_lora_forward, flora_forward_batched, AdaptedLinear, FloraAdapter, LoraAdapter,
    };
    use crate::numkit::{Activation, Reduction, SeedRng};
    if reps == 0 {
        return Err(Error::Config("reps must be positive".into()));
    }
    let mut rng = SeedRng::new(seed);
    let (du, ru, bu, lu) = (d as usize, r as usize, b as usize, l as usize);
    let layer = AdaptedLinear::new(
        rng.tensor_uniform::<f32>(vec![du, du], -0.5, 0.5),
        None,
        Activation::Identity,
    )?;
    let x = rng.tensor_uniform::<f32>(vec![bu, lu, du], -1.0, 1.0);
    let floras: Vec<FloraAdapter<f32>> = (0..bu)
        .map(|i| {
            FloraAdapter::new(
                i as u64,
                rng.tensor_uniform(vec![du, ru], 0.5, 1.5),
                rng.tensor_uniform(vec![ru, du], 0.0, 1.0),
                Reduction::Sum,
            )
            .expect("valid factors")
        })
        .collect();
    let loras: Vec<LoraAdapter<f32>> = (0..bu)
        .map(|i| {
            LoraAdapter::new(
                i as u64,
                rng.tensor_uniform(vec![du, ru], -0.5, 0.5),
                rng.tensor_uniform(vec![ru, du], -0.5, 0.5),
            )
            .expect("valid factors")
        })
        .collect();
    // warmup both paths
    std::hint::black_box(flora_forward_batched(&x, &layer, &floras)?);
    std::hint::black_box(bmm_lora_forward(&x, &layer, &loras)?);
    let time_flora = || -> Result<f64> {
        let t0 = std::time::Instant::now();
        std::hint::black_box(flora_forward_batched(&x, &layer, &floras)?);
        Ok(t0.elapsed().as_secs_f64())
    };
    let time_bmm = || -> Result<f64> {
        let t0 = std::time::Instant::now();
        std::hint::black_box(bmm_lora_forward(&x, &layer, &loras)?);
        Ok(t0.elapsed().as_secs_f64())
    };
    let mut min_flora = f64::INFINITY;
    let mut min_bmm = f64::INFINITY;
    for rep in 0..reps {
        if rep % 2 == 0 {
            min_flora = min_flora.min(time_flora()?);
            min_bmm = min_bmm.min(time_bmm()?);
        } else {
            min_bmm = min_bmm.min(time_bmm()?);
            min_flora = min_flora.min(time_flora()?);
        }
    }
    Ok(min_bmm / min_flora)
}
