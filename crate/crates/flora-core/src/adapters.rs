//! Adapter records and the four forward-path strategies.
//!
//! A base projection `W0 ∈ R^{d×k}` can be adapted three ways:
//!
//! * additive low rank: effective weight `W0 + B·A` with `B: d×r`, `A: r×k`;
//! * multiplicative low rank: effective weight `W0 ∘ (B·A)`, which factors so
//!   that per-example adapters ride along one shared matmul as elementwise
//!   scalings of its input and output;
//! * activation rescaling: a learned per-output-column vector.
//!
//! Each fast path has a materialized-weight oracle that builds the full
//! per-example weight and multiplies; the oracle is the ground truth every
//! fast path is tested against.

use crate::error::{Error, Result};
use crate::numkit::{bmm, ewise_add, matmul, Activation, Reduction, Scalar, SeedRng, Tensor};

/// Tag for the three adapter families.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum AdapterKind {
    Lora,
    Flora,
    Ia3,
}

impl AdapterKind {
    pub fn code(self) -> u8 {
        match self {
            AdapterKind::Lora => 0,
            AdapterKind::Flora => 1,
            AdapterKind::Ia3 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(AdapterKind::Lora),
            1 => Some(AdapterKind::Flora),
            2 => Some(AdapterKind::Ia3),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Lora => "lora",
            AdapterKind::Flora => "flora",
            AdapterKind::Ia3 => "ia3",
        }
    }
}

impl std::str::FromStr for AdapterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(AdapterKind::Lora),
            "flora" => Ok(AdapterKind::Flora),
            "ia3" => Ok(AdapterKind::Ia3),
            other => Err(Error::Config(format!("unknown adapter kind `{other}`"))),
        }
    }
}

/// Additive low-rank adapter: effective weight `W0 + B·A`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    pub id: u64,
    /// Input-side factor, `d×r`.
    pub b: Tensor<T>,
    /// Output-side factor, `r×k`.
    pub a: Tensor<T>,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(id: u64, b: Tensor<T>, a: Tensor<T>) -> Result<Self> {
        check_factors(&b, &a)?;
        Ok(Self { id, b, a })
    }

    pub fn d(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.b.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.a.shape()[1]
    }
}

/// Multiplicative low-rank adapter: effective weight `W0 ∘ (B·A)`.
///
/// For rank > 1 the factored forward pass carries an extra rank axis that is
/// folded with `reduction` before the activation. `Sum` makes the factored
/// path equal the materialized weight exactly; `Mean` is the 1/r-rescaled
/// variant and is executed as `Sum` with `A` pre-scaled by `1/r`.
#[derive(Clone, Debug, PartialEq)]
pub struct FloraAdapter<T> {
    pub id: u64,
    /// Input-side factor, `d×r`.
    pub b: Tensor<T>,
    /// Output-side factor, `r×k`.
    pub a: Tensor<T>,
    pub reduction: Reduction,
}

impl<T: Scalar> FloraAdapter<T> {
    pub fn new(id: u64, b: Tensor<T>, a: Tensor<T>, reduction: Reduction) -> Result<Self> {
        check_factors(&b, &a)?;
        Ok(Self {
            id,
            b,
            a,
            reduction,
        })
    }

    pub fn d(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.b.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.a.shape()[1]
    }

    /// Output-side factor with the reduction folded in: `A` for sum mode,
    /// `A/r` for mean mode.
    pub(crate) fn effective_a(&self) -> Tensor<T> {
        match self.reduction {
            Reduction::Sum => self.a.clone(),
            Reduction::Mean => self.a.scale(T::from_f64(1.0 / self.rank() as f64)),
        }
    }
}

/// Activation-rescaling adapter: a learned vector over the `k` output columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Ia3Adapter<T> {
    pub id: u64,
    pub scale: Tensor<T>,
}

impl<T: Scalar> Ia3Adapter<T> {
    pub fn new(id: u64, scale: Tensor<T>) -> Result<Self> {
        if scale.rank() != 1 {
            return Err(Error::Dimension(format!(
                "ia3 scale must be a vector, got shape {:?}",
                scale.shape()
            )));
        }
        Ok(Self { id, scale })
    }

    pub fn k(&self) -> usize {
        self.scale.shape()[0]
    }
}

fn check_factors<T: Scalar>(b: &Tensor<T>, a: &Tensor<T>) -> Result<()> {
    if b.rank() != 2 || a.rank() != 2 {
        return Err(Error::Dimension(format!(
            "adapter factors must be matrices, got {:?} and {:?}",
            b.shape(),
            a.shape()
        )));
    }
    if b.shape()[1] != a.shape()[0] {
        return Err(Error::Dimension(format!(
            "factor ranks disagree: B is {:?}, A is {:?}",
            b.shape(),
            a.shape()
        )));
    }
    Ok(())
}

/// One adapter of any kind.
#[derive(Clone, Debug, PartialEq)]
pub enum AdapterRecord<T> {
    Lora(LoraAdapter<T>),
    Flora(FloraAdapter<T>),
    Ia3(Ia3Adapter<T>),
}

impl<T: Scalar> AdapterRecord<T> {
    pub fn kind(&self) -> AdapterKind {
        match self {
            AdapterRecord::Lora(_) => AdapterKind::Lora,
            AdapterRecord::Flora(_) => AdapterKind::Flora,
            AdapterRecord::Ia3(_) => AdapterKind::Ia3,
        }
    }

    pub fn id(&self) -> u64 {
        match self {
            AdapterRecord::Lora(a) => a.id,
            AdapterRecord::Flora(a) => a.id,
            AdapterRecord::Ia3(a) => a.id,
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            AdapterRecord::Lora(a) => a.rank(),
            AdapterRecord::Flora(a) => a.rank(),
            AdapterRecord::Ia3(_) => 0,
        }
    }

    /// `(d, k)` of the layer this record targets; ia3 reports `d = 0`.
    pub fn dims(&self) -> (usize, usize) {
        match self {
            AdapterRecord::Lora(a) => (a.d(), a.k()),
            AdapterRecord::Flora(a) => (a.d(), a.k()),
            AdapterRecord::Ia3(a) => (0, a.k()),
        }
    }
}

/// A base projection with optional bias and an output nonlinearity.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedLinear<T> {
    pub w0: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub activation: Activation,
}

impl<T: Scalar> AdaptedLinear<T> {
    pub fn new(w0: Tensor<T>, bias: Option<Tensor<T>>, activation: Activation) -> Result<Self> {
        if w0.rank() != 2 {
            return Err(Error::Dimension(format!(
                "base weight must be a matrix, got {:?}",
                w0.shape()
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [w0.shape()[1]] {
                return Err(Error::Dimension(format!(
                    "bias shape {:?} does not match output width {}",
                    b.shape(),
                    w0.shape()[1]
                )));
            }
        }
        Ok(Self {
            w0,
            bias,
            activation,
        })
    }

    pub fn d(&self) -> usize {
        self.w0.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.w0.shape()[1]
    }

    /// Bias plus activation, shared by every strategy so the paths agree bit
    /// for bit on their common suffix.
    fn finish(&self, pre: Tensor<T>) -> Result<Tensor<T>> {
        let biased = match &self.bias {
            Some(b) => ewise_add(&pre, b)?,
            None => pre,
        };
        Ok(self.activation.apply(&biased))
    }
}

fn expect_3d<T: Scalar>(x: &Tensor<T>, d: usize, what: &str) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 3 || s[2] != d {
        return Err(Error::Dimension(format!(
            "{what} expects input [b, l, {d}], got {s:?}"
        )));
    }
    Ok((s[0], s[1]))
}

/// Forward pass with one additive low-rank adapter shared by the whole batch:
/// `φ(X·W0 + (X·B)·A + bias)`.
pub fn lora_forward_shared<T: Scalar>(
    x: &Tensor<T>,
    layer: &AdaptedLinear<T>,
    ad: &LoraAdapter<T>,
) -> Result<Tensor<T>> {
    let (b, l) = expect_3d(x, layer.d(), "lora_forward_shared")?;
    if ad.d() != layer.d() || ad.k() != layer.k() {
        return Err(Error::Dimension(format!(
            "adapter targets {}×{}, layer is {}×{}",
            ad.d(),
            ad.k(),
            layer.d(),
            layer.k()
        )));
    }
    let flat = x.reshape(vec![b * l, layer.d()])?;
    let base = matmul(&flat, &layer.w0)?;
    let hidden = matmul(&flat, &ad.b)?;
    let delta = matmul(&hidden, &ad.a)?;
    let pre = ewise_add(&base, &delta)?;
    let out = layer.finish(pre)?;
    out.reshape(vec![b, l, layer.k()])
}

fn stack_factors<T: Scalar>(
    factors: impl Iterator<Item = Tensor<T>>,
    count: usize,
    rows: usize,
    cols: usize,
) -> Tensor<T> {
    let mut data = Vec::with_capacity(count * rows * cols);
    for f in factors {
        data.extend_from_slice(f.data());
    }
    Tensor::from_parts(vec![count, rows, cols], data)
}

fn common_rank<I: Iterator<Item = usize>>(mut ranks: I) -> Result<usize> {
    let first = ranks
        .next()
        .ok_or_else(|| Error::Arity("empty adapter list".into()))?;
    for (i, r) in ranks.enumerate() {
        if r != first {
            return Err(Error::HeterogeneousRank(format!(
                "adapter 0 has rank {first}, adapter {} has rank {r}",
                i + 1
            )));
        }
    }
    Ok(first)
}

/// Forward pass with one additive adapter per example, served through two
/// batched matmuls: `φ(X·W0 + bmm(bmm(X, B_stack), A_stack) + bias)`.
pub fn bmm_lora_forward<T: Scalar>(
    x: &Tensor<T>,
    layer: &AdaptedLinear<T>,
    ads: &[LoraAdapter<T>],
) -> Result<Tensor<T>> {
    let (b, l) = expect_3d(x, layer.d(), "bmm_lora_forward")?;
    if ads.len() != b {
        return Err(Error::Arity(format!(
            "batch has {b} examples but {} adapters",
            ads.len()
        )));
    }
    let r = common_rank(ads.iter().map(|a| a.rank()))?;
    for ad in ads {
        if ad.d() != layer.d() || ad.k() != layer.k() {
            return Err(Error::Dimension(format!(
                "adapter {} targets {}×{}, layer is {}×{}",
                ad.id,
                ad.d(),
                ad.k(),
                layer.d(),
                layer.k()
            )));
        }
    }
    let (d, k) = (layer.d(), layer.k());
    let flat = x.reshape(vec![b * l, d])?;
    let base = matmul(&flat, &layer.w0)?.reshape(vec![b, l, k])?;
    let b_stack = stack_factors(ads.iter().map(|a| a.b.clone()), b, d, r);
    let a_stack = stack_factors(ads.iter().map(|a| a.a.clone()), b, r, k);
    let hidden = bmm(x, &b_stack)?;
    let delta = bmm(&hidden, &a_stack)?;
    let pre = ewise_add(&base, &delta)?;
    layer.finish(pre)
}

/// Input rows scaled per rank column: `out[(t·r + j), :] = B[:, j] ∘ x[t, :]`.
fn rank_scaled_input<T: Scalar>(
    x: &[T],
    b_factor: &[T],
    tokens: usize,
    d: usize,
    r: usize,
    out: &mut Vec<T>,
) {
    for t in 0..tokens {
        let row = &x[t * d..(t + 1) * d];
        for j in 0..r {
            let column = b_factor[j..].iter().step_by(r);
            for (&bv, &xv) in column.zip(row) {
                out.push(bv * xv);
            }
        }
    }
}

/// Scale by the output factor and fold the rank axis: given `u` of shape
/// `[tokens·r, k]`, returns `[tokens, k]` with
/// `out[t, c] = Σ_j a[j, c] · u[t·r + j, c]`, j ascending.
fn scale_and_fold<T: Scalar>(u: &[T], a_factor: &[T], tokens: usize, r: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; tokens * k];
    for (orow, ublock) in out.chunks_exact_mut(k).zip(u.chunks_exact(r * k)) {
        for (urow, arow) in ublock.chunks_exact(k).zip(a_factor.chunks_exact(k)) {
            for ((o, &uv), &av) in orow.iter_mut().zip(urow).zip(arow) {
                *o += av * uv;
            }
        }
    }
    out
}

/// Single-example multiplicative-adapter forward pass.
///
/// Computes `φ(fold_r(A ∘ ((B ∘ x)·W0)) + bias)`: the input row is scaled by
/// each rank column of `B` (broadcast across the `r` columns), multiplied once
/// by `W0`, scaled by `A`, and the rank axis is folded before the activation.
/// With sum folding this equals `φ(x·(W0 ∘ (B·A)) + bias)` up to rounding.
pub fn flora_forward<T: Scalar>(
    x: &Tensor<T>,
    layer: &AdaptedLinear<T>,
    ad: &FloraAdapter<T>,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 2 || s[1] != layer.d() {
        return Err(Error::Dimension(format!(
            "flora_forward expects input [l, {}], got {s:?}",
            layer.d()
        )));
    }
    if ad.d() != layer.d() || ad.k() != layer.k() {
        return Err(Error::Dimension(format!(
            "adapter targets {}×{}, layer is {}×{}",
            ad.d(),
            ad.k(),
            layer.d(),
            layer.k()
        )));
    }
    let (l, d, k, r) = (s[0], layer.d(), layer.k(), ad.rank());
    let mut scaled = Vec::with_capacity(l * r * d);
    rank_scaled_input(x.data(), ad.b.data(), l, d, r, &mut scaled);
    let u = matmul(&Tensor::from_parts(vec![l * r, d], scaled), &layer.w0)?;
    let a_eff = ad.effective_a();
    let pre = Tensor::from_parts(vec![l, k], scale_and_fold(u.data(), a_eff.data(), l, r, k));
    layer.finish(pre)
}

/// Batched multiplicative-adapter forward pass, one adapter per example,
/// vectorized so heterogeneous adapters share one plain matmul:
/// `φ(A ∘ ((B ∘ X)·W0) + bias)` with the rank axis folded before `φ`.
pub fn flora_forward_batched<T: Scalar>(
    x: &Tensor<T>,
    layer: &AdaptedLinear<T>,
    ads: &[FloraAdapter<T>],
) -> Result<Tensor<T>> {
    let (b, l) = expect_3d(x, layer.d(), "flora_forward_batched")?;
    if ads.len() != b {
        return Err(Error::Arity(format!(
            "batch has {b} examples but {} adapters",
            ads.len()
        )));
    }
    let r = common_rank(ads.iter().map(|a| a.rank()))?;
    let first_mode = ads[0].reduction;
    if ads.iter().any(|a| a.reduction != first_mode) {
        return Err(Error::Config(
            "adapters in one batch must share a reduction mode".into(),
        ));
    }
    let (d, k) = (layer.d(), layer.k());
    for ad in ads {
        if ad.d() != d || ad.k() != k {
            return Err(Error::Dimension(format!(
                "adapter {} targets {}×{}, layer is {d}×{k}",
                ad.id,
                ad.d(),
                ad.k()
            )));
        }
    }
    // (B ∘ X): one [b·l·r, d] left operand feeding a single shared matmul.
    let mut scaled = Vec::with_capacity(b * l * r * d);
    for (i, ad) in ads.iter().enumerate() {
        rank_scaled_input(
            &x.data()[i * l * d..(i + 1) * l * d],
            ad.b.data(),
            l,
            d,
            r,
            &mut scaled,
        );
    }
    let u = matmul(&Tensor::from_parts(vec![b * l * r, d], scaled), &layer.w0)?;
    let mut pre = Vec::with_capacity(b * l * k);
    for (i, ad) in ads.iter().enumerate() {
        let a_eff = ad.effective_a();
        pre.extend(scale_and_fold(
            &u.data()[i * l * r * k..(i + 1) * l * r * k],
            a_eff.data(),
            l,
            r,
            k,
        ));
    }
    layer.finish(Tensor::from_parts(vec![b, l, k], pre))
}

/// Activation-rescaling forward pass, one adapter per example:
/// `φ(scale ∘ (X·W0) + bias)`.
///
/// The commuted form (scaling before `φ`) is the definition here; it agrees
/// with scaling after `φ` whenever `φ` is positively homogeneous.
pub fn ia3_forward<T: Scalar>(
    x: &Tensor<T>,
    layer: &AdaptedLinear<T>,
    ads: &[Ia3Adapter<T>],
) -> Result<Tensor<T>> {
    let (b, l) = expect_3d(x, layer.d(), "ia3_forward")?;
    if ads.len() != b {
        return Err(Error::Arity(format!(
            "batch has {b} examples but {} adapters",
            ads.len()
        )));
    }
    let (d, k) = (layer.d(), layer.k());
    for ad in ads {
        if ad.k() != k {
            return Err(Error::Dimension(format!(
                "adapter {} scale has length {}, layer output width is {k}",
                ad.id,
                ad.k()
            )));
        }
    }
    let flat = x.reshape(vec![b * l, d])?;
    let base = matmul(&flat, &layer.w0)?;
    let mut pre = Vec::with_capacity(b * l * k);
    for (i, ad) in ads.iter().enumerate() {
        let scale = ad.scale.data();
        for row in base.data()[i * l * k..(i + 1) * l * k].chunks_exact(k) {
            for (&s, &v) in scale.iter().zip(row) {
                pre.push(s * v);
            }
        }
    }
    layer.finish(Tensor::from_parts(vec![b, l, k], pre))
}

/// Full per-example adapted weight: `W0 + B·A` for lora, `W0 ∘ (B·A)` for
/// flora. This is the oracle route the fast paths are checked against.
pub fn materialize_weight<T: Scalar>(
    layer: &AdaptedLinear<T>,
    record: &AdapterRecord<T>,
) -> Result<Tensor<T>> {
    let (d, k) = (layer.d(), layer.k());
    match record {
        AdapterRecord::Lora(ad) => {
            if ad.d() != d || ad.k() != k {
                return Err(Error::Dimension(format!(
                    "adapter targets {}×{}, layer is {d}×{k}",
                    ad.d(),
                    ad.k()
                )));
            }
            let delta = matmul(&ad.b, &ad.a)?;
            ewise_add(&layer.w0, &delta)
        }
        AdapterRecord::Flora(ad) => {
            if ad.d() != d || ad.k() != k {
                return Err(Error::Dimension(format!(
                    "adapter targets {}×{}, layer is {d}×{k}",
                    ad.d(),
                    ad.k()
                )));
            }
            let delta = matmul(&ad.b, &ad.effective_a())?;
            crate::numkit::ewise_mul(&layer.w0, &delta)
        }
        AdapterRecord::Ia3(_) => Err(Error::Unsupported(
            "ia3 has no low-rank materialization; use materialize_ia3 (column scaling)".into(),
        )),
    }
}

/// Column-scaled weight for ia3: column `c` of `W0` times `scale[c]`.
pub fn materialize_ia3<T: Scalar>(
    layer: &AdaptedLinear<T>,
    ad: &Ia3Adapter<T>,
) -> Result<Tensor<T>> {
    let (d, k) = (layer.d(), layer.k());
    if ad.k() != k {
        return Err(Error::Dimension(format!(
            "scale length {} does not match output width {k}",
            ad.k()
        )));
    }
    let mut data = Vec::with_capacity(d * k);
    for row in 0..d {
        for (c, &s) in ad.scale.data().iter().enumerate() {
            data.push(layer.w0.data()[row * k + c] * s);
        }
    }
    Ok(Tensor::from_parts(vec![d, k], data))
}

/// How [`init_adapter`] fills the factors.
#[derive(Copy, Clone, Debug, PartialEq)]
pub enum InitStrategy {
    /// Output-preserving start: lora gets `B = 0` with a small gaussian `A`,
    /// flora gets `B = ones`, `A = ones/r` (so `B·A = ones` under sum
    /// folding), ia3 gets `scale = ones`.
    NoOp,
    /// Gaussian factors for randomized tests.
    Random { std: f64 },
}

/// Std of the gaussian output factor in a no-op lora init.
const LORA_INIT_STD: f64 = 0.02;

/// Builds a freshly initialized adapter. A `NoOp` init of any kind leaves the
/// target layer's output unchanged.
pub fn init_adapter<T: Scalar>(
    kind: AdapterKind,
    d: usize,
    k: usize,
    r: usize,
    seed: u64,
    strategy: InitStrategy,
) -> Result<AdapterRecord<T>> {
    if d == 0 || k == 0 {
        return Err(Error::Dimension(format!(
            "adapter dims must be positive, got d={d}, k={k}"
        )));
    }
    if kind != AdapterKind::Ia3 && r == 0 {
        return Err(Error::Dimension("adapter rank must be at least 1".into()));
    }
    let mut rng = SeedRng::new(seed);
    let record = match (kind, strategy) {
        (AdapterKind::Lora, InitStrategy::NoOp) => AdapterRecord::Lora(LoraAdapter::new(
            seed,
            Tensor::zeros(vec![d, r]),
            rng.tensor_normal(vec![r, k], 0.0, LORA_INIT_STD),
        )?),
        (AdapterKind::Lora, InitStrategy::Random { std }) => AdapterRecord::Lora(LoraAdapter::new(
            seed,
            rng.tensor_normal(vec![d, r], 0.0, std),
            rng.tensor_normal(vec![r, k], 0.0, std),
        )?),
        (AdapterKind::Flora, InitStrategy::NoOp) => AdapterRecord::Flora(FloraAdapter::new(
            seed,
            Tensor::ones(vec![d, r]),
            Tensor::full(vec![r, k], T::from_f64(1.0 / r as f64)),
            Reduction::Sum,
        )?),
        (AdapterKind::Flora, InitStrategy::Random { std }) => {
            AdapterRecord::Flora(FloraAdapter::new(
                seed,
                rng.tensor_normal(vec![d, r], 1.0, std),
                rng.tensor_normal(vec![r, k], 1.0 / r as f64, std),
                Reduction::Sum,
            )?)
        }
        (AdapterKind::Ia3, InitStrategy::NoOp) => {
            AdapterRecord::Ia3(Ia3Adapter::new(seed, Tensor::ones(vec![k]))?)
        }
        (AdapterKind::Ia3, InitStrategy::Random { std }) => {
            AdapterRecord::Ia3(Ia3Adapter::new(seed, rng.tensor_normal(vec![k], 1.0, std))?)
        }
    };
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::ewise_mul;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    fn plain_layer(w0: Tensor<f64>) -> AdaptedLinear<f64> {
        AdaptedLinear::new(w0, None, Activation::Identity).unwrap()
    }

    fn random_layer(rng: &mut SeedRng, d: usize, k: usize, act: Activation) -> AdaptedLinear<f64> {
        let w0 = rng.tensor_normal(vec![d, k], 0.0, 1.0);
        let bias = Some(rng.tensor_normal(vec![k], 0.0, 0.5));
        AdaptedLinear::new(w0, bias, act).unwrap()
    }

    /// Per-example oracle: slice i through the fully materialized weight.
    fn oracle_forward(
        x: &Tensor<f64>,
        layer: &AdaptedLinear<f64>,
        weights: &[Tensor<f64>],
    ) -> Tensor<f64> {
        let (b, l, _d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = layer.k();
        let mut out = Vec::with_capacity(b * l * k);
        for (i, w) in weights.iter().enumerate() {
            let xi = x.slice0(i).unwrap();
            let mut pre = matmul(&xi, w).unwrap();
            if let Some(bias) = &layer.bias {
                pre = ewise_add(&pre, bias).unwrap();
            }
            out.extend_from_slice(layer.activation.apply(&pre).data());
        }
        Tensor::from_parts(vec![b, l, k], out)
    }

    #[test]
    fn lora_zero_b_leaves_base_output() {
        let mut rng = SeedRng::new(1);
        let layer = random_layer(&mut rng, 4, 3, Activation::Relu);
        let x = rng.tensor_normal(vec![2, 5, 4], 0.0, 1.0);
        let ad = LoraAdapter::new(
            0,
            Tensor::zeros(vec![4, 2]),
            rng.tensor_normal(vec![2, 3], 0.0, 1.0),
        )
        .unwrap();
        let out = lora_forward_shared(&x, &layer, &ad).unwrap();
        let base = oracle_forward(&x, &layer, &vec![layer.w0.clone(); 2]);
        assert!(out.bitwise_eq(&base));
    }

    #[test]
    fn lora_hand_case() {
        // W0=[[1,2],[3,4]], B=[1,2]^T, A=[3,1], x=[1,1]:
        // BA=[[3,1],[6,2]], W0+BA=[[4,3],[9,6]], x·(W0+BA)=[13,9]
        let layer = plain_layer(t64(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let ad = LoraAdapter::new(0, t64(vec![2, 1], vec![1.0, 2.0]), t64(vec![1, 2], vec![3.0, 1.0]))
            .unwrap();
        let x = t64(vec![1, 1, 2], vec![1.0, 1.0]);
        let out = lora_forward_shared(&x, &layer, &ad).unwrap();
        assert_eq!(out.data(), &[13.0, 9.0]);

        let w = materialize_weight(&layer, &AdapterRecord::Lora(ad)).unwrap();
        assert_eq!(w.data(), &[4.0, 3.0, 9.0, 6.0]);
    }

    #[test]
    fn lora_matches_materialized_weight_over_ranks() {
        let mut rng = SeedRng::new(2);
        for r in [1usize, 2, 4] {
            let layer = random_layer(&mut rng, 6, 5, Activation::Gelu);
            let x = rng.tensor_normal(vec![3, 4, 6], 0.0, 1.0);
            let ad = LoraAdapter::new(
                7,
                rng.tensor_normal(vec![6, r], 0.0, 0.3),
                rng.tensor_normal(vec![r, 5], 0.0, 0.3),
            )
            .unwrap();
            let fast = lora_forward_shared(&x, &layer, &ad).unwrap();
            let w = materialize_weight(&layer, &AdapterRecord::Lora(ad)).unwrap();
            let want = oracle_forward(&x, &layer, &vec![w; 3]);
            assert!(fast.max_rel_err(&want) < 1e-9, "rank {r}");
        }
    }

    #[test]
    fn bmm_lora_identical_adapters_match_shared_path_exactly() {
        let mut rng = SeedRng::new(3);
        let layer = random_layer(&mut rng, 5, 5, Activation::Relu);
        let x = rng.tensor_normal(vec![3, 2, 5], 0.0, 1.0);
        let ad = LoraAdapter::new(
            1,
            rng.tensor_normal(vec![5, 2], 0.0, 0.5),
            rng.tensor_normal(vec![2, 5], 0.0, 0.5),
        )
        .unwrap();
        let batched = bmm_lora_forward(&x, &layer, &vec![ad.clone(); 3]).unwrap();
        let shared = lora_forward_shared(&x, &layer, &ad).unwrap();
        assert!(batched.bitwise_eq(&shared));
    }

    #[test]
    fn bmm_lora_distinct_adapters_match_per_example_oracle() {
        let mut rng = SeedRng::new(4);
        let layer = random_layer(&mut rng, 4, 4, Activation::Identity);
        let x = rng.tensor_normal(vec![2, 3, 4], 0.0, 1.0);
        let ads: Vec<_> = (0..2)
            .map(|i| {
                LoraAdapter::new(
                    i,
                    rng.tensor_normal(vec![4, 1], 0.0, 0.5),
                    rng.tensor_normal(vec![1, 4], 0.0, 0.5),
                )
                .unwrap()
            })
            .collect();
        let fast = bmm_lora_forward(&x, &layer, &ads).unwrap();
        let weights: Vec<_> = ads
            .iter()
            .map(|ad| materialize_weight(&layer, &AdapterRecord::Lora(ad.clone())).unwrap())
            .collect();
        let want = oracle_forward(&x, &layer, &weights);
        assert!(fast.max_rel_err(&want) < 1e-9);
    }

    #[test]
    fn bmm_lora_slice_equals_shared_on_single_example() {
        let mut rng = SeedRng::new(14);
        let layer = random_layer(&mut rng, 4, 3, Activation::Gelu);
        let x = rng.tensor_normal(vec![3, 2, 4], 0.0, 1.0);
        let ads: Vec<_> = (0..3)
            .map(|i| {
                LoraAdapter::new(
                    i,
                    rng.tensor_normal(vec![4, 2], 0.0, 0.5),
                    rng.tensor_normal(vec![2, 3], 0.0, 0.5),
                )
                .unwrap()
            })
            .collect();
        let fast = bmm_lora_forward(&x, &layer, &ads).unwrap();
        for i in 0..3 {
            let xi = x.slice0(i).unwrap().reshape(vec![1, 2, 4]).unwrap();
            let solo = lora_forward_shared(&xi, &layer, &ads[i]).unwrap();
            assert!(fast.slice0(i).unwrap().bitwise_eq(&solo.slice0(0).unwrap()));
        }
    }

    #[test]
    fn bmm_lora_rank_mismatch_and_arity_errors() {
        let mut rng = SeedRng::new(5);
        let layer = plain_layer(rng.tensor_normal(vec![3, 3], 0.0, 1.0));
        let x = rng.tensor_normal(vec![2, 2, 3], 0.0, 1.0);
        let r1 = LoraAdapter::new(
            0,
            rng.tensor_normal(vec![3, 1], 0.0, 1.0),
            rng.tensor_normal(vec![1, 3], 0.0, 1.0),
        )
        .unwrap();
        let r2 = LoraAdapter::new(
            1,
            rng.tensor_normal(vec![3, 2], 0.0, 1.0),
            rng.tensor_normal(vec![2, 3], 0.0, 1.0),
        )
        .unwrap();
        assert!(matches!(
            bmm_lora_forward(&x, &layer, &[r1.clone(), r2]),
            Err(Error::HeterogeneousRank(_))
        ));
        assert!(matches!(
            bmm_lora_forward(&x, &layer, &[r1]),
            Err(Error::Arity(_))
        ));
    }

    #[test]
    fn flora_ones_adapter_is_multiplicative_identity() {
        let mut rng = SeedRng::new(6);
        let layer = random_layer(&mut rng, 5, 4, Activation::Relu);
        let x = rng.tensor_normal(vec![3, 5], 0.0, 1.0);
        let ad = FloraAdapter::new(
            0,
            Tensor::ones(vec![5, 1]),
            Tensor::ones(vec![1, 4]),
            Reduction::Sum,
        )
        .unwrap();
        let out = flora_forward(&x, &layer, &ad).unwrap();
        let base = {
            let mut pre = matmul(&x, &layer.w0).unwrap();
            pre = ewise_add(&pre, layer.bias.as_ref().unwrap()).unwrap();
            layer.activation.apply(&pre)
        };
        assert!(out.max_rel_err(&base) < 1e-12);
    }

    #[test]
    fn flora_hand_case() {
        // W0=[[1,2],[3,4]], B=[1,2]^T, A=[3,1], x=[1,1] → [21, 10] exactly.
        let layer = plain_layer(t64(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let ad = FloraAdapter::new(
            0,
            t64(vec![2, 1], vec![1.0, 2.0]),
            t64(vec![1, 2], vec![3.0, 1.0]),
            Reduction::Sum,
        )
        .unwrap();
        let x = t64(vec![1, 2], vec![1.0, 1.0]);
        let out = flora_forward(&x, &layer, &ad).unwrap();
        assert_eq!(out.data(), &[21.0, 10.0]);

        // materialized weight for the same case
        let w = materialize_weight(&layer, &AdapterRecord::Flora(ad)).unwrap();
        assert_eq!(w.data(), &[3.0, 2.0, 18.0, 8.0]);
    }

    #[test]
    fn flora_rank4_matches_materialized_weight() {
        let mut rng = SeedRng::new(7);
        let layer = random_layer(&mut rng, 8, 6, Activation::Identity);
        let x = rng.tensor_normal(vec![5, 8], 0.0, 1.0);
        let ad = FloraAdapter::new(
            0,
            rng.tensor_normal(vec![8, 4], 1.0, 0.3),
            rng.tensor_normal(vec![4, 6], 0.25, 0.2),
            Reduction::Sum,
        )
        .unwrap();
        let fast = flora_forward(&x, &layer, &ad).unwrap();
        let w = materialize_weight(&layer, &AdapterRecord::Flora(ad)).unwrap();
        let mut pre = matmul(&x, &w).unwrap();
        pre = ewise_add(&pre, layer.bias.as_ref().unwrap()).unwrap();
        let want = layer.activation.apply(&pre);
        assert!(fast.max_rel_err(&want) < 1e-10);
    }

    #[test]
    fn flora_batched_slices_equal_single_example_path() {
        let mut rng = SeedRng::new(8);
        let layer = random_layer(&mut rng, 6, 6, Activation::Gelu);
        let x = rng.tensor_normal(vec![3, 4, 6], 0.0, 1.0);
        let ads: Vec<_> = (0..3)
            .map(|i| {
                FloraAdapter::new(
                    i,
                    rng.tensor_normal(vec![6, 2], 1.0, 0.4),
                    rng.tensor_normal(vec![2, 6], 0.5, 0.4),
                    Reduction::Sum,
                )
                .unwrap()
            })
            .collect();
        let batched = flora_forward_batched(&x, &layer, &ads).unwrap();
        for i in 0..3 {
            let solo = flora_forward(&x.slice0(i).unwrap(), &layer, &ads[i]).unwrap();
            assert!(batched.slice0(i).unwrap().bitwise_eq(&solo));
        }
    }

    #[test]
    fn flora_batched_identity_adapters_give_base_output() {
        let mut rng = SeedRng::new(9);
        let layer = random_layer(&mut rng, 4, 4, Activation::Relu);
        let x = rng.tensor_normal(vec![2, 3, 4], 0.0, 1.0);
        let ads: Vec<_> = (0..2)
            .map(|i| {
                FloraAdapter::new(
                    i,
                    Tensor::ones(vec![4, 1]),
                    Tensor::ones(vec![1, 4]),
                    Reduction::Sum,
                )
                .unwrap()
            })
            .collect();
        let out = flora_forward_batched(&x, &layer, &ads).unwrap();
        let base = oracle_forward(&x, &layer, &vec![layer.w0.clone(); 2]);
        assert!(out.max_rel_err(&base) < 1e-12);
    }

    #[test]
    fn flora_batched_rank2_matches_materialized_oracle() {
        let mut rng = SeedRng::new(10);
        let layer = random_layer(&mut rng, 5, 7, Activation::Identity);
        let x = rng.tensor_normal(vec![2, 3, 5], 0.0, 1.0);
        let ads: Vec<_> = (0..2)
            .map(|i| {
                FloraAdapter::new(
                    i,
                    rng.tensor_normal(vec![5, 2], 1.0, 0.3),
                    rng.tensor_normal(vec![2, 7], 0.5, 0.3),
                    Reduction::Sum,
                )
                .unwrap()
            })
            .collect();
        let fast = flora_forward_batched(&x, &layer, &ads).unwrap();
        let weights: Vec<_> = ads
            .iter()
            .map(|ad| materialize_weight(&layer, &AdapterRecord::Flora(ad.clone())).unwrap())
            .collect();
        let want = oracle_forward(&x, &layer, &weights);
        assert!(fast.max_rel_err(&want) < 1e-9);
    }

    #[test]
    fn flora_mean_mode_equals_sum_with_rescaled_a() {
        let mut rng = SeedRng::new(11);
        let layer = random_layer(&mut rng, 6, 4, Activation::Gelu);
        let x = rng.tensor_normal(vec![3, 6], 0.0, 1.0);
        let b = rng.tensor_normal(vec![6, 4], 1.0, 0.3);
        let a = rng.tensor_normal(vec![4, 4], 0.5, 0.3);
        let mean_ad = FloraAdapter::new(0, b.clone(), a.clone(), Reduction::Mean).unwrap();
        let sum_ad = FloraAdapter::new(0, b, a.scale(0.25), Reduction::Sum).unwrap();
        let mean_out = flora_forward(&x, &layer, &mean_ad).unwrap();
        let sum_out = flora_forward(&x, &layer, &sum_ad).unwrap();
        assert!(mean_out.bitwise_eq(&sum_out));
    }

    #[test]
    fn ia3_ones_scale_gives_base_output_and_homogeneity_doubles_relu() {
        let mut rng = SeedRng::new(12);
        let layer = AdaptedLinear::new(
            rng.tensor_normal(vec![4, 3], 0.0, 1.0),
            None,
            Activation::Relu,
        )
        .unwrap();
        let x = rng.tensor_normal(vec![2, 3, 4], 0.0, 1.0);
        let ones: Vec<_> = (0..2)
            .map(|i| Ia3Adapter::new(i, Tensor::ones(vec![3])).unwrap())
            .collect();
        let base = ia3_forward(&x, &layer, &ones).unwrap();
        let want = oracle_forward(&x, &layer, &vec![layer.w0.clone(); 2]);
        assert!(base.bitwise_eq(&want));

        let twos: Vec<_> = (0..2)
            .map(|i| Ia3Adapter::new(i, Tensor::full(vec![3], 2.0)).unwrap())
            .collect();
        let doubled = ia3_forward(&x, &layer, &twos).unwrap();
        let expect = base.scale(2.0);
        assert!(doubled.max_rel_err(&expect) < 1e-15);
    }

    #[test]
    fn ia3_equals_flora_with_ones_b_bitwise() {
        let mut rng = SeedRng::new(13);
        for act in [Activation::Identity, Activation::Relu] {
            let layer = AdaptedLinear::new(
                rng.tensor_normal(vec![5, 4], 0.0, 1.0),
                Some(rng.tensor_normal(vec![4], 0.0, 0.2)),
                act,
            )
            .unwrap();
            let x = rng.tensor_normal(vec![3, 2, 5], 0.0, 1.0);
            let scales: Vec<Tensor<f64>> =
                (0..3).map(|_| rng.tensor_normal(vec![4], 1.0, 0.5)).collect();
            let ia3: Vec<_> = scales
                .iter()
                .enumerate()
                .map(|(i, s)| Ia3Adapter::new(i as u64, s.clone()).unwrap())
                .collect();
            let flora: Vec<_> = scales
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    FloraAdapter::new(
                        i as u64,
                        Tensor::ones(vec![5, 1]),
                        s.reshape(vec![1, 4]).unwrap(),
                        Reduction::Sum,
                    )
                    .unwrap()
                })
                .collect();
            let via_ia3 = ia3_forward(&x, &layer, &ia3).unwrap();
            let via_flora = flora_forward_batched(&x, &layer, &flora).unwrap();
            assert!(via_ia3.bitwise_eq(&via_flora), "activation {act:?}");
        }
    }

    #[test]
    fn ia3_scale_length_error() {
        let mut rng = SeedRng::new(15);
        let layer = plain_layer(rng.tensor_normal(vec![3, 3], 0.0, 1.0));
        let x = rng.tensor_normal(vec![1, 2, 3], 0.0, 1.0);
        let bad = Ia3Adapter::new(0, Tensor::ones(vec![4])).unwrap();
        assert!(matches!(
            ia3_forward(&x, &layer, &[bad]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn rank1_flora_realizes_any_multiplicative_rank1_target() {
        // constructive expressive-power parity at r=1
        let mut rng = SeedRng::new(16);
        let d = 6;
        let k = 5;
        let w0 = Tensor::from_fn(vec![d, k], |_| {
            let mag = rng.uniform(0.5, 1.5);
            let sign = if rng.uniform(0.0, 1.0) < 0.5 { -1.0 } else { 1.0 };
            mag * sign
        });
        let layer = plain_layer(w0.clone());
        let b_target = rng.tensor_normal(vec![d, 1], 1.0, 0.4);
        let a_target = rng.tensor_normal(vec![1, k], 1.0, 0.4);
        let target_w = ewise_mul(&w0, &matmul(&b_target, &a_target).unwrap()).unwrap();
        let ad = FloraAdapter::new(0, b_target, a_target, Reduction::Sum).unwrap();
        let x = rng.tensor_normal(vec![4, d], 0.0, 1.0);
        let got = flora_forward(&x, &layer, &ad).unwrap();
        let want = matmul(&x, &target_w).unwrap();
        assert!(got.max_rel_err(&want) < 1e-10);
    }

    #[test]
    fn materialize_trivial_cases() {
        let mut rng = SeedRng::new(17);
        let layer = plain_layer(rng.tensor_normal(vec![4, 4], 0.0, 1.0));
        let flora_ones = FloraAdapter::new(
            0,
            Tensor::ones(vec![4, 2]),
            Tensor::full(vec![2, 4], 0.5),
            Reduction::Sum,
        )
        .unwrap();
        let w = materialize_weight(&layer, &AdapterRecord::Flora(flora_ones)).unwrap();
        assert!(w.max_rel_err(&layer.w0) < 1e-15);

        let lora_zero = LoraAdapter::new(
            0,
            Tensor::zeros(vec![4, 2]),
            rng.tensor_normal(vec![2, 4], 0.0, 1.0),
        )
        .unwrap();
        let w = materialize_weight(&layer, &AdapterRecord::Lora(lora_zero)).unwrap();
        assert!(w.bitwise_eq(&layer.w0));

        let ia3 = Ia3Adapter::new(0, Tensor::ones(vec![4])).unwrap();
        assert!(matches!(
            materialize_weight(&layer, &AdapterRecord::Ia3(ia3.clone())),
            Err(Error::Unsupported(_))
        ));
        let w = materialize_ia3(&layer, &ia3).unwrap();
        assert!(w.bitwise_eq(&layer.w0));
    }

    #[test]
    fn init_adapter_is_noop_and_deterministic() {
        let mut rng = SeedRng::new(18);
        let layer = random_layer(&mut rng, 6, 6, Activation::Gelu);
        let x = rng.tensor_normal(vec![2, 3, 6], 0.0, 1.0);
        let base = oracle_forward(&x, &layer, &vec![layer.w0.clone(); 2]);

        for kind in [AdapterKind::Lora, AdapterKind::Flora, AdapterKind::Ia3] {
            let rec = init_adapter::<f64>(kind, 6, 6, 4, 99, InitStrategy::NoOp).unwrap();
            let out = match &rec {
                AdapterRecord::Lora(ad) => bmm_lora_forward(&x, &layer, &vec![ad.clone(); 2]),
                AdapterRecord::Flora(ad) => {
                    flora_forward_batched(&x, &layer, &vec![ad.clone(); 2])
                }
                AdapterRecord::Ia3(ad) => ia3_forward(&x, &layer, &vec![ad.clone(); 2]),
            }
            .unwrap();
            assert!(out.max_rel_err(&base) < 1e-12, "kind {kind:?}");

            let again = init_adapter::<f64>(kind, 6, 6, 4, 99, InitStrategy::NoOp).unwrap();
            assert_eq!(rec, again);
        }

        // flora r=4 init: B·A == ones exactly (0.25 sums four times to 1.0)
        let rec = init_adapter::<f64>(AdapterKind::Flora, 3, 3, 4, 0, InitStrategy::NoOp).unwrap();
        if let AdapterRecord::Flora(ad) = rec {
            let prod = matmul(&ad.b, &ad.a).unwrap();
            assert!(prod.bitwise_eq(&Tensor::ones(vec![3, 3])));
        } else {
            panic!("expected flora record");
        }

        assert!(init_adapter::<f64>(AdapterKind::Lora, 0, 3, 1, 0, InitStrategy::NoOp).is_err());
        assert!(init_adapter::<f64>(AdapterKind::Lora, 3, 3, 0, 0, InitStrategy::NoOp).is_err());
    }
}
