//! Toy pre-norm transformer block with adapter slots on its linear
//! projections.
//!
//! The block exists to exercise adapters in their usual positions (query/key
//! projections by default, optionally every fully-connected layer) against a
//! materialized-weight oracle, and to expose an analytic FLOP count per
//! strategy. It is one block, not a language model: weights come from a seed,
//! there is no dropout and no KV cache.

use std::collections::{BTreeMap, BTreeSet};

use crate::adapters::{
    bmm_lora_forward, flora_forward_batched, ia3_forward, materialize_ia3, materialize_weight,
    AdaptedLinear, AdapterRecord,
};
use crate::error::{Error, Result};
use crate::numkit::{matmul, Activation, Scalar, SeedRng, Tensor};

/// A linear layer that can host an adapter.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Placement {
    Query,
    Key,
    Value,
    Output,
    FfIn,
    FfOut,
}

impl Placement {
    pub const ALL: [Placement; 6] = [
        Placement::Query,
        Placement::Key,
        Placement::Value,
        Placement::Output,
        Placement::FfIn,
        Placement::FfOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placement::Query => "query",
            Placement::Key => "key",
            Placement::Value => "value",
            Placement::Output => "output",
            Placement::FfIn => "ff_in",
            Placement::FfOut => "ff_out",
        }
    }
}

impl std::str::FromStr for Placement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" => Ok(Placement::Query),
            "key" => Ok(Placement::Key),
            "value" => Ok(Placement::Value),
            "output" => Ok(Placement::Output),
            "ff_in" => Ok(Placement::FfIn),
            "ff_out" => Ok(Placement::FfOut),
            other => Err(Error::Config(format!("unknown placement `{other}`"))),
        }
    }
}

/// Which forward path the adapted projections route through.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum BlockStrategy {
    /// Ignore bundles; plain base weights everywhere.
    None,
    Flora,
    BmmLora,
    Ia3,
}

/// Block shape plus the set of projections that host adapters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub placements: BTreeSet<Placement>,
}

impl BlockConfig {
    pub fn new(
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        placements: BTreeSet<Placement>,
    ) -> Result<Self> {
        if d_model == 0 || n_heads == 0 || d_ff == 0 {
            return Err(Error::Config(
                "d_model, n_heads and d_ff must be positive".into(),
            ));
        }
        if !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        Ok(Self {
            d_model,
            n_heads,
            d_ff,
            placements,
        })
    }

    /// Default placement: query and key projections.
    pub fn query_key(d_model: usize, n_heads: usize, d_ff: usize) -> Result<Self> {
        Self::new(
            d_model,
            n_heads,
            d_ff,
            [Placement::Query, Placement::Key].into_iter().collect(),
        )
    }

    /// Extended placement: every fully-connected layer in the block.
    pub fn all_linear(d_model: usize, n_heads: usize, d_ff: usize) -> Result<Self> {
        Self::new(d_model, n_heads, d_ff, Placement::ALL.into_iter().collect())
    }

    fn linear_dims(&self, p: Placement) -> (usize, usize) {
        match p {
            Placement::FfIn => (self.d_model, self.d_ff),
            Placement::FfOut => (self.d_ff, self.d_model),
            _ => (self.d_model, self.d_model),
        }
    }
}

/// One logical adapter spanning every adapted placement of a block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBundle<T> {
    pub id: u64,
    pub slots: BTreeMap<Placement, AdapterRecord<T>>,
}

impl<T: Scalar> AdapterBundle<T> {
    pub fn new(id: u64, slots: BTreeMap<Placement, AdapterRecord<T>>) -> Self {
        Self { id, slots }
    }

    pub fn record(&self, p: Placement) -> Result<&AdapterRecord<T>> {
        self.slots
            .get(&p)
            .ok_or_else(|| Error::Config(format!("bundle {} has no record for {}", self.id, p.name())))
    }
}

/// The block itself: six projections and two parameter-free layer norms.
#[derive(Clone, Debug)]
pub struct Block<T> {
    cfg: BlockConfig,
    layers: BTreeMap<Placement, AdaptedLinear<T>>,
}

const LN_EPS: f64 = 1e-5;

fn layer_norm<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let d = *s.last().expect("layer_norm input has axes");
    let rows = x.len() / d;
    let mut out = Vec::with_capacity(x.len());
    let inv_d = T::from_f64(1.0 / d as f64);
    let eps = T::from_f64(LN_EPS);
    for row in 0..rows {
        let slice = &x.data()[row * d..(row + 1) * d];
        let mut mean = T::ZERO;
        for &v in slice {
            mean += v;
        }
        mean = mean * inv_d;
        let mut var = T::ZERO;
        for &v in slice {
            let c = v - mean;
            var += c * c;
        }
        var = var * inv_d;
        let denom = T::from_f64((var + eps).to_f64().sqrt());
        for &v in slice {
            out.push((v - mean) / denom);
        }
    }
    Tensor::from_parts(s.to_vec(), out)
}

fn softmax_rows<T: Scalar>(x: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for &v in row.iter() {
            max = max.max(v);
        }
        let mut sum = T::ZERO;
        for v in row.iter_mut() {
            let e = T::from_f64((*v - max).to_f64().exp());
            *v = e;
            sum += e;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

impl<T: Scalar> Block<T> {
    /// Deterministic weights from a seed; projections carry no bias, the
    /// feed-forward inner layer applies gelu.
    pub fn new(cfg: BlockConfig, seed: u64) -> Self {
        let rng = SeedRng::new(seed);
        let mut layers = BTreeMap::new();
        for (label, p) in Placement::ALL.into_iter().enumerate() {
            let (d_in, d_out) = cfg.linear_dims(p);
            let mut stream = rng.derive(label as u64 + 1);
            let std = 1.0 / (d_in as f64).sqrt();
            let w0 = stream.tensor_normal(vec![d_in, d_out], 0.0, std);
            let act = if p == Placement::FfIn {
                Activation::Gelu
            } else {
                Activation::Identity
            };
            layers.insert(p, AdaptedLinear::new(w0, None, act).expect("valid layer"));
        }
        Self { cfg, layers }
    }

    pub fn config(&self) -> &BlockConfig {
        &self.cfg
    }

    pub fn layer(&self, p: Placement) -> &AdaptedLinear<T> {
        &self.layers[&p]
    }

    fn validate_bundles(
        &self,
        batch: usize,
        bundles: &[AdapterBundle<T>],
        strategy: BlockStrategy,
    ) -> Result<()> {
        if strategy == BlockStrategy::None {
            return Ok(());
        }
        if self.cfg.placements.is_empty() {
            return Err(Error::Config(
                "adapter strategy requested but the placement set is empty".into(),
            ));
        }
        if bundles.len() != batch {
            return Err(Error::Arity(format!(
                "batch has {batch} examples but {} bundles",
                bundles.len()
            )));
        }
        for bundle in bundles {
            for &p in &self.cfg.placements {
                let rec = bundle.record(p)?;
                let ok = matches!(
                    (strategy, rec),
                    (BlockStrategy::Flora, AdapterRecord::Flora(_))
                        | (BlockStrategy::BmmLora, AdapterRecord::Lora(_))
                        | (BlockStrategy::Ia3, AdapterRecord::Ia3(_))
                );
                if !ok {
                    return Err(Error::Config(format!(
                        "bundle {} carries a {} record at {} but the strategy is {strategy:?}",
                        bundle.id,
                        rec.kind().name(),
                        p.name()
                    )));
                }
            }
        }
        Ok(())
    }

    fn project(
        &self,
        p: Placement,
        x: &Tensor<T>,
        bundles: &[AdapterBundle<T>],
        strategy: BlockStrategy,
    ) -> Result<Tensor<T>> {
        let layer = &self.layers[&p];
        let adapted = self.cfg.placements.contains(&p) && strategy != BlockStrategy::None;
        if !adapted {
            let (b, l) = (x.shape()[0], x.shape()[1]);
            let flat = x.reshape(vec![b * l, layer.d()])?;
            let pre = matmul(&flat, &layer.w0)?;
            return layer
                .activation
                .apply(&pre)
                .reshape(vec![b, l, layer.k()]);
        }
        match strategy {
            BlockStrategy::Flora => {
                let ads = bundles
                    .iter()
                    .map(|bd| match bd.record(p)? {
                        AdapterRecord::Flora(ad) => Ok(ad.clone()),
                        _ => unreachable!("validated"),
                    })
                    .collect::<Result<Vec<_>>>()?;
                flora_forward_batched(x, layer, &ads)
            }
            BlockStrategy::BmmLora => {
                let ads = bundles
                    .iter()
                    .map(|bd| match bd.record(p)? {
                        AdapterRecord::Lora(ad) => Ok(ad.clone()),
                        _ => unreachable!("validated"),
                    })
                    .collect::<Result<Vec<_>>>()?;
                bmm_lora_forward(x, layer, &ads)
            }
            BlockStrategy::Ia3 => {
                let ads = bundles
                    .iter()
                    .map(|bd| match bd.record(p)? {
                        AdapterRecord::Ia3(ad) => Ok(ad.clone()),
                        _ => unreachable!("validated"),
                    })
                    .collect::<Result<Vec<_>>>()?;
                ia3_forward(x, layer, &ads)
            }
            BlockStrategy::None => unreachable!("handled above"),
        }
    }

    fn attention(&self, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Tensor<T> {
        let (b, l, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let inv_sqrt = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = vec![T::ZERO; b * l * d];
        let gather = |src: &Tensor<T>, ex: usize, head: usize| -> Vec<T> {
            let mut m = Vec::with_capacity(l * dh);
            for t in 0..l {
                let base = (ex * l + t) * d + head * dh;
                m.extend_from_slice(&src.data()[base..base + dh]);
            }
            m
        };
        for ex in 0..b {
            for head in 0..heads {
                let qh = gather(q, ex, head);
                let kh = gather(k, ex, head);
                let vh = gather(v, ex, head);
                // scores[t, s] = q[t]·k[s] / sqrt(dh)
                let mut scores = vec![T::ZERO; l * l];
                for t in 0..l {
                    for s in 0..l {
                        let mut acc = T::ZERO;
                        for c in 0..dh {
                            acc += qh[t * dh + c] * kh[s * dh + c];
                        }
                        scores[t * l + s] = acc * inv_sqrt;
                    }
                }
                softmax_rows(&mut scores, l, l);
                for t in 0..l {
                    for c in 0..dh {
                        let mut acc = T::ZERO;
                        for s in 0..l {
                            acc += scores[t * l + s] * vh[s * dh + c];
                        }
                        out[(ex * l + t) * d + head * dh + c] = acc;
                    }
                }
            }
        }
        Tensor::from_parts(vec![b, l, d], out)
    }

    /// Pre-norm attention + feed-forward, with adapted projections routed
    /// through the chosen strategy.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        bundles: &[AdapterBundle<T>],
        strategy: BlockStrategy,
    ) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.cfg.d_model {
            return Err(Error::Dimension(format!(
                "block expects input [b, l, {}], got {s:?}",
                self.cfg.d_model
            )));
        }
        self.validate_bundles(s[0], bundles, strategy)?;

        let normed = layer_norm(x);
        let q = self.project(Placement::Query, &normed, bundles, strategy)?;
        let k = self.project(Placement::Key, &normed, bundles, strategy)?;
        let v = self.project(Placement::Value, &normed, bundles, strategy)?;
        let attn = self.attention(&q, &k, &v);
        let attn_out = self.project(Placement::Output, &attn, bundles, strategy)?;
        let mid = crate::numkit::ewise_add(x, &attn_out)?;

        let normed2 = layer_norm(&mid);
        let hidden = self.project(Placement::FfIn, &normed2, bundles, strategy)?;
        let ff = self.project(Placement::FfOut, &hidden, bundles, strategy)?;
        crate::numkit::ewise_add(&mid, &ff)
    }

    /// Oracle route: a copy of this block whose adapted placements carry the
    /// bundle's fully materialized weights, to be run with
    /// `BlockStrategy::None` on the bundle's example alone.
    pub fn materialized(&self, bundle: &AdapterBundle<T>) -> Result<Block<T>> {
        let mut layers = self.layers.clone();
        for &p in &self.cfg.placements {
            let layer = &self.layers[&p];
            let record = bundle.record(p)?;
            let w = match record {
                AdapterRecord::Ia3(ad) => materialize_ia3(layer, ad)?,
                other => materialize_weight(layer, other)?,
            };
            let merged = AdaptedLinear::new(w, layer.bias.clone(), layer.activation)?;
            layers.insert(p, merged);
        }
        Ok(Block {
            cfg: self.cfg.clone(),
            layers,
        })
    }
}

/// Analytic FLOP breakdown of one block forward over `[b, l, d_model]`.
///
/// Linear layers count `2·tokens·d_in·d_out` each; an adapted placement is
/// priced per strategy consistently with the serving cost model
/// (multiplicative adapters replace the base product with an r-fold one,
/// additive adapters add two skinny batched products, rescaling adds one
/// multiply per output element). The softmax-attention score/value products
/// are strategy-independent.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct FlopCount {
    /// Projections hosting adapters, priced per strategy.
    pub adapted_linear: u64,
    /// Remaining linear layers at base cost.
    pub base_linear: u64,
    /// Score and value products of self-attention (never adapted).
    pub attention: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.adapted_linear + self.base_linear + self.attention
    }
}

/// FLOPs for one forward pass of the block under the given strategy.
pub fn count_flops(
    cfg: &BlockConfig,
    b: u64,
    l: u64,
    r: u64,
    strategy: BlockStrategy,
) -> FlopCount {
    let tokens = b * l;
    let mut adapted = 0u64;
    let mut base = 0u64;
    for p in Placement::ALL {
        let (d_in, d_out) = cfg.linear_dims(p);
        let (d_in, d_out) = (d_in as u64, d_out as u64);
        let plain = 2 * tokens * d_in * d_out;
        if cfg.placements.contains(&p) && strategy != BlockStrategy::None {
            adapted += match strategy {
                BlockStrategy::Flora => 2 * tokens * r * d_in * d_out,
                BlockStrategy::BmmLora => plain + 2 * tokens * d_in * r + 2 * tokens * r * d_out,
                BlockStrategy::Ia3 => plain + tokens * d_out,
                BlockStrategy::None => unreachable!(),
            };
        } else {
            base += plain;
        }
    }
    let d = cfg.d_model as u64;
    let attention = 4 * b * l * l * d;
    FlopCount {
        adapted_linear: adapted,
        base_linear: base,
        attention,
    }
}
