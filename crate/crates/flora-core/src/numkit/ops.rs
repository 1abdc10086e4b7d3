//! Dense kernels: matmul, batched matmul, broadcast element-wise multiply,
//! axis reduction and activations.
//!
//! Every kernel accumulates in a fixed left-to-right order, so identical
//! inputs give bitwise-identical outputs on one machine.

use crate::error::{Error, Result};
use crate::numkit::tensor::{Scalar, Tensor};

/// Reduction mode for [`reduce`] and for rank->1 folding in flora adapters.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Reduction {
    Sum,
    Mean,
}

impl Reduction {
    pub fn code(self) -> u8 {
        match self {
            Reduction::Sum => 0,
            Reduction::Mean => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Reduction::Sum),
            1 => Some(Reduction::Mean),
            _ => None,
        }
    }
}

/// Elementwise nonlinearity applied after a linear layer.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
    /// tanh-form gelu: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    Gelu,
}

const GELU_COEF: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

impl Activation {
    pub fn eval<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => {
                if x > T::ZERO {
                    x
                } else {
                    T::ZERO
                }
            }
            Activation::Gelu => {
                let half = T::from_f64(0.5);
                let c = T::from_f64(SQRT_2_OVER_PI);
                let k = T::from_f64(GELU_COEF);
                let inner = c * (x + k * x * x * x);
                half * x * (T::ONE + inner.tanh())
            }
        }
    }

    /// Pointwise derivative; relu uses the 0-at-0 subgradient convention.
    pub fn deriv<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => T::ONE,
            Activation::Relu => {
                if x > T::ZERO {
                    T::ONE
                } else {
                    T::ZERO
                }
            }
            Activation::Gelu => {
                let half = T::from_f64(0.5);
                let c = T::from_f64(SQRT_2_OVER_PI);
                let k = T::from_f64(GELU_COEF);
                let three = T::from_f64(3.0);
                let inner = c * (x + k * x * x * x);
                let t = inner.tanh();
                let sech2 = T::ONE - t * t;
                half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * k * x * x)
            }
        }
    }

    pub fn apply<T: Scalar>(self, t: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Identity => t.clone(),
            _ => t.map(|x| self.eval(x)),
        }
    }
}

/// `out[i][j] += sum_k a[i][k]·b[k][j]`, k ascending. Shared by matmul and bmm
/// so batched slices match the plain product bit for bit.
fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * p..(i + 1) * p];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * p..(k + 1) * p];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
}

/// Standard matrix product of an `m×n` by an `n×p` matrix.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 {
        return Err(Error::Dimension(format!(
            "matmul expects matrices, got {sa:?} and {sb:?}"
        )));
    }
    let (m, n, p) = (sa[0], sa[1], sb[1]);
    if sb[0] != n {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions disagree: {sa:?} × {sb:?}"
        )));
    }
    let mut out = vec![T::ZERO; m * p];
    matmul_into(a.data(), b.data(), &mut out, m, n, p);
    Ok(Tensor::from_parts(vec![m, p], out))
}

/// Batched matrix product: slice `i` of the output equals
/// `matmul(a[i], b[i])`.
pub fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 {
        return Err(Error::Dimension(format!(
            "bmm expects rank-3 tensors, got {sa:?} and {sb:?}"
        )));
    }
    if sa[0] != sb[0] {
        return Err(Error::Dimension(format!(
            "bmm batch dimensions disagree: {} vs {}",
            sa[0], sb[0]
        )));
    }
    if sa[2] != sb[1] {
        return Err(Error::Dimension(format!(
            "bmm inner dimensions disagree: {sa:?} × {sb:?}"
        )));
    }
    let (batch, m, n, p) = (sa[0], sa[1], sa[2], sb[2]);
    let mut out = vec![T::ZERO; batch * m * p];
    for i in 0..batch {
        matmul_into(
            &a.data()[i * m * n..(i + 1) * m * n],
            &b.data()[i * n * p..(i + 1) * n * p],
            &mut out[i * m * p..(i + 1) * m * p],
            m,
            n,
            p,
        );
    }
    Ok(Tensor::from_parts(vec![batch, m, p], out))
}

/// Broadcast plan: output shape plus per-operand element strides
/// (stride 0 on repeated axes).
struct BroadcastPlan {
    shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

/// Strides that repeat `small` over the fixed output shape `big`, with
/// `small` padded by 1s on the chosen side. The broadcast is one-sided: every
/// padded axis of `small` must equal the output axis or be 1, so the output
/// shape is always exactly `big`.
fn one_sided(small: &[usize], big: &[usize], pad_front: bool) -> Option<Vec<usize>> {
    if small.len() > big.len() {
        return None;
    }
    let rank = big.len();
    let mut padded = vec![1usize; rank];
    let off = if pad_front { rank - small.len() } else { 0 };
    padded[off..off + small.len()].copy_from_slice(small);
    for (&ds, &db) in padded.iter().zip(big) {
        if ds != db && ds != 1 {
            return None;
        }
    }
    let native = row_major_strides(&padded);
    Some(
        padded
            .iter()
            .zip(native)
            .zip(big)
            .map(|((&d, s), &out)| if d == 1 && out != 1 { 0 } else { s })
            .collect(),
    )
}

/// Plans the restricted broadcast the adapter math needs: one operand repeats
/// along size-1 or missing axes to fill the other operand's shape. Trailing
/// alignment (missing leading axes, so a `[k]` vector scales every row of a
/// `[b×l×k]` activation) is tried first, then leading alignment (missing
/// trailing axes, so a `[d]` vector scales the rows of a `[d×r]` matrix).
/// Mutual broadcasting, where both operands would repeat, is rejected.
fn broadcast_plan(a: &[usize], b: &[usize]) -> Result<BroadcastPlan> {
    let plan = |small: &[usize], big: &[usize]| -> Option<Vec<usize>> {
        one_sided(small, big, true).or_else(|| one_sided(small, big, false))
    };
    if let Some(a_strides) = plan(a, b) {
        return Ok(BroadcastPlan {
            shape: b.to_vec(),
            a_strides,
            b_strides: row_major_strides(b),
        });
    }
    if let Some(b_strides) = plan(b, a) {
        return Ok(BroadcastPlan {
            shape: a.to_vec(),
            a_strides: row_major_strides(a),
            b_strides,
        });
    }
    Err(Error::Dimension(format!(
        "shapes {a:?} and {b:?} are not broadcast-compatible (one operand must repeat along size-1 or missing axes of the other)"
    )))
}

fn binary_broadcast<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let plan = broadcast_plan(a.shape(), b.shape())?;
    let numel: usize = plan.shape.iter().product();
    let rank = plan.shape.len();
    let mut idx = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(f(a.data()[ai], b.data()[bi]));
        // odometer increment
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            ai += plan.a_strides[axis];
            bi += plan.b_strides[axis];
            if idx[axis] < plan.shape[axis] {
                break;
            }
            ai -= plan.a_strides[axis] * plan.shape[axis];
            bi -= plan.b_strides[axis] * plan.shape[axis];
            idx[axis] = 0;
        }
    }
    Ok(Tensor::from_parts(plan.shape, data))
}

/// Elementwise product under the restricted broadcast rule.
pub fn ewise_mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary_broadcast(a, b, |x, y| x * y)
}

/// Elementwise sum under the same broadcast rule (bias terms, residuals).
pub fn ewise_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary_broadcast(a, b, |x, y| x + y)
}

/// Elementwise difference under the same broadcast rule.
pub fn ewise_sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary_broadcast(a, b, |x, y| x - y)
}

/// Sum or mean over one axis; the axis is removed from the shape.
/// Mean is computed as the left-to-right sum divided by the axis length.
pub fn reduce<T: Scalar>(a: &Tensor<T>, axis: usize, mode: Reduction) -> Result<Tensor<T>> {
    let shape = a.shape();
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "reduce axis {axis} out of range for shape {shape:?}"
        )));
    }
    if shape.len() == 1 {
        // reducing the only axis yields a length-1 vector rather than a scalar
        let mut acc = T::ZERO;
        for &v in a.data() {
            acc += v;
        }
        if mode == Reduction::Mean {
            acc = acc / T::from_f64(shape[0] as f64);
        }
        return Ok(Tensor::from_parts(vec![1], vec![acc]));
    }
    let outer: usize = shape[..axis].iter().product();
    let span = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![T::ZERO; outer * inner];
    for o in 0..outer {
        for s in 0..span {
            let base = (o * span + s) * inner;
            let orow = &mut out[o * inner..(o + 1) * inner];
            for (ov, &v) in orow.iter_mut().zip(&a.data()[base..base + inner]) {
                *ov += v;
            }
        }
    }
    if mode == Reduction::Mean {
        let inv_len = T::from_f64(span as f64);
        for v in &mut out {
            *v = *v / inv_len;
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape.remove(axis);
    Ok(Tensor::from_parts(out_shape, out))
}

/// Elementwise nonlinearity; `Identity` returns the input unchanged.
pub fn activation<T: Scalar>(a: &Tensor<T>, kind: Activation) -> Tensor<T> {
    kind.apply(a)
}

/// Matrix transpose.
pub fn transpose2<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let s = a.shape();
    if s.len() != 2 {
        return Err(Error::Dimension(format!(
            "transpose2 expects a matrix, got {s:?}"
        )));
    }
    let (m, n) = (s[0], s[1]);
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}
