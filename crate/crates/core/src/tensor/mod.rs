//! Dense row-major tensors and the reference attention used as ground truth
//! for every sparse, cached and fused path in the crate.

mod dump;

pub use dump::{read_dump, read_dump_file, write_dump, write_dump_file, AnyTensor, DUMP_MAGIC, DUMP_VERSION};

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::arrow::BlockMask;
use crate::error::{Error, Result};

/// Floating-point element type a [`Tensor`] may hold.
pub trait Scalar:
    Copy
    + Debug
    + PartialEq
    + PartialOrd
    + Default
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + AddAssign
    + 'static
{
    /// Code written into DFA2 dumps.
    const DTYPE_CODE: u32;
    const ZERO: Self;
    const ONE: Self;
    const NEG_INFINITY: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty, $code:expr) => {
        impl Scalar for $t {
            const DTYPE_CODE: u32 = $code;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const NEG_INFINITY: Self = <$t>::NEG_INFINITY;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
        }
    };
}

impl_scalar!(f32, 0);
impl_scalar!(f64, 1);

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {expected} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![T::ZERO; len] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::ONE;
        }
        t
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = shape.iter().product();
        Self { shape, data: (0..len).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Slice of the `index`-th sub-array along the leading axis.
    pub fn outer(&self, index: usize) -> &[T] {
        let stride = self.data.len() / self.shape[0];
        &self.data[index * stride..(index + 1) * stride]
    }

    pub fn outer_mut(&mut self, index: usize) -> &mut [T] {
        let stride = self.data.len() / self.shape[0];
        &mut self.data[index * stride..(index + 1) * stride]
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    fn dims2(&self, name: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            s => Err(Error::ShapeMismatch(format!("{name} must be 2-D, got {s:?}"))),
        }
    }
}

/// Token ordering inside the joint visual/text sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenOrder {
    /// Visual tokens occupy `[0, n_visual)`, text tokens the tail.
    #[default]
    VisualFirst,
    TextFirst,
}

/// Shape of one joint attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionDims {
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_visual: usize,
    pub n_text: usize,
    #[serde(default)]
    pub order: TokenOrder,
}

impl AttentionDims {
    pub fn new(n_heads: usize, head_dim: usize, n_visual: usize, n_text: usize) -> Self {
        Self { n_heads, head_dim, n_visual, n_text, order: TokenOrder::VisualFirst }
    }

    pub fn seq_len(&self) -> usize {
        self.n_visual + self.n_text
    }

    /// Whether token `index` belongs to the text segment.
    pub fn is_text(&self, index: usize) -> bool {
        match self.order {
            TokenOrder::VisualFirst => index >= self.n_visual,
            TokenOrder::TextFirst => index < self.n_text,
        }
    }

    /// Rejects zero counts. `n_text` may be zero (pure visual sequences).
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.head_dim == 0 || self.n_visual == 0 {
            return Err(Error::InvalidConfig(format!("heads, head_dim and visual tokens must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Shape `[H, N, d]` of a layer's Q/K/V and output tensors.
    pub fn layer_shape(&self) -> Vec<usize> {
        vec![self.n_heads, self.seq_len(), self.head_dim]
    }
}

/// `a [m×k] · b [k×n]`, summing over `k` in ascending order.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("lhs")?;
    let (k2, n) = b.dims2("rhs")?;
    if k != k2 {
        return Err(Error::ShapeMismatch(format!("inner dimensions {k} and {k2} differ")));
    }
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)?.check_finite("matmul")
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, n) = x.dims2("input")?;
    let mut out = x.clone();
    if n > 0 {
        for row in out.data.chunks_mut(n) {
            softmax_in_place(row, |_| true);
        }
    }
    out.check_finite("softmax_rows")
}

/// Masked softmax over one row; inactive entries become zero. Returns false
/// when no entry is active.
fn softmax_in_place<T: Scalar>(row: &mut [T], active: impl Fn(usize) -> bool) -> bool {
    let mut max = T::NEG_INFINITY;
    let mut any = false;
    for (j, &s) in row.iter().enumerate() {
        if active(j) {
            max = max.max(s);
            any = true;
        }
    }
    if !any {
        return false;
    }
    let mut sum = T::ZERO;
    for (j, s) in row.iter_mut().enumerate() {
        if active(j) {
            *s = (*s - max).exp();
            sum += *s;
        } else {
            *s = T::ZERO;
        }
    }
    for s in row.iter_mut() {
        *s = *s / sum;
    }
    true
}

/// Dense masked attention for a single head on `[n×d]` slices.
///
/// Scores are computed one query row at a time, so memory stays `O(n)`.
pub fn attention_head_reference<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    d: usize,
    mask: Option<&BlockMask>,
) -> Result<Vec<T>> {
    if q.len() != n * d || k.len() != n * d || v.len() != n * d {
        return Err(Error::ShapeMismatch(format!("q/k/v must each hold {n}×{d} elements")));
    }
    if let Some(m) = mask {
        if m.seq_len() != n {
            return Err(Error::ShapeMismatch(format!("mask covers {} tokens, sequence has {n}", m.seq_len())));
        }
    }
    let scale = T::ONE / T::from_f64(d as f64).sqrt();
    let mut out = vec![T::ZERO; n * d];
    let mut scores = vec![T::ZERO; n];
    for i in 0..n {
        let qi = &q[i * d..(i + 1) * d];
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &k[j * d..(j + 1) * d];
            let mut acc = T::ZERO;
            for c in 0..d {
                acc += qi[c] * kj[c];
            }
            *s = acc * scale;
        }
        let ok = match mask {
            Some(m) => softmax_in_place(&mut scores, |j| m.token_active(i, j)),
            None => softmax_in_place(&mut scores, |_| true),
        };
        if !ok {
            return Err(Error::FullyMaskedRow { row: i });
        }
        let oi = &mut out[i * d..(i + 1) * d];
        for (j, &p) in scores.iter().enumerate() {
            if p == T::ZERO {
                continue;
            }
            let vj = &v[j * d..(j + 1) * d];
            for c in 0..d {
                oi[c] += p * vj[c];
            }
        }
    }
    if out.iter().all(|x| x.is_finite()) {
        Ok(out)
    } else {
        Err(Error::NonFinite("attention_reference"))
    }
}

/// `softmax(Q·Kᵀ/√d + mask)·V` per head on `[H×N×d]` tensors.
pub fn attention_reference<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&BlockMask>,
) -> Result<Tensor<T>> {
    let (h, n, d) = dims3(q)?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::ShapeMismatch(format!(
            "q {:?}, k {:?}, v {:?} must agree",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut data = Vec::with_capacity(h * n * d);
    for head in 0..h {
        data.extend(attention_head_reference(q.outer(head), k.outer(head), v.outer(head), n, d, mask)?);
    }
    Tensor::new(vec![h, n, d], data)
}

pub(crate) fn dims3<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[h, n, d] if h > 0 => Ok((h, n, d)),
        s => Err(Error::ShapeMismatch(format!("expected a non-empty [H, N, d] tensor, got {s:?}"))),
    }
}
