//! Dense row-major tensors and the numeric kernels shared by the graph
//! recorder and the plain (non-recorded) functional API.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-6;

/// `sqrt(2/pi)` for the tanh form of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh form of GELU.
pub const GELU_COEFF: f64 = 0.044_715;

/// Arithmetic precision of a forward/backward pass.
///
/// `F32` keeps storage in `f64` but rounds every produced value to the
/// nearest `f32` and runs matrix products through single-precision GEMM.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }

    pub fn round_slice(self, xs: &mut [f64]) {
        if self == Precision::F32 {
            for x in xs {
                *x = *x as f32 as f64;
            }
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(
                "tensor",
                format!("zero extent in shape {shape:?}"),
            ));
        }
        if numel(shape) != data.len() {
            return Err(Error::dim(
                "tensor",
                format!(
                    "shape {shape:?} needs {} values, got {}",
                    numel(shape),
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Shape/data pair the caller has already validated.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(Vec::new(), vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", "ragged rows"));
        }
        Tensor::new(&[rows.len(), cols], rows.concat())
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (&i, &n) in index.iter().zip(&self.shape) {
            assert!(i < n, "index {index:?} out of bounds for {:?}", self.shape);
            off = off * n + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&x| f(x)).collect(),
        )
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    /// Elementwise `f` with numpy-style broadcasting.
    pub fn broadcast_zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape == other.shape {
            return self.zip_map(other, f);
        }
        if is_suffix(&other.shape, &self.shape) {
            let nb = other.data.len();
            let mut data = Vec::with_capacity(self.data.len());
            for chunk in self.data.chunks(nb) {
                data.extend(chunk.iter().zip(&other.data).map(|(&a, &b)| f(a, b)));
            }
            return Ok(Tensor::from_parts(self.shape.clone(), data));
        }
        if is_suffix(&self.shape, &other.shape) {
            let na = self.data.len();
            let mut data = Vec::with_capacity(other.data.len());
            for chunk in other.data.chunks(na) {
                data.extend(self.data.iter().zip(chunk).map(|(&a, &b)| f(a, b)));
            }
            return Ok(Tensor::from_parts(other.shape.clone(), data));
        }
        let shape = broadcast_shape(&self.shape, &other.shape)?;
        let oa = broadcast_offsets(&shape, &self.shape);
        let ob = broadcast_offsets(&shape, &other.shape);
        let data = oa
            .iter()
            .zip(&ob)
            .map(|(&i, &j)| f(self.data[i], other.data[j]))
            .collect();
        Ok(Tensor::from_parts(shape, data))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.broadcast_zip(other, |a, b| a * b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Shape helpers
// ---------------------------------------------------------------------------

/// Numpy-style broadcast of two shapes (right aligned).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n {
            a[i + a.len() - n]
        } else {
            1
        };
        let db = if i + b.len() >= n {
            b[i + b.len() - n]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(
                    "broadcast",
                    format!("shapes {a:?} and {b:?} are not broadcast-compatible"),
                ))
            }
        };
    }
    Ok(out)
}

/// `small` (leading 1s ignored) equals the trailing axes of `big`.
pub(crate) fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    let lead = small.iter().take_while(|&&e| e == 1).count();
    let core = &small[lead..];
    core.len() <= big.len() && big[big.len() - core.len()..] == *core && small.len() <= big.len()
}

/// For every element of `out_shape` (row-major), the offset of the element of
/// an input of shape `in_shape` that broadcasts onto it.
pub(crate) fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let n = out_shape.len();
    let mut strides = vec![0usize; n];
    let mut s = 1;
    for i in (0..in_shape.len()).rev() {
        let j = i + n - in_shape.len();
        strides[j] = if in_shape[i] == 1 { 0 } else { s };
        s *= in_shape[i];
    }
    let total = numel(out_shape);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    offsets
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::dim(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// GEMM
// ---------------------------------------------------------------------------

/// Strided matrix operand: `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            rs: cols,
            cs: 1,
        }
    }

    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            rs: 1,
            cs: cols,
        }
    }
}

/// `c = beta * c + a(m×k) · b(k×n)`, with `c` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    c: &mut [f64],
    beta: f64,
    precision: Precision,
) {
    assert!(c.len() >= m * n);
    match precision {
        Precision::F64 => unsafe {
            // SAFETY: callers size every operand for the given strides and
            // extents; `c` is row-major m×n.
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                a.rs as isize,
                a.cs as isize,
                b.data.as_ptr(),
                b.rs as isize,
                b.cs as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        },
        Precision::F32 => {
            let gather = |op: MatRef<'_>, rows: usize, cols: usize| -> Vec<f32> {
                let mut out = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    for j in 0..cols {
                        out.push(op.data[i * op.rs + j * op.cs] as f32);
                    }
                }
                out
            };
            let a32 = gather(a, m, k);
            let b32 = gather(b, k, n);
            let mut c32 = vec![0f32; m * n];
            unsafe {
                // SAFETY: contiguous row-major buffers of the stated sizes.
                matrixmultiply::sgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a32.as_ptr(),
                    k as isize,
                    1,
                    b32.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    c32.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            for (dst, src) in c[..m * n].iter_mut().zip(&c32) {
                *dst = ((beta * *dst) + *src as f64) as f32 as f64;
            }
        }
    }
}

/// Batch layout of a (possibly broadcast) matrix product.
pub(crate) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Per output batch entry, the matrix index into `a` and `b`.
    pub a_index: Vec<usize>,
    pub b_index: Vec<usize>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::dim(
            "matmul",
            format!("operands need rank >= 2, got {a:?} and {b:?}"),
        ));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner extents differ: {a:?} x {b:?}"),
        ));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let batch = broadcast_shape(a_batch, b_batch).map_err(|_| {
        Error::dim(
            "matmul",
            format!("batch extents not broadcast-compatible: {a:?} x {b:?}"),
        )
    })?;
    let a_index = broadcast_offsets(&batch, a_batch);
    let b_index = broadcast_offsets(&batch, b_batch);
    let mut out_shape = batch;
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulPlan {
        out_shape,
        m,
        k,
        n,
        a_index,
        b_index,
    })
}

pub(crate) fn matmul_with(a: &Tensor, b: &Tensor, precision: Precision) -> Result<Tensor> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![0.0; numel(&plan.out_shape)];
    if b.ndim() == 2 {
        // Fold every leading extent of `a` into the row count.
        let rows = a.numel() / k;
        gemm(
            rows,
            k,
            n,
            MatRef::row_major(a.data(), k),
            MatRef::row_major(b.data(), n),
            &mut out,
            0.0,
            precision,
        );
    } else {
        for (bi, (&ai, &bj)) in plan.a_index.iter().zip(&plan.b_index).enumerate() {
            gemm(
                m,
                k,
                n,
                MatRef::row_major(&a.data()[ai * m * k..], k),
                MatRef::row_major(&b.data()[bj * k * n..], n),
                &mut out[bi * m * n..],
                0.0,
                precision,
            );
        }
    }
    Ok(Tensor::from_parts(plan.out_shape, out))
}

/// Matrix product over the last two axes; leading extents broadcast.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_with(a, b, Precision::F64)
}

// ---------------------------------------------------------------------------
// Elementwise and reduction kernels
// ---------------------------------------------------------------------------

/// Softmax along `axis`, stabilised by subtracting the slice maximum.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis(x.shape(), axis, "softmax")?;
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len)
                .map(|j| out[at(j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (out[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::dim("concat", "no operands"))?;
    check_axis(first.shape(), axis, "concat")?;
    for t in &tensors[1..] {
        let same_rank = t.ndim() == first.ndim();
        let others_match = same_rank
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !others_match {
            return Err(Error::dim(
                "concat",
                format!(
                    "shape {:?} incompatible with {:?} along axis {axis}",
                    t.shape(),
                    first.shape()
                ),
            ));
        }
    }
    let total: usize = tensors.iter().map(|t| t.shape()[axis]).sum();
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    let (outer, _, inner) = axis_split(first.shape(), axis);
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for t in tensors {
            let len = t.shape()[axis] * inner;
            data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

/// Contiguous sub-range `[start, start+len)` along `axis`.
pub fn slice_axis(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    check_axis(x.shape(), axis, "slice")?;
    if len == 0 || start + len > x.shape()[axis] {
        return Err(Error::dim(
            "slice",
            format!(
                "range {start}..{} outside axis {axis} of {:?}",
                start + len,
                x.shape()
            ),
        ));
    }
    let (outer, full, inner) = axis_split(x.shape(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, data))
}

/// Inverse of [`concat`]: splits `x` along `axis` into pieces of the given extents.
pub fn split(x: &Tensor, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
    check_axis(x.shape(), axis, "split")?;
    if sizes.iter().sum::<usize>() != x.shape()[axis] {
        return Err(Error::dim(
            "split",
            format!(
                "sizes {sizes:?} do not cover axis {axis} of {:?}",
                x.shape()
            ),
        ));
    }
    let mut start = 0;
    let mut parts = Vec::with_capacity(sizes.len());
    for &s in sizes {
        parts.push(slice_axis(x, axis, start, s)?);
        start += s;
    }
    Ok(parts)
}

/// Axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let n = x.ndim();
    let mut seen = vec![false; n];
    if perm.len() != n
        || perm
            .iter()
            .any(|&p| p >= n || std::mem::replace(&mut seen[p], true))
    {
        return Err(Error::dim(
            "permute",
            format!("{perm:?} is not a permutation of {n} axes"),
        ));
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1usize; n];
    for i in (0..n.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = x.numel();
    let mut data = Vec::with_capacity(total);
    let src = x.data();
    if n >= 2 && perm[n - 1] == n - 1 {
        // Innermost axis stays put: move contiguous rows.
        let row = in_shape[n - 1];
        let m = n - 1;
        let mut idx = vec![0usize; m];
        let mut off = 0usize;
        for _ in 0..total / row {
            data.extend_from_slice(&src[off..off + row]);
            for d in (0..m).rev() {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        return Ok(Tensor::from_parts(out_shape, data));
    }
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        data.push(src[off]);
        for d in (0..n).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, data))
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Normalised rows plus per-row inverse standard deviations, for reuse by backward.
pub(crate) fn layer_norm_core(x: &Tensor, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let d = *x.shape().last().expect("layer_norm on rank-0 tensor");
    let rows = x.numel() / d;
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    (xhat, inv_std)
}

/// Layer normalisation over the last axis with affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("layer_norm", "rank-0 input"))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::dim(
            "layer_norm",
            format!(
                "affine shapes {:?}/{:?} do not match width {d}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::Contract("layer_norm eps must be positive".into()));
    }
    let (mut xhat, _) = layer_norm_core(x, eps);
    for (i, v) in xhat.iter_mut().enumerate() {
        *v = *v * gamma.data()[i % d] + beta.data()[i % d];
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), xhat))
}

/// Tanh approximation of GELU:
/// `0.5·x·(1 + tanh(sqrt(2/pi)·(x + 0.044715·x³)))`.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

/// `tanh(sqrt(2/pi)·(x + 0.044715·x³))` via one `exp`.
#[inline]
pub(crate) fn gelu_tanh(x: f64) -> f64 {
    let z = GELU_SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
    if z.abs() > 20.0 {
        return z.signum();
    }
    let e = (2.0 * z).exp();
    (e - 1.0) / (e + 1.0)
}

/// GELU derivative given the cached inner tanh `t`.
#[inline]
pub(crate) fn gelu_grad_from_tanh(x: f64, t: f64) -> f64 {
    let dinner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Per-row softmax-mass gate between two key groups.
///
/// For each row `r` of the last axis this returns
/// `S_extra / (S_orig + S_extra)` where `S_g = Σ exp(score - M)`. With
/// `shared_max` the same `M` (the maximum over both groups) is used for both
/// sums, which keeps the ratio exact. Without it each group subtracts its own
/// maximum, which is wrong unless the two maxima coincide; that variant only
/// exists as a negative control.
pub(crate) fn gate_rows(
    orig: &Tensor,
    extra: &Tensor,
    shared_max: bool,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (os, es) = (orig.shape(), extra.shape());
    if os.len() != es.len() || os.is_empty() || os[..os.len() - 1] != es[..es.len() - 1] {
        return Err(Error::dim(
            "gate",
            format!("score groups {os:?} and {es:?} disagree outside the key axis"),
        ));
    }
    let n = *os.last().unwrap();
    let m = *es.last().unwrap();
    let rows = orig.numel() / n;
    let mut gate = Vec::with_capacity(rows);
    let mut max_o = Vec::with_capacity(rows);
    let mut denom = Vec::with_capacity(rows);
    for r in 0..rows {
        let o = &orig.data()[r * n..(r + 1) * n];
        let e = &extra.data()[r * m..(r + 1) * m];
        let mo = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let me = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (shift_o, shift_e) = if shared_max {
            let s = mo.max(me);
            (s, s)
        } else {
            (mo, me)
        };
        let so: f64 = o.iter().map(|v| (v - shift_o).exp()).sum();
        let se: f64 = e.iter().map(|v| (v - shift_e).exp()).sum();
        gate.push(se / (so + se));
        max_o.push(shift_o);
        denom.push(so + se);
    }
    let mut shape = os.to_vec();
    *shape.last_mut().unwrap() = 1;
    Ok((Tensor::from_parts(shape, gate), max_o, denom))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.get(&[i, p]) * b.get(&[p, j]);
                }
                out.set(&[i, j], acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_small() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &m).unwrap(), m);
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let diff = matmul(&a, &b)
            .unwrap()
            .max_abs_diff(&naive_matmul(&a, &b))
            .unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn matmul_broadcasts_leading_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::randn(&[2, 1, 3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 4, 2], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3, 2]);
        for i in 0..2 {
            for j in 0..3 {
                let ai = slice_axis(&a, 0, i, 1).unwrap().reshape(&[3, 4]).unwrap();
                let bj = slice_axis(&b, 0, j, 1).unwrap().reshape(&[4, 2]).unwrap();
                let cij = slice_axis(&slice_axis(&c, 0, i, 1).unwrap(), 1, j, 1)
                    .unwrap()
                    .reshape(&[3, 2])
                    .unwrap();
                assert!(cij.max_abs_diff(&naive_matmul(&ai, &bj)).unwrap() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_mentions_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::new(&[2], vec![0.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::new(&[3], vec![1000.0; 3]).unwrap(), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        for j in 0..3 {
            assert!((s.get(&[0, j]) + s.get(&[1, j]) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_and_split() {
        let a = Tensor::ones(&[1, 2]);
        let b = Tensor::zeros(&[1, 2]);
        let c = concat(&[&a, &b], 0).unwrap();
        assert_eq!(c.data(), &[1.0, 1.0, 0.0, 0.0]);
        let single = Tensor::new(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(concat(&[&single], 0).unwrap(), single);
        assert!(concat(&[&a, &Tensor::zeros(&[1, 3])], 0).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::ones(&[3]);
        let b = Tensor::zeros(&[3]);
        let out = layer_norm(&Tensor::full(&[1, 3], 5.0), &g, &b, LN_EPS).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let g2 = Tensor::ones(&[2]);
        let b2 = Tensor::zeros(&[2]);
        let out = layer_norm(
            &Tensor::new(&[2], vec![1.0, -1.0]).unwrap(),
            &g2,
            &b2,
            LN_EPS,
        )
        .unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-5 && (out.data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn activations() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert_eq!(
            relu(&Tensor::new(&[2], vec![-1.0, 2.0]).unwrap()).data(),
            &[0.0, 2.0]
        );
        assert!((sigmoid_scalar(0.0) - 0.5).abs() < 1e-16);
        assert!(sigmoid_scalar(-800.0) >= 0.0 && sigmoid_scalar(800.0) <= 1.0);
    }

    #[test]
    fn permute_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let perm = [0, 2, 1, 3];
        let p = permute(&x, &perm).unwrap();
        assert_eq!(p.shape(), &[2, 4, 3, 5]);
        assert_eq!(p.get(&[1, 3, 2, 4]), x.get(&[1, 2, 3, 4]));
        assert_eq!(permute(&p, &inverse_permutation(&perm)).unwrap(), x);
    }

    #[test]
    fn broadcast_offsets_bias_and_column() {
        assert_eq!(broadcast_offsets(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_offsets(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn f32_precision_rounds_matmul() {
        let a = Tensor::new(&[1, 1], vec![1.0 + 1e-12]).unwrap();
        let b = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let c = matmul_with(&a, &b, Precision::F32).unwrap();
        assert_eq!(c.data()[0], 1.0);
    }
}
