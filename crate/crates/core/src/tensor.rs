//! Dense row-major `f64` tensors and the eager numeric kernels shared by the
//! autodiff tape.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Default epsilon for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Forward-pass mode. Dropout is only active in `Train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Data(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Data("ragged rows".into()));
        }
        Tensor::new(
            vec![rows.len(), cols],
            rows.iter().flatten().copied().collect(),
        )
    }

    /// Marks the tensor as trainable, allocating a zeroed gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(0.0);
        }
    }

    /// Adds `delta` into the gradient buffer. No-op for non-trainable tensors.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        let Some(g) = &mut self.grad else {
            return Ok(());
        };
        if g.len() != delta.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[delta.len()]));
        }
        for (a, d) in g.iter_mut().zip(delta) {
            *a += d;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .map_or(true, |g| g.iter().all(|v| v.is_finite()))
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (shape, data) = matmul_forward(&self.shape, &self.data, &other.shape, &other.data)?;
        Tensor::new(shape, data)
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let data = softmax_forward(&self.shape, &self.data, axis, None)?;
        Tensor::new(self.shape.clone(), data)
    }

    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = self.cols();
        if gain.numel() != d || bias.numel() != d {
            return Err(Error::shape("layer_norm", &self.shape, gain.shape()));
        }
        let data = layer_norm_forward(&self.data, d, gain.data(), bias.data(), eps);
        Tensor::new(self.shape.clone(), data)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }
}

/// Inverted dropout: survivors are scaled by `1/(1-p)` so `Eval` is the identity.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, p: f64, mode: Mode, rng: &mut R) -> Result<Tensor> {
    match dropout_mask(x.numel(), p, mode, rng)? {
        None => Ok(Tensor::new(x.shape.clone(), x.data.clone())?),
        Some(mask) => Tensor::new(
            x.shape.clone(),
            x.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
        ),
    }
}

/// Returns the multiplicative dropout mask, or `None` when dropout is the identity.
pub(crate) fn dropout_mask<R: Rng + ?Sized>(
    n: usize,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Option<Vec<f64>>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(None);
    }
    let scale = 1.0 / (1.0 - p);
    Ok(Some(
        (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect(),
    ))
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Broadcast layout of a batched matmul: output batch shape plus, per output
/// batch entry, the flat batch index into each operand.
pub(crate) struct BatchPlan {
    pub shape: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub pairs: Vec<(usize, usize)>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<BatchPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let rank = ab.len().max(bb.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(ab), pad(bb));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x != y && x != 1 && y != 1 {
            return Err(Error::shape("matmul", a, b));
        }
        out.push(x.max(y));
    }
    let total: usize = out.iter().product();
    let mut pairs = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let (mut ia, mut ib) = (0, 0);
        for d in 0..rank {
            ia = ia * pa[d] + if pa[d] == 1 { 0 } else { idx[d] };
            ib = ib * pb[d] + if pb[d] == 1 { 0 } else { idx[d] };
        }
        pairs.push((ia, ib));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let mut shape = out;
    shape.extend_from_slice(&[m, n]);
    Ok(BatchPlan {
        shape,
        m,
        k,
        n,
        pairs,
    })
}

pub(crate) fn matmul_forward(
    ashape: &[usize],
    a: &[f64],
    bshape: &[usize],
    b: &[f64],
) -> Result<(Vec<usize>, Vec<f64>)> {
    let plan = matmul_plan(ashape, bshape)?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![0.0; plan.pairs.len() * m * n];
    for (t, &(ia, ib)) in plan.pairs.iter().enumerate() {
        gemm_acc(
            &a[ia * m * k..(ia + 1) * m * k],
            &b[ib * k * n..(ib + 1) * k * n],
            &mut out[t * m * n..(t + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Ok((plan.shape, out))
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` for `a: m×n`, `b: k×n`, giving `c: m×k`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c += aᵀ · b` for `a: m×k`, `b: m×n`, giving `c: k×n`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// (outer, axis length, inner stride) for reductions along `axis`.
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Usage(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Max-shifted softmax along `axis`. Masked-out entries (`mask[i] == false`)
/// receive exactly zero weight; a slice with every entry masked is an error.
pub(crate) fn softmax_forward(
    shape: &[usize],
    x: &[f64],
    axis: usize,
    mask: Option<&[bool]>,
) -> Result<Vec<f64>> {
    let (outer, len, inner) = axis_layout(shape, axis)?;
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let live = |j: usize| mask.map_or(true, |m| m[idx(j)]);
            let mut max = f64::NEG_INFINITY;
            for j in (0..len).filter(|&j| live(j)) {
                max = max.max(x[idx(j)]);
            }
            if len > 0 && max == f64::NEG_INFINITY {
                return Err(Error::Data(
                    "softmax: every position masked for some query".into(),
                ));
            }
            let mut sum = 0.0;
            for j in (0..len).filter(|&j| live(j)) {
                let e = (x[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum += e;
            }
            for j in (0..len).filter(|&j| live(j)) {
                out[idx(j)] /= sum;
            }
        }
    }
    Ok(out)
}

pub(crate) fn softmax_backward(
    shape: &[usize],
    y: &[f64],
    dy: &[f64],
    axis: usize,
    dx: &mut [f64],
) -> Result<()> {
    let (outer, len, inner) = axis_layout(shape, axis)?;
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: f64 = (0..len)
                .map(|j| y[base + j * inner] * dy[base + j * inner])
                .sum();
            for j in 0..len {
                let p = base + j * inner;
                dx[p] += y[p] * (dy[p] - dot);
            }
        }
    }
    Ok(())
}

/// Log-softmax over the last dimension of width `d`.
pub(crate) fn log_softmax_forward(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(d).zip(out.chunks_mut(d)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (o, v) in orow.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

pub(crate) fn layer_norm_forward(x: &[f64], d: usize, gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(d).zip(out.chunks_mut(d)) {
        let (mean, inv) = row_stats(row, eps);
        for j in 0..d {
            orow[j] = gain[j] * (row[j] - mean) * inv + bias[j];
        }
    }
    out
}

/// Mean and inverse standard deviation of one row.
pub(crate) fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}
