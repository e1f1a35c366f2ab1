//! Reverse-mode differentiation over a linear tape.
//!
//! Every differentiable op appends a node holding its forward value and the
//! handles of its inputs. [`Tape::backward`] walks the nodes in reverse and
//! accumulates vector-Jacobian products. Parameter leaves borrow their data
//! from the [`ParamStore`] instead of copying it.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Mode, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var, usize),
    LogSoftmax(Var),
    LayerNorm(Var, Var, Var, f64),
    Dropout(Var, Vec<f64>),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SumAll(Var),
    Nll(Var, Vec<usize>, Vec<bool>, usize),
}

struct Node<'p> {
    data: Cow<'p, [f64]>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    params: Vec<(ParamId, Vec<f64>)>,
    leaves: HashMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    /// Gradient with respect to a trainable input created by [`Tape::input`].
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.leaves.get(&var).map(Vec::as_slice)
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, g) in &mut self.params {
            for v in g {
                *v *= factor;
            }
        }
    }

    /// Adds another set of parameter gradients into this one.
    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.params {
            match self.params.iter_mut().find(|(p, _)| *p == id) {
                Some((_, acc)) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => self.params.push((id, g)),
            }
        }
    }
}

pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node<'p>>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape without parameters; only constants and inputs can be leaves.
    pub fn new() -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            consumed: false,
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Tape {
            store: Some(store),
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.to_vec()).expect("tape node shape")
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        let cols = s.last().copied().unwrap_or(1);
        let rows = if s.is_empty() {
            1
        } else {
            s[..s.len() - 1].iter().product()
        };
        (rows, cols)
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_node(Cow::Owned(data), shape, op, needs_grad)
    }

    fn push_node(&mut self, data: Cow<'p, [f64]>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            data,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push_node(Cow::Owned(t.into_data()), shape, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported via [`Gradients::wrt`] when the
    /// tensor requires grad.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad();
        self.push_node(
            Cow::Owned(t.data().to_vec()),
            t.shape().to_vec(),
            Op::Leaf,
            needs,
        )
    }

    /// The leaf for a stored parameter. Repeated calls return the same node,
    /// so shared use accumulates into one gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self
            .store
            .expect("Tape::param called on a tape without a parameter store");
        let t = store.get(id);
        let v = self.push_node(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Param(id),
            true,
        );
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) =
            tensor::matmul_forward(self.shape(a), self.value(a), self.shape(b), self.value(b))?;
        Ok(self.push(data, shape, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, Op::Add(a, b), &[a, b]))
    }

    /// Adds a bias vector to every row (last-dimension broadcast).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.rows_cols(a);
        if self.shape(bias).iter().product::<usize>() != cols {
            return Err(Error::shape("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias);
        let data = self
            .value(a)
            .chunks(cols.max(1))
            .flat_map(|r| r.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(data, shape, Op::Scale(a, c), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| tensor::sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(data, shape, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push(data, shape, Op::Relu(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let data = tensor::softmax_forward(self.shape(a), self.value(a), axis, None)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, Op::Softmax(a, axis), &[a]))
    }

    /// Softmax over the last axis where `mask[i] == false` entries get zero weight.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::shape("masked_softmax", self.shape(a), &[mask.len()]));
        }
        let axis = self.shape(a).len().saturating_sub(1);
        let data = tensor::softmax_forward(self.shape(a), self.value(a), axis, Some(mask))?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, Op::Softmax(a, axis), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (_, cols) = self.rows_cols(a);
        let data = tensor::log_softmax_forward(self.value(a), cols.max(1));
        let shape = self.shape(a).to_vec();
        self.push(data, shape, Op::LogSoftmax(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (_, d) = self.rows_cols(x);
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let data = tensor::layer_norm_forward(self.value(x), d, self.value(gain), self.value(bias), eps);
        let shape = self.shape(x).to_vec();
        Ok(self.push(data, shape, Op::LayerNorm(x, gain, bias, eps), &[x, gain, bias]))
    }

    /// Inverted dropout. Returns `a` itself when dropout is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        let Some(mask) = tensor::dropout_mask(self.value(a).len(), p, mode, rng)? else {
            return Ok(a);
        };
        let data = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, Op::Dropout(a, mask), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix("transpose", a)?;
        let x = self.value(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x[i * c + j];
            }
        }
        Ok(self.push(data, vec![c, r], Op::Transpose(a), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.matrix("slice_cols", a)?;
        if start + width > c {
            return Err(Error::shape("slice_cols", self.shape(a), &[start, width]));
        }
        let x = self.value(a);
        let data = (0..r)
            .flat_map(|i| x[i * c + start..i * c + start + width].iter().copied())
            .collect();
        Ok(self.push(data, vec![r, width], Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Usage("concat_cols of nothing".into()));
        };
        let (r, _) = self.matrix("concat_cols", first)?;
        let mut width = 0;
        for &p in parts {
            let (pr, pc) = self.matrix("concat_cols", p)?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            width += pc;
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            for &p in parts {
                let pc = self.shape(p)[1];
                data.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        Ok(self.push(data, vec![r, width], Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Usage("concat_rows of nothing".into()));
        };
        let (_, c) = self.matrix("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.matrix("concat_rows", p)?;
            if pc != c {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pr;
            data.extend_from_slice(self.value(p));
        }
        Ok(self.push(data, vec![rows, c], Op::ConcatRows(parts.to_vec()), parts))
    }

    /// `out[r] = a[idx[r]]` on a rank-2 tensor.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix("gather_rows", a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Usage(format!("gather_rows: row {bad} out of range 0..{r}")));
        }
        let x = self.value(a);
        let data = idx
            .iter()
            .flat_map(|&i| x[i * c..(i + 1) * c].iter().copied())
            .collect();
        Ok(self.push(data, vec![idx.len(), c], Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    /// `out[idx[r]] += a[r]`, producing `n_out` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let (r, c) = self.matrix("scatter_add_rows", a)?;
        if idx.len() != r {
            return Err(Error::shape("scatter_add_rows", self.shape(a), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(Error::Usage(format!(
                "scatter_add_rows: row {bad} out of range 0..{n_out}"
            )));
        }
        let x = self.value(a);
        let mut data = vec![0.0; n_out * c];
        for (src, &dst) in idx.iter().enumerate() {
            for j in 0..c {
                data[dst * c + j] += x[src * c + j];
            }
        }
        Ok(self.push(data, vec![n_out, c], Op::ScatterAddRows(a, idx.to_vec()), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![s], vec![], Op::SumAll(a), &[a])
    }

    /// Mean negative log-likelihood of `targets[r]` under row `r` of the
    /// log-probability matrix, skipping rows where `keep[r]` is false.
    pub fn nll(&mut self, logprobs: Var, targets: &[usize], keep: &[bool]) -> Result<Var> {
        let (r, c) = self.matrix("nll", logprobs)?;
        if targets.len() != r || keep.len() != r {
            return Err(Error::shape("nll", self.shape(logprobs), &[targets.len()]));
        }
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::Data("nll: every target position is padding".into()));
        }
        let x = self.value(logprobs);
        let mut total = 0.0;
        for i in (0..r).filter(|&i| keep[i]) {
            if targets[i] >= c {
                return Err(Error::Usage(format!("nll: target {} >= vocab {c}", targets[i])));
            }
            total -= x[i * c + targets[i]];
        }
        let loss = total / count as f64;
        Ok(self.push(
            vec![loss],
            vec![],
            Op::Nll(logprobs, targets.to_vec(), keep.to_vec(), count),
            &[logprobs],
        ))
    }

    /// Runs the reverse sweep from a scalar `loss`. A tape supports exactly one
    /// backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Usage("backward on a consumed tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(i), g);
                }
                Op::Param(id) => out.params.push((*id, g)),
                op => self.backprop(op, node, &g, &mut grads)?,
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn backprop(&self, op: &Op, node: &Node<'_>, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        // Runs `$body` with the (lazily zeroed) gradient buffer of `$v`, if it needs one.
        macro_rules! with_grad {
            ($v:expr, |$d:ident| $body:block) => {{
                let v: Var = $v;
                if nodes[v.0].needs_grad {
                    let len = nodes[v.0].data.len();
                    let $d: &mut Vec<f64> = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                    $body
                }
            }};
        }
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let plan = tensor::matmul_plan(self.shape(*a), self.shape(*b))?;
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let (av, bv) = (self.value(*a), self.value(*b));
                with_grad!(*a, |da| {
                    for (t, &(ia, ib)) in plan.pairs.iter().enumerate() {
                        tensor::gemm_nt_acc(
                            &g[t * m * n..(t + 1) * m * n],
                            &bv[ib * k * n..(ib + 1) * k * n],
                            &mut da[ia * m * k..(ia + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                with_grad!(*b, |db| {
                    for (t, &(ia, ib)) in plan.pairs.iter().enumerate() {
                        tensor::gemm_tn_acc(
                            &av[ia * m * k..(ia + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut db[ib * k * n..(ib + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |da| { axpy(da, g, 1.0) });
                with_grad!(*b, |db| { axpy(db, g, 1.0) });
            }
            Op::AddRow(a, bias) => {
                with_grad!(*a, |da| { axpy(da, g, 1.0) });
                with_grad!(*bias, |db| {
                    let c = db.len().max(1);
                    for row in g.chunks(c) {
                        axpy(db, row, 1.0);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                with_grad!(*a, |da| {
                    for ((d, gv), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                });
                with_grad!(*b, |db| {
                    for ((d, gv), x) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                });
            }
            Op::Scale(a, c) => with_grad!(*a, |da| { axpy(da, g, *c) }),
            Op::Sigmoid(a) => with_grad!(*a, |da| {
                for ((d, gv), y) in da.iter_mut().zip(g).zip(node.data.iter()) {
                    *d += gv * y * (1.0 - y);
                }
            }),
            Op::Relu(a) => {
                let x = self.value(*a);
                with_grad!(*a, |da| {
                    for ((d, gv), xv) in da.iter_mut().zip(g).zip(x) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Softmax(a, axis) => with_grad!(*a, |da| {
                tensor::softmax_backward(&node.shape, &node.data, g, *axis, da)?;
            }),
            Op::LogSoftmax(a) => with_grad!(*a, |da| {
                let c = node.shape.last().copied().unwrap_or(1).max(1);
                for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(node.data.chunks(c)) {
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..c {
                        drow[j] += grow[j] - yrow[j].exp() * gsum;
                    }
                }
            }),
            Op::LayerNorm(x, gain, bias, eps) => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let d = gv.len().max(1);
                with_grad!(*x, |dx| {
                    for ((xrow, grow), drow) in xv.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                        let (mean, inv) = tensor::row_stats(xrow, *eps);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = grow[j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * (xrow[j] - mean) * inv;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let xh = (xrow[j] - mean) * inv;
                            drow[j] += inv * (grow[j] * gv[j] - m1 - xh * m2);
                        }
                    }
                });
                with_grad!(*gain, |dg| {
                    for (xrow, grow) in xv.chunks(d).zip(g.chunks(d)) {
                        let (mean, inv) = tensor::row_stats(xrow, *eps);
                        for j in 0..d {
                            dg[j] += grow[j] * (xrow[j] - mean) * inv;
                        }
                    }
                });
                with_grad!(*bias, |db| {
                    for grow in g.chunks(d) {
                        axpy(db, grow, 1.0);
                    }
                });
            }
            Op::Dropout(a, mask) => with_grad!(*a, |da| {
                for ((d, gv), m) in da.iter_mut().zip(g).zip(mask) {
                    *d += gv * m;
                }
            }),
            Op::Transpose(a) => with_grad!(*a, |da| {
                let (r, c) = (node.shape[1], node.shape[0]);
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }),
            Op::SliceCols(a, start) => with_grad!(*a, |da| {
                let c = self.shape(*a)[1];
                let w = node.shape[1];
                for i in 0..node.shape[0] {
                    axpy(&mut da[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w], 1.0);
                }
            }),
            Op::ConcatCols(parts) => {
                let width = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    with_grad!(p, |dp| {
                        for i in 0..node.shape[0] {
                            axpy(
                                &mut dp[i * pc..(i + 1) * pc],
                                &g[i * width + offset..i * width + offset + pc],
                                1.0,
                            );
                        }
                    });
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    with_grad!(p, |dp| { axpy(dp, &g[offset..offset + len], 1.0) });
                    offset += len;
                }
            }
            Op::GatherRows(a, idx) => with_grad!(*a, |da| {
                let c = node.shape[1];
                for (r, &src) in idx.iter().enumerate() {
                    axpy(&mut da[src * c..(src + 1) * c], &g[r * c..(r + 1) * c], 1.0);
                }
            }),
            Op::ScatterAddRows(a, idx) => with_grad!(*a, |da| {
                let c = node.shape[1];
                for (r, &dst) in idx.iter().enumerate() {
                    axpy(&mut da[r * c..(r + 1) * c], &g[dst * c..(dst + 1) * c], 1.0);
                }
            }),
            Op::SumAll(a) => with_grad!(*a, |da| {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Nll(a, targets, keep, count) => with_grad!(*a, |da| {
                let c = self.shape(*a)[1];
                let w = -g[0] / *count as f64;
                for (r, &t) in targets.iter().enumerate() {
                    if keep[r] {
                        da[r * c + t] += w;
                    }
                }
            }),
        }
        Ok(())
    }
}

fn axpy(acc: &mut [f64], x: &[f64], a: f64) {
    for (d, v) in acc.iter_mut().zip(x) {
        *d += a * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trainable(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap().with_grad()
    }

    #[test]
    fn sum_gives_ones() {
        let x = trainable(&[3], &[1., 2., 3.]);
        let mut tape = Tape::new();
        let v = tape.input(&x);
        let loss = tape.sum(v);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(v).unwrap(), &[1., 1., 1.]);
    }

    #[test]
    fn square_gives_2x_and_accumulates() {
        let x = trainable(&[3], &[1., -2., 0.5]);
        let mut tape = Tape::new();
        let v = tape.input(&x);
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(v).unwrap(), &[2., -4., 1.]);
    }

    #[test]
    fn consumed_tape_rejects_second_backward() {
        let x = trainable(&[1], &[1.]);
        let mut tape = Tape::new();
        let v = tape.input(&x);
        let loss = tape.sum(v);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let v = tape.input(&trainable(&[2], &[1., 2.]));
        assert!(tape.backward(v).is_err());
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![1, 1], vec![3.0]).unwrap()).unwrap();
        let mut tape = Tape::with_params(&store);
        let a = tape.param(w);
        let b = tape.param(w);
        assert_eq!(a, b);
        let p = tape.matmul(a, b).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(w).unwrap(), &[6.0]);
    }

    #[test]
    fn all_masked_row_is_data_error() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::zeros(&[2, 2]));
        let err = tape.masked_softmax(v, &[true, false, false, false]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn nll_all_padding_is_error() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.nll(v, &[0, 1], &[false, false]), Err(Error::Data(_))));
    }

    /// Central-difference check of one op built by `f` on random inputs.
    fn check_op(shapes: &[&[usize]], seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                trainable(s, &(0..n).map(|_| rng.gen_range(-1.5..1.5)).collect::<Vec<_>>())
            })
            .collect();
        // random projection so the loss is sensitive to every output entry
        let eval = |inputs: &[Tensor]| -> (f64, Option<Vec<Vec<f64>>>, bool) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t)).collect();
            let out = f(&mut tape, &vars);
            let n = tape.value(out).len();
            let mut prng = ChaCha8Rng::seed_from_u64(99);
            let w: Vec<f64> = (0..n).map(|_| prng.gen_range(-1.0..1.0)).collect();
            let wv = tape.constant(Tensor::new(tape.shape(out).to_vec(), w).unwrap());
            let prod = tape.mul(out, wv).unwrap();
            let loss = tape.sum(prod);
            let val = tape.value(loss)[0];
            let g = tape.backward(loss).unwrap();
            (val, Some(vars.iter().map(|v| g.wrt(*v).unwrap().to_vec()).collect()), true)
        };
        let (_, analytic, _) = eval(&inputs);
        let analytic = analytic.unwrap();
        let h = 1e-6;
        for (k, t) in inputs.iter().enumerate() {
            for i in 0..t.numel() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let a = analytic[k][i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-6, "input {k} entry {i}: analytic {a} fd {fd} rel {rel}");
            }
        }
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        for seed in 0..3 {
            check_op(&[&[3, 4], &[4, 2]], seed, |t, v| t.matmul(v[0], v[1]).unwrap());
            check_op(&[&[2, 2, 3], &[3, 2]], seed, |t, v| t.matmul(v[0], v[1]).unwrap());
            check_op(&[&[2, 3], &[2, 3]], seed, |t, v| t.add(v[0], v[1]).unwrap());
            check_op(&[&[2, 3], &[3]], seed, |t, v| t.add_row(v[0], v[1]).unwrap());
            check_op(&[&[2, 3], &[2, 3]], seed, |t, v| t.mul(v[0], v[1]).unwrap());
            check_op(&[&[5]], seed, |t, v| t.scale(v[0], -2.5));
            check_op(&[&[2, 3]], seed, |t, v| t.sigmoid(v[0]));
            check_op(&[&[2, 3]], seed, |t, v| t.softmax(v[0], 1).unwrap());
            check_op(&[&[2, 3]], seed, |t, v| t.softmax(v[0], 0).unwrap());
            check_op(&[&[2, 3]], seed, |t, v| {
                t.masked_softmax(v[0], &[true, false, true, true, true, false]).unwrap()
            });
            check_op(&[&[2, 4]], seed, |t, v| t.log_softmax(v[0]));
            check_op(&[&[3, 4], &[4], &[4]], seed, |t, v| {
                t.layer_norm(v[0], v[1], v[2], 1e-6).unwrap()
            });
            check_op(&[&[3, 2]], seed, |t, v| t.transpose(v[0]).unwrap());
            check_op(&[&[3, 4]], seed, |t, v| t.slice_cols(v[0], 1, 2).unwrap());
            check_op(&[&[3, 1], &[3, 2]], seed, |t, v| t.concat_cols(&[v[0], v[1]]).unwrap());
            check_op(&[&[1, 2], &[3, 2]], seed, |t, v| t.concat_rows(&[v[0], v[1]]).unwrap());
            check_op(&[&[3, 2]], seed, |t, v| t.gather_rows(v[0], &[2, 0, 2]).unwrap());
            check_op(&[&[3, 2]], seed, |t, v| t.scatter_add_rows(v[0], &[1, 1, 0], 2).unwrap());
            check_op(&[&[3, 4]], seed, |t, v| {
                let lp = t.log_softmax(v[0]);
                t.nll(lp, &[0, 3, 1], &[true, false, true]).unwrap()
            });
        }
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let x = trainable(&[4], &[-1., 2., -0.5, 0.25]);
        let mut tape = Tape::new();
        let v = tape.input(&x);
        let r = tape.relu(v);
        let loss = tape.sum(r);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(v).unwrap(), &[0., 1., 0., 1.]);
    }

    #[test]
    fn dropout_backward_uses_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = trainable(&[1000], &vec![1.0; 1000]);
        let mut tape = Tape::new();
        let v = tape.input(&x);
        let d = tape.dropout(v, 0.5, Mode::Train, &mut rng).unwrap();
        let out = tape.value(d).to_vec();
        let loss = tape.sum(d);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(v).unwrap(), out.as_slice());
    }
}
