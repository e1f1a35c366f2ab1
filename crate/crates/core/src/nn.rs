//! Layer building blocks shared by the encoder and decoder.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Mode, Tensor, LAYER_NORM_EPS};

/// Per-forward-pass state: the tape plus dropout configuration.
pub struct Ctx<'a, 'p> {
    pub tape: &'a mut Tape<'p>,
    pub mode: Mode,
    pub dropout: f64,
    rng: Option<&'a mut dyn RngCore>,
}

impl<'a, 'p> Ctx<'a, 'p> {
    pub fn eval(tape: &'a mut Tape<'p>) -> Self {
        Ctx {
            tape,
            mode: Mode::Eval,
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(tape: &'a mut Tape<'p>, dropout: f64, rng: &'a mut dyn RngCore) -> Self {
        Ctx {
            tape,
            mode: Mode::Train,
            dropout,
            rng: Some(rng),
        }
    }

    pub fn drop(&mut self, x: Var) -> Result<Var> {
        if self.mode == Mode::Eval || self.dropout == 0.0 {
            return Ok(x);
        }
        let rng = self
            .rng
            .as_deref_mut()
            .ok_or_else(|| Error::Usage("train mode requires a random generator".into()))?;
        self.tape.dropout(x, self.dropout, self.mode, rng)
    }

    pub fn linear(&mut self, x: Var, w: ParamId) -> Result<Var> {
        let w = self.tape.param(w);
        self.tape.matmul(x, w)
    }

    pub fn affine(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let y = self.linear(x, w)?;
        let b = self.tape.param(b);
        self.tape.add_row(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, p: &LayerNormParams) -> Result<Var> {
        let g = self.tape.param(p.gain);
        let b = self.tape.param(p.bias);
        self.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    /// Post-norm residual block: `LN(x + dropout(sub))`.
    pub fn add_norm(&mut self, x: Var, sub: Var, ln: &LayerNormParams) -> Result<Var> {
        let sub = self.drop(sub)?;
        let sum = self.tape.add(x, sub)?;
        self.layer_norm(sum, ln)
    }

    /// Position-wise `relu(x W1 + b1) W2 + b2`.
    pub fn feed_forward(&mut self, x: Var, p: &FeedForwardParams) -> Result<Var> {
        let h = self.affine(x, p.w1, p.b1)?;
        let h = self.tape.relu(h);
        self.affine(h, p.w2, p.b2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Attention projections. The simplified variant has no value or output
/// projection: heads read raw slices of the input and are concatenated as is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: Option<ParamId>,
    pub wo: Option<ParamId>,
}

impl AttentionParams {
    pub fn is_simplified(&self) -> bool {
        self.wv.is_none() && self.wo.is_none()
    }
}

pub struct AttentionOutput {
    pub out: Var,
    /// Per-head `[n_query × n_key]` weights after softmax (before dropout).
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention of `query` rows over `memory`
/// rows. `mask`, if given, is a row-major `[n_query × n_key]` keep-mask.
pub fn multi_head_attention(
    ctx: &mut Ctx<'_, '_>,
    query: Var,
    memory: Var,
    p: &AttentionParams,
    n_heads: usize,
    mask: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let q = ctx.linear(query, p.wq)?;
    let k = ctx.linear(memory, p.wk)?;
    let v = match p.wv {
        Some(w) => ctx.linear(memory, w)?,
        None => memory,
    };
    let (nq, d) = (ctx.tape.shape(q)[0], ctx.tape.shape(q)[1]);
    let nk = ctx.tape.shape(k)[0];
    if n_heads == 0 || d % n_heads != 0 || ctx.tape.shape(v)[1] != d {
        return Err(Error::Config(format!(
            "model width {d} not divisible into {n_heads} heads"
        )));
    }
    if nq > 0 && nk == 0 {
        return Err(Error::Data("attention over an empty memory".into()));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = ctx.tape.slice_cols(q, h * dh, dh)?;
        let kh = ctx.tape.slice_cols(k, h * dh, dh)?;
        let kh_t = ctx.tape.transpose(kh)?;
        let vh = ctx.tape.slice_cols(v, h * dh, dh)?;
        let scores = ctx.tape.matmul(qh, kh_t)?;
        let scores = ctx.tape.scale(scores, scale);
        let w = match mask {
            Some(m) => ctx.tape.masked_softmax(scores, m)?,
            None => ctx.tape.softmax(scores, 1)?,
        };
        weights.push(w);
        let w = ctx.drop(w)?;
        heads.push(ctx.tape.matmul(w, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        ctx.tape.concat_cols(&heads)?
    };
    let out = match p.wo {
        Some(w) => ctx.linear(cat, w)?,
        None => cat,
    };
    Ok(AttentionOutput { out, weights })
}

/// Lower-triangular keep-mask for `n` positions.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|i| i % n <= i / n).collect()
}

/// Sinusoidal position encodings `[n × d]`: even columns `sin(pos / 10000^(i/d))`,
/// odd columns the matching cosine.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let pair = (i / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![n, d], data).expect("positional encoding shape")
}

/// Uniform Glorot initialisation for a `fan_in × fan_out` matrix.
pub fn xavier<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("xavier shape")
}

/// Embedding table with entries drawn from `N(0, d^-1/2)`.
pub fn embedding<R: Rng + ?Sized>(rng: &mut R, rows: usize, d: usize) -> Tensor {
    let normal = Normal::new(0.0, (d as f64).powf(-0.5)).expect("valid std");
    let data = (0..rows * d).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![rows, d], data).expect("embedding shape")
}

/// Helpers for registering the standard parameter blocks.
pub(crate) struct Builder<'s, R: Rng> {
    pub store: &'s mut ParamStore,
    pub rng: R,
}

impl<R: Rng> Builder<'_, R> {
    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let t = xavier(&mut self.rng, rows, cols);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, n: usize) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(&[n]))
    }

    pub fn embedding(&mut self, name: &str, rows: usize, d: usize) -> Result<ParamId> {
        let t = embedding(&mut self.rng, rows, d);
        self.store.add(name, t)
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) -> Result<LayerNormParams> {
        let gain = self
            .store
            .add(format!("{prefix}.gain"), Tensor::new(vec![d], vec![1.0; d])?)?;
        let bias = self.zeros(&format!("{prefix}.bias"), d)?;
        Ok(LayerNormParams { gain, bias })
    }

    pub fn feed_forward(&mut self, prefix: &str, d: usize, d_ff: usize) -> Result<FeedForwardParams> {
        Ok(FeedForwardParams {
            w1: self.matrix(&format!("{prefix}.w1"), d, d_ff)?,
            b1: self.zeros(&format!("{prefix}.b1"), d_ff)?,
            w2: self.matrix(&format!("{prefix}.w2"), d_ff, d)?,
            b2: self.zeros(&format!("{prefix}.b2"), d)?,
        })
    }

    pub fn attention(&mut self, prefix: &str, d: usize, simplified: bool) -> Result<AttentionParams> {
        let wq = self.matrix(&format!("{prefix}.wq"), d, d)?;
        let wk = self.matrix(&format!("{prefix}.wk"), d, d)?;
        let (wv, wo) = if simplified {
            (None, None)
        } else {
            (
                Some(self.matrix(&format!("{prefix}.wv"), d, d)?),
                Some(self.matrix(&format!("{prefix}.wo"), d, d)?),
            )
        };
        Ok(AttentionParams { wq, wk, wv, wo })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_is_sin0_cos0() {
        let pe = positional_encoding(1, 6);
        assert_eq!(pe.data(), &[0., 1., 0., 1., 0., 1.]);
    }

    #[test]
    fn causal_mask_layout() {
        assert_eq!(
            causal_mask(3),
            vec![true, false, false, true, true, false, true, true, true]
        );
    }
}
