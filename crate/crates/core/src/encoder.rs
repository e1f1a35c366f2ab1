//! Embedding layer and the stack of graph-based multi-modal fusion layers.
//!
//! Each fusion layer runs intra-modal self-attention per modality (visual
//! nodes use the simplified variant without value/output projections), then
//! cross-modal gated aggregation over inter-modal edges, then position-wise
//! feed-forward networks. Every sub-block is wrapped as `LN(x + dropout(f(x)))`.
//! The last layer has no visual feed-forward block.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{MultiModalGraph, FEATURE_DIM};
use crate::nn::{
    multi_head_attention, positional_encoding, AttentionParams, Builder, Ctx, FeedForwardParams,
    LayerNormParams,
};
use crate::params::ParamId;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub dropout: f64,
    pub visual_feat_dim: usize,
    /// Share one set of per-layer weights between the two modalities.
    pub unified_parameters: bool,
    /// When false the gated cross-modal step is skipped entirely.
    pub inter_modal_fusion: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 128,
            d_ff: 256,
            n_heads: 4,
            n_layers: 3,
            dropout: 0.5,
            visual_feat_dim: FEATURE_DIM,
            unified_parameters: false,
            inter_modal_fusion: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateParams {
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
    pub w4: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderLayerParams {
    pub text_attn: AttentionParams,
    pub text_attn_ln: LayerNormParams,
    pub visual_attn: AttentionParams,
    pub visual_attn_ln: LayerNormParams,
    /// Absent when inter-modal fusion is disabled.
    pub gate: Option<GateParams>,
    pub text_fuse_ln: LayerNormParams,
    pub visual_fuse_ln: LayerNormParams,
    pub text_ffn: FeedForwardParams,
    pub text_ffn_ln: LayerNormParams,
    /// Absent on the last layer.
    pub visual_ffn: Option<(FeedForwardParams, LayerNormParams)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderParams {
    pub embed: ParamId,
    /// `feature_dim → d_ff → d_model` projection of region features.
    pub visual_mlp: FeedForwardParams,
    pub layers: Vec<EncoderLayerParams>,
}

impl EncoderParams {
    pub(crate) fn build<R: Rng>(b: &mut Builder<'_, R>, cfg: &EncoderConfig, vocab: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let embed = b.embedding("enc.embed", vocab, d)?;
        let visual_mlp = FeedForwardParams {
            w1: b.matrix("enc.visual_mlp.w1", cfg.visual_feat_dim, cfg.d_ff)?,
            b1: b.zeros("enc.visual_mlp.b1", cfg.d_ff)?,
            w2: b.matrix("enc.visual_mlp.w2", cfg.d_ff, d)?,
            b2: b.zeros("enc.visual_mlp.b2", d)?,
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let last = l + 1 == cfg.n_layers;
            let t = format!("enc.layer{l}.text");
            let v = format!("enc.layer{l}.visual");
            let text_attn = b.attention(&format!("{t}.attn"), d, false)?;
            let text_attn_ln = b.layer_norm(&format!("{t}.attn_ln"), d)?;
            let text_fuse_ln = b.layer_norm(&format!("{t}.fuse_ln"), d)?;
            let text_ffn = b.feed_forward(&format!("{t}.ffn"), d, cfg.d_ff)?;
            let text_ffn_ln = b.layer_norm(&format!("{t}.ffn_ln"), d)?;
            let g = format!("enc.layer{l}.gate");
            let layer = if cfg.unified_parameters {
                let gate = if cfg.inter_modal_fusion {
                    let w1 = b.matrix(&format!("{g}.w1"), d, d)?;
                    let w2 = b.matrix(&format!("{g}.w2"), d, d)?;
                    Some(GateParams { w1, w2, w3: w1, w4: w2 })
                } else {
                    None
                };
                EncoderLayerParams {
                    text_attn,
                    text_attn_ln,
                    visual_attn: text_attn,
                    visual_attn_ln: text_attn_ln,
                    gate,
                    text_fuse_ln,
                    visual_fuse_ln: text_fuse_ln,
                    text_ffn,
                    text_ffn_ln,
                    visual_ffn: (!last).then_some((text_ffn, text_ffn_ln)),
                }
            } else {
                let visual_attn = b.attention(&format!("{v}.attn"), d, true)?;
                let visual_attn_ln = b.layer_norm(&format!("{v}.attn_ln"), d)?;
                let gate = if cfg.inter_modal_fusion {
                    Some(GateParams {
                        w1: b.matrix(&format!("{g}.w1"), d, d)?,
                        w2: b.matrix(&format!("{g}.w2"), d, d)?,
                        w3: b.matrix(&format!("{g}.w3"), d, d)?,
                        w4: b.matrix(&format!("{g}.w4"), d, d)?,
                    })
                } else {
                    None
                };
                let visual_fuse_ln = b.layer_norm(&format!("{v}.fuse_ln"), d)?;
                let visual_ffn = if last {
                    None
                } else {
                    Some((
                        b.feed_forward(&format!("{v}.ffn"), d, cfg.d_ff)?,
                        b.layer_norm(&format!("{v}.ffn_ln"), d)?,
                    ))
                };
                EncoderLayerParams {
                    text_attn,
                    text_attn_ln,
                    visual_attn,
                    visual_attn_ln,
                    gate,
                    text_fuse_ln,
                    visual_fuse_ln,
                    text_ffn,
                    text_ffn_ln,
                    visual_ffn,
                }
            };
            layers.push(layer);
        }
        Ok(EncoderParams {
            embed,
            visual_mlp,
            layers,
        })
    }
}

/// Tape handles for one fusion layer's intermediates.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub text_attn_weights: Vec<Var>,
    pub visual_attn_weights: Vec<Var>,
    /// Output of the simplified visual attention, before residual and norm.
    pub visual_attn_out: Var,
    pub c_x: Var,
    pub c_o: Var,
    /// Per-edge text-side gates `[n_edges × d_model]`.
    pub alpha: Option<Var>,
    /// Per-edge visual-side gates `[n_edges × d_model]`.
    pub beta: Option<Var>,
    pub m_x: Var,
    pub m_o: Var,
    pub h_x: Var,
    pub h_o: Var,
}

#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub h_x: Var,
    pub h_o: Var,
    pub layers: Vec<LayerVars>,
}

/// Materialised per-layer intermediates, for introspection dumps.
#[derive(Debug, Clone, Serialize)]
pub struct LayerTrace {
    pub text_attn_weights: Vec<Tensor>,
    pub visual_attn_weights: Vec<Tensor>,
    pub visual_attn_out: Tensor,
    pub c_x: Tensor,
    pub c_o: Tensor,
    pub alpha: Option<Tensor>,
    pub beta: Option<Tensor>,
    pub m_x: Tensor,
    pub m_o: Tensor,
}

#[derive(Debug, Clone, Serialize)]
pub struct EncoderOutput {
    pub h_x: Tensor,
    pub h_o: Tensor,
    pub layers: Vec<LayerTrace>,
}

impl EncoderVars {
    pub fn materialize(&self, tape: &Tape<'_>) -> EncoderOutput {
        let all = |vs: &[Var]| vs.iter().map(|&v| tape.tensor(v)).collect();
        EncoderOutput {
            h_x: tape.tensor(self.h_x),
            h_o: tape.tensor(self.h_o),
            layers: self
                .layers
                .iter()
                .map(|l| LayerTrace {
                    text_attn_weights: all(&l.text_attn_weights),
                    visual_attn_weights: all(&l.visual_attn_weights),
                    visual_attn_out: tape.tensor(l.visual_attn_out),
                    c_x: tape.tensor(l.c_x),
                    c_o: tape.tensor(l.c_o),
                    alpha: l.alpha.map(|v| tape.tensor(v)),
                    beta: l.beta.map(|v| tape.tensor(v)),
                    m_x: tape.tensor(l.m_x),
                    m_o: tape.tensor(l.m_o),
                })
                .collect(),
        }
    }
}

/// Word embedding plus sinusoidal position encoding, then dropout.
pub fn embed_textual(ctx: &mut Ctx<'_, '_>, p: &EncoderParams, tokens: &[usize]) -> Result<Var> {
    let table = ctx.tape.param(p.embed);
    let (rows, d) = (ctx.tape.shape(table)[0], ctx.tape.shape(table)[1]);
    if let Some(&bad) = tokens.iter().find(|&&t| t >= rows) {
        return Err(Error::Usage(format!("token id {bad} outside vocabulary of {rows}")));
    }
    let emb = ctx.tape.gather_rows(table, tokens)?;
    let pe = ctx.tape.constant(positional_encoding(tokens.len(), d));
    let sum = ctx.tape.add(emb, pe)?;
    ctx.drop(sum)
}

/// Projects region features through the ReLU MLP. No position encoding.
pub fn embed_visual(ctx: &mut Ctx<'_, '_>, p: &EncoderParams, graph: &MultiModalGraph) -> Result<Var> {
    let w1 = ctx.tape.param(p.visual_mlp.w1);
    let expected = ctx.tape.shape(w1)[0];
    if graph.feature_dim() != expected {
        return Err(Error::Data(format!(
            "visual feature width {} != configured {expected}",
            graph.feature_dim()
        )));
    }
    let feats = ctx.tape.constant(Tensor::new(
        vec![graph.num_visual(), graph.feature_dim()],
        graph.visual_features().to_vec(),
    )?);
    let h = ctx.feed_forward(feats, &p.visual_mlp)?;
    ctx.drop(h)
}

/// Self-attention over visual nodes without value or output projections.
pub fn simplified_visual_attention(
    ctx: &mut Ctx<'_, '_>,
    h_o: Var,
    p: &AttentionParams,
    n_heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let out = multi_head_attention(ctx, h_o, h_o, p, n_heads, None)?;
    Ok((out.out, out.weights))
}

/// Gated neighbour sum: row `i` of the result is
/// `Σ_{(i,j)} sigmoid(C_self[i] W_self + C_other[j] W_other) ⊙ C_other[j]`.
/// Returns the sum and the per-edge gates.
fn gated_sum(
    ctx: &mut Ctx<'_, '_>,
    c_self: Var,
    c_other: Var,
    self_idx: &[usize],
    other_idx: &[usize],
    w_self: ParamId,
    w_other: ParamId,
) -> Result<(Var, Var)> {
    let n_self = ctx.tape.shape(c_self)[0];
    let a = ctx.linear(c_self, w_self)?;
    let b = ctx.linear(c_other, w_other)?;
    let a = ctx.tape.gather_rows(a, self_idx)?;
    let b = ctx.tape.gather_rows(b, other_idx)?;
    let pre = ctx.tape.add(a, b)?;
    let gate = ctx.tape.sigmoid(pre);
    let vals = ctx.tape.gather_rows(c_other, other_idx)?;
    let contrib = ctx.tape.mul(gate, vals)?;
    let sum = ctx.tape.scatter_add_rows(contrib, self_idx, n_self)?;
    Ok((sum, gate))
}

fn edge_lists(graph: &MultiModalGraph) -> (Vec<usize>, Vec<usize>) {
    graph.edges().iter().copied().unzip()
}

/// Text side of cross-modal gating: `M_x[i] = Σ_{j∈A(i)} α_ij ⊙ C_o[j]`,
/// `α_ij = sigmoid(C_x[i] W1 + C_o[j] W2)`. Returns `(M_x, α)`.
pub fn cross_modal_gate_text(
    ctx: &mut Ctx<'_, '_>,
    c_x: Var,
    c_o: Var,
    graph: &MultiModalGraph,
    w1: ParamId,
    w2: ParamId,
) -> Result<(Var, Var)> {
    let (t, o) = edge_lists(graph);
    gated_sum(ctx, c_x, c_o, &t, &o, w1, w2)
}

/// Visual side: `M_o[j] = Σ_{i∈A(j)} β_ji ⊙ C_x[i]`,
/// `β_ji = sigmoid(C_o[j] W3 + C_x[i] W4)`. Returns `(M_o, β)`.
pub fn cross_modal_gate_visual(
    ctx: &mut Ctx<'_, '_>,
    c_o: Var,
    c_x: Var,
    graph: &MultiModalGraph,
    w3: ParamId,
    w4: ParamId,
) -> Result<(Var, Var)> {
    let (t, o) = edge_lists(graph);
    gated_sum(ctx, c_o, c_x, &o, &t, w3, w4)
}

/// One fusion layer. `is_last` drops the visual feed-forward block, leaving
/// `H_o = M_o`.
pub fn fusion_layer(
    ctx: &mut Ctx<'_, '_>,
    lp: &EncoderLayerParams,
    n_heads: usize,
    h_x: Var,
    h_o: Var,
    graph: &MultiModalGraph,
    is_last: bool,
) -> Result<LayerVars> {
    // Step 1: intra-modal fusion.
    let text = multi_head_attention(ctx, h_x, h_x, &lp.text_attn, n_heads, None)?;
    let c_x = ctx.add_norm(h_x, text.out, &lp.text_attn_ln)?;
    let (v_out, v_weights) = simplified_or_full(ctx, h_o, &lp.visual_attn, n_heads)?;
    let c_o = ctx.add_norm(h_o, v_out, &lp.visual_attn_ln)?;

    // Step 2: inter-modal fusion.
    let (m_x, m_o, alpha, beta) = match &lp.gate {
        Some(g) => {
            let (gx, alpha) = cross_modal_gate_text(ctx, c_x, c_o, graph, g.w1, g.w2)?;
            let (go, beta) = cross_modal_gate_visual(ctx, c_o, c_x, graph, g.w3, g.w4)?;
            let m_x = ctx.add_norm(c_x, gx, &lp.text_fuse_ln)?;
            let m_o = ctx.add_norm(c_o, go, &lp.visual_fuse_ln)?;
            (m_x, m_o, Some(alpha), Some(beta))
        }
        None => {
            let m_x = ctx.layer_norm(c_x, &lp.text_fuse_ln)?;
            let m_o = ctx.layer_norm(c_o, &lp.visual_fuse_ln)?;
            (m_x, m_o, None, None)
        }
    };

    let f = ctx.feed_forward(m_x, &lp.text_ffn)?;
    let new_h_x = ctx.add_norm(m_x, f, &lp.text_ffn_ln)?;
    let new_h_o = match (&lp.visual_ffn, is_last) {
        (Some((ffn, ln)), false) => {
            let f = ctx.feed_forward(m_o, ffn)?;
            ctx.add_norm(m_o, f, ln)?
        }
        _ => m_o,
    };
    Ok(LayerVars {
        text_attn_weights: text.weights,
        visual_attn_weights: v_weights,
        visual_attn_out: v_out,
        c_x,
        c_o,
        alpha,
        beta,
        m_x,
        m_o,
        h_x: new_h_x,
        h_o: new_h_o,
    })
}

fn simplified_or_full(
    ctx: &mut Ctx<'_, '_>,
    h_o: Var,
    p: &AttentionParams,
    n_heads: usize,
) -> Result<(Var, Vec<Var>)> {
    if p.is_simplified() {
        simplified_visual_attention(ctx, h_o, p, n_heads)
    } else {
        let out = multi_head_attention(ctx, h_o, h_o, p, n_heads, None)?;
        Ok((out.out, out.weights))
    }
}

/// Embedding layer followed by every fusion layer.
pub fn encode(
    ctx: &mut Ctx<'_, '_>,
    p: &EncoderParams,
    cfg: &EncoderConfig,
    graph: &MultiModalGraph,
) -> Result<EncoderVars> {
    let mut h_x = embed_textual(ctx, p, graph.textual())?;
    let mut h_o = embed_visual(ctx, p, graph)?;
    let mut layers = Vec::with_capacity(p.layers.len());
    for (l, lp) in p.layers.iter().enumerate() {
        let out = fusion_layer(ctx, lp, cfg.n_heads, h_x, h_o, graph, l + 1 == p.layers.len())?;
        h_x = out.h_x;
        h_o = out.h_o;
        layers.push(out);
    }
    Ok(EncoderVars { h_x, h_o, layers })
}
