//! Transformer decoder over the encoder's node states, plus the softmax
//! generator.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::encoder::EncoderVars;
use crate::error::{Error, Result};
use crate::nn::{
    causal_mask, multi_head_attention, positional_encoding, AttentionParams, Builder, Ctx,
    FeedForwardParams, LayerNormParams,
};
use crate::params::ParamId;
use crate::tape::Var;

/// Which encoder states the encoder–decoder attention reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttendMode {
    /// Textual node states only.
    #[default]
    Textual,
    /// Visual node states only.
    VisualOnly,
    /// Separate attentions over textual and visual states, contexts summed.
    Both,
}

impl FromStr for AttendMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "textual" => Ok(AttendMode::Textual),
            "visual" | "visual_only" => Ok(AttendMode::VisualOnly),
            "both" => Ok(AttendMode::Both),
            other => Err(Error::Config(format!(
                "unknown decoder attend mode `{other}` (textual|visual|both)"
            ))),
        }
    }
}

impl fmt::Display for AttendMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttendMode::Textual => "textual",
            AttendMode::VisualOnly => "visual",
            AttendMode::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub dropout: f64,
    pub attend: AttendMode,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            d_model: 128,
            d_ff: 256,
            n_heads: 4,
            n_layers: 4,
            dropout: 0.5,
            attend: AttendMode::Textual,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderLayerParams {
    pub self_attn: AttentionParams,
    pub self_ln: LayerNormParams,
    pub cross: AttentionParams,
    /// Second cross-attention, present only in [`AttendMode::Both`].
    pub cross_visual: Option<AttentionParams>,
    pub cross_ln: LayerNormParams,
    pub ffn: FeedForwardParams,
    pub ffn_ln: LayerNormParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderParams {
    pub embed: ParamId,
    pub layers: Vec<DecoderLayerParams>,
    pub generator_w: ParamId,
    pub generator_b: ParamId,
}

impl DecoderParams {
    pub(crate) fn build<R: Rng>(b: &mut Builder<'_, R>, cfg: &DecoderConfig, vocab: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let embed = b.embedding("dec.embed", vocab, d)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("dec.layer{l}");
            layers.push(DecoderLayerParams {
                self_attn: b.attention(&format!("{p}.self_attn"), d, false)?,
                self_ln: b.layer_norm(&format!("{p}.self_ln"), d)?,
                cross: b.attention(&format!("{p}.cross"), d, false)?,
                cross_visual: if cfg.attend == AttendMode::Both {
                    Some(b.attention(&format!("{p}.cross_visual"), d, false)?)
                } else {
                    None
                },
                cross_ln: b.layer_norm(&format!("{p}.cross_ln"), d)?,
                ffn: b.feed_forward(&format!("{p}.ffn"), d, cfg.d_ff)?,
                ffn_ln: b.layer_norm(&format!("{p}.ffn_ln"), d)?,
            });
        }
        Ok(DecoderParams {
            embed,
            layers,
            generator_w: b.matrix("dec.generator.w", d, vocab)?,
            generator_b: b.zeros("dec.generator.b", vocab)?,
        })
    }
}

/// Top-layer decoder states `[t × d_model]` for a teacher-forced prefix.
/// Row `k` depends only on `prefix[..=k]`.
pub fn decode_states(
    ctx: &mut Ctx<'_, '_>,
    p: &DecoderParams,
    cfg: &DecoderConfig,
    prefix: &[usize],
    enc: &EncoderVars,
) -> Result<Var> {
    if prefix.is_empty() {
        return Err(Error::Usage("decoder prefix must not be empty".into()));
    }
    let n_vis = ctx.tape.shape(enc.h_o)[0];
    if cfg.attend == AttendMode::VisualOnly && n_vis == 0 {
        return Err(Error::Data(
            "decoder attends visual nodes only but the graph has none".into(),
        ));
    }
    let table = ctx.tape.param(p.embed);
    let (rows, d) = (ctx.tape.shape(table)[0], ctx.tape.shape(table)[1]);
    if let Some(&bad) = prefix.iter().find(|&&t| t >= rows) {
        return Err(Error::Usage(format!("target id {bad} outside vocabulary of {rows}")));
    }
    let emb = ctx.tape.gather_rows(table, prefix)?;
    let pe = ctx.tape.constant(positional_encoding(prefix.len(), d));
    let s0 = ctx.tape.add(emb, pe)?;
    let mut s = ctx.drop(s0)?;
    let mask = causal_mask(prefix.len());
    for lp in &p.layers {
        let e = multi_head_attention(ctx, s, s, &lp.self_attn, cfg.n_heads, Some(&mask))?;
        let e = ctx.add_norm(s, e.out, &lp.self_ln)?;
        let memory = match cfg.attend {
            AttendMode::VisualOnly => enc.h_o,
            _ => enc.h_x,
        };
        let mut t = multi_head_attention(ctx, e, memory, &lp.cross, cfg.n_heads, None)?.out;
        // Object-free graphs contribute no visual context.
        if let (Some(cv), true) = (&lp.cross_visual, n_vis > 0) {
            let tv = multi_head_attention(ctx, e, enc.h_o, cv, cfg.n_heads, None)?.out;
            t = ctx.tape.add(t, tv)?;
        }
        let t = ctx.add_norm(e, t, &lp.cross_ln)?;
        let f = ctx.feed_forward(t, &lp.ffn)?;
        s = ctx.add_norm(t, f, &lp.ffn_ln)?;
    }
    Ok(s)
}

/// Generator logits `S W + b`, one row per decoder position.
pub fn generator_logits(ctx: &mut Ctx<'_, '_>, p: &DecoderParams, states: Var) -> Result<Var> {
    ctx.affine(states, p.generator_w, p.generator_b)
}

/// Probability vector over the target vocabulary for a single state row.
pub fn generate_distribution(ctx: &mut Ctx<'_, '_>, p: &DecoderParams, state: Var) -> Result<Vec<f64>> {
    let logits = generator_logits(ctx, p, state)?;
    let probs = ctx.tape.softmax(logits, 1)?;
    Ok(ctx.tape.value(probs).to_vec())
}
