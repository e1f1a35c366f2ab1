//! The full encoder–decoder: parameter construction, teacher-forced loss and
//! parameter accounting.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{self, DecoderConfig, DecoderParams};
use crate::encoder::{self, EncoderConfig, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::graph::{Example, MultiModalGraph};
use crate::nn::{Builder, Ctx};
use crate::params::ParamStore;
use crate::tape::Var;
use crate::tensor::Mode;
use crate::training::Batch;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.d_model != self.decoder.d_model {
            return Err(Error::Config(format!(
                "encoder width {} != decoder width {}",
                self.encoder.d_model, self.decoder.d_model
            )));
        }
        if self.src_vocab < 4 || self.tgt_vocab < 4 {
            return Err(Error::Config("vocabularies must include the 4 reserved ids".into()));
        }
        Ok(())
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl Model {
    /// Builds a freshly initialised model. Initialisation is a pure function
    /// of `(config, seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let encoder = EncoderParams::build(&mut b, &config.encoder, config.src_vocab)?;
        let decoder = DecoderParams::build(&mut b, &config.decoder, config.tgt_vocab)?;
        Ok(Model {
            config,
            store,
            encoder,
            decoder,
        })
    }

    pub fn encode(&self, ctx: &mut Ctx<'_, '_>, graph: &MultiModalGraph) -> Result<EncoderVars> {
        if ctx.mode == Mode::Train {
            ctx.dropout = self.config.encoder.dropout;
        }
        encoder::encode(ctx, &self.encoder, &self.config.encoder, graph)
    }

    pub fn decode_states(&self, ctx: &mut Ctx<'_, '_>, prefix: &[usize], enc: &EncoderVars) -> Result<Var> {
        if ctx.mode == Mode::Train {
            ctx.dropout = self.config.decoder.dropout;
        }
        decoder::decode_states(ctx, &self.decoder, &self.config.decoder, prefix, enc)
    }

    /// Per-position log-probabilities `[t × |V|]` for a decoder input prefix.
    pub fn log_probs(&self, ctx: &mut Ctx<'_, '_>, prefix: &[usize], enc: &EncoderVars) -> Result<Var> {
        let s = self.decode_states(ctx, prefix, enc)?;
        let logits = decoder::generator_logits(ctx, &self.decoder, s)?;
        Ok(ctx.tape.log_softmax(logits))
    }

    /// Mean token NLL of a padded batch under teacher forcing.
    pub fn batch_loss(&self, ctx: &mut Ctx<'_, '_>, batch: &Batch, examples: &[Example]) -> Result<Var> {
        let mut rows = Vec::with_capacity(batch.indices.len());
        for (b, &idx) in batch.indices.iter().enumerate() {
            let enc = self.encode(ctx, &examples[idx].graph)?;
            rows.push(self.log_probs(ctx, &batch.inputs[b], &enc)?);
        }
        let all = if rows.len() == 1 {
            rows[0]
        } else {
            ctx.tape.concat_rows(&rows)?
        };
        let targets: Vec<usize> = batch.targets.iter().flatten().copied().collect();
        let keep: Vec<bool> = batch.mask.iter().flatten().copied().collect();
        ctx.tape.nll(all, &targets, &keep)
    }

    pub fn param_report(&self) -> ParamReport {
        ParamReport {
            groups: self.store.group_counts(),
            total: self.store.num_elements(),
        }
    }
}

/// Trainable scalar counts, total and per parameter group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub groups: BTreeMap<String, usize>,
    pub total: usize,
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (g, n) in &self.groups {
            writeln!(f, "{g:<28} {n:>10}")?;
        }
        write!(f, "{:<28} {:>10}", "total", self.total)
    }
}
