//! Objective, optimizer, batching and the training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Example;
use crate::model::Model;
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::tape::{Gradients, Tape};
use crate::tensor::Tensor;
use crate::vocab::PAD;

/// Mean negative log-likelihood over the kept positions of a `[n × |V|]`
/// matrix of log-probabilities.
pub fn nll_loss(logprobs: &Tensor, targets: &[usize], keep: &[bool]) -> Result<f64> {
    let mut tape = Tape::new();
    let lp = tape.constant(logprobs.clone());
    let loss = tape.nll(lp, targets, keep)?;
    Ok(tape.value(loss)[0])
}

/// Inverse-square-root schedule with linear warmup.
pub fn lr_schedule(step: u64, d_model: usize, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        OptimizerState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn matches(&self, store: &ParamStore) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|((_, _, t), (m, v))| m.len() == t.numel() && v.len() == t.numel())
    }
}

/// One bias-corrected Adam update. Parameters absent from `grads` are
/// treated as having a zero gradient.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if !state.matches(store) {
        return Err(Error::Usage("optimizer state does not match the parameter set".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let g = grads.param(id);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = store.get_mut(id).data_mut();
        for k in 0..p.len() {
            let gk = g.map_or(0.0, |g| g[k]);
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// A group of examples with PAD-filled teacher-forcing matrices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// Decoder inputs, `BOS y_1 … y_n` padded to a common length.
    pub inputs: Vec<Vec<usize>>,
    /// Next-token targets, `y_1 … y_n EOS` padded the same way.
    pub targets: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    /// Unpadded source plus target tokens.
    pub tokens: usize,
}

impl Batch {
    pub fn new(indices: Vec<usize>, examples: &[Example]) -> Result<Self> {
        let mut tokens = 0;
        let mut width = 0;
        for &i in &indices {
            let ex = examples
                .get(i)
                .ok_or_else(|| Error::Usage(format!("example index {i} out of range")))?;
            if ex.target.len() < 2 {
                return Err(Error::Data(format!("example {i}: target needs BOS and EOS")));
            }
            tokens += example_tokens(ex);
            width = width.max(ex.target.len() - 1);
        }
        let (mut inputs, mut targets, mut mask) = (vec![], vec![], vec![]);
        for &i in &indices {
            let t = &examples[i].target;
            let n = t.len() - 1;
            let mut inp = t[..n].to_vec();
            let mut out = t[1..].to_vec();
            inp.resize(width, PAD);
            out.resize(width, PAD);
            inputs.push(inp);
            targets.push(out);
            mask.push((0..width).map(|k| k < n).collect());
        }
        Ok(Batch {
            indices,
            inputs,
            targets,
            mask,
            tokens,
        })
    }

    pub fn target_tokens(&self) -> usize {
        self.mask.iter().flatten().filter(|&&k| k).count()
    }
}

fn example_tokens(ex: &Example) -> usize {
    ex.graph.num_textual() + ex.target.len().saturating_sub(1)
}

/// Length-bucketed batches under a token cap. Examples are shuffled, sorted
/// by length, packed greedily, and the batch order is shuffled again.
pub fn make_batches(examples: &[Example], batch_tokens: usize, seed: u64) -> Result<Vec<Batch>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| (examples[i].target.len(), examples[i].graph.num_textual()));
    let mut groups: Vec<Vec<usize>> = vec![];
    let mut cur: Vec<usize> = vec![];
    let mut cur_tokens = 0;
    for i in order {
        let n = example_tokens(&examples[i]);
        if !cur.is_empty() && cur_tokens + n > batch_tokens {
            groups.push(std::mem::take(&mut cur));
            cur_tokens = 0;
        }
        cur.push(i);
        cur_tokens += n;
    }
    if !cur.is_empty() {
        groups.push(cur);
    }
    groups.shuffle(&mut rng);
    groups.into_iter().map(|g| Batch::new(g, examples)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_tokens: usize,
    pub warmup_steps: u64,
    /// Multiplier on the scheduled learning rate.
    pub lr_factor: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub max_steps: u64,
    pub checkpoint_every: u64,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_tokens: 2000,
            warmup_steps: 4000,
            lr_factor: 1.0,
            adam: AdamConfig::default(),
            seed: 1,
            max_steps: 10_000,
            checkpoint_every: 1000,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if self.batch_tokens == 0 {
            return Err(Error::Config("batch_tokens must be positive".into()));
        }
        if !(self.lr_factor > 0.0) {
            return Err(Error::Config("lr_factor must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn learning_rate(&self, step: u64, d_model: usize) -> f64 {
        self.lr_factor * lr_schedule(step, d_model, self.warmup_steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,lr,loss";

    pub fn csv_row(&self) -> String {
        format!("{},{:e},{:.17e}", self.step, self.lr, self.loss)
    }
}

/// Forward and backward on one batch. Returns the loss and gradients.
pub fn batch_gradients(
    model: &Model,
    batch: &Batch,
    examples: &[Example],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::with_params(&model.store);
    let loss = {
        let mut ctx = match rng {
            Some(r) => Ctx::train(&mut tape, model.config.encoder.dropout, r),
            None => Ctx::eval(&mut tape),
        };
        model.batch_loss(&mut ctx, batch, examples)?
    };
    let value = tape.value(loss)[0];
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

/// Eval-mode loss on one batch.
pub fn batch_loss_eval(model: &Model, batch: &Batch, examples: &[Example]) -> Result<f64> {
    let mut tape = Tape::with_params(&model.store);
    let mut ctx = Ctx::eval(&mut tape);
    let loss = model.batch_loss(&mut ctx, batch, examples)?;
    Ok(tape.value(loss)[0])
}

/// Token-weighted mean NLL over a dataset in eval mode.
pub fn evaluate_loss(model: &Model, examples: &[Example], batch_tokens: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let batches = make_batches(examples, batch_tokens, 0)?;
    let (mut total, mut count) = (0.0, 0usize);
    for b in &batches {
        let n = b.target_tokens();
        total += batch_loss_eval(model, b, examples)? * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

fn describe_batch(batch: &Batch, examples: &[Example]) -> String {
    let mut s = String::new();
    for &i in &batch.indices {
        let ex = &examples[i];
        s.push_str(&format!(
            "\n  example {i}: src={:?} objects={} edges={:?} tgt={:?}",
            ex.graph.textual(),
            ex.graph.num_visual(),
            ex.graph.edges(),
            ex.target
        ));
    }
    s
}

/// Trains `model` in place. `on_step` runs after every update and may write
/// logs or checkpoints. Fully deterministic given the seed.
pub fn train<F>(
    model: &mut Model,
    optimizer: &mut OptimizerState,
    examples: &[Example],
    cfg: &TrainConfig,
    mut on_step: F,
) -> Result<Vec<StepLog>>
where
    F: FnMut(&StepLog, &Model, &OptimizerState) -> Result<()>,
{
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let d_model = model.config.encoder.d_model;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut log = Vec::new();
    let mut epoch = 0u64;
    while optimizer.step < cfg.max_steps {
        let batches = make_batches(examples, cfg.batch_tokens, cfg.seed.wrapping_add(epoch))?;
        for batch in &batches {
            if optimizer.step >= cfg.max_steps {
                break;
            }
            let (loss, mut grads) = batch_gradients(model, batch, examples, Some(&mut dropout_rng))?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} at step {}{}",
                    optimizer.step + 1,
                    describe_batch(batch, examples)
                )));
            }
            if let Some(c) = cfg.clip_norm {
                let n = grads.global_norm();
                if n > c {
                    grads.scale(c / n);
                }
            }
            let step = optimizer.step + 1;
            let lr = cfg.learning_rate(step, d_model);
            adam_step(&mut model.store, &grads, optimizer, lr, &cfg.adam)?;
            let entry = StepLog { step, lr, loss };
            log::debug!("step {step} lr {lr:.3e} loss {loss:.6}");
            on_step(&entry, model, optimizer)?;
            log.push(entry);
        }
        epoch += 1;
    }
    Ok(log)
}
