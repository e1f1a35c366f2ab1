//! Inference: greedy and beam search over the generator distribution.

use crate::encoder::EncoderVars;
use crate::error::{Error, Result};
use crate::graph::MultiModalGraph;
use crate::model::Model;
use crate::nn::Ctx;
use crate::tape::Tape;
use crate::vocab::{BOS, EOS};

/// Default output length limit for a source of `src_len` tokens.
pub fn default_max_len(src_len: usize) -> usize {
    2 * src_len + 10
}

/// Incremental scorer for one source graph. The encoder runs once; each call
/// re-runs the decoder over the whole prefix.
pub struct Scorer<'m> {
    model: &'m Model,
    tape: Tape<'m>,
    enc: EncoderVars,
}

impl<'m> Scorer<'m> {
    pub fn new(model: &'m Model, graph: &MultiModalGraph) -> Result<Self> {
        let mut tape = Tape::with_params(&model.store);
        let enc = model.encode(&mut Ctx::eval(&mut tape), graph)?;
        Ok(Scorer { model, tape, enc })
    }

    /// Log-probabilities of the next token after `BOS prefix`.
    pub fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut input = Vec::with_capacity(prefix.len() + 1);
        input.push(BOS);
        input.extend_from_slice(prefix);
        let mut ctx = Ctx::eval(&mut self.tape);
        let lp = self.model.log_probs(&mut ctx, &input, &self.enc)?;
        let v = self.model.config.tgt_vocab;
        let all = self.tape.value(lp);
        Ok(all[all.len() - v..].to_vec())
    }

    /// Sum of log-probabilities of `tokens`, followed by EOS if `finished`.
    pub fn sequence_log_prob(&mut self, tokens: &[usize], finished: bool) -> Result<f64> {
        let mut input = vec![BOS];
        input.extend_from_slice(tokens);
        let mut targets = tokens.to_vec();
        if finished {
            targets.push(EOS);
        } else {
            input.pop();
        }
        if targets.is_empty() {
            return Ok(0.0);
        }
        let mut ctx = Ctx::eval(&mut self.tape);
        let lp = self.model.log_probs(&mut ctx, &input, &self.enc)?;
        let v = self.model.config.tgt_vocab;
        let all = self.tape.value(lp);
        Ok(targets.iter().enumerate().map(|(k, &t)| all[k * v + t]).sum())
    }
}

/// First index of the maximum entry.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding: emits the argmax token until EOS or `max_len` tokens.
/// The returned ids exclude BOS and EOS.
pub fn greedy_decode(model: &Model, graph: &MultiModalGraph, max_len: usize) -> Result<Vec<usize>> {
    if max_len < 1 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut scorer = Scorer::new(model, graph)?;
    let mut out = Vec::new();
    while out.len() < max_len {
        let next = argmax(&scorer.next_log_probs(&out)?);
        if next == EOS {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Scored length: generated tokens plus the EOS if one was emitted.
    pub fn length(&self) -> usize {
        (self.tokens.len() + self.finished as usize).max(1)
    }

    pub fn normalized_score(&self) -> f64 {
        self.log_prob / self.length() as f64
    }
}

/// Beam search ranked by cumulative log-probability; the final hypothesis is
/// chosen by length-normalized score.
pub fn beam_search(
    model: &Model,
    graph: &MultiModalGraph,
    beam_size: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    if beam_size < 1 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    if max_len < 1 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut scorer = Scorer::new(model, graph)?;
    let mut alive = vec![Hypothesis {
        tokens: vec![],
        log_prob: 0.0,
        finished: false,
    }];
    let mut done: Vec<Hypothesis> = vec![];
    for _ in 0..max_len {
        let mut cands: Vec<(f64, usize, usize)> = vec![];
        for (h, hyp) in alive.iter().enumerate() {
            let lp = scorer.next_log_probs(&hyp.tokens)?;
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &t in order.iter().take(beam_size) {
                cands.push((hyp.log_prob + lp[t], h, t));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = vec![];
        for &(score, h, t) in cands.iter().take(beam_size) {
            let mut tokens = alive[h].tokens.clone();
            let finished = t == EOS;
            if !finished {
                tokens.push(t);
            }
            let hyp = Hypothesis {
                tokens,
                log_prob: score,
                finished,
            };
            if finished {
                done.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
    }
    done.extend(alive);
    let mut best = done.remove(0);
    for h in done {
        if h.normalized_score() > best.normalized_score() {
            best = h;
        }
    }
    Ok(best)
}

pub fn beam_decode(model: &Model, graph: &MultiModalGraph, beam_size: usize, max_len: usize) -> Result<Vec<usize>> {
    Ok(beam_search(model, graph, beam_size, max_len)?.tokens)
}
