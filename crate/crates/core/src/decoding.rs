use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::model::tensor::Scalar;
use crate::model::{Encodings, Model, ModelError, StepOutput};
use crate::tokenizer::{TokenId, BOS, EOS};

/// Anything that yields a next-token distribution for a decoder prefix.
/// The prefix always starts with BOS.
pub trait Stepper {
    fn step(&self, prefix: &[TokenId]) -> Result<StepOutput, ModelError>;
}

/// A model bound to one encoded input.
pub struct Session<'m, T: Scalar> {
    pub model: &'m Model<T>,
    pub encodings: Encodings<T>,
}

impl<'m, T: Scalar> Session<'m, T> {
    pub fn new(model: &'m Model<T>, bundle: &crate::bundle::AspectBundle) -> Result<Self, ModelError> {
        Ok(Self {
            model,
            encodings: model.encode(bundle)?,
        })
    }
}

impl<T: Scalar> Stepper for Session<'_, T> {
    fn step(&self, prefix: &[TokenId]) -> Result<StepOutput, ModelError> {
        self.model.decode_step(prefix, &self.encodings)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Length-normalization exponent for ranking finished hypotheses.
    pub alpha: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 3,
            min_len: 10,
            max_len: 300,
            alpha: 0.0,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl DecodeConfig {
    pub const MAX_BEAM: usize = 16;

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_size == 0 || self.beam_size > Self::MAX_BEAM {
            return Err(DecodeError::Config(format!(
                "beam_size must be in 1..={}, got {}",
                Self::MAX_BEAM,
                self.beam_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(DecodeError::Config(format!(
                "need 1 <= min_len <= max_len, got {} and {}",
                self.min_len, self.max_len
            )));
        }
        if !self.alpha.is_finite() {
            return Err(DecodeError::Config("alpha must be finite".into()));
        }
        Ok(())
    }
}

/// A generated sequence. `tokens` excludes BOS and EOS; `trace` holds one
/// step per entry of `tokens`; `score` sums the log-probabilities of every
/// chosen token, including the final EOS when `finished`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    pub tokens: Vec<TokenId>,
    pub trace: Vec<StepOutput>,
    pub score: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub score: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamOutput {
    pub best: DecodeOutput,
    /// Completed hypotheses, best first.
    pub beam: Vec<Hypothesis>,
}

fn ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn greedy(stepper: &impl Stepper, cfg: &DecodeConfig) -> Result<DecodeOutput, DecodeError> {
    cfg.validate()?;
    let mut prefix = vec![BOS];
    let mut trace = Vec::new();
    let mut score = 0.0;
    while prefix.len() - 1 < cfg.max_len {
        let step = stepper.step(&prefix)?;
        let mut probs = step.probs.clone();
        if prefix.len() - 1 < cfg.min_len {
            probs[EOS as usize] = f64::NEG_INFINITY;
        }
        let tok = argmax(&probs);
        score += ln(step.probs[tok]);
        if tok == EOS as usize {
            return Ok(DecodeOutput {
                tokens: prefix[1..].to_vec(),
                trace,
                score,
                finished: true,
            });
        }
        prefix.push(tok as TokenId);
        trace.push(step);
    }
    Ok(DecodeOutput {
        tokens: prefix[1..].to_vec(),
        trace,
        score,
        finished: false,
    })
}

/// Higher score first, then lexicographically smaller token ids.
fn hyp_order(a: &(f64, &[TokenId]), b: &(f64, &[TokenId])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

fn normalized(h: &Hypothesis, alpha: f64) -> f64 {
    if alpha == 0.0 {
        return h.score;
    }
    let len = h.tokens.len() + usize::from(h.finished);
    h.score / (len.max(1) as f64).powf(alpha)
}

/// Length-synchronous beam search.
///
/// Each step expands every live hypothesis by every token, keeps the best
/// `beam_size` candidates, and retires those that emitted EOS or reached
/// `max_len`. EOS is unavailable before `min_len` tokens.
pub fn beam_search(stepper: &impl Stepper, cfg: &DecodeConfig) -> Result<BeamOutput, DecodeError> {
    cfg.validate()?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();

    for len in 0..cfg.max_len {
        let mut cands: Vec<(f64, Vec<TokenId>, bool)> = Vec::new();
        for h in &live {
            let mut prefix = Vec::with_capacity(h.tokens.len() + 1);
            prefix.push(BOS);
            prefix.extend_from_slice(&h.tokens);
            let step = stepper.step(&prefix)?;
            for (v, &p) in step.probs.iter().enumerate() {
                let is_eos = v == EOS as usize;
                if is_eos && len < cfg.min_len {
                    continue;
                }
                let mut toks = h.tokens.clone();
                if !is_eos {
                    toks.push(v as TokenId);
                }
                cands.push((h.score + ln(p), toks, is_eos));
            }
        }
        // EOS candidates carry the shorter token list; compare with EOS appended.
        let key = |c: &(f64, Vec<TokenId>, bool)| -> Vec<TokenId> {
            let mut k = c.1.clone();
            if c.2 {
                k.push(EOS);
            }
            k
        };
        let mut keyed: Vec<(f64, Vec<TokenId>, usize)> =
            cands.iter().enumerate().map(|(i, c)| (c.0, key(c), i)).collect();
        keyed.sort_by(|a, b| hyp_order(&(a.0, &a.1), &(b.0, &b.1)));
        keyed.truncate(cfg.beam_size);

        live.clear();
        for (_, _, i) in keyed {
            let (score, tokens, is_eos) = cands[i].clone();
            let at_limit = tokens.len() == cfg.max_len;
            let h = Hypothesis {
                tokens,
                score,
                finished: is_eos,
            };
            if is_eos || at_limit {
                done.push(h);
            } else {
                live.push(h);
            }
        }
        if live.is_empty() {
            break;
        }
        if cfg.alpha == 0.0 {
            // Scores never increase, so no live hypothesis can overtake.
            let best_done = done.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if best_done > best_live {
                break;
            }
        }
    }

    let seq = |h: &Hypothesis| {
        let mut k = h.tokens.clone();
        if h.finished {
            k.push(EOS);
        }
        k
    };
    done.sort_by(|a, b| {
        hyp_order(&(normalized(a, cfg.alpha), &seq(a)), &(normalized(b, cfg.alpha), &seq(b)))
    });
    let winner = done.first().cloned().ok_or_else(|| {
        DecodeError::Config("beam search produced no hypothesis".into())
    })?;
    let (trace, _) = teacher_force(stepper, &winner.tokens, winner.finished)?;
    Ok(BeamOutput {
        best: DecodeOutput {
            tokens: winner.tokens,
            trace,
            score: winner.score,
            finished: winner.finished,
        },
        beam: done,
    })
}

/// Re-runs the decoder over `tokens` (and EOS when `finished`), returning
/// one step per token and the summed log-probability.
pub fn teacher_force(
    stepper: &impl Stepper,
    tokens: &[TokenId],
    finished: bool,
) -> Result<(Vec<StepOutput>, f64), ModelError> {
    let mut prefix = vec![BOS];
    let mut trace = Vec::with_capacity(tokens.len());
    let mut score = 0.0;
    for &t in tokens {
        let step = stepper.step(&prefix)?;
        score += ln(step.probs[t as usize]);
        trace.push(step);
        prefix.push(t);
    }
    if finished {
        let step = stepper.step(&prefix)?;
        score += ln(step.probs[EOS as usize]);
    }
    Ok((trace, score))
}

/// Beam search, or greedy decoding when the beam holds one hypothesis.
pub fn decode(stepper: &impl Stepper, cfg: &DecodeConfig) -> Result<DecodeOutput, DecodeError> {
    if cfg.beam_size == 1 {
        greedy(stepper, cfg)
    } else {
        Ok(beam_search(stepper, cfg)?.best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_bounds() {
        assert!(DecodeConfig::default().validate().is_ok());
        let bad = |c: DecodeConfig| assert!(c.validate().is_err());
        bad(DecodeConfig { beam_size: 0, ..Default::default() });
        bad(DecodeConfig { beam_size: 17, ..Default::default() });
        bad(DecodeConfig { min_len: 0, ..Default::default() });
        bad(DecodeConfig { min_len: 20, max_len: 10, ..Default::default() });
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
