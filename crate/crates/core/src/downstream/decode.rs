//! Greedy and beam-search caption generation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{IncrementalDecoder, Model, RegionInput, CLS, MASK, PAD, SEP};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_width: usize,
    /// Content tokens, excluding CLS and SEP.
    pub max_len: usize,
    /// Finished scores are `log p / len^length_penalty`.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            beam_width: 3,
            max_len: 30,
            length_penalty: 0.7,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        DecodeConfig {
            max_len,
            ..Self::default()
        }
    }

    pub fn beam(width: usize, max_len: usize) -> Self {
        DecodeConfig {
            strategy: Strategy::Beam,
            beam_width: width,
            max_len,
            ..Self::default()
        }
    }

    pub fn validate(&self, max_seq: usize) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if self.max_len + 2 > max_seq {
            return Err(Error::Config(format!(
                "max_len {} leaves no room for CLS and SEP within max_seq {max_seq}",
                self.max_len
            )));
        }
        if !(self.length_penalty >= 0.0) {
            return Err(Error::Config("length_penalty must be non-negative".into()));
        }
        Ok(())
    }
}

/// A decoded caption: content tokens plus its score terms.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Accumulated next-token log-probability, including SEP if emitted.
    pub log_prob: f64,
    /// Predictions scored: content tokens plus the SEP, if any.
    pub length: usize,
}

impl Hypothesis {
    pub fn score(&self, length_penalty: f64) -> f64 {
        self.log_prob / (self.length.max(1) as f64).powf(length_penalty)
    }
}

fn emittable(id: usize) -> bool {
    id != PAD && id != CLS && id != MASK
}

fn log_softmax<T: Scalar>(z: &[T]) -> Vec<f64> {
    let m = z.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v.as_f64() - lse).collect()
}

/// Highest-probability emittable token; ties go to the lower id.
fn best_token(lp: &[f64]) -> usize {
    let mut best = None;
    for (i, &v) in lp.iter().enumerate() {
        if emittable(i) && best.is_none_or(|b: usize| v > lp[b]) {
            best = Some(i);
        }
    }
    best.expect("vocabulary has emittable tokens")
}

pub fn greedy<T: Scalar>(model: &Model<T>, regions: &RegionInput, max_len: usize) -> Result<Hypothesis> {
    let mut dec = IncrementalDecoder::new(model, regions)?;
    let mut lp = log_softmax(&dec.step(CLS)?);
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        length: 0,
    };
    loop {
        let t = best_token(&lp);
        h.log_prob += lp[t];
        h.length += 1;
        if t == SEP {
            return Ok(h);
        }
        h.tokens.push(t);
        if h.tokens.len() >= max_len {
            return Ok(h);
        }
        lp = log_softmax(&dec.step(t)?);
    }
}

struct Live<'m, T> {
    hyp: Hypothesis,
    dec: IncrementalDecoder<'m, T>,
    next: Vec<f64>,
}

/// Beam search. Live beams are ranked by accumulated log-probability (ties
/// by token sequence); finished hypotheses by length-normalised score, ties
/// to the one finished first and then the lexicographically smaller. The
/// greedy hypothesis always competes in the final selection.
pub fn beam_search<T: Scalar>(model: &Model<T>, regions: &RegionInput, cfg: &DecodeConfig) -> Result<Hypothesis> {
    let greedy_hyp = greedy(model, regions, cfg.max_len)?;
    let mut dec = IncrementalDecoder::new(model, regions)?;
    let next = log_softmax(&dec.step(CLS)?);
    let mut live = vec![Live {
        hyp: Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            length: 0,
        },
        dec,
        next,
    }];
    // (hypothesis, finishing round)
    let mut done: Vec<(Hypothesis, usize)> = Vec::new();
    let mut round = 0;
    while !live.is_empty() {
        round += 1;
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (b, l) in live.iter().enumerate() {
            for (t, &v) in l.next.iter().enumerate() {
                if emittable(t) {
                    cands.push((b, t, l.hyp.log_prob + v));
                }
            }
        }
        cands.sort_by(|x, y| {
            y.2.total_cmp(&x.2).then_with(|| {
                let a = live[x.0].hyp.tokens.iter().chain(std::iter::once(&x.1));
                let b = live[y.0].hyp.tokens.iter().chain(std::iter::once(&y.1));
                a.cmp(b)
            })
        });
        cands.truncate(cfg.beam_width);
        let mut survivors = Vec::new();
        for (b, t, lp) in cands {
            let mut hyp = Hypothesis {
                tokens: live[b].hyp.tokens.clone(),
                log_prob: lp,
                length: live[b].hyp.length + 1,
            };
            if t == SEP {
                done.push((hyp, round));
                continue;
            }
            hyp.tokens.push(t);
            if hyp.tokens.len() >= cfg.max_len {
                done.push((hyp, round));
                continue;
            }
            let mut dec = live[b].dec.clone();
            let next = log_softmax(&dec.step(t)?);
            survivors.push(Live { hyp, dec, next });
        }
        live = survivors;
    }
    done.push((greedy_hyp.clone(), greedy_hyp.length));
    let lp = cfg.length_penalty;
    done.sort_by(|(a, ra), (b, rb)| {
        b.score(lp)
            .total_cmp(&a.score(lp))
            .then(ra.cmp(rb))
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    Ok(done.swap_remove(0).0)
}

/// Caption token ids for one image, without CLS/SEP.
pub fn generate_caption<T: Scalar>(model: &Model<T>, regions: &RegionInput, cfg: &DecodeConfig) -> Result<Vec<usize>> {
    cfg.validate(model.config.max_seq)?;
    let h = match cfg.strategy {
        Strategy::Beam => beam_search(model, regions, cfg)?,
        Strategy::Greedy => greedy(model, regions, cfg.max_len)?,
    };
    Ok(h.tokens)
}
