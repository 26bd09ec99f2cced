//! Step-by-step decoding with cached keys and values.
//!
//! Under generation masks the region rows of the decoder never look at
//! words, so their states are computed once per image. Each new word only
//! needs its own row pushed through the sentence-encoder and decoder
//! stacks, attending the cached projections of everything before it.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId, Tensor};

use super::layers::{block_with_kv, project_kv};
use super::{Model, RegionInput};

/// Growing `rows x width` buffer.
#[derive(Clone, Debug)]
struct RowCache<T> {
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> RowCache<T> {
    fn new(width: usize) -> Self {
        RowCache { width, data: Vec::new() }
    }

    fn push(&mut self, t: &Tensor<T>) {
        self.data.extend_from_slice(t.data());
    }

    fn rows(&self) -> usize {
        self.data.len() / self.width
    }

    fn tensor(&self) -> Result<Tensor<T>> {
        Tensor::matrix(self.rows(), self.width, self.data.clone())
    }
}

/// Decoder state for one image.
#[derive(Clone, Debug)]
pub struct IncrementalDecoder<'m, T> {
    model: &'m Model<T>,
    /// Per sentence layer: keys and values of the words so far.
    sent_kv: Vec<(RowCache<T>, RowCache<T>)>,
    /// Per decoder layer: keys and values of the words so far.
    dec_kv: Vec<(RowCache<T>, RowCache<T>)>,
    /// Per decoder layer: keys and values of the region block.
    region_kv: Vec<(Tensor<T>, Tensor<T>)>,
    /// Output of the object encoder.
    enc_obj: Tensor<T>,
    step: usize,
}

impl<'m, T: Scalar> IncrementalDecoder<'m, T> {
    pub fn new(model: &'m Model<T>, regions: &RegionInput) -> Result<Self> {
        let mut g = Graph::new();
        let r = model.embed_regions(&mut g, regions, None)?;
        let enc = model.encode_objects(&mut g, r)?;
        let enc_obj = g.value(enc).clone();
        let (eps, heads) = (T::of(model.config.ln_eps), model.config.heads);
        let mut h = enc;
        let mut region_kv = Vec::with_capacity(model.ids.dec.len());
        for l in &model.ids.dec {
            let (k, v) = project_kv(&mut g, &model.params, l, h)?;
            region_kv.push((g.value(k).clone(), g.value(v).clone()));
            h = block_with_kv(&mut g, &model.params, l, h, k, v, heads, None, eps)?;
        }
        let w = model.config.hidden;
        let fresh = |n: usize| (0..n).map(|_| (RowCache::new(w), RowCache::new(w))).collect();
        Ok(IncrementalDecoder {
            model,
            sent_kv: fresh(model.ids.sent.len()),
            dec_kv: fresh(model.ids.dec.len()),
            region_kv,
            enc_obj,
            step: 0,
        })
    }

    /// Number of tokens consumed so far.
    pub fn position(&self) -> usize {
        self.step
    }

    /// Object-encoder states, IMG row first.
    pub fn object_states(&self) -> &Tensor<T> {
        &self.enc_obj
    }

    /// Feed the token at the next position; returns next-token logits.
    pub fn step(&mut self, token: usize) -> Result<Vec<T>> {
        let m = self.model;
        if self.step >= m.config.max_seq {
            return Err(Error::Length {
                len: self.step + 1,
                max: m.config.max_seq,
            });
        }
        if token >= m.config.vocab_size {
            return Err(Error::Vocab {
                id: token,
                size: m.config.vocab_size,
            });
        }
        let (eps, heads) = (T::of(m.config.ln_eps), m.config.heads);
        let mut g = Graph::new();
        let mut x = m.embed_tokens_at(&mut g, &[token], &[self.step])?;
        for (l, (kc, vc)) in m.ids.sent.iter().zip(&mut self.sent_kv) {
            let (k, v) = project_kv(&mut g, &m.params, l, x)?;
            kc.push(g.value(k));
            vc.push(g.value(v));
            let kall = g.constant(kc.tensor()?);
            let vall = g.constant(vc.tensor()?);
            x = block_with_kv(&mut g, &m.params, l, x, kall, vall, heads, None, eps)?;
        }
        for ((l, (kc, vc)), (rk, rv)) in m.ids.dec.iter().zip(&mut self.dec_kv).zip(&self.region_kv) {
            let (k, v) = project_kv(&mut g, &m.params, l, x)?;
            kc.push(g.value(k));
            vc.push(g.value(v));
            let kw = g.constant(kc.tensor()?);
            let vw = g.constant(vc.tensor()?);
            let kr = g.constant(rk.clone());
            let vr = g.constant(rv.clone());
            let kall = g.concat_rows(&[kw, kr])?;
            let vall = g.concat_rows(&[vw, vr])?;
            x = block_with_kv(&mut g, &m.params, l, x, kall, vall, heads, None, eps)?;
        }
        let z: NodeId = m.lm_logits(&mut g, x)?;
        self.step += 1;
        Ok(g.value(z).data().to_vec())
    }
}
