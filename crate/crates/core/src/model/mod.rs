//! The two-stream encoder-decoder.
//!
//! Regions and words are embedded separately, contextualised by an object
//! encoder and a sentence encoder, and then decoded jointly over the
//! concatenated `[words; IMG; regions]` stream.

pub mod config;
pub mod incremental;
pub mod layers;
pub mod masks;

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Mask, NodeId, ParamId, ParamStore, Tensor};

pub use config::{ModelConfig, POS_DIM};
pub use incremental::IncrementalDecoder;
pub use layers::{attention, transformer_layer, LayerIds};
pub use masks::{bidirectional_masks, causal_masks, AttentionMaskSet};

use layers::{linear, uniform};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;

/// Geometry of the IMG token: the whole frame.
pub const FULL_FRAME: [f32; POS_DIM] = [0.0, 0.0, 1.0, 1.0, 1.0];

/// Region features and boxes of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionInput {
    pub features: Vec<Vec<f32>>,
    /// `x1, y1, x2, y2, area`, all normalised.
    pub boxes: Vec<[f32; POS_DIM]>,
}

impl RegionInput {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::EmptyRegions);
        }
        if self.features.len() > cfg.max_regions {
            return Err(Error::Length {
                len: self.features.len(),
                max: cfg.max_regions,
            });
        }
        if self.boxes.len() != self.features.len() {
            return Err(Error::contract(format!(
                "{} features but {} boxes",
                self.features.len(),
                self.boxes.len()
            )));
        }
        for (i, f) in self.features.iter().enumerate() {
            if f.len() != cfg.region_dim {
                return Err(Error::Shape {
                    op: "region feature",
                    lhs: vec![f.len()],
                    rhs: vec![cfg.region_dim],
                });
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::contract(format!("region {i} has a non-finite feature")));
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            let [x1, y1, x2, y2, area] = *b;
            let unit = |v: f32| (0.0..=1.0).contains(&v);
            if !(unit(x1) && unit(y1) && unit(x2) && unit(y2) && x1 < x2 && y1 < y2) {
                return Err(Error::contract(format!("region {i} has a degenerate box {b:?}")));
            }
            if !(area > 0.0 && area <= 1.0) {
                return Err(Error::contract(format!("region {i} area {area} outside (0, 1]")));
            }
        }
        Ok(())
    }

    /// Regions reordered so that output row `i` is input row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        RegionInput {
            features: perm.iter().map(|&i| self.features[i].clone()).collect(),
            boxes: perm.iter().map(|&i| self.boxes[i]).collect(),
        }
    }
}

/// A CLS ... SEP word sequence, optionally followed by PAD filler.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordInput {
    pub ids: Vec<usize>,
    /// Number of leading non-padding positions, CLS and SEP included.
    pub valid_len: usize,
}

impl WordInput {
    /// Wrap content tokens with CLS and SEP.
    pub fn wrap(content: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(CLS);
        ids.extend_from_slice(content);
        ids.push(SEP);
        let valid_len = ids.len();
        WordInput { ids, valid_len }
    }

    /// Same sequence padded with PAD to `len` positions.
    pub fn padded(&self, len: usize) -> Self {
        let mut ids = self.ids.clone();
        ids.resize(len.max(ids.len()), PAD);
        WordInput {
            ids,
            valid_len: self.valid_len,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Content words between CLS and SEP.
    pub fn content(&self) -> &[usize] {
        &self.ids[1..self.valid_len - 1]
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.ids.len() > cfg.max_seq {
            return Err(Error::Length {
                len: self.ids.len(),
                max: cfg.max_seq,
            });
        }
        if self.valid_len < 2 || self.valid_len > self.ids.len() {
            return Err(Error::contract(format!(
                "valid length {} of a {}-token sequence",
                self.valid_len,
                self.ids.len()
            )));
        }
        if self.ids[0] != CLS || self.ids[self.valid_len - 1] != SEP {
            return Err(Error::contract("word sequence must be wrapped in CLS ... SEP"));
        }
        if let Some(&id) = self.ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Vocab {
                id,
                size: cfg.vocab_size,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EmbedIds {
    pub w_r: ParamId,
    pub w_p: ParamId,
    /// Learned raw feature substituted for masked regions, `1 x D_r`.
    pub mask_vec: ParamId,
    pub ln_r_g: ParamId,
    pub ln_r_b: ParamId,
    /// Word table, also the tied output projection.
    pub w_w: ParamId,
    pub w_s: ParamId,
    pub ln_w_g: ParamId,
    pub ln_w_b: ParamId,
}

/// Gated recurrent phrase decoder.
#[derive(Clone, Debug)]
pub struct GruIds {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_n: ParamId,
    pub u_n: ParamId,
    pub b_n: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// Attention pooling of both encoder streams followed by a two-layer MLP.
/// The first MLP layer is stored as its image and text halves.
#[derive(Clone, Debug)]
pub struct PoolHeadIds {
    pub q_obj: ParamId,
    pub q_word: ParamId,
    pub w1_img: ParamId,
    pub w1_txt: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    /// Question guidance `D_H x D_H`: when present the object query is
    /// `q_obj + pooled_words * guide`.
    pub guide: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct ModelIds {
    pub embed: EmbedIds,
    pub obj: Vec<LayerIds>,
    pub sent: Vec<LayerIds>,
    pub dec: Vec<LayerIds>,
    pub lm_bias: ParamId,
    pub moc_w: ParamId,
    pub moc_b: ParamId,
    pub gru: GruIds,
    /// Image-sentence matching head, scalar output.
    pub matcher: PoolHeadIds,
    /// Question-answering head, present when `num_answers > 0`.
    pub fusion: Option<PoolHeadIds>,
}

/// Encoder and decoder states of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutputs {
    /// Object encoder output, IMG row first.
    pub enc_obj: NodeId,
    pub enc_words: NodeId,
    pub dec_words: NodeId,
    pub dec_regions: NodeId,
}

/// Parameters plus the handles that address them.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub ids: ModelIds,
}

struct Init<'a> {
    store: &'a mut ParamStore<f64>,
    rng: ChaCha8Rng,
    range: f64,
}

impl Init<'_> {
    fn rand(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let t = uniform(&mut self.rng, shape, self.range);
        self.store.add(name, t)
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(shape))
    }

    fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, 1.0))
    }

    fn stack(&mut self, prefix: &str, n: usize, h: usize, ff: usize) -> Result<Vec<LayerIds>> {
        (0..n)
            .map(|i| {
                let name = format!("{prefix}.{i}");
                LayerIds::register(self.store, &name, h, ff, self.range, &mut self.rng)
            })
            .collect()
    }

    fn pool_head(&mut self, prefix: &str, h: usize, mh: usize, out: usize, guided: bool) -> Result<PoolHeadIds> {
        Ok(PoolHeadIds {
            q_obj: self.rand(&format!("{prefix}.q_obj"), &[1, h])?,
            q_word: self.rand(&format!("{prefix}.q_word"), &[1, h])?,
            w1_img: self.rand(&format!("{prefix}.w1_img"), &[h, mh])?,
            w1_txt: self.rand(&format!("{prefix}.w1_txt"), &[h, mh])?,
            b1: self.zeros(&format!("{prefix}.b1"), &[mh])?,
            w2: self.rand(&format!("{prefix}.w2"), &[mh, out])?,
            b2: self.zeros(&format!("{prefix}.b2"), &[out])?,
            guide: if guided {
                Some(self.rand(&format!("{prefix}.guide"), &[h, h])?)
            } else {
                None
            },
        })
    }
}

impl<T: Scalar> Model<T> {
    /// Freshly initialised model. Initial values are drawn in `f64` and
    /// rounded, so the `f32` and `f64` instances of one seed agree.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::<f64>::new();
        let c = &config;
        let (h, v) = (c.hidden, c.vocab_size);
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            range: c.init_range,
        };
        let embed = EmbedIds {
            w_r: init.rand("embed.w_r", &[c.region_dim, h])?,
            w_p: init.rand("embed.w_p", &[c.pos_dim, h])?,
            mask_vec: init.rand("embed.mask_region", &[1, c.region_dim])?,
            ln_r_g: init.ones("embed.ln_r.gamma", &[h])?,
            ln_r_b: init.zeros("embed.ln_r.beta", &[h])?,
            w_w: init.rand("embed.w_w", &[v, h])?,
            w_s: init.rand("embed.w_s", &[c.max_seq, h])?,
            ln_w_g: init.ones("embed.ln_w.gamma", &[h])?,
            ln_w_b: init.zeros("embed.ln_w.beta", &[h])?,
        };
        let obj = init.stack("obj", c.obj_layers, h, c.ff_dim)?;
        let sent = init.stack("sent", c.sent_layers, h, c.ff_dim)?;
        let dec = init.stack("dec", c.dec_layers, h, c.ff_dim)?;
        let lm_bias = init.zeros("lm.bias", &[v])?;
        let moc_w = init.rand("moc.w", &[h, c.num_labels])?;
        let moc_b = init.zeros("moc.b", &[c.num_labels])?;
        let gru = GruIds {
            w_z: init.rand("mrpg.w_z", &[h, h])?,
            u_z: init.rand("mrpg.u_z", &[h, h])?,
            b_z: init.zeros("mrpg.b_z", &[h])?,
            w_r: init.rand("mrpg.w_r", &[h, h])?,
            u_r: init.rand("mrpg.u_r", &[h, h])?,
            b_r: init.zeros("mrpg.b_r", &[h])?,
            w_n: init.rand("mrpg.w_n", &[h, h])?,
            u_n: init.rand("mrpg.u_n", &[h, h])?,
            b_n: init.zeros("mrpg.b_n", &[h])?,
            out_w: init.rand("mrpg.out_w", &[h, v])?,
            out_b: init.zeros("mrpg.out_b", &[v])?,
        };
        let matcher = init.pool_head("ism", h, c.match_hidden, 1, false)?;
        let fusion = if c.num_answers > 0 {
            Some(init.pool_head("vqa", h, c.match_hidden, c.num_answers, true)?)
        } else {
            None
        };
        let ids = ModelIds {
            embed,
            obj,
            sent,
            dec,
            lm_bias,
            moc_w,
            moc_b,
            gru,
            matcher,
            fusion,
        };
        Ok(Model {
            config,
            params: store.cast(),
            ids,
        })
    }

    /// Same model at another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    /// Copy of this model with `params` swapped in (shapes unchecked).
    pub fn with_params(&self, params: ParamStore<T>) -> Self {
        Model {
            config: self.config.clone(),
            params,
            ids: self.ids.clone(),
        }
    }

    fn eps(&self) -> T {
        T::of(self.config.ln_eps)
    }

    fn p(&self, g: &mut Graph<T>, id: ParamId) -> NodeId {
        g.param(&self.params, id)
    }

    /// `(N_I + 1) x D_H` region embeddings, IMG first. Regions flagged in
    /// `masked` get the learned mask feature in place of their own; their
    /// geometry is kept.
    pub fn embed_regions(
        &self,
        g: &mut Graph<T>,
        regions: &RegionInput,
        masked: Option<&[bool]>,
    ) -> Result<NodeId> {
        regions.validate(&self.config)?;
        let n = regions.len();
        let dr = self.config.region_dim;
        if let Some(m) = masked {
            if m.len() != n {
                return Err(Error::contract(format!("{} mask flags for {n} regions", m.len())));
            }
        }
        let is_masked = |i: usize| masked.is_some_and(|m| m[i]);
        let mut raw = Vec::with_capacity(n * dr);
        let mut col = Vec::with_capacity(n);
        for (i, f) in regions.features.iter().enumerate() {
            if is_masked(i) {
                raw.extend(std::iter::repeat_n(T::zero(), dr));
                col.push(T::one());
            } else {
                raw.extend(f.iter().map(|&v| T::of(v as f64)));
                col.push(T::zero());
            }
        }
        let mut x = g.constant(Tensor::matrix(n, dr, raw)?);
        if (0..n).any(is_masked) {
            let sel = g.constant(Tensor::matrix(n, 1, col)?);
            let mv = self.p(g, self.ids.embed.mask_vec);
            let sub = g.matmul(sel, mv)?;
            x = g.add(x, sub)?;
        }
        let img = g.set_mean_rows(x)?;
        let all = g.concat_rows(&[img, x])?;
        let mut pos = Vec::with_capacity((n + 1) * POS_DIM);
        for b in std::iter::once(&FULL_FRAME).chain(&regions.boxes) {
            pos.extend(b.iter().map(|&v| T::of(v as f64)));
        }
        let pos = g.constant(Tensor::matrix(n + 1, POS_DIM, pos)?);
        let e = &self.ids.embed;
        let (wr, wp) = (self.p(g, e.w_r), self.p(g, e.w_p));
        let a = g.matmul(all, wr)?;
        let b = g.matmul(pos, wp)?;
        let s = g.add(a, b)?;
        let (lg, lb) = (self.p(g, e.ln_r_g), self.p(g, e.ln_r_b));
        g.layer_norm(s, lg, lb, self.eps())
    }

    /// `len x D_H` word embeddings: token row plus position-index row.
    pub fn embed_words(&self, g: &mut Graph<T>, words: &WordInput) -> Result<NodeId> {
        words.validate(&self.config)?;
        let positions: Vec<usize> = (0..words.len()).collect();
        self.embed_tokens_at(g, &words.ids, &positions)
    }

    /// Embedding rows for arbitrary `(token, position)` pairs.
    pub fn embed_tokens_at(&self, g: &mut Graph<T>, ids: &[usize], positions: &[usize]) -> Result<NodeId> {
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_seq) {
            return Err(Error::Length {
                len: p + 1,
                max: self.config.max_seq,
            });
        }
        let e = &self.ids.embed;
        let (ww, ws) = (self.p(g, e.w_w), self.p(g, e.w_s));
        let tok = g.gather(ww, ids)?;
        let pos = g.gather(ws, positions)?;
        let s = g.add(tok, pos)?;
        let (lg, lb) = (self.p(g, e.ln_w_g), self.p(g, e.ln_w_b));
        g.layer_norm(s, lg, lb, self.eps())
    }

    fn stack(
        &self,
        g: &mut Graph<T>,
        layers: &[LayerIds],
        mut h: NodeId,
        mask: Option<Rc<Mask>>,
    ) -> Result<NodeId> {
        let mask = mask.filter(|m| !m.is_all_true());
        for l in layers {
            h = transformer_layer(g, &self.params, l, h, h, self.config.heads, mask.clone(), self.eps())?;
        }
        Ok(h)
    }

    /// Object encoder: unmasked self-attention over IMG and regions.
    pub fn encode_objects(&self, g: &mut Graph<T>, h0: NodeId) -> Result<NodeId> {
        self.stack(g, &self.ids.obj, h0, None)
    }

    /// Sentence encoder under `word_self` (None = full visibility).
    pub fn encode_sentence(&self, g: &mut Graph<T>, h0: NodeId, word_self: Option<Rc<Mask>>) -> Result<NodeId> {
        self.stack(g, &self.ids.sent, h0, word_self)
    }

    /// Multi-modal decoder over `[h_s; h_i]`; returns (word block, region block).
    pub fn decode_multimodal(
        &self,
        g: &mut Graph<T>,
        h_i: NodeId,
        h_s: NodeId,
        joint: Option<Rc<Mask>>,
    ) -> Result<(NodeId, NodeId)> {
        let (ns, ni) = (g.value(h_s).rows(), g.value(h_i).rows());
        if let Some(m) = &joint {
            if m.rows() != ns + ni || m.cols() != ns + ni {
                return Err(Error::Shape {
                    op: "joint mask",
                    lhs: vec![m.rows(), m.cols()],
                    rhs: vec![ns + ni, ns + ni],
                });
            }
        }
        let h = g.concat_rows(&[h_s, h_i])?;
        let h = self.stack(g, &self.ids.dec, h, joint)?;
        let w = g.slice_rows(h, 0, ns)?;
        let r = g.slice_rows(h, ns, ni)?;
        Ok((w, r))
    }

    /// Everything after the object encoder, reusing its output.
    pub fn forward_with_objects(
        &self,
        g: &mut Graph<T>,
        enc_obj: NodeId,
        words: &WordInput,
        masks: &AttentionMaskSet,
    ) -> Result<ForwardOutputs> {
        if masks.n_words() != words.len() || masks.n_region_rows() != g.value(enc_obj).rows() {
            return Err(Error::Shape {
                op: "mask set",
                lhs: vec![masks.n_words(), masks.n_region_rows()],
                rhs: vec![words.len(), g.value(enc_obj).rows()],
            });
        }
        let ws = self.embed_words(g, words)?;
        let enc_words = self.encode_sentence(g, ws, Some(masks.word_self.clone()))?;
        let (dec_words, dec_regions) = self.decode_multimodal(g, enc_obj, enc_words, Some(masks.joint.clone()))?;
        Ok(ForwardOutputs {
            enc_obj,
            enc_words,
            dec_words,
            dec_regions,
        })
    }

    /// Embeddings, both encoders and the decoder.
    pub fn forward_full(
        &self,
        g: &mut Graph<T>,
        regions: &RegionInput,
        words: &WordInput,
        masks: &AttentionMaskSet,
        masked_regions: Option<&[bool]>,
    ) -> Result<ForwardOutputs> {
        let r = self.embed_regions(g, regions, masked_regions)?;
        let enc_obj = self.encode_objects(g, r)?;
        self.forward_with_objects(g, enc_obj, words, masks)
    }

    /// Vocabulary logits through the tied word table.
    pub fn lm_logits(&self, g: &mut Graph<T>, states: NodeId) -> Result<NodeId> {
        let ww = self.p(g, self.ids.embed.w_w);
        let wt = g.transpose(ww)?;
        let z = g.matmul(states, wt)?;
        let b = self.p(g, self.ids.lm_bias);
        g.add_bias(z, b)
    }

    /// Object-label logits for region states.
    pub fn moc_logits(&self, g: &mut Graph<T>, states: NodeId) -> Result<NodeId> {
        linear(g, &self.params, states, self.ids.moc_w, self.ids.moc_b)
    }

    /// Attention-pooled object stream, `1 x D_H`.
    pub fn pool_objects(&self, g: &mut Graph<T>, head: &PoolHeadIds, enc_obj: NodeId) -> Result<NodeId> {
        let q = self.p(g, head.q_obj);
        g.attention(q, enc_obj, enc_obj, 1, None)
    }

    /// Attention-pooled word stream over the first `valid_words` rows.
    pub fn pool_words(
        &self,
        g: &mut Graph<T>,
        head: &PoolHeadIds,
        enc_words: NodeId,
        valid_words: usize,
    ) -> Result<NodeId> {
        let n = g.value(enc_words).rows();
        let mask = (valid_words < n).then(|| Rc::new(Mask::from_fn(1, n, |_, c| c < valid_words)));
        let q = self.p(g, head.q_word);
        g.attention(q, enc_words, enc_words, 1, mask)
    }

    /// Two-layer MLP over row-aligned pooled vectors: row `i` scores the
    /// pair `(objs[i], words[i])`.
    pub fn head_mlp(&self, g: &mut Graph<T>, head: &PoolHeadIds, objs: NodeId, words: NodeId) -> Result<NodeId> {
        let (w1i, w1t) = (self.p(g, head.w1_img), self.p(g, head.w1_txt));
        let a = g.matmul(objs, w1i)?;
        let b = g.matmul(words, w1t)?;
        let s = g.add(a, b)?;
        let b1 = self.p(g, head.b1);
        let s = g.add_bias(s, b1)?;
        let s = g.tanh(s);
        linear(g, &self.params, s, head.w2, head.b2)
    }

    /// Pool both encoder streams and apply the head MLP. A guided head
    /// pools the words first and lets them steer the object query.
    pub fn pool_head(
        &self,
        g: &mut Graph<T>,
        head: &PoolHeadIds,
        enc_obj: NodeId,
        enc_words: NodeId,
        valid_words: usize,
    ) -> Result<NodeId> {
        let pw = self.pool_words(g, head, enc_words, valid_words)?;
        let po = match head.guide {
            None => self.pool_objects(g, head, enc_obj)?,
            Some(gid) => {
                let w = self.p(g, gid);
                let steer = g.matmul(pw, w)?;
                let q0 = self.p(g, head.q_obj);
                let q = g.add(q0, steer)?;
                g.attention(q, enc_obj, enc_obj, 1, None)?
            }
        };
        self.head_mlp(g, head, po, pw)
    }
}

#[cfg(test)]
mod tests;
