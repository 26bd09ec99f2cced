//! Pre-training objectives: masked object classification (MOC), masked
//! region phrase generation (MRPG), image-sentence matching (ISM), masked
//! sentence generation (MSG) and masked language modelling (MLM).
//!
//! Every loss is a mean over its own items (masked regions, tokens, pairs)
//! pooled across the whole batch with an order-free sum.

pub mod plan;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Example};
use crate::error::{Error, Result};
use crate::model::{AttentionMaskSet, Model, WordInput, CLS, PAD};
use crate::scalar::{set_sum, Scalar};
use crate::tensor::{Graph, NodeId, Tensor};

pub use plan::{plan_masks, IsmNegative, MaskPlan, MaskingConfig, NegativeSide, RegionReplacement, WordAction};

use crate::model::layers::linear;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub masking: MaskingConfig,
    /// Triplet ranking margin.
    pub margin: f64,
    pub enable_moc: bool,
    pub enable_mrpg: bool,
    pub enable_ism: bool,
    pub enable_msg: bool,
    pub enable_mlm: bool,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            masking: MaskingConfig::default(),
            margin: 0.2,
            enable_moc: true,
            enable_mrpg: true,
            enable_ism: true,
            enable_msg: true,
            enable_mlm: true,
        }
    }
}

impl ProxyConfig {
    pub fn any_enabled(&self) -> bool {
        self.enable_moc || self.enable_mrpg || self.enable_ism || self.enable_msg || self.enable_mlm
    }
}

/// Per-item loss terms awaiting pooling: `(sum(parts) - offset) / count`.
#[derive(Debug, Default)]
pub struct Terms {
    pub parts: Vec<NodeId>,
    pub count: usize,
    pub offset: f64,
}

impl Terms {
    /// Order-free pooled mean.
    pub fn pool<T: Scalar>(&self, g: &mut Graph<T>) -> Result<NodeId> {
        if self.count == 0 || self.parts.is_empty() {
            return Err(Error::contract("pooling an empty set of loss terms"));
        }
        let mut cols = Vec::with_capacity(self.parts.len());
        for &p in &self.parts {
            let n = g.value(p).len();
            cols.push(g.reshape(p, vec![n, 1])?);
        }
        let all = if cols.len() == 1 { cols[0] } else { g.concat_rows(&cols)? };
        let s = g.sum_all(all);
        let inv = 1.0 / self.count as f64;
        Ok(g.affine(s, T::of(inv), T::of(-self.offset * inv)))
    }
}

fn order_free_sum(mut v: Vec<f64>) -> f64 {
    set_sum(&mut v)
}

/// Validated target rows for MOC.
fn label_targets<T: Scalar>(gt: &[&[f32]], labels: usize) -> Result<(Tensor<T>, Vec<f64>)> {
    let mut data = Vec::with_capacity(gt.len() * labels);
    let mut entropies = Vec::with_capacity(gt.len());
    for (i, row) in gt.iter().enumerate() {
        if row.len() != labels {
            return Err(Error::contract(format!("label distribution {i} has width {}, expected {labels}", row.len())));
        }
        let sum: f64 = row.iter().map(|&p| p as f64).sum();
        if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-5 {
            return Err(Error::contract(format!("label distribution {i} is not a probability vector")));
        }
        let h: f64 = row
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -(p as f64) * (p as f64).ln())
            .sum();
        entropies.push(h);
        data.extend(row.iter().map(|&p| T::of(p as f64)));
    }
    Ok((Tensor::matrix(gt.len(), labels, data)?, entropies))
}

/// KL(g || softmax(head(states))) per row; `states` are decoder region
/// states of masked regions. Also returns the label logits.
pub fn moc_terms<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    states: NodeId,
    gt: &[&[f32]],
) -> Result<(Terms, NodeId)> {
    if gt.is_empty() {
        return Err(Error::contract("MOC needs at least one masked region"));
    }
    let (targets, ent) = label_targets::<T>(gt, model.config.num_labels)?;
    let z = model.moc_logits(g, states)?;
    let ce = g.cross_entropy_rows(z, &targets)?;
    let terms = Terms {
        parts: vec![ce],
        count: gt.len(),
        offset: order_free_sum(ent),
    };
    Ok((terms, z))
}

pub fn loss_moc<T: Scalar>(g: &mut Graph<T>, model: &Model<T>, states: NodeId, gt: &[&[f32]]) -> Result<NodeId> {
    moc_terms(g, model, states, gt)?.0.pool(g)
}

/// One gated recurrent step.
fn gru_cell<T: Scalar>(g: &mut Graph<T>, model: &Model<T>, x: NodeId, h: NodeId) -> Result<NodeId> {
    let p = &model.params;
    let ids = &model.ids.gru;
    let gate = |g: &mut Graph<T>, w, u, b| -> Result<NodeId> {
        let a = linear(g, p, x, w, b)?;
        let un = g.param(p, u);
        let c = g.matmul(h, un)?;
        g.add(a, c)
    };
    let z = gate(g, ids.w_z, ids.u_z, ids.b_z)?;
    let z = g.sigmoid(z);
    let r = gate(g, ids.w_r, ids.u_r, ids.b_r)?;
    let r = g.sigmoid(r);
    let a = linear(g, p, x, ids.w_n, ids.b_n)?;
    let un = g.param(p, ids.u_n);
    let hu = g.matmul(h, un)?;
    let rh = g.mul(r, hu)?;
    let n = g.add(a, rh)?;
    let n = g.tanh(n);
    // h' = (1 - z) n + z h = n + z (h - n)
    let d = g.sub(h, n)?;
    let zd = g.mul(z, d)?;
    g.add(n, zd)
}

/// Teacher-forced phrase decoding from each masked region's state. Token
/// NLLs are weighted by `1 / phrase length` so the pooled value is the mean
/// over regions of the mean per-token loss.
pub fn mrpg_terms<T: Scalar>(g: &mut Graph<T>, model: &Model<T>, states: NodeId, phrases: &[&[usize]]) -> Result<Terms> {
    let m = phrases.len();
    if m == 0 {
        return Err(Error::contract("MRPG needs at least one masked region"));
    }
    if g.value(states).rows() != m {
        return Err(Error::Shape {
            op: "mrpg",
            lhs: g.shape(states).to_vec(),
            rhs: vec![m],
        });
    }
    if let Some(i) = phrases.iter().position(|p| p.is_empty()) {
        return Err(Error::contract(format!("phrase {i} is empty")));
    }
    let max_len = phrases.iter().map(|p| p.len()).max().unwrap_or(0);
    let ww = g.param(&model.params, model.ids.embed.w_w);
    let mut h = states;
    let mut inputs = vec![CLS; m];
    let mut parts = Vec::new();
    for t in 0..max_len {
        let x = g.gather(ww, &inputs)?;
        h = gru_cell(g, model, x, h)?;
        let active: Vec<usize> = (0..m).filter(|&r| phrases[r].len() > t).collect();
        let ha = if active.len() == m { h } else { g.gather(h, &active)? };
        let z = linear(g, &model.params, ha, model.ids.gru.out_w, model.ids.gru.out_b)?;
        let targets: Vec<usize> = active.iter().map(|&r| phrases[r][t]).collect();
        let nll = g.nll_rows(z, &targets)?;
        let w: Vec<T> = active.iter().map(|&r| T::of(1.0 / phrases[r].len() as f64)).collect();
        let w = g.constant(Tensor::vector(w)?);
        parts.push(g.mul(nll, w)?);
        for (r, slot) in inputs.iter_mut().enumerate() {
            *slot = phrases[r].get(t).copied().unwrap_or(PAD);
        }
    }
    Ok(Terms {
        parts,
        count: m,
        offset: 0.0,
    })
}

pub fn loss_mrpg<T: Scalar>(g: &mut Graph<T>, model: &Model<T>, states: NodeId, phrases: &[&[usize]]) -> Result<NodeId> {
    mrpg_terms(g, model, states, phrases)?.pool(g)
}

/// Matching score `s(I, S)` from unmasked encoder states, `1 x 1`.
pub fn match_score<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    enc_obj: NodeId,
    enc_words: NodeId,
    valid_words: usize,
) -> Result<NodeId> {
    model.pool_head(g, &model.ids.matcher, enc_obj, enc_words, valid_words)
}

/// Hinge terms `max(0, margin - pos + neg)` for column vectors of scores.
pub fn ism_terms<T: Scalar>(g: &mut Graph<T>, pos: NodeId, neg: NodeId, margin: f64) -> Result<Terms> {
    let d = g.sub(neg, pos)?;
    let d = g.affine(d, T::one(), T::of(margin));
    let h = g.relu(d);
    let count = g.value(h).len();
    Ok(Terms {
        parts: vec![h],
        count,
        offset: 0.0,
    })
}

pub fn loss_ism<T: Scalar>(g: &mut Graph<T>, pos: NodeId, neg: NodeId, margin: f64) -> Result<NodeId> {
    ism_terms(g, pos, neg, margin)?.pool(g)
}

/// Next-token terms: row `j` of `dec_words` predicts token `j + 1`, for
/// every position up to SEP.
pub fn msg_terms<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    dec_words: NodeId,
    words: &WordInput,
    masks: &AttentionMaskSet,
) -> Result<Terms> {
    if !masks.causal {
        return Err(Error::contract("sentence generation requires causal masks"));
    }
    let n = words.valid_len - 1;
    let states = g.slice_rows(dec_words, 0, n)?;
    let z = model.lm_logits(g, states)?;
    let nll = g.nll_rows(z, &words.ids[1..=n])?;
    Ok(Terms {
        parts: vec![nll],
        count: n,
        offset: 0.0,
    })
}

pub fn loss_msg<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    dec_words: NodeId,
    words: &WordInput,
    masks: &AttentionMaskSet,
) -> Result<NodeId> {
    msg_terms(g, model, dec_words, words, masks)?.pool(g)
}

/// Masked-position terms predicting the original tokens.
pub fn mlm_terms<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    dec_words: NodeId,
    plan: &MaskPlan,
    original: &WordInput,
) -> Result<Terms> {
    if plan.masked_words.is_empty() {
        return Err(Error::contract("MLM needs at least one masked word"));
    }
    let states = g.gather(dec_words, &plan.masked_words)?;
    let z = model.lm_logits(g, states)?;
    let targets: Vec<usize> = plan.masked_words.iter().map(|&j| original.ids[j]).collect();
    let nll = g.nll_rows(z, &targets)?;
    Ok(Terms {
        parts: vec![nll],
        count: targets.len(),
        offset: 0.0,
    })
}

pub fn loss_mlm<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    dec_words: NodeId,
    plan: &MaskPlan,
    original: &WordInput,
) -> Result<NodeId> {
    mlm_terms(g, model, dec_words, plan, original)?.pool(g)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub mlm: f64,
    pub moc: f64,
    pub mrpg: f64,
    pub ism: f64,
    pub msg: f64,
}

/// Graph handles of one objective evaluation.
#[derive(Clone, Debug)]
pub struct ObjectiveOutput {
    pub total: NodeId,
    pub mlm: Option<NodeId>,
    pub moc: Option<NodeId>,
    pub mrpg: Option<NodeId>,
    pub ism: Option<NodeId>,
    pub msg: Option<NodeId>,
    /// Masked regions whose predicted label matches the target argmax.
    pub moc_correct: usize,
    pub moc_total: usize,
}

impl ObjectiveOutput {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> LossValues {
        let v = |n: Option<NodeId>| n.map_or(0.0, |n| g.scalar(n).as_f64());
        LossValues {
            total: g.scalar(self.total).as_f64(),
            mlm: v(self.mlm),
            moc: v(self.moc),
            mrpg: v(self.mrpg),
            ism: v(self.ism),
            msg: v(self.msg),
        }
    }
}

fn argmax_row<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn argmax_f32(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Masked-object accuracy with each region masked on its own in turn and
/// the caption left intact: `(correct, total)` over every region.
pub fn moc_accuracy<T: Scalar>(model: &Model<T>, examples: &[Example]) -> Result<(usize, usize)> {
    let (mut correct, mut total) = (0, 0);
    for ex in examples {
        let n = ex.regions.len();
        let masks = AttentionMaskSet::bidirectional(ex.caption.len(), n + 1, ex.caption.valid_len);
        for r in 0..n {
            let mut flags = vec![false; n];
            flags[r] = true;
            let mut g = Graph::new();
            let out = model.forward_full(&mut g, &ex.regions, &ex.caption, &masks, Some(&flags))?;
            let st = g.gather(out.dec_regions, &[r + 1])?;
            let z = model.moc_logits(&mut g, st)?;
            if argmax_row(g.value(z).data()) == argmax_f32(&ex.labels[r]) {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok((correct, total))
}

/// The composite pre-training objective over one batch.
///
/// Three forward passes per example: (a) masked inputs with bidirectional
/// masks feed MOC, MRPG and MLM; (b) unmasked inputs through both encoders
/// feed ISM; (c) unmasked inputs with generation masks feed MSG, reusing
/// the object encoder output of (b).
pub fn overall_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    examples: &[Example],
    batch: &Batch,
    cfg: &ProxyConfig,
) -> Result<ObjectiveOutput> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    if !cfg.any_enabled() {
        return Err(Error::Config("every pre-training objective is disabled".into()));
    }
    if batch.plans.len() != batch.len() {
        return Err(Error::contract("pre-training batch without mask plans"));
    }
    let need_a = cfg.enable_moc || cfg.enable_mrpg || cfg.enable_mlm;
    let need_b = cfg.enable_ism || cfg.enable_msg;

    let mut region_states = Vec::new();
    let mut label_rows: Vec<&[f32]> = Vec::new();
    let mut phrases: Vec<&[usize]> = Vec::new();
    let mut mlm_states = Vec::new();
    let mut mlm_targets = Vec::new();
    let mut enc_obj = Vec::new();
    let mut pooled_obj = Vec::new();
    let mut pooled_words = Vec::new();
    let mut msg_states = Vec::new();
    let mut msg_targets = Vec::new();

    for (k, &i) in batch.indices.iter().enumerate() {
        let ex = &examples[i];
        let plan = &batch.plans[k];
        let words = ex.caption.padded(batch.pad_len);
        let n_r = ex.regions.len() + 1;
        let valid = words.valid_len;
        if need_a {
            let masked_words = plan.apply_words(&words)?;
            let masks = AttentionMaskSet::bidirectional(words.len(), n_r, valid);
            let flags = plan.region_flags(ex.regions.len());
            let out = model.forward_full(g, &ex.regions, &masked_words, &masks, Some(&flags))?;
            if cfg.enable_moc || cfg.enable_mrpg {
                let rows: Vec<usize> = plan.masked_regions.iter().map(|&r| r + 1).collect();
                region_states.push(g.gather(out.dec_regions, &rows)?);
                for &r in &plan.masked_regions {
                    label_rows.push(&ex.labels[r]);
                    phrases.push(&ex.phrases[r]);
                }
            }
            if cfg.enable_mlm {
                mlm_states.push(g.gather(out.dec_words, &plan.masked_words)?);
                mlm_targets.extend(plan.masked_words.iter().map(|&j| words.ids[j]));
            }
        }
        if need_b {
            let r = model.embed_regions(g, &ex.regions, None)?;
            let obj = model.encode_objects(g, r)?;
            enc_obj.push(obj);
            if cfg.enable_ism {
                let masks = AttentionMaskSet::bidirectional(words.len(), n_r, valid);
                let h0 = model.embed_words(g, &words)?;
                let s = model.encode_sentence(g, h0, Some(masks.word_self.clone()))?;
                let head = &model.ids.matcher;
                pooled_obj.push(model.pool_objects(g, head, obj)?);
                pooled_words.push(model.pool_words(g, head, s, valid)?);
            }
            if cfg.enable_msg {
                let masks = AttentionMaskSet::causal(words.len(), n_r, valid);
                let out = model.forward_with_objects(g, obj, &words, &masks)?;
                msg_states.push(g.slice_rows(out.dec_words, 0, valid - 1)?);
                msg_targets.extend_from_slice(&words.ids[1..valid]);
            }
        }
    }

    let mut out = ObjectiveOutput {
        total: NodeId::from_index(0),
        mlm: None,
        moc: None,
        mrpg: None,
        ism: None,
        msg: None,
        moc_correct: 0,
        moc_total: 0,
    };
    let states = if region_states.is_empty() {
        None
    } else {
        Some(g.concat_rows(&region_states)?)
    };
    if cfg.enable_moc {
        let st = states.ok_or_else(|| Error::contract("no masked regions"))?;
        let (terms, logits) = moc_terms(g, model, st, &label_rows)?;
        for (r, gt) in label_rows.iter().enumerate() {
            if argmax_row(g.value(logits).row(r)) == argmax_f32(gt) {
                out.moc_correct += 1;
            }
        }
        out.moc_total = label_rows.len();
        out.moc = Some(terms.pool(g)?);
    }
    if cfg.enable_mrpg {
        let st = states.ok_or_else(|| Error::contract("no masked regions"))?;
        out.mrpg = Some(loss_mrpg(g, model, st, &phrases)?);
    }
    if cfg.enable_mlm {
        let st = g.concat_rows(&mlm_states)?;
        let z = model.lm_logits(g, st)?;
        let nll = g.nll_rows(z, &mlm_targets)?;
        let terms = Terms {
            parts: vec![nll],
            count: mlm_targets.len(),
            offset: 0.0,
        };
        out.mlm = Some(terms.pool(g)?);
    }
    if cfg.enable_ism {
        let n = batch.len();
        let mut objs = pooled_obj.clone();
        let mut words = pooled_words.clone();
        for (k, neg) in batch.negatives.iter().enumerate() {
            match neg.side {
                NegativeSide::Sentence => {
                    objs.push(pooled_obj[k]);
                    words.push(pooled_words[neg.partner]);
                }
                NegativeSide::Image => {
                    objs.push(pooled_obj[neg.partner]);
                    words.push(pooled_words[k]);
                }
            }
        }
        if batch.negatives.len() != n {
            return Err(Error::contract("pre-training batch without ISM negatives"));
        }
        let po = g.concat_rows(&objs)?;
        let pw = g.concat_rows(&words)?;
        let scores = model.head_mlp(g, &model.ids.matcher, po, pw)?;
        let pos = g.slice_rows(scores, 0, n)?;
        let neg = g.slice_rows(scores, n, n)?;
        out.ism = Some(loss_ism(g, pos, neg, cfg.margin)?);
    }
    if cfg.enable_msg {
        let st = g.concat_rows(&msg_states)?;
        let z = model.lm_logits(g, st)?;
        let nll = g.nll_rows(z, &msg_targets)?;
        let terms = Terms {
            parts: vec![nll],
            count: msg_targets.len(),
            offset: 0.0,
        };
        out.msg = Some(terms.pool(g)?);
    }
    let comps: Vec<NodeId> = [out.mlm, out.moc, out.mrpg, out.ism, out.msg].into_iter().flatten().collect();
    let mut total = comps[0];
    for &c in &comps[1..] {
        total = g.add(total, c)?;
    }
    out.total = total;
    Ok(out)
}

#[cfg(test)]
mod tests;
