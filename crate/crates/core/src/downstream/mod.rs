//! Fine-tuning and evaluation: question answering, caption-based image
//! retrieval and captioning.

pub mod decode;
pub mod metrics;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use decode::{beam_search, generate_caption, greedy, DecodeConfig, Hypothesis, Strategy};
pub use metrics::{corpus_bleu, eval_caption, eval_recall, rank_of, slot_f1, CaptionScores, Recall};

use crate::data::{hardest_mismatch, BatchMode, BatchStream, Example, Vocab};
use crate::error::{Error, Result};
use crate::model::{AttentionMaskSet, Model, ModelConfig};
use crate::proxy::{loss_ism, MaskingConfig, Terms};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId, Tensor};
use crate::train::{descend, AdamConfig, Checkpoint, OptimState, Schedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Vqa,
    Retrieval,
    Caption,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Vqa, Task::Retrieval, Task::Caption];

    pub fn name(self) -> &'static str {
        match self {
            Task::Vqa => "vqa",
            Task::Retrieval => "retrieval",
            Task::Caption => "caption",
        }
    }

    /// Header of the task's metrics CSV.
    pub fn csv_header(self) -> &'static str {
        match self {
            Task::Vqa => "step,loss,acc",
            Task::Retrieval => "step,loss,R1,R5,R10",
            Task::Caption => "step,nll,bleu4,slot_f1",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}` (expected vqa, retrieval or caption)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub schedule: Schedule,
    pub clip: f64,
    pub seed: u64,
    /// Retrieval triplet margin.
    pub margin: f64,
    /// Retrieval steps that average over all in-batch negatives before
    /// switching to hardest negatives. Hardest-only mining from a cold
    /// start collapses the matcher to a constant score.
    pub mining_warmup: u64,
    /// Validation period in steps; 0 evaluates only after the last step.
    pub eval_every: u64,
    pub decode: DecodeConfig,
    /// Upper bound on evaluation worker threads.
    pub threads: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 300,
            batch_size: 16,
            adam: AdamConfig::with_lr(1e-3),
            schedule: Schedule::default(),
            clip: 5.0,
            seed: 0,
            margin: 0.2,
            mining_warmup: 200,
            eval_every: 0,
            decode: DecodeConfig::default(),
            threads: 1,
        }
    }
}

/// One metrics line. `metrics` holds validation results on evaluation
/// steps and is empty otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskRow {
    pub step: u64,
    pub loss: f64,
    pub metrics: Vec<f64>,
}

impl TaskRow {
    pub fn csv(&self, task: Task) -> String {
        let width = task.csv_header().split(',').count() - 2;
        let mut s = format!("{},{}", self.step, self.loss);
        for k in 0..width {
            s.push(',');
            if let Some(v) = self.metrics.get(k) {
                s.push_str(&v.to_string());
            }
        }
        s
    }
}

pub fn write_task_csv(mut w: impl std::io::Write, task: Task, rows: &[TaskRow]) -> Result<()> {
    writeln!(w, "{}", task.csv_header())?;
    for r in rows {
        writeln!(w, "{}", r.csv(task))?;
    }
    Ok(())
}

/// Model for `task`, freshly initialised from `seed` and then, when a
/// checkpoint is given, overwritten with every tensor it holds. Only the
/// answer head may be missing from the checkpoint.
pub fn init_model(config: &ModelConfig, ckpt: Option<&Checkpoint>, seed: u64) -> Result<Model<f32>> {
    let mut m = Model::new(config.clone(), seed)?;
    if let Some(c) = ckpt {
        for (name, t) in m.params.iter() {
            match c.params.by_name(name) {
                None if name.starts_with("vqa.") => {}
                None => return Err(Error::Integrity(format!("checkpoint lacks tensor `{name}`"))),
                Some(x) if x.shape() != t.shape() => {
                    return Err(Error::Shape {
                        op: "load parameter",
                        lhs: t.shape().to_vec(),
                        rhs: x.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        m.params.overwrite_from(&c.params)?;
    }
    Ok(m)
}

/// Apply `f` to every item on up to `threads` scoped workers; output order
/// follows input order.
pub fn par_map<I: Sync, O: Send>(items: &[I], threads: usize, f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<O>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<O>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

// ----- question answering -------------------------------------------------------

/// Answer logits `1 x A` from the fused encoder outputs.
pub fn vqa_logits<T: Scalar>(g: &mut Graph<T>, model: &Model<T>, ex: &Example, pad_len: usize) -> Result<NodeId> {
    let head = model
        .ids
        .fusion
        .as_ref()
        .ok_or_else(|| Error::Config("model has no answer head (num_answers = 0)".into()))?;
    let r = model.embed_regions(g, &ex.regions, None)?;
    let obj = model.encode_objects(g, r)?;
    let q = ex.question.padded(pad_len.max(ex.question.len()));
    let masks = AttentionMaskSet::bidirectional(q.len(), ex.regions.len() + 1, q.valid_len);
    let h0 = model.embed_words(g, &q)?;
    let s = model.encode_sentence(g, h0, Some(masks.word_self.clone()))?;
    model.pool_head(g, head, obj, s, q.valid_len)
}

/// Soft cross-entropy averaged over the batch; also counts correct argmax
/// answers.
pub fn vqa_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    examples: &[Example],
    indices: &[usize],
    pad_len: usize,
) -> Result<(NodeId, usize)> {
    let a = model.config.num_answers;
    let mut rows = Vec::with_capacity(indices.len());
    let mut targets = Vec::with_capacity(indices.len() * a);
    for &i in indices {
        let ex = &examples[i];
        if ex.answer_target.len() != a {
            return Err(Error::Data(format!(
                "scene {} has {} answer weights for {a} answers",
                ex.scene_id,
                ex.answer_target.len()
            )));
        }
        rows.push(vqa_logits(g, model, ex, pad_len)?);
        targets.extend(ex.answer_target.iter().map(|&w| T::of(w as f64)));
    }
    let z = g.concat_rows(&rows)?;
    let t = Tensor::matrix(indices.len(), a, targets)?;
    let ce = g.cross_entropy_rows(z, &t)?;
    let correct = indices
        .iter()
        .enumerate()
        .filter(|&(r, &i)| argmax(g.value(z).row(r)) == examples[i].best_answer())
        .count();
    let loss = Terms {
        parts: vec![ce],
        count: indices.len(),
        offset: 0.0,
    }
    .pool(g)?;
    Ok((loss, correct))
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted answer index per example.
pub fn vqa_predict(model: &Model<f32>, examples: &[Example], threads: usize) -> Result<Vec<usize>> {
    par_map(examples, threads, |ex| {
        let mut g = Graph::new();
        let z = vqa_logits(&mut g, model, ex, 0)?;
        Ok(argmax(g.value(z).data()))
    })
}

/// Fraction of examples whose argmax answer is the highest-weight answer.
pub fn eval_vqa(model: &Model<f32>, examples: &[Example], threads: usize) -> Result<f64> {
    let pred = vqa_predict(model, examples, threads)?;
    let hits = pred.iter().zip(examples).filter(|(p, e)| **p == e.best_answer()).count();
    Ok(hits as f64 / examples.len().max(1) as f64)
}

/// Mean soft cross-entropy of the answer head over `examples`.
pub fn eval_vqa_loss(model: &Model<f32>, examples: &[Example], threads: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..examples.len()).collect();
    let losses = par_map(&idx, threads, |&i| {
        let mut g = Graph::new();
        let (l, _) = vqa_loss(&mut g, model, examples, &[i], 0)?;
        Ok(g.scalar(l).as_f64())
    })?;
    Ok(losses.iter().sum::<f64>() / examples.len().max(1) as f64)
}

// ----- retrieval ----------------------------------------------------------------

/// Attention-pooled image and sentence vectors of one example under the
/// matching head.
pub fn pooled_pair<T: Scalar>(g: &mut Graph<T>, model: &Model<T>, ex: &Example, pad_len: usize) -> Result<(NodeId, NodeId)> {
    let head = &model.ids.matcher;
    let r = model.embed_regions(g, &ex.regions, None)?;
    let obj = model.encode_objects(g, r)?;
    let w = ex.caption.padded(pad_len.max(ex.caption.len()));
    let masks = AttentionMaskSet::bidirectional(w.len(), ex.regions.len() + 1, w.valid_len);
    let h0 = model.embed_words(g, &w)?;
    let s = model.encode_sentence(g, h0, Some(masks.word_self.clone()))?;
    Ok((model.pool_objects(g, head, obj)?, model.pool_words(g, head, s, w.valid_len)?))
}

/// Row `i * n + j` scores caption `i` against image `j`.
fn all_pairs<T: Scalar>(g: &mut Graph<T>, model: &Model<T>, objs: NodeId, words: NodeId, n: usize) -> Result<NodeId> {
    let img: Vec<usize> = (0..n * n).map(|r| r % n).collect();
    let cap: Vec<usize> = (0..n * n).map(|r| r / n).collect();
    let o = g.gather(objs, &img)?;
    let w = g.gather(words, &cap)?;
    model.head_mlp(g, &model.ids.matcher, o, w)
}

/// Triplet loss against in-batch negatives in both directions. With
/// `hardest`, only the highest-scoring wrong image per caption and the
/// highest-scoring wrong caption per image count; otherwise every
/// mismatched pair does. Also returns the batch score matrix.
pub fn retrieval_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    examples: &[Example],
    indices: &[usize],
    pad_len: usize,
    margin: f64,
    hardest: bool,
) -> Result<(NodeId, Vec<Vec<f64>>)> {
    let n = indices.len();
    if n < 2 {
        return Err(Error::Config("retrieval batches need at least 2 examples".into()));
    }
    let mut po = Vec::with_capacity(n);
    let mut pw = Vec::with_capacity(n);
    for &i in indices {
        let (o, w) = pooled_pair(g, model, &examples[i], pad_len)?;
        po.push(o);
        pw.push(w);
    }
    let objs = g.concat_rows(&po)?;
    let words = g.concat_rows(&pw)?;
    let scores = all_pairs(g, model, objs, words, n)?;
    let sv = g.value(scores).data();
    let s: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| sv[i * n + j].as_f64()).collect()).collect();
    let scene = |k: usize| examples[indices[k]].scene_id;
    let mut pos_rows = Vec::with_capacity(2 * n);
    let mut neg_rows = Vec::with_capacity(2 * n);
    if !hardest {
        for i in 0..n {
            for j in 0..n {
                if scene(j) != scene(i) {
                    pos_rows.extend([i * n + i, j * n + j]);
                    neg_rows.extend([i * n + j, i * n + j]);
                }
            }
        }
        let pos = g.gather(scores, &pos_rows)?;
        let neg = g.gather(scores, &neg_rows)?;
        return Ok((loss_ism(g, pos, neg, margin)?, s));
    }
    for i in 0..n {
        let wrong = |j: usize| scene(j) != scene(i);
        let img = hardest_mismatch(&s[i], i, wrong).ok_or_else(|| Error::Data("batch has no mismatched image".into()))?;
        let col: Vec<f64> = (0..n).map(|c| s[c][i]).collect();
        let cap = hardest_mismatch(&col, i, wrong).ok_or_else(|| Error::Data("batch has no mismatched caption".into()))?;
        pos_rows.extend([i * n + i, i * n + i]);
        neg_rows.extend([i * n + img, cap * n + i]);
    }
    let pos = g.gather(scores, &pos_rows)?;
    let neg = g.gather(scores, &neg_rows)?;
    Ok((loss_ism(g, pos, neg, margin)?, s))
}

/// Caption-by-image matching scores over a pool of examples.
pub fn score_matrix(model: &Model<f32>, examples: &[Example], threads: usize) -> Result<Vec<Vec<f64>>> {
    let pooled = par_map(examples, threads, |ex| {
        let mut g = Graph::new();
        let (o, w) = pooled_pair(&mut g, model, ex, 0)?;
        Ok((g.value(o).clone(), g.value(w).clone()))
    })?;
    let h = model.config.hidden;
    let objs: Vec<f32> = pooled.iter().flat_map(|(o, _)| o.data().to_vec()).collect();
    let objs = Tensor::matrix(examples.len(), h, objs)?;
    let rows: Vec<usize> = (0..examples.len()).collect();
    par_map(&rows, threads, |&i| {
        let mut g = Graph::new();
        let o = g.constant(objs.clone());
        let w = g.constant(pooled[i].1.clone());
        let w = g.gather(w, &vec![0; examples.len()])?;
        let z = model.head_mlp(&mut g, &model.ids.matcher, o, w)?;
        Ok(g.value(z).data().iter().map(|v| v.as_f64()).collect())
    })
}

pub fn eval_retrieval(model: &Model<f32>, examples: &[Example], threads: usize) -> Result<Recall> {
    let s = score_matrix(model, examples, threads)?;
    let pairs: Vec<usize> = (0..examples.len()).collect();
    eval_recall(&s, &pairs)
}

// ----- captioning ---------------------------------------------------------------

/// Teacher-forced next-token terms of one caption under generation masks.
pub fn caption_terms<T: Scalar>(g: &mut Graph<T>, model: &Model<T>, ex: &Example, pad_len: usize) -> Result<Terms> {
    let words = ex.caption.padded(pad_len.max(ex.caption.len()));
    let masks = AttentionMaskSet::causal(words.len(), ex.regions.len() + 1, words.valid_len);
    let out = model.forward_full(g, &ex.regions, &words, &masks, None)?;
    crate::proxy::msg_terms(g, model, out.dec_words, &words, &masks)
}

/// Mean per-token negative log-likelihood over a batch.
pub fn caption_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    examples: &[Example],
    indices: &[usize],
    pad_len: usize,
) -> Result<NodeId> {
    let mut all = Terms::default();
    for &i in indices {
        let t = caption_terms(g, model, &examples[i], pad_len)?;
        all.parts.extend(t.parts);
        all.count += t.count;
    }
    all.pool(g)
}

/// Per-token NLL over a whole set: total NLL / total tokens.
pub fn eval_caption_nll(model: &Model<f32>, examples: &[Example], threads: usize) -> Result<f64> {
    let per = par_map(examples, threads, |ex| {
        let mut g = Graph::new();
        let t = caption_terms(&mut g, model, ex, 0)?;
        let s: f64 = t.parts.iter().flat_map(|&p| g.value(p).data().iter().map(|v| v.as_f64())).sum();
        Ok((s, t.count))
    })?;
    let (s, n) = per.iter().fold((0.0, 0), |(a, b), &(s, n)| (a + s, b + n));
    Ok(s / n.max(1) as f64)
}

/// Decoded captions as token strings.
pub fn generate_all(
    model: &Model<f32>,
    examples: &[Example],
    vocab: &Vocab,
    decode: &DecodeConfig,
    threads: usize,
) -> Result<Vec<Vec<String>>> {
    par_map(examples, threads, |ex| vocab.decode(&generate_caption(model, &ex.regions, decode)?))
}

/// NLL, BLEU-4 and slot F1 of greedy/beam captions against the references.
pub fn eval_captioning(
    model: &Model<f32>,
    examples: &[Example],
    vocab: &Vocab,
    decode: &DecodeConfig,
    threads: usize,
) -> Result<(f64, CaptionScores, Vec<Vec<String>>)> {
    let nll = eval_caption_nll(model, examples, threads)?;
    let gen = generate_all(model, examples, vocab, decode, threads)?;
    let refs: Vec<Vec<String>> = examples
        .iter()
        .map(|e| vocab.decode(e.caption.content()))
        .collect::<Result<_>>()?;
    Ok((nll, eval_caption(&gen, &refs)?, gen))
}

/// Captions TSV: `scene_id<TAB>space-joined tokens` per line.
pub fn captions_tsv(examples: &[Example], captions: &[Vec<String>]) -> String {
    let mut s = String::new();
    for (e, c) in examples.iter().zip(captions) {
        s.push_str(&format!("{}\t{}\n", e.scene_id, c.join(" ")));
    }
    s
}

// ----- fine-tuning loop ---------------------------------------------------------

/// Everything a task needs besides the model.
pub struct TaskData<'a> {
    pub train: &'a [Example],
    pub val: &'a [Example],
    pub vocab: &'a Vocab,
}

/// Validation metrics in CSV column order.
pub fn evaluate(task: Task, model: &Model<f32>, data: &TaskData<'_>, cfg: &FinetuneConfig) -> Result<Vec<f64>> {
    Ok(match task {
        Task::Vqa => vec![eval_vqa(model, data.val, cfg.threads)?],
        Task::Retrieval => {
            let r = eval_retrieval(model, data.val, cfg.threads)?;
            vec![r.r1, r.r5, r.r10]
        }
        Task::Caption => {
            let (_, s, _) = eval_captioning(model, data.val, data.vocab, &cfg.decode, cfg.threads)?;
            vec![s.bleu4, s.slot_f1]
        }
    })
}

/// Fine-tune `model` on one task. Each row carries the training loss of
/// that step; evaluation steps also carry validation metrics.
pub fn finetune(task: Task, model: &mut Model<f32>, data: &TaskData<'_>, cfg: &FinetuneConfig) -> Result<Vec<TaskRow>> {
    cfg.adam.validate()?;
    if task == Task::Vqa && model.config.num_answers == 0 {
        return Err(Error::Config("question answering needs num_answers > 0".into()));
    }
    let mode = match task {
        Task::Vqa => BatchMode::Vqa,
        Task::Retrieval => BatchMode::Retrieval,
        Task::Caption => BatchMode::Caption,
    };
    let mut stream = BatchStream::new(data.train.len(), cfg.batch_size, mode, cfg.seed)?;
    let mut optim = OptimState::new(&model.params, cfg.adam);
    let masking = MaskingConfig::default();
    let mut rows = Vec::new();
    for step in 0..cfg.steps {
        let batch = stream.next_batch(data.train, &masking, model.config.vocab_size, None)?;
        let (idx, pad) = (&batch.indices, batch.pad_len);
        optim.config.lr = cfg.adam.lr * cfg.schedule.factor(step, cfg.steps);
        let (g, loss, _) = descend(model, &mut optim, cfg.clip, step, |g, m| match task {
            Task::Vqa => Ok(vqa_loss(g, m, data.train, idx, pad)?.0),
            Task::Retrieval => Ok(retrieval_loss(g, m, data.train, idx, pad, cfg.margin, step >= cfg.mining_warmup)?.0),
            Task::Caption => caption_loss(g, m, data.train, idx, pad),
        })?;
        let loss = g.scalar(loss).as_f64();
        let last = step + 1 == cfg.steps;
        let due = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        let metrics = if (last || due) && !data.val.is_empty() {
            evaluate(task, model, data, cfg)?
        } else {
            Vec::new()
        };
        rows.push(TaskRow { step, loss, metrics });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests;
