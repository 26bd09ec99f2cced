//! Encoded examples and the shuffled batch stream.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{RegionInput, WordInput};
use crate::proxy::plan::{plan_masks, IsmNegative, MaskPlan, MaskingConfig, NegativeSide};

use super::vocab::Vocab;
use super::world::Corpus;

/// One scene in model-ready form.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub scene_id: u64,
    pub regions: RegionInput,
    pub caption: WordInput,
    /// Object-label distribution per region.
    pub labels: Vec<Vec<f32>>,
    /// Phrase token ids per region.
    pub phrases: Vec<Vec<usize>>,
    pub question: WordInput,
    /// Soft answer target over the answer inventory, summing to 1.
    pub answer_target: Vec<f32>,
}

impl Example {
    /// Index of the highest-weighted answer (lowest index on ties).
    pub fn best_answer(&self) -> usize {
        argmax(&self.answer_target)
    }
}

pub(crate) fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Encode every scene against `vocab` and the answer inventory `answers`.
pub fn encode_examples(corpus: &Corpus, vocab: &Vocab, answers: &[String]) -> Result<Vec<Example>> {
    corpus
        .scenes
        .iter()
        .map(|s| {
            let regions = RegionInput {
                features: s.regions.iter().map(|r| r.feat.clone()).collect(),
                boxes: s.regions.iter().map(|r| r.bbox).collect(),
            };
            let phrases = s
                .regions
                .iter()
                .map(|r| vocab.encode(&r.phrase))
                .collect::<Result<Vec<_>>>()?;
            let mut answer_target = vec![0.0f32; answers.len()];
            let total: f64 = s.qa.answers.values().map(|&w| w as f64).sum();
            if total <= 0.0 {
                return Err(Error::Data(format!("scene {}: answer weights sum to zero", s.scene_id)));
            }
            for (a, &w) in &s.qa.answers {
                let k = answers
                    .iter()
                    .position(|x| x == a)
                    .ok_or_else(|| Error::Data(format!("answer {a:?} is not in the answer inventory")))?;
                answer_target[k] = (w as f64 / total) as f32;
            }
            Ok(Example {
                scene_id: s.scene_id,
                regions,
                caption: WordInput::wrap(&vocab.encode(&s.caption)?),
                labels: s.regions.iter().map(|r| r.label_dist.clone()).collect(),
                phrases,
                question: WordInput::wrap(&vocab.encode(&s.qa.question)?),
                answer_target,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    Pretrain,
    Retrieval,
    Vqa,
    Caption,
}

impl BatchMode {
    fn needs_pairs(self) -> bool {
        matches!(self, BatchMode::Pretrain | BatchMode::Retrieval)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Example indices.
    pub indices: Vec<usize>,
    /// Mask plans, pretraining only.
    pub plans: Vec<MaskPlan>,
    /// Mismatched partner per example, pretraining and retrieval only.
    pub negatives: Vec<IsmNegative>,
    /// Common padded word length.
    pub pad_len: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Scores `s[caption i][image j]` over the examples of a batch.
pub type Scorer<'a> = dyn FnMut(&[usize]) -> Result<Vec<Vec<f64>>> + 'a;

/// Highest-scoring candidate other than `positive` among those accepted by
/// `valid`; ties go to the lower index.
pub fn hardest_mismatch(scores: &[f64], positive: usize, valid: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &s) in scores.iter().enumerate() {
        if j == positive || !valid(j) {
            continue;
        }
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(j);
        }
    }
    best
}

/// Resumable position of a [`BatchStream`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub epoch: u64,
    pub cursor: usize,
    /// Word position of the planning RNG.
    pub rng_word_pos: u128,
}

/// Endless sequence of shuffled epochs over `n` examples.
///
/// The visiting order of epoch `e` comes from stream `e + 1` of the seed;
/// mask plans and negatives come from stream 0, so a stream can be resumed
/// from `(epoch, cursor, rng position)` alone.
#[derive(Clone, Debug)]
pub struct BatchStream {
    n: usize,
    batch_size: usize,
    mode: BatchMode,
    seed: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(n: usize, batch_size: usize, mode: BatchMode, seed: u64) -> Result<Self> {
        if batch_size == 0 || (mode.needs_pairs() && batch_size < 2) {
            return Err(Error::Config(format!(
                "batch_size {batch_size} is too small for {mode:?} batches (need at least 2)"
            )));
        }
        if n == 0 || (mode.needs_pairs() && n < 2) {
            return Err(Error::Config(format!("{n} examples cannot form {mode:?} batches")));
        }
        let mut s = BatchStream {
            n,
            batch_size,
            mode,
            seed,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order = s.epoch_order(0);
        Ok(s)
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch + 1);
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn state(&self) -> StreamState {
        StreamState {
            epoch: self.epoch,
            cursor: self.cursor,
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn restore(&mut self, st: StreamState) -> Result<()> {
        if st.cursor > self.n {
            return Err(Error::Integrity(format!("stream cursor {} beyond {} examples", st.cursor, self.n)));
        }
        self.epoch = st.epoch;
        self.cursor = st.cursor;
        self.order = self.epoch_order(st.epoch);
        self.rng.set_word_pos(st.rng_word_pos);
        Ok(())
    }

    /// Next batch, rolling into a new epoch when the current one is spent.
    /// A lone leftover example joins the preceding batch in paired modes.
    pub fn next_batch(
        &mut self,
        examples: &[Example],
        masking: &MaskingConfig,
        vocab_size: usize,
        scorer: Option<&mut Scorer<'_>>,
    ) -> Result<Batch> {
        if examples.len() != self.n {
            return Err(Error::contract(format!("stream over {} examples fed {}", self.n, examples.len())));
        }
        if self.cursor >= self.n {
            self.epoch += 1;
            self.cursor = 0;
            self.order = self.epoch_order(self.epoch);
        }
        let mut end = (self.cursor + self.batch_size).min(self.n);
        if self.mode.needs_pairs() && self.n - end == 1 {
            end = self.n;
        }
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        self.assemble(examples, indices, masking, vocab_size, scorer)
    }

    fn assemble(
        &mut self,
        examples: &[Example],
        indices: Vec<usize>,
        masking: &MaskingConfig,
        vocab_size: usize,
        scorer: Option<&mut Scorer<'_>>,
    ) -> Result<Batch> {
        let words = |e: &Example| match self.mode {
            BatchMode::Vqa => e.question.len(),
            _ => e.caption.len(),
        };
        let pad_len = indices.iter().map(|&i| words(&examples[i])).max().unwrap_or(0);
        let scene = |k: usize| examples[indices[k]].scene_id;
        let mut plans = Vec::new();
        let mut negatives = Vec::new();
        match self.mode {
            BatchMode::Pretrain => {
                for (k, &i) in indices.iter().enumerate() {
                    let e = &examples[i];
                    let mut plan =
                        plan_masks(e.regions.len(), e.caption.valid_len - 2, vocab_size, &mut self.rng, masking)?;
                    let others: Vec<usize> = (0..indices.len()).filter(|&j| scene(j) != scene(k)).collect();
                    if others.is_empty() {
                        return Err(Error::Data("batch has no mismatched partner".into()));
                    }
                    let partner = others[self.rng.random_range(0..others.len())];
                    let side = if self.rng.random_bool(0.5) {
                        NegativeSide::Sentence
                    } else {
                        NegativeSide::Image
                    };
                    let neg = IsmNegative {
                        partner,
                        partner_scene: scene(partner),
                        side,
                    };
                    plan.ism_negative = Some(neg);
                    plans.push(plan);
                    negatives.push(neg);
                }
            }
            BatchMode::Retrieval => {
                let scores = match scorer {
                    Some(f) => Some(f(&indices)?),
                    None => None,
                };
                for k in 0..indices.len() {
                    let valid = |j: usize| scene(j) != scene(k);
                    let partner = match &scores {
                        Some(s) => hardest_mismatch(&s[k], k, valid),
                        None => {
                            let others: Vec<usize> = (0..indices.len()).filter(|&j| valid(j)).collect();
                            (!others.is_empty()).then(|| others[self.rng.random_range(0..others.len())])
                        }
                    }
                    .ok_or_else(|| Error::Data("batch has no mismatched partner".into()))?;
                    negatives.push(IsmNegative {
                        partner,
                        partner_scene: scene(partner),
                        side: NegativeSide::Image,
                    });
                }
            }
            BatchMode::Vqa | BatchMode::Caption => {}
        }
        Ok(Batch {
            indices,
            plans,
            negatives,
            pad_len,
        })
    }
}

/// All batches of one epoch.
pub fn make_batches(
    examples: &[Example],
    vocab_size: usize,
    batch_size: usize,
    seed: u64,
    mode: BatchMode,
    masking: &MaskingConfig,
) -> Result<Vec<Batch>> {
    let mut s = BatchStream::new(examples.len(), batch_size, mode, seed)?;
    let mut out = Vec::new();
    loop {
        out.push(s.next_batch(examples, masking, vocab_size, None)?);
        if s.cursor >= s.n {
            return Ok(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::world::{generate_world, WorldConfig};

    fn examples(n: usize) -> (Vec<Example>, usize) {
        let c = generate_world(
            2,
            &WorldConfig {
                n_scenes: n,
                ..Default::default()
            },
        )
        .unwrap();
        let v = Vocab::build(&c).unwrap();
        (encode_examples(&c, &v, &c.answer_set()).unwrap(), v.len())
    }

    #[test]
    fn epoch_visits_every_example_once() {
        let (ex, v) = examples(37);
        for mode in [BatchMode::Pretrain, BatchMode::Vqa] {
            let bs = make_batches(&ex, v, 4, 1, mode, &MaskingConfig::default()).unwrap();
            let mut seen: Vec<usize> = bs.iter().flat_map(|b| b.indices.clone()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..37).collect::<Vec<_>>());
            assert!(bs.iter().all(|b| b.len() >= 2 || mode == BatchMode::Vqa));
        }
    }

    #[test]
    fn negatives_are_mismatched() {
        let (ex, v) = examples(40);
        for b in make_batches(&ex, v, 5, 3, BatchMode::Pretrain, &MaskingConfig::default()).unwrap() {
            for (k, n) in b.negatives.iter().enumerate() {
                assert_ne!(ex[b.indices[k]].scene_id, n.partner_scene);
                assert_eq!(ex[b.indices[n.partner]].scene_id, n.partner_scene);
                assert_eq!(b.plans[k].ism_negative, Some(*n));
            }
        }
    }

    #[test]
    fn scorer_picks_the_hardest_mismatch() {
        let (ex, v) = examples(8);
        let mut s = BatchStream::new(8, 4, BatchMode::Retrieval, 0).unwrap();
        let mut scorer = |idx: &[usize]| -> Result<Vec<Vec<f64>>> {
            let n = idx.len();
            Ok((0..n)
                .map(|i| (0..n).map(|j| if j == (i + 2) % n { 5.0 } else if i == j { 9.0 } else { 1.0 }).collect())
                .collect())
        };
        let b = s.next_batch(&ex, &MaskingConfig::default(), v, Some(&mut scorer)).unwrap();
        for (k, n) in b.negatives.iter().enumerate() {
            assert_eq!(n.partner, (k + 2) % 4);
        }
    }

    #[test]
    fn pairs_need_two_examples() {
        assert!(matches!(BatchStream::new(10, 1, BatchMode::Pretrain, 0), Err(Error::Config(_))));
        assert!(BatchStream::new(10, 1, BatchMode::Caption, 0).is_ok());
    }

    #[test]
    fn resume_reproduces_the_stream() {
        let (ex, v) = examples(11);
        let m = MaskingConfig::default();
        let mut a = BatchStream::new(11, 3, BatchMode::Pretrain, 9).unwrap();
        for _ in 0..5 {
            a.next_batch(&ex, &m, v, None).unwrap();
        }
        let st = a.state();
        let mut b = BatchStream::new(11, 3, BatchMode::Pretrain, 9).unwrap();
        b.restore(st).unwrap();
        for _ in 0..7 {
            assert_eq!(a.next_batch(&ex, &m, v, None).unwrap(), b.next_batch(&ex, &m, v, None).unwrap());
        }
    }

    #[test]
    fn hardest_mismatch_tie_goes_low() {
        assert_eq!(hardest_mismatch(&[1.0, 3.0, 3.0, 0.0], 0, |_| true), Some(1));
        assert_eq!(hardest_mismatch(&[1.0, 3.0, 3.0], 1, |j| j != 2), Some(0));
        assert_eq!(hardest_mismatch(&[1.0], 0, |_| true), None);
    }
}
