use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{WordInput, MASK};

/// How a masked region's raw feature is replaced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionReplacement {
    /// The learned mask feature; the box is kept.
    MaskFeature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WordAction {
    Mask,
    Random(usize),
    Keep,
}

/// Which half of a matched pair is swapped for the partner's.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeSide {
    Sentence,
    Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IsmNegative {
    /// Index of the partner example within its batch.
    pub partner: usize,
    pub partner_scene: u64,
    pub side: NegativeSide,
}

/// Per-example masking decisions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    /// Region indices (0-based, IMG excluded), ascending.
    pub masked_regions: Vec<usize>,
    pub region_replacements: Vec<RegionReplacement>,
    /// Positions in the CLS-wrapped word sequence, ascending, never CLS/SEP.
    pub masked_words: Vec<usize>,
    pub word_actions: Vec<WordAction>,
    pub ism_negative: Option<IsmNegative>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub region_prob: f64,
    pub word_prob: f64,
    /// Share of masked words replaced by MASK.
    pub mask_token_frac: f64,
    /// Share of masked words replaced by a random token.
    pub random_token_frac: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            region_prob: 0.15,
            word_prob: 0.15,
            mask_token_frac: 0.8,
            random_token_frac: 0.1,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let p = |x: f64| (0.0..=1.0).contains(&x);
        if !(p(self.region_prob) && p(self.word_prob) && self.region_prob > 0.0 && self.word_prob > 0.0) {
            return Err(Error::Config("mask probabilities must lie in (0, 1]".into()));
        }
        if !(p(self.mask_token_frac) && p(self.random_token_frac))
            || self.mask_token_frac + self.random_token_frac > 1.0
        {
            return Err(Error::Config("word action split must sum to at most 1".into()));
        }
        Ok(())
    }
}

fn bernoulli_set(rng: &mut impl Rng, n: usize, p: f64) -> Vec<usize> {
    loop {
        let picked: Vec<usize> = (0..n).filter(|_| rng.random_bool(p)).collect();
        if !picked.is_empty() {
            return picked;
        }
    }
}

/// Draw a plan for `n_regions` regions and `n_words` content words.
///
/// Each region and each content word is masked independently; an empty
/// draw is redrawn so every example contributes to every masked loss.
pub fn plan_masks(
    n_regions: usize,
    n_words: usize,
    vocab_size: usize,
    rng: &mut impl Rng,
    cfg: &MaskingConfig,
) -> Result<MaskPlan> {
    if n_regions == 0 {
        return Err(Error::EmptyRegions);
    }
    if n_words == 0 {
        return Err(Error::contract("mask planning needs at least one content word"));
    }
    if vocab_size <= 4 {
        return Err(Error::contract("vocabulary has no ordinary tokens"));
    }
    let masked_regions = bernoulli_set(rng, n_regions, cfg.region_prob);
    let region_replacements = vec![RegionReplacement::MaskFeature; masked_regions.len()];
    let masked_words: Vec<usize> = bernoulli_set(rng, n_words, cfg.word_prob)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    let word_actions = masked_words
        .iter()
        .map(|_| {
            let u: f64 = rng.random();
            if u < cfg.mask_token_frac {
                WordAction::Mask
            } else if u < cfg.mask_token_frac + cfg.random_token_frac {
                WordAction::Random(rng.random_range(4..vocab_size))
            } else {
                WordAction::Keep
            }
        })
        .collect();
    Ok(MaskPlan {
        masked_regions,
        region_replacements,
        masked_words,
        word_actions,
        ism_negative: None,
    })
}

impl MaskPlan {
    /// Per-region mask flags.
    pub fn region_flags(&self, n_regions: usize) -> Vec<bool> {
        let mut f = vec![false; n_regions];
        for &i in &self.masked_regions {
            f[i] = true;
        }
        f
    }

    /// Word input with the planned substitutions applied.
    pub fn apply_words(&self, words: &WordInput) -> Result<WordInput> {
        let mut out = words.clone();
        for (&pos, act) in self.masked_words.iter().zip(&self.word_actions) {
            if pos == 0 || pos + 1 >= words.valid_len {
                return Err(Error::contract(format!("masked word position {pos} is a boundary token")));
            }
            match *act {
                WordAction::Mask => out.ids[pos] = MASK,
                WordAction::Random(t) => out.ids[pos] = t,
                WordAction::Keep => {}
            }
        }
        Ok(out)
    }

    /// The same plan for regions reordered so new index `i` is old `perm[i]`.
    pub fn permute_regions(&self, perm: &[usize]) -> Self {
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut masked: Vec<usize> = self.masked_regions.iter().map(|&i| inv[i]).collect();
        masked.sort_unstable();
        MaskPlan {
            masked_regions: masked,
            ..self.clone()
        }
    }
}
