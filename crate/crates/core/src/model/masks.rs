//! Attention allow-matrices for the sentence encoder and the joint
//! word+region decoder stream.
//!
//! The joint stream always places the word block first, followed by the
//! region block (IMG token, then regions).

use std::rc::Rc;

use crate::tensor::Mask;

/// Masks for one forward pass.
#[derive(Clone, Debug)]
pub struct AttentionMaskSet {
    /// `(n_words x n_words)` allow-matrix for the sentence encoder.
    pub word_self: Rc<Mask>,
    /// `(T x T)` allow-matrix for the decoder, `T = n_words + n_region_rows`.
    pub joint: Rc<Mask>,
    /// Set only by the causal builders; generation losses require it.
    pub causal: bool,
    n_words: usize,
    n_region_rows: usize,
}

impl AttentionMaskSet {
    /// Full visibility over the valid prefix of `n_words` word rows.
    ///
    /// `n_region_rows` counts the IMG token. Positions at or beyond
    /// `valid_words` are padding and are never attended.
    pub fn bidirectional(n_words: usize, n_region_rows: usize, valid_words: usize) -> Self {
        let t = n_words + n_region_rows;
        let word_self = Mask::from_fn(n_words, n_words, |_, c| c < valid_words);
        let joint = Mask::from_fn(t, t, |_, c| c >= n_words || c < valid_words);
        AttentionMaskSet {
            word_self: Rc::new(word_self),
            joint: Rc::new(joint),
            causal: false,
            n_words,
            n_region_rows,
        }
    }

    /// Generation masks: word `j` sees words `<= j` and every region; region
    /// rows see regions only, so no future word can reach a word row through
    /// a region state.
    pub fn causal(n_words: usize, n_region_rows: usize, valid_words: usize) -> Self {
        let t = n_words + n_region_rows;
        let word_self = Mask::from_fn(n_words, n_words, |r, c| c <= r && c < valid_words);
        let joint = Mask::from_fn(t, t, |r, c| {
            let col_is_word = c < n_words;
            if r < n_words {
                !col_is_word || (c <= r && c < valid_words)
            } else {
                !col_is_word
            }
        });
        AttentionMaskSet {
            word_self: Rc::new(word_self),
            joint: Rc::new(joint),
            causal: true,
            n_words,
            n_region_rows,
        }
    }

    pub fn n_words(&self) -> usize {
        self.n_words
    }

    pub fn n_region_rows(&self) -> usize {
        self.n_region_rows
    }

    /// True when neither mask restricts anything.
    pub fn is_unrestricted(&self) -> bool {
        self.word_self.is_all_true() && self.joint.is_all_true()
    }
}

/// Bidirectional masks for a sentence of `n_s` content words and `n_i`
/// regions.
pub fn bidirectional_masks(n_s: usize, n_i: usize) -> AttentionMaskSet {
    AttentionMaskSet::bidirectional(n_s + 2, n_i + 1, n_s + 2)
}

/// Causal masks for a sentence of `n_s` content words and `n_i` regions.
pub fn causal_masks(n_s: usize, n_i: usize) -> AttentionMaskSet {
    AttentionMaskSet::causal(n_s + 2, n_i + 1, n_s + 2)
}
