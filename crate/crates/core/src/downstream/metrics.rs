//! Task metrics: recall@K, corpus BLEU-4 and caption slot F1.

use std::collections::HashMap;

use serde::Serialize;

use crate::data::caption_slots;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Recall {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

/// Rank of image `target` for one caption's scores: images scoring higher,
/// plus equal-scoring images with a lower index, come first.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < target))
        .count()
}

/// Recall@{1,5,10} of a caption-by-image score matrix; `pairs[i]` is the
/// image paired with caption `i`.
pub fn eval_recall(scores: &[Vec<f64>], pairs: &[usize]) -> Result<Recall> {
    if scores.is_empty() || scores.len() != pairs.len() {
        return Err(Error::contract(format!(
            "{} score rows for {} caption pairs",
            scores.len(),
            pairs.len()
        )));
    }
    let mut hits = [0usize; 3];
    for (i, (row, &p)) in scores.iter().zip(pairs).enumerate() {
        if p >= row.len() {
            return Err(Error::contract(format!(
                "caption {i} is paired with image {p}, but only {} images were scored",
                row.len()
            )));
        }
        let r = rank_of(row, p);
        for (h, k) in hits.iter_mut().zip([1, 5, 10]) {
            if r < k {
                *h += 1;
            }
        }
    }
    let n = scores.len() as f64;
    Ok(Recall {
        r1: hits[0] as f64 / n,
        r5: hits[1] as f64 / n,
        r10: hits[2] as f64 / n,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CaptionScores {
    pub bleu4: f64,
    pub slot_f1: f64,
}

fn ngrams<S: AsRef<str>>(toks: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4: clipped n-gram precisions pooled over the corpus, uniform
/// weights, no smoothing, brevity penalty against the closest reference
/// length (shorter wins ties).
pub fn corpus_bleu<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<Vec<S>>]) -> Result<f64> {
    if candidates.len() != references.len() || references.iter().any(Vec::is_empty) {
        return Err(Error::contract("every candidate needs at least one reference"));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("nonempty references");
        for n in 1..=4 {
            let cg = ngrams(cand, n);
            let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &cg {
                matched[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if c_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

/// Micro F1 over `(color, shape)` mentions extracted with the caption
/// grammar, counted as multisets per caption.
pub fn slot_f1<S: AsRef<str>>(candidates: &[Vec<S>], truth: &[Vec<S>]) -> f64 {
    let (mut tp, mut pred, mut gold) = (0usize, 0usize, 0usize);
    let own = |t: &[S]| -> Vec<String> { t.iter().map(|s| s.as_ref().to_string()).collect() };
    for (c, t) in candidates.iter().zip(truth) {
        let mut ps = caption_slots(&own(c));
        let mut gs = caption_slots(&own(t));
        pred += ps.len();
        gold += gs.len();
        ps.sort();
        gs.sort();
        let (mut i, mut j) = (0, 0);
        while i < ps.len() && j < gs.len() {
            match ps[i].cmp(&gs[j]) {
                std::cmp::Ordering::Equal => {
                    tp += 1;
                    i += 1;
                    j += 1;
                }
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
            }
        }
    }
    if pred + gold == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (pred + gold) as f64
}

/// BLEU-4 against single references plus slot F1 against the same captions.
pub fn eval_caption<S: AsRef<str>>(generated: &[Vec<S>], references: &[Vec<S>]) -> Result<CaptionScores> {
    if references.is_empty() {
        return Err(Error::contract("caption evaluation needs references"));
    }
    let refs: Vec<Vec<Vec<&str>>> = references
        .iter()
        .map(|r| vec![r.iter().map(AsRef::as_ref).collect()])
        .collect();
    let cands: Vec<Vec<&str>> = generated.iter().map(|c| c.iter().map(AsRef::as_ref).collect()).collect();
    Ok(CaptionScores {
        bleu4: corpus_bleu(&cands, &refs)?,
        slot_f1: slot_f1(generated, references),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identity_matrix_recall() {
        let n = 12;
        let s: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
        let pairs: Vec<usize> = (0..n).collect();
        let r = eval_recall(&s, &pairs).unwrap();
        assert_eq!((r.r1, r.r5, r.r10), (1.0, 1.0, 1.0));
    }

    #[test]
    fn constant_matrix_uses_tie_rule() {
        let n = 20;
        let s = vec![vec![0.5; n]; n];
        let pairs: Vec<usize> = (0..n).collect();
        let r = eval_recall(&s, &pairs).unwrap();
        assert_eq!(r.r1, 1.0 / n as f64);
        assert_eq!(r.r5, 5.0 / n as f64);
        assert_eq!(r.r10, 10.0 / n as f64);
    }

    #[test]
    fn permuted_diagonal() {
        let perm = [3usize, 0, 4, 1, 2];
        let s: Vec<Vec<f64>> = perm.iter().map(|&p| (0..5).map(|j| if j == p { 2.0 } else { -1.0 }).collect()).collect();
        assert_eq!(eval_recall(&s, &perm).unwrap().r1, 1.0);
    }

    #[test]
    fn single_image_pool() {
        let r = eval_recall(&[vec![-3.0]], &[0]).unwrap();
        assert_eq!((r.r1, r.r5, r.r10), (1.0, 1.0, 1.0));
    }

    #[test]
    fn missing_pair_is_contract_error() {
        assert!(matches!(eval_recall(&[vec![0.0, 1.0]], &[2]), Err(Error::Contract(_))));
        assert!(matches!(eval_recall(&[vec![0.0, 1.0]], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let a = vec![toks("a red circle and a blue square")];
        let s = eval_caption(&a, &a).unwrap();
        assert_eq!((s.bleu4, s.slot_f1), (1.0, 1.0));
        let b = vec![toks("x y z w v u")];
        assert_eq!(eval_caption(&b, &a).unwrap().bleu4, 0.0);
    }

    #[test]
    fn bleu_by_hand() {
        // Candidate 1: "a red circle and a blue square" vs "a red circle and a green square"
        //   1-grams 7, matched 6; 2-grams 6, matched 4; 3-grams 5, matched 3; 4-grams 4, matched 2.
        // Candidate 2: "a green star" vs "a green star and a red circle"
        //   1-grams 3/3; 2-grams 2/2; 3-grams 1/1; 4-grams 0/0.
        // Totals: 9/10, 6/8, 4/6, 2/4; c = 10, r = 7 + 7 = 14.
        let cands = vec![toks("a red circle and a blue square"), toks("a green star")];
        let refs = vec![
            vec![toks("a red circle and a green square")],
            vec![toks("a green star and a red circle")],
        ];
        let p: f64 = (9.0f64 / 10.0).ln() + (6.0f64 / 8.0).ln() + (4.0f64 / 6.0).ln() + (2.0f64 / 4.0).ln();
        let expect = (1.0 - 14.0 / 10.0f64).exp() * (p / 4.0).exp();
        let got = corpus_bleu(&cands, &refs).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn slot_f1_partial() {
        let c = vec![toks("a red circle and a blue square")];
        let t = vec![toks("a red circle and a green square and a blue star")];
        // pred {red circle, blue square}; gold {red circle, green square, blue star}
        assert!((slot_f1(&c, &t) - 2.0 / 5.0).abs() < 1e-12);
    }
}
