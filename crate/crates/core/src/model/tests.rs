use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::{check_gradients, GradCheckConfig};

const V: usize = 20;

fn cfg() -> ModelConfig {
    ModelConfig::tiny(V, 5, 12)
}

fn regions(n: usize, dr: usize, seed: u64) -> RegionInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = (0..n)
        .map(|_| (0..dr).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let boxes = (0..n)
        .map(|_| {
            let x1 = rng.random_range(0.0f32..0.5);
            let y1 = rng.random_range(0.0f32..0.5);
            let x2 = x1 + rng.random_range(0.1f32..0.5);
            let y2 = y1 + rng.random_range(0.1f32..0.5);
            [x1, y1, x2, y2, (x2 - x1) * (y2 - y1)]
        })
        .collect();
    RegionInput { features, boxes }
}

fn words(n: usize, seed: u64) -> WordInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content: Vec<usize> = (0..n).map(|_| rng.random_range(4..V)).collect();
    WordInput::wrap(&content)
}

fn model64() -> Model<f64> {
    let mut c = cfg();
    c.init_range = 0.5;
    Model::new(c, 11).unwrap()
}

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn img_token_of_identical_regions_is_that_region() {
    let m = model64();
    let mut r = regions(4, 12, 1);
    for i in 1..4 {
        r.features[i] = r.features[0].clone();
    }
    let single = RegionInput {
        features: vec![r.features[0].clone()],
        boxes: vec![r.boxes[0]],
    };
    let mut g = Graph::new();
    let a = m.embed_regions(&mut g, &r, None).unwrap();
    let b = m.embed_regions(&mut g, &single, None).unwrap();
    assert_eq!(g.value(a).row(0), g.value(b).row(0));
    assert_eq!(g.value(b).rows(), 2);
}

#[test]
fn empty_region_set_is_rejected() {
    let m = model64();
    let r = RegionInput {
        features: vec![],
        boxes: vec![],
    };
    let err = m.embed_regions(&mut Graph::new(), &r, None).unwrap_err();
    assert_eq!(err.to_string(), "empty region set");
}

#[test]
fn degenerate_boxes_are_rejected() {
    let c = cfg();
    let mut r = regions(2, 12, 1);
    r.boxes[1] = [0.5, 0.2, 0.5, 0.4, 0.1];
    assert!(r.validate(&c).is_err());
}

#[test]
fn region_permutation_moves_rows_and_fixes_img() {
    let m = model64();
    let r = regions(5, 12, 2);
    let perm = [3, 0, 4, 1, 2];
    let mut g = Graph::new();
    let a = m.embed_regions(&mut g, &r, None).unwrap();
    let b = m.embed_regions(&mut g, &r.permuted(&perm), None).unwrap();
    let ea = m.encode_objects(&mut g, a).unwrap();
    let eb = m.encode_objects(&mut g, b).unwrap();
    for (x, y) in [(a, b), (ea, eb)] {
        assert_eq!(g.value(x).row(0), g.value(y).row(0));
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(g.value(y).row(i + 1), g.value(x).row(p + 1));
        }
    }
}

#[test]
fn word_embeddings_depend_on_position_and_token() {
    let m = model64();
    let mut g = Graph::new();
    let w = m.embed_words(&mut g, &WordInput::wrap(&[7, 7])).unwrap();
    assert_ne!(g.value(w).row(1), g.value(w).row(2));
    let u = m.embed_words(&mut g, &WordInput::wrap(&[8, 7])).unwrap();
    assert_ne!(g.value(w).row(1), g.value(u).row(1));
    assert_eq!(g.value(w).row(2), g.value(u).row(2));
}

#[test]
fn word_input_errors() {
    let m = model64();
    let mut g = Graph::new();
    let bad = WordInput::wrap(&[V + 3]);
    assert!(matches!(m.embed_words(&mut g, &bad), Err(Error::Vocab { .. })));
    let long = WordInput::wrap(&vec![5; m.config.max_seq]);
    assert!(matches!(m.embed_words(&mut g, &long), Err(Error::Length { .. })));
}

#[test]
fn object_encoder_shapes() {
    let mut c = cfg();
    c.init_range = 0.5;
    let m: Model<f32> = Model::new(c, 2).unwrap();
    for n in [1, 5, 100] {
        let mut g = Graph::new();
        let r = m.embed_regions(&mut g, &regions(n, 12, n as u64), None).unwrap();
        let e = m.encode_objects(&mut g, r).unwrap();
        assert_eq!(g.shape(e), &[n + 1, 8]);
    }
}

#[test]
fn zeroed_sublayers_give_layer_norm_cascade() {
    let mut c = cfg();
    c.obj_layers = 3;
    let mut m: Model<f64> = Model::new(c, 5).unwrap();
    for l in m.ids.obj.clone() {
        for id in [l.wo, l.bo, l.w2, l.b2] {
            m.params.get_mut(id).data_mut().fill(0.0);
        }
    }
    let mut g = Graph::new();
    let r = m.embed_regions(&mut g, &regions(3, 12, 9), None).unwrap();
    let e = m.encode_objects(&mut g, r).unwrap();
    let mut want = r;
    for l in &m.ids.obj {
        for (gm, bt) in [(l.ln1_g, l.ln1_b), (l.ln2_g, l.ln2_b)] {
            let (gm, bt) = (g.param(&m.params, gm), g.param(&m.params, bt));
            want = g.layer_norm(want, gm, bt, 1e-5).unwrap();
        }
    }
    assert_eq!(g.value(e), g.value(want));
}

#[test]
fn mask_no_op_is_bitwise() {
    let m = model64();
    let (r, w) = (regions(3, 12, 4), words(5, 4));
    let masks = bidirectional_masks(5, 3);
    let mut g = Graph::new();
    let a = m.forward_full(&mut g, &r, &w, &masks, None).unwrap();
    let h0 = m.embed_words(&mut g, &w).unwrap();
    let s = m.encode_sentence(&mut g, h0, None).unwrap();
    let (dw, dr) = m.decode_multimodal(&mut g, a.enc_obj, s, None).unwrap();
    assert_eq!(bits(g.value(a.enc_words)), bits(g.value(s)));
    assert_eq!(bits(g.value(a.dec_words)), bits(g.value(dw)));
    assert_eq!(bits(g.value(a.dec_regions)), bits(g.value(dr)));
}

#[test]
fn forward_is_deterministic() {
    let m = model64();
    let (r, w) = (regions(4, 12, 5), words(6, 5));
    let masks = causal_masks(6, 4);
    let run = || {
        let mut g = Graph::new();
        let o = m.forward_full(&mut g, &r, &w, &masks, None).unwrap();
        [o.enc_obj, o.enc_words, o.dec_words, o.dec_regions].map(|n| bits(g.value(n)))
    };
    assert_eq!(run(), run());
}

#[test]
fn causal_outputs_ignore_future_words() {
    let m = model64();
    let r = regions(3, 12, 6);
    let base = words(8, 6);
    let n = base.len();
    let masks = causal_masks(8, 3);
    let mut g = Graph::new();
    let o = m.forward_full(&mut g, &r, &base, &masks, None).unwrap();
    for j in 0..n - 1 {
        let mut w = base.clone();
        for k in j + 1..n - 1 {
            w.ids[k] = 4 + (w.ids[k] + 3) % (V - 4);
        }
        let p = m.forward_full(&mut g, &r, &w, &masks, None).unwrap();
        for row in 0..=j {
            assert_eq!(g.value(o.enc_words).row(row), g.value(p.enc_words).row(row));
            assert_eq!(g.value(o.dec_words).row(row), g.value(p.dec_words).row(row));
        }
        assert_eq!(g.value(o.dec_regions), g.value(p.dec_regions));
    }
}

#[test]
fn word_outputs_invariant_to_region_order() {
    let m = model64();
    let r = regions(6, 12, 7);
    let w = words(4, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for masks in [bidirectional_masks(4, 6), causal_masks(4, 6)] {
        let mut g = Graph::new();
        let o = m.forward_full(&mut g, &r, &w, &masks, None).unwrap();
        for _ in 0..5 {
            let mut perm: Vec<usize> = (0..6).collect();
            perm.shuffle(&mut rng);
            let p = m.forward_full(&mut g, &r.permuted(&perm), &w, &masks, None).unwrap();
            assert_eq!(bits(g.value(o.enc_words)), bits(g.value(p.enc_words)));
            assert_eq!(bits(g.value(o.dec_words)), bits(g.value(p.dec_words)));
            for (i, &pi) in perm.iter().enumerate() {
                assert_eq!(g.value(p.dec_regions).row(i + 1), g.value(o.dec_regions).row(pi + 1));
            }
        }
    }
}

#[test]
fn padded_forward_matches_unpadded_on_valid_rows() {
    let m = model64();
    let r = regions(3, 12, 8);
    let w = words(5, 8);
    let padded = w.padded(12);
    for causal in [false, true] {
        let (a_m, b_m) = if causal {
            (causal_masks(5, 3), AttentionMaskSet::causal(12, 4, w.len()))
        } else {
            (bidirectional_masks(5, 3), AttentionMaskSet::bidirectional(12, 4, w.len()))
        };
        let mut g = Graph::new();
        let a = m.forward_full(&mut g, &r, &w, &a_m, None).unwrap();
        let b = m.forward_full(&mut g, &r, &padded, &b_m, None).unwrap();
        for row in 0..w.len() {
            assert_eq!(g.value(a.dec_words).row(row), g.value(b.dec_words).row(row));
        }
        assert_eq!(g.value(a.dec_regions), g.value(b.dec_regions));
    }
}

#[test]
fn block_shapes_follow_inputs() {
    let m = model64();
    for (ns, ni) in [(1, 1), (3, 5), (10, 2)] {
        let mut g = Graph::new();
        let o = m
            .forward_full(&mut g, &regions(ni, 12, 1), &words(ns, 1), &bidirectional_masks(ns, ni), None)
            .unwrap();
        assert_eq!(g.shape(o.dec_words), &[ns + 2, 8]);
        assert_eq!(g.shape(o.dec_regions), &[ni + 1, 8]);
    }
}

#[test]
fn masked_region_uses_mask_vector() {
    let m = model64();
    let r = regions(3, 12, 3);
    let mut other = r.clone();
    other.features[1] = vec![0.25; 12];
    let flags = [false, true, false];
    let mut g = Graph::new();
    let a = m.embed_regions(&mut g, &r, Some(&flags)).unwrap();
    let b = m.embed_regions(&mut g, &other, Some(&flags)).unwrap();
    assert_eq!(g.value(a), g.value(b));
    let c = m.embed_regions(&mut g, &r, None).unwrap();
    assert_ne!(g.value(a).row(2), g.value(c).row(2));
    assert_eq!(g.value(a).row(1), g.value(c).row(1));
}

#[test]
fn incremental_decoding_matches_full_forward() {
    let mut c = cfg();
    c.sent_layers = 2;
    c.dec_layers = 2;
    c.init_range = 0.5;
    let m: Model<f64> = Model::new(c, 3).unwrap();
    let r = regions(4, 12, 10);
    let w = words(7, 10);
    let mut g = Graph::new();
    let o = m.forward_full(&mut g, &r, &w, &causal_masks(7, 4), None).unwrap();
    let z = m.lm_logits(&mut g, o.dec_words).unwrap();
    let mut dec = IncrementalDecoder::new(&m, &r).unwrap();
    assert_eq!(dec.object_states(), g.value(o.enc_obj));
    for (j, &tok) in w.ids.iter().enumerate() {
        let step = dec.step(tok).unwrap();
        assert_eq!(step.as_slice(), g.value(z).row(j), "step {j}");
    }
}

#[test]
fn single_layer_gradcheck() {
    let m = model64();
    let l = m.ids.dec[0].clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = layers::uniform::<f64>(&mut rng, &[5, 8], 1.0);
    let wts = layers::uniform::<f64>(&mut rng, &[5, 8], 1.0);
    let mask = std::rc::Rc::new(crate::tensor::Mask::from_fn(5, 5, |r, c| c <= r));
    let mut store = ParamStore::new();
    let mut map = Vec::new();
    for id in [l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln1_g, l.ln1_b, l.w1, l.b1, l.w2, l.b2, l.ln2_g, l.ln2_b] {
        map.push(store.add(m.params.name(id), m.params.get(id).clone()).unwrap());
    }
    let local = LayerIds {
        wq: map[0],
        bq: map[1],
        wk: map[2],
        bk: map[3],
        wv: map[4],
        bv: map[5],
        wo: map[6],
        bo: map[7],
        ln1_g: map[8],
        ln1_b: map[9],
        w1: map[10],
        b1: map[11],
        w2: map[12],
        b2: map[13],
        ln2_g: map[14],
        ln2_b: map[15],
    };
    let report = check_gradients(
        &store,
        |g, p| {
            let h = g.constant(x.clone());
            let y = transformer_layer(g, p, &local, h, h, 2, Some(mask.clone()), 1e-5)?;
            let wn = g.constant(wts.clone());
            let s = g.mul(y, wn)?;
            Ok(g.sum_all(s))
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "{}", report.render());
}

#[test]
fn two_layer_sentence_encoder_gradcheck() {
    let mut c = cfg();
    c.sent_layers = 2;
    c.init_range = 0.5;
    let m: Model<f64> = Model::new(c, 4).unwrap();
    let w = words(4, 2);
    let masks = causal_masks(4, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let wts = layers::uniform::<f64>(&mut rng, &[6, 8], 1.0);
    let report = check_gradients(
        &m.params,
        |g, p| {
            let mm = m.with_params(p.clone());
            let h0 = mm.embed_words(g, &w)?;
            let y = mm.encode_sentence(g, h0, Some(masks.word_self.clone()))?;
            let wn = g.constant(wts.clone());
            let s = g.mul(y, wn)?;
            Ok(g.sum_all(s))
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    let sent: Vec<_> = report.entries.iter().filter(|e| e.name.starts_with("sent.")).collect();
    assert!(!sent.is_empty());
    assert!(report.passed(), "{}", report.render());
}

#[test]
fn full_model_gradcheck() {
    let m = model64();
    let r = regions(3, 12, 12);
    let w = words(4, 12);
    let masks = causal_masks(4, 3);
    let flags = [true, false, false];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ww = layers::uniform::<f64>(&mut rng, &[6, 8], 1.0);
    let wr = layers::uniform::<f64>(&mut rng, &[4, 8], 1.0);
    let report = check_gradients(
        &m.params,
        |g, p| {
            let mm = m.with_params(p.clone());
            let o = mm.forward_full(g, &r, &w, &masks, Some(&flags))?;
            let a = g.constant(ww.clone());
            let b = g.constant(wr.clone());
            let x = g.mul(o.dec_words, a)?;
            let y = g.mul(o.dec_regions, b)?;
            let (x, y) = (g.sum_all(x), g.sum_all(y));
            let z = mm.lm_logits(g, o.dec_words)?;
            let nll = g.nll_rows(z, &[5, 6, 7, 8, 9, 10])?;
            let nll = g.sum_all(nll);
            let s = g.add(x, y)?;
            g.add(s, nll)
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "{}", report.render());
}
